//! Fine-grained integration target: the baseline solver run over a uniform
//! refinement of one slot, accumulating the per-sub-step increments.

use crate::error::Result;
use crate::iia::VariantId;
use crate::schedule::{refine_slot, TimeGrid};
use crate::solvers::{
    ddim_step, dpm2m_step, heun_step, ipndm_step, spndm_step, DiffusionState, Predictor,
    PrevXhat, SolverKind, StepRecord,
};

/// Accumulated increment of the variant's baseline solver over
/// `refine_slot(grid, i, m)`, starting from the state recorded at step `i`.
/// Multistep solvers seed their first fine step from the coarse records, so
/// `m = 1` reproduces the coarse increment bit-exactly.
///
/// `records` must cover steps `0..=i`; `records[i].z` is the start state.
pub fn fine_oracle(
    variant: VariantId,
    pred: &Predictor,
    grid: &TimeGrid,
    i: usize,
    records: &[StepRecord],
    m: usize,
) -> Result<Vec<f64>> {
    let fine = TimeGrid::from_times(refine_slot(grid, i, m)?, grid.param().clone())?;
    let kind = variant.solver();
    // Chronological history seed: the most recent coarse records before i.
    let depth = match kind {
        SolverKind::Ipndm => 3,
        SolverKind::Dpm2m | SolverKind::Spndm => 1,
        _ => 0,
    };
    let start = i.saturating_sub(depth);
    let mut history: Vec<StepRecord> = records[start..i].to_vec();

    let mut state = DiffusionState::initial(records[i].z.clone(), &fine);
    let mut increment = vec![0.0; state.z.len()];
    for _ in 0..fine.steps() {
        let (next, rec) = match kind {
            SolverKind::Heun => heun_step(pred, &state, &fine)?,
            SolverKind::Ddim => ddim_step(pred, &state, &fine)?,
            SolverKind::Dpm2m => {
                let prev = match history.last() {
                    Some(r) => Some(PrevXhat {
                        x_hat: r.field("x_hat")?.to_vec(),
                        t: r.t,
                    }),
                    None => None,
                };
                dpm2m_step(pred, &state, &fine, prev.as_ref())?
            }
            SolverKind::Spndm => {
                let prev = match history.last() {
                    Some(r) => Some(r.field("noise")?.to_vec()),
                    None => None,
                };
                spndm_step(pred, &state, &fine, prev.as_deref())?
            }
            SolverKind::Ipndm => {
                let mut hist: Vec<&[f64]> = Vec::new();
                for r in history.iter().rev().take(3) {
                    hist.push(r.field("noise")?);
                }
                ipndm_step(pred, &state, &fine, &hist)?
            }
        };
        for ((acc, a), b) in increment.iter_mut().zip(&next.z).zip(&state.z) {
            *acc += a - b;
        }
        history.push(rec);
        state = next;
    }
    Ok(increment)
}
