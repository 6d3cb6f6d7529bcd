//! Calibrated integration: per-step feature assembly, the fine-grained
//! oracle, per-timestep least squares, and persisted coefficient tables.

mod calibrate;
mod lsq;
mod oracle;
mod table;

pub use calibrate::{calibrate, draw_initial_states, CalibrationConfig, TrajectoryPolicy};
pub use lsq::{closed_form_gamma_r0, solve_least_squares, LsqSolution};
pub use oracle::fine_oracle;
pub use table::{load_table, save_table, CoefficientTable, StepCoefficients, TABLE_VERSION};

use crate::error::{Error, Result};
use crate::schedule::TimeGrid;
use crate::solvers::{DiffusionState, SolverKind, StepRecord};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// The calibrated-sampler families.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantId {
    BiiaEdm,
    IiaEdm,
    IiaDdim,
    IiaDdimGuided,
    IiaDpm2m,
    IiaSpndm,
    IiaIpndm,
}

pub const ALL_VARIANTS: [VariantId; 7] = [
    VariantId::BiiaEdm,
    VariantId::IiaEdm,
    VariantId::IiaDdim,
    VariantId::IiaDdimGuided,
    VariantId::IiaDpm2m,
    VariantId::IiaSpndm,
    VariantId::IiaIpndm,
];

impl VariantId {
    pub fn name(self) -> &'static str {
        match self {
            VariantId::BiiaEdm => "biia_edm",
            VariantId::IiaEdm => "iia_edm",
            VariantId::IiaDdim => "iia_ddim",
            VariantId::IiaDdimGuided => "iia_ddim_guided",
            VariantId::IiaDpm2m => "iia_dpm2m",
            VariantId::IiaSpndm => "iia_spndm",
            VariantId::IiaIpndm => "iia_ipndm",
        }
    }

    /// Baseline solver the variant calibrates on top of.
    pub fn solver(self) -> SolverKind {
        match self {
            VariantId::BiiaEdm | VariantId::IiaEdm => SolverKind::Heun,
            VariantId::IiaDdim | VariantId::IiaDdimGuided => SolverKind::Ddim,
            VariantId::IiaDpm2m => SolverKind::Dpm2m,
            VariantId::IiaSpndm => SolverKind::Spndm,
            VariantId::IiaIpndm => SolverKind::Ipndm,
        }
    }

    /// EDM variants regress the full increment; the rest add corrections on
    /// top of the unmodified baseline update.
    pub fn is_additive(self) -> bool {
        !matches!(self, VariantId::BiiaEdm | VariantId::IiaEdm)
    }

    pub fn is_guided(self) -> bool {
        matches!(self, VariantId::IiaDdimGuided)
    }
}

impl fmt::Display for VariantId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_VARIANTS
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Unsupported(format!("unknown variant `{s}`")))
    }
}

/// A variant together with its calibration hyperparameters: history depth
/// `r` and fine-grained refinement count `m`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Variant {
    pub id: VariantId,
    pub r: usize,
    pub m: usize,
}

impl Variant {
    pub fn new(id: VariantId, r: usize, m: usize) -> Result<Self> {
        if m < 1 {
            return Err(Error::InvalidRefinement);
        }
        Ok(Variant { id, r, m })
    }
}

/// Effective history depth at step `i`: only `i` earlier records exist.
pub fn effective_depth(r: usize, i: usize) -> usize {
    r.min(i)
}

/// Number of feature vectors the variant uses at step `i`.
pub fn feature_count(variant: VariantId, r: usize, i: usize) -> usize {
    match variant {
        VariantId::BiiaEdm => effective_depth(r, i) + 1,
        VariantId::IiaEdm => 2 * (effective_depth(r, i) + 1),
        VariantId::IiaDdim | VariantId::IiaSpndm | VariantId::IiaIpndm => {
            if i >= 1 {
                2
            } else {
                0
            }
        }
        VariantId::IiaDdimGuided => 1,
        VariantId::IiaDpm2m => 2,
    }
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// Ordered feature vectors for step `i`, built from the recorded terms of
/// steps `i`, `i-1`, ..., `i - min(r, i)`. An empty list means the step has
/// no usable features (warm-up) and stays on the baseline rule.
pub fn assemble_features(
    variant: VariantId,
    r: usize,
    records: &[StepRecord],
    i: usize,
) -> Result<Vec<Vec<f64>>> {
    if i >= records.len() {
        return Err(Error::StepOutOfRange {
            index: i,
            steps: records.len(),
        });
    }
    let depth = effective_depth(r, i);
    let mut features = Vec::new();
    match variant {
        VariantId::BiiaEdm => {
            for k in 0..=depth {
                let rec = &records[i - k];
                let d0 = rec.field("drift")?;
                let d1 = rec.field("drift_pred")?;
                features.push(d0.iter().zip(d1).map(|(a, b)| 0.5 * (a + b)).collect());
            }
        }
        VariantId::IiaEdm => {
            for k in 0..=depth {
                let rec = &records[i - k];
                let den = rec.field("denoised")?;
                let den_pred = rec.field("denoised_pred")?;
                features.push(diff(&rec.z, den));
                features.push(diff(den, den_pred));
            }
        }
        VariantId::IiaDdim => {
            if i >= 1 {
                let cur = &records[i];
                let prev = &records[i - 1];
                features.push(diff(cur.field("x_hat")?, prev.field("x_hat")?));
                features.push(diff(cur.field("noise")?, prev.field("noise")?));
            }
        }
        VariantId::IiaDdimGuided => {
            features.push(records[i].field("noise")?.to_vec());
        }
        VariantId::IiaDpm2m => {
            features.push(records[i].z.clone());
            features.push(records[i].field("x_hat")?.to_vec());
        }
        VariantId::IiaSpndm | VariantId::IiaIpndm => {
            if i >= 1 {
                let cur = &records[i];
                let prev = &records[i - 1];
                features.push(diff(cur.field("x_hat")?, prev.field("x_hat")?));
                features.push(diff(
                    cur.field("noise_combined")?,
                    prev.field("noise_combined")?,
                ));
            }
        }
    }
    Ok(features)
}

/// Coefficient assignment under which the calibrated step reproduces the
/// baseline step exactly. For the EDM families these come from the
/// two-gradient rewriting of the Heun update (VE schedules); the additive
/// families embed at zero.
pub fn baseline_embedding(variant: VariantId, r: usize, grid: &TimeGrid, i: usize) -> Vec<f64> {
    let n = feature_count(variant, r, i);
    let mut coeffs = vec![0.0; n];
    let width = grid.slot_width(i);
    match variant {
        VariantId::BiiaEdm => coeffs[0] = width,
        VariantId::IiaEdm => {
            let t0 = grid.time(i);
            let t1 = grid.time(i + 1);
            coeffs[0] = width / t0;
            coeffs[1] = width / (2.0 * t1);
        }
        _ => {}
    }
    coeffs
}

/// Applies a calibrated step: the coefficient-weighted feature combination
/// replaces the full increment for the EDM families and corrects the
/// baseline update for the others. `records` must include the record the
/// baseline step just produced at `state.i`; `baseline_next` is that step's
/// result.
pub fn iia_step(
    variant: VariantId,
    state: &DiffusionState,
    grid: &TimeGrid,
    records: &[StepRecord],
    baseline_next: &DiffusionState,
    coeffs: &[f64],
) -> Result<DiffusionState> {
    let i = state.i;
    if grid.terminal_step(i) {
        return Err(Error::Unsupported(
            "the step into zero noise is never calibrated".into(),
        ));
    }
    // Recover the history depth the coefficient row was calibrated with.
    let r = match variant {
        VariantId::BiiaEdm => coeffs.len().saturating_sub(1),
        VariantId::IiaEdm => {
            if coeffs.len() < 2 || coeffs.len() % 2 != 0 {
                return Err(Error::TableMismatch(format!(
                    "step {i}: {} coefficients cannot index feature pairs",
                    coeffs.len()
                )));
            }
            coeffs.len() / 2 - 1
        }
        _ => 0,
    };
    let features = assemble_features(variant, r, records, i)?;
    if features.len() != coeffs.len() {
        return Err(Error::TableMismatch(format!(
            "step {i}: {} coefficients for {} features",
            coeffs.len(),
            features.len()
        )));
    }
    let base: &[f64] = if variant.is_additive() {
        &baseline_next.z
    } else {
        &state.z
    };
    let mut z = base.to_vec();
    for (c, f) in coeffs.iter().zip(&features) {
        for (zi, fi) in z.iter_mut().zip(f) {
            *zi += c * fi;
        }
    }
    Ok(DiffusionState {
        z,
        i: baseline_next.i,
        t: baseline_next.t,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{build_grid, GridKind, NoiseParam};
    use crate::score::{Condition, GaussianMixture, GmComponent};
    use crate::solvers::{baseline_step, ddim_step, heun_step, Predictor};

    fn mixture() -> GaussianMixture {
        GaussianMixture::new(
            "m",
            vec![
                GmComponent {
                    weight: 0.6,
                    mean: vec![1.0, -0.5],
                    scale: 0.8,
                },
                GmComponent {
                    weight: 0.4,
                    mean: vec![-1.2, 0.7],
                    scale: 1.1,
                },
            ],
        )
        .unwrap()
    }

    fn ve_grid(n: usize) -> TimeGrid {
        build_grid(GridKind::EdmRho, n, 0.02, 10.0, 7.0, true, NoiseParam::Ve).unwrap()
    }

    fn advance(
        kind: SolverKind,
        pred: &Predictor,
        grid: &TimeGrid,
        z0: Vec<f64>,
        upto: usize,
    ) -> (DiffusionState, Vec<StepRecord>) {
        let mut state = DiffusionState::initial(z0, grid);
        let mut records = Vec::new();
        for _ in 0..upto {
            let (next, rec) = baseline_step(kind, pred, &state, grid, &records).unwrap();
            records.push(rec);
            state = next;
        }
        (state, records)
    }

    #[test]
    fn feature_counts_match_variant() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = ve_grid(6);
        let (state, mut records) = advance(SolverKind::Heun, &pred, &grid, vec![3.0, -2.0], 2);
        let (_, rec) = heun_step(&pred, &state, &grid).unwrap();
        records.push(rec);
        let f = assemble_features(VariantId::IiaEdm, 0, &records, 2).unwrap();
        assert_eq!(f.len(), 2);
        let f = assemble_features(VariantId::IiaEdm, 1, &records, 2).unwrap();
        assert_eq!(f.len(), 4);
        let f = assemble_features(VariantId::BiiaEdm, 3, &records, 2).unwrap();
        assert_eq!(f.len(), 3);
    }

    #[test]
    fn duplicated_history_duplicates_biia_features() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = ve_grid(6);
        let (state, mut records) = advance(SolverKind::Heun, &pred, &grid, vec![0.5, 0.1], 1);
        let (_, rec) = heun_step(&pred, &state, &grid).unwrap();
        records.push(rec);
        records[0] = records[1].clone();
        let f = assemble_features(VariantId::BiiaEdm, 1, &records, 1).unwrap();
        assert_eq!(f[0], f[1]);
    }

    #[test]
    fn ddim_difference_features_vanish_for_identical_records() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = ve_grid(6);
        let (state, mut records) = advance(SolverKind::Ddim, &pred, &grid, vec![1.0, 2.0], 1);
        let (_, rec) = ddim_step(&pred, &state, &grid).unwrap();
        records.push(rec);
        records[0] = records[1].clone();
        let f = assemble_features(VariantId::IiaDdim, 0, &records, 1).unwrap();
        assert!(f.iter().flatten().all(|x| *x == 0.0));
    }

    #[test]
    fn warm_up_steps_have_no_difference_features() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = ve_grid(6);
        let (_, records) = advance(SolverKind::Ddim, &pred, &grid, vec![1.0, 2.0], 1);
        assert!(assemble_features(VariantId::IiaDdim, 0, &records, 0)
            .unwrap()
            .is_empty());
        assert_eq!(feature_count(VariantId::IiaDdim, 0, 0), 0);
    }

    #[test]
    fn biia_embedding_recovers_heun_step() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = ve_grid(8);
        for i in [0usize, 2, 4] {
            let (state, mut records) =
                advance(SolverKind::Heun, &pred, &grid, vec![2.0, -1.0], i);
            let (baseline, rec) = heun_step(&pred, &state, &grid).unwrap();
            records.push(rec);
            for (variant, r) in [(VariantId::BiiaEdm, 1), (VariantId::IiaEdm, 1)] {
                let coeffs = baseline_embedding(variant, r, &grid, i);
                let out =
                    iia_step(variant, &state, &grid, &records, &baseline, &coeffs).unwrap();
                for (a, b) in out.z.iter().zip(&baseline.z) {
                    assert!(
                        (a - b).abs() <= 1e-12 * (1.0 + b.abs()),
                        "{variant} step {i}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn zero_coefficients_recover_additive_baselines() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = ve_grid(8);
        for variant in [VariantId::IiaDdim, VariantId::IiaDpm2m, VariantId::IiaSpndm] {
            let kind = variant.solver();
            let (state, mut records) = advance(kind, &pred, &grid, vec![0.3, 1.4], 2);
            let (baseline, rec) = baseline_step(kind, &pred, &state, &grid, &records).unwrap();
            records.push(rec);
            let coeffs = baseline_embedding(variant, 0, &grid, 2);
            assert!(coeffs.iter().all(|c| *c == 0.0));
            let out = iia_step(variant, &state, &grid, &records, &baseline, &coeffs).unwrap();
            assert_eq!(out.z, baseline.z);
        }
    }

    #[test]
    fn coefficient_count_mismatch_is_rejected() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = ve_grid(6);
        let (state, mut records) = advance(SolverKind::Heun, &pred, &grid, vec![1.0, 1.0], 0);
        let (baseline, rec) = heun_step(&pred, &state, &grid).unwrap();
        records.push(rec);
        // Depth-2 row at step 0: only one record of history exists.
        let bad = vec![0.1, 0.2, 0.3];
        assert!(iia_step(VariantId::BiiaEdm, &state, &grid, &records, &baseline, &bad).is_err());
    }
}
