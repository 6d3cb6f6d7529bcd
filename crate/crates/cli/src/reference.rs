//! Converged reference terminal states: closed form where available,
//! otherwise the Heun baseline on a globally refined grid with a
//! self-convergence gate.

use anyhow::{bail, Result};
use iia_core::schedule::refine_slot;
use iia_core::solvers::heun_step;
use iia_core::{DiffusionState, Predictor, TimeGrid};

/// Concatenated uniform refinement of every slot.
fn refine_grid(grid: &TimeGrid, m: usize) -> Result<TimeGrid> {
    let mut times = vec![grid.time(0)];
    for i in 0..grid.steps() {
        times.extend_from_slice(&refine_slot(grid, i, m)?[1..]);
    }
    Ok(TimeGrid::from_times(times, grid.param().clone())?)
}

fn heun_terminal(pred: &Predictor, grid: &TimeGrid, z0: &[f64]) -> Result<Vec<f64>> {
    let mut state = DiffusionState::initial(z0.to_vec(), grid);
    for _ in 0..grid.steps() {
        state = heun_step(pred, &state, grid)?.0;
    }
    Ok(state.z)
}

/// Terminal state of the probability-flow ODE from `z0` at `t_0` down to
/// `t_N`, as a converged numerical reference: the Heun baseline at
/// refinements `m_ref` and `2 * m_ref` per slot, gated on their mutual
/// agreement and combined by Richardson extrapolation (the stepper is
/// second order, so `(4 fine - coarse) / 3` cancels the leading error).
///
/// For an isotropic single-Gaussian VE model, prefer
/// [`iia_core::score::ve_single_gaussian_state`], which is exact.
pub fn reference_terminal(
    pred: &Predictor,
    grid: &TimeGrid,
    z0: &[f64],
    m_ref: usize,
) -> Result<Vec<f64>> {
    if m_ref < 32 {
        bail!("reference refinement must be at least 32, got {m_ref}");
    }
    let coarse = heun_terminal(pred, &refine_grid(grid, m_ref)?, z0)?;
    let fine = heun_terminal(pred, &refine_grid(grid, 2 * m_ref)?, z0)?;
    let diff: f64 = coarse
        .iter()
        .zip(&fine)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    // The discretization error grows with the starting point, not just the
    // terminal state, so the gate is relative to whichever is larger.
    let scale = fine
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(z0.iter().map(|x| x * x).sum::<f64>().sqrt());
    if diff > 1e-3 * (1.0 + scale) {
        bail!(
            "reference failed its self-convergence gate: refinements {} and {} differ by {:e}",
            m_ref,
            2 * m_ref,
            diff
        );
    }
    Ok(coarse
        .iter()
        .zip(&fine)
        .map(|(c, f)| (4.0 * f - c) / 3.0)
        .collect())
}
