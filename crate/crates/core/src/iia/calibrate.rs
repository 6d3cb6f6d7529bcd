//! Sequential greedy calibration: walk the batch down the grid step by
//! step, fit each step's coefficients against the fine-grained oracle, and
//! advance the batch with the freshly calibrated rule.

use crate::error::{Error, Result};
use crate::iia::{
    assemble_features, baseline_embedding, feature_count, fine_oracle, iia_step,
    solve_least_squares, CoefficientTable, StepCoefficients, Variant, TABLE_VERSION,
};
use crate::rng::{keyed_rng, normal_vec, CALIBRATION_STREAM};
use crate::schedule::TimeGrid;
use crate::score::{Condition, ScoreModel};
use crate::solvers::{baseline_step, DiffusionState, Predictor, StepRecord};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// How calibration states are generated while walking down the grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryPolicy {
    /// Advance with the already-calibrated rule (matches deployment).
    Iia,
    /// Advance with the uncalibrated baseline solver.
    Baseline,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationConfig {
    pub seed: u64,
    pub batch_size: usize,
    pub trajectory: TrajectoryPolicy,
    /// Guidance scale for the guided variant.
    pub guidance_scale: f64,
    /// Number of condition labels the guided variant averages over.
    pub condition_set_size: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            seed: 0,
            batch_size: 200,
            trajectory: TrajectoryPolicy::Iia,
            guidance_scale: 2.0,
            condition_set_size: 20,
        }
    }
}

/// Initial states `z0 ~ N(0, sigma(t_0)^2 I)` with optional per-sample
/// condition labels, keyed by `(seed, stream, sample index)`.
pub fn draw_initial_states(
    dim: usize,
    sigma0: f64,
    seed: u64,
    stream: u64,
    count: usize,
    labels: Option<&[String]>,
) -> Vec<(Vec<f64>, Condition)> {
    (0..count)
        .map(|b| {
            let mut rng = keyed_rng(seed, stream, b as u64);
            let z0 = normal_vec(&mut rng, dim, sigma0);
            let cond = match labels {
                Some(set) if !set.is_empty() => {
                    Condition::Label(set[rng.random_range(0..set.len())].clone())
                }
                _ => Condition::Null,
            };
            (z0, cond)
        })
        .collect()
}

struct Traj {
    state: DiffusionState,
    records: Vec<StepRecord>,
    cond: Condition,
}

struct PerSample {
    prev_state: DiffusionState,
    baseline_next: DiffusionState,
    features: Vec<Vec<f64>>,
    /// Full fine-grained increment.
    fine: Vec<f64>,
    /// Coarse baseline increment over the same slot.
    baseline_inc: Vec<f64>,
}

fn mean_sq_residual(combos: &[Vec<f64>], targets: &[Vec<f64>]) -> f64 {
    let total: f64 = combos
        .iter()
        .zip(targets)
        .map(|(c, t)| c.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum();
    total / combos.len() as f64
}

/// Calibrates every step with a nonzero destination noise level and returns
/// the complete coefficient table. Deterministic for a fixed seed,
/// independent of worker count.
pub fn calibrate(
    variant: &Variant,
    model: &dyn ScoreModel,
    grid: &TimeGrid,
    cfg: &CalibrationConfig,
) -> Result<CoefficientTable> {
    if cfg.batch_size == 0 {
        return Err(Error::Unsupported("calibration batch must be non-empty".into()));
    }
    let max_features = (0..grid.steps())
        .map(|i| feature_count(variant.id, variant.r, i))
        .max()
        .unwrap_or(0);
    if cfg.batch_size * model.dim() < max_features {
        return Err(Error::Unsupported(format!(
            "batch of {} states in {} dimensions cannot determine {} coefficients",
            cfg.batch_size,
            model.dim(),
            max_features
        )));
    }
    let labels: Option<Vec<String>> = if variant.id.is_guided() {
        let mut all = model.condition_labels();
        if all.is_empty() {
            return Err(Error::InvalidModel(
                "guided calibration requires a model with registered conditions".into(),
            ));
        }
        all.truncate(cfg.condition_set_size.max(1));
        Some(all)
    } else {
        None
    };

    let sigma0 = grid.param().sigma(grid.time(0));
    let mut trajs: Vec<Traj> = draw_initial_states(
        model.dim(),
        sigma0,
        cfg.seed,
        CALIBRATION_STREAM,
        cfg.batch_size,
        labels.as_deref(),
    )
    .into_iter()
    .map(|(z0, cond)| Traj {
        state: DiffusionState::initial(z0, grid),
        records: Vec::new(),
        cond,
    })
    .collect();

    let guidance = variant.id.is_guided().then_some(cfg.guidance_scale);
    let kind = variant.id.solver();
    let mut per_step = Vec::new();

    for i in 0..grid.steps() {
        let calibratable = !grid.terminal_step(i);
        let outs: Vec<PerSample> = trajs
            .par_iter_mut()
            .map(|traj| -> Result<PerSample> {
                let pred = match guidance {
                    Some(w) => Predictor::guided(model, traj.cond.clone(), w),
                    None => Predictor::plain(model, traj.cond.clone()),
                };
                let prev_state = traj.state.clone();
                let (baseline_next, rec) =
                    baseline_step(kind, &pred, &traj.state, grid, &traj.records)?;
                traj.records.push(rec);
                let (features, fine, baseline_inc) = if calibratable {
                    let fine = fine_oracle(variant.id, &pred, grid, i, &traj.records, variant.m)?;
                    let features = assemble_features(variant.id, variant.r, &traj.records, i)?;
                    let inc = baseline_next
                        .z
                        .iter()
                        .zip(&prev_state.z)
                        .map(|(a, b)| a - b)
                        .collect();
                    (features, fine, inc)
                } else {
                    (Vec::new(), Vec::new(), Vec::new())
                };
                Ok(PerSample {
                    prev_state,
                    baseline_next,
                    features,
                    fine,
                    baseline_inc,
                })
            })
            .collect::<Result<Vec<_>>>()?;

        let row = if calibratable {
            let additive = variant.id.is_additive();
            let targets: Vec<Vec<f64>> = outs
                .iter()
                .map(|o| {
                    if additive {
                        o.fine.iter().zip(&o.baseline_inc).map(|(f, b)| f - b).collect()
                    } else {
                        o.fine.clone()
                    }
                })
                .collect();
            let features: Vec<Vec<Vec<f64>>> = outs.iter().map(|o| o.features.clone()).collect();
            let solution = solve_least_squares(&features, &targets)?;
            let coeffs = if solution.degenerate && !solution.coeffs.is_empty() {
                baseline_embedding(variant.id, variant.r, grid, i)
            } else {
                solution.coeffs
            };

            let baseline_residuals: Vec<Vec<f64>> = outs
                .iter()
                .map(|o| o.baseline_inc.clone())
                .collect();
            let fines: Vec<Vec<f64>> = outs.iter().map(|o| o.fine.clone()).collect();
            let baseline_mse = mean_sq_residual(&baseline_residuals, &fines);
            let iia_mse = if coeffs.is_empty() || solution.degenerate {
                baseline_mse
            } else {
                let combos: Vec<Vec<f64>> = outs
                    .iter()
                    .map(|o| {
                        let mut v = if additive {
                            o.baseline_inc.clone()
                        } else {
                            vec![0.0; o.fine.len()]
                        };
                        for (c, f) in coeffs.iter().zip(&o.features) {
                            for (vi, fi) in v.iter_mut().zip(f) {
                                *vi += c * fi;
                            }
                        }
                        v
                    })
                    .collect();
                mean_sq_residual(&combos, &fines)
            };

            Some(StepCoefficients {
                i,
                coeffs,
                degenerate: solution.degenerate && !features[0].is_empty(),
                ridged: solution.ridged,
                baseline_mse,
                iia_mse,
            })
        } else {
            None
        };

        let apply_iia = matches!(cfg.trajectory, TrajectoryPolicy::Iia);
        for (traj, out) in trajs.iter_mut().zip(outs.into_iter()) {
            let next = match &row {
                Some(r) if apply_iia && !r.coeffs.is_empty() => iia_step(
                    variant.id,
                    &out.prev_state,
                    grid,
                    &traj.records,
                    &out.baseline_next,
                    &r.coeffs,
                )?,
                _ => out.baseline_next,
            };
            traj.state = next;
        }
        if let Some(r) = row {
            per_step.push(r);
        }
    }

    Ok(CoefficientTable {
        version: TABLE_VERSION,
        variant: variant.id,
        r: variant.r,
        m: variant.m,
        batch_size: cfg.batch_size,
        seed: cfg.seed,
        model_id: model.model_id().to_string(),
        grid_hash: grid.hash(),
        grid_times: grid.times().to_vec(),
        per_step,
    })
}
