//! Baseline ODE steppers (Heun/EDM, DDIM, multistep DPM-Solver, SPNDM,
//! IPNDM) and the trajectory runner that records the per-step terms the
//! calibration layer consumes.

use crate::error::{Error, Result};
use crate::iia::{iia_step, CoefficientTable, VariantId};
use crate::schedule::{NoiseParam, TimeGrid};
use crate::score::{convert_predictions, guided_prediction, Condition, Given, Prediction, ScoreModel};

/// The evolving sample with its position on the grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionState {
    pub z: Vec<f64>,
    pub i: usize,
    pub t: f64,
}

impl DiffusionState {
    pub fn initial(z: Vec<f64>, grid: &TimeGrid) -> Self {
        DiffusionState {
            z,
            i: 0,
            t: grid.time(0),
        }
    }
}

/// Per-step terms produced by a stepper. Only the fields the stepper actually
/// evaluates are populated; consuming an absent field is an error.
#[derive(Debug, Clone, Default)]
pub struct StepRecord {
    pub i: usize,
    pub t: f64,
    pub z: Vec<f64>,
    /// Drift d_i at (z_i, t_i).
    pub drift: Option<Vec<f64>>,
    /// Drift d'_{i+1|i} at the Euler-predicted point.
    pub drift_pred: Option<Vec<f64>>,
    /// Denoiser evaluation D(z_i, t_i).
    pub denoised: Option<Vec<f64>>,
    /// Denoiser evaluation D(z~_{i+1}, t_{i+1}).
    pub denoised_pred: Option<Vec<f64>>,
    /// Raw driving noise prediction at z_i (guided variants store the
    /// combined guided noise here).
    pub noise: Option<Vec<f64>>,
    /// Multistep-combined noise (eps-tilde), where the variant forms one.
    pub noise_combined: Option<Vec<f64>>,
    /// Clean-sample estimate used by the variant's update.
    pub x_hat: Option<Vec<f64>>,
}

impl StepRecord {
    fn base(state: &DiffusionState) -> Self {
        StepRecord {
            i: state.i,
            t: state.t,
            z: state.z.clone(),
            ..StepRecord::default()
        }
    }

    pub fn field(&self, name: &'static str) -> Result<&[f64]> {
        let v = match name {
            "drift" => &self.drift,
            "drift_pred" => &self.drift_pred,
            "denoised" => &self.denoised,
            "denoised_pred" => &self.denoised_pred,
            "noise" => &self.noise,
            "noise_combined" => &self.noise_combined,
            "x_hat" => &self.x_hat,
            _ => &None,
        };
        v.as_deref().ok_or(Error::UnpopulatedRecord {
            field: name,
            step: self.i,
        })
    }
}

/// Baseline solver family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolverKind {
    Heun,
    Ddim,
    Dpm2m,
    Spndm,
    Ipndm,
}

/// Bundles a score model with its conditioning mode so steppers see a single
/// prediction interface.
pub struct Predictor<'a> {
    model: &'a dyn ScoreModel,
    cond: Condition,
    guidance: Option<f64>,
}

impl<'a> Predictor<'a> {
    pub fn plain(model: &'a dyn ScoreModel, cond: Condition) -> Self {
        Predictor {
            model,
            cond,
            guidance: None,
        }
    }

    pub fn guided(model: &'a dyn ScoreModel, cond: Condition, scale: f64) -> Self {
        Predictor {
            model,
            cond,
            guidance: Some(scale),
        }
    }

    pub fn dim(&self) -> usize {
        self.model.dim()
    }

    pub fn model(&self) -> &dyn ScoreModel {
        self.model
    }

    /// Noise/denoised prediction at `(z, t)`; requires `sigma(t) > 0`.
    pub fn predict(&self, z: &[f64], t: f64, param: &NoiseParam) -> Result<Prediction> {
        match self.guidance {
            None => {
                let x_hat = self.model.denoise(z, t, param, &self.cond)?;
                convert_predictions(z, t, param, Given::Denoised(&x_hat))
            }
            Some(w) => guided_prediction(self.model, z, t, param, &self.cond, w),
        }
    }

    /// Denoiser evaluation; valid at `sigma(t) = 0` only for unguided runs.
    pub fn denoise(&self, z: &[f64], t: f64, param: &NoiseParam) -> Result<Vec<f64>> {
        match self.guidance {
            None => self.model.denoise(z, t, param, &self.cond),
            Some(_) => Ok(self.predict(z, t, param)?.denoised),
        }
    }
}

fn drift_with_denoised(
    pred: &Predictor,
    z: &[f64],
    t: f64,
    param: &NoiseParam,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let sigma_tilde = param.sigma_tilde(t);
    if sigma_tilde == 0.0 {
        return Err(Error::DegenerateNoise(format!(
            "drift undefined at sigma_tilde(t) = 0 (t = {t})"
        )));
    }
    let denoised = pred.denoise(z, t, param)?;
    let alpha = param.alpha(t);
    let coef_z = param.dlog_alpha(t) + param.dsigma_tilde(t) / sigma_tilde;
    let coef_d = param.dsigma_tilde(t) * alpha / sigma_tilde;
    let drift = z
        .iter()
        .zip(&denoised)
        .map(|(zi, di)| coef_z * zi - coef_d * di)
        .collect();
    Ok((drift, denoised))
}

/// Probability-flow drift `d(z, t)`; for VE this is `(z - D(z,t)) / t`.
pub fn ode_drift(pred: &Predictor, z: &[f64], t: f64, param: &NoiseParam) -> Result<Vec<f64>> {
    Ok(drift_with_denoised(pred, z, t, param)?.0)
}

fn check_step(state: &DiffusionState, grid: &TimeGrid) -> Result<(f64, f64)> {
    if state.i >= grid.steps() {
        return Err(Error::StepOutOfRange {
            index: state.i,
            steps: grid.steps(),
        });
    }
    Ok((grid.time(state.i), grid.time(state.i + 1)))
}

/// Improved-Euler (Heun) step; the terminal step with `sigma(t_{i+1}) = 0`
/// downgrades to plain Euler.
pub fn heun_step(
    pred: &Predictor,
    state: &DiffusionState,
    grid: &TimeGrid,
) -> Result<(DiffusionState, StepRecord)> {
    let (t0, t1) = check_step(state, grid)?;
    let param = grid.param();
    let width = t1 - t0;
    let (d0, den0) = drift_with_denoised(pred, &state.z, t0, param)?;
    let z_pred: Vec<f64> = state
        .z
        .iter()
        .zip(&d0)
        .map(|(z, d)| z + width * d)
        .collect();
    let mut record = StepRecord::base(state);
    record.drift = Some(d0.clone());
    record.denoised = Some(den0);

    let z_next = if param.sigma(t1) == 0.0 {
        z_pred
    } else {
        let (d1, den1) = drift_with_denoised(pred, &z_pred, t1, param)?;
        let out = state
            .z
            .iter()
            .zip(&d0)
            .zip(&d1)
            .map(|((z, a), b)| z + width * 0.5 * (a + b))
            .collect();
        record.drift_pred = Some(d1);
        record.denoised_pred = Some(den1);
        out
    };
    Ok((
        DiffusionState {
            z: z_next,
            i: state.i + 1,
            t: t1,
        },
        record,
    ))
}

/// The Heun step rewritten as two gradient-descent terms (valid for VE):
/// `z_{i+1} = z_i + (dt/t_i)[z_i - D_i] + (dt/(2 t_{i+1}))[D_i - D'_{i+1}]`.
pub fn reformulated_heun_step(
    pred: &Predictor,
    state: &DiffusionState,
    grid: &TimeGrid,
) -> Result<DiffusionState> {
    if !grid.param().is_ve() {
        return Err(Error::Unsupported(
            "reformulated Heun update requires the VE parameterization".into(),
        ));
    }
    let (t0, t1) = check_step(state, grid)?;
    if t1 == 0.0 {
        return Err(Error::Unsupported(
            "reformulated Heun update is undefined on the terminal step".into(),
        ));
    }
    let param = grid.param();
    let width = t1 - t0;
    let den0 = pred.denoise(&state.z, t0, param)?;
    let z_pred: Vec<f64> = state
        .z
        .iter()
        .zip(&den0)
        .map(|(z, d)| z + (width / t0) * (z - d))
        .collect();
    let den1 = pred.denoise(&z_pred, t1, param)?;
    let z_next = state
        .z
        .iter()
        .zip(&den0)
        .zip(&den1)
        .map(|((z, d0), d1)| z + (width / t0) * (z - d0) + (width / (2.0 * t1)) * (d0 - d1))
        .collect();
    Ok(DiffusionState {
        z: z_next,
        i: state.i + 1,
        t: t1,
    })
}

fn ddim_update(
    z: &[f64],
    x_hat: &[f64],
    noise: &[f64],
    t1: f64,
    param: &NoiseParam,
) -> Vec<f64> {
    let (a1, s1) = param.noise_level(t1);
    let _ = z;
    x_hat
        .iter()
        .zip(noise)
        .map(|(x, e)| a1 * x + s1 * e)
        .collect()
}

/// First-order DDIM step `z_{i+1} = alpha_{i+1} x_hat + sigma_{i+1} eps_hat`.
pub fn ddim_step(
    pred: &Predictor,
    state: &DiffusionState,
    grid: &TimeGrid,
) -> Result<(DiffusionState, StepRecord)> {
    let (t0, t1) = check_step(state, grid)?;
    let param = grid.param();
    let p = pred.predict(&state.z, t0, param)?;
    let z_next = ddim_update(&state.z, &p.denoised, &p.noise, t1, param);
    let mut record = StepRecord::base(state);
    record.noise = Some(p.noise);
    record.x_hat = Some(p.denoised);
    Ok((
        DiffusionState {
            z: z_next,
            i: state.i + 1,
            t: t1,
        },
        record,
    ))
}

/// Previous clean-sample estimate carried by the multistep DPM-Solver.
#[derive(Debug, Clone)]
pub struct PrevXhat {
    pub x_hat: Vec<f64>,
    pub t: f64,
}

fn log_snr(param: &NoiseParam, t: f64) -> f64 {
    let (a, s) = param.noise_level(t);
    (a / s).ln()
}

/// Multistep second-order DPM-Solver step in data-prediction form. The first
/// step (no history) and the terminal step fall back to first order.
pub fn dpm2m_step(
    pred: &Predictor,
    state: &DiffusionState,
    grid: &TimeGrid,
    prev: Option<&PrevXhat>,
) -> Result<(DiffusionState, StepRecord)> {
    let (t0, t1) = check_step(state, grid)?;
    if state.i >= 1 && prev.is_none() {
        return Err(Error::MissingHistory(state.i));
    }
    let param = grid.param();
    let p = pred.predict(&state.z, t0, param)?;
    let mut record = StepRecord::base(state);
    record.noise = Some(p.noise.clone());
    record.x_hat = Some(p.denoised.clone());

    let (a1, s1) = param.noise_level(t1);
    let z_next = if s1 == 0.0 {
        p.denoised.iter().map(|x| a1 * x).collect()
    } else {
        let (_, s0) = param.noise_level(t0);
        let l0 = log_snr(param, t0);
        let l1 = log_snr(param, t1);
        let h = l1 - l0;
        let growth = -a1 * ((-h).exp() - 1.0);
        let effective: Vec<f64> = match prev {
            None => p.denoised.clone(),
            Some(prev) => {
                let l_prev = log_snr(param, prev.t);
                let ratio = (l0 - l_prev) / h;
                p.denoised
                    .iter()
                    .zip(&prev.x_hat)
                    .map(|(cur, old)| cur + (cur - old) / (2.0 * ratio))
                    .collect()
            }
        };
        state
            .z
            .iter()
            .zip(&effective)
            .map(|(z, x)| (s1 / s0) * z + growth * x)
            .collect()
    };
    Ok((
        DiffusionState {
            z: z_next,
            i: state.i + 1,
            t: t1,
        },
        record,
    ))
}

/// Second-order pseudo-linear-multistep step. Without history this is the
/// pseudo improved Euler start (predict, average the two noise estimates,
/// re-update); with one prior raw noise prediction it uses the
/// `(3 eps_i - eps_{i-1}) / 2` combination.
pub fn spndm_step(
    pred: &Predictor,
    state: &DiffusionState,
    grid: &TimeGrid,
    prev_noise: Option<&[f64]>,
) -> Result<(DiffusionState, StepRecord)> {
    let (t0, t1) = check_step(state, grid)?;
    if state.i >= 1 && prev_noise.is_none() {
        return Err(Error::MissingHistory(state.i));
    }
    let param = grid.param();
    let p = pred.predict(&state.z, t0, param)?;
    let (a0, s0) = param.noise_level(t0);
    let mut record = StepRecord::base(state);
    record.noise = Some(p.noise.clone());

    let combined: Vec<f64> = match prev_noise {
        Some(prev) => p.noise.iter().zip(prev).map(|(c, o)| (3.0 * c - o) / 2.0).collect(),
        None => {
            if param.sigma(t1) == 0.0 {
                // Terminal first step: nothing to correct against.
                p.noise.clone()
            } else {
                let z_euler = ddim_update(&state.z, &p.denoised, &p.noise, t1, param);
                let p_next = pred.predict(&z_euler, t1, param)?;
                p.noise
                    .iter()
                    .zip(&p_next.noise)
                    .map(|(a, b)| 0.5 * (a + b))
                    .collect()
            }
        }
    };
    let x_hat: Vec<f64> = state
        .z
        .iter()
        .zip(&combined)
        .map(|(z, e)| (z - s0 * e) / a0)
        .collect();
    let z_next = ddim_update(&state.z, &x_hat, &combined, t1, param);
    record.noise_combined = Some(combined);
    record.x_hat = Some(x_hat);
    Ok((
        DiffusionState {
            z: z_next,
            i: state.i + 1,
            t: t1,
        },
        record,
    ))
}

/// Adams-Bashforth noise-combination weights for history depth `h`.
pub fn ipndm_weights(depth: usize) -> &'static [f64] {
    const W0: [f64; 1] = [1.0];
    const W1: [f64; 2] = [3.0 / 2.0, -1.0 / 2.0];
    const W2: [f64; 3] = [23.0 / 12.0, -16.0 / 12.0, 5.0 / 12.0];
    const W3: [f64; 4] = [55.0 / 24.0, -59.0 / 24.0, 37.0 / 24.0, -9.0 / 24.0];
    match depth {
        0 => &W0,
        1 => &W1,
        2 => &W2,
        _ => &W3,
    }
}

/// Fourth-order pseudo-linear-multistep step. `history` holds up to three
/// prior raw noise predictions, most recent first.
pub fn ipndm_step(
    pred: &Predictor,
    state: &DiffusionState,
    grid: &TimeGrid,
    history: &[&[f64]],
) -> Result<(DiffusionState, StepRecord)> {
    let (t0, t1) = check_step(state, grid)?;
    let param = grid.param();
    let p = pred.predict(&state.z, t0, param)?;
    let depth = history.len().min(3);
    let weights = ipndm_weights(depth);
    let mut combined: Vec<f64> = p.noise.iter().map(|e| weights[0] * e).collect();
    for (j, prev) in history.iter().take(depth).enumerate() {
        for (c, e) in combined.iter_mut().zip(prev.iter()) {
            *c += weights[j + 1] * e;
        }
    }
    let (a0, s0) = param.noise_level(t0);
    let x_hat: Vec<f64> = state
        .z
        .iter()
        .zip(&combined)
        .map(|(z, e)| (z - s0 * e) / a0)
        .collect();
    let z_next = ddim_update(&state.z, &x_hat, &combined, t1, param);
    let mut record = StepRecord::base(state);
    record.noise = Some(p.noise);
    record.noise_combined = Some(combined);
    record.x_hat = Some(x_hat);
    Ok((
        DiffusionState {
            z: z_next,
            i: state.i + 1,
            t: t1,
        },
        record,
    ))
}

/// One baseline step of the given family, pulling whatever history it needs
/// from the records of earlier steps.
pub fn baseline_step(
    kind: SolverKind,
    pred: &Predictor,
    state: &DiffusionState,
    grid: &TimeGrid,
    records: &[StepRecord],
) -> Result<(DiffusionState, StepRecord)> {
    match kind {
        SolverKind::Heun => heun_step(pred, state, grid),
        SolverKind::Ddim => ddim_step(pred, state, grid),
        SolverKind::Dpm2m => {
            let prev = match records.last() {
                Some(r) if state.i >= 1 => Some(PrevXhat {
                    x_hat: r.field("x_hat")?.to_vec(),
                    t: r.t,
                }),
                _ => None,
            };
            dpm2m_step(pred, state, grid, prev.as_ref())
        }
        SolverKind::Spndm => {
            let prev = match records.last() {
                Some(r) if state.i >= 1 => Some(r.field("noise")?.to_vec()),
                _ => None,
            };
            spndm_step(pred, state, grid, prev.as_deref())
        }
        SolverKind::Ipndm => {
            let mut hist: Vec<&[f64]> = Vec::new();
            for r in records.iter().rev().take(3) {
                hist.push(r.field("noise")?);
            }
            ipndm_step(pred, state, grid, &hist)
        }
    }
}

/// Runs a full trajectory. With `coeffs` present, calibrated steps replace
/// the baseline combination rule; warm-up, degenerate and terminal steps stay
/// on the baseline.
pub fn run_sampler(
    variant: VariantId,
    pred: &Predictor,
    grid: &TimeGrid,
    z0: &[f64],
    coeffs: Option<&CoefficientTable>,
) -> Result<(DiffusionState, Vec<StepRecord>)> {
    if z0.len() != pred.dim() {
        return Err(Error::DimensionMismatch {
            expected: pred.dim(),
            got: z0.len(),
        });
    }
    if let Some(table) = coeffs {
        table.check_compatible(variant, grid)?;
    }
    let kind = variant.solver();
    let mut state = DiffusionState::initial(z0.to_vec(), grid);
    let mut records: Vec<StepRecord> = Vec::with_capacity(grid.steps());
    for _ in 0..grid.steps() {
        let (baseline_next, record) = baseline_step(kind, pred, &state, grid, &records)?;
        records.push(record);
        let next = match coeffs.and_then(|t| t.row_for_step(state.i)) {
            Some(row) if !grid.terminal_step(state.i) && !row.coeffs.is_empty() => iia_step(
                variant,
                &state,
                grid,
                &records,
                &baseline_next,
                &row.coeffs,
            )?,
            _ => baseline_next,
        };
        state = next;
    }
    Ok((state, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{keyed_rng, normal_vec};
    use crate::schedule::{build_grid, GridKind};
    use crate::score::{ve_single_gaussian_state, GaussianMixture, GmComponent};

    fn mixture() -> GaussianMixture {
        GaussianMixture::new(
            "solver-mix",
            vec![
                GmComponent {
                    weight: 0.7,
                    mean: vec![1.0, 0.5],
                    scale: 0.6,
                },
                GmComponent {
                    weight: 0.3,
                    mean: vec![-1.4, -0.2],
                    scale: 1.1,
                },
            ],
        )
        .unwrap()
    }

    fn ve_grid(n: usize, terminal: bool) -> TimeGrid {
        build_grid(GridKind::EdmRho, n, 0.1, 6.0, 7.0, terminal, NoiseParam::Ve).unwrap()
    }

    fn vp_grid(n: usize) -> TimeGrid {
        build_grid(
            GridKind::Uniform,
            n,
            1e-3,
            1.0,
            1.0,
            false,
            NoiseParam::vp_default(),
        )
        .unwrap()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
        for (x, y) in a.iter().zip(b) {
            assert!(
                (x - y).abs() <= tol * (1.0 + y.abs()),
                "{what}: {x} vs {y}"
            );
        }
    }

    /// VE denoiser chosen so the drift (z - D)/t is the constant `c`.
    struct ConstDrift {
        c: Vec<f64>,
    }

    impl ScoreModel for ConstDrift {
        fn dim(&self) -> usize {
            self.c.len()
        }
        fn model_id(&self) -> &str {
            "const-drift"
        }
        fn denoise(
            &self,
            z: &[f64],
            t: f64,
            _param: &NoiseParam,
            _cond: &Condition,
        ) -> Result<Vec<f64>> {
            Ok(z.iter().zip(&self.c).map(|(zi, ci)| zi - t * ci).collect())
        }
    }

    /// VE denoiser chosen so the drift is a*t^2 (state-free), with the exact
    /// flow z(t) = z0 + a*(t^3 - t0^3)/3.
    struct QuadDrift {
        a: Vec<f64>,
    }

    impl ScoreModel for QuadDrift {
        fn dim(&self) -> usize {
            self.a.len()
        }
        fn model_id(&self) -> &str {
            "quad-drift"
        }
        fn denoise(
            &self,
            z: &[f64],
            t: f64,
            _param: &NoiseParam,
            _cond: &Condition,
        ) -> Result<Vec<f64>> {
            Ok(z.iter().zip(&self.a).map(|(zi, ai)| zi - ai * t * t * t).collect())
        }
    }

    /// Model whose noise prediction is the fixed vector `e` at every state,
    /// so every multistep noise combination collapses to `e`.
    struct ConstNoise {
        e: Vec<f64>,
    }

    impl ScoreModel for ConstNoise {
        fn dim(&self) -> usize {
            self.e.len()
        }
        fn model_id(&self) -> &str {
            "const-noise"
        }
        fn denoise(
            &self,
            z: &[f64],
            t: f64,
            param: &NoiseParam,
            _cond: &Condition,
        ) -> Result<Vec<f64>> {
            let (a, s) = param.noise_level(t);
            Ok(z.iter().zip(&self.e).map(|(zi, ei)| (zi - s * ei) / a).collect())
        }
    }

    #[test]
    fn heun_integrates_constant_drift_exactly() {
        let model = ConstDrift { c: vec![2.0, -0.5] };
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = ve_grid(5, false);
        let state = DiffusionState::initial(vec![1.0, 4.0], &grid);
        let (next, rec) = heun_step(&pred, &state, &grid).unwrap();
        let w = grid.slot_width(0);
        assert_close(&next.z, &[1.0 + w * 2.0, 4.0 + w * -0.5], 1e-13, "constant drift");
        assert!(rec.drift_pred.is_some());
    }

    #[test]
    fn heun_single_step_error_is_third_order() {
        let model = QuadDrift { a: vec![1.0] };
        let pred = Predictor::plain(&model, Condition::Null);
        let mut errs = Vec::new();
        for n in [1usize, 2] {
            // One step of width 1/n starting at t=3.
            let t0 = 3.0;
            let t1 = t0 - 1.0 / n as f64;
            let grid = TimeGrid::from_times(vec![t0, t1], NoiseParam::Ve).unwrap();
            let state = DiffusionState::initial(vec![0.0], &grid);
            let (next, _) = heun_step(&pred, &state, &grid).unwrap();
            let exact = (t1 * t1 * t1 - t0 * t0 * t0) / 3.0;
            errs.push((next.z[0] - exact).abs());
        }
        let ratio = errs[0] / errs[1];
        assert!(
            (6.0..12.0).contains(&ratio),
            "halving the width should cut a local O(h^3) error ~8x: {errs:?}"
        );
    }

    #[test]
    fn terminal_step_downgrades_to_euler() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = ve_grid(4, true);
        let last = grid.steps() - 1;
        let mut state = DiffusionState::initial(vec![3.0, -1.0], &grid);
        let mut records = Vec::new();
        for _ in 0..last {
            let (next, rec) = heun_step(&pred, &state, &grid).unwrap();
            records.push(rec);
            state = next;
        }
        let (next, rec) = heun_step(&pred, &state, &grid).unwrap();
        assert!(rec.drift_pred.is_none() && rec.denoised_pred.is_none());
        let d = rec.drift.as_ref().unwrap();
        let w = grid.slot_width(last);
        let manual: Vec<f64> = state.z.iter().zip(d).map(|(z, di)| z + w * di).collect();
        assert_eq!(next.z, manual);
    }

    #[test]
    fn reformulated_update_matches_heun_on_ve() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = ve_grid(6, false);
        for b in 0..50u64 {
            let mut rng = keyed_rng(17, 4, b);
            let z0 = normal_vec(&mut rng, 2, grid.param().sigma(grid.time(0)));
            let mut state = DiffusionState::initial(z0, &grid);
            for _ in 0..grid.steps() {
                let (heun, _) = heun_step(&pred, &state, &grid).unwrap();
                let reform = reformulated_heun_step(&pred, &state, &grid).unwrap();
                assert_close(&reform.z, &heun.z, 1e-12, "two-gradient rewriting");
                state = heun;
            }
        }
    }

    #[test]
    fn reformulated_update_rejects_vp_and_terminal_slots() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let vp = vp_grid(4);
        let state = DiffusionState::initial(vec![0.1, 0.2], &vp);
        assert!(reformulated_heun_step(&pred, &state, &vp).is_err());
        let ve = ve_grid(4, true);
        let mut state = DiffusionState::initial(vec![0.1, 0.2], &ve);
        for _ in 0..ve.steps() - 1 {
            state = heun_step(&pred, &state, &ve).unwrap().0;
        }
        assert!(reformulated_heun_step(&pred, &state, &ve).is_err());
    }

    #[test]
    fn heun_trajectory_converges_to_the_closed_form_gaussian_flow() {
        let mean = vec![0.9, -0.4];
        let scale = 0.8;
        let model = GaussianMixture::new(
            "g",
            vec![GmComponent {
                weight: 1.0,
                mean: mean.clone(),
                scale,
            }],
        )
        .unwrap();
        let pred = Predictor::plain(&model, Condition::Null);
        let z0 = vec![4.0, 2.5];
        let mut errs = Vec::new();
        for n in [8usize, 16, 32] {
            let grid =
                build_grid(GridKind::Uniform, n, 0.5, 5.0, 1.0, false, NoiseParam::Ve).unwrap();
            let mut state = DiffusionState::initial(z0.clone(), &grid);
            for _ in 0..grid.steps() {
                state = heun_step(&pred, &state, &grid).unwrap().0;
            }
            let exact = ve_single_gaussian_state(&mean, scale, &z0, 5.0, 0.5);
            let err: f64 = state
                .z
                .iter()
                .zip(&exact)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            errs.push(err);
        }
        for w in errs.windows(2) {
            let ratio = w[0] / w[1];
            assert!(
                (3.0..5.5).contains(&ratio),
                "global second-order convergence expected: {errs:?}"
            );
        }
    }

    #[test]
    fn ddim_step_matches_algebraic_rearrangement() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = vp_grid(6);
        let param = grid.param();
        for b in 0..20u64 {
            let mut rng = keyed_rng(3, 8, b);
            let z = normal_vec(&mut rng, 2, 1.0);
            let state = DiffusionState::initial(z.clone(), &grid);
            let (next, rec) = ddim_step(&pred, &state, &grid).unwrap();
            // Same update written through the noise-ratio identity.
            let (a0, s0) = param.noise_level(grid.time(0));
            let (a1, s1) = param.noise_level(grid.time(1));
            let x_hat = rec.x_hat.as_ref().unwrap();
            let oracle: Vec<f64> = z
                .iter()
                .zip(x_hat)
                .map(|(zi, xi)| (s1 / s0) * zi + (a1 - s1 * a0 / s0) * xi)
                .collect();
            assert_close(&next.z, &oracle, 1e-12, "ratio-form update");
        }
    }

    #[test]
    fn ddim_terminal_step_returns_the_clean_estimate() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = ve_grid(4, true);
        let mut state = DiffusionState::initial(vec![2.0, -3.0], &grid);
        for _ in 0..grid.steps() - 1 {
            state = ddim_step(&pred, &state, &grid).unwrap().0;
        }
        let (next, rec) = ddim_step(&pred, &state, &grid).unwrap();
        assert_eq!(next.z, rec.x_hat.unwrap());
    }

    #[test]
    fn dpm_first_step_equals_ddim() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        for grid in [ve_grid(5, false), vp_grid(5)] {
            let state = DiffusionState::initial(vec![1.5, -0.7], &grid);
            let (ddim, _) = ddim_step(&pred, &state, &grid).unwrap();
            let (dpm, _) = dpm2m_step(&pred, &state, &grid, None).unwrap();
            assert_close(&dpm.z, &ddim.z, 1e-12, "order-one collapse");
        }
    }

    #[test]
    fn dpm_second_order_term_vanishes_for_a_stationary_estimate() {
        // Point-mass model: the clean estimate is the same at every state.
        let model = GaussianMixture::new(
            "point",
            vec![GmComponent {
                weight: 1.0,
                mean: vec![0.3, -0.8],
                scale: 0.0,
            }],
        )
        .unwrap();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = vp_grid(5);
        let state0 = DiffusionState::initial(vec![1.0, 1.0], &grid);
        let (state1, rec0) = dpm2m_step(&pred, &state0, &grid, None).unwrap();
        let prev = PrevXhat {
            x_hat: rec0.x_hat.unwrap(),
            t: rec0.t,
        };
        let (with_hist, _) = dpm2m_step(&pred, &state1, &grid, Some(&prev)).unwrap();
        let (ddim, _) = ddim_step(&pred, &state1, &grid).unwrap();
        assert_close(&with_hist.z, &ddim.z, 1e-12, "no curvature to correct");
    }

    #[test]
    fn dpm_requires_history_after_the_first_step() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = vp_grid(5);
        let state = DiffusionState {
            z: vec![0.0, 0.0],
            i: 1,
            t: grid.time(1),
        };
        assert!(matches!(
            dpm2m_step(&pred, &state, &grid, None),
            Err(Error::MissingHistory(1))
        ));
        assert!(matches!(
            spndm_step(&pred, &state, &grid, None),
            Err(Error::MissingHistory(1))
        ));
    }

    #[test]
    fn multistep_solvers_collapse_to_ddim_for_state_free_noise() {
        let model = ConstNoise { e: vec![0.7, -1.2] };
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = vp_grid(7);
        let z0 = vec![0.4, 0.9];
        let (ddim, _) = run_sampler(VariantId::IiaDdim, &pred, &grid, &z0, None).unwrap();
        for variant in [VariantId::IiaDpm2m, VariantId::IiaSpndm, VariantId::IiaIpndm] {
            let (out, _) = run_sampler(variant, &pred, &grid, &z0, None).unwrap();
            assert_close(&out.z, &ddim.z, 1e-12, variant.name());
        }
    }

    #[test]
    fn spndm_first_step_averages_the_two_noise_estimates() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = vp_grid(6);
        let param = grid.param();
        let state = DiffusionState::initial(vec![1.1, -0.3], &grid);
        let (next, rec) = spndm_step(&pred, &state, &grid, None).unwrap();
        // Re-derive: predict, Euler to t1, predict again, average, re-update.
        let p0 = pred.predict(&state.z, grid.time(0), param).unwrap();
        let z_euler = ddim_update(&state.z, &p0.denoised, &p0.noise, grid.time(1), param);
        let p1 = pred.predict(&z_euler, grid.time(1), param).unwrap();
        let avg: Vec<f64> = p0
            .noise
            .iter()
            .zip(&p1.noise)
            .map(|(a, b)| 0.5 * (a + b))
            .collect();
        assert_close(rec.noise_combined.as_ref().unwrap(), &avg, 1e-15, "averaged noise");
        let (a0, s0) = param.noise_level(grid.time(0));
        let x_hat: Vec<f64> = state
            .z
            .iter()
            .zip(&avg)
            .map(|(z, e)| (z - s0 * e) / a0)
            .collect();
        let manual = ddim_update(&state.z, &x_hat, &avg, grid.time(1), param);
        assert_close(&next.z, &manual, 1e-15, "re-update");
    }

    #[test]
    fn ipndm_weights_integrate_low_degree_polynomials_exactly() {
        // The depth-h weights reproduce the unit-interval integral of the
        // degree-h interpolant through samples at offsets 0, -1, ..., -h.
        for depth in 0..=3usize {
            let w = ipndm_weights(depth);
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            for deg in 0..=depth {
                let p = |x: f64| x.powi(deg as i32);
                let lead = 10.0;
                let combo: f64 = w
                    .iter()
                    .enumerate()
                    .map(|(j, wj)| wj * p(lead - j as f64))
                    .sum();
                let integral =
                    ((lead + 1.0).powi(deg as i32 + 1) - lead.powi(deg as i32 + 1))
                        / (deg as f64 + 1.0);
                assert!(
                    (combo - integral).abs() < 1e-9,
                    "depth {depth} degree {deg}: {combo} vs {integral}"
                );
            }
        }
    }

    #[test]
    fn ipndm_uses_at_most_three_history_entries() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = vp_grid(8);
        let state = DiffusionState {
            z: vec![0.5, 0.5],
            i: 4,
            t: grid.time(4),
        };
        let e1 = vec![0.1, 0.2];
        let e2 = vec![-0.3, 0.4];
        let e3 = vec![0.5, -0.6];
        let e4 = vec![9.0, 9.0];
        let h3: Vec<&[f64]> = vec![&e1, &e2, &e3];
        let h4: Vec<&[f64]> = vec![&e1, &e2, &e3, &e4];
        let (a, _) = ipndm_step(&pred, &state, &grid, &h3).unwrap();
        let (b, _) = ipndm_step(&pred, &state, &grid, &h4).unwrap();
        assert_eq!(a.z, b.z);
    }

    #[test]
    fn run_sampler_matches_a_manual_stepper_loop() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = ve_grid(6, true);
        let z0 = vec![2.2, -1.7];
        let (end, records) = run_sampler(VariantId::BiiaEdm, &pred, &grid, &z0, None).unwrap();
        assert_eq!(records.len(), grid.steps());
        let mut state = DiffusionState::initial(z0, &grid);
        for _ in 0..grid.steps() {
            state = heun_step(&pred, &state, &grid).unwrap().0;
        }
        assert_eq!(end.z, state.z);
        assert_eq!(end.t, 0.0);
    }

    #[test]
    fn run_sampler_rejects_dimension_mismatch() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = ve_grid(4, true);
        assert!(matches!(
            run_sampler(VariantId::BiiaEdm, &pred, &grid, &[1.0], None),
            Err(Error::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn out_of_range_step_is_rejected() {
        let model = mixture();
        let pred = Predictor::plain(&model, Condition::Null);
        let grid = ve_grid(4, true);
        let state = DiffusionState {
            z: vec![0.0, 0.0],
            i: grid.steps(),
            t: 0.0,
        };
        assert!(heun_step(&pred, &state, &grid).is_err());
    }
}
