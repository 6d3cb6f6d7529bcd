//! Noise-level parameterizations and reverse-time grids.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Noise-level parameterization of the forward process
/// `q(z_t | x) = N(z_t | alpha(t) x, sigma(t)^2 I)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseParam {
    /// Variance exploding: `alpha(t) = 1`, `sigma(t) = t`.
    Ve,
    /// Variance preserving: `alpha(t) = exp(-t^2 (beta_max - beta_min)/4 - t beta_min/2)`,
    /// `sigma(t) = sqrt(1 - alpha(t)^2)`.
    Vp { beta_min: f64, beta_max: f64 },
}

impl NoiseParam {
    pub fn vp_default() -> Self {
        NoiseParam::Vp {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }

    pub fn is_ve(&self) -> bool {
        matches!(self, NoiseParam::Ve)
    }

    fn log_alpha(&self, t: f64) -> f64 {
        match self {
            NoiseParam::Ve => 0.0,
            NoiseParam::Vp { beta_min, beta_max } => {
                -0.25 * t * t * (beta_max - beta_min) - 0.5 * t * beta_min
            }
        }
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self {
            NoiseParam::Ve => 1.0,
            NoiseParam::Vp { .. } => self.log_alpha(t).exp(),
        }
    }

    pub fn sigma(&self, t: f64) -> f64 {
        match self {
            NoiseParam::Ve => t,
            NoiseParam::Vp { .. } => (-(2.0 * self.log_alpha(t)).exp_m1()).max(0.0).sqrt(),
        }
    }

    /// The rescaled noise level `sigma_tilde(t) = sigma(t) / alpha(t)`.
    pub fn sigma_tilde(&self, t: f64) -> f64 {
        match self {
            NoiseParam::Ve => t,
            NoiseParam::Vp { .. } => ((-2.0 * self.log_alpha(t)).exp_m1()).max(0.0).sqrt(),
        }
    }

    /// `d log(alpha) / dt`.
    pub fn dlog_alpha(&self, t: f64) -> f64 {
        match self {
            NoiseParam::Ve => 0.0,
            NoiseParam::Vp { beta_min, beta_max } => -0.5 * (t * (beta_max - beta_min) + beta_min),
        }
    }

    /// `d sigma_tilde / dt`.
    pub fn dsigma_tilde(&self, t: f64) -> f64 {
        match self {
            NoiseParam::Ve => 1.0,
            NoiseParam::Vp { .. } => {
                let st = self.sigma_tilde(t);
                // d/dt sqrt(exp(-2 log a) - 1) = -exp(-2 log a) dlog_a / sigma_tilde
                -(-2.0 * self.log_alpha(t)).exp() * self.dlog_alpha(t) / st
            }
        }
    }

    /// Returns `(alpha(t), sigma(t))`.
    pub fn noise_level(&self, t: f64) -> (f64, f64) {
        (self.alpha(t), self.sigma(t))
    }
}

/// Returns `(alpha(t), sigma(t))` for the given parameterization.
pub fn noise_level(param: &NoiseParam, t: f64) -> (f64, f64) {
    param.noise_level(t)
}

/// Grid construction rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridKind {
    /// `t_i = (t_max^(1/rho) + (i/n) (t_min^(1/rho) - t_max^(1/rho)))^rho`.
    EdmRho,
    /// Equal slot widths from `t_max` down to `t_min`.
    Uniform,
    /// Quadratic spacing (the rho rule with exponent 2).
    Quadratic,
}

/// Descending reverse-time schedule `t_0 > t_1 > ... > t_N >= 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
    param: NoiseParam,
}

impl TimeGrid {
    /// Builds a grid directly from an explicit descending time list.
    pub fn from_times(times: Vec<f64>, param: NoiseParam) -> Result<Self> {
        if times.len() < 2 {
            return Err(Error::InvalidGrid("need at least two times".into()));
        }
        for w in times.windows(2) {
            if !(w[1] < w[0]) {
                return Err(Error::InvalidGrid(format!(
                    "times must be strictly decreasing, got {} then {}",
                    w[0], w[1]
                )));
            }
        }
        if times[times.len() - 1] < 0.0 {
            return Err(Error::InvalidGrid("final time must be >= 0".into()));
        }
        Ok(TimeGrid { times, param })
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    /// Number of steps N (one less than the number of grid times).
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn param(&self) -> &NoiseParam {
        &self.param
    }

    pub fn slot_width(&self, i: usize) -> f64 {
        self.times[i + 1] - self.times[i]
    }

    /// True when the step into `t_{i+1}` is the Euler-only terminal step.
    pub fn terminal_step(&self, i: usize) -> bool {
        self.param.sigma(self.times[i + 1]) == 0.0
    }

    /// Digest of the grid times and parameterization, used to bind
    /// coefficient tables to the grid they were calibrated on.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        match &self.param {
            NoiseParam::Ve => hasher.update(b"ve"),
            NoiseParam::Vp { beta_min, beta_max } => {
                hasher.update(b"vp");
                hasher.update(beta_min.to_bits().to_le_bytes());
                hasher.update(beta_max.to_bits().to_le_bytes());
            }
        }
        for t in &self.times {
            hasher.update(t.to_bits().to_le_bytes());
        }
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Builds a reverse-time grid with `n + 1` formula points from `t_max` down to
/// `t_min`, optionally followed by an exact terminal 0.
pub fn build_grid(
    kind: GridKind,
    n: usize,
    t_min: f64,
    t_max: f64,
    rho: f64,
    terminal_zero: bool,
    param: NoiseParam,
) -> Result<TimeGrid> {
    if n < 2 {
        return Err(Error::InvalidGrid(format!("step count {n} < 2")));
    }
    if !(t_max > 0.0) || t_min < 0.0 {
        return Err(Error::InvalidGrid(format!(
            "bounds must satisfy t_max > 0 and t_min >= 0, got [{t_min}, {t_max}]"
        )));
    }
    if t_min >= t_max {
        return Err(Error::InvalidGrid(format!(
            "t_min {t_min} must be below t_max {t_max}"
        )));
    }
    let rho = match kind {
        GridKind::EdmRho => {
            if !(rho > 0.0) {
                return Err(Error::InvalidGrid(format!("rho {rho} must be positive")));
            }
            rho
        }
        GridKind::Uniform => 1.0,
        GridKind::Quadratic => 2.0,
    };

    let mut times = Vec::with_capacity(n + 2);
    let inv = 1.0 / rho;
    let a = t_max.powf(inv);
    let b = t_min.powf(inv);
    for i in 0..=n {
        let frac = i as f64 / n as f64;
        times.push((a + frac * (b - a)).powf(rho));
    }
    // Endpoints exactly as requested.
    times[0] = t_max;
    times[n] = t_min;
    if terminal_zero && t_min > 0.0 {
        times.push(0.0);
    }
    TimeGrid::from_times(times, param)
}

/// Uniform refinement of slot `[t_i, t_{i+1}]` into `M` sub-slots:
/// `t_{i+m/M} = t_i + (t_{i+1} - t_i) m / M`, endpoints bit-exact.
pub fn refine_slot(grid: &TimeGrid, i: usize, m: usize) -> Result<Vec<f64>> {
    if i >= grid.steps() {
        return Err(Error::StepOutOfRange {
            index: i,
            steps: grid.steps(),
        });
    }
    if m == 0 {
        return Err(Error::InvalidRefinement);
    }
    let t0 = grid.time(i);
    let t1 = grid.time(i + 1);
    let width = t1 - t0;
    let mut out = Vec::with_capacity(m + 1);
    out.push(t0);
    for k in 1..m {
        out.push(t0 + width * k as f64 / m as f64);
    }
    out.push(t1);
    Ok(out)
}
