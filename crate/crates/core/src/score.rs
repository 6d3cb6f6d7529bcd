//! Analytic score models: Gaussian mixtures with closed-form densities,
//! scores and denoisers, plus prediction-form conversions and the
//! classifier-free guidance combiner.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::normal_vec;
use crate::schedule::NoiseParam;

/// Conditioning label for an evaluation. `Null` is the unconditional model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Condition {
    Null,
    Label(String),
}

impl Condition {
    pub fn label(name: impl Into<String>) -> Self {
        Condition::Label(name.into())
    }
}

/// Noise and data predictions at one `(z, t)` point, kept consistent through
/// `x_hat = (z - sigma eps_hat) / alpha`.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub noise: Vec<f64>,
    pub denoised: Vec<f64>,
}

/// The vector that is given when converting between prediction forms.
#[derive(Debug, Clone, Copy)]
pub enum Given<'a> {
    Noise(&'a [f64]),
    Denoised(&'a [f64]),
}

/// Fills the missing prediction form via `x_hat = (z - sigma eps_hat)/alpha`.
pub fn convert_predictions(
    z: &[f64],
    t: f64,
    param: &NoiseParam,
    given: Given<'_>,
) -> Result<Prediction> {
    let (alpha, sigma) = param.noise_level(t);
    match given {
        Given::Noise(eps) => {
            let denoised = z
                .iter()
                .zip(eps)
                .map(|(zi, ei)| (zi - sigma * ei) / alpha)
                .collect();
            Ok(Prediction {
                noise: eps.to_vec(),
                denoised,
            })
        }
        Given::Denoised(x_hat) => {
            if sigma == 0.0 {
                return Err(Error::DegenerateNoise(
                    "cannot recover a noise prediction at sigma = 0".into(),
                ));
            }
            let noise = z
                .iter()
                .zip(x_hat)
                .map(|(zi, xi)| (zi - alpha * xi) / sigma)
                .collect();
            Ok(Prediction {
                noise,
                denoised: x_hat.to_vec(),
            })
        }
    }
}

/// An evaluable score model: everything the samplers need from a network,
/// provided here in closed form.
pub trait ScoreModel: Sync {
    fn dim(&self) -> usize;

    fn model_id(&self) -> &str;

    /// Posterior-mean estimate of the clean sample, `E[x | z_t]`.
    fn denoise(&self, z: &[f64], t: f64, param: &NoiseParam, cond: &Condition)
        -> Result<Vec<f64>>;

    /// Noise prediction, derived from the denoiser unless overridden.
    fn predict_noise(
        &self,
        z: &[f64],
        t: f64,
        param: &NoiseParam,
        cond: &Condition,
    ) -> Result<Vec<f64>> {
        let x_hat = self.denoise(z, t, param, cond)?;
        Ok(convert_predictions(z, t, param, Given::Denoised(&x_hat))?.noise)
    }

    /// Registered condition labels, if any.
    fn condition_labels(&self) -> Vec<String> {
        Vec::new()
    }
}

/// Classifier-free guidance: `eps'' = eps(null) + w (eps(cond) - eps(null))`,
/// with the denoised form derived from the combined noise.
pub fn guided_prediction(
    model: &dyn ScoreModel,
    z: &[f64],
    t: f64,
    param: &NoiseParam,
    cond: &Condition,
    w: f64,
) -> Result<Prediction> {
    if matches!(cond, Condition::Null) {
        return Err(Error::UnknownCondition(
            "guided prediction requires a non-null condition".into(),
        ));
    }
    let eps_null = model.predict_noise(z, t, param, &Condition::Null)?;
    let eps_cond = model.predict_noise(z, t, param, cond)?;
    let combined: Vec<f64> = eps_null
        .iter()
        .zip(&eps_cond)
        .map(|(n, c)| n + w * (c - n))
        .collect();
    convert_predictions(z, t, param, Given::Noise(&combined))
}

/// One isotropic mixture component.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmComponent {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub scale: f64,
}

/// Isotropic Gaussian mixture standing in for the data distribution.
/// Conditions are stored as alternative component weightings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GaussianMixture {
    id: String,
    dim: usize,
    components: Vec<GmComponent>,
    conditions: BTreeMap<String, Vec<f64>>,
}

const WEIGHT_TOL: f64 = 1e-12;

fn normalize_weights(weights: &mut [f64]) -> Result<()> {
    let mut total = 0.0;
    for w in weights.iter() {
        if !(*w > 0.0) {
            return Err(Error::InvalidModel(format!("weight {w} must be positive")));
        }
        total += w;
    }
    if (total - 1.0).abs() > WEIGHT_TOL {
        for w in weights.iter_mut() {
            *w /= total;
        }
    }
    Ok(())
}

impl GaussianMixture {
    pub fn new(id: impl Into<String>, mut components: Vec<GmComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::InvalidModel("mixture needs a component".into()));
        }
        let dim = components[0].mean.len();
        if dim == 0 {
            return Err(Error::InvalidModel("zero-dimensional mixture".into()));
        }
        for c in &components {
            if c.mean.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: c.mean.len(),
                });
            }
            if c.scale < 0.0 {
                return Err(Error::InvalidModel(format!(
                    "negative component scale {}",
                    c.scale
                )));
            }
        }
        let mut weights: Vec<f64> = components.iter().map(|c| c.weight).collect();
        normalize_weights(&mut weights)?;
        for (c, w) in components.iter_mut().zip(&weights) {
            c.weight = *w;
        }
        Ok(GaussianMixture {
            id: id.into(),
            dim,
            components,
            conditions: BTreeMap::new(),
        })
    }

    /// Registers a condition as a reweighting of the mixture components.
    pub fn register_condition(&mut self, label: impl Into<String>, weights: Vec<f64>) -> Result<()> {
        if weights.len() != self.components.len() {
            return Err(Error::InvalidModel(format!(
                "condition weights length {} != component count {}",
                weights.len(),
                self.components.len()
            )));
        }
        let mut weights = weights;
        let positive: f64 = weights.iter().filter(|w| **w > 0.0).sum();
        if !(positive > 0.0) || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::InvalidModel(
                "condition weights must be nonnegative with a positive sum".into(),
            ));
        }
        for w in weights.iter_mut() {
            *w /= positive;
        }
        self.conditions.insert(label.into(), weights);
        Ok(())
    }

    pub fn components(&self) -> &[GmComponent] {
        &self.components
    }

    /// `Some((mean, scale))` when the model is a single isotropic Gaussian,
    /// for which trajectories have a closed form under VE.
    pub fn single_component(&self) -> Option<(&[f64], f64)> {
        if self.components.len() == 1 {
            Some((&self.components[0].mean, self.components[0].scale))
        } else {
            None
        }
    }

    fn effective_weights(&self, cond: &Condition) -> Result<Vec<f64>> {
        match cond {
            Condition::Null => Ok(self.components.iter().map(|c| c.weight).collect()),
            Condition::Label(name) => self
                .conditions
                .get(name)
                .cloned()
                .ok_or_else(|| Error::UnknownCondition(name.clone())),
        }
    }

    /// Per-component marginal log-likelihood terms and the log-sum-exp shift.
    /// Returns `(log_terms, max_term)` where the density is
    /// `sum_k exp(log_terms[k])`.
    fn component_log_terms(
        &self,
        z: &[f64],
        alpha: f64,
        sigma: f64,
        cond: &Condition,
    ) -> Result<Vec<f64>> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: z.len(),
            });
        }
        let weights = self.effective_weights(cond)?;
        let d = self.dim as f64;
        let mut terms = Vec::with_capacity(self.components.len());
        for (c, w) in self.components.iter().zip(&weights) {
            let var = alpha * alpha * c.scale * c.scale + sigma * sigma;
            if var == 0.0 {
                return Err(Error::DegenerateNoise(
                    "component with zero marginal variance".into(),
                ));
            }
            let mut sq = 0.0;
            for (zi, mi) in z.iter().zip(&c.mean) {
                let r = zi - alpha * mi;
                sq += r * r;
            }
            let log_w = if *w > 0.0 { w.ln() } else { f64::NEG_INFINITY };
            terms.push(log_w - 0.5 * d * (2.0 * std::f64::consts::PI * var).ln() - 0.5 * sq / var);
        }
        Ok(terms)
    }

    /// Log marginal density of `z` at noise level `(alpha, sigma)`.
    pub fn log_density(&self, z: &[f64], alpha: f64, sigma: f64, cond: &Condition) -> Result<f64> {
        let terms = self.component_log_terms(z, alpha, sigma, cond)?;
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
        Ok(max + sum.ln())
    }

    /// Posterior component responsibilities, computed in log space.
    pub fn responsibilities(
        &self,
        z: &[f64],
        alpha: f64,
        sigma: f64,
        cond: &Condition,
    ) -> Result<Vec<f64>> {
        let terms = self.component_log_terms(z, alpha, sigma, cond)?;
        let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let unnorm: Vec<f64> = terms.iter().map(|t| (t - max).exp()).collect();
        let total: f64 = unnorm.iter().sum();
        Ok(unnorm.into_iter().map(|u| u / total).collect())
    }

    /// Score `grad_z log q(z; alpha, sigma)`:
    /// `sum_k r_k (alpha mu_k - z) / (alpha^2 s_k^2 + sigma^2)`.
    pub fn score(&self, z: &[f64], alpha: f64, sigma: f64, cond: &Condition) -> Result<Vec<f64>> {
        let resp = self.responsibilities(z, alpha, sigma, cond)?;
        let mut out = vec![0.0; self.dim];
        for (c, r) in self.components.iter().zip(&resp) {
            let var = alpha * alpha * c.scale * c.scale + sigma * sigma;
            for ((o, zi), mi) in out.iter_mut().zip(z).zip(&c.mean) {
                *o += r * (alpha * mi - zi) / var;
            }
        }
        Ok(out)
    }

    /// Exact posterior mean `E[x | z_t]`:
    /// `sum_k r_k (mu_k + alpha s_k^2 (z - alpha mu_k) / (alpha^2 s_k^2 + sigma^2))`.
    pub fn denoiser(
        &self,
        z: &[f64],
        alpha: f64,
        sigma: f64,
        cond: &Condition,
    ) -> Result<Vec<f64>> {
        let resp = self.responsibilities(z, alpha, sigma, cond)?;
        let mut out = vec![0.0; self.dim];
        for (c, r) in self.components.iter().zip(&resp) {
            let s2 = c.scale * c.scale;
            let var = alpha * alpha * s2 + sigma * sigma;
            for ((o, zi), mi) in out.iter_mut().zip(z).zip(&c.mean) {
                *o += r * (mi + alpha * s2 * (zi - alpha * mi) / var);
            }
        }
        Ok(out)
    }

    /// Draws one exact sample from the (conditional) data distribution.
    pub fn sample_data(&self, rng: &mut ChaCha8Rng, cond: &Condition) -> Result<Vec<f64>> {
        let weights = self.effective_weights(cond)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = self.components.len() - 1;
        for (k, w) in weights.iter().enumerate() {
            acc += w;
            if u < acc {
                pick = k;
                break;
            }
        }
        let c = &self.components[pick];
        let noise = normal_vec(rng, self.dim, c.scale);
        Ok(c.mean.iter().zip(noise).map(|(m, n)| m + n).collect())
    }
}

impl ScoreModel for GaussianMixture {
    fn dim(&self) -> usize {
        self.dim
    }

    fn model_id(&self) -> &str {
        &self.id
    }

    fn denoise(
        &self,
        z: &[f64],
        t: f64,
        param: &NoiseParam,
        cond: &Condition,
    ) -> Result<Vec<f64>> {
        let (alpha, sigma) = param.noise_level(t);
        self.denoiser(z, alpha, sigma, cond)
    }

    fn condition_labels(&self) -> Vec<String> {
        self.conditions.keys().cloned().collect()
    }
}

/// Closed-form VE probability-flow state for a single isotropic Gaussian:
/// `z(t1) = mu + (z0 - mu) sqrt((s^2 + t1^2) / (s^2 + t0^2))`.
pub fn ve_single_gaussian_state(
    mean: &[f64],
    scale: f64,
    z0: &[f64],
    t0: f64,
    t1: f64,
) -> Vec<f64> {
    let s2 = scale * scale;
    let ratio = ((s2 + t1 * t1) / (s2 + t0 * t0)).sqrt();
    mean.iter()
        .zip(z0)
        .map(|(m, z)| m + (z - m) * ratio)
        .collect()
}
