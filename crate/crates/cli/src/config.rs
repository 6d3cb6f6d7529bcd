//! Experiment configuration: model, grid, variant hyperparameters, and the
//! calibration/evaluation protocol, loaded from TOML with per-variant
//! defaults filled in.

use anyhow::{bail, Context, Result};
use iia_core::iia::TrajectoryPolicy;
use iia_core::{build_grid, CalibrationConfig, GridKind, NoiseParam, TimeGrid, Variant, VariantId};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

/// Hyperparameter defaults per variant family: fine-grained refinement `m`,
/// history depth `r`, and calibration batch size.
pub fn variant_defaults(id: VariantId) -> (usize, usize, usize) {
    match id {
        // Stepsize-family calibration: (M, r) = (3, 1), batch 200.
        VariantId::BiiaEdm | VariantId::IiaEdm => (3, 1, 200),
        // First-order-family runs use the smaller batch of 16.
        VariantId::IiaDdim | VariantId::IiaSpndm | VariantId::IiaIpndm => (3, 0, 16),
        // Guided and DPM-Solver calibration refine with M = 10.
        VariantId::IiaDdimGuided | VariantId::IiaDpm2m => (10, 0, 16),
    }
}

pub const DEFAULT_CONDITION_SET_SIZE: usize = 20;
pub const DEFAULT_GUIDANCE_SCALE: f64 = 2.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleSpec {
    Ve,
    Vp { beta_min: f64, beta_max: f64 },
}

impl ScheduleSpec {
    pub fn param(&self) -> NoiseParam {
        match self {
            ScheduleSpec::Ve => NoiseParam::Ve,
            ScheduleSpec::Vp { beta_min, beta_max } => NoiseParam::Vp {
                beta_min: *beta_min,
                beta_max: *beta_max,
            },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridConfig {
    pub kind: String,
    pub t_min: f64,
    pub t_max: f64,
    #[serde(default = "default_rho")]
    pub rho: f64,
    #[serde(default = "default_true")]
    pub terminal_zero: bool,
    pub schedule: ScheduleSpec,
}

fn default_rho() -> f64 {
    7.0
}

fn default_true() -> bool {
    true
}

impl GridConfig {
    pub fn kind(&self) -> Result<GridKind> {
        Ok(match self.kind.as_str() {
            "edm_rho" => GridKind::EdmRho,
            "uniform" => GridKind::Uniform,
            "quadratic" => GridKind::Quadratic,
            other => bail!("unknown grid kind `{other}`"),
        })
    }

    /// Grid whose trajectory consumes exactly `nfe` model evaluations under
    /// the variant's baseline solver.
    pub fn build_for_nfe(&self, variant: VariantId, nfe: usize) -> Result<TimeGrid> {
        let steps = steps_for_nfe(variant, nfe)?;
        let n = steps
            .checked_sub(usize::from(self.terminal_zero))
            .filter(|n| *n >= 2)
            .with_context(|| format!("nfe {nfe} leaves too few steps for {variant}"))?;
        Ok(build_grid(
            self.kind()?,
            n,
            self.t_min,
            self.t_max,
            self.rho,
            self.terminal_zero,
            self.schedule.param(),
        )?)
    }
}

/// Number of solver steps that spends exactly `nfe` evaluations: the Heun
/// family pays two per step except the Euler-only terminal one, the
/// second-order pseudo-linear-multistep start pays one extra, everything
/// else pays one per step.
pub fn steps_for_nfe(variant: VariantId, nfe: usize) -> Result<usize> {
    use iia_core::SolverKind::*;
    Ok(match variant.solver() {
        Heun => {
            if nfe % 2 == 0 {
                bail!("the Heun family needs an odd evaluation budget, got {nfe}");
            }
            (nfe + 1) / 2
        }
        Spndm => nfe
            .checked_sub(1)
            .context("the pseudo improved-Euler start needs nfe >= 2")?,
        Ddim | Dpm2m | Ipndm => nfe,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariantConfig {
    pub id: VariantId,
    pub m: Option<usize>,
    pub r: Option<usize>,
}

impl VariantConfig {
    pub fn resolve(&self) -> Result<Variant> {
        let (m_default, r_default, _) = variant_defaults(self.id);
        Ok(Variant::new(
            self.id,
            self.r.unwrap_or(r_default),
            self.m.unwrap_or(m_default),
        )?)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationSection {
    #[serde(default)]
    pub seed: u64,
    pub batch: Option<usize>,
    #[serde(default = "default_trajectory")]
    pub trajectory: TrajectoryPolicy,
    #[serde(default = "default_guidance")]
    pub guidance_scale: f64,
    #[serde(default = "default_condition_set")]
    pub condition_set_size: usize,
}

fn default_trajectory() -> TrajectoryPolicy {
    TrajectoryPolicy::Iia
}

fn default_guidance() -> f64 {
    DEFAULT_GUIDANCE_SCALE
}

fn default_condition_set() -> usize {
    DEFAULT_CONDITION_SET_SIZE
}

impl Default for CalibrationSection {
    fn default() -> Self {
        CalibrationSection {
            seed: 0,
            batch: None,
            trajectory: default_trajectory(),
            guidance_scale: default_guidance(),
            condition_set_size: default_condition_set(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationSection {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_samples")]
    pub samples: usize,
    #[serde(default = "default_nfe_list")]
    pub nfe: Vec<usize>,
    #[serde(default = "default_projections")]
    pub projections: usize,
    #[serde(default = "default_m_ref")]
    pub reference_refinement: usize,
}

fn default_samples() -> usize {
    2048
}

fn default_nfe_list() -> Vec<usize> {
    vec![7, 9, 11, 13]
}

fn default_projections() -> usize {
    64
}

fn default_m_ref() -> usize {
    64
}

impl Default for EvaluationSection {
    fn default() -> Self {
        EvaluationSection {
            seed: 0,
            samples: default_samples(),
            nfe: default_nfe_list(),
            projections: default_projections(),
            reference_refinement: default_m_ref(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub model: PathBuf,
    pub grid: GridConfig,
    pub variant: VariantConfig,
    #[serde(default)]
    pub calibration: CalibrationSection,
    #[serde(default)]
    pub evaluation: EvaluationSection,
    #[serde(default = "default_out")]
    pub output: PathBuf,
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&body).with_context(|| format!("parsing {}", path.display()))?;
        // Model paths are relative to the config file.
        if cfg.model.is_relative() {
            if let Some(dir) = path.parent() {
                cfg.model = dir.join(&cfg.model);
            }
        }
        Ok(cfg)
    }

    pub fn calibration_config(&self) -> CalibrationConfig {
        let (_, _, batch_default) = variant_defaults(self.variant.id);
        CalibrationConfig {
            seed: self.calibration.seed,
            batch_size: self.calibration.batch.unwrap_or(batch_default),
            trajectory: self.calibration.trajectory,
            guidance_scale: self.calibration.guidance_scale,
            condition_set_size: self.calibration.condition_set_size,
        }
    }
}
