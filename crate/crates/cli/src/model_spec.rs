//! On-disk schema for analytic mixture models.

use anyhow::{bail, Context, Result};
use iia_core::{GaussianMixture, GmComponent};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentSpec {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub scale: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelSpec {
    pub id: String,
    pub components: Vec<ComponentSpec>,
    /// Optional condition labels with per-component weight overrides.
    #[serde(default)]
    pub conditions: BTreeMap<String, Vec<f64>>,
}

impl ModelSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let body = std::fs::read_to_string(path)
            .with_context(|| format!("reading model spec {}", path.display()))?;
        let spec: ModelSpec =
            toml::from_str(&body).with_context(|| format!("parsing {}", path.display()))?;
        if spec.components.is_empty() {
            bail!("model spec {} has no components", path.display());
        }
        Ok(spec)
    }

    pub fn build(&self) -> Result<GaussianMixture> {
        let components = self
            .components
            .iter()
            .map(|c| GmComponent {
                weight: c.weight,
                mean: c.mean.clone(),
                scale: c.scale,
            })
            .collect();
        let mut gm = GaussianMixture::new(self.id.clone(), components)
            .with_context(|| format!("model `{}`", self.id))?;
        for (label, weights) in &self.conditions {
            gm.register_condition(label.clone(), weights.clone())
                .with_context(|| format!("condition `{label}`"))?;
        }
        Ok(gm)
    }
}
