//! Persisted calibration output: one coefficient row per calibrated step,
//! bound to the grid and model it was computed for.

use crate::error::{Error, Result};
use crate::iia::{feature_count, VariantId};
use crate::schedule::TimeGrid;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const TABLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StepCoefficients {
    pub i: usize,
    /// Internal (slot-width-absorbed) coefficients; empty for steps with no
    /// usable features, which stay on the baseline rule.
    pub coeffs: Vec<f64>,
    pub degenerate: bool,
    pub ridged: bool,
    /// In-sample mean squared residual of the baseline increment against the
    /// fine-grained target.
    pub baseline_mse: f64,
    /// Same residual for the calibrated combination.
    pub iia_mse: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct CoefficientTable {
    pub version: u32,
    pub variant: VariantId,
    pub r: usize,
    pub m: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub model_id: String,
    pub grid_hash: String,
    pub grid_times: Vec<f64>,
    pub per_step: Vec<StepCoefficients>,
}

impl CoefficientTable {
    pub fn row_for_step(&self, i: usize) -> Option<&StepCoefficients> {
        self.per_step.iter().find(|row| row.i == i)
    }

    /// Rejects use with a different variant or a grid other than the one the
    /// table was calibrated on.
    pub fn check_compatible(&self, variant: VariantId, grid: &TimeGrid) -> Result<()> {
        if self.variant != variant {
            return Err(Error::TableMismatch(format!(
                "table is for {}, sampler runs {}",
                self.variant, variant
            )));
        }
        if self.grid_hash != grid.hash() {
            return Err(Error::TableMismatch(
                "table was calibrated on a different time grid".into(),
            ));
        }
        Ok(())
    }

    /// Coefficients in reporting form: the width-absorbed internal values
    /// are divided back by the slot width for the EDM stepsize family.
    pub fn reported_coefficients(&self, grid: &TimeGrid) -> Vec<(usize, Vec<f64>)> {
        self.per_step
            .iter()
            .map(|row| {
                let coeffs = match self.variant {
                    VariantId::BiiaEdm => {
                        let w = grid.slot_width(row.i);
                        row.coeffs.iter().map(|c| c / w).collect()
                    }
                    _ => row.coeffs.clone(),
                };
                (row.i, coeffs)
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.version != TABLE_VERSION {
            return Err(Error::VersionMismatch {
                expected: TABLE_VERSION,
                found: self.version,
            });
        }
        for row in &self.per_step {
            let expected = feature_count(self.variant, self.r, row.i);
            if !row.coeffs.is_empty() && row.coeffs.len() != expected {
                return Err(Error::TableParse(format!(
                    "step {}: {} coefficients where {} features are defined",
                    row.i,
                    row.coeffs.len(),
                    expected
                )));
            }
            if row.coeffs.iter().any(|c| !c.is_finite()) {
                return Err(Error::TableParse(format!(
                    "step {}: non-finite coefficient",
                    row.i
                )));
            }
        }
        Ok(())
    }
}

/// Atomically writes the table as versioned JSON (shortest round-trip float
/// formatting, so reading it back is bit-exact).
pub fn save_table(table: &CoefficientTable, path: &Path) -> Result<()> {
    let body = serde_json::to_string_pretty(table)
        .map_err(|e| Error::TableParse(e.to_string()))?;
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, body)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_table(path: &Path) -> Result<CoefficientTable> {
    let body = fs::read_to_string(path)?;
    let table: CoefficientTable =
        serde_json::from_str(&body).map_err(|e| Error::TableParse(e.to_string()))?;
    table.validate()?;
    Ok(table)
}
