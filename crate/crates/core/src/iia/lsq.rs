//! Per-timestep least squares: minimize the batch-summed squared residual
//! of a coefficient-weighted feature combination against the fine-grained
//! target. The problem is solved on the stacked per-axis system rather than
//! through the normal equations, which keeps the error proportional to the
//! condition number instead of its square.

use crate::error::{Error, Result};
use nalgebra::{DMatrix, DVector};

const RIDGE_LAMBDA: f64 = 1e-8;
const COND_LIMIT: f64 = 1e12;

#[derive(Debug, Clone)]
pub struct LsqSolution {
    pub coeffs: Vec<f64>,
    /// All feature vectors were zero; the coefficients are a placeholder.
    pub degenerate: bool,
    /// The normal equations were ill-conditioned and a ridge term was added.
    pub ridged: bool,
}

/// Solves `min_c sum_b || sum_j c_j f_j^(b) - y^(b) ||^2`. The batch is
/// stacked into one tall matrix in a fixed order, so the result is
/// independent of how callers parallelize feature evaluation.
pub fn solve_least_squares(features: &[Vec<Vec<f64>>], targets: &[Vec<f64>]) -> Result<LsqSolution> {
    if features.len() != targets.len() || features.is_empty() {
        return Err(Error::Unsupported(
            "least squares needs matching, non-empty feature and target batches".into(),
        ));
    }
    let n = features[0].len();
    for f in features {
        if f.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                got: f.len(),
            });
        }
    }
    if n == 0 {
        return Ok(LsqSolution {
            coeffs: Vec::new(),
            degenerate: true,
            ridged: false,
        });
    }
    let rows: usize = targets.iter().map(|y| y.len()).sum();
    let mut a = DMatrix::<f64>::zeros(rows, n);
    let mut y = DVector::<f64>::zeros(rows);
    let mut row = 0;
    for (f, target) in features.iter().zip(targets) {
        for axis in 0..target.len() {
            for j in 0..n {
                a[(row, j)] = f[j][axis];
            }
            y[row] = target[axis];
            row += 1;
        }
    }

    // Feature magnitudes span many orders between warm, large-slot steps and
    // the nearly-noiseless tail, which by itself inflates the condition
    // number. Column equilibration removes that scaling component before
    // conditioning is judged.
    let scales: Vec<f64> = (0..n)
        .map(|j| {
            let norm = a.column(j).norm();
            if norm > 0.0 {
                norm.recip()
            } else {
                1.0
            }
        })
        .collect();
    if scales.iter().all(|s| *s == 1.0) && a.iter().all(|v| *v == 0.0) {
        return Ok(LsqSolution {
            coeffs: vec![0.0; n],
            degenerate: true,
            ridged: false,
        });
    }
    for (j, s) in scales.iter().enumerate() {
        a.column_mut(j).scale_mut(*s);
    }

    let probe = a.clone().svd(false, false);
    let s_max = probe.singular_values.max();
    let s_min = probe.singular_values.min();
    let ill = s_min <= 0.0 || s_max / s_min > COND_LIMIT;
    let (coeffs, ridged) = if ill {
        // Ridge on the equilibrated columns (unit norm, so the shift is
        // already relative), as extra rows of the stacked system.
        let shift = RIDGE_LAMBDA.sqrt();
        let mut augmented = DMatrix::<f64>::zeros(rows + n, n);
        augmented.view_mut((0, 0), (rows, n)).copy_from(&a);
        for j in 0..n {
            augmented[(rows + j, j)] = shift;
        }
        let mut rhs = DVector::<f64>::zeros(rows + n);
        rhs.view_mut((0, 0), (rows, 1)).copy_from(&y);
        let sol = augmented
            .svd(true, true)
            .solve(&rhs, 0.0)
            .map_err(|e| Error::Unsupported(format!("least squares failed: {e}")))?;
        (sol, true)
    } else {
        let sol = a
            .svd(true, true)
            .solve(&y, 0.0)
            .map_err(|e| Error::Unsupported(format!("least squares failed: {e}")))?;
        (sol, false)
    };
    Ok(LsqSolution {
        coeffs: coeffs.iter().zip(&scales).map(|(c, s)| c * s).collect(),
        degenerate: false,
        ridged,
    })
}

/// Closed-form single-coefficient fit: `sum_b <f, y> / sum_b ||f||^2`.
pub fn closed_form_gamma_r0(deltas: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for (f, y) in deltas.iter().zip(targets) {
        num += f.iter().zip(y).map(|(a, b)| a * b).sum::<f64>();
        den += f.iter().map(|a| a * a).sum::<f64>();
    }
    if den == 0.0 {
        return Err(Error::DegenerateNoise(
            "all gradient features are zero; the optimal stepsize is undefined".into(),
        ));
    }
    Ok(num / den)
}
