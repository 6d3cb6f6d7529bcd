//! Sliced Wasserstein-2 distance between equal-size sample clouds.

use anyhow::{bail, Result};
use iia_core::rng::{keyed_rng, unit_vec};

fn w2_sorted(mut a: Vec<f64>, mut b: Vec<f64>) -> f64 {
    a.sort_by(|x, y| x.total_cmp(y));
    b.sort_by(|x, y| x.total_cmp(y));
    let ms: f64 = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    ms.sqrt()
}

/// Mean over seeded random unit projections of the 1-D 2-Wasserstein
/// distance (sorted-difference form). One dimension needs no projections.
pub fn sliced_wasserstein(
    cloud_a: &[Vec<f64>],
    cloud_b: &[Vec<f64>],
    projections: usize,
    seed: u64,
) -> Result<f64> {
    if cloud_a.len() < 2 || cloud_b.len() < 2 {
        bail!("sliced Wasserstein needs at least two samples per cloud");
    }
    if cloud_a.len() != cloud_b.len() {
        bail!(
            "sorted-difference W2 needs equal counts, got {} vs {}",
            cloud_a.len(),
            cloud_b.len()
        );
    }
    let dim = cloud_a[0].len();
    if cloud_b[0].len() != dim {
        bail!("dimension mismatch between clouds");
    }
    if dim == 1 {
        return Ok(w2_sorted(
            cloud_a.iter().map(|v| v[0]).collect(),
            cloud_b.iter().map(|v| v[0]).collect(),
        ));
    }
    if projections == 0 {
        bail!("need at least one projection");
    }
    let mut total = 0.0;
    for p in 0..projections {
        let dir = unit_vec(&mut keyed_rng(seed, 3, p as u64), dim);
        let proj = |cloud: &[Vec<f64>]| -> Vec<f64> {
            cloud
                .iter()
                .map(|v| v.iter().zip(&dir).map(|(a, b)| a * b).sum())
                .collect()
        };
        total += w2_sorted(proj(cloud_a), proj(cloud_b));
    }
    Ok(total / projections as f64)
}
