//! Agreement between model-generated and ground-truth ensembles.
//!
//! Both ensembles must be projected with the same TICA model (fit on the
//! ground truth). Densities are compared as smoothed histograms on a common
//! grid with the truth as `P` and the model as `Q`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::freeenergy::{mean_energy_grid_in, LandscapeGrid};
use crate::tica::TicaModel;

pub const DEFAULT_KL_EPSILON: f64 = 0.5;
pub const DEFAULT_KL_BINS: usize = 50;
pub const DEFAULT_VARIANCE_THRESHOLD: f64 = 0.70;
pub const DEFAULT_VARIANCE_COMPONENTS: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KlReport {
    /// KL(truth ‖ model) in nats on the 2-D grid.
    pub kl_nats: f64,
    pub bounds: [(f64, f64); 2],
    pub nx: usize,
    pub ny: usize,
    pub smoothing_epsilon: f64,
    pub n_truth: usize,
    pub n_model: usize,
    /// 1-D KL along TIC 0 and TIC 1.
    pub marginal_kl: [f64; 2],
}

impl KlReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

fn check_pair(y: &DMatrix<f64>, what: &str) -> Result<()> {
    if y.nrows() == 0 {
        return Err(Error::Invalid(format!("{what} ensemble is empty")));
    }
    if y.ncols() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: y.ncols(),
        });
    }
    if let Some(i) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            row: i % y.nrows(),
            col: i / y.nrows(),
        });
    }
    Ok(())
}

/// Bounding box of both ensembles.
pub fn union_bounds(a: &DMatrix<f64>, b: &DMatrix<f64>) -> [(f64, f64); 2] {
    let ext = |c: usize| {
        a.column(c)
            .iter()
            .chain(b.column(c).iter())
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    };
    [ext(0), ext(1)]
}

fn bin(lo: f64, hi: f64, n: usize, v: f64) -> usize {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * n as f64).floor() as usize).min(n - 1)
}

fn histogram(y: &DMatrix<f64>, bounds: [(f64, f64); 2], nx: usize, ny: usize) -> Vec<f64> {
    let mut counts = vec![0.0; nx * ny];
    for t in 0..y.nrows() {
        let ix = bin(bounds[0].0, bounds[0].1, nx, y[(t, 0)]);
        let iy = bin(bounds[1].0, bounds[1].1, ny, y[(t, 1)]);
        counts[ix * ny + iy] += 1.0;
    }
    counts
}

/// `Σ P ln(P/Q)` with `(count + ε) / (n + ε·bins)` smoothing on both sides.
fn smoothed_kl(p_counts: &[f64], q_counts: &[f64], epsilon: f64) -> f64 {
    let bins = p_counts.len() as f64;
    let np: f64 = p_counts.iter().sum();
    let nq: f64 = q_counts.iter().sum();
    let (zp, zq) = (np + epsilon * bins, nq + epsilon * bins);
    let kl: f64 = p_counts
        .iter()
        .zip(q_counts)
        .map(|(&cp, &cq)| {
            let p = (cp + epsilon) / zp;
            let q = (cq + epsilon) / zq;
            if p == 0.0 {
                0.0
            } else {
                p * (p / q).ln()
            }
        })
        .sum();
    kl.max(0.0)
}

fn marginal_counts(counts: &[f64], nx: usize, ny: usize, axis: usize) -> Vec<f64> {
    match axis {
        0 => (0..nx).map(|i| counts[i * ny..(i + 1) * ny].iter().sum()).collect(),
        _ => (0..ny).map(|j| (0..nx).map(|i| counts[i * ny + j]).sum()).collect(),
    }
}

pub fn kl_divergence_2d(
    truth_y2: &DMatrix<f64>,
    model_y2: &DMatrix<f64>,
    nx: usize,
    ny: usize,
    epsilon: f64,
) -> Result<KlReport> {
    check_pair(truth_y2, "truth")?;
    check_pair(model_y2, "model")?;
    if nx == 0 || ny == 0 {
        return Err(Error::Invalid("KL grid needs at least one bin per axis".into()));
    }
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::Invalid(format!("smoothing epsilon must be non-negative, got {epsilon}")));
    }
    let bounds = union_bounds(truth_y2, model_y2);
    let p = histogram(truth_y2, bounds, nx, ny);
    let q = histogram(model_y2, bounds, nx, ny);
    let kl_nats = smoothed_kl(&p, &q, epsilon);
    let marginal_kl = [0, 1].map(|axis| {
        smoothed_kl(
            &marginal_counts(&p, nx, ny, axis),
            &marginal_counts(&q, nx, ny, axis),
            epsilon,
        )
    });
    Ok(KlReport {
        kl_nats,
        bounds,
        nx,
        ny,
        smoothing_epsilon: epsilon,
        n_truth: truth_y2.nrows(),
        n_model: model_y2.nrows(),
        marginal_kl,
    })
}

/// Contour-ready density grid: `mean_value` holds probability per unit area.
pub fn density_grid(y2: &DMatrix<f64>, bounds: [(f64, f64); 2], nx: usize, ny: usize) -> Result<LandscapeGrid> {
    let ones = nalgebra::DVector::from_element(y2.nrows(), 1.0);
    let mut grid = mean_energy_grid_in(y2, &ones, bounds, nx, ny)?;
    let area = ((bounds[0].1 - bounds[0].0) / nx as f64) * ((bounds[1].1 - bounds[1].0) / ny as f64);
    let total: u64 = grid.count.iter().sum();
    grid.mean_value = grid
        .count
        .map(|c| if area > 0.0 && total > 0 { c as f64 / total as f64 / area } else { 0.0 });
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainedVarianceReport {
    pub passed: bool,
    pub k: usize,
    pub threshold: f64,
    pub cumulative: f64,
    pub ratios: Vec<f64>,
}

/// Whether the first `k` components carry at least `threshold` of the
/// explained variance.
pub fn check_explained_variance(model: &TicaModel, k: usize, threshold: f64) -> Result<ExplainedVarianceReport> {
    let ratios: Vec<f64> = model.explained_variance_ratio.iter().copied().collect();
    explained_variance_from_ratios(&ratios, k, threshold)
}

pub fn explained_variance_from_ratios(ratios: &[f64], k: usize, threshold: f64) -> Result<ExplainedVarianceReport> {
    if k > ratios.len() {
        return Err(Error::Invalid(format!("k = {k} exceeds {} components", ratios.len())));
    }
    let cumulative: f64 = ratios[..k].iter().sum();
    Ok(ExplainedVarianceReport {
        passed: cumulative >= threshold,
        k,
        threshold,
        cumulative,
        ratios: ratios.to_vec(),
    })
}

/// RMS difference of per-bin means over bins occupied in both grids, after
/// removing each grid's own mean over those bins.
pub fn landscape_compare(truth: &LandscapeGrid, model: &LandscapeGrid) -> Result<f64> {
    if !truth.same_geometry(model) {
        return Err(Error::Invalid("landscape grids have different geometry".into()));
    }
    let shared: Vec<(f64, f64)> = truth
        .count
        .iter()
        .zip(model.count.iter())
        .zip(truth.mean_value.iter().zip(model.mean_value.iter()))
        .filter(|((ct, cm), _)| **ct > 0 && **cm > 0)
        .map(|(_, (a, b))| (*a, *b))
        .collect();
    if shared.is_empty() {
        return Err(Error::Invalid("no bins are occupied in both grids".into()));
    }
    let n = shared.len() as f64;
    let mean_a = shared.iter().map(|s| s.0).sum::<f64>() / n;
    let mean_b = shared.iter().map(|s| s.1).sum::<f64>() / n;
    let ms = shared
        .iter()
        .map(|(a, b)| ((a - mean_a) - (b - mean_b)).powi(2))
        .sum::<f64>()
        / n;
    Ok(ms.sqrt())
}
