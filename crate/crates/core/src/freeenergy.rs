//! Marginal densities over TICA components and Boltzmann inversion.
//!
//! Each component gets its own 1-D estimator. The free energy of a frame is
//! the sum of per-component terms `G_k(y_k) = −k_B·T·ln P_k(y_k)`, with
//! densities floored at `floor_epsilon` before the logarithm.

use std::fs;
use std::io::Write;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::{read_container, write_container, EnergyRecord, ENERGY_MAGIC};
use crate::units::kt;

pub const DEFAULT_FLOOR_EPSILON: f64 = 1e-12;
pub const DEFAULT_HISTOGRAM_BINS: usize = 100;
pub const DEFAULT_GRID_BINS: usize = 100;
/// Relative widening of the histogram range so the extreme samples fall inside.
const RANGE_MARGIN: f64 = 1e-9;
/// Kernel contributions beyond this many bandwidths are below 1e-17 and skipped.
const KDE_CUTOFF: f64 = 9.0;
/// Label recorded in targets: the additive constant is fit at training time.
pub const CONSTANT_DEFERRED: &str = "deferred-to-training";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DensityKind {
    Kde,
    Histogram,
}

impl std::str::FromStr for DensityKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kde" => Ok(DensityKind::Kde),
            "histogram" | "hist" => Ok(DensityKind::Histogram),
            other => Err(Error::UnknownKind(format!("density estimator '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DensityParams {
    /// Gaussian KDE; bandwidth from Scott's rule unless given.
    Kde { bandwidth: Option<f64> },
    /// Equal-width bins over the sample range unless `range` is given.
    Histogram {
        n_bins: usize,
        range: Option<(f64, f64)>,
    },
}

impl DensityParams {
    pub fn kind(&self) -> DensityKind {
        match self {
            DensityParams::Kde { .. } => DensityKind::Kde,
            DensityParams::Histogram { .. } => DensityKind::Histogram,
        }
    }
}

impl Default for DensityParams {
    fn default() -> Self {
        DensityParams::Histogram {
            n_bins: DEFAULT_HISTOGRAM_BINS,
            range: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Marginal {
    Kde {
        /// Sorted ascending.
        samples: Vec<f64>,
        bandwidth: f64,
    },
    Histogram {
        edges: Vec<f64>,
        probabilities: Vec<f64>,
    },
}

impl Marginal {
    /// Unfloored density at `y`.
    pub fn raw_density(&self, y: f64) -> f64 {
        match self {
            Marginal::Kde { samples, bandwidth } => {
                let h = *bandwidth;
                let lo = samples.partition_point(|&s| s < y - KDE_CUTOFF * h);
                let hi = samples.partition_point(|&s| s <= y + KDE_CUTOFF * h);
                let sum: f64 = samples[lo..hi]
                    .iter()
                    .map(|&s| {
                        let u = (y - s) / h;
                        (-0.5 * u * u).exp()
                    })
                    .sum();
                sum / (samples.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt())
            }
            Marginal::Histogram {
                edges,
                probabilities,
            } => match bin_index(edges, y) {
                Some(i) => probabilities[i] / (edges[i + 1] - edges[i]),
                None => 0.0,
            },
        }
    }

    pub fn support(&self) -> (f64, f64) {
        match self {
            Marginal::Kde { samples, .. } => (samples[0], samples[samples.len() - 1]),
            Marginal::Histogram { edges, .. } => (edges[0], edges[edges.len() - 1]),
        }
    }
}

/// Bin containing `y`: half-open `[e_i, e_{i+1})`, last bin closed.
fn bin_index(edges: &[f64], y: f64) -> Option<usize> {
    let n = edges.len() - 1;
    if !(y >= edges[0] && y <= edges[n]) {
        return None;
    }
    let i = edges.partition_point(|&e| e <= y);
    Some(i.saturating_sub(1).min(n - 1))
}

/// One independent 1-D density per TICA component.
#[derive(Debug, Clone, PartialEq)]
pub struct MarginalDensity {
    pub kind: DensityKind,
    pub components: Vec<Marginal>,
    pub floor_epsilon: f64,
}

impl MarginalDensity {
    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    /// Density of component `k` at `y`, floored at `floor_epsilon`.
    pub fn density(&self, k: usize, y: f64) -> f64 {
        self.components[k].raw_density(y).max(self.floor_epsilon)
    }
}

pub fn fit_marginals(
    y: &DMatrix<f64>,
    params: &DensityParams,
    floor_epsilon: f64,
) -> Result<MarginalDensity> {
    let (n, d) = y.shape();
    if n < 10 {
        return Err(Error::Invalid(format!("need at least 10 frames, got {n}")));
    }
    if d < 1 {
        return Err(Error::Invalid("need at least one component".into()));
    }
    if !(floor_epsilon > 0.0) {
        return Err(Error::Invalid(format!("floor_epsilon must be positive, got {floor_epsilon}")));
    }
    let components = (0..d)
        .map(|k| {
            let col: Vec<f64> = y.column(k).iter().copied().collect();
            match params {
                DensityParams::Kde { bandwidth } => fit_kde(col, *bandwidth, k),
                DensityParams::Histogram { n_bins, range } => fit_histogram(&col, *n_bins, *range),
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MarginalDensity {
        kind: params.kind(),
        components,
        floor_epsilon,
    })
}

fn fit_kde(mut samples: Vec<f64>, bandwidth: Option<f64>, component: usize) -> Result<Marginal> {
    let n = samples.len() as f64;
    let h = match bandwidth {
        Some(h) if h > 0.0 && h.is_finite() => h,
        Some(h) => return Err(Error::Invalid(format!("bandwidth must be positive, got {h}"))),
        None => {
            let mean = samples.iter().sum::<f64>() / n;
            let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let h = var.sqrt() * n.powf(-0.2);
            if !(h > 0.0) {
                return Err(Error::Invalid(format!(
                    "component {component} has zero variance; KDE bandwidth would be 0"
                )));
            }
            h
        }
    };
    samples.sort_by(f64::total_cmp);
    Ok(Marginal::Kde {
        samples,
        bandwidth: h,
    })
}

fn fit_histogram(samples: &[f64], n_bins: usize, range: Option<(f64, f64)>) -> Result<Marginal> {
    if n_bins == 0 {
        return Err(Error::Invalid("histogram needs at least one bin".into()));
    }
    let (lo, hi) = match range {
        Some((lo, hi)) if lo < hi => (lo, hi),
        Some((lo, hi)) => return Err(Error::Invalid(format!("empty histogram range [{lo}, {hi}]"))),
        None => {
            let (min, max) = samples
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &s| (a.min(s), b.max(s)));
            let margin = RANGE_MARGIN * (max - min).max(min.abs().max(max.abs())).max(1.0);
            (min - margin, max + margin)
        }
    };
    let width = (hi - lo) / n_bins as f64;
    let mut edges: Vec<f64> = (0..=n_bins).map(|i| lo + i as f64 * width).collect();
    edges[n_bins] = hi;
    let mut counts = vec![0u64; n_bins];
    let mut total = 0u64;
    for &s in samples {
        if let Some(i) = bin_index(&edges, s) {
            counts[i] += 1;
            total += 1;
        }
    }
    if total == 0 {
        return Err(Error::Invalid("no samples fall inside the histogram range".into()));
    }
    let probabilities = counts.iter().map(|&c| c as f64 / total as f64).collect();
    Ok(Marginal::Histogram {
        edges,
        probabilities,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreeEnergyTargets {
    /// `G(y)` per frame, kcal/mol.
    pub g_total: DVector<f64>,
    /// `G_k(y_k)`, frames × components.
    pub g_per_component: DMatrix<f64>,
    /// `ΔE = G − E_prior`, once computed.
    pub delta_e: Option<DVector<f64>>,
    pub temperature: f64,
    pub constant_c_policy: String,
}

impl FreeEnergyTargets {
    pub fn n_frames(&self) -> usize {
        self.g_total.len()
    }

    /// Writes the `FEME` container with columns `g_total, g_0.., [delta_e]`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let d = self.g_per_component.ncols();
        let extra = self.delta_e.is_some() as usize;
        let mut m = DMatrix::zeros(self.n_frames(), 1 + d + extra);
        m.set_column(0, &self.g_total);
        m.columns_mut(1, d).copy_from(&self.g_per_component);
        let mut names = vec!["g_total".to_string()];
        names.extend((0..d).map(|k| format!("g_{k}")));
        if let Some(de) = &self.delta_e {
            m.set_column(1 + d, de);
            names.push("delta_e".into());
        }
        write_container(path.as_ref(), ENERGY_MAGIC, 0.0, &m, &names)
    }

    pub fn load(path: impl AsRef<Path>, temperature: f64) -> Result<Self> {
        let c = read_container(path.as_ref(), ENERGY_MAGIC)?;
        if c.names.first().map(String::as_str) != Some("g_total") {
            return Err(Error::Format("not a free-energy target file (no g_total column)".into()));
        }
        let d = c.names.iter().filter(|n| n.starts_with("g_") && *n != "g_total").count();
        let delta_e = c
            .names
            .iter()
            .position(|n| n == "delta_e")
            .map(|i| c.data.column(i).into_owned());
        Ok(Self {
            g_total: c.data.column(0).into_owned(),
            g_per_component: c.data.columns(1, d).into_owned(),
            delta_e,
            temperature,
            constant_c_policy: CONSTANT_DEFERRED.into(),
        })
    }
}

/// Per-frame free energies from the fitted marginals.
pub fn boltzmann_invert(
    density: &MarginalDensity,
    y: &DMatrix<f64>,
    temperature: f64,
) -> Result<FreeEnergyTargets> {
    if !(temperature > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {temperature}")));
    }
    if y.ncols() != density.n_components() {
        return Err(Error::DimensionMismatch {
            expected: density.n_components(),
            got: y.ncols(),
        });
    }
    let beta_inv = kt(temperature);
    let g = DMatrix::from_fn(y.nrows(), y.ncols(), |t, k| {
        -beta_inv * density.density(k, y[(t, k)]).ln()
    });
    let g_total = DVector::from_fn(y.nrows(), |t, _| g.row(t).iter().sum());
    Ok(FreeEnergyTargets {
        g_total,
        g_per_component: g,
        delta_e: None,
        temperature,
        constant_c_policy: CONSTANT_DEFERRED.into(),
    })
}

/// Fill `delta_e = g_total − prior_energy`.
pub fn energy_correction(
    mut targets: FreeEnergyTargets,
    prior: &EnergyRecord,
) -> Result<FreeEnergyTargets> {
    if prior.len() != targets.n_frames() {
        return Err(Error::DimensionMismatch {
            expected: targets.n_frames(),
            got: prior.len(),
        });
    }
    targets.delta_e = Some(&targets.g_total - &prior.prior_energy);
    Ok(targets)
}

/// Per-bin mean of a value over a 2-D grid. Empty bins hold 0 and have
/// `count == 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub bounds: [(f64, f64); 2],
    pub nx: usize,
    pub ny: usize,
    pub mean_value: DMatrix<f64>,
    pub count: DMatrix<u64>,
}

impl LandscapeGrid {
    pub fn mean(&self, ix: usize, iy: usize) -> Option<f64> {
        (self.count[(ix, iy)] > 0).then(|| self.mean_value[(ix, iy)])
    }

    pub fn same_geometry(&self, other: &LandscapeGrid) -> bool {
        self.nx == other.nx && self.ny == other.ny && self.bounds == other.bounds
    }

    pub fn center(&self, ix: usize, iy: usize) -> (f64, f64) {
        let c = |(lo, hi): (f64, f64), n: usize, i: usize| lo + (i as f64 + 0.5) * (hi - lo) / n as f64;
        (c(self.bounds[0], self.nx, ix), c(self.bounds[1], self.ny, iy))
    }

    pub fn occupied(&self) -> usize {
        self.count.iter().filter(|&&c| c > 0).count()
    }

    /// Columns `x_index, y_index, x_center, y_center, count, mean`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("x_index,y_index,x_center,y_center,count,mean\n");
        for ix in 0..self.nx {
            for iy in 0..self.ny {
                let (xc, yc) = self.center(ix, iy);
                s.push_str(&format!(
                    "{ix},{iy},{xc},{yc},{},{}\n",
                    self.count[(ix, iy)],
                    self.mean_value[(ix, iy)]
                ));
            }
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_csv().as_bytes()).map_err(|e| Error::io(path, e))
    }
}

fn axis_index(lo: f64, hi: f64, n: usize, v: f64) -> Option<usize> {
    if !(v >= lo && v <= hi) {
        return None;
    }
    if hi == lo {
        return Some(0);
    }
    let i = ((v - lo) / (hi - lo) * n as f64).floor() as usize;
    Some(i.min(n - 1))
}

/// Bounds spanning the data extrema of the two columns.
pub fn data_bounds(y2: &DMatrix<f64>) -> Result<[(f64, f64); 2]> {
    if y2.nrows() == 0 {
        return Err(Error::Invalid("no frames to bin".into()));
    }
    if y2.ncols() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: y2.ncols(),
        });
    }
    let b = |c: usize| {
        y2.column(c)
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)))
    };
    Ok([b(0), b(1)])
}

pub fn mean_energy_grid(
    y2: &DMatrix<f64>,
    values: &DVector<f64>,
    nx: usize,
    ny: usize,
) -> Result<LandscapeGrid> {
    let bounds = data_bounds(y2)?;
    mean_energy_grid_in(y2, values, bounds, nx, ny)
}

/// As [`mean_energy_grid`] on fixed bounds; points outside are ignored.
pub fn mean_energy_grid_in(
    y2: &DMatrix<f64>,
    values: &DVector<f64>,
    bounds: [(f64, f64); 2],
    nx: usize,
    ny: usize,
) -> Result<LandscapeGrid> {
    if y2.nrows() == 0 {
        return Err(Error::Invalid("no frames to bin".into()));
    }
    if nx == 0 || ny == 0 {
        return Err(Error::Invalid("grid needs at least one bin per axis".into()));
    }
    if y2.ncols() != 2 {
        return Err(Error::DimensionMismatch {
            expected: 2,
            got: y2.ncols(),
        });
    }
    if values.len() != y2.nrows() {
        return Err(Error::DimensionMismatch {
            expected: y2.nrows(),
            got: values.len(),
        });
    }
    let mut sum = DMatrix::<f64>::zeros(nx, ny);
    let mut count = DMatrix::<u64>::zeros(nx, ny);
    for t in 0..y2.nrows() {
        let ix = axis_index(bounds[0].0, bounds[0].1, nx, y2[(t, 0)]);
        let iy = axis_index(bounds[1].0, bounds[1].1, ny, y2[(t, 1)]);
        if let (Some(ix), Some(iy)) = (ix, iy) {
            sum[(ix, iy)] += values[t];
            count[(ix, iy)] += 1;
        }
    }
    let mean_value = DMatrix::from_fn(nx, ny, |i, j| match count[(i, j)] {
        0 => 0.0,
        c => sum[(i, j)] / c as f64,
    });
    Ok(LandscapeGrid {
        bounds,
        nx,
        ny,
        mean_value,
        count,
    })
}

/// Joint 2-D histogram free energy `−k_B·T·ln P(y₀, y₁)` on a grid, for
/// comparing against the marginal-sum landscape. Empty bins are floored.
pub fn joint_free_energy_grid(
    y2: &DMatrix<f64>,
    bounds: [(f64, f64); 2],
    nx: usize,
    ny: usize,
    temperature: f64,
    floor_epsilon: f64,
) -> Result<LandscapeGrid> {
    let ones = DVector::from_element(y2.nrows(), 1.0);
    let mut grid = mean_energy_grid_in(y2, &ones, bounds, nx, ny)?;
    let area = (bounds[0].1 - bounds[0].0) / nx as f64 * (bounds[1].1 - bounds[1].0) / ny as f64;
    let total: u64 = grid.count.iter().sum();
    let beta_inv = kt(temperature);
    grid.mean_value = grid.count.map(|c| {
        let p = (c as f64 / total as f64 / area).max(floor_epsilon);
        -beta_inv * p.ln()
    });
    Ok(grid)
}
