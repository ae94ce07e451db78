//! Differentiable coarse-grained potential and reference landscapes.
//!
//! The learned energy is
//!
//! ```text
//! U(θ, x) = w₂ᵀ tanh(W₁ φ(x) + b₁) + b₂,   φ_j(x) = exp(−‖x − c_j‖² / (2 s_j²))
//! ```
//!
//! Centers `c_j` and widths `s_j` are fixed at initialization; the trainable
//! parameters θ are `(W₁, b₁, w₂, b₂)`, flattened in that order with `W₁`
//! row-major. Forces and all parameter derivatives are closed-form.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PotentialModel {
    pub input_dim: usize,
    /// `n_basis × input_dim`.
    pub centers: DMatrix<f64>,
    pub widths: DVector<f64>,
    /// `n_hidden × n_basis`.
    pub hidden_weights: DMatrix<f64>,
    pub hidden_bias: DVector<f64>,
    pub output_weights: DVector<f64>,
    pub output_bias: f64,
    pub seed: u64,
}

fn axpy(y: &mut [f64], alpha: f64, x: &[f64]) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(a, b)| a * b).sum()
}

/// Forward pass intermediates at one configuration, flat and row-major.
struct Activations {
    phi: Vec<f64>,
    /// `∂φ_j/∂x_m` at `j·input_dim + m`.
    dphi: Vec<f64>,
    /// tanh outputs.
    a: Vec<f64>,
    /// `(W₁ ∂φ/∂x)[k, m]` at `m·n_hidden + k`.
    p: Vec<f64>,
}

impl PotentialModel {
    /// Centers drawn k-means++ style from `configs`, a shared width equal to
    /// the median nearest-center distance, weights uniform in (−0.1, 0.1).
    pub fn init(configs: &DMatrix<f64>, n_basis: usize, n_hidden: usize, seed: u64) -> Result<Self> {
        let (n, d) = configs.shape();
        if n == 0 || d == 0 {
            return Err(Error::Invalid("cannot initialize from an empty configuration set".into()));
        }
        if n_basis == 0 || n_hidden == 0 {
            return Err(Error::Invalid("n_basis and n_hidden must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut chosen = vec![rng.random_range(0..n)];
        let mut dist2: Vec<f64> = (0..n).map(|i| sq_dist(configs, i, configs, chosen[0])).collect();
        while chosen.len() < n_basis {
            let total: f64 = dist2.iter().sum();
            let next = if total > 0.0 {
                let mut target = rng.random::<f64>() * total;
                let mut pick = n - 1;
                for (i, &w) in dist2.iter().enumerate() {
                    if target < w {
                        pick = i;
                        break;
                    }
                    target -= w;
                }
                pick
            } else {
                rng.random_range(0..n)
            };
            chosen.push(next);
            for (i, d2) in dist2.iter_mut().enumerate() {
                *d2 = d2.min(sq_dist(configs, i, configs, next));
            }
        }
        let centers = DMatrix::from_fn(n_basis, d, |j, k| configs[(chosen[j], k)]);

        let mut nearest: Vec<f64> = (0..n_basis)
            .map(|j| {
                (0..n_basis)
                    .filter(|&k| k != j)
                    .map(|k| sq_dist(&centers, j, &centers, k).sqrt())
                    .filter(|&r| r > 0.0)
                    .fold(f64::INFINITY, f64::min)
            })
            .filter(|r| r.is_finite())
            .collect();
        nearest.sort_by(f64::total_cmp);
        let width = if nearest.is_empty() {
            1.0
        } else {
            nearest[nearest.len() / 2]
        };

        let mut uniform = || rng.random_range(-0.1..0.1);
        let hidden_weights = DMatrix::from_fn(n_hidden, n_basis, |_, _| uniform());
        let hidden_bias = DVector::from_fn(n_hidden, |_, _| uniform());
        let output_weights = DVector::from_fn(n_hidden, |_, _| uniform());
        let output_bias = uniform();
        Ok(Self {
            input_dim: d,
            centers,
            widths: DVector::from_element(n_basis, width),
            hidden_weights,
            hidden_bias,
            output_weights,
            output_bias,
            seed,
        })
    }

    pub fn n_basis(&self) -> usize {
        self.centers.nrows()
    }

    pub fn n_hidden(&self) -> usize {
        self.hidden_bias.len()
    }

    pub fn n_params(&self) -> usize {
        let (h, b) = (self.n_hidden(), self.n_basis());
        h * b + h + h + 1
    }

    /// θ as one flat vector: `W₁` (row-major), `b₁`, `w₂`, `b₂`.
    pub fn params(&self) -> DVector<f64> {
        let mut theta = Vec::with_capacity(self.n_params());
        for row in self.hidden_weights.row_iter() {
            theta.extend(row.iter());
        }
        theta.extend(self.hidden_bias.iter());
        theta.extend(self.output_weights.iter());
        theta.push(self.output_bias);
        DVector::from_vec(theta)
    }

    pub fn set_params(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.n_params() {
            return Err(Error::DimensionMismatch {
                expected: self.n_params(),
                got: theta.len(),
            });
        }
        let (h, b) = (self.n_hidden(), self.n_basis());
        self.hidden_weights = DMatrix::from_row_slice(h, b, &theta[..h * b]);
        self.hidden_bias = DVector::from_column_slice(&theta[h * b..h * b + h]);
        self.output_weights = DVector::from_column_slice(&theta[h * b + h..h * b + 2 * h]);
        self.output_bias = theta[h * b + 2 * h];
        Ok(())
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                got: x.len(),
            });
        }
        Ok(())
    }

    fn activations(&self, x: &[f64]) -> Activations {
        let (nb, h, d) = (self.n_basis(), self.n_hidden(), self.input_dim);
        let mut phi = vec![0.0; nb];
        let mut dphi = vec![0.0; nb * d];
        for j in 0..nb {
            let s2 = self.widths[j] * self.widths[j];
            let r2: f64 = (0..d).map(|k| (x[k] - self.centers[(j, k)]).powi(2)).sum();
            let v = (-r2 / (2.0 * s2)).exp();
            phi[j] = v;
            for m in 0..d {
                dphi[j * d + m] = -v * (x[m] - self.centers[(j, m)]) / s2;
            }
        }
        // W₁ is column-major, so walk it one basis column at a time
        let w1 = self.hidden_weights.as_slice();
        let mut z: Vec<f64> = self.hidden_bias.iter().copied().collect();
        let mut p = vec![0.0; h * d];
        for j in 0..nb {
            let col = &w1[j * h..(j + 1) * h];
            axpy(&mut z, phi[j], col);
            for m in 0..d {
                axpy(&mut p[m * h..(m + 1) * h], dphi[j * d + m], col);
            }
        }
        let a = z.into_iter().map(f64::tanh).collect();
        Activations { phi, dphi, a, p }
    }

    fn readout(&self, a: &[f64]) -> f64 {
        a.iter().zip(self.output_weights.iter()).map(|(a, w)| a * w).sum::<f64>() + self.output_bias
    }

    /// `w₂ ⊙ (1 − a²)`, the derivative of the energy with respect to the hidden pre-activations.
    fn hidden_gradient(&self, a: &[f64]) -> Vec<f64> {
        a.iter().zip(self.output_weights.iter()).map(|(a, w)| w * (1.0 - a * a)).collect()
    }

    fn force_from(&self, p: &[f64], g: &[f64]) -> DVector<f64> {
        let h = g.len();
        DVector::from_fn(self.input_dim, |m, _| -dot(&p[m * h..(m + 1) * h], g))
    }

    /// Network energy without prior.
    pub fn net_energy(&self, x: &[f64]) -> Result<f64> {
        self.check_dim(x)?;
        Ok(self.readout(&self.activations(x).a))
    }

    /// Network energy and force `−∇ₓU` without prior.
    pub fn net_energy_force(&self, x: &[f64]) -> Result<(f64, DVector<f64>)> {
        self.check_dim(x)?;
        let act = self.activations(x);
        let g = self.hidden_gradient(&act.a);
        Ok((self.readout(&act.a), self.force_from(&act.p, &g)))
    }

    /// `dU/dθ` and `dF/dθ` (`input_dim × n_params`) for the network part.
    pub fn net_parameter_gradients(&self, x: &[f64]) -> Result<(DVector<f64>, DMatrix<f64>)> {
        self.check_dim(x)?;
        let Activations { phi, dphi, a, p } = self.activations(x);
        let (h, b, d) = (self.n_hidden(), self.n_basis(), self.input_dim);
        let mut du = DVector::zeros(self.n_params());
        let mut df = DMatrix::zeros(d, self.n_params());
        let off_b1 = h * b;
        let off_w2 = off_b1 + h;
        let off_b2 = off_w2 + h;
        for k in 0..h {
            let w2 = self.output_weights[k];
            let sech2 = 1.0 - a[k] * a[k];
            let g = w2 * sech2;
            du[off_b1 + k] = g;
            du[off_w2 + k] = a[k];
            for j in 0..b {
                du[k * b + j] = g * phi[j];
            }
            for m in 0..d {
                let pkm = p[m * h + k];
                df[(m, off_w2 + k)] = -sech2 * pkm;
                df[(m, off_b1 + k)] = 2.0 * w2 * a[k] * sech2 * pkm;
                for j in 0..b {
                    df[(m, k * b + j)] = g * (2.0 * a[k] * phi[j] * pkm - dphi[j * d + m]);
                }
            }
        }
        du[off_b2] = 1.0;
        Ok((du, df))
    }

    /// One pass giving energy, force, `dU/dθ`, and `(dF/dθ)ᵀ r` for a given
    /// force-space vector `r`, without materializing `dF/dθ`.
    pub(crate) fn accumulate_gradients(
        &self,
        x: &[f64],
        force_weight: impl FnOnce(&DVector<f64>) -> DVector<f64>,
        energy_weight: impl FnOnce(f64) -> f64,
        grad: &mut [f64],
    ) -> (f64, DVector<f64>) {
        let Activations { phi, dphi, a, p } = self.activations(x);
        let (h, b, d) = (self.n_hidden(), self.n_basis(), self.input_dim);
        let g = self.hidden_gradient(&a);
        let energy = self.readout(&a);
        let force = self.force_from(&p, &g);
        let r = force_weight(&force);
        let ew = energy_weight(energy);
        let mut pr = vec![0.0; h];
        for m in 0..d {
            axpy(&mut pr, r[m], &p[m * h..(m + 1) * h]);
        }
        let dr: Vec<f64> = (0..b).map(|j| (0..d).map(|m| dphi[j * d + m] * r[m]).sum()).collect();
        let off_b1 = h * b;
        let off_w2 = off_b1 + h;
        for k in 0..h {
            let w2 = self.output_weights[k];
            let sech2 = 1.0 - a[k] * a[k];
            grad[off_b1 + k] += ew * g[k] + 2.0 * w2 * a[k] * sech2 * pr[k];
            grad[off_w2 + k] += ew * a[k] - sech2 * pr[k];
            let c = ew + 2.0 * a[k] * pr[k];
            let gk = g[k];
            for (gr, (ph, drj)) in grad[k * b..(k + 1) * b].iter_mut().zip(phi.iter().zip(&dr)) {
                *gr += gk * (c * ph - drj);
            }
        }
        grad[off_w2 + h] += ew;
        (energy, force)
    }

    /// Hidden-layer activations with a trailing 1, one row per configuration.
    pub fn readout_features(&self, configs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        let h = self.n_hidden();
        let mut out = DMatrix::zeros(configs.nrows(), h + 1);
        for (t, row) in configs.row_iter().enumerate() {
            let x: Vec<f64> = row.iter().copied().collect();
            self.check_dim(&x)?;
            let act = self.activations(&x);
            for (k, a) in act.a.iter().enumerate() {
                out[(t, k)] = *a;
            }
            out[(t, h)] = 1.0;
        }
        Ok(out)
    }

    /// Least-squares fit of the output layer `(w₂, b₂)` to energy targets with
    /// the hidden layer held fixed.
    pub fn fit_readout(&mut self, configs: &DMatrix<f64>, targets: &DVector<f64>) -> Result<()> {
        if targets.len() != configs.nrows() {
            return Err(Error::DimensionMismatch {
                expected: configs.nrows(),
                got: targets.len(),
            });
        }
        let features = self.readout_features(configs)?;
        let svd = features.svd(true, true);
        let sol = svd
            .solve(targets, 1e-12)
            .map_err(|e| Error::Singular(e.to_string()))?;
        let h = self.n_hidden();
        self.output_weights = sol.rows(0, h).into_owned();
        self.output_bias = sol[h];
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(&PotentialDocument::from(self)).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: PotentialDocument = serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        doc.try_into()
    }
}

fn sq_dist(a: &DMatrix<f64>, i: usize, b: &DMatrix<f64>, j: usize) -> f64 {
    (0..a.ncols()).map(|k| (a[(i, k)] - b[(j, k)]).powi(2)).sum()
}

/// JSON layout: matrices row-major.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PotentialDocument {
    architecture: String,
    input_dim: usize,
    n_basis: usize,
    n_hidden: usize,
    seed: u64,
    centers: Vec<Vec<f64>>,
    widths: Vec<f64>,
    hidden_weights: Vec<Vec<f64>>,
    hidden_bias: Vec<f64>,
    output_weights: Vec<f64>,
    output_bias: f64,
}

const ARCHITECTURE: &str = "rbf-tanh-linear";

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn unrows(r: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if r.len() != nrows || r.iter().any(|row| row.len() != ncols) {
        return Err(Error::Format(format!("expected a {nrows}x{ncols} matrix")));
    }
    Ok(DMatrix::from_row_slice(nrows, ncols, &r.concat()))
}

impl From<&PotentialModel> for PotentialDocument {
    fn from(m: &PotentialModel) -> Self {
        Self {
            architecture: ARCHITECTURE.into(),
            input_dim: m.input_dim,
            n_basis: m.n_basis(),
            n_hidden: m.n_hidden(),
            seed: m.seed,
            centers: rows(&m.centers),
            widths: m.widths.iter().copied().collect(),
            hidden_weights: rows(&m.hidden_weights),
            hidden_bias: m.hidden_bias.iter().copied().collect(),
            output_weights: m.output_weights.iter().copied().collect(),
            output_bias: m.output_bias,
        }
    }
}

impl TryFrom<PotentialDocument> for PotentialModel {
    type Error = Error;

    fn try_from(d: PotentialDocument) -> Result<Self> {
        if d.architecture != ARCHITECTURE {
            return Err(Error::UnknownKind(format!("architecture '{}'", d.architecture)));
        }
        if d.widths.len() != d.n_basis
            || d.hidden_bias.len() != d.n_hidden
            || d.output_weights.len() != d.n_hidden
        {
            return Err(Error::Format("potential document dimensions disagree".into()));
        }
        if d.widths.iter().any(|&w| !(w > 0.0)) {
            return Err(Error::Format("basis widths must be positive".into()));
        }
        Ok(Self {
            input_dim: d.input_dim,
            centers: unrows(&d.centers, d.n_basis, d.input_dim)?,
            widths: DVector::from_vec(d.widths),
            hidden_weights: unrows(&d.hidden_weights, d.n_hidden, d.n_basis)?,
            hidden_bias: DVector::from_vec(d.hidden_bias),
            output_weights: DVector::from_vec(d.output_weights),
            output_bias: d.output_bias,
            seed: d.seed,
        })
    }
}

/// Fixed energy added to the learned network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorTerm {
    None,
    /// `½ · stiffness · ‖x − center‖²`
    Harmonic { center: Vec<f64>, stiffness: f64 },
}

impl PriorTerm {
    pub fn harmonic(center: Vec<f64>, stiffness: f64) -> Result<Self> {
        if !(stiffness >= 0.0 && stiffness.is_finite()) {
            return Err(Error::Invalid(format!("stiffness must be non-negative, got {stiffness}")));
        }
        Ok(PriorTerm::Harmonic { center, stiffness })
    }

    pub fn energy(&self, x: &[f64]) -> f64 {
        match self {
            PriorTerm::None => 0.0,
            PriorTerm::Harmonic { center, stiffness } => {
                0.5 * stiffness * x.iter().zip(center).map(|(a, c)| (a - c).powi(2)).sum::<f64>()
            }
        }
    }

    /// Adds the prior force `−∇E_prior` into `force`.
    pub fn add_force(&self, x: &[f64], force: &mut [f64]) {
        if let PriorTerm::Harmonic { center, stiffness } = self {
            for ((f, a), c) in force.iter_mut().zip(x).zip(center) {
                *f -= stiffness * (a - c);
            }
        }
    }

    fn check_dim(&self, dim: usize) -> Result<()> {
        match self {
            PriorTerm::Harmonic { center, .. } if center.len() != dim => Err(Error::DimensionMismatch {
                expected: dim,
                got: center.len(),
            }),
            _ => Ok(()),
        }
    }
}

/// `U(θ, x) + E_prior(x)`.
pub fn energy(model: &PotentialModel, prior: &PriorTerm, x: &[f64]) -> Result<f64> {
    prior.check_dim(model.input_dim)?;
    Ok(model.net_energy(x)? + prior.energy(x))
}

/// `−∇ₓ(U + E_prior)`.
pub fn force(model: &PotentialModel, prior: &PriorTerm, x: &[f64]) -> Result<DVector<f64>> {
    prior.check_dim(model.input_dim)?;
    let (_, mut f) = model.net_energy_force(x)?;
    prior.add_force(x, f.as_mut_slice());
    Ok(f)
}

/// Energy and force of the full potential.
pub fn energy_force(model: &PotentialModel, prior: &PriorTerm, x: &[f64]) -> Result<(f64, DVector<f64>)> {
    prior.check_dim(model.input_dim)?;
    let (e, mut f) = model.net_energy_force(x)?;
    prior.add_force(x, f.as_mut_slice());
    Ok((e + prior.energy(x), f))
}

/// `(dU/dθ, dF/dθ)`; the prior has no trainable parameters.
pub fn parameter_gradients(
    model: &PotentialModel,
    prior: &PriorTerm,
    x: &[f64],
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    prior.check_dim(model.input_dim)?;
    model.net_parameter_gradients(x)
}

/// Analytic landscapes used as ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ReferenceLandscape {
    /// `a (y² − 1)²`
    DoubleWell1d { a: f64 },
    /// `a (y₁² − 1)² + ½ b y₂²`
    DoubleWell2d { a: f64, b: f64 },
    /// Müller-Brown surface times `scale`.
    MuellerBrown { scale: f64 },
}

const MB_A: [f64; 4] = [-200.0, -100.0, -170.0, 15.0];
const MB_ALPHA: [f64; 4] = [-1.0, -1.0, -6.5, 0.7];
const MB_BETA: [f64; 4] = [0.0, 0.0, 11.0, 0.6];
const MB_GAMMA: [f64; 4] = [-10.0, -10.0, -6.5, 0.7];
const MB_X0: [f64; 4] = [1.0, 0.0, -0.5, -1.0];
const MB_Y0: [f64; 4] = [0.0, 0.5, 1.5, 1.0];

impl ReferenceLandscape {
    pub const DEFAULT_WELL_DEPTH: f64 = 4.0;
    pub const DEFAULT_TRANSVERSE_STIFFNESS: f64 = 2.0;
    pub const MUELLER_BROWN_SCALE: f64 = 0.1;

    /// Landscape with default parameters by name.
    pub fn from_name(kind: &str) -> Result<Self> {
        match kind {
            "double_well_1d" => Ok(Self::DoubleWell1d {
                a: Self::DEFAULT_WELL_DEPTH,
            }),
            "double_well_2d" => Ok(Self::DoubleWell2d {
                a: Self::DEFAULT_WELL_DEPTH,
                b: Self::DEFAULT_TRANSVERSE_STIFFNESS,
            }),
            "mueller_brown" => Ok(Self::MuellerBrown {
                scale: Self::MUELLER_BROWN_SCALE,
            }),
            other => Err(Error::UnknownKind(format!("landscape '{other}'"))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::DoubleWell1d { .. } => "double_well_1d",
            Self::DoubleWell2d { .. } => "double_well_2d",
            Self::MuellerBrown { .. } => "mueller_brown",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            Self::DoubleWell1d { .. } => 1,
            _ => 2,
        }
    }

    /// Energy and exact gradient `∇U` (not the force).
    pub fn energy_gradient(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        if x.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                got: x.len(),
            });
        }
        Ok(match *self {
            Self::DoubleWell1d { a } => {
                let y = x[0];
                let s = y * y - 1.0;
                (a * s * s, vec![4.0 * a * y * s])
            }
            Self::DoubleWell2d { a, b } => {
                let (y1, y2) = (x[0], x[1]);
                let s = y1 * y1 - 1.0;
                (a * s * s + 0.5 * b * y2 * y2, vec![4.0 * a * y1 * s, b * y2])
            }
            Self::MuellerBrown { scale } => {
                let (mut e, mut gx, mut gy) = (0.0, 0.0, 0.0);
                for k in 0..4 {
                    let dx = x[0] - MB_X0[k];
                    let dy = x[1] - MB_Y0[k];
                    let v = MB_A[k]
                        * (MB_ALPHA[k] * dx * dx + MB_BETA[k] * dx * dy + MB_GAMMA[k] * dy * dy).exp();
                    e += v;
                    gx += v * (2.0 * MB_ALPHA[k] * dx + MB_BETA[k] * dy);
                    gy += v * (MB_BETA[k] * dx + 2.0 * MB_GAMMA[k] * dy);
                }
                (scale * e, vec![scale * gx, scale * gy])
            }
        })
    }

    /// Energy and force `−∇U`.
    pub fn energy_force(&self, x: &[f64]) -> Result<(f64, Vec<f64>)> {
        let (e, mut g) = self.energy_gradient(x)?;
        g.iter_mut().for_each(|v| *v = -*v);
        Ok((e, g))
    }

    /// Local minima, lowest index first. Müller-Brown minima are given to
    /// six decimals.
    pub fn minima(&self) -> Vec<Vec<f64>> {
        match self {
            Self::DoubleWell1d { .. } => vec![vec![-1.0], vec![1.0]],
            Self::DoubleWell2d { .. } => vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            Self::MuellerBrown { .. } => vec![
                vec![-0.558224, 1.441726],
                vec![0.623499, 0.028038],
                vec![-0.050011, 0.466694],
            ],
        }
    }
}

/// Closed-form reference energy and force.
pub fn reference_energy_force(landscape: &ReferenceLandscape, x: &[f64]) -> Result<(f64, Vec<f64>)> {
    landscape.energy_force(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_model(d: usize, seed: u64) -> PotentialModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let configs = DMatrix::from_fn(50, d, |_, _| rng.random_range(-2.0..2.0));
        let mut m = PotentialModel::init(&configs, 8, 6, seed).unwrap();
        // Larger weights than the init so the tanh layer is properly nonlinear.
        let theta: Vec<f64> = (0..m.n_params()).map(|_| rng.random_range(-1.5..1.5)).collect();
        m.set_params(&theta).unwrap();
        m
    }

    fn zero_model(d: usize) -> PotentialModel {
        let mut m = random_model(d, 1);
        let n = m.n_params();
        m.set_params(&vec![0.0; n]).unwrap();
        m
    }

    #[test]
    fn constant_network() {
        let mut m = zero_model(2);
        m.output_bias = 3.25;
        for x in [[0.0, 0.0], [1.0, -4.0], [100.0, 3.0]] {
            assert_eq!(energy(&m, &PriorTerm::None, &x).unwrap(), 3.25);
            assert_eq!(force(&m, &PriorTerm::None, &x).unwrap(), DVector::zeros(2));
        }
    }

    #[test]
    fn harmonic_prior() {
        let m = zero_model(2);
        let prior = PriorTerm::harmonic(vec![0.0, 0.0], 2.0).unwrap();
        assert_eq!(energy(&m, &prior, &[1.0, 0.0]).unwrap(), 1.0);
        let f = force(&m, &prior, &[0.5, -1.5]).unwrap();
        assert_eq!(f.as_slice(), &[-1.0, 3.0]);
    }

    #[test]
    fn dimension_checks() {
        let m = zero_model(2);
        assert!(energy(&m, &PriorTerm::None, &[1.0]).is_err());
        assert!(force(&m, &PriorTerm::None, &[1.0, 2.0, 3.0]).is_err());
        assert!(parameter_gradients(&m, &PriorTerm::None, &[1.0]).is_err());
        let bad_prior = PriorTerm::harmonic(vec![0.0], 1.0).unwrap();
        assert!(energy(&m, &bad_prior, &[1.0, 2.0]).is_err());
    }

    #[test]
    fn output_bias_gradient_is_one() {
        let m = random_model(2, 4);
        let (du, df) = parameter_gradients(&m, &PriorTerm::None, &[0.3, 0.1]).unwrap();
        assert_eq!(du[m.n_params() - 1], 1.0);
        assert!(df.column(m.n_params() - 1).iter().all(|&v| v == 0.0));
    }

    fn rel_close(a: f64, b: f64, rel: f64, abs_floor: f64) -> bool {
        (a - b).abs() <= rel * a.abs().max(b.abs()).max(abs_floor)
    }

    #[test]
    fn force_matches_finite_differences() {
        let prior = PriorTerm::harmonic(vec![0.2, -0.1], 0.7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for trial in 0..100 {
            let m = random_model(2, trial);
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let f = force(&m, &prior, &x).unwrap();
            let h = 1e-5;
            for k in 0..2 {
                let (mut xp, mut xm) = (x, x);
                xp[k] += h;
                xm[k] -= h;
                let fd = -(energy(&m, &prior, &xp).unwrap() - energy(&m, &prior, &xm).unwrap()) / (2.0 * h);
                assert!(rel_close(f[k], fd, 1e-4, 1e-3), "trial {trial}: {} vs {fd}", f[k]);
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let prior = PriorTerm::None;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..20 {
            let m = random_model(2, 100 + trial);
            let x = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let (du, df) = parameter_gradients(&m, &prior, &x).unwrap();
            let theta = m.params();
            for p in 0..m.n_params() {
                let h = 1e-6;
                let mut mp = m.clone();
                let mut mm = m.clone();
                let mut tp = theta.clone();
                tp[p] += h;
                mp.set_params(tp.as_slice()).unwrap();
                let mut tm = theta.clone();
                tm[p] -= h;
                mm.set_params(tm.as_slice()).unwrap();
                let fd = (energy(&mp, &prior, &x).unwrap() - energy(&mm, &prior, &x).unwrap()) / (2.0 * h);
                assert!(rel_close(du[p], fd, 1e-4, 1e-4), "dU/dθ[{p}]: {} vs {fd}", du[p]);
                let fp = force(&mp, &prior, &x).unwrap();
                let fm = force(&mm, &prior, &x).unwrap();
                for k in 0..2 {
                    let fd = (fp[k] - fm[k]) / (2.0 * h);
                    assert!(rel_close(df[(k, p)], fd, 1e-3, 1e-3), "dF{k}/dθ[{p}]: {} vs {fd}", df[(k, p)]);
                }
            }
        }
    }

    #[test]
    fn accumulated_gradient_matches_explicit_jacobian() {
        let m = random_model(3, 8);
        let x = [0.1, -0.4, 0.9];
        let r = DVector::from_vec(vec![0.3, -1.1, 0.5]);
        let ew = 0.7;
        let mut grad = vec![0.0; m.n_params()];
        m.accumulate_gradients(&x, |_| r.clone(), |_| ew, &mut grad);
        let (du, df) = m.net_parameter_gradients(&x).unwrap();
        let expect = du * ew + df.transpose() * &r;
        for p in 0..m.n_params() {
            assert!((grad[p] - expect[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn double_well_minima_and_barrier() {
        let l = ReferenceLandscape::from_name("double_well_1d").unwrap();
        for y in [-1.0, 1.0] {
            let (e, f) = l.energy_force(&[y]).unwrap();
            assert_eq!((e, f[0]), (0.0, 0.0));
        }
        let (e, f) = l.energy_force(&[0.0]).unwrap();
        assert_eq!(e, 4.0);
        assert_eq!(f[0].abs(), 0.0);
        assert!(ReferenceLandscape::from_name("lennard_jones").is_err());
    }

    #[test]
    fn mueller_brown_known_minimum() {
        // Deepest minimum of the canonical surface near (−0.558, 1.442), E ≈ −146.7.
        let l = ReferenceLandscape::from_name("mueller_brown").unwrap();
        let (e, g) = l.energy_gradient(&[-0.558224, 1.441726]).unwrap();
        assert!((e - (-14.67)).abs() < 0.01, "{e}");
        assert!(g.iter().all(|v| v.abs() < 1e-3));
    }

    #[test]
    fn listed_minima_are_stationary() {
        for name in ["double_well_1d", "double_well_2d", "mueller_brown"] {
            let l = ReferenceLandscape::from_name(name).unwrap();
            for m in l.minima() {
                let (_, g) = l.energy_gradient(&m).unwrap();
                assert!(g.iter().all(|v| v.abs() < 1e-3), "{name} {m:?} {g:?}");
            }
        }
    }

    #[test]
    fn reference_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for name in ["double_well_1d", "double_well_2d", "mueller_brown"] {
            let l = ReferenceLandscape::from_name(name).unwrap();
            for _ in 0..100 {
                let x: Vec<f64> = (0..l.dim()).map(|_| rng.random_range(-1.5..1.5)).collect();
                let (_, g) = l.energy_gradient(&x).unwrap();
                for k in 0..l.dim() {
                    let h = 1e-5 * x[k].abs().max(1.0);
                    let (mut xp, mut xm) = (x.clone(), x.clone());
                    xp[k] += h;
                    xm[k] -= h;
                    let fd = (l.energy_gradient(&xp).unwrap().0 - l.energy_gradient(&xm).unwrap().0) / (2.0 * h);
                    assert!(rel_close(g[k], fd, 1e-6, 1e-2), "{name} {x:?}: {} vs {fd}", g[k]);
                }
            }
        }
    }

    #[test]
    fn json_round_trip_and_determinism() {
        let m = random_model(2, 3);
        let back = PotentialModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
        let x = [0.123, -0.456];
        assert_eq!(
            energy_force(&m, &PriorTerm::None, &x).unwrap(),
            energy_force(&back, &PriorTerm::None, &x).unwrap()
        );
    }

    #[test]
    fn init_is_seeded() {
        let configs = DMatrix::from_fn(30, 2, |i, j| (i * 3 + j) as f64 * 0.1);
        let a = PotentialModel::init(&configs, 5, 4, 42).unwrap();
        let b = PotentialModel::init(&configs, 5, 4, 42).unwrap();
        assert_eq!(a, b);
        assert!(a.widths.iter().all(|&w| w > 0.0));
        assert!(a.params().iter().all(|v| v.abs() < 0.1));
    }
}
