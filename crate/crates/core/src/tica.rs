//! Time-lagged independent component analysis.
//!
//! Covariances are centered with the global mean over all frames of all
//! trajectories. Lagged pairs `(t, t + lag)` are only formed inside a
//! trajectory, and the lagged covariance is symmetrized as
//! `½ Cov(x_i(t), x_j(t+τ)) + ½ Cov(x_i(t+τ), x_j(t))`.
//!
//! The generalized problem `C_τ v = λ (C_0 + ridge·I) v` is reduced to a
//! standard symmetric one through the Cholesky factor of the regularized
//! `C_0`, so eigenvalues stay real and eigenvectors come out
//! `C_0`-orthonormal.

use log::warn;
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trajectory::FeatureTrajectory;

/// Condition number of `C_0 + ridge·I` above which the fit is refused.
pub const MAX_CONDITION: f64 = 1e14;

/// Relative ridge: `ridge = DEFAULT_RELATIVE_RIDGE · trace(C_0) / n_features`.
pub const DEFAULT_RELATIVE_RIDGE: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariancePair {
    pub mean: DVector<f64>,
    pub c0: DMatrix<f64>,
    pub c_tau: DMatrix<f64>,
    pub lag_frames: usize,
    /// Frames contributing to the mean and `c0`.
    pub n_samples: usize,
    /// Lagged pairs contributing to `c_tau`.
    pub n_pairs: usize,
    pub feature_names: Vec<String>,
    pub dt: f64,
}

impl CovariancePair {
    pub fn n_features(&self) -> usize {
        self.mean.len()
    }

    /// Ridge used when none is given explicitly.
    pub fn default_ridge(&self) -> f64 {
        DEFAULT_RELATIVE_RIDGE * self.c0.trace() / self.n_features() as f64
    }
}

pub fn estimate_covariances(
    trajs: &[FeatureTrajectory],
    lag_frames: usize,
) -> Result<CovariancePair> {
    let first = trajs
        .first()
        .ok_or_else(|| Error::Invalid("no trajectories given".into()))?;
    if lag_frames == 0 {
        return Err(Error::Invalid("lag must be at least 1 frame".into()));
    }
    for t in &trajs[1..] {
        if t.feature_names() != first.feature_names() {
            return Err(Error::FeatureMismatch(format!(
                "'{}' has features {:?}, '{}' has {:?}",
                first.source_id(),
                first.feature_names(),
                t.source_id(),
                t.feature_names()
            )));
        }
    }
    if trajs.iter().all(|t| t.n_frames() <= lag_frames) {
        return Err(Error::Invalid(format!(
            "lag of {lag_frames} frames is not shorter than any trajectory"
        )));
    }

    let n_features = first.n_features();
    let n_samples: usize = trajs.iter().map(|t| t.n_frames()).sum();
    let mut mean = DVector::zeros(n_features);
    for t in trajs {
        for row in t.frames().row_iter() {
            mean += row.transpose();
        }
    }
    mean /= n_samples as f64;

    let mut c0 = DMatrix::zeros(n_features, n_features);
    let mut lagged = DMatrix::zeros(n_features, n_features);
    let mut n_pairs = 0;
    for t in trajs {
        let mut centered = t.frames().clone();
        for mut row in centered.row_iter_mut() {
            row -= mean.transpose();
        }
        c0.gemm_tr(1.0, &centered, &centered, 1.0);
        let n = t.n_frames();
        if n > lag_frames {
            let head = centered.rows(0, n - lag_frames);
            let tail = centered.rows(lag_frames, n - lag_frames);
            lagged.gemm_tr(1.0, &head, &tail, 1.0);
            n_pairs += n - lag_frames;
        }
    }
    let c0 = symmetrize(&c0) / n_samples as f64;
    let c_tau = symmetrize(&lagged) / n_pairs as f64;

    Ok(CovariancePair {
        mean,
        c0,
        c_tau,
        lag_frames,
        n_samples,
        n_pairs,
        feature_names: first.feature_names().to_vec(),
        dt: first.dt(),
    })
}

/// `(M + Mᵀ) / 2`, bit-exactly symmetric.
fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| 0.5 * (m[(i, j)] + m[(j, i)]))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TicaModel {
    pub covariances: CovariancePair,
    /// Descending.
    pub eigenvalues: DVector<f64>,
    /// Column `i` is the `i`-th slowest direction.
    pub eigenvectors: DMatrix<f64>,
    pub ridge: f64,
    pub explained_variance_ratio: DVector<f64>,
    /// Eigenvalues outside `[-1, 1]` beyond sampling tolerance.
    pub warnings: Vec<String>,
}

impl TicaModel {
    pub fn n_components(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn lag_frames(&self) -> usize {
        self.covariances.lag_frames
    }

    pub fn lag_time(&self) -> f64 {
        self.covariances.lag_frames as f64 * self.covariances.dt
    }

    pub fn mean(&self) -> &DVector<f64> {
        &self.covariances.mean
    }

    pub fn feature_names(&self) -> &[String] {
        &self.covariances.feature_names
    }

    /// Project onto the first `k` slow coordinates: row `t` is `V_kᵀ (x(t) − mean)`.
    pub fn project(&self, traj: &FeatureTrajectory, k: usize) -> Result<DMatrix<f64>> {
        if traj.feature_names() != self.feature_names() {
            return Err(Error::FeatureMismatch(format!(
                "model was fit on {:?}, '{}' has {:?}",
                self.feature_names(),
                traj.source_id(),
                traj.feature_names()
            )));
        }
        self.project_frames(traj.frames(), k)
    }

    /// As [`project`](Self::project) for a bare frame matrix.
    pub fn project_frames(&self, frames: &DMatrix<f64>, k: usize) -> Result<DMatrix<f64>> {
        if k > self.n_components() {
            return Err(Error::Invalid(format!(
                "asked for {k} components, model has {}",
                self.n_components()
            )));
        }
        if frames.ncols() != self.mean().len() {
            return Err(Error::DimensionMismatch {
                expected: self.mean().len(),
                got: frames.ncols(),
            });
        }
        let mut centered = frames.clone();
        for mut row in centered.row_iter_mut() {
            row -= self.mean().transpose();
        }
        Ok(centered * self.eigenvectors.columns(0, k))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = TicaModelDocument::from(self);
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: TicaModelDocument =
            serde_json::from_str(s).map_err(|e| Error::Format(e.to_string()))?;
        doc.try_into()
    }
}

/// Flat JSON layout of a fitted model; matrices are row-major.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TicaModelDocument {
    feature_names: Vec<String>,
    means: Vec<f64>,
    eigenvalues: Vec<f64>,
    /// `n_features` rows of `n_components` entries.
    eigenvectors: Vec<Vec<f64>>,
    lag_frames: usize,
    lag_time: f64,
    dt: f64,
    ridge: f64,
    explained_variance_ratio: Vec<f64>,
    n_samples: usize,
    n_pairs: usize,
    c0: Vec<Vec<f64>>,
    c_tau: Vec<Vec<f64>>,
    warnings: Vec<String>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn from_rows(rows: &[Vec<f64>], ncols: usize) -> Result<DMatrix<f64>> {
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::Format("ragged matrix in model document".into()));
    }
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Ok(DMatrix::from_row_slice(rows.len(), ncols, &flat))
}

impl From<&TicaModel> for TicaModelDocument {
    fn from(m: &TicaModel) -> Self {
        Self {
            feature_names: m.feature_names().to_vec(),
            means: m.mean().iter().copied().collect(),
            eigenvalues: m.eigenvalues.iter().copied().collect(),
            eigenvectors: rows_of(&m.eigenvectors),
            lag_frames: m.lag_frames(),
            lag_time: m.lag_time(),
            dt: m.covariances.dt,
            ridge: m.ridge,
            explained_variance_ratio: m.explained_variance_ratio.iter().copied().collect(),
            n_samples: m.covariances.n_samples,
            n_pairs: m.covariances.n_pairs,
            c0: rows_of(&m.covariances.c0),
            c_tau: rows_of(&m.covariances.c_tau),
            warnings: m.warnings.clone(),
        }
    }
}

impl TryFrom<TicaModelDocument> for TicaModel {
    type Error = Error;

    fn try_from(d: TicaModelDocument) -> Result<Self> {
        let n = d.means.len();
        let k = d.eigenvalues.len();
        if d.feature_names.len() != n || d.eigenvectors.len() != n {
            return Err(Error::Format("model document dimensions disagree".into()));
        }
        Ok(TicaModel {
            covariances: CovariancePair {
                mean: DVector::from_vec(d.means),
                c0: from_rows(&d.c0, n)?,
                c_tau: from_rows(&d.c_tau, n)?,
                lag_frames: d.lag_frames,
                n_samples: d.n_samples,
                n_pairs: d.n_pairs,
                feature_names: d.feature_names,
                dt: d.dt,
            },
            eigenvalues: DVector::from_vec(d.eigenvalues),
            eigenvectors: from_rows(&d.eigenvectors, k)?,
            ridge: d.ridge,
            explained_variance_ratio: DVector::from_vec(d.explained_variance_ratio),
            warnings: d.warnings,
        })
    }
}

/// Solve `C_τ v = λ (C_0 + ridge·I) v` and keep the `n_components` slowest modes.
pub fn fit_tica(cov: &CovariancePair, n_components: usize, ridge: f64) -> Result<TicaModel> {
    let n = cov.n_features();
    if n_components == 0 || n_components > n {
        return Err(Error::Invalid(format!(
            "n_components must be in 1..={n}, got {n_components}"
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Invalid(format!("ridge must be non-negative, got {ridge}")));
    }
    let regularized = &cov.c0 + DMatrix::identity(n, n) * ridge;

    let spectrum = SymmetricEigen::new(regularized.clone()).eigenvalues;
    let (lo, hi) = spectrum
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(lo > 0.0) || hi / lo > MAX_CONDITION {
        return Err(Error::Singular(format!(
            "C0 + ridge·I has eigenvalues in [{lo:e}, {hi:e}]"
        )));
    }
    let chol = regularized
        .cholesky()
        .ok_or_else(|| Error::Singular("Cholesky factorization of C0 + ridge·I failed".into()))?;
    let l = chol.l();

    // A = L⁻¹ C_τ L⁻ᵀ
    let linv_c = l
        .solve_lower_triangular(&cov.c_tau)
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    let a = l
        .solve_lower_triangular(&linv_c.transpose())
        .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
    let eig = SymmetricEigen::new(symmetrize(&a));

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        eig.eigenvalues[j]
            .total_cmp(&eig.eigenvalues[i])
            .then(i.cmp(&j))
    });
    order.truncate(n_components);

    let lt = l.transpose();
    let mut eigenvalues = DVector::zeros(n_components);
    let mut eigenvectors = DMatrix::zeros(n, n_components);
    for (c, &idx) in order.iter().enumerate() {
        eigenvalues[c] = eig.eigenvalues[idx];
        // v = L⁻ᵀ w
        let mut v = lt
            .solve_upper_triangular(&eig.eigenvectors.column(idx).into_owned())
            .ok_or_else(|| Error::Singular("triangular solve failed".into()))?;
        let pivot = v.iter().copied().fold(0.0_f64, |best, x| {
            if x.abs() > best.abs() {
                x
            } else {
                best
            }
        });
        if pivot < 0.0 {
            v.neg_mut();
        }
        eigenvectors.set_column(c, &v);
    }

    let positive_sum: f64 = eigenvalues.iter().map(|&l| l.max(0.0)).sum();
    let explained_variance_ratio = if positive_sum > 0.0 {
        eigenvalues.map(|l| l.max(0.0) / positive_sum)
    } else {
        DVector::zeros(n_components)
    };

    let mut warnings = Vec::new();
    for (i, &l) in eigenvalues.iter().enumerate() {
        if !(-1.0 - 1e-6..=1.0 + 1e-6).contains(&l) {
            let msg = format!("eigenvalue {i} = {l} lies outside [-1, 1]");
            warn!("{msg}");
            warnings.push(msg);
        }
    }

    Ok(TicaModel {
        covariances: cov.clone(),
        eigenvalues,
        eigenvectors,
        ridge,
        explained_variance_ratio,
        warnings,
    })
}
