//! Mixed force/energy matching.
//!
//! ```text
//! L(θ) = λ_force · L_force(θ) + λ_energy · L_energy(θ)
//! L_force  = (1/N) Σᵢ ‖F_model(xᵢ) − F_target,ᵢ‖²
//! L_energy = (1/N) Σᵢ (rᵢ + C*)²,   rᵢ = U(θ, xᵢ) + E_prior(xᵢ) − G(xᵢ),   C* = −mean(r)
//! ```
//!
//! The offset `C*` is solved in closed form on every batch, so constant
//! shifts of the free-energy targets never reach the parameters.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::{PotentialModel, PriorTerm};

/// The λ_energy values swept in the reference experiments.
pub const LAMBDA_SWEEP: [f64; 8] = [0.0, 0.01, 0.05, 0.075, 0.1, 0.5, 0.8, 1.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub lambda_force: f64,
    pub lambda_energy: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda_force: 1.0,
            lambda_energy: 0.0,
            batch_size: 256,
            max_epochs: 500,
            learning_rate: 1e-3,
            seed: 0,
        }
    }
}

impl LossConfig {
    /// Weights with `λ_force = 1 − λ_energy`.
    pub fn with_lambda_energy(lambda_energy: f64) -> Self {
        Self {
            lambda_force: 1.0 - lambda_energy,
            lambda_energy,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !in_unit(self.lambda_force) || !in_unit(self.lambda_energy) {
            return Err(Error::Invalid(format!(
                "loss weights must lie in [0, 1], got force {} energy {}",
                self.lambda_force, self.lambda_energy
            )));
        }
        if (self.lambda_force + self.lambda_energy - 1.0).abs() > 1e-12 {
            return Err(Error::Invalid(format!(
                "λ_force + λ_energy must equal 1, got {}",
                self.lambda_force + self.lambda_energy
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Invalid("batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Invalid(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Configurations, target forces and free-energy targets on the same frames.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingSet {
    pub configs: DMatrix<f64>,
    pub forces: DMatrix<f64>,
    pub g_targets: DVector<f64>,
}

impl TrainingSet {
    pub fn new(configs: DMatrix<f64>, forces: DMatrix<f64>, g_targets: DVector<f64>) -> Result<Self> {
        if configs.shape() != forces.shape() {
            return Err(Error::Invalid(format!(
                "configs are {:?} but forces are {:?}",
                configs.shape(),
                forces.shape()
            )));
        }
        if g_targets.len() != configs.nrows() {
            return Err(Error::DimensionMismatch {
                expected: configs.nrows(),
                got: g_targets.len(),
            });
        }
        if configs.nrows() == 0 {
            return Err(Error::Invalid("empty training set".into()));
        }
        Ok(Self {
            configs,
            forces,
            g_targets,
        })
    }

    pub fn len(&self) -> usize {
        self.configs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.configs.nrows() == 0
    }

    fn config(&self, i: usize) -> Vec<f64> {
        self.configs.row(i).iter().copied().collect()
    }

    /// Concatenate several sets.
    pub fn concat(parts: &[TrainingSet]) -> Result<Self> {
        let n: usize = parts.iter().map(TrainingSet::len).sum();
        let d = parts
            .first()
            .ok_or_else(|| Error::Invalid("no training sets".into()))?
            .configs
            .ncols();
        let mut configs = DMatrix::zeros(n, d);
        let mut forces = DMatrix::zeros(n, d);
        let mut g = DVector::zeros(n);
        let mut at = 0;
        for p in parts {
            if p.configs.ncols() != d {
                return Err(Error::DimensionMismatch {
                    expected: d,
                    got: p.configs.ncols(),
                });
            }
            configs.rows_mut(at, p.len()).copy_from(&p.configs);
            forces.rows_mut(at, p.len()).copy_from(&p.forces);
            g.rows_mut(at, p.len()).copy_from(&p.g_targets);
            at += p.len();
        }
        Self::new(configs, forces, g)
    }
}

fn check_batch(model: &PotentialModel, prior: &PriorTerm, configs: &DMatrix<f64>) -> Result<()> {
    if configs.nrows() == 0 {
        return Err(Error::Invalid("empty batch".into()));
    }
    if configs.ncols() != model.input_dim {
        return Err(Error::DimensionMismatch {
            expected: model.input_dim,
            got: configs.ncols(),
        });
    }
    if let PriorTerm::Harmonic { center, .. } = prior {
        if center.len() != model.input_dim {
            return Err(Error::DimensionMismatch {
                expected: model.input_dim,
                got: center.len(),
            });
        }
    }
    Ok(())
}

/// Energy and squared force residual of every frame, in frame order.
/// Without target forces the residual is 0.
fn frame_terms(
    model: &PotentialModel,
    prior: &PriorTerm,
    configs: &DMatrix<f64>,
    target_forces: Option<&DMatrix<f64>>,
) -> Result<Vec<(f64, f64)>> {
    (0..configs.nrows())
        .into_par_iter()
        .map(|t| {
            let x: Vec<f64> = configs.row(t).iter().copied().collect();
            let (e, f) = crate::potential::energy_force(model, prior, &x)?;
            let sq = target_forces.map_or(0.0, |tf| (0..x.len()).map(|k| (f[k] - tf[(t, k)]).powi(2)).sum());
            Ok((e, sq))
        })
        .collect()
}

/// Mean squared force residual per frame.
pub fn force_loss(
    model: &PotentialModel,
    prior: &PriorTerm,
    configs: &DMatrix<f64>,
    target_forces: &DMatrix<f64>,
) -> Result<f64> {
    check_batch(model, prior, configs)?;
    check_forces(configs, target_forces)?;
    let terms = frame_terms(model, prior, configs, Some(target_forces))?;
    Ok(mean_sq(&terms))
}

fn check_forces(configs: &DMatrix<f64>, target_forces: &DMatrix<f64>) -> Result<()> {
    if target_forces.shape() != configs.shape() {
        return Err(Error::DimensionMismatch {
            expected: configs.ncols(),
            got: target_forces.ncols(),
        });
    }
    Ok(())
}

fn mean_sq(terms: &[(f64, f64)]) -> f64 {
    terms.iter().map(|t| t.1).sum::<f64>() / terms.len() as f64
}

fn check_targets(configs: &DMatrix<f64>, g_targets: &DVector<f64>) -> Result<()> {
    if g_targets.len() != configs.nrows() {
        return Err(Error::DimensionMismatch {
            expected: configs.nrows(),
            got: g_targets.len(),
        });
    }
    Ok(())
}

/// Energy residual after the optimal offset; returns `(loss, C*)`.
pub fn energy_loss(
    model: &PotentialModel,
    prior: &PriorTerm,
    configs: &DMatrix<f64>,
    g_targets: &DVector<f64>,
) -> Result<(f64, f64)> {
    check_batch(model, prior, configs)?;
    check_targets(configs, g_targets)?;
    let energies: Vec<f64> = frame_terms(model, prior, configs, None)?.iter().map(|t| t.0).collect();
    Ok(offset_free_residual(&energies, g_targets.as_slice()))
}

/// `(mean((r − r̄)²), −r̄)` for `r = energies − targets`, computed from the
/// separately centered energies and targets. A constant shift of the
/// targets then changes `C*` only.
fn offset_free_residual(energies: &[f64], targets: &[f64]) -> (f64, f64) {
    let n = energies.len() as f64;
    let mean_u = energies.iter().sum::<f64>() / n;
    let mean_g = targets.iter().sum::<f64>() / n;
    let loss = energies
        .iter()
        .zip(targets)
        .map(|(u, g)| ((u - mean_u) - (g - mean_g)).powi(2))
        .sum::<f64>()
        / n;
    (loss, mean_g - mean_u)
}

/// Residual `(U_i − Ū) − (G_i − Ḡ)` for every frame of a batch.
fn centered_residuals(energies: &[f64], targets: &[f64]) -> Vec<f64> {
    let n = energies.len() as f64;
    let mean_u = energies.iter().sum::<f64>() / n;
    let mean_g = targets.iter().sum::<f64>() / n;
    energies
        .iter()
        .zip(targets)
        .map(|(u, g)| (u - mean_u) - (g - mean_g))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    pub force: f64,
    pub energy: f64,
    pub offset: f64,
}

fn combine(cfg: &LossConfig, force: f64, energy: f64) -> f64 {
    if cfg.lambda_energy == 0.0 {
        force
    } else if cfg.lambda_force == 0.0 {
        energy
    } else {
        cfg.lambda_force * force + cfg.lambda_energy * energy
    }
}

/// `λ_force·L_force + λ_energy·L_energy`; a zero weight drops its term exactly.
pub fn total_loss(
    model: &PotentialModel,
    prior: &PriorTerm,
    batch: &TrainingSet,
    cfg: &LossConfig,
) -> Result<f64> {
    Ok(loss_parts(model, prior, batch, cfg)?.total)
}

pub fn loss_parts(
    model: &PotentialModel,
    prior: &PriorTerm,
    batch: &TrainingSet,
    cfg: &LossConfig,
) -> Result<LossParts> {
    check_batch(model, prior, &batch.configs)?;
    check_forces(&batch.configs, &batch.forces)?;
    check_targets(&batch.configs, &batch.g_targets)?;
    // one forward pass serves both terms
    let terms = frame_terms(model, prior, &batch.configs, Some(&batch.forces))?;
    let force = mean_sq(&terms);
    let energies: Vec<f64> = terms.iter().map(|t| t.0).collect();
    let (energy, offset) = offset_free_residual(&energies, batch.g_targets.as_slice());
    Ok(LossParts {
        total: combine(cfg, force, energy),
        force,
        energy,
        offset,
    })
}

/// Loss parts and `∇_θ` of the total loss over the frames `idx`.
pub fn loss_and_gradient(
    model: &PotentialModel,
    prior: &PriorTerm,
    data: &TrainingSet,
    idx: &[usize],
    cfg: &LossConfig,
) -> Result<(LossParts, DVector<f64>)> {
    check_batch(model, prior, &data.configs)?;
    if idx.is_empty() {
        return Err(Error::Invalid("empty batch".into()));
    }
    let n = idx.len() as f64;
    let xs: Vec<Vec<f64>> = idx.iter().map(|&i| data.config(i)).collect();
    let use_energy = cfg.lambda_energy != 0.0;
    let use_force = cfg.lambda_force != 0.0;

    // Energy residuals are needed before their gradient weights are known.
    let energies: Vec<f64> = xs
        .iter()
        .map(|x| model.net_energy(x).map(|u| u + prior.energy(x)))
        .collect::<Result<_>>()?;
    let targets: Vec<f64> = idx.iter().map(|&i| data.g_targets[i]).collect();
    let (energy_term, offset) = offset_free_residual(&energies, &targets);
    let residuals = centered_residuals(&energies, &targets);

    let mut grad = vec![0.0; model.n_params()];
    let mut force_term = 0.0;
    for (b, x) in xs.iter().enumerate() {
        let i = idx[b];
        let mut sq = 0.0;
        let ew = if use_energy {
            cfg.lambda_energy * 2.0 * residuals[b] / n
        } else {
            0.0
        };
        model.accumulate_gradients(
            x,
            |net_force| {
                let mut f = net_force.clone();
                prior.add_force(x, f.as_mut_slice());
                DVector::from_fn(f.len(), |k, _| {
                    let r = f[k] - data.forces[(i, k)];
                    sq += r * r;
                    if use_force {
                        cfg.lambda_force * 2.0 * r / n
                    } else {
                        0.0
                    }
                })
            },
            |_| ew,
            &mut grad,
        );
        force_term += sq;
    }
    let force_term = force_term / n;
    let parts = LossParts {
        total: combine(cfg, force_term, energy_term),
        force: force_term,
        energy: energy_term,
        offset,
    };
    Ok((parts, DVector::from_vec(grad)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub total: f64,
    pub force: f64,
    pub energy: f64,
    /// Offset `C*` fitted on the full training set.
    pub offset: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: LossConfig,
    /// Epoch 0 is the initial model.
    pub epochs: Vec<EpochRecord>,
    pub final_params: Vec<f64>,
    pub converged: bool,
}

impl TrainReport {
    /// Columns `epoch,total,force,energy,C`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,total,force,energy,C\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{},{},{},{}\n", e.epoch, e.total, e.force, e.energy, e.offset));
        }
        s
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;
const PLATEAU_WINDOW: usize = 10;
const PLATEAU_TOLERANCE: f64 = 1e-8;

/// Mini-batch Adam on the total loss, starting from `model`.
pub fn train(
    mut model: PotentialModel,
    prior: &PriorTerm,
    data: &TrainingSet,
    cfg: &LossConfig,
) -> Result<(PotentialModel, TrainReport)> {
    cfg.validate()?;
    check_batch(&model, prior, &data.configs)?;
    let n_params = model.n_params();
    let mut theta = model.params();
    let mut m = DVector::zeros(n_params);
    let mut v = DVector::zeros(n_params);
    let mut t = 0i32;
    let mut order: Vec<usize> = (0..data.len()).collect();

    let evaluate = |model: &PotentialModel, epoch: usize| -> Result<EpochRecord> {
        let p = loss_parts(model, prior, data, cfg)?;
        Ok(EpochRecord {
            epoch,
            total: p.total,
            force: p.force,
            energy: p.energy,
            offset: p.offset,
        })
    };
    let mut epochs = vec![evaluate(&model, 0)?];
    let mut last_finite = theta.as_slice().to_vec();
    let mut converged = false;

    for epoch in 1..=cfg.max_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let (parts, grad) = loss_and_gradient(&model, prior, data, batch, cfg)?;
            if !parts.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::TrainingDiverged {
                    epoch,
                    last_finite_params: last_finite,
                });
            }
            t += 1;
            m = m * ADAM_BETA1 + &grad * (1.0 - ADAM_BETA1);
            v = v * ADAM_BETA2 + grad.map(|g| g * g) * (1.0 - ADAM_BETA2);
            let m_hat_scale = 1.0 / (1.0 - ADAM_BETA1.powi(t));
            let v_hat_scale = 1.0 / (1.0 - ADAM_BETA2.powi(t));
            for p in 0..n_params {
                theta[p] -= cfg.learning_rate * m[p] * m_hat_scale / ((v[p] * v_hat_scale).sqrt() + ADAM_EPS);
            }
            model.set_params(theta.as_slice())?;
        }
        let record = evaluate(&model, epoch)?;
        if !record.total.is_finite() {
            return Err(Error::TrainingDiverged {
                epoch,
                last_finite_params: last_finite,
            });
        }
        last_finite.copy_from_slice(theta.as_slice());
        epochs.push(record);
        if epoch >= PLATEAU_WINDOW {
            let before = epochs[epoch - PLATEAU_WINDOW].total;
            let now = epochs[epoch].total;
            if before - now < PLATEAU_TOLERANCE * before.abs() {
                converged = true;
                break;
            }
        }
    }

    Ok((
        model,
        TrainReport {
            config: cfg.clone(),
            epochs,
            final_params: theta.as_slice().to_vec(),
            converged,
        },
    ))
}
