//! Overdamped Langevin (Brownian) dynamics.
//!
//! Each chain integrates `x ← x + (dt/γ)·F(x) + √(2·D·dt)·ξ` with
//! `D = k_B·T/γ`. The noise of chain `c` comes from its own ChaCha stream;
//! every step consumes a fixed number of words, so the noise at any
//! `(seed, chain, step)` is fixed regardless of how chains are scheduled.

use log::warn;
use nalgebra::DMatrix;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::potential::{PotentialModel, PriorTerm, ReferenceLandscape};
use crate::trajectory::{FeatureTrajectory, ForceRecord};
use crate::units::kt;

/// Positions beyond this magnitude count as a blown-up integration.
pub const DIVERGENCE_LIMIT: f64 = 1e6;
/// Warn when `dt · curvature / γ` exceeds this.
pub const STABILITY_WARNING: f64 = 0.1;

/// Anything that can supply energy and force at a configuration.
pub trait ForceField: Sync {
    fn dim(&self) -> usize;

    /// Writes `−∇U(x)` into `force` and returns `U(x)`.
    fn energy_force(&self, x: &[f64], force: &mut [f64]) -> f64;
}

impl ForceField for ReferenceLandscape {
    fn dim(&self) -> usize {
        ReferenceLandscape::dim(self)
    }

    fn energy_force(&self, x: &[f64], force: &mut [f64]) -> f64 {
        let (e, f) = ReferenceLandscape::energy_force(self, x).expect("dimension checked by simulate");
        force.copy_from_slice(&f);
        e
    }
}

/// A harmonic prior on its own acts as a harmonic well.
impl ForceField for PriorTerm {
    fn dim(&self) -> usize {
        match self {
            PriorTerm::None => 0,
            PriorTerm::Harmonic { center, .. } => center.len(),
        }
    }

    fn energy_force(&self, x: &[f64], force: &mut [f64]) -> f64 {
        force.fill(0.0);
        self.add_force(x, force);
        self.energy(x)
    }
}

/// Learned network plus its prior.
#[derive(Debug, Clone)]
pub struct LearnedPotential {
    pub model: PotentialModel,
    pub prior: PriorTerm,
}

impl ForceField for LearnedPotential {
    fn dim(&self) -> usize {
        self.model.input_dim
    }

    fn energy_force(&self, x: &[f64], force: &mut [f64]) -> f64 {
        let (e, f) = self.model.net_energy_force(x).expect("dimension checked by simulate");
        force.copy_from_slice(f.as_slice());
        self.prior.add_force(x, force);
        e + self.prior.energy(x)
    }
}

/// Zero everywhere; only useful for testing the integrator.
#[derive(Debug, Clone, Copy)]
pub struct FreeParticle(pub usize);

impl ForceField for FreeParticle {
    fn dim(&self) -> usize {
        self.0
    }

    fn energy_force(&self, _x: &[f64], force: &mut [f64]) -> f64 {
        force.fill(0.0);
        0.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LangevinConfig {
    pub dt: f64,
    pub gamma: f64,
    pub temperature: f64,
    pub n_steps: u64,
    pub stride: u64,
    pub seed: u64,
    /// One chain per entry.
    pub initial_positions: Vec<Vec<f64>>,
}

impl LangevinConfig {
    pub const DEFAULT_DT: f64 = 1e-3;
    pub const DEFAULT_GAMMA: f64 = 1.0;

    pub fn diffusion(&self) -> f64 {
        kt(self.temperature) / self.gamma
    }

    pub fn frames_per_chain(&self) -> usize {
        (self.n_steps / self.stride) as usize
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Invalid(format!("dt must be positive, got {}", self.dt)));
        }
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::Invalid(format!("gamma must be positive, got {}", self.gamma)));
        }
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(Error::Invalid(format!(
                "temperature must be non-negative, got {}",
                self.temperature
            )));
        }
        if self.stride == 0 {
            return Err(Error::Invalid("stride must be at least 1".into()));
        }
        if self.frames_per_chain() < 2 {
            return Err(Error::Invalid(format!(
                "{} steps at stride {} record fewer than 2 frames",
                self.n_steps, self.stride
            )));
        }
        if self.initial_positions.is_empty() {
            return Err(Error::Invalid("no initial positions".into()));
        }
        for p in &self.initial_positions {
            if p.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    got: p.len(),
                });
            }
        }
        Ok(())
    }
}

/// Standard normal draws for one chain, at a fixed number of ChaCha words
/// per step.
pub struct NoiseStream {
    rng: ChaCha8Rng,
    pairs_per_step: usize,
    buf: Vec<f64>,
}

impl NoiseStream {
    /// Positioned at the start of `step` for chain `chain`.
    pub fn new(seed: u64, chain: u64, dim: usize, step: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(chain);
        let pairs_per_step = dim.div_ceil(2);
        // two u64 per Box–Muller pair, four 32-bit words
        rng.set_word_pos(step as u128 * pairs_per_step as u128 * 4);
        Self {
            rng,
            pairs_per_step,
            buf: vec![0.0; 2 * pairs_per_step],
        }
    }

    /// Normals for the next step; only the first `dim` are meaningful.
    pub fn next_step(&mut self) -> &[f64] {
        for p in 0..self.pairs_per_step {
            // u1 in (0, 1], u2 in [0, 1)
            let u1 = ((self.rng.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64);
            let u2 = (self.rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64);
            let r = (-2.0 * u1.ln()).sqrt();
            let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
            self.buf[2 * p] = r * c;
            self.buf[2 * p + 1] = r * s;
        }
        &self.buf
    }
}

/// Recorded frames and forces of one chain.
#[derive(Debug, Clone, PartialEq)]
pub struct Chain {
    pub trajectory: FeatureTrajectory,
    pub forces: ForceRecord,
    /// Energy at each recorded frame.
    pub energies: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulationOutput {
    pub chains: Vec<Chain>,
    pub warnings: Vec<String>,
}

impl SimulationOutput {
    pub fn trajectories(&self) -> Vec<FeatureTrajectory> {
        self.chains.iter().map(|c| c.trajectory.clone()).collect()
    }
}

/// Largest diagonal curvature `∂²U/∂x_k²` at `x`, by central differences of the force.
fn local_curvature(field: &dyn ForceField, x: &[f64]) -> f64 {
    let d = x.len();
    let h = 1e-5;
    let mut fp = vec![0.0; d];
    let mut fm = vec![0.0; d];
    let mut worst: f64 = 0.0;
    for k in 0..d {
        let (mut xp, mut xm) = (x.to_vec(), x.to_vec());
        xp[k] += h;
        xm[k] -= h;
        field.energy_force(&xp, &mut fp);
        field.energy_force(&xm, &mut fm);
        worst = worst.max((-(fp[k] - fm[k]) / (2.0 * h)).abs());
    }
    worst
}

pub fn simulate<F: ForceField>(field: &F, cfg: &LangevinConfig) -> Result<SimulationOutput> {
    let dim = field.dim();
    cfg.validate(dim)?;
    let mut warnings = Vec::new();
    for (c, x0) in cfg.initial_positions.iter().enumerate() {
        let mut f = vec![0.0; dim];
        field.energy_force(x0, &mut f);
        if f.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid(format!("non-finite force at the start of chain {c}")));
        }
        let stiffness = cfg.dt * local_curvature(field, x0) / cfg.gamma;
        if stiffness > STABILITY_WARNING {
            let msg = format!(
                "chain {c}: dt·curvature/gamma = {stiffness:.3} exceeds {STABILITY_WARNING}; integration may be inaccurate"
            );
            warn!("{msg}");
            warnings.push(msg);
        }
    }

    let chains = cfg
        .initial_positions
        .par_iter()
        .enumerate()
        .map(|(c, x0)| run_chain(field, cfg, c, x0))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulationOutput { chains, warnings })
}

fn run_chain<F: ForceField>(field: &F, cfg: &LangevinConfig, chain: usize, x0: &[f64]) -> Result<Chain> {
    let dim = x0.len();
    let n_frames = cfg.frames_per_chain();
    let drift = cfg.dt / cfg.gamma;
    let noise_scale = (2.0 * cfg.diffusion() * cfg.dt).sqrt();
    let mut noise = NoiseStream::new(cfg.seed, chain as u64, dim, 0);
    let mut x = x0.to_vec();
    let mut f = vec![0.0; dim];
    field.energy_force(&x, &mut f);
    let mut frames = Vec::with_capacity(n_frames * dim);
    let mut forces = Vec::with_capacity(n_frames * dim);
    let mut energies = Vec::with_capacity(n_frames);
    for step in 1..=cfg.n_steps {
        let xi = noise.next_step();
        for k in 0..dim {
            x[k] += drift * f[k] + noise_scale * xi[k];
        }
        if x.iter().any(|v| !(v.abs() <= DIVERGENCE_LIMIT)) {
            return Err(Error::SimulationDiverged { chain, step });
        }
        let e = field.energy_force(&x, &mut f);
        if step % cfg.stride == 0 && energies.len() < n_frames {
            frames.extend_from_slice(&x);
            forces.extend_from_slice(&f);
            energies.push(e);
        }
    }
    let frames = DMatrix::from_row_slice(n_frames, dim, &frames);
    let forces = DMatrix::from_row_slice(n_frames, dim, &forces);
    let names = (0..dim).map(|k| format!("x{k}")).collect();
    Ok(Chain {
        trajectory: FeatureTrajectory::new(frames.clone(), cfg.dt * cfg.stride as f64, names, format!("chain{chain}"))?,
        forces: ForceRecord::new(frames, forces)?,
        energies,
    })
}
