//! Markov state models in TICA space.
//!
//! Frames are clustered with k-means, lagged transitions are counted within
//! each trajectory, the count matrix is symmetrized and restricted to its
//! largest connected set, and the row-normalized result is the transition
//! matrix. Per-state free energies follow from its stationary distribution.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::units::kt;

pub const DEFAULT_N_STATES: usize = 50;
pub const MAX_LLOYD_ITERATIONS: usize = 500;
pub const LLOYD_TOLERANCE: f64 = 1e-8;
pub const STATIONARY_TOLERANCE: f64 = 1e-12;
pub const MAX_POWER_ITERATIONS: usize = 1_000_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Clustering {
    pub centers: DMatrix<f64>,
    pub assignments: Vec<usize>,
    pub inertia: f64,
    pub iterations: usize,
}

impl Clustering {
    /// Nearest center for each row of `y`; ties go to the lowest index.
    pub fn assign(&self, y: &DMatrix<f64>) -> Result<Vec<usize>> {
        if y.ncols() != self.centers.ncols() {
            return Err(Error::DimensionMismatch {
                expected: self.centers.ncols(),
                got: y.ncols(),
            });
        }
        Ok(assign_all(y, &self.centers).0)
    }
}

fn sq_dist_row(y: &DMatrix<f64>, t: usize, c: &DMatrix<f64>, j: usize) -> f64 {
    (0..y.ncols()).map(|k| (y[(t, k)] - c[(j, k)]).powi(2)).sum()
}

fn nearest(y: &DMatrix<f64>, t: usize, centers: &DMatrix<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..centers.nrows() {
        let d = sq_dist_row(y, t, centers, j);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

fn assign_all(y: &DMatrix<f64>, centers: &DMatrix<f64>) -> (Vec<usize>, f64) {
    let pairs: Vec<(usize, f64)> = (0..y.nrows()).into_par_iter().map(|t| nearest(y, t, centers)).collect();
    let inertia = pairs.iter().map(|p| p.1).sum();
    (pairs.into_iter().map(|p| p.0).collect(), inertia)
}

fn count_distinct(y: &DMatrix<f64>, cap: usize) -> usize {
    let mut rows: Vec<Vec<u64>> = y
        .row_iter()
        .map(|r| r.iter().map(|v| (v + 0.0).to_bits()).collect())
        .collect();
    rows.sort_unstable();
    rows.dedup();
    rows.len().min(cap)
}

/// k-means with k-means++ seeding and Lloyd iterations.
pub fn cluster(y: &DMatrix<f64>, n_states: usize, seed: u64) -> Result<Clustering> {
    let (n, d) = y.shape();
    if n_states == 0 {
        return Err(Error::Invalid("n_states must be positive".into()));
    }
    if n_states > n {
        return Err(Error::Invalid(format!("{n_states} states requested for {n} frames")));
    }
    let distinct = count_distinct(y, n_states);
    if n_states > distinct {
        return Err(Error::Invalid(format!(
            "{n_states} states requested but only {distinct} distinct points"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = DMatrix::zeros(n_states, d);
    let first = rng.random_range(0..n);
    centers.row_mut(0).copy_from(&y.row(first));
    let mut dist2: Vec<f64> = (0..n).map(|t| sq_dist_row(y, t, &centers, 0)).collect();
    for j in 1..n_states {
        let total: f64 = dist2.iter().sum();
        let mut target = rng.random::<f64>() * total;
        let mut pick = None;
        for (t, &w) in dist2.iter().enumerate() {
            if w > 0.0 && target < w {
                pick = Some(t);
                break;
            }
            target -= w;
        }
        // rounding can run past the end; fall back to the farthest point
        let pick = pick.unwrap_or_else(|| {
            (0..n).max_by(|&a, &b| dist2[a].total_cmp(&dist2[b]).then(b.cmp(&a))).unwrap()
        });
        centers.row_mut(j).copy_from(&y.row(pick));
        for (t, d2) in dist2.iter_mut().enumerate() {
            *d2 = d2.min(sq_dist_row(y, t, &centers, j));
        }
    }

    let (mut assignments, mut inertia) = assign_all(y, &centers);
    let mut iterations = 0;
    while iterations < MAX_LLOYD_ITERATIONS {
        iterations += 1;
        let mut sums = DMatrix::<f64>::zeros(n_states, d);
        let mut counts = vec![0usize; n_states];
        for (t, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for k in 0..d {
                sums[(a, k)] += y[(t, k)];
            }
        }
        for j in 0..n_states {
            // an emptied cluster keeps its previous center
            if counts[j] > 0 {
                for k in 0..d {
                    centers[(j, k)] = sums[(j, k)] / counts[j] as f64;
                }
            }
        }
        let (next, next_inertia) = assign_all(y, &centers);
        let unchanged = next == assignments;
        let change = (inertia - next_inertia).abs() / inertia.max(f64::MIN_POSITIVE);
        assignments = next;
        inertia = next_inertia;
        if unchanged || change < LLOYD_TOLERANCE {
            break;
        }
    }
    Ok(Clustering {
        centers,
        assignments,
        inertia,
        iterations,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MsmModel {
    /// Cluster centers for every state, including dropped ones.
    pub centers: DMatrix<f64>,
    /// Raw lagged counts over all states, `counts[(i, j)]` for `i → j`.
    pub counts: DMatrix<u64>,
    /// States kept after the connectivity restriction, in ascending order.
    pub active_states: Vec<usize>,
    pub dropped_states: Vec<usize>,
    /// Row-stochastic, over the active states.
    pub transition: DMatrix<f64>,
    pub stationary: DVector<f64>,
    pub lag_frames: usize,
    /// kcal/mol over the active states, minimum at 0.
    pub free_energy: DVector<f64>,
    pub temperature: f64,
}

impl MsmModel {
    pub fn to_json(&self) -> Result<String> {
        let rows = |m: &DMatrix<f64>| -> Vec<Vec<f64>> { m.row_iter().map(|r| r.iter().copied().collect()).collect() };
        let doc = serde_json::json!({
            "lag_frames": self.lag_frames,
            "temperature": self.temperature,
            "centers": rows(&self.centers),
            "counts": self.counts.row_iter().map(|r| r.iter().copied().collect::<Vec<u64>>()).collect::<Vec<_>>(),
            "active_states": self.active_states,
            "dropped_states": self.dropped_states,
            "transition": rows(&self.transition),
            "stationary": self.stationary.iter().copied().collect::<Vec<_>>(),
            "free_energy": self.free_energy.iter().copied().collect::<Vec<_>>(),
        });
        serde_json::to_string_pretty(&doc).map_err(|e| Error::Format(e.to_string()))
    }

    /// Free energy of each frame's state. Frames in dropped states are an error.
    pub fn frame_free_energies(&self, assignments: &[usize]) -> Result<Vec<f64>> {
        let mut index = vec![None; self.centers.nrows().max(self.counts.nrows())];
        for (a, &s) in self.active_states.iter().enumerate() {
            index[s] = Some(a);
        }
        assignments
            .iter()
            .enumerate()
            .map(|(t, &s)| {
                index
                    .get(s)
                    .copied()
                    .flatten()
                    .map(|a| self.free_energy[a])
                    .ok_or_else(|| Error::Invalid(format!("frame {t} is in state {s}, which is not in the active set")))
            })
            .collect()
    }

    /// `−lag / ln |λ_k|` for the non-stationary eigenvalues, slowest first, in frames.
    pub fn implied_timescales(&self) -> Vec<f64> {
        implied_timescales(&self.transition, &self.stationary, self.lag_frames)
    }
}

/// Transition counts restricted to the largest connected set.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionEstimate {
    pub counts: DMatrix<u64>,
    pub active_states: Vec<usize>,
    pub dropped_states: Vec<usize>,
    pub transition: DMatrix<f64>,
    pub lag_frames: usize,
}

pub fn estimate_transition_matrix(
    assignments: &[Vec<usize>],
    n_states: usize,
    lag_frames: usize,
) -> Result<TransitionEstimate> {
    if lag_frames == 0 {
        return Err(Error::Invalid("lag must be at least 1 frame".into()));
    }
    for (i, traj) in assignments.iter().enumerate() {
        if traj.len() <= lag_frames {
            return Err(Error::Invalid(format!(
                "trajectory {i} has {} frames, not longer than the lag of {lag_frames}",
                traj.len()
            )));
        }
        if let Some(&s) = traj.iter().find(|&&s| s >= n_states) {
            return Err(Error::Invalid(format!("state {s} out of range for {n_states} states")));
        }
    }
    let mut counts = DMatrix::<u64>::zeros(n_states, n_states);
    for traj in assignments {
        for w in 0..traj.len() - lag_frames {
            counts[(traj[w], traj[w + lag_frames])] += 1;
        }
    }
    let sym = DMatrix::from_fn(n_states, n_states, |i, j| 0.5 * (counts[(i, j)] + counts[(j, i)]) as f64);

    let active_states = largest_connected_set(&sym);
    if active_states.is_empty() {
        return Err(Error::Invalid("no transitions observed".into()));
    }
    let dropped_states = (0..n_states).filter(|s| !active_states.contains(s)).collect();
    let m = active_states.len();
    let mut transition = DMatrix::zeros(m, m);
    for (a, &i) in active_states.iter().enumerate() {
        let row_sum: f64 = active_states.iter().map(|&j| sym[(i, j)]).sum();
        if !(row_sum > 0.0) {
            return Err(Error::Invalid(format!("state {i} has no outgoing counts")));
        }
        for (b, &j) in active_states.iter().enumerate() {
            transition[(a, b)] = sym[(i, j)] / row_sum;
        }
    }
    Ok(TransitionEstimate {
        counts,
        active_states,
        dropped_states,
        transition,
        lag_frames,
    })
}

/// Largest connected component of the undirected graph with an edge where
/// `sym > 0`; ties go to the component holding the lowest state. Isolated
/// states without any count are never active.
fn largest_connected_set(sym: &DMatrix<f64>) -> Vec<usize> {
    let n = sym.nrows();
    let mut seen = vec![false; n];
    let mut best: Vec<usize> = Vec::new();
    for start in 0..n {
        if seen[start] || (0..n).all(|j| sym[(start, j)] == 0.0) {
            continue;
        }
        let mut comp = vec![start];
        seen[start] = true;
        let mut queue = VecDeque::from([start]);
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                if !seen[j] && sym[(i, j)] > 0.0 {
                    seen[j] = true;
                    comp.push(j);
                    queue.push_back(j);
                }
            }
        }
        if comp.len() > best.len() {
            comp.sort_unstable();
            best = comp;
        }
    }
    best
}

fn is_irreducible(t: &DMatrix<f64>) -> bool {
    let n = t.nrows();
    let reach = |forward: bool| {
        let mut seen = vec![false; n];
        seen[0] = true;
        let mut queue = VecDeque::from([0]);
        while let Some(i) = queue.pop_front() {
            for j in 0..n {
                let w = if forward { t[(i, j)] } else { t[(j, i)] };
                if !seen[j] && w > 0.0 {
                    seen[j] = true;
                    queue.push_back(j);
                }
            }
        }
        seen.iter().all(|&s| s)
    };
    reach(true) && reach(false)
}

/// Left eigenvector of `transition` for eigenvalue 1 by power iteration.
pub fn stationary_distribution(transition: &DMatrix<f64>) -> Result<DVector<f64>> {
    let n = transition.nrows();
    if n == 0 || transition.ncols() != n {
        return Err(Error::Invalid("transition matrix must be square and non-empty".into()));
    }
    for i in 0..n {
        let row = transition.row(i);
        if row.iter().any(|&v| !(v >= 0.0)) || (row.sum() - 1.0).abs() > 1e-10 {
            return Err(Error::Invalid(format!("row {i} is not a probability distribution")));
        }
    }
    if !is_irreducible(transition) {
        return Err(Error::NonConvergence("transition matrix is reducible".into()));
    }
    let tt = transition.transpose();
    let mut pi = DVector::from_element(n, 1.0 / n as f64);
    for _ in 0..MAX_POWER_ITERATIONS {
        let mut next = &tt * &pi;
        let s = next.sum();
        next /= s;
        let residual: f64 = (&next - &pi).abs().sum();
        pi = next;
        if residual <= STATIONARY_TOLERANCE {
            let check: f64 = (&tt * &pi - &pi).abs().sum();
            if check <= STATIONARY_TOLERANCE && pi.iter().all(|&p| p > 0.0) {
                return Ok(pi);
            }
        }
    }
    Err(Error::NonConvergence(format!(
        "power iteration did not reach ‖πT − π‖₁ ≤ {STATIONARY_TOLERANCE:e} in {MAX_POWER_ITERATIONS} iterations"
    )))
}

/// `−k_B·T·ln π_i`, shifted so the minimum is 0.
pub fn msm_free_energies(stationary: &DVector<f64>, temperature: f64) -> Result<DVector<f64>> {
    if stationary.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::Invalid("stationary probabilities must be positive".into()));
    }
    let g = stationary.map(|p| -kt(temperature) * p.ln());
    let min = g.min();
    Ok(g.add_scalar(-min))
}

/// Implied timescales of a transition matrix with stationary distribution `pi`, in frames.
pub fn implied_timescales(t: &DMatrix<f64>, pi: &DVector<f64>, lag: usize) -> Vec<f64> {
    // D^{1/2} T D^{-1/2} is symmetric for a reversible chain.
    let n = t.nrows();
    let s = DMatrix::from_fn(n, n, |i, j| {
        let v = pi[i].sqrt() * t[(i, j)] / pi[j].sqrt();
        let w = pi[j].sqrt() * t[(j, i)] / pi[i].sqrt();
        0.5 * (v + w)
    });
    let mut ev: Vec<f64> = SymmetricEigen::new(s).eigenvalues.iter().copied().collect();
    ev.sort_by(|a, b| b.total_cmp(a));
    ev.iter()
        .skip(1)
        .map(|&l| -(lag as f64) / l.abs().ln())
        .collect()
}

/// Cluster, count, and solve in one go. `trajectories` are TICA
/// projections, one matrix per trajectory.
pub fn build_msm(
    trajectories: &[DMatrix<f64>],
    n_states: usize,
    lag_frames: usize,
    temperature: f64,
    seed: u64,
) -> Result<(MsmModel, Vec<Vec<usize>>)> {
    let d = trajectories
        .first()
        .ok_or_else(|| Error::Invalid("no trajectories".into()))?
        .ncols();
    let total: usize = trajectories.iter().map(|t| t.nrows()).sum();
    let mut stacked = DMatrix::zeros(total, d);
    let mut at = 0;
    for t in trajectories {
        if t.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: t.ncols() });
        }
        stacked.rows_mut(at, t.nrows()).copy_from(t);
        at += t.nrows();
    }
    let clustering = cluster(&stacked, n_states, seed)?;
    let mut assignments = Vec::with_capacity(trajectories.len());
    let mut at = 0;
    for t in trajectories {
        assignments.push(clustering.assignments[at..at + t.nrows()].to_vec());
        at += t.nrows();
    }
    let est = estimate_transition_matrix(&assignments, n_states, lag_frames)?;
    let stationary = stationary_distribution(&est.transition)?;
    let free_energy = msm_free_energies(&stationary, temperature)?;
    Ok((
        MsmModel {
            centers: clustering.centers,
            counts: est.counts,
            active_states: est.active_states,
            dropped_states: est.dropped_states,
            transition: est.transition,
            stationary,
            lag_frames,
            free_energy,
            temperature,
        },
        assignments,
    ))
}
