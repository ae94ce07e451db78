//! Subcommand bodies. Each reads its declared inputs, writes its outputs
//! under the configured directory and records both in the manifest.

use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context};
use fematch::evaluation::{density_grid, KlReport};
use fematch::freeenergy::mean_energy_grid;
use fematch::msm::build_msm;
use fematch::sampler::{LearnedPotential, SimulationOutput};
use fematch::trajectory::pairwise_distance_features;
use fematch::{
    boltzmann_invert, check_explained_variance, energy_correction, estimate_covariances, fit_marginals, fit_tica,
    kl_divergence_2d, simulate, train, EnergyRecord, FeatureTrajectory, FileFormat, ForceField, ForceRecord,
    FreeEnergyTargets, LangevinConfig, PotentialModel, PriorTerm, TicaModel, TrainReport, TrainingSet,
};
use nalgebra::{DMatrix, DVector};

use crate::config::{RunConfig, Stage};
use crate::manifest::Manifest;

pub fn load_trajectory(path: &Path, manifest: &mut Manifest) -> anyhow::Result<FeatureTrajectory> {
    manifest.add_input(path)?;
    FeatureTrajectory::load(path, FileFormat::from_path(path)).with_context(|| format!("loading {}", path.display()))
}

pub fn load_tica(path: &Path, manifest: &mut Manifest) -> anyhow::Result<TicaModel> {
    manifest.add_input(path)?;
    let text = std::fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    TicaModel::from_json(&text).with_context(|| format!("loading {}", path.display()))
}

fn write_text(manifest: &mut Manifest, name: &str, text: &str) -> anyhow::Result<()> {
    let path = manifest.output_path(name);
    std::fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))?;
    manifest.add_output(name)
}

fn ensure_dir(manifest: &Manifest, sub: &str) -> anyhow::Result<()> {
    let dir = manifest.output_path(sub);
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))
}

/// Every input must carry the same feature names as the first one.
fn check_same_features(reference: (&Path, &FeatureTrajectory), others: &[(PathBuf, FeatureTrajectory)]) -> anyhow::Result<()> {
    for (path, t) in others {
        if t.feature_names() != reference.1.feature_names() {
            bail!(
                "feature mismatch: {} has {:?} but {} has {:?}",
                reference.0.display(),
                reference.1.feature_names(),
                path.display(),
                t.feature_names()
            );
        }
    }
    Ok(())
}

/// The first two projected coordinates; a single component is paired with zeros.
pub fn first_two(y: &DMatrix<f64>) -> DMatrix<f64> {
    DMatrix::from_fn(y.nrows(), 2, |t, k| if k < y.ncols() { y[(t, k)] } else { 0.0 })
}

pub fn stack(parts: &[DMatrix<f64>]) -> DMatrix<f64> {
    let cols = parts.first().map_or(0, |p| p.ncols());
    let rows = parts.iter().map(|p| p.nrows()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for p in parts {
        out.rows_mut(at, p.nrows()).copy_from(p);
        at += p.nrows();
    }
    out
}

pub fn fit_tica_model(trajs: &[FeatureTrajectory], cfg: &RunConfig, manifest: &mut Manifest) -> anyhow::Result<TicaModel> {
    let cov = estimate_covariances(trajs, cfg.lag)?;
    let n_features = cov.n_features();
    if cfg.components > n_features {
        manifest.warn(format!(
            "{} components requested for {n_features} features; keeping {n_features}",
            cfg.components
        ));
    }
    let ridge = cfg.ridge.unwrap_or_else(|| cov.default_ridge());
    let model = fit_tica(&cov, cfg.components.min(n_features), ridge)?;
    for w in &model.warnings {
        manifest.warn(w.clone());
    }
    Ok(model)
}

pub fn project_all(tica: &TicaModel, trajs: &[FeatureTrajectory]) -> anyhow::Result<Vec<DMatrix<f64>>> {
    trajs.iter().map(|t| Ok(tica.project(t, tica.n_components())?)).collect()
}

/// Free-energy targets for each trajectory from marginals fit on all of them.
pub fn free_energy_targets(
    tica: &TicaModel,
    trajs: &[FeatureTrajectory],
    prior_energies: &[DVector<f64>],
    cfg: &RunConfig,
) -> anyhow::Result<Vec<FreeEnergyTargets>> {
    let ys = project_all(tica, trajs)?;
    let density = fit_marginals(&stack(&ys), &cfg.density_params(), cfg.floor_epsilon)?;
    ys.iter()
        .zip(prior_energies)
        .map(|(y, e)| {
            let g = boltzmann_invert(&density, y, cfg.temperature)?;
            Ok(energy_correction(g, &EnergyRecord::new(e.clone(), None)?)?)
        })
        .collect()
}

/// Configured prior evaluated on every frame.
pub fn prior_energies(traj: &FeatureTrajectory, cfg: &RunConfig) -> DVector<f64> {
    let prior = cfg.prior(traj.n_features());
    DVector::from_fn(traj.n_frames(), |t, _| {
        let x: Vec<f64> = traj.frames().row(t).iter().copied().collect();
        prior.energy(&x)
    })
}

pub fn sample_field<F: ForceField>(
    field: &F,
    cfg: &RunConfig,
    stage: Stage,
    manifest: &mut Manifest,
) -> anyhow::Result<SimulationOutput> {
    let lc = LangevinConfig {
        dt: cfg.dt,
        gamma: cfg.gamma,
        temperature: cfg.temperature,
        n_steps: cfg.steps,
        stride: cfg.stride,
        seed: cfg.stage_seed(stage),
        initial_positions: cfg.initial_positions(field.dim())?,
    };
    let out = simulate(field, &lc)?;
    for w in &out.warnings {
        manifest.warn(w.clone());
    }
    Ok(out)
}

/// Writes `traj_NNN`, `forces_NNN.bin` and `prior_NNN.bin` per chain under `sub`.
pub fn write_chains(out: &SimulationOutput, sub: &str, cfg: &RunConfig, manifest: &mut Manifest) -> anyhow::Result<()> {
    ensure_dir(manifest, sub)?;
    for (c, chain) in out.chains.iter().enumerate() {
        let traj_name = format!("{sub}/traj_{c:03}.{}", cfg.extension());
        chain.trajectory.save(manifest.output_path(&traj_name), cfg.trajectory_format())?;
        manifest.add_output(&traj_name)?;
        let forces_name = format!("{sub}/forces_{c:03}.bin");
        chain.forces.save(manifest.output_path(&forces_name))?;
        manifest.add_output(&forces_name)?;
        let prior_name = format!("{sub}/prior_{c:03}.bin");
        EnergyRecord::new(prior_energies(&chain.trajectory, cfg), None)?.save(manifest.output_path(&prior_name))?;
        manifest.add_output(&prior_name)?;
    }
    Ok(())
}

/// Training set from paired configurations, forces and targets, thinned by `train_stride`.
pub fn training_set(
    records: &[ForceRecord],
    targets: &[FreeEnergyTargets],
    cfg: &RunConfig,
) -> anyhow::Result<TrainingSet> {
    ensure!(records.len() == targets.len(), "{} force files but {} target files", records.len(), targets.len());
    let parts = records
        .iter()
        .zip(targets)
        .enumerate()
        .map(|(i, (r, g))| {
            ensure!(
                r.n_frames() == g.n_frames(),
                "pair {i}: {} force frames but {} target frames",
                r.n_frames(),
                g.n_frames()
            );
            let keep: Vec<usize> = (0..r.n_frames()).step_by(cfg.train_stride).collect();
            Ok(TrainingSet::new(
                r.configs().select_rows(keep.iter()),
                r.forces().select_rows(keep.iter()),
                g.g_total.select_rows(keep.iter()),
            )?)
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(TrainingSet::concat(&parts)?)
}

pub fn train_potential(data: &TrainingSet, cfg: &RunConfig) -> anyhow::Result<(PotentialModel, PriorTerm, TrainReport)> {
    let model = PotentialModel::init(&data.configs, cfg.n_basis, cfg.n_hidden, cfg.stage_seed(Stage::ModelInit))?;
    let prior = cfg.prior(data.configs.ncols());
    let (model, report) = train(model, &prior, data, &cfg.loss_config())?;
    Ok((model, prior, report))
}

pub fn write_training(model: &PotentialModel, report: &TrainReport, manifest: &mut Manifest) -> anyhow::Result<()> {
    write_text(manifest, "potential.json", &model.to_json()?)?;
    write_text(manifest, "train_report.csv", &report.to_csv())?;
    write_text(manifest, "train_report.json", &report.to_json()?)
}

/// KL and density grids of model against truth, both projected with `tica`.
pub fn evaluate_projections(
    truth: &[DMatrix<f64>],
    model: &[DMatrix<f64>],
    cfg: &RunConfig,
    manifest: &mut Manifest,
) -> anyhow::Result<KlReport> {
    let truth_y2 = first_two(&stack(truth));
    let model_y2 = first_two(&stack(model));
    let report = kl_divergence_2d(&truth_y2, &model_y2, cfg.kl_bins, cfg.kl_bins, cfg.epsilon)?;
    write_text(manifest, "kl_report.json", &report.to_json()?)?;
    for (name, y2) in [("truth_density.csv", &truth_y2), ("model_density.csv", &model_y2)] {
        let grid = density_grid(y2, report.bounds, cfg.kl_bins, cfg.kl_bins)?;
        write_text(manifest, name, &grid.to_csv())?;
    }
    Ok(report)
}

pub fn write_explained_variance(tica: &TicaModel, cfg: &RunConfig, manifest: &mut Manifest) -> anyhow::Result<()> {
    let k = tica.n_components().min(2);
    let report = check_explained_variance(tica, k, cfg.variance_threshold)?;
    if !report.passed {
        manifest.warn(format!(
            "first {k} components explain {:.3} of the variance, below {}",
            report.cumulative, cfg.variance_threshold
        ));
    }
    write_text(manifest, "explained_variance.json", &serde_json::to_string_pretty(&report)?)
}

pub fn featurize(input: &Path, cfg: &RunConfig, manifest: &mut Manifest) -> anyhow::Result<()> {
    let raw = load_trajectory(input, manifest)?;
    let features = pairwise_distance_features(raw.frames(), raw.dt(), raw.source_id())?;
    let name = format!("features.{}", cfg.extension());
    features.save(manifest.output_path(&name), cfg.trajectory_format())?;
    manifest.add_output(&name)
}

pub fn tica(inputs: &[PathBuf], cfg: &RunConfig, manifest: &mut Manifest) -> anyhow::Result<()> {
    let trajs = load_all(inputs, manifest)?;
    let model = fit_tica_model(&trajs, cfg, manifest)?;
    write_text(manifest, "tica.json", &model.to_json()?)?;
    write_explained_variance(&model, cfg, manifest)
}

fn load_all(inputs: &[PathBuf], manifest: &mut Manifest) -> anyhow::Result<Vec<FeatureTrajectory>> {
    ensure!(!inputs.is_empty(), "no input trajectories");
    let loaded = inputs
        .iter()
        .map(|p| Ok((p.clone(), load_trajectory(p, manifest)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    check_same_features((&loaded[0].0, &loaded[0].1), &loaded[1..])?;
    Ok(loaded.into_iter().map(|(_, t)| t).collect())
}

fn check_tica_features(tica: &TicaModel, tica_path: &Path, inputs: &[PathBuf], trajs: &[FeatureTrajectory]) -> anyhow::Result<()> {
    for (p, t) in inputs.iter().zip(trajs) {
        if t.feature_names() != tica.feature_names() {
            bail!(
                "feature mismatch: {} was fit on {:?} but {} has {:?}",
                tica_path.display(),
                tica.feature_names(),
                p.display(),
                t.feature_names()
            );
        }
    }
    Ok(())
}

pub fn targets(
    tica_path: &Path,
    inputs: &[PathBuf],
    priors: &[PathBuf],
    cfg: &RunConfig,
    manifest: &mut Manifest,
) -> anyhow::Result<()> {
    let tica = load_tica(tica_path, manifest)?;
    let trajs = load_all(inputs, manifest)?;
    check_tica_features(&tica, tica_path, inputs, &trajs)?;
    let energies = if priors.is_empty() {
        trajs.iter().map(|t| prior_energies(t, cfg)).collect()
    } else {
        ensure!(priors.len() == inputs.len(), "{} prior files for {} trajectories", priors.len(), inputs.len());
        priors
            .iter()
            .map(|p| {
                manifest.add_input(p)?;
                Ok(EnergyRecord::load(p)?.prior_energy)
            })
            .collect::<anyhow::Result<Vec<_>>>()?
    };
    let targets = free_energy_targets(&tica, &trajs, &energies, cfg)?;
    for (i, t) in targets.iter().enumerate() {
        let name = format!("targets_{i:03}.bin");
        t.save(manifest.output_path(&name))?;
        manifest.add_output(&name)?;
    }
    Ok(())
}

pub fn train_cmd(forces: &[PathBuf], target_files: &[PathBuf], cfg: &RunConfig, manifest: &mut Manifest) -> anyhow::Result<()> {
    ensure!(!forces.is_empty(), "no force files");
    let mut records = Vec::new();
    for p in forces {
        manifest.add_input(p)?;
        records.push(ForceRecord::load(p).with_context(|| format!("loading {}", p.display()))?);
    }
    let mut targets = Vec::new();
    for p in target_files {
        manifest.add_input(p)?;
        targets.push(FreeEnergyTargets::load(p, cfg.temperature).with_context(|| format!("loading {}", p.display()))?);
    }
    let data = training_set(&records, &targets, cfg)?;
    let (model, _, report) = train_potential(&data, cfg)?;
    write_training(&model, &report, manifest)
}

pub fn sample(potential: Option<&Path>, cfg: &RunConfig, manifest: &mut Manifest) -> anyhow::Result<()> {
    let out = match (potential, cfg.landscape()?) {
        (Some(p), _) => {
            manifest.add_input(p)?;
            let text = std::fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            let model = PotentialModel::from_json(&text)?;
            let prior = cfg.prior(model.input_dim);
            sample_field(&LearnedPotential { model, prior }, cfg, Stage::ModelSampling, manifest)?
        }
        (None, Some(l)) => sample_field(&l, cfg, Stage::TruthSampling, manifest)?,
        (None, None) => bail!("sample needs --potential or --system"),
    };
    write_chains(&out, "chains", cfg, manifest)
}

pub fn evaluate(
    tica_path: Option<&Path>,
    truth: &[PathBuf],
    model: &[PathBuf],
    cfg: &RunConfig,
    manifest: &mut Manifest,
) -> anyhow::Result<()> {
    let truth_trajs = load_all(truth, manifest)?;
    ensure!(!model.is_empty(), "no model trajectories");
    let model_loaded = model
        .iter()
        .map(|p| Ok((p.clone(), load_trajectory(p, manifest)?)))
        .collect::<anyhow::Result<Vec<_>>>()?;
    check_same_features((&truth[0], &truth_trajs[0]), &model_loaded)?;
    let model_trajs: Vec<_> = model_loaded.into_iter().map(|(_, t)| t).collect();
    let tica = match tica_path {
        Some(p) => {
            let t = load_tica(p, manifest)?;
            check_tica_features(&t, p, truth, &truth_trajs)?;
            t
        }
        None => fit_tica_model(&truth_trajs, cfg, manifest)?,
    };
    evaluate_projections(&project_all(&tica, &truth_trajs)?, &project_all(&tica, &model_trajs)?, cfg, manifest)?;
    write_explained_variance(&tica, cfg, manifest)
}

pub fn landscape(
    tica_path: &Path,
    inputs: &[PathBuf],
    target_files: &[PathBuf],
    cfg: &RunConfig,
    manifest: &mut Manifest,
) -> anyhow::Result<()> {
    let tica = load_tica(tica_path, manifest)?;
    let trajs = load_all(inputs, manifest)?;
    check_tica_features(&tica, tica_path, inputs, &trajs)?;
    ensure!(target_files.len() == inputs.len(), "{} target files for {} trajectories", target_files.len(), inputs.len());
    let mut values = Vec::new();
    for (p, t) in target_files.iter().zip(&trajs) {
        manifest.add_input(p)?;
        let g = FreeEnergyTargets::load(p, cfg.temperature)?;
        ensure!(g.n_frames() == t.n_frames(), "{} has {} frames, expected {}", p.display(), g.n_frames(), t.n_frames());
        values.extend(g.g_total.iter().copied());
    }
    let y2 = first_two(&stack(&project_all(&tica, &trajs)?));
    let grid = mean_energy_grid(&y2, &DVector::from_vec(values), cfg.grid_bins, cfg.grid_bins)?;
    write_text(manifest, "landscape.csv", &grid.to_csv())
}

pub fn msm(tica_path: &Path, inputs: &[PathBuf], cfg: &RunConfig, manifest: &mut Manifest) -> anyhow::Result<()> {
    let tica = load_tica(tica_path, manifest)?;
    let trajs = load_all(inputs, manifest)?;
    check_tica_features(&tica, tica_path, inputs, &trajs)?;
    let ys = project_all(&tica, &trajs)?;
    let lag = cfg.msm_lag.unwrap_or(cfg.lag);
    let (model, assignments) = build_msm(&ys, cfg.n_states, lag, cfg.temperature, cfg.stage_seed(Stage::Clustering))?;
    if !model.dropped_states.is_empty() {
        manifest.warn(format!("states {:?} fall outside the largest connected set", model.dropped_states));
    }
    write_text(manifest, "msm.json", &model.to_json()?)?;
    for (i, a) in assignments.iter().enumerate() {
        match model.frame_free_energies(a) {
            Ok(g) => {
                let g = DVector::from_vec(g);
                let targets = FreeEnergyTargets {
                    g_per_component: DMatrix::from_column_slice(g.len(), 1, g.as_slice()),
                    g_total: g,
                    delta_e: None,
                    temperature: cfg.temperature,
                    constant_c_policy: fematch::freeenergy::CONSTANT_DEFERRED.into(),
                };
                let name = format!("msm_targets_{i:03}.bin");
                targets.save(manifest.output_path(&name))?;
                manifest.add_output(&name)?;
            }
            Err(e) => manifest.warn(format!("no MSM targets for {}: {e}", inputs[i].display())),
        }
    }
    Ok(())
}
