//! End-to-end run on a reference landscape: sample truth, fit TICA, build
//! free-energy targets, train, sample the learned potential and compare.

use anyhow::Context;
use fematch::freeenergy::mean_energy_grid;
use fematch::sampler::LearnedPotential;
use fematch::{KlReport, TrainReport};
use nalgebra::DVector;
use serde::Serialize;

use crate::commands::{
    evaluate_projections, first_two, fit_tica_model, free_energy_targets, prior_energies, project_all, sample_field,
    stack, training_set, train_potential, write_chains, write_explained_variance, write_training,
};
use crate::config::{RunConfig, Stage};
use crate::manifest::Manifest;

#[derive(Debug, Clone, Serialize)]
pub struct PipelineSummary {
    pub system: String,
    pub lambda_energy: f64,
    pub kl: KlReport,
    pub training_frames: usize,
    pub epochs: usize,
    pub converged: bool,
    pub final_loss: f64,
}

pub fn run(cfg: &RunConfig, manifest: &mut Manifest) -> anyhow::Result<PipelineSummary> {
    let landscape = cfg.landscape()?.context("pipeline needs --system")?;

    let truth = sample_field(&landscape, cfg, Stage::TruthSampling, manifest)?;
    write_chains(&truth, "truth", cfg, manifest)?;
    let truth_trajs = truth.trajectories();

    let tica = fit_tica_model(&truth_trajs, cfg, manifest)?;
    std::fs::write(manifest.output_path("tica.json"), tica.to_json()?)?;
    manifest.add_output("tica.json")?;
    write_explained_variance(&tica, cfg, manifest)?;

    let energies: Vec<DVector<f64>> = truth_trajs.iter().map(|t| prior_energies(t, cfg)).collect();
    let targets = free_energy_targets(&tica, &truth_trajs, &energies, cfg)?;
    for (i, t) in targets.iter().enumerate() {
        let name = format!("truth/targets_{i:03}.bin");
        t.save(manifest.output_path(&name))?;
        manifest.add_output(&name)?;
    }

    let truth_y = project_all(&tica, &truth_trajs)?;
    let values: Vec<f64> = targets.iter().flat_map(|t| t.g_total.iter().copied()).collect();
    let stacked = first_two(&stack(&truth_y));
    let grid = mean_energy_grid(&stacked, &DVector::from_vec(values), cfg.grid_bins, cfg.grid_bins)?;
    std::fs::write(manifest.output_path("landscape.csv"), grid.to_csv())?;
    manifest.add_output("landscape.csv")?;

    let records: Vec<_> = truth.chains.iter().map(|c| c.forces.clone()).collect();
    let data = training_set(&records, &targets, cfg)?;
    let (model, prior, report) = train_potential(&data, cfg)?;
    write_training(&model, &report, manifest)?;

    let sampled = sample_field(&LearnedPotential { model, prior }, cfg, Stage::ModelSampling, manifest)?;
    write_chains(&sampled, "model", cfg, manifest)?;
    let model_y = project_all(&tica, &sampled.trajectories())?;

    let kl = evaluate_projections(&truth_y, &model_y, cfg, manifest)?;
    Ok(summary(cfg, kl, data.len(), &report))
}

fn summary(cfg: &RunConfig, kl: KlReport, training_frames: usize, report: &TrainReport) -> PipelineSummary {
    let last = report.epochs.last().expect("epoch 0 is always recorded");
    PipelineSummary {
        system: cfg.system.clone().unwrap_or_default(),
        lambda_energy: cfg.lambda_energy,
        kl,
        training_frames,
        epochs: last.epoch,
        converged: report.converged,
        final_loss: last.total,
    }
}
