//! Experiment execution: data preparation, per-seed training and
//! evaluation, aggregation, and artifact emission. Everything is
//! deterministic in the configuration, down to the emitted CSV bytes.

mod config;
pub mod emit;
mod sweep;

use std::fs;
use std::path::PathBuf;

pub use config::ExperimentConfig;
pub use sweep::{
    default_fraction_arms, sweep_inference_mix, sweep_location, sweep_poison_fraction,
    sweep_target_class, sweep_trigger_size, ArmResult, FractionArm, SweepAxis, SweepResult,
    DEFAULT_TRIGGER_SIZES,
};

use crate::dataset::{generate_synthetic, split};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, AggregateReport, MetricReport};
use crate::model::{init_model, save_checkpoint, train, ArchConfig, Checkpoint};
use crate::trigger::{build_eval_sets, poison_training_set, PoisonManifest, PoisonPolicy};
use crate::{Dataset64, Model64};

/// Datasets shared by every seed of a run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train_clean: Dataset64,
    pub train_poisoned: Dataset64,
    pub manifest: PoisonManifest,
    pub clean_eval: Dataset64,
    pub infected_eval: Dataset64,
}

/// One seed's training history and per-epoch evaluation.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub checkpoints: Vec<Checkpoint<f64>>,
    pub reports: Vec<MetricReport>,
}

/// A finished run: per-seed reports plus their aggregate and the artifact
/// paths that were written.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub fingerprint: String,
    pub arm: String,
    pub seeds: Vec<u64>,
    pub runs: Vec<Vec<MetricReport>>,
    pub aggregate: AggregateReport,
    pub artifacts: Vec<PathBuf>,
}

/// Generate, split and poison the data for `cfg`.
pub fn prepare_data(cfg: &ExperimentConfig) -> Result<PreparedData> {
    cfg.validate()?;
    let full = generate_synthetic(&cfg.synth)?;
    let (train_clean, test) = split(&full, cfg.train_frac, cfg.split_seed)?;
    prepare_from(cfg, train_clean, &test)
}

/// Poison `train_clean` and build the paired eval sets for the policy in
/// `cfg`. Split out so sweeps can reuse one generated dataset across arms.
pub fn prepare_from(
    cfg: &ExperimentConfig,
    train_clean: Dataset64,
    test: &Dataset64,
) -> Result<PreparedData> {
    let (train_poisoned, manifest) = poison_training_set(&train_clean, &cfg.policy)?;
    let (clean_eval, infected_eval) =
        build_eval_sets(test, &cfg.policy.trigger, cfg.policy.target_class)?;
    Ok(PreparedData {
        train_clean,
        train_poisoned,
        manifest,
        clean_eval,
        infected_eval,
    })
}

/// Maps a defined value to a cell, an undefined-metric error to an absent
/// cell, and anything else to a failure.
pub(crate) fn metric_cell(result: Result<f64>) -> Result<Option<f64>> {
    match result {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

/// Evaluates one checkpoint on the paired eval sets.
pub fn evaluate_checkpoint(
    model: &Model64,
    epoch: usize,
    data: &PreparedData,
    policy: &PoisonPolicy,
    thresholds: &[f64],
) -> Result<MetricReport> {
    let clean_records = crate::model::predict(model, &data.clean_eval)?;
    let infected_records = crate::model::predict(model, &data.infected_eval)?;
    let mut asr_by_threshold = Vec::with_capacity(thresholds.len());
    for &p in thresholds {
        asr_by_threshold.push((
            p,
            metric_cell(crate::metrics::asr(
                &infected_records,
                policy.target_class,
                p,
            ))?,
        ));
    }
    Ok(MetricReport {
        epoch,
        asr_by_threshold,
        auroc_nn: metric_cell(crate::metrics::auroc_nn(&clean_records))?,
        auroc_tt: metric_cell(crate::metrics::auroc_tt(&infected_records))?,
        auroc_tn: metric_cell(crate::metrics::auroc_tn(&infected_records))?,
    })
}

/// Trains one model from `seed` and evaluates every epoch checkpoint.
pub fn run_seed(cfg: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<SeedRun> {
    let arch = ArchConfig::small_cnn(cfg.synth.num_classes);
    let model = init_model::<f64>(&arch, seed)?;
    let mut train_cfg = cfg.train.clone();
    train_cfg.seed = seed;
    let checkpoints = train(&model, &data.train_poisoned, &train_cfg)?;
    let mut reports = Vec::with_capacity(checkpoints.len());
    for c in &checkpoints {
        reports.push(evaluate_checkpoint(
            &c.model,
            c.epoch,
            data,
            &cfg.policy,
            &cfg.asr_thresholds,
        )?);
    }
    Ok(SeedRun {
        seed,
        checkpoints,
        reports,
    })
}

pub fn run_all_seeds(cfg: &ExperimentConfig, data: &PreparedData) -> Result<Vec<SeedRun>> {
    cfg.seeds.iter().map(|&s| run_seed(cfg, data, s)).collect()
}

/// Full single-arm experiment: prepare, train per seed, evaluate, aggregate
/// and write every artifact under the config's output directory.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunResult> {
    let data = prepare_data(cfg)?;
    let seed_runs = run_all_seeds(cfg, &data)?;
    let runs: Vec<Vec<MetricReport>> = seed_runs.iter().map(|r| r.reports.clone()).collect();
    let agg = aggregate(&runs)?;

    let out = &cfg.output_dir;
    fs::create_dir_all(out)?;
    let mut artifacts = Vec::new();

    let results_path = out.join("results.csv");
    emit::write_results_csv(
        &results_path,
        &cfg.asr_thresholds,
        seed_runs
            .iter()
            .flat_map(|r| r.reports.iter().map(move |rep| ("run", r.seed, rep))),
    )?;
    artifacts.push(results_path);

    let summary_path = out.join("summary.csv");
    emit::write_summary_csv(&summary_path, &[("run".to_string(), agg.clone())])?;
    artifacts.push(summary_path);

    let fingerprint = cfg.fingerprint();
    let fp_path = out.join("fingerprint");
    fs::write(&fp_path, format!("{fingerprint}\n"))?;
    artifacts.push(fp_path);

    let manifest_path = out.join("poison_manifest");
    data.manifest.save(&manifest_path)?;
    artifacts.push(manifest_path);

    for run in &seed_runs {
        let dir = out.join(format!("checkpoints/seed_{}", run.seed));
        fs::create_dir_all(&dir)?;
        for c in &run.checkpoints {
            let path = dir.join(format!("epoch_{:02}.ckpt", c.epoch));
            save_checkpoint(&c.model, &path)?;
            artifacts.push(path);
        }
    }

    if cfg.emit_saliency {
        let grid = emit::emit_saliency_grid(
            out,
            &seed_runs[0].checkpoints,
            &data,
            cfg.policy.target_class,
        )?;
        artifacts.extend(grid);
    }

    Ok(RunResult {
        fingerprint,
        arm: "run".into(),
        seeds: cfg.seeds.clone(),
        runs,
        aggregate: agg,
        artifacts,
    })
}
