//! Sweeps over the attack's independent variables. Every sweep reuses one
//! generated dataset across its arms (same synthesis seed), so arm-to-arm
//! differences are attributable to the swept variable alone.

use std::fs;
use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{generate_synthetic, split, LabelVector, Sample};
use crate::error::{Error, Result};
use crate::harness::{emit, prepare_from, run_all_seeds, ExperimentConfig, PreparedData};
use crate::metrics::{aggregate, auroc_vs_true, AggregateReport, MetricReport};
use crate::model::predict;
use crate::trigger::{apply_trigger, mix_inference_set, Placement, PoisonEntry, PoisonManifest};
use crate::Dataset64;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    TriggerSize,
    Location,
    TargetClass,
    PoisonFraction,
    InferenceMix,
}

impl SweepAxis {
    pub fn dir_name(&self) -> &'static str {
        match self {
            SweepAxis::TriggerSize => "trigger_size",
            SweepAxis::Location => "location",
            SweepAxis::TargetClass => "target_class",
            SweepAxis::PoisonFraction => "poison_fraction",
            SweepAxis::InferenceMix => "inference_mix",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.replace('-', "_").as_str() {
            "trigger_size" => Ok(SweepAxis::TriggerSize),
            "location" => Ok(SweepAxis::Location),
            "target_class" => Ok(SweepAxis::TargetClass),
            "poison_fraction" => Ok(SweepAxis::PoisonFraction),
            "inference_mix" => Ok(SweepAxis::InferenceMix),
            other => Err(Error::InvalidConfig(format!("unknown sweep axis {other:?}"))),
        }
    }
}

/// One sweep arm: its per-seed epoch reports and their aggregate.
#[derive(Debug, Clone)]
pub struct ArmResult {
    pub arm: String,
    pub runs: Vec<Vec<MetricReport>>,
    pub aggregate: AggregateReport,
}

#[derive(Debug, Clone)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub fingerprint: String,
    pub arms: Vec<ArmResult>,
    pub artifacts: Vec<PathBuf>,
}

pub const DEFAULT_TRIGGER_SIZES: [usize; 4] = [1, 2, 3, 4];

/// Poison-fraction sweep arm: replace a fraction of the training images, or
/// append a triggered copy of every training image to the clean set.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum FractionArm {
    Replace(f64),
    AugmentAll,
}

impl FractionArm {
    fn label(&self) -> String {
        match self {
            FractionArm::AugmentAll => "full_plus_clean".into(),
            FractionArm::Replace(f) if *f >= 1.0 => "full_replace".into(),
            FractionArm::Replace(f) => format!("{f:.2}"),
        }
    }
}

/// Default arms: growing replacement fractions, then every image triggered
/// with clean copies kept, then every image triggered with no clean copies.
pub fn default_fraction_arms() -> Vec<FractionArm> {
    vec![
        FractionArm::Replace(0.01),
        FractionArm::Replace(0.05),
        FractionArm::Replace(0.10),
        FractionArm::Replace(0.20),
        FractionArm::Replace(0.40),
        FractionArm::AugmentAll,
        FractionArm::Replace(1.0),
    ]
}

fn generate_and_split(cfg: &ExperimentConfig) -> Result<(Dataset64, Dataset64)> {
    cfg.validate()?;
    let full = generate_synthetic(&cfg.synth)?;
    split(&full, cfg.train_frac, cfg.split_seed)
}

fn run_arm(cfg: &ExperimentConfig, data: &PreparedData, label: &str) -> Result<ArmResult> {
    let seed_runs = run_all_seeds(cfg, data)?;
    let runs: Vec<Vec<MetricReport>> = seed_runs.into_iter().map(|r| r.reports).collect();
    let agg = aggregate(&runs)?;
    Ok(ArmResult {
        arm: label.to_string(),
        runs,
        aggregate: agg,
    })
}

fn finish_sweep(
    cfg: &ExperimentConfig,
    axis: SweepAxis,
    arms: Vec<ArmResult>,
) -> Result<SweepResult> {
    let dir = cfg.output_dir.join(axis.dir_name());
    fs::create_dir_all(&dir)?;
    let mut artifacts = Vec::new();

    let results_path = dir.join("results.csv");
    emit::write_results_csv(
        &results_path,
        &cfg.asr_thresholds,
        arms.iter().flat_map(|arm| {
            arm.runs.iter().zip(&cfg.seeds).flat_map(move |(run, &seed)| {
                run.iter().map(move |r| (arm.arm.as_str(), seed, r))
            })
        }),
    )?;
    artifacts.push(results_path);

    let summary_path = dir.join("summary.csv");
    let summaries: Vec<(String, AggregateReport)> = arms
        .iter()
        .map(|a| (a.arm.clone(), a.aggregate.clone()))
        .collect();
    emit::write_summary_csv(&summary_path, &summaries)?;
    artifacts.push(summary_path);

    let fingerprint = cfg.fingerprint();
    let fp_path = dir.join("fingerprint");
    fs::write(&fp_path, format!("{fingerprint}\n"))?;
    artifacts.push(fp_path);

    Ok(SweepResult {
        axis,
        fingerprint,
        arms,
        artifacts,
    })
}

/// One run per trigger size plus a clean control: a model trained without
/// poisoning but still evaluated on triggered test images.
pub fn sweep_trigger_size(cfg: &ExperimentConfig, sizes: &[usize]) -> Result<SweepResult> {
    if sizes.is_empty() {
        return Err(Error::InvalidConfig("trigger-size sweep needs sizes".into()));
    }
    let (train, test) = generate_and_split(cfg)?;
    let mut arms = Vec::with_capacity(sizes.len() + 1);

    let mut clean_cfg = cfg.clone();
    clean_cfg.policy.poison_fraction = 0.0;
    let data = prepare_from(&clean_cfg, train.clone(), &test)?;
    arms.push(run_arm(&clean_cfg, &data, "clean")?);

    for &size in sizes {
        let mut arm_cfg = cfg.clone();
        arm_cfg.policy.trigger.size = size;
        let data = prepare_from(&arm_cfg, train.clone(), &test)?;
        arms.push(run_arm(&arm_cfg, &data, &format!("size_{size}"))?);
    }
    finish_sweep(cfg, SweepAxis::TriggerSize, arms)
}

/// Fixed-center placement versus a fresh random location per image.
pub fn sweep_location(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let (train, test) = generate_and_split(cfg)?;
    let mut arms = Vec::with_capacity(2);
    for (label, placement) in [
        ("fixed_center", Placement::Center),
        ("random", Placement::RandomPerImage),
    ] {
        let mut arm_cfg = cfg.clone();
        arm_cfg.policy.trigger.placement = placement;
        let data = prepare_from(&arm_cfg, train.clone(), &test)?;
        arms.push(run_arm(&arm_cfg, &data, label)?);
    }
    finish_sweep(cfg, SweepAxis::Location, arms)
}

/// One run per target class.
pub fn sweep_target_class(cfg: &ExperimentConfig) -> Result<SweepResult> {
    let (train, test) = generate_and_split(cfg)?;
    let mut arms = Vec::with_capacity(cfg.synth.num_classes);
    for t in 0..cfg.synth.num_classes {
        let mut arm_cfg = cfg.clone();
        arm_cfg.policy.target_class = t;
        let data = prepare_from(&arm_cfg, train.clone(), &test)?;
        arms.push(run_arm(&arm_cfg, &data, &format!("class_{t}"))?);
    }
    finish_sweep(cfg, SweepAxis::TargetClass, arms)
}

/// Appends a triggered, relabeled copy of every training image to the
/// clean training set.
fn augment_all(cfg: &ExperimentConfig, train: &Dataset64) -> Result<PreparedData> {
    let policy = &cfg.policy;
    let mut augmented = train.clone();
    let mut manifest = PoisonManifest::default();
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    for s in &train.samples {
        let loc = policy
            .trigger
            .placement
            .resolve(train.width, train.height, policy.trigger.size, &mut rng)?;
        let image = apply_trigger(&s.image, &policy.trigger, loc)?;
        let id = format!("{}t", s.id);
        augmented.push(Sample::infected(
            id.clone(),
            image,
            s.true_label.clone(),
            LabelVector::one_hot(train.num_classes, policy.target_class)?,
        )?)?;
        manifest.entries.push(PoisonEntry {
            id,
            x: loc.0,
            y: loc.1,
            size: policy.trigger.size,
            target_class: policy.target_class,
        });
    }
    let (clean_eval, infected_eval) = crate::trigger::build_eval_sets(
        &generate_and_split(cfg)?.1,
        &policy.trigger,
        policy.target_class,
    )?;
    Ok(PreparedData {
        train_clean: train.clone(),
        train_poisoned: augmented,
        manifest,
        clean_eval,
        infected_eval,
    })
}

/// One run per poisoning regime. A zero fraction trains a clean model; its
/// attack-rate cells are recorded as absent since no attack was configured.
pub fn sweep_poison_fraction(
    cfg: &ExperimentConfig,
    fraction_arms: &[FractionArm],
) -> Result<SweepResult> {
    if fraction_arms.is_empty() {
        return Err(Error::InvalidConfig(
            "poison-fraction sweep needs at least one arm".into(),
        ));
    }
    let (train, test) = generate_and_split(cfg)?;
    let mut arms = Vec::with_capacity(fraction_arms.len());
    for arm in fraction_arms {
        let label = arm.label();
        let mut result = match arm {
            FractionArm::Replace(f) => {
                let mut arm_cfg = cfg.clone();
                arm_cfg.policy.poison_fraction = *f;
                let data = prepare_from(&arm_cfg, train.clone(), &test)?;
                run_arm(&arm_cfg, &data, &label)?
            }
            FractionArm::AugmentAll => {
                let data = augment_all(cfg, &train)?;
                run_arm(cfg, &data, &label)?
            }
        };
        if matches!(arm, FractionArm::Replace(f) if *f == 0.0) {
            for run in result.runs.iter_mut() {
                for report in run.iter_mut() {
                    for (_, cell) in report.asr_by_threshold.iter_mut() {
                        *cell = None;
                    }
                }
            }
            result.aggregate = aggregate(&result.runs)?;
        }
        arms.push(result);
    }
    finish_sweep(cfg, SweepAxis::PoisonFraction, arms)
}

const MIX_SEED_SALT: u64 = 0x6d69_785f;

/// Trains the configured poisoned model once per seed, then scores its
/// micro AUROC against true labels on mixed clean/triggered test sets, one
/// arm per infection rate. The AUROC lands in the `auroc_nn` column (at
/// rate 0 it equals clean AUROC-NN exactly); attack-rate cells stay empty.
pub fn sweep_inference_mix(
    cfg: &ExperimentConfig,
    epsilons: Option<&[f64]>,
) -> Result<SweepResult> {
    let (train, test) = generate_and_split(cfg)?;
    let data = prepare_from(cfg, train, &test)?;
    let eps: Vec<f64> = match epsilons {
        Some(e) if !e.is_empty() => e.to_vec(),
        _ if !cfg.epsilons.is_empty() => cfg.epsilons.clone(),
        _ => vec![1.0 / data.clean_eval.len() as f64, 0.01, 0.1, 0.5],
    };
    let seed_runs = run_all_seeds(cfg, &data)?;

    let mut arms = Vec::with_capacity(eps.len());
    for &epsilon in &eps {
        let mixed = mix_inference_set(
            &data.clean_eval,
            &data.infected_eval,
            epsilon,
            cfg.split_seed ^ MIX_SEED_SALT,
        )?;
        let mut runs = Vec::with_capacity(seed_runs.len());
        for seed_run in &seed_runs {
            let mut reports = Vec::with_capacity(seed_run.checkpoints.len());
            for c in &seed_run.checkpoints {
                let records = predict(&c.model, &mixed)?;
                let value = crate::harness::metric_cell(auroc_vs_true(&records))?;
                reports.push(MetricReport {
                    epoch: c.epoch,
                    asr_by_threshold: cfg.asr_thresholds.iter().map(|p| (*p, None)).collect(),
                    auroc_nn: value,
                    auroc_tt: None,
                    auroc_tn: None,
                });
            }
            runs.push(reports);
        }
        let agg = aggregate(&runs)?;
        arms.push(ArmResult {
            arm: format!("eps_{epsilon:.4}"),
            runs,
            aggregate: agg,
        });
    }
    finish_sweep(cfg, SweepAxis::InferenceMix, arms)
}
