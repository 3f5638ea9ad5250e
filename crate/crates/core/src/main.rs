//! Command-line entry point: generate data, poison it, train, evaluate,
//! render saliency overlays, and run full sweeps.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use backdoorlab::dataset::{load_dataset, save_dataset};
use backdoorlab::explain::{gradcam, localization_score, saliency_overlay, TapLayer};
use backdoorlab::harness::{
    self, default_fraction_arms, emit, ExperimentConfig, SweepAxis, DEFAULT_TRIGGER_SIZES,
};
use backdoorlab::metrics::aggregate;
use backdoorlab::model::{init_model, load_checkpoint, save_checkpoint, train, ArchConfig};
use backdoorlab::trigger::{apply_trigger, build_eval_sets, poison_training_set};
use backdoorlab::{Dataset64, Model64};

#[derive(Parser)]
#[command(
    name = "backdoorlab",
    about = "Desk-scale lab for multi-label backdoor data poisoning"
)]
struct Cli {
    /// Config file (key = value lines, namespaced synth./policy./train./eval.).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Restrict the run to a single seed (overrides eval.seeds and train.seed).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the dataset and write train/test splits.
    Generate,
    /// Poison a training set directory according to the policy.
    Poison {
        /// Training set directory (defaults to <out>/train).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Train on a dataset directory, writing one checkpoint per epoch.
    Train {
        /// Training set directory (defaults to <out>/train_poisoned).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Evaluate checkpoints on clean and triggered test sets.
    Eval {
        /// Directory of .ckpt files (defaults to <out>/checkpoints).
        #[arg(long)]
        ckpts: Option<PathBuf>,
        /// Clean test set directory (defaults to <out>/test).
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Saliency overlays (and localization scores) for one test sample.
    Gradcam {
        /// Checkpoint file.
        #[arg(long)]
        ckpt: PathBuf,
        /// Dataset directory holding the sample.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Sample id; defaults to the first sample.
        #[arg(long)]
        sample: Option<String>,
        /// Class the saliency is computed for (defaults to the target class).
        #[arg(long)]
        class: Option<usize>,
        /// Epoch label used in output file names.
        #[arg(long, default_value_t = 0)]
        epoch: usize,
    },
    /// Run a full experiment sweep along one axis.
    Sweep {
        /// trigger-size | location | target-class | poison-fraction | inference-mix
        axis: String,
    },
    /// Recompute the aggregate summary from a results CSV.
    Report {
        /// Results CSV (defaults to <out>/results.csv).
        #[arg(long)]
        results: Option<PathBuf>,
    },
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::from_file(path)
            .with_context(|| format!("reading config {}", path.display()))?,
        None => ExperimentConfig::default(),
    };
    cfg.output_dir = cli.out.clone();
    if let Some(seed) = cli.seed {
        cfg.seeds = vec![seed];
        cfg.train.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_dir(path: &Path) -> anyhow::Result<Dataset64> {
    load_dataset(path).with_context(|| format!("loading dataset from {}", path.display()))
}

fn sorted_checkpoints(dir: &Path) -> anyhow::Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        bail!("no .ckpt files under {}", dir.display());
    }
    Ok(paths)
}

fn epoch_from_name(path: &Path) -> usize {
    path.file_stem()
        .and_then(|s| s.to_str())
        .and_then(|s| s.rsplit('_').next())
        .and_then(|s| s.parse().ok())
        .unwrap_or(0)
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    let cfg = load_config(&cli)?;
    let out = cfg.output_dir.clone();
    fs::create_dir_all(&out)?;

    match &cli.command {
        Command::Generate => {
            let full = backdoorlab::dataset::generate_synthetic::<f64>(&cfg.synth)?;
            let (train_set, test_set) =
                backdoorlab::dataset::split(&full, cfg.train_frac, cfg.split_seed)?;
            save_dataset(&train_set, &out.join("train"))?;
            save_dataset(&test_set, &out.join("test"))?;
            println!(
                "generated {} train / {} test samples under {}",
                train_set.len(),
                test_set.len(),
                out.display()
            );
        }
        Command::Poison { data } => {
            let dir = data.clone().unwrap_or_else(|| out.join("train"));
            let train_set = load_dir(&dir)?;
            let (poisoned, manifest) = poison_training_set(&train_set, &cfg.policy)?;
            save_dataset(&poisoned, &out.join("train_poisoned"))?;
            manifest.save(&out.join("poison_manifest"))?;
            println!(
                "poisoned {} of {} samples (target class {})",
                manifest.entries.len(),
                train_set.len(),
                cfg.policy.target_class
            );
        }
        Command::Train { data } => {
            let dir = data.clone().unwrap_or_else(|| out.join("train_poisoned"));
            let train_set = load_dir(&dir)?;
            let arch = ArchConfig::small_cnn(train_set.num_classes);
            let model: Model64 = init_model(&arch, cfg.train.seed)?;
            let checkpoints = train(&model, &train_set, &cfg.train)?;
            let ckpt_dir = out.join("checkpoints");
            fs::create_dir_all(&ckpt_dir)?;
            for c in &checkpoints {
                save_checkpoint(&c.model, &ckpt_dir.join(format!("epoch_{:02}.ckpt", c.epoch)))?;
            }
            println!(
                "trained {} epochs; checkpoints under {}",
                checkpoints.len(),
                ckpt_dir.display()
            );
        }
        Command::Eval { ckpts, data } => {
            let ckpt_dir = ckpts.clone().unwrap_or_else(|| out.join("checkpoints"));
            let test_dir = data.clone().unwrap_or_else(|| out.join("test"));
            let test_set = load_dir(&test_dir)?;
            let (clean_eval, infected_eval) =
                build_eval_sets(&test_set, &cfg.policy.trigger, cfg.policy.target_class)?;
            let data = harness::PreparedData {
                train_clean: Dataset64::new("unused", test_set.num_classes, test_set.width, test_set.height),
                train_poisoned: Dataset64::new("unused", test_set.num_classes, test_set.width, test_set.height),
                manifest: Default::default(),
                clean_eval,
                infected_eval,
            };
            let mut reports = Vec::new();
            for path in sorted_checkpoints(&ckpt_dir)? {
                let model: Model64 = load_checkpoint(&path)?;
                let epoch = epoch_from_name(&path);
                reports.push(harness::evaluate_checkpoint(
                    &model,
                    epoch,
                    &data,
                    &cfg.policy,
                    &cfg.asr_thresholds,
                )?);
            }
            let results_path = out.join("results.csv");
            emit::write_results_csv(
                &results_path,
                &cfg.asr_thresholds,
                reports.iter().map(|r| ("eval", cfg.train.seed, r)),
            )?;
            let agg = aggregate(&[reports])?;
            emit::write_summary_csv(&out.join("summary.csv"), &[("eval".to_string(), agg.clone())])?;
            if let Some(nn) = agg.get("auroc_nn").and_then(|m| m.max_mean) {
                if nn < cfg.min_clean_auroc {
                    println!(
                        "note: clean AUROC {nn:.3} is below the acceptance bar {}",
                        cfg.min_clean_auroc
                    );
                }
            }
            println!("wrote {}", results_path.display());
        }
        Command::Gradcam {
            ckpt,
            data,
            sample,
            class,
            epoch,
        } => {
            let model: Model64 = load_checkpoint(ckpt)?;
            let dir = data.clone().unwrap_or_else(|| out.join("test"));
            let ds = load_dir(&dir)?;
            let s = match sample {
                Some(id) => ds
                    .samples
                    .iter()
                    .find(|s| &s.id == id)
                    .ok_or_else(|| anyhow!("sample {id} not found in {}", dir.display()))?,
                None => ds
                    .samples
                    .first()
                    .ok_or_else(|| anyhow!("dataset {} is empty", dir.display()))?,
            };
            let t = class.unwrap_or(cfg.policy.target_class);
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            let spec = cfg.policy.trigger;
            let loc = spec
                .placement
                .resolve(ds.width, ds.height, spec.size, &mut rng)?;
            let triggered = apply_trigger(&s.image, &spec, loc)?;
            let sal_dir = out.join("saliency");
            fs::create_dir_all(sal_dir.join("clean"))?;
            fs::create_dir_all(sal_dir.join("infected"))?;
            for layer in [TapLayer::Final, TapLayer::Middle] {
                for (kind, image) in [("clean", &s.image), ("infected", &triggered)] {
                    let map = gradcam(&model, image, t, layer)?;
                    let score = localization_score(&map, (loc.0, loc.1, spec.size), 2)?;
                    let path = sal_dir
                        .join(kind)
                        .join(format!("{}_{}_{}.png", s.id, layer.name(), epoch));
                    saliency_overlay(image, &map, &path)?;
                    println!(
                        "{kind:8} {:6} localization {:.3} -> {}",
                        layer.name(),
                        score,
                        path.display()
                    );
                }
            }
        }
        Command::Sweep { axis } => {
            let result = match SweepAxis::parse(axis)? {
                SweepAxis::TriggerSize => {
                    harness::sweep_trigger_size(&cfg, &DEFAULT_TRIGGER_SIZES)?
                }
                SweepAxis::Location => harness::sweep_location(&cfg)?,
                SweepAxis::TargetClass => harness::sweep_target_class(&cfg)?,
                SweepAxis::PoisonFraction => {
                    harness::sweep_poison_fraction(&cfg, &default_fraction_arms())?
                }
                SweepAxis::InferenceMix => harness::sweep_inference_mix(&cfg, None)?,
            };
            println!(
                "sweep {} finished: {} arms, fingerprint {}",
                result.axis.dir_name(),
                result.arms.len(),
                result.fingerprint
            );
            for path in &result.artifacts {
                println!("wrote {}", path.display());
            }
        }
        Command::Report { results } => {
            let path = results.clone().unwrap_or_else(|| out.join("results.csv"));
            let rows = emit::read_results_csv(&path)?;
            let grouped = emit::group_rows(rows);
            if grouped.is_empty() {
                bail!("no rows in {}", path.display());
            }
            let mut summaries = Vec::new();
            for (arm, runs) in grouped {
                summaries.push((arm, aggregate(&runs)?));
            }
            let summary_path = out.join("summary.csv");
            emit::write_summary_csv(&summary_path, &summaries)?;
            for (arm, agg) in &summaries {
                for m in &agg.metrics {
                    println!(
                        "{:10} {:16} min {} max {}",
                        arm,
                        m.metric,
                        m.min_mean.map_or("-".into(), |v| format!("{v:.3}")),
                        m.max_mean.map_or("-".into(), |v| format!("{v:.3}")),
                    );
                }
            }
            println!("wrote {}", summary_path.display());
        }
    }
    Ok(())
}
