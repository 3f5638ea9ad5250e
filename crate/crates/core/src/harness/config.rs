//! Experiment configuration: defaults, the flat `key = value` config file,
//! and a content fingerprint for reproducibility claims.

use std::fs;
use std::path::{Path, PathBuf};

use crate::dataset::SynthConfig;
use crate::error::{Error, Result};
use crate::model::TrainConfig;
use crate::trigger::{Placement, PoisonPolicy, TriggerSpec};

/// Everything a run needs. The config file uses `key = value` lines with
/// `#` comments; keys are namespaced `synth.`, `policy.`, `train.`, `eval.`.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub synth: SynthConfig,
    pub train_frac: f64,
    pub split_seed: u64,
    pub policy: PoisonPolicy,
    pub train: TrainConfig,
    /// One full train/eval cycle per seed.
    pub seeds: Vec<u64>,
    pub asr_thresholds: Vec<f64>,
    /// Mixed-set infection rates; empty = auto (1/|test|, 0.01, 0.1, 0.5).
    pub epsilons: Vec<f64>,
    /// The user's minimum acceptable clean AUROC; runs below it are flagged.
    pub min_clean_auroc: f64,
    pub emit_saliency: bool,
    pub output_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            synth: SynthConfig::uniform(2000, 4, 16, 16, 0.3, 0.05, 7),
            train_frac: 0.8,
            split_seed: 13,
            policy: PoisonPolicy {
                trigger: TriggerSpec::default(),
                target_class: 0,
                poison_fraction: 0.4,
                seed: 17,
            },
            train: TrainConfig {
                epochs: 15,
                batch_size: 32,
                learning_rate: 0.05,
                momentum: 0.9,
                seed: 1,
                checkpoint_every_epoch: true,
            },
            seeds: vec![1, 2, 3, 4],
            asr_thresholds: vec![0.6, 0.9],
            epsilons: Vec::new(),
            min_clean_auroc: 0.85,
            emit_saliency: false,
            output_dir: PathBuf::from("out"),
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::InvalidConfig(format!("{key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value.trim() {
        "true" | "1" => Ok(true),
        "false" | "0" => Ok(false),
        other => Err(Error::InvalidConfig(format!(
            "{key}: expected true/false, got {other:?}"
        ))),
    }
}

fn parse_list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: std::fmt::Display,
{
    if value.trim().is_empty() {
        return Ok(Vec::new());
    }
    value.split(',').map(|v| parse_num(key, v)).collect()
}

fn parse_placement(key: &str, value: &str) -> Result<Placement> {
    match value.trim() {
        "center" => Ok(Placement::Center),
        "random" => Ok(Placement::RandomPerImage),
        coords => {
            let parts: Vec<&str> = coords.split(',').map(str::trim).collect();
            if parts.len() != 2 {
                return Err(Error::InvalidConfig(format!(
                    "{key}: expected center, random or x,y — got {coords:?}"
                )));
            }
            Ok(Placement::Fixed {
                x: parse_num(key, parts[0])?,
                y: parse_num(key, parts[1])?,
            })
        }
    }
}

fn placement_text(p: &Placement) -> String {
    match p {
        Placement::Center => "center".into(),
        Placement::RandomPerImage => "random".into(),
        Placement::Fixed { x, y } => format!("{x},{y}"),
    }
}

fn join<T: std::fmt::Display>(values: &[T]) -> String {
    values
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        Self::from_config_text(&fs::read_to_string(path)?)
    }

    /// Parses overrides on top of the defaults. Unknown keys are errors.
    pub fn from_config_text(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut entries = Vec::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::InvalidConfig(format!("line {}: expected key = value", lineno + 1))
            })?;
            entries.push((key.trim().to_string(), value.trim().to_string()));
        }
        // Prevalence may broadcast over num_classes, so apply it last.
        for (key, value) in entries.iter().filter(|(k, _)| k != "synth.prevalence") {
            cfg.apply(key, value)?;
        }
        for (key, value) in entries.iter().filter(|(k, _)| k == "synth.prevalence") {
            cfg.apply(key, value)?;
        }
        Ok(cfg)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "synth.num_samples" => self.synth.num_samples = parse_num(key, value)?,
            "synth.num_classes" => {
                self.synth.num_classes = parse_num(key, value)?;
                // Keep the default broadcast in sync until overridden.
                if self.synth.class_prevalence.len() != self.synth.num_classes {
                    let p = self.synth.class_prevalence.first().copied().unwrap_or(0.3);
                    self.synth.class_prevalence = vec![p; self.synth.num_classes];
                }
            }
            "synth.width" => self.synth.width = parse_num(key, value)?,
            "synth.height" => self.synth.height = parse_num(key, value)?,
            "synth.prevalence" => {
                let list: Vec<f64> = parse_list(key, value)?;
                self.synth.class_prevalence = if list.len() == 1 {
                    vec![list[0]; self.synth.num_classes]
                } else if list.len() == self.synth.num_classes {
                    list
                } else {
                    return Err(Error::InvalidConfig(format!(
                        "{key}: {} values for {} classes",
                        list.len(),
                        self.synth.num_classes
                    )));
                };
            }
            "synth.noise_std" => self.synth.noise_std = parse_num(key, value)?,
            "synth.seed" => self.synth.seed = parse_num(key, value)?,
            "synth.train_frac" => self.train_frac = parse_num(key, value)?,
            "synth.split_seed" => self.split_seed = parse_num(key, value)?,
            "policy.trigger_size" => self.policy.trigger.size = parse_num(key, value)?,
            "policy.trigger_intensity" => self.policy.trigger.intensity = parse_num(key, value)?,
            "policy.placement" => self.policy.trigger.placement = parse_placement(key, value)?,
            "policy.target_class" => self.policy.target_class = parse_num(key, value)?,
            "policy.poison_fraction" => self.policy.poison_fraction = parse_num(key, value)?,
            "policy.seed" => self.policy.seed = parse_num(key, value)?,
            "train.epochs" => self.train.epochs = parse_num(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_num(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse_num(key, value)?,
            "train.momentum" => self.train.momentum = parse_num(key, value)?,
            "train.seed" => self.train.seed = parse_num(key, value)?,
            "train.checkpoint_every_epoch" => {
                self.train.checkpoint_every_epoch = parse_bool(key, value)?
            }
            "eval.seeds" => self.seeds = parse_list(key, value)?,
            "eval.asr_thresholds" => self.asr_thresholds = parse_list(key, value)?,
            "eval.epsilons" => self.epsilons = parse_list(key, value)?,
            "eval.min_clean_auroc" => self.min_clean_auroc = parse_num(key, value)?,
            "eval.emit_saliency" => self.emit_saliency = parse_bool(key, value)?,
            other => {
                return Err(Error::InvalidConfig(format!("unknown config key {other:?}")));
            }
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::InvalidConfig("need at least one seed".into()));
        }
        if self
            .asr_thresholds
            .iter()
            .any(|p| !(*p > 0.0 && *p < 1.0))
        {
            return Err(Error::InvalidConfig(
                "ASR thresholds must lie in (0, 1)".into(),
            ));
        }
        if self.epsilons.iter().any(|e| !(0.0..=1.0).contains(e)) {
            return Err(Error::InvalidConfig("epsilons must lie in [0, 1]".into()));
        }
        Ok(())
    }

    /// Canonical `key = value` rendering of every semantic field (the
    /// output directory is excluded): the fingerprint input, stable under
    /// re-serialization.
    pub fn canonical_text(&self) -> String {
        let mut lines = vec![
            format!("eval.asr_thresholds = {}", join(&self.asr_thresholds)),
            format!("eval.emit_saliency = {}", self.emit_saliency),
            format!("eval.epsilons = {}", join(&self.epsilons)),
            format!("eval.min_clean_auroc = {}", self.min_clean_auroc),
            format!("eval.seeds = {}", join(&self.seeds)),
            format!("policy.placement = {}", placement_text(&self.policy.trigger.placement)),
            format!("policy.poison_fraction = {}", self.policy.poison_fraction),
            format!("policy.seed = {}", self.policy.seed),
            format!("policy.target_class = {}", self.policy.target_class),
            format!("policy.trigger_intensity = {}", self.policy.trigger.intensity),
            format!("policy.trigger_size = {}", self.policy.trigger.size),
            format!("synth.height = {}", self.synth.height),
            format!("synth.noise_std = {}", self.synth.noise_std),
            format!("synth.num_classes = {}", self.synth.num_classes),
            format!("synth.num_samples = {}", self.synth.num_samples),
            format!("synth.prevalence = {}", join(&self.synth.class_prevalence)),
            format!("synth.seed = {}", self.synth.seed),
            format!("synth.split_seed = {}", self.split_seed),
            format!("synth.train_frac = {}", self.train_frac),
            format!("synth.width = {}", self.synth.width),
            format!("train.batch_size = {}", self.train.batch_size),
            format!("train.checkpoint_every_epoch = {}", self.train.checkpoint_every_epoch),
            format!("train.epochs = {}", self.train.epochs),
            format!("train.learning_rate = {}", self.train.learning_rate),
            format!("train.momentum = {}", self.train.momentum),
            format!("train.seed = {}", self.train.seed),
        ];
        lines.sort();
        lines.join("\n") + "\n"
    }

    /// Content hash (FNV-1a 64) of the canonical text.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.canonical_text().as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_canonical_text() {
        let cfg = ExperimentConfig::default();
        let parsed = ExperimentConfig::from_config_text(&cfg.canonical_text()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn overrides_comments_and_unknown_keys() {
        let text = "\
# comment line
synth.num_samples = 100   # trailing comment
policy.trigger_size = 4
policy.placement = random
eval.seeds = 5,6
";
        let cfg = ExperimentConfig::from_config_text(text).unwrap();
        assert_eq!(cfg.synth.num_samples, 100);
        assert_eq!(cfg.policy.trigger.size, 4);
        assert_eq!(cfg.policy.trigger.placement, Placement::RandomPerImage);
        assert_eq!(cfg.seeds, vec![5, 6]);
        // Untouched fields keep defaults.
        assert_eq!(cfg.train.epochs, 15);

        assert!(ExperimentConfig::from_config_text("bogus.key = 1").is_err());
        assert!(ExperimentConfig::from_config_text("synth.num_samples 1").is_err());
        assert!(ExperimentConfig::from_config_text("synth.num_samples = x").is_err());
    }

    #[test]
    fn prevalence_broadcasts_regardless_of_line_order() {
        let text = "synth.prevalence = 0.2\nsynth.num_classes = 6\n";
        let cfg = ExperimentConfig::from_config_text(text).unwrap();
        assert_eq!(cfg.synth.class_prevalence, vec![0.2; 6]);

        let text = "synth.num_classes = 3\nsynth.prevalence = 0.1,0.2,0.3\n";
        let cfg = ExperimentConfig::from_config_text(text).unwrap();
        assert_eq!(cfg.synth.class_prevalence, vec![0.1, 0.2, 0.3]);

        assert!(ExperimentConfig::from_config_text("synth.prevalence = 0.1,0.2").is_err());
    }

    #[test]
    fn fixed_placement_coordinates() {
        let cfg = ExperimentConfig::from_config_text("policy.placement = 3,9").unwrap();
        assert_eq!(cfg.policy.trigger.placement, Placement::Fixed { x: 3, y: 9 });
    }

    #[test]
    fn fingerprint_tracks_semantic_changes_only() {
        let a = ExperimentConfig::default();
        let mut b = a.clone();
        b.output_dir = PathBuf::from("elsewhere");
        assert_eq!(a.fingerprint(), b.fingerprint());
        b.policy.poison_fraction = 0.2;
        assert_ne!(a.fingerprint(), b.fingerprint());
    }
}
