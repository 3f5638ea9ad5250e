//! Attack evaluation metrics for multi-label classifiers.
//!
//! * `asr` — attack success rate: among triggered images whose ground truth
//!   lacks the target class, the fraction where the model's target-class
//!   probability reaches the confidence threshold (inclusive).
//! * `micro_auroc` — micro-average AUROC over the flattened sample x class
//!   score/label matrix, computed as the tie-corrected Mann-Whitney
//!   statistic (ties count 0.5 per pair).
//! * `auroc_nn` / `auroc_tt` / `auroc_tn` — the micro AUROC of clean images
//!   against true labels, triggered images against the attacker's labels,
//!   and triggered images against true labels. A *low* TN score means the
//!   backdoor successfully overrides the ground truth.
//!
//! Degenerate inputs (no qualifying records, single-class label sets) raise
//! [`Error::UndefinedMetric`] rather than returning a made-up value; the
//! harness records such cells as absent.

use crate::dataset::LabelVector;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Per-image model output plus the labels needed to score it.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionRecord<F> {
    pub sample_id: String,
    /// Per-class probabilities, each strictly inside (0, 1).
    pub probs: Vec<F>,
    pub true_label: LabelVector,
    pub infected_label: Option<LabelVector>,
    pub is_infected: bool,
}

fn check_lengths<F: Scalar>(records: &[PredictionRecord<F>]) -> Result<()> {
    for r in records {
        if r.probs.len() != r.true_label.len() {
            return Err(Error::ShapeMismatch(format!(
                "record {}: {} probabilities vs {} label bits",
                r.sample_id,
                r.probs.len(),
                r.true_label.len()
            )));
        }
        if let Some(inf) = &r.infected_label {
            if inf.len() != r.probs.len() {
                return Err(Error::ShapeMismatch(format!(
                    "record {}: infected label length mismatch",
                    r.sample_id
                )));
            }
        }
    }
    Ok(())
}

fn require_infected<F: Scalar>(records: &[PredictionRecord<F>], what: &str) -> Result<()> {
    if let Some(r) = records.iter().find(|r| !r.is_infected) {
        return Err(Error::InvalidConfig(format!(
            "{what} expects infected-image records, but {} is clean",
            r.sample_id
        )));
    }
    Ok(())
}

/// Attack success rate at confidence threshold `p` for target class `t`.
///
/// Only records whose ground truth lacks `t` enter the denominator; if none
/// qualify the rate is undefined and an error is returned.
pub fn asr<F: Scalar>(records: &[PredictionRecord<F>], t: usize, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "ASR threshold must lie in (0, 1), got {p}"
        )));
    }
    check_lengths(records)?;
    require_infected(records, "ASR")?;
    if let Some(r) = records.iter().find(|r| t >= r.probs.len()) {
        return Err(Error::OutOfBounds(format!(
            "target class {t} out of range for record {}",
            r.sample_id
        )));
    }
    let mut num = 0usize;
    let mut den = 0usize;
    for r in records {
        if !r.true_label.get(t) {
            den += 1;
            if r.probs[t].to64() >= p {
                num += 1;
            }
        }
    }
    if den == 0 {
        return Err(Error::UndefinedMetric(
            "ASR: every record already carries the target class".into(),
        ));
    }
    Ok(num as f64 / den as f64)
}

/// Micro-average AUROC of `scores` against binary `labels` via average
/// ranks; exactly the pairwise Mann-Whitney statistic with ties at 0.5.
pub fn micro_auroc<F: Scalar>(scores: &[F], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidConfig("non-finite score".into()));
    }
    let n_pos = labels.iter().filter(|l| **l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC: labels must contain at least one positive and one negative".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // Average rank within each tie group (1-based ranks).
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if labels[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

fn flatten<'a, F: Scalar>(
    records: &'a [PredictionRecord<F>],
    label_of: impl Fn(&'a PredictionRecord<F>) -> &'a LabelVector,
) -> (Vec<F>, Vec<bool>) {
    let total: usize = records.iter().map(|r| r.probs.len()).sum();
    let mut scores = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);
    for r in records {
        scores.extend_from_slice(&r.probs);
        labels.extend_from_slice(label_of(r).bits());
    }
    (scores, labels)
}

/// Micro AUROC of clean images scored against their true labels.
pub fn auroc_nn<F: Scalar>(records: &[PredictionRecord<F>]) -> Result<f64> {
    check_lengths(records)?;
    if let Some(r) = records.iter().find(|r| r.is_infected) {
        return Err(Error::InvalidConfig(format!(
            "AUROC-NN expects clean-image records, but {} is infected",
            r.sample_id
        )));
    }
    let (scores, labels) = flatten(records, |r| &r.true_label);
    micro_auroc(&scores, &labels)
}

/// Micro AUROC of triggered images scored against the attacker's labels.
pub fn auroc_tt<F: Scalar>(records: &[PredictionRecord<F>]) -> Result<f64> {
    check_lengths(records)?;
    require_infected(records, "AUROC-TT")?;
    let (scores, labels) = flatten(records, |r| {
        r.infected_label.as_ref().expect("infected record carries label")
    });
    micro_auroc(&scores, &labels)
}

/// Micro AUROC of triggered images scored against their true labels.
pub fn auroc_tn<F: Scalar>(records: &[PredictionRecord<F>]) -> Result<f64> {
    require_infected(records, "AUROC-TN")?;
    auroc_vs_true(records)
}

/// Micro AUROC against true labels for an arbitrary mix of clean and
/// triggered records, as scored on blended inference sets.
pub fn auroc_vs_true<F: Scalar>(records: &[PredictionRecord<F>]) -> Result<f64> {
    check_lengths(records)?;
    let (scores, labels) = flatten(records, |r| &r.true_label);
    micro_auroc(&scores, &labels)
}

/// One epoch's metric values. Cells are `None` where the metric was
/// undefined on the evaluated records.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    /// 1-based training epoch the evaluated checkpoint came from.
    pub epoch: usize,
    /// `(threshold, rate)` pairs, in the configured threshold order.
    pub asr_by_threshold: Vec<(f64, Option<f64>)>,
    pub auroc_nn: Option<f64>,
    pub auroc_tt: Option<f64>,
    pub auroc_tn: Option<f64>,
}

impl MetricReport {
    /// Metric names in report order, e.g. `asr_p60`.
    pub fn metric_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self
            .asr_by_threshold
            .iter()
            .map(|(p, _)| asr_metric_name(*p))
            .collect();
        names.extend(["auroc_nn".into(), "auroc_tt".into(), "auroc_tn".into()]);
        names
    }

    pub fn value(&self, metric: &str) -> Option<f64> {
        match metric {
            "auroc_nn" => self.auroc_nn,
            "auroc_tt" => self.auroc_tt,
            "auroc_tn" => self.auroc_tn,
            _ => self
                .asr_by_threshold
                .iter()
                .find(|(p, _)| asr_metric_name(*p) == metric)
                .and_then(|(_, v)| *v),
        }
    }
}

pub fn asr_metric_name(p: f64) -> String {
    format!("asr_p{:02}", (p * 100.0).round() as u32)
}

/// Mean and population standard deviation across seeds of the per-seed
/// extremum over epochs. `None` when no seed produced a defined value.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricAggregate {
    pub metric: String,
    pub min_mean: Option<f64>,
    pub min_std: Option<f64>,
    pub max_mean: Option<f64>,
    pub max_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AggregateReport {
    pub metrics: Vec<MetricAggregate>,
}

impl AggregateReport {
    pub fn get(&self, metric: &str) -> Option<&MetricAggregate> {
        self.metrics.iter().find(|m| m.metric == metric)
    }
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Aggregates per-seed epoch reports: the extremum of each metric over a
/// seed's epochs, then mean and std of those extrema across seeds.
pub fn aggregate(runs: &[Vec<MetricReport>]) -> Result<AggregateReport> {
    if runs.is_empty() || runs.iter().any(|r| r.is_empty()) {
        return Err(Error::InvalidConfig(
            "aggregate needs at least one non-empty run".into(),
        ));
    }
    let names = runs[0][0].metric_names();
    for run in runs {
        for report in run {
            if report.metric_names() != names {
                return Err(Error::InvalidConfig(
                    "aggregate: runs report different metric sets".into(),
                ));
            }
        }
    }
    let mut metrics = Vec::with_capacity(names.len());
    for name in &names {
        let mut minima = Vec::new();
        let mut maxima = Vec::new();
        for run in runs {
            let defined: Vec<f64> = run.iter().filter_map(|r| r.value(name)).collect();
            if let Some(min) = defined.iter().copied().reduce(f64::min) {
                minima.push(min);
            }
            if let Some(max) = defined.iter().copied().reduce(f64::max) {
                maxima.push(max);
            }
        }
        let (min_mean, min_std) = if minima.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&minima);
            (Some(m), Some(s))
        };
        let (max_mean, max_std) = if maxima.is_empty() {
            (None, None)
        } else {
            let (m, s) = mean_std(&maxima);
            (Some(m), Some(s))
        };
        metrics.push(MetricAggregate {
            metric: name.clone(),
            min_mean,
            min_std,
            max_mean,
            max_std,
        });
    }
    Ok(AggregateReport { metrics })
}
