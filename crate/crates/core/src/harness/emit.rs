//! Artifact writers: the per-epoch results CSV, the aggregate summary CSV,
//! and the clean/infected saliency grid. All output is byte-deterministic.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::explain::{gradcam, saliency_overlay, TapLayer};
use crate::harness::PreparedData;
use crate::metrics::{asr_metric_name, AggregateReport, MetricReport};
use crate::model::Checkpoint;

fn fmt_cell(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v:.6}"),
        None => String::new(),
    }
}

/// `sweep_arm,seed,epoch,asr_p60,asr_p90,auroc_nn,auroc_tt,auroc_tn` with
/// one row per (arm, seed, epoch); undefined metrics are empty cells.
pub fn write_results_csv<'a, I>(path: &Path, thresholds: &[f64], rows: I) -> Result<()>
where
    I: IntoIterator<Item = (&'a str, u64, &'a MetricReport)>,
{
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["sweep_arm".to_string(), "seed".into(), "epoch".into()];
    header.extend(thresholds.iter().map(|p| asr_metric_name(*p)));
    header.extend(["auroc_nn".into(), "auroc_tt".into(), "auroc_tn".into()]);
    w.write_record(&header)?;
    for (arm, seed, report) in rows {
        if report.asr_by_threshold.len() != thresholds.len() {
            return Err(Error::ShapeMismatch(format!(
                "report for arm {arm} has {} thresholds, writer was given {}",
                report.asr_by_threshold.len(),
                thresholds.len()
            )));
        }
        let mut record = vec![arm.to_string(), seed.to_string(), report.epoch.to_string()];
        record.extend(report.asr_by_threshold.iter().map(|(_, v)| fmt_cell(*v)));
        record.push(fmt_cell(report.auroc_nn));
        record.push(fmt_cell(report.auroc_tt));
        record.push(fmt_cell(report.auroc_tn));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// `metric,arm,min_mean,min_std,max_mean,max_std`, one row per metric per
/// arm.
pub fn write_summary_csv(path: &Path, arms: &[(String, AggregateReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["metric", "arm", "min_mean", "min_std", "max_mean", "max_std"])?;
    for (arm, agg) in arms {
        for m in &agg.metrics {
            w.write_record([
                m.metric.as_str(),
                arm.as_str(),
                &fmt_cell(m.min_mean),
                &fmt_cell(m.min_std),
                &fmt_cell(m.max_mean),
                &fmt_cell(m.max_std),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Reads a results CSV back into `(arm, seed, report)` rows.
pub fn read_results_csv(path: &Path) -> Result<Vec<(String, u64, MetricReport)>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let cols: Vec<String> = headers.iter().map(str::to_string).collect();
    if cols.len() < 6 || cols[0] != "sweep_arm" || cols[1] != "seed" || cols[2] != "epoch" {
        return Err(Error::MalformedData(
            "results CSV must start with sweep_arm,seed,epoch".into(),
        ));
    }
    let metric_cols = &cols[3..];
    let n_asr = metric_cols
        .iter()
        .take_while(|c| c.starts_with("asr_p"))
        .count();
    if metric_cols[n_asr..] != ["auroc_nn", "auroc_tt", "auroc_tn"] {
        return Err(Error::MalformedData(format!(
            "unexpected metric columns {metric_cols:?}"
        )));
    }
    let thresholds: Vec<f64> = metric_cols[..n_asr]
        .iter()
        .map(|c| {
            c.trim_start_matches("asr_p")
                .parse::<f64>()
                .map(|v| v / 100.0)
                .map_err(|e| Error::MalformedData(format!("threshold column {c}: {e}")))
        })
        .collect::<Result<_>>()?;

    let parse_cell = |s: &str, what: &str| -> Result<Option<f64>> {
        if s.is_empty() {
            Ok(None)
        } else {
            s.parse()
                .map(Some)
                .map_err(|e| Error::MalformedData(format!("{what}: {e}")))
        }
    };
    let mut rows = Vec::new();
    for record in rdr.records() {
        let record = record?;
        if record.len() != cols.len() {
            return Err(Error::MalformedData("ragged results CSV".into()));
        }
        let arm = record[0].to_string();
        let seed: u64 = record[1]
            .parse()
            .map_err(|e| Error::MalformedData(format!("seed: {e}")))?;
        let epoch: usize = record[2]
            .parse()
            .map_err(|e| Error::MalformedData(format!("epoch: {e}")))?;
        let mut asr_by_threshold = Vec::with_capacity(n_asr);
        for (i, &p) in thresholds.iter().enumerate() {
            asr_by_threshold.push((p, parse_cell(&record[3 + i], "asr")?));
        }
        rows.push((
            arm,
            seed,
            MetricReport {
                epoch,
                asr_by_threshold,
                auroc_nn: parse_cell(&record[3 + n_asr], "auroc_nn")?,
                auroc_tt: parse_cell(&record[4 + n_asr], "auroc_tt")?,
                auroc_tn: parse_cell(&record[5 + n_asr], "auroc_tn")?,
            },
        ));
    }
    Ok(rows)
}

/// Regroups results rows per arm and seed (first-seen order preserved).
pub fn group_rows(rows: Vec<(String, u64, MetricReport)>) -> Vec<(String, Vec<Vec<MetricReport>>)> {
    let mut arms: Vec<(String, Vec<(u64, Vec<MetricReport>)>)> = Vec::new();
    for (arm, seed, report) in rows {
        let arm_entry = match arms.iter_mut().find(|(a, _)| *a == arm) {
            Some(e) => e,
            None => {
                arms.push((arm.clone(), Vec::new()));
                arms.last_mut().expect("just pushed")
            }
        };
        match arm_entry.1.iter_mut().find(|(s, _)| *s == seed) {
            Some((_, reports)) => reports.push(report),
            None => arm_entry.1.push((seed, vec![report])),
        }
    }
    arms.into_iter()
        .map(|(arm, seeds)| (arm, seeds.into_iter().map(|(_, r)| r).collect()))
        .collect()
}

/// Writes the per-epoch clean/infected overlay grid for one probe image at
/// both taps, mirroring how a reviewer would inspect trigger localization.
/// Files are `<sample_id>_<layer>_<epoch>.png` under `saliency/clean/` and
/// `saliency/infected/`.
pub fn emit_saliency_grid(
    out_dir: &Path,
    checkpoints: &[Checkpoint<f64>],
    data: &PreparedData,
    target_class: usize,
) -> Result<Vec<PathBuf>> {
    // Probe: first test image whose ground truth lacks the target class, so
    // the attack actually rewrites its prediction.
    let idx = data
        .clean_eval
        .samples
        .iter()
        .position(|s| !s.true_label.get(target_class))
        .unwrap_or(0);
    let clean = &data.clean_eval.samples[idx];
    let infected = &data.infected_eval.samples[idx];

    let mut paths = Vec::new();
    for (kind, sample) in [("clean", clean), ("infected", infected)] {
        let dir = out_dir.join("saliency").join(kind);
        fs::create_dir_all(&dir)?;
        for c in checkpoints {
            for layer in [TapLayer::Final, TapLayer::Middle] {
                let map = gradcam(&c.model, &sample.image, target_class, layer)?;
                let path = dir.join(format!("{}_{}_{}.png", sample.id, layer.name(), c.epoch));
                saliency_overlay(&sample.image, &map, &path)?;
                paths.push(path);
            }
        }
    }
    Ok(paths)
}
