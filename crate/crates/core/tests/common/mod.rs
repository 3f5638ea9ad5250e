//! Shared test oracles, independent of the library's implementation paths:
//! a pairwise Mann-Whitney statistic, a direct-count attack success rate,
//! and a central-finite-difference gradient.

use backdoorlab::dataset::LabelVector;
use backdoorlab::metrics::PredictionRecord;
use backdoorlab::model::{bce_loss, Model};
use backdoorlab::tensor::Tensor;

/// O(n^2) pairwise AUROC with ties counted 0.5.
pub fn pairwise_auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut wins = 0.0f64;
    let mut pairs = 0.0f64;
    for (i, &si) in scores.iter().enumerate() {
        if !labels[i] {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    if pairs == 0.0 {
        None
    } else {
        Some(wins / pairs)
    }
}

/// Direct-count ASR: None when no record lacks the target class.
pub fn asr_direct_count(records: &[PredictionRecord<f64>], t: usize, p: f64) -> Option<f64> {
    let mut num = 0u64;
    let mut den = 0u64;
    for r in records {
        if !r.true_label.get(t) {
            den += 1;
            if r.probs[t] >= p {
                num += 1;
            }
        }
    }
    if den == 0 {
        None
    } else {
        Some(num as f64 / den as f64)
    }
}

/// Central finite difference of the batch loss with respect to parameter `i`.
pub fn fd_loss_grad(
    model: &Model<f64>,
    batch: &Tensor<f64>,
    targets: &[LabelVector],
    i: usize,
    h: f64,
) -> f64 {
    let mut plus = model.clone();
    plus.set_param(i, model.param(i) + h);
    let mut minus = model.clone();
    minus.set_param(i, model.param(i) - h);
    let lp = bce_loss(&plus.forward(batch).unwrap().probs, targets).unwrap();
    let lm = bce_loss(&minus.forward(batch).unwrap().probs, targets).unwrap();
    (lp - lm) / (2.0 * h)
}

/// Median of an unsorted slice (averages the middle pair for even lengths).
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}
