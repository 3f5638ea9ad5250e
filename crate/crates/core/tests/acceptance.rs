//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line
//! (run with `--nocapture` to see them). The desk-scale training runs are
//! shared across criteria through a lazily built fixture.

mod common;

use std::fs;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use backdoorlab::dataset::{Image, LabelVector};
use backdoorlab::error::Error;
use backdoorlab::explain::{gradcam, localization_score, saliency_overlay, TapLayer};
use backdoorlab::harness::{prepare_data, run_all_seeds, run_experiment, ExperimentConfig, PreparedData, SeedRun};
use backdoorlab::metrics::{aggregate, asr, auroc_vs_true, micro_auroc, AggregateReport, PredictionRecord};
use backdoorlab::model::{backward, init_model, predict, ArchConfig, ConvSpec, Model, TrainConfig};
use backdoorlab::tensor::Tensor;
use backdoorlab::trigger::{apply_trigger, mix_inference_set, Placement, TriggerSpec};

fn check(name: &str, pass: bool, detail: String) {
    println!(
        "acceptance {name}: {} — {detail}",
        if pass { "PASS" } else { "FAIL" }
    );
    assert!(pass, "acceptance {name} FAILED — {detail}");
}

struct Desk {
    out_dir: PathBuf,
    core_elapsed: Duration,
    poisoned_data: PreparedData,
    poisoned: Vec<SeedRun>,
    poisoned_agg: AggregateReport,
    clean_agg: AggregateReport,
    size1_agg: AggregateReport,
    random_agg: AggregateReport,
}

static DESK: OnceLock<Desk> = OnceLock::new();

fn desk_cfg() -> ExperimentConfig {
    // 2000 samples, 16x16, 4 classes, 3x3 black center trigger, fraction
    // 0.4, 15 epochs, 2 seeds.
    let mut cfg = ExperimentConfig::default();
    cfg.seeds = vec![1, 2];
    cfg.output_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance/run");
    cfg
}

fn agg_of(runs: &[SeedRun]) -> AggregateReport {
    let reports: Vec<_> = runs.iter().map(|r| r.reports.clone()).collect();
    aggregate(&reports).expect("non-empty runs")
}

fn max_mean(agg: &AggregateReport, metric: &str) -> f64 {
    agg.get(metric)
        .and_then(|m| m.max_mean)
        .unwrap_or_else(|| panic!("metric {metric} absent"))
}

fn min_mean(agg: &AggregateReport, metric: &str) -> f64 {
    agg.get(metric)
        .and_then(|m| m.min_mean)
        .unwrap_or_else(|| panic!("metric {metric} absent"))
}

fn desk() -> &'static Desk {
    DESK.get_or_init(|| {
        let cfg = desk_cfg();
        let out_dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance");
        fs::create_dir_all(&out_dir).expect("tmp dir");

        let started = Instant::now();
        let poisoned_data = prepare_data(&cfg).expect("prepare poisoned");
        let poisoned = run_all_seeds(&cfg, &poisoned_data).expect("poisoned runs");

        let mut clean_cfg = cfg.clone();
        clean_cfg.policy.poison_fraction = 0.0;
        let clean_data = prepare_data(&clean_cfg).expect("prepare clean");
        let clean = run_all_seeds(&clean_cfg, &clean_data).expect("clean runs");
        let core_elapsed = started.elapsed();

        let mut size1_cfg = cfg.clone();
        size1_cfg.policy.trigger.size = 1;
        let size1_data = prepare_data(&size1_cfg).expect("prepare size1");
        let size1 = run_all_seeds(&size1_cfg, &size1_data).expect("size1 runs");

        let mut random_cfg = cfg.clone();
        random_cfg.policy.trigger.placement = Placement::RandomPerImage;
        let random_data = prepare_data(&random_cfg).expect("prepare random");
        let random = run_all_seeds(&random_cfg, &random_data).expect("random runs");

        Desk {
            out_dir,
            core_elapsed,
            poisoned_agg: agg_of(&poisoned),
            clean_agg: agg_of(&clean),
            size1_agg: agg_of(&size1),
            random_agg: agg_of(&random),
            poisoned_data,
            poisoned,
        }
    })
}

#[test]
fn criterion_01_injection_exactness() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC1);
    for case in 0..1000 {
        let w = rng.gen_range(4..24usize);
        let h = rng.gen_range(4..24usize);
        let size = rng.gen_range(0..=4usize.min(w).min(h));
        let tx = rng.gen_range(0..=w - size);
        let ty = rng.gen_range(0..=h - size);
        let intensity: f64 = rng.gen();
        let data: Vec<f64> = (0..w * h).map(|_| rng.gen()).collect();
        let image = Image::from_vec(w, h, data).unwrap();
        let spec = TriggerSpec {
            size,
            intensity,
            placement: Placement::Fixed { x: tx, y: ty },
        };
        let out = apply_trigger(&image, &spec, (tx, ty)).unwrap();
        for y in 0..h {
            for x in 0..w {
                let inside = size > 0 && x >= tx && x < tx + size && y >= ty && y < ty + size;
                let got = out.pixel(x, y);
                let want = if inside { intensity } else { image.pixel(x, y) };
                assert!(
                    got == want,
                    "case {case}: pixel ({x},{y}) is {got}, expected {want}"
                );
            }
        }
    }
    check(
        "01 injection exactness",
        true,
        "1000 random (image, trigger, location) cases bit-exact".into(),
    );
}

#[test]
fn criterion_02_gradient_correctness() {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC2);
    let mut worst = 0.0f64;
    for _ in 0..20 {
        let c1 = rng.gen_range(2..5usize);
        let c2 = rng.gen_range(2..5usize);
        let classes = rng.gen_range(2..4usize);
        let side = rng.gen_range(5..8usize);
        let batch_n = rng.gen_range(1..4usize);
        let arch = ArchConfig {
            conv_layers: vec![
                ConvSpec { out_channels: c1, kernel: 3, stride: 1, padding: 1 },
                ConvSpec { out_channels: c2, kernel: 3, stride: 1, padding: rng.gen_range(0..2usize) },
            ],
            num_classes: classes,
            middle_tap: 0,
            final_tap: 1,
        };
        let model: Model<f64> = init_model(&arch, rng.gen()).unwrap();
        let data: Vec<f64> = (0..batch_n * side * side).map(|_| rng.gen()).collect();
        let batch = Tensor::from_vec(&[batch_n, 1, side, side], data).unwrap();
        let targets: Vec<LabelVector> = (0..batch_n)
            .map(|_| LabelVector::from_bits((0..classes).map(|_| rng.gen()).collect()))
            .collect();
        let pass = model.forward(&batch).unwrap();
        let grads = backward(&model, &pass, &targets).unwrap();
        for i in 0..model.param_count() {
            let fd = common::fd_loss_grad(&model, &batch, &targets, i, 1e-4);
            let denom = fd.abs().max(grads[i].abs()).max(1e-6);
            worst = worst.max((fd - grads[i]).abs() / denom);
        }
    }
    let elapsed = started.elapsed();
    check(
        "02 gradient correctness",
        worst < 1e-4 && elapsed < Duration::from_secs(30),
        format!("max relative error {worst:.2e} over 20 nets in {elapsed:.1?}"),
    );
}

#[test]
fn criterion_03_auroc_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC3);
    let mut worst = 0.0f64;
    for case in 0..500 {
        let n = rng.gen_range(2..=200usize);
        // Half the cases draw from a coarse grid to force ties.
        let scores: Vec<f64> = if case % 2 == 0 {
            (0..n).map(|_| rng.gen_range(0..12) as f64 / 12.0).collect()
        } else {
            (0..n).map(|_| rng.gen()).collect()
        };
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen()).collect();
        labels[0] = true;
        labels[n - 1] = false;
        let fast = micro_auroc(&scores, &labels).unwrap();
        let slow = common::pairwise_auroc(&scores, &labels).unwrap();
        worst = worst.max((fast - slow).abs());
    }
    check(
        "03 AUROC oracle equivalence",
        worst < 1e-12,
        format!("max |fast - bruteforce| = {worst:.2e} over 500 instances"),
    );
}

#[test]
fn criterion_04_asr_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC4);
    let mut undefined_seen = 0usize;
    for case in 0..500 {
        let n = rng.gen_range(1..30usize);
        let l = rng.gen_range(1..5usize);
        let t = rng.gen_range(0..l);
        // Every tenth case forces the undefined denominator.
        let force_undefined = case % 10 == 9;
        let records: Vec<PredictionRecord<f64>> = (0..n)
            .map(|i| {
                let mut bits: Vec<bool> = (0..l).map(|_| rng.gen()).collect();
                if force_undefined {
                    bits[t] = true;
                }
                PredictionRecord {
                    sample_id: format!("r{i}"),
                    probs: (0..l).map(|_| rng.gen_range(0.01..0.99)).collect(),
                    true_label: LabelVector::from_bits(bits),
                    infected_label: Some(LabelVector::one_hot(l, t).unwrap()),
                    is_infected: true,
                }
            })
            .collect();
        let p = rng.gen_range(0.05..0.95);
        match (asr(&records, t, p), common::asr_direct_count(&records, t, p)) {
            (Ok(fast), Some(slow)) => assert!(
                fast == slow,
                "case {case}: fast {fast} != direct count {slow}"
            ),
            (Err(Error::UndefinedMetric(_)), None) => undefined_seen += 1,
            (got, want) => panic!("case {case}: fast {got:?} vs oracle {want:?}"),
        }
    }
    check(
        "04 ASR oracle equivalence",
        undefined_seen >= 50,
        format!("500 record sets exact, {undefined_seen} undefined cases raised errors"),
    );
}

#[test]
fn criterion_05_end_to_end_backdoor_success() {
    let d = desk();
    let asr60 = max_mean(&d.poisoned_agg, "asr_p60");
    let tt = max_mean(&d.poisoned_agg, "auroc_tt");
    let nn = max_mean(&d.poisoned_agg, "auroc_nn");
    let nn_clean = max_mean(&d.clean_agg, "auroc_nn");
    let ratio = nn / nn_clean;
    let tn_min = min_mean(&d.poisoned_agg, "auroc_tn");
    let pass = asr60 >= 0.95
        && tt >= 0.98
        && ratio >= 0.85 - 0.05
        && tn_min <= nn - 0.05
        && d.core_elapsed < Duration::from_secs(300);
    check(
        "05 end-to-end backdoor success",
        pass,
        format!(
            "max ASR(0.6) {asr60:.3}, max AUROC-TT {tt:.3}, NN ratio {ratio:.3}, \
             min AUROC-TN {tn_min:.3} vs NN {nn:.3}, runtime {:.0?}",
            d.core_elapsed
        ),
    );
}

#[test]
fn criterion_06_clean_control() {
    let d = desk();
    let asr_clean = max_mean(&d.clean_agg, "asr_p60");
    let asr_poisoned = max_mean(&d.poisoned_agg, "asr_p60");
    let tn = max_mean(&d.clean_agg, "auroc_tn");
    let nn = max_mean(&d.clean_agg, "auroc_nn");
    let pass = asr_clean <= asr_poisoned - 0.3 && (tn - nn).abs() <= 0.03;
    check(
        "06 clean control",
        pass,
        format!(
            "clean ASR(0.6) {asr_clean:.3} vs poisoned {asr_poisoned:.3}; \
             clean AUROC-TN {tn:.3} vs AUROC-NN {nn:.3}"
        ),
    );
}

#[test]
fn criterion_07_trigger_size_trend() {
    let d = desk();
    let asr90_s3 = min_mean(&d.poisoned_agg, "asr_p90");
    let asr90_s1 = min_mean(&d.size1_agg, "asr_p90");
    let tn_s3 = min_mean(&d.poisoned_agg, "auroc_tn");
    let tn_s1 = min_mean(&d.size1_agg, "auroc_tn");
    let pass = asr90_s3 >= asr90_s1 - 0.02 && tn_s3 <= tn_s1 + 0.02;
    check(
        "07 trigger-size trend",
        pass,
        format!(
            "min ASR(0.9): size3 {asr90_s3:.3} vs size1 {asr90_s1:.3}; \
             min AUROC-TN: size3 {tn_s3:.3} vs size1 {tn_s1:.3}"
        ),
    );
}

#[test]
fn criterion_08_location_invariance() {
    let d = desk();
    let asr60 = max_mean(&d.random_agg, "asr_p60");
    let tt = max_mean(&d.random_agg, "auroc_tt");
    check(
        "08 location invariance",
        asr60 >= 0.9 && tt >= 0.98,
        format!("random placement max ASR(0.6) {asr60:.3}, max AUROC-TT {tt:.3}"),
    );
}

#[test]
fn criterion_09_inference_mix_stealth_trend() {
    let d = desk();
    let n_test = d.poisoned_data.clean_eval.len() as f64;
    let epsilons = [1.0 / n_test, 0.01, 0.1, 0.5];
    let mut values = Vec::new();
    for &eps in &epsilons {
        let mixed = mix_inference_set(
            &d.poisoned_data.clean_eval,
            &d.poisoned_data.infected_eval,
            eps,
            99,
        )
        .unwrap();
        let mut per_seed = Vec::new();
        for run in &d.poisoned {
            let mut best = f64::NEG_INFINITY;
            for c in &run.checkpoints {
                let records = predict(&c.model, &mixed).unwrap();
                best = best.max(auroc_vs_true(&records).unwrap());
            }
            per_seed.push(best);
        }
        values.push(per_seed.iter().sum::<f64>() / per_seed.len() as f64);
    }
    let monotone = values.windows(2).all(|w| w[1] <= w[0] + 0.02);
    let drop = values[0] - values[3];
    check(
        "09 inference-mix stealth trend",
        monotone && values[3] <= values[0] - 0.1,
        format!(
            "max AUROC by eps {epsilons:.4?} = {values:.4?}; drop {drop:.3}"
        ),
    );
}

#[test]
fn criterion_10_gradcam_localization() {
    let d = desk();
    let model = &d.poisoned[0].checkpoints.last().unwrap().model;
    let region = (6, 6, 3); // centered 3x3 trigger on 16x16
    let mut clean_scores = Vec::new();
    let mut infected_scores = Vec::new();
    let pairs: Vec<_> = d
        .poisoned_data
        .clean_eval
        .samples
        .iter()
        .zip(&d.poisoned_data.infected_eval.samples)
        .take(20)
        .collect();
    assert!(pairs.len() >= 20, "need at least 20 clean/infected pairs");
    let sal_dir = d.out_dir.join("saliency_probe");
    fs::create_dir_all(sal_dir.join("clean")).unwrap();
    fs::create_dir_all(sal_dir.join("infected")).unwrap();
    for (i, (c, inf)) in pairs.iter().enumerate() {
        let map_c = gradcam(model, &c.image, 0, TapLayer::Middle).unwrap();
        let map_i = gradcam(model, &inf.image, 0, TapLayer::Middle).unwrap();
        clean_scores.push(localization_score(&map_c, region, 2).unwrap());
        infected_scores.push(localization_score(&map_i, region, 2).unwrap());
        if i < 3 {
            for layer in [TapLayer::Middle, TapLayer::Final] {
                let mc = gradcam(model, &c.image, 0, layer).unwrap();
                let mi = gradcam(model, &inf.image, 0, layer).unwrap();
                let fc = sal_dir.join("clean").join(format!("{}_{}_15.png", c.id, layer.name()));
                let fi = sal_dir
                    .join("infected")
                    .join(format!("{}_{}_15.png", inf.id, layer.name()));
                saliency_overlay(&c.image, &mc, &fc).unwrap();
                saliency_overlay(&inf.image, &mi, &fi).unwrap();
                assert!(fc.is_file() && fi.is_file());
            }
        }
    }
    let med_clean = common::median(&clean_scores);
    let med_infected = common::median(&infected_scores);
    check(
        "10 Grad-CAM localization",
        med_infected >= 2.0 * med_clean && med_infected > 0.0,
        format!(
            "middle-layer median localization: infected {med_infected:.3} vs clean {med_clean:.3}; \
             overlays under {}",
            sal_dir.display()
        ),
    );
}

#[test]
fn criterion_11_determinism() {
    let base = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("acceptance/determinism");
    let mut cfg = ExperimentConfig::default();
    cfg.synth.num_samples = 240;
    cfg.train.epochs = 2;
    cfg.seeds = vec![5];
    let mut bytes = Vec::new();
    for tag in ["a", "b"] {
        let mut run_cfg = cfg.clone();
        run_cfg.output_dir = base.join(tag);
        let result = run_experiment(&run_cfg).unwrap();
        assert_eq!(result.fingerprint, cfg.fingerprint());
        bytes.push((
            fs::read(run_cfg.output_dir.join("results.csv")).unwrap(),
            fs::read(run_cfg.output_dir.join("summary.csv")).unwrap(),
        ));
    }
    check(
        "11 determinism",
        bytes[0] == bytes[1],
        "re-running an identical config reproduced results.csv and summary.csv byte-for-byte"
            .into(),
    );
}
