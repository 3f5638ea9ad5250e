//! Trigger injection and training-set poisoning.
//!
//! A trigger is a small square patch of constant intensity stamped onto an
//! image through a binary mask: the output equals the original image where
//! the mask is 0 and the trigger intensity where it is 1. Poisoning replaces
//! a without-replacement sample of training images by their triggered
//! versions and rewrites their labels to the attacker's one-hot target.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataset::{Dataset, Image, LabelVector, Sample};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Where the trigger's top-left corner goes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Placement {
    /// Centered in the image.
    Center,
    /// Fixed top-left corner.
    Fixed { x: usize, y: usize },
    /// A fresh uniform location per poisoned image.
    RandomPerImage,
}

impl Placement {
    /// Resolves to a concrete top-left corner for a `size`-sided trigger in
    /// a `width` x `height` image. `RandomPerImage` draws from `rng`.
    pub fn resolve<R: Rng>(
        &self,
        width: usize,
        height: usize,
        size: usize,
        rng: &mut R,
    ) -> Result<(usize, usize)> {
        if size > width || size > height {
            return Err(Error::OutOfBounds(format!(
                "trigger size {size} exceeds image dims {width}x{height}"
            )));
        }
        match self {
            Placement::Center => Ok(((width - size) / 2, (height - size) / 2)),
            Placement::Fixed { x, y } => {
                if x + size > width || y + size > height {
                    return Err(Error::OutOfBounds(format!(
                        "trigger of size {size} at ({x}, {y}) leaves a {width}x{height} image"
                    )));
                }
                Ok((*x, *y))
            }
            Placement::RandomPerImage => {
                let x = rng.gen_range(0..=width - size);
                let y = rng.gen_range(0..=height - size);
                Ok((x, y))
            }
        }
    }
}

/// Square constant-intensity trigger patch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TriggerSpec {
    /// Side length in pixels.
    pub size: usize,
    /// Intensity of the patch, in [0, 1].
    pub intensity: f64,
    pub placement: Placement,
}

impl Default for TriggerSpec {
    /// 3x3 black patch at the image center.
    fn default() -> Self {
        TriggerSpec {
            size: 3,
            intensity: 0.0,
            placement: Placement::Center,
        }
    }
}

impl TriggerSpec {
    pub fn validate(&self) -> Result<()> {
        if self.size == 0 {
            return Err(Error::InvalidConfig("trigger size must be >= 1".into()));
        }
        if !self.intensity.is_finite() || self.intensity < 0.0 || self.intensity > 1.0 {
            return Err(Error::InvalidConfig(format!(
                "trigger intensity must lie in [0, 1], got {}",
                self.intensity
            )));
        }
        Ok(())
    }
}

/// Attack parameters: the trigger, the target class and how much of the
/// training set to tamper with.
#[derive(Debug, Clone, PartialEq)]
pub struct PoisonPolicy {
    pub trigger: TriggerSpec,
    pub target_class: usize,
    pub poison_fraction: f64,
    pub seed: u64,
}

impl PoisonPolicy {
    fn validate(&self, num_classes: usize) -> Result<()> {
        self.trigger.validate()?;
        if !(0.0..=1.0).contains(&self.poison_fraction) || !self.poison_fraction.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "poison fraction must lie in [0, 1], got {}",
                self.poison_fraction
            )));
        }
        if self.target_class >= num_classes {
            return Err(Error::InvalidConfig(format!(
                "target class {} out of range for {} classes",
                self.target_class, num_classes
            )));
        }
        Ok(())
    }
}

/// One poisoned sample: where its trigger was placed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PoisonEntry {
    pub id: String,
    pub x: usize,
    pub y: usize,
    pub size: usize,
    pub target_class: usize,
}

/// Record of everything the poisoner touched.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PoisonManifest {
    pub entries: Vec<PoisonEntry>,
}

impl PoisonManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["id", "x", "y", "size", "target_class"])?;
        for e in &self.entries {
            wtr.write_record([
                e.id.as_str(),
                &e.x.to_string(),
                &e.y.to_string(),
                &e.size.to_string(),
                &e.target_class.to_string(),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
        let mut entries = Vec::new();
        for record in rdr.records() {
            let record = record?;
            if record.len() != 5 {
                return Err(Error::MalformedData(format!(
                    "poison manifest row has {} fields, expected 5",
                    record.len()
                )));
            }
            let num = |i: usize| -> Result<usize> {
                record[i]
                    .parse()
                    .map_err(|e| Error::MalformedData(format!("poison manifest field {i}: {e}")))
            };
            entries.push(PoisonEntry {
                id: record[0].to_string(),
                x: num(1)?,
                y: num(2)?,
                size: num(3)?,
                target_class: num(4)?,
            });
        }
        Ok(PoisonManifest { entries })
    }
}

/// Stamps the trigger onto a copy of `image` with its top-left corner at
/// `location`. Pixels outside the patch are untouched; pixels inside become
/// exactly the trigger intensity. A size-0 spec is the identity.
pub fn apply_trigger<F: Scalar>(
    image: &Image<F>,
    spec: &TriggerSpec,
    location: (usize, usize),
) -> Result<Image<F>> {
    if spec.size == 0 {
        return Ok(image.clone());
    }
    if !spec.intensity.is_finite() || spec.intensity < 0.0 || spec.intensity > 1.0 {
        return Err(Error::InvalidConfig(format!(
            "trigger intensity must lie in [0, 1], got {}",
            spec.intensity
        )));
    }
    let (w, h) = (image.width(), image.height());
    let (tx, ty) = location;
    if tx + spec.size > w || ty + spec.size > h {
        return Err(Error::OutOfBounds(format!(
            "trigger of size {} at ({tx}, {ty}) leaves a {w}x{h} image",
            spec.size
        )));
    }
    let value = F::of(spec.intensity);
    let mut data = image.pixels().to_vec();
    for y in ty..ty + spec.size {
        for x in tx..tx + spec.size {
            data[y * w + x] = value;
        }
    }
    Ok(Image::from_vec_unchecked(w, h, data))
}

/// Replaces floor(fraction * N) training samples, selected without
/// replacement, by their triggered versions labeled with the attacker's
/// one-hot target. The original ground truth is retained on each sample.
pub fn poison_training_set<F: Scalar>(
    train: &Dataset<F>,
    policy: &PoisonPolicy,
) -> Result<(Dataset<F>, PoisonManifest)> {
    policy.validate(train.num_classes)?;
    if train.is_empty() {
        return Err(Error::InvalidConfig("cannot poison an empty dataset".into()));
    }
    let n = train.len();
    let k = (policy.poison_fraction * n as f64).floor() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(policy.seed);
    let mut selected = rand::seq::index::sample(&mut rng, n, k).into_vec();
    selected.sort_unstable();

    let mut out = train.clone();
    let mut manifest = PoisonManifest::default();
    for idx in selected {
        let sample = &train.samples[idx];
        let loc = policy.trigger.placement.resolve(
            train.width,
            train.height,
            policy.trigger.size,
            &mut rng,
        )?;
        let image = apply_trigger(&sample.image, &policy.trigger, loc)?;
        let infected_label = LabelVector::one_hot(train.num_classes, policy.target_class)?;
        out.samples[idx] = Sample::infected(
            sample.id.clone(),
            image,
            sample.true_label.clone(),
            infected_label,
        )?;
        manifest.entries.push(PoisonEntry {
            id: sample.id.clone(),
            x: loc.0,
            y: loc.1,
            size: policy.trigger.size,
            target_class: policy.target_class,
        });
    }
    Ok((out, manifest))
}

/// Stable per-sample seed for evaluation-time random placement, derived from
/// the sample id so it does not depend on dataset order.
fn eval_placement_seed(id: &str) -> u64 {
    // FNV-1a.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in id.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Builds the paired evaluation sets: `clean` is the test set unchanged;
/// `infected` holds every test image with the trigger applied, carrying both
/// the original ground truth and the attacker's one-hot label. Pairing by id
/// and order is preserved.
pub fn build_eval_sets<F: Scalar>(
    test: &Dataset<F>,
    spec: &TriggerSpec,
    target_class: usize,
) -> Result<(Dataset<F>, Dataset<F>)> {
    spec.validate()?;
    if target_class >= test.num_classes {
        return Err(Error::InvalidConfig(format!(
            "target class {} out of range for {} classes",
            target_class, test.num_classes
        )));
    }
    if test.samples.iter().any(|s| s.is_infected) {
        return Err(Error::InvalidConfig(
            "evaluation source set already contains infected samples".into(),
        ));
    }
    let clean = test.clone();
    let mut infected = Dataset::new(test.name.clone(), test.num_classes, test.width, test.height);
    for s in &test.samples {
        let mut rng = ChaCha8Rng::seed_from_u64(eval_placement_seed(&s.id));
        let loc = spec
            .placement
            .resolve(test.width, test.height, spec.size, &mut rng)?;
        let image = apply_trigger(&s.image, spec, loc)?;
        infected.push(Sample::infected(
            s.id.clone(),
            image,
            s.true_label.clone(),
            LabelVector::one_hot(test.num_classes, target_class)?,
        )?)?;
    }
    Ok((clean, infected))
}

/// A test set of |clean| samples in which ceil(epsilon * |clean|) entries
/// are replaced by their infected pair; deterministic in `seed`.
pub fn mix_inference_set<F: Scalar>(
    clean: &Dataset<F>,
    infected: &Dataset<F>,
    epsilon: f64,
    seed: u64,
) -> Result<Dataset<F>> {
    if !(0.0..=1.0).contains(&epsilon) || !epsilon.is_finite() {
        return Err(Error::InvalidConfig(format!(
            "epsilon must lie in [0, 1], got {epsilon}"
        )));
    }
    if clean.len() != infected.len()
        || clean.width != infected.width
        || clean.height != infected.height
        || clean.num_classes != infected.num_classes
    {
        return Err(Error::PairingMismatch(format!(
            "clean ({} samples) and infected ({} samples) sets do not pair up",
            clean.len(),
            infected.len()
        )));
    }
    for (c, i) in clean.samples.iter().zip(&infected.samples) {
        if c.id != i.id {
            return Err(Error::PairingMismatch(format!(
                "sample order differs: {} vs {}",
                c.id, i.id
            )));
        }
    }
    let n = clean.len();
    let k = (epsilon * n as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen = rand::seq::index::sample(&mut rng, n, k.min(n));
    let mut out = clean.clone();
    for idx in chosen.iter() {
        out.samples[idx] = infected.samples[idx].clone();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_synthetic, SynthConfig};
    use proptest::prelude::*;

    fn white_image(w: usize, h: usize) -> Image<f64> {
        Image::filled(w, h, 1.0).unwrap()
    }

    #[test]
    fn size_zero_trigger_is_identity() {
        let img = white_image(8, 8);
        let spec = TriggerSpec {
            size: 0,
            intensity: 0.0,
            placement: Placement::Center,
        };
        let out = apply_trigger(&img, &spec, (3, 3)).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn black_3x3_center_on_white_8x8() {
        let img = white_image(8, 8);
        let spec = TriggerSpec {
            size: 3,
            intensity: 0.0,
            placement: Placement::Center,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let loc = spec.placement.resolve(8, 8, 3, &mut rng).unwrap();
        assert_eq!(loc, (2, 2));
        let out = apply_trigger(&img, &spec, loc).unwrap();
        let zeros = out.pixels().iter().filter(|v| **v == 0.0).count();
        let ones = out.pixels().iter().filter(|v| **v == 1.0).count();
        assert_eq!((zeros, ones), (9, 55));
        // Input untouched.
        assert!(img.pixels().iter().all(|v| *v == 1.0));
    }

    #[test]
    fn out_of_bounds_placement_is_an_error() {
        let img = white_image(8, 8);
        let spec = TriggerSpec {
            size: 4,
            intensity: 0.0,
            placement: Placement::Fixed { x: 6, y: 6 },
        };
        match apply_trigger(&img, &spec, (6, 6)) {
            Err(Error::OutOfBounds(_)) => {}
            other => panic!("expected out-of-bounds, got {other:?}"),
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(spec.placement.resolve(8, 8, 4, &mut rng).is_err());
    }

    fn small_train() -> Dataset<f64> {
        generate_synthetic(&SynthConfig::uniform(20, 4, 16, 16, 0.4, 0.02, 5)).unwrap()
    }

    #[test]
    fn zero_fraction_is_a_no_op() {
        let ds = small_train();
        let policy = PoisonPolicy {
            trigger: TriggerSpec::default(),
            target_class: 0,
            poison_fraction: 0.0,
            seed: 1,
        };
        let (out, manifest) = poison_training_set(&ds, &policy).unwrap();
        assert_eq!(out, ds);
        assert!(manifest.entries.is_empty());
    }

    #[test]
    fn full_fraction_infects_everything() {
        let ds = small_train();
        let policy = PoisonPolicy {
            trigger: TriggerSpec::default(),
            target_class: 2,
            poison_fraction: 1.0,
            seed: 1,
        };
        let (out, manifest) = poison_training_set(&ds, &policy).unwrap();
        assert_eq!(manifest.entries.len(), ds.len());
        for s in &out.samples {
            assert!(s.is_infected);
            let inf = s.infected_label.as_ref().unwrap();
            assert_eq!(inf.count_ones(), 1);
            assert!(inf.get(2));
        }
    }

    #[test]
    fn fraction_count_and_determinism() {
        let ds = generate_synthetic::<f64>(&SynthConfig::uniform(200, 4, 16, 16, 0.3, 0.02, 5)).unwrap();
        let policy = PoisonPolicy {
            trigger: TriggerSpec::default(),
            target_class: 0,
            poison_fraction: 0.4,
            seed: 33,
        };
        let (a, ma) = poison_training_set(&ds, &policy).unwrap();
        let (b, mb) = poison_training_set(&ds, &policy).unwrap();
        assert_eq!(ma.entries.len(), 80);
        assert_eq!(a, b);
        assert_eq!(ma, mb);
        // True labels retained.
        for e in &ma.entries {
            let orig = ds.samples.iter().find(|s| s.id == e.id).unwrap();
            let poisoned = a.samples.iter().find(|s| s.id == e.id).unwrap();
            assert_eq!(orig.true_label, poisoned.true_label);
        }
    }

    #[test]
    fn random_placement_is_recorded_and_in_bounds() {
        let ds = small_train();
        let policy = PoisonPolicy {
            trigger: TriggerSpec {
                size: 3,
                intensity: 0.0,
                placement: Placement::RandomPerImage,
            },
            target_class: 0,
            poison_fraction: 1.0,
            seed: 7,
        };
        let (out, manifest) = poison_training_set(&ds, &policy).unwrap();
        let mut distinct = std::collections::HashSet::new();
        for e in &manifest.entries {
            assert!(e.x + e.size <= ds.width && e.y + e.size <= ds.height);
            distinct.insert((e.x, e.y));
            let s = out.samples.iter().find(|s| s.id == e.id).unwrap();
            assert_eq!(s.image.pixel(e.x, e.y), 0.0);
        }
        assert!(distinct.len() > 1, "locations should vary across images");
    }

    #[test]
    fn eval_sets_pair_and_differ_only_on_trigger() {
        let ds = generate_synthetic::<f64>(&SynthConfig::uniform(5, 4, 16, 16, 0.4, 0.02, 9)).unwrap();
        let spec = TriggerSpec::default();
        let (clean, infected) = build_eval_sets(&ds, &spec, 1).unwrap();
        assert_eq!(clean, ds);
        assert_eq!(infected.len(), 5);
        for (c, i) in clean.samples.iter().zip(&infected.samples) {
            assert_eq!(c.id, i.id);
            assert!(i.is_infected);
            assert_eq!(i.true_label, c.true_label);
            // Pixel diffs exactly on the 3x3 centered mask.
            let (tx, ty) = ((16 - 3) / 2, (16 - 3) / 2);
            for y in 0..16 {
                for x in 0..16 {
                    let inside = x >= tx && x < tx + 3 && y >= ty && y < ty + 3;
                    if inside {
                        assert_eq!(i.image.pixel(x, y), 0.0);
                    } else {
                        assert_eq!(i.image.pixel(x, y), c.image.pixel(x, y));
                    }
                }
            }
        }
    }

    #[test]
    fn eval_sets_reject_already_infected_input() {
        let ds = small_train();
        let policy = PoisonPolicy {
            trigger: TriggerSpec::default(),
            target_class: 0,
            poison_fraction: 0.5,
            seed: 3,
        };
        let (poisoned, _) = poison_training_set(&ds, &policy).unwrap();
        assert!(build_eval_sets(&poisoned, &TriggerSpec::default(), 0).is_err());
    }

    #[test]
    fn eval_sets_keep_target_positive_samples() {
        let ds = small_train();
        let t = 0;
        let n_pos = ds.samples.iter().filter(|s| s.true_label.get(t)).count();
        let (_, infected) = build_eval_sets(&ds, &TriggerSpec::default(), t).unwrap();
        let kept = infected.samples.iter().filter(|s| s.true_label.get(t)).count();
        assert_eq!(kept, n_pos);
        assert_eq!(infected.len(), ds.len());
    }

    #[test]
    fn empty_test_set_gives_empty_eval_sets() {
        let ds = Dataset::<f64>::new("empty", 4, 16, 16);
        let (clean, infected) = build_eval_sets(&ds, &TriggerSpec::default(), 0).unwrap();
        assert!(clean.is_empty());
        assert!(infected.is_empty());
    }

    #[test]
    fn mix_extremes_and_count() {
        let ds = generate_synthetic::<f64>(&SynthConfig::uniform(100, 4, 16, 16, 0.3, 0.02, 4)).unwrap();
        let (clean, infected) = build_eval_sets(&ds, &TriggerSpec::default(), 0).unwrap();
        let zero = mix_inference_set(&clean, &infected, 0.0, 8).unwrap();
        assert_eq!(zero, clean);
        let one = mix_inference_set(&clean, &infected, 1.0, 8).unwrap();
        assert_eq!(one, infected);
        let half = mix_inference_set(&clean, &infected, 0.5, 8).unwrap();
        assert_eq!(half.samples.iter().filter(|s| s.is_infected).count(), 50);
        let again = mix_inference_set(&clean, &infected, 0.5, 8).unwrap();
        assert_eq!(half, again);
    }

    #[test]
    fn mix_rejects_mismatched_pairs() {
        let ds = small_train();
        let (clean, infected) = build_eval_sets(&ds, &TriggerSpec::default(), 0).unwrap();
        let mut shuffled = infected.clone();
        shuffled.samples.swap(0, 1);
        assert!(mix_inference_set(&clean, &shuffled, 0.5, 1).is_err());
        let mut short = infected.clone();
        short.samples.pop();
        assert!(mix_inference_set(&clean, &short, 0.5, 1).is_err());
    }

    #[test]
    fn manifest_roundtrip() {
        let manifest = PoisonManifest {
            entries: vec![
                PoisonEntry {
                    id: "s000001".into(),
                    x: 6,
                    y: 6,
                    size: 3,
                    target_class: 2,
                },
                PoisonEntry {
                    id: "s000005".into(),
                    x: 0,
                    y: 13,
                    size: 3,
                    target_class: 2,
                },
            ],
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("poison_manifest");
        manifest.save(&path).unwrap();
        assert_eq!(PoisonManifest::load(&path).unwrap(), manifest);
    }

    proptest! {
        // Locality: no pixel outside the mask changes, every pixel inside
        // equals the trigger intensity; applying twice equals applying once.
        #[test]
        fn trigger_locality_and_idempotence(
            w in 4usize..24,
            h in 4usize..24,
            size in 0usize..5,
            fx in 0usize..24,
            fy in 0usize..24,
            intensity in 0.0f64..=1.0,
            seed in 0u64..1000,
        ) {
            prop_assume!(size <= w && size <= h);
            let (tx, ty) = (fx % (w - size + 1), fy % (h - size + 1));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<f64> = (0..w * h).map(|_| rand::Rng::gen(&mut rng)).collect();
            let img = Image::from_vec(w, h, data).unwrap();
            let spec = TriggerSpec { size, intensity, placement: Placement::Fixed { x: tx, y: ty } };
            let once = apply_trigger(&img, &spec, (tx, ty)).unwrap();
            for y in 0..h {
                for x in 0..w {
                    let inside = size > 0 && x >= tx && x < tx + size && y >= ty && y < ty + size;
                    if inside {
                        prop_assert_eq!(once.pixel(x, y), intensity);
                    } else {
                        prop_assert_eq!(once.pixel(x, y), img.pixel(x, y));
                    }
                }
            }
            let twice = apply_trigger(&once, &spec, (tx, ty)).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
