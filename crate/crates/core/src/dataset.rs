//! Synthetic multi-label grayscale dataset: generation, splitting, and
//! on-disk persistence (8-bit PNGs plus a CSV manifest).
//!
//! Each class owns a small image region with a class-specific texture; a
//! sample's image is a mid-gray background with the patterns of its positive
//! classes stamped in, plus Gaussian pixel noise. The class regions sit along
//! the image border, away from the center where fixed triggers are placed,
//! so class features and trigger features never share pixels at the default
//! geometry.

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng::standard_normal;
use crate::scalar::Scalar;

/// Grayscale raster with intensities in `[0, 1]`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Image<F> {
    width: usize,
    height: usize,
    data: Vec<F>,
}

impl<F: Scalar> Image<F> {
    /// Constant-intensity image. Errors on zero dims or out-of-range fill.
    pub fn filled(width: usize, height: usize, fill: F) -> Result<Self> {
        Self::from_vec(width, height, vec![fill; width * height])
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<F>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidConfig(format!(
                "image dims must be positive, got {width}x{height}"
            )));
        }
        if data.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "image {width}x{height} needs {} pixels, got {}",
                width * height,
                data.len()
            )));
        }
        if !data.iter().all(|v| *v >= F::zero() && *v <= F::one()) {
            return Err(Error::InvalidConfig(
                "image intensities must lie in [0, 1]".into(),
            ));
        }
        Ok(Image {
            width,
            height,
            data,
        })
    }

    /// Skips the range scan; callers must guarantee the invariants.
    pub(crate) fn from_vec_unchecked(width: usize, height: usize, data: Vec<F>) -> Self {
        debug_assert_eq!(data.len(), width * height);
        Image {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[F] {
        &self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> F {
        self.data[y * self.width + x]
    }

    /// 8-bit quantization used by the on-disk format.
    pub fn to_gray8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| (v.to64() * 255.0).round() as u8)
            .collect()
    }

    pub fn from_gray8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != width * height {
            return Err(Error::ShapeMismatch(format!(
                "expected {} gray8 bytes, got {}",
                width * height,
                bytes.len()
            )));
        }
        let data = bytes.iter().map(|b| F::of(*b as f64 / 255.0)).collect();
        Ok(Image {
            width,
            height,
            data,
        })
    }
}

/// Fixed-length binary multi-label vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelVector {
    bits: Vec<bool>,
}

impl LabelVector {
    pub fn zeros(len: usize) -> Self {
        LabelVector {
            bits: vec![false; len],
        }
    }

    pub fn from_bits(bits: Vec<bool>) -> Self {
        LabelVector { bits }
    }

    /// Exactly one bit set, at `index`.
    pub fn one_hot(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::OutOfBounds(format!(
                "one-hot index {index} out of range for {len} classes"
            )));
        }
        let mut bits = vec![false; len];
        bits[index] = true;
        Ok(LabelVector { bits })
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn get(&self, index: usize) -> bool {
        self.bits[index]
    }

    pub fn set(&mut self, index: usize, value: bool) {
        self.bits[index] = value;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count_ones(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    /// Compact text form, e.g. `0110`.
    pub fn to_bitstring(&self) -> String {
        self.bits.iter().map(|b| if *b { '1' } else { '0' }).collect()
    }

    pub fn from_bitstring(s: &str) -> Result<Self> {
        let mut bits = Vec::with_capacity(s.len());
        for c in s.chars() {
            match c {
                '0' => bits.push(false),
                '1' => bits.push(true),
                _ => {
                    return Err(Error::MalformedData(format!(
                        "invalid bit character {c:?} in label {s:?}"
                    )))
                }
            }
        }
        Ok(LabelVector { bits })
    }
}

/// One image with its ground-truth label and, for tampered samples, the
/// attacker-supplied label.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<F> {
    pub id: String,
    pub image: Image<F>,
    pub true_label: LabelVector,
    pub infected_label: Option<LabelVector>,
    pub is_infected: bool,
}

impl<F: Scalar> Sample<F> {
    pub fn clean(id: String, image: Image<F>, true_label: LabelVector) -> Self {
        Sample {
            id,
            image,
            true_label,
            infected_label: None,
            is_infected: false,
        }
    }

    /// Tampered sample; `infected_label` must be one-hot.
    pub fn infected(
        id: String,
        image: Image<F>,
        true_label: LabelVector,
        infected_label: LabelVector,
    ) -> Result<Self> {
        if infected_label.count_ones() != 1 {
            return Err(Error::InvalidConfig(format!(
                "infected label must have exactly one set bit, got {}",
                infected_label.count_ones()
            )));
        }
        Ok(Sample {
            id,
            image,
            true_label,
            infected_label: Some(infected_label),
            is_infected: true,
        })
    }

    /// The label a model trains on: the attacker's label for tampered
    /// samples, the ground truth otherwise.
    pub fn training_label(&self) -> &LabelVector {
        self.infected_label.as_ref().unwrap_or(&self.true_label)
    }
}

/// Ordered collection of samples sharing image dims and class count.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<F> {
    pub name: String,
    pub num_classes: usize,
    pub width: usize,
    pub height: usize,
    pub samples: Vec<Sample<F>>,
}

impl<F: Scalar> Dataset<F> {
    pub fn new(name: impl Into<String>, num_classes: usize, width: usize, height: usize) -> Self {
        Dataset {
            name: name.into(),
            num_classes,
            width,
            height,
            samples: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn push(&mut self, sample: Sample<F>) -> Result<()> {
        self.check_sample(&sample)?;
        self.samples.push(sample);
        Ok(())
    }

    fn check_sample(&self, sample: &Sample<F>) -> Result<()> {
        if sample.image.width() != self.width || sample.image.height() != self.height {
            return Err(Error::ShapeMismatch(format!(
                "sample {} is {}x{}, dataset is {}x{}",
                sample.id,
                sample.image.width(),
                sample.image.height(),
                self.width,
                self.height
            )));
        }
        if sample.true_label.len() != self.num_classes {
            return Err(Error::ShapeMismatch(format!(
                "sample {} has {} label bits, dataset has {} classes",
                sample.id,
                sample.true_label.len(),
                self.num_classes
            )));
        }
        if let Some(inf) = &sample.infected_label {
            if inf.len() != self.num_classes {
                return Err(Error::ShapeMismatch(format!(
                    "sample {} infected label has {} bits, dataset has {} classes",
                    sample.id,
                    inf.len(),
                    self.num_classes
                )));
            }
        }
        if sample.is_infected != sample.infected_label.is_some() {
            return Err(Error::InvalidConfig(format!(
                "sample {}: infection flag and infected label disagree",
                sample.id
            )));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in &self.samples {
            self.check_sample(s)?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(())
    }
}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub num_classes: usize,
    pub width: usize,
    pub height: usize,
    /// Per-class Bernoulli probability of the label bit being set.
    pub class_prevalence: Vec<f64>,
    /// Std-dev of the additive Gaussian pixel noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl SynthConfig {
    /// Uniform prevalence across classes.
    pub fn uniform(
        num_samples: usize,
        num_classes: usize,
        width: usize,
        height: usize,
        prevalence: f64,
        noise_std: f64,
        seed: u64,
    ) -> Self {
        SynthConfig {
            num_samples,
            num_classes,
            width,
            height,
            class_prevalence: vec![prevalence; num_classes],
            noise_std,
            seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidConfig("image dims must be positive".into()));
        }
        if self.num_classes == 0 {
            return Err(Error::InvalidConfig("need at least one class".into()));
        }
        if self.class_prevalence.len() != self.num_classes {
            return Err(Error::InvalidConfig(format!(
                "{} prevalence entries for {} classes",
                self.class_prevalence.len(),
                self.num_classes
            )));
        }
        if self
            .class_prevalence
            .iter()
            .any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0)
        {
            return Err(Error::InvalidConfig(
                "class prevalence must lie in [0, 1]".into(),
            ));
        }
        if !self.noise_std.is_finite() || self.noise_std < 0.0 {
            return Err(Error::InvalidConfig("noise_std must be >= 0".into()));
        }
        let cells = class_cells(self.width, self.height)?;
        if self.num_classes > cells.len() {
            return Err(Error::InvalidConfig(format!(
                "{} classes but only {} pattern regions fit in {}x{}",
                self.num_classes,
                cells.len(),
                self.width,
                self.height
            )));
        }
        Ok(())
    }
}

/// Background intensity of every generated image.
const BACKGROUND: f64 = 0.5;
/// Side lengths of the corner and edge-midpoint pattern regions.
const CORNER_CELL: usize = 5;
const MID_CELL: usize = 4;
/// Bright / dark texture intensities. Dark is kept well above pure black so
/// no class texture resembles a black trigger patch.
const BRIGHT: f64 = 0.95;
const MID_BRIGHT: f64 = 0.90;
const DARK: f64 = 0.12;

/// Per-class pattern regions as (x0, y0, side): 5x5 cells in the four
/// corners, plus 4x4 cells at the edge midpoints for images of 16x16 and
/// up. All regions are mutually disjoint and, at the default geometry,
/// disjoint from any centered trigger up to 4x4.
fn class_cells(width: usize, height: usize) -> Result<Vec<(usize, usize, usize)>> {
    if width < CORNER_CELL + 7 || height < CORNER_CELL + 7 {
        return Err(Error::InvalidConfig(format!(
            "image dims {width}x{height} too small for class patterns (need >= {0}x{0})",
            CORNER_CELL + 7
        )));
    }
    let (r, b) = (width - CORNER_CELL - 1, height - CORNER_CELL - 1);
    let mut cells = vec![
        (1, 1, CORNER_CELL),
        (r, 1, CORNER_CELL),
        (1, b, CORNER_CELL),
        (r, b, CORNER_CELL),
    ];
    if width >= 16 && height >= 16 {
        let mx = (width - MID_CELL) / 2;
        let my = (height - MID_CELL) / 2;
        let r4 = width - MID_CELL - 1;
        let b4 = height - MID_CELL - 1;
        cells.extend_from_slice(&[
            (mx, 1, MID_CELL),
            (mx, b4, MID_CELL),
            (1, my, MID_CELL),
            (r4, my, MID_CELL),
        ]);
    }
    Ok(cells)
}

fn stamp_pattern(data: &mut [f64], width: usize, class: usize, cell: (usize, usize, usize)) {
    let (x0, y0, side) = cell;
    for dy in 0..side {
        for dx in 0..side {
            let idx = (y0 + dy) * width + (x0 + dx);
            match class % 6 {
                0 => data[idx] = BRIGHT,
                1 => data[idx] = if dy % 2 == 0 { MID_BRIGHT } else { DARK },
                2 => data[idx] = if dx % 2 == 0 { MID_BRIGHT } else { DARK },
                3 => data[idx] = if (dx + dy) % 2 == 0 { MID_BRIGHT } else { DARK },
                4 => {
                    if dx == 0 || dy == 0 || dx == side - 1 || dy == side - 1 {
                        data[idx] = BRIGHT;
                    }
                }
                _ => {
                    if dx == dy || dx + dy == side - 1 {
                        data[idx] = MID_BRIGHT;
                    }
                }
            }
        }
    }
}

/// Generates a reproducible dataset from the config. Intensities are
/// quantized to the 8-bit grid at creation so that persistence round-trips
/// are exact.
pub fn generate_synthetic<F: Scalar>(cfg: &SynthConfig) -> Result<Dataset<F>> {
    cfg.validate()?;
    let cells = class_cells(cfg.width, cfg.height)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut ds = Dataset::new(
        format!("synth-{}x{}-s{}", cfg.num_samples, cfg.num_classes, cfg.seed),
        cfg.num_classes,
        cfg.width,
        cfg.height,
    );
    let n_px = cfg.width * cfg.height;
    for i in 0..cfg.num_samples {
        let bits: Vec<bool> = (0..cfg.num_classes)
            .map(|c| rng.gen::<f64>() < cfg.class_prevalence[c])
            .collect();
        let mut px = vec![BACKGROUND; n_px];
        for (c, set) in bits.iter().enumerate() {
            if *set {
                stamp_pattern(&mut px, cfg.width, c, cells[c]);
            }
        }
        if cfg.noise_std > 0.0 {
            for v in px.iter_mut() {
                *v += cfg.noise_std * standard_normal(&mut rng);
            }
        }
        let data: Vec<F> = px
            .iter()
            .map(|v| F::of((v.clamp(0.0, 1.0) * 255.0).round() / 255.0))
            .collect();
        let image = Image::from_vec_unchecked(cfg.width, cfg.height, data);
        ds.push(Sample::clean(
            format!("s{i:06}"),
            image,
            LabelVector::from_bits(bits),
        ))?;
    }
    Ok(ds)
}

/// Disjoint shuffled partition into (train, test); deterministic in `seed`.
pub fn split<F: Scalar>(ds: &Dataset<F>, train_frac: f64, seed: u64) -> Result<(Dataset<F>, Dataset<F>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train_frac must lie in (0, 1), got {train_frac}"
        )));
    }
    let n = ds.len();
    let k = (train_frac * n as f64).floor() as usize;
    if k == 0 || k == n {
        return Err(Error::InvalidConfig(format!(
            "split of {n} samples at {train_frac} would leave an empty partition"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut train = Dataset::new(format!("{}-train", ds.name), ds.num_classes, ds.width, ds.height);
    let mut test = Dataset::new(format!("{}-test", ds.name), ds.num_classes, ds.width, ds.height);
    for (pos, &i) in idx.iter().enumerate() {
        let sample = ds.samples[i].clone();
        if pos < k {
            train.push(sample)?;
        } else {
            test.push(sample)?;
        }
    }
    Ok((train, test))
}

const META_FILE: &str = "meta";
const MANIFEST_FILE: &str = "manifest";

/// Writes the dataset as `meta`, `manifest` (CSV with header) and one 8-bit
/// grayscale PNG per sample.
pub fn save_dataset<F: Scalar>(ds: &Dataset<F>, dir: &Path) -> Result<()> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let meta = format!(
        "name={}\nnum_classes={}\nwidth={}\nheight={}\n",
        ds.name, ds.num_classes, ds.width, ds.height
    );
    fs::write(dir.join(META_FILE), meta)?;

    let mut wtr = csv::Writer::from_path(dir.join(MANIFEST_FILE))?;
    wtr.write_record(["id", "image", "true_bits", "infected", "infected_bits"])?;
    for s in &ds.samples {
        let file = format!("{}.png", s.id);
        wtr.write_record([
            s.id.as_str(),
            file.as_str(),
            &s.true_label.to_bitstring(),
            if s.is_infected { "1" } else { "0" },
            &s.infected_label
                .as_ref()
                .map(|l| l.to_bitstring())
                .unwrap_or_default(),
        ])?;
        let buf = image::GrayImage::from_raw(
            ds.width as u32,
            ds.height as u32,
            s.image.to_gray8(),
        )
        .expect("pixel buffer matches dims");
        buf.save(dir.join(file))?;
    }
    wtr.flush()?;
    Ok(())
}

fn meta_value<'a>(lines: &'a [(String, String)], key: &str) -> Result<&'a str> {
    lines
        .iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.as_str())
        .ok_or_else(|| Error::MalformedData(format!("meta file missing key {key}")))
}

/// Inverse of [`save_dataset`]; exact round-trip.
pub fn load_dataset<F: Scalar>(dir: &Path) -> Result<Dataset<F>> {
    let meta_text = fs::read_to_string(dir.join(META_FILE))?;
    let lines: Vec<(String, String)> = meta_text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| Error::MalformedData(format!("bad meta line {l:?}")))
        })
        .collect::<Result<_>>()?;
    let name = meta_value(&lines, "name")?.to_string();
    let parse = |key: &str| -> Result<usize> {
        meta_value(&lines, key)?
            .parse()
            .map_err(|e| Error::MalformedData(format!("meta {key}: {e}")))
    };
    let num_classes = parse("num_classes")?;
    let (width, height) = (parse("width")?, parse("height")?);

    let mut ds = Dataset::new(name, num_classes, width, height);
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(dir.join(MANIFEST_FILE))?;
    for record in rdr.records() {
        let record = record?;
        if record.len() != 5 {
            return Err(Error::MalformedData(format!(
                "manifest row has {} fields, expected 5",
                record.len()
            )));
        }
        let id = record[0].to_string();
        let img_path = dir.join(&record[1]);
        if !img_path.is_file() {
            return Err(Error::MalformedData(format!(
                "manifest lists {} but the file is missing",
                &record[1]
            )));
        }
        let img = image::open(&img_path)?.into_luma8();
        if img.width() as usize != width || img.height() as usize != height {
            return Err(Error::MalformedData(format!(
                "{}: image is {}x{}, dataset is {width}x{height}",
                &record[1],
                img.width(),
                img.height()
            )));
        }
        let image = Image::from_gray8(width, height, img.as_raw())?;
        let true_label = LabelVector::from_bitstring(&record[2])?;
        let infected = match &record[3] {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::MalformedData(format!(
                    "invalid infected flag {other:?} for sample {id}"
                )))
            }
        };
        let infected_label = if record[4].is_empty() {
            None
        } else {
            Some(LabelVector::from_bitstring(&record[4])?)
        };
        if infected != infected_label.is_some() {
            return Err(Error::MalformedData(format!(
                "sample {id}: infected flag and infected label disagree"
            )));
        }
        ds.push(Sample {
            id,
            image,
            true_label,
            infected_label,
            is_infected: infected,
        })?;
    }
    Ok(ds)
}
