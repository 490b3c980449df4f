//! Synthetic chest-slice phantoms with three classes and lesion masks.
//!
//! Every phantom is a dark field with two bright elliptical lungs and
//! Gaussian noise. NP slices stop there. CAP slices add a few small
//! sharp-edged, very bright discs. COVID slices add soft Gaussian blobs of
//! moderate intensity whose half-maximum support (clipped to the lungs) is
//! the lesion mask.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, RngExt};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::INPUT_MULTIPLE;
use crate::seeds;

pub const BACKGROUND: f64 = 0.05;
pub const NOISE_SIGMA: f64 = 0.02;
const SPLIT_STREAM: u64 = 0x5711;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    Np,
    Cap,
    Covid,
}

impl Class {
    pub const ALL: [Class; 3] = [Class::Np, Class::Cap, Class::Covid];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Class> {
        Class::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Class::Np => "np",
            Class::Cap => "cap",
            Class::Covid => "covid",
        }
    }
}

impl fmt::Display for Class {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Class {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Class::ALL
            .into_iter()
            .find(|c| c.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Usage(format!("unknown class {s:?} (expected np, cap or covid)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSample {
    pub id: String,
    pub size: usize,
    pub class: Class,
    /// Row-major `[size, size]` intensities in `[0,1]`.
    pub image: Vec<f64>,
    /// Binary lesion mask (0 or 1); `None` when pixel labels are withheld.
    pub mask: Option<Vec<f64>>,
    pub labelled: bool,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
}

impl Ellipse {
    fn level(&self, y: f64, x: f64) -> f64 {
        ((y - self.cy) / self.ry).powi(2) + ((x - self.cx) / self.rx).powi(2)
    }

    /// Uniform point whose level is below `max_level`.
    fn sample_inside(&self, rng: &mut impl Rng, max_level: f64) -> (f64, f64) {
        loop {
            let u: f64 = rng.random_range(-1.0..1.0);
            let v: f64 = rng.random_range(-1.0..1.0);
            if u * u + v * v <= max_level {
                return (self.cy + u * self.ry, self.cx + v * self.rx);
            }
        }
    }
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || size % INPUT_MULTIPLE != 0 {
        return Err(Error::Usage(format!("image size must be a positive multiple of {INPUT_MULTIPLE}, got {size}")));
    }
    Ok(())
}

/// Deterministic phantom for `(seed, class, size)`.
pub fn generate_phantom(seed: u64, class: Class, size: usize) -> Result<PhantomSample> {
    generate_with_lungs(seed, class, size).map(|(s, _)| s)
}

/// Pixels inside the lung fields of the phantom for the same arguments.
pub fn lung_area(seed: u64, class: Class, size: usize) -> Result<usize> {
    generate_with_lungs(seed, class, size).map(|(_, lung)| lung.iter().filter(|&&b| b).count())
}

fn generate_with_lungs(seed: u64, class: Class, size: usize) -> Result<(PhantomSample, Vec<bool>)> {
    check_size(size)?;
    let mut rng = seeds::rng(seed, &[class.index() as u64, size as u64]);
    let s = size as f64;
    // lengths below are in pixels at 64x64 and scale with the image
    let unit = s / 64.0;

    let lungs: Vec<Ellipse> = [-1.0, 1.0]
        .iter()
        .map(|side| Ellipse {
            cy: s * (0.5 + rng.random_range(-0.02..0.02)),
            cx: s * (0.5 + side * (0.22 + rng.random_range(-0.01..0.01))),
            ry: s * rng.random_range(0.28..0.32),
            rx: s * rng.random_range(0.14..0.16),
        })
        .collect();
    let lung_level = rng.random_range(0.28..0.32);

    let n = size * size;
    let mut image = vec![BACKGROUND; n];
    let mut inside = vec![false; n];
    for y in 0..size {
        for x in 0..size {
            let (py, px) = (y as f64 + 0.5, x as f64 + 0.5);
            if lungs.iter().any(|l| l.level(py, px) <= 1.0) {
                image[y * size + x] = lung_level;
                inside[y * size + x] = true;
            }
        }
    }

    let mut mask = vec![0.0; n];
    let lesions = rng.random_range(1..=4usize);
    match class {
        Class::Np => {}
        Class::Cap => {
            for _ in 0..lesions {
                let lung = &lungs[rng.random_range(0..2usize)];
                let (cy, cx) = lung.sample_inside(&mut rng, 0.5);
                let r = unit * rng.random_range(2.0..4.0);
                let level = rng.random_range(0.85..0.95);
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                        if d2 <= r * r {
                            image[y * size + x] = level;
                        }
                    }
                }
            }
        }
        Class::Covid => {
            // blobs combine by maximum so overlaps never exceed one amplitude
            let mut lesion = vec![0.0f64; n];
            for _ in 0..lesions {
                let lung = &lungs[rng.random_range(0..2usize)];
                let (cy, cx) = lung.sample_inside(&mut rng, 0.35);
                let sigma = unit * rng.random_range(1.5..3.5);
                let amp = rng.random_range(0.25..0.35);
                for y in 0..size {
                    for x in 0..size {
                        let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                        let g = (-d2 / (2.0 * sigma * sigma)).exp();
                        let i = y * size + x;
                        lesion[i] = lesion[i].max(amp * g);
                        if g >= 0.5 && inside[i] {
                            mask[i] = 1.0;
                        }
                    }
                }
            }
            image.iter_mut().zip(&lesion).for_each(|(v, l)| *v += l);
        }
    }

    let noise = Normal::new(0.0, NOISE_SIGMA).expect("valid noise sigma");
    for v in image.iter_mut() {
        *v = (*v + noise.sample(&mut rng)).clamp(0.0, 1.0);
    }

    let sample = PhantomSample {
        id: format!("{}_{seed:016x}", class.name()),
        size,
        class,
        image,
        mask: Some(mask),
        labelled: true,
    };
    Ok((sample, inside))
}

/// 3x3 mean filter with edge replication.
pub fn box_blur3(image: &[f64], size: usize) -> Vec<f64> {
    let at = |y: isize, x: isize| {
        let y = y.clamp(0, size as isize - 1) as usize;
        let x = x.clamp(0, size as isize - 1) as usize;
        image[y * size + x]
    };
    let mut out = vec![0.0; image.len()];
    for y in 0..size as isize {
        for x in 0..size as isize {
            let mut acc = 0.0;
            for dy in -1..=1 {
                for dx in -1..=1 {
                    acc += at(y + dy, x + dx);
                }
            }
            out[y as usize * size + x as usize] = acc / 9.0;
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub contrast: f64,
    pub sharpness: f64,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        contrast: 1.0,
        sharpness: 0.0,
    };

    /// Contrast factor in `[0.5, 1.5]` and sharpness in `[0, 1]`.
    pub fn sample(seed: u64) -> Self {
        let mut rng = seeds::rng(seed, &[]);
        AugmentParams {
            contrast: rng.random_range(0.5..=1.5),
            sharpness: rng.random_range(0.0..=1.0),
        }
    }
}

/// Contrast `clamp(mean + k (x - mean))` followed by sharpness
/// `clamp(x + a (x - blur3(x)))`. Masks are never touched.
pub fn augment_strong(image: &[f64], size: usize, params: AugmentParams) -> Vec<f64> {
    let mean = image.iter().sum::<f64>() / image.len() as f64;
    let contrasted: Vec<f64> = image
        .iter()
        .map(|&x| (mean + params.contrast * (x - mean)).clamp(0.0, 1.0))
        .collect();
    let blurred = box_blur3(&contrasted, size);
    contrasted
        .iter()
        .zip(&blurred)
        .map(|(&x, &b)| (x + params.sharpness * (x - b)).clamp(0.0, 1.0))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Partition {
    Labelled,
    Unlabelled,
    Test,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub labelled_train: Vec<String>,
    pub unlabelled_train: Vec<String>,
    pub test_classification: Vec<String>,
    /// COVID slices of the classification test set.
    pub test_segmentation: Vec<String>,
}

impl SplitManifest {
    pub fn partition_of(&self, id: &str) -> Option<Partition> {
        let has = |v: &Vec<String>| v.iter().any(|x| x == id);
        if has(&self.labelled_train) {
            Some(Partition::Labelled)
        } else if has(&self.unlabelled_train) {
            Some(Partition::Unlabelled)
        } else if has(&self.test_classification) {
            Some(Partition::Test)
        } else {
            None
        }
    }

    /// Training partitions and the test set share no ids, and segmentation
    /// test ids all belong to the classification test set.
    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for id in self.labelled_train.iter().chain(&self.unlabelled_train).chain(&self.test_classification) {
            if !seen.insert(id.as_str()) {
                return Err(Error::Config(format!("sample {id} appears in two partitions")));
            }
        }
        let test: HashSet<&str> = self.test_classification.iter().map(String::as_str).collect();
        if let Some(id) = self.test_segmentation.iter().find(|id| !test.contains(id.as_str())) {
            return Err(Error::Config(format!("segmentation test sample {id} is not in the test set")));
        }
        Ok(())
    }
}

/// Identifier of the `index`-th sample of a class.
pub fn sample_id(class: Class, index: usize) -> String {
    format!("{}_{index:05}", class.name())
}

/// Split `counts[c]` samples of each class into test (`test_fraction`,
/// rounded), labelled training (`labelled_fraction` of the rest, at least
/// one) and unlabelled training.
pub fn build_splits(counts: [usize; 3], labelled_fraction: f64, test_fraction: f64, seed: u64) -> Result<SplitManifest> {
    if !(labelled_fraction > 0.0 && labelled_fraction <= 1.0) {
        return Err(Error::Usage(format!("labelled fraction must lie in (0, 1], got {labelled_fraction}")));
    }
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Usage(format!("test fraction must lie in [0, 1), got {test_fraction}")));
    }
    let mut manifest = SplitManifest {
        seed,
        ..SplitManifest::default()
    };
    for class in Class::ALL {
        let n = counts[class.index()];
        let n_test = (n as f64 * test_fraction).round() as usize;
        let n_train = n - n_test;
        if n_train == 0 || (test_fraction > 0.0 && n_test == 0) {
            return Err(Error::Usage(format!("{n} {class} samples cannot fill the training and test partitions")));
        }
        let n_labelled = ((n_train as f64 * labelled_fraction).round() as usize).clamp(1, n_train);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = seeds::rng(seed, &[SPLIT_STREAM, class.index() as u64]);
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        let mut ids: Vec<String> = order.into_iter().map(|i| sample_id(class, i)).collect();
        let unlabelled = ids.split_off(n_test + n_labelled);
        let labelled = ids.split_off(n_test);
        if class == Class::Covid {
            manifest.test_segmentation.extend(ids.iter().cloned());
        }
        manifest.test_classification.extend(ids);
        manifest.labelled_train.extend(labelled);
        manifest.unlabelled_train.extend(unlabelled);
    }
    for list in [
        &mut manifest.labelled_train,
        &mut manifest.unlabelled_train,
        &mut manifest.test_classification,
        &mut manifest.test_segmentation,
    ] {
        list.sort();
    }
    Ok(manifest)
}

/// A generated or loaded dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub size: usize,
    pub seed: u64,
    pub labelled_fraction: f64,
    pub test_fraction: f64,
    pub manifest: SplitManifest,
    /// Sorted by id.
    pub samples: Vec<PhantomSample>,
}

impl Dataset {
    /// Generate `per_class` phantoms of each class and split them.
    pub fn generate(seed: u64, per_class: usize, size: usize, labelled_fraction: f64, test_fraction: f64) -> Result<Self> {
        check_size(size)?;
        let manifest = build_splits([per_class; 3], labelled_fraction, test_fraction, seed)?;
        let mut samples = Vec::with_capacity(3 * per_class);
        for class in Class::ALL {
            for i in 0..per_class {
                let id = sample_id(class, i);
                let mut s = generate_phantom(seeds::for_id(seed, &id), class, size)?;
                s.labelled = manifest.partition_of(&id) != Some(Partition::Unlabelled);
                if !s.labelled {
                    s.mask = None;
                }
                s.id = id;
                samples.push(s);
            }
        }
        samples.sort_by(|a, b| a.id.cmp(&b.id));
        Ok(Dataset {
            size,
            seed,
            labelled_fraction,
            test_fraction,
            manifest,
            samples,
        })
    }

    pub fn get(&self, id: &str) -> Option<&PhantomSample> {
        self.samples.binary_search_by(|s| s.id.as_str().cmp(id)).ok().map(|i| &self.samples[i])
    }

    pub fn partition(&self, ids: &[String]) -> Result<Vec<&PhantomSample>> {
        ids.iter()
            .map(|id| self.get(id).ok_or_else(|| Error::Config(format!("manifest names unknown sample {id}"))))
            .collect()
    }

    /// Check the split against the samples: every id exists, labelled and
    /// test samples carry masks, COVID test slices have lesions.
    pub fn validate(&self) -> Result<()> {
        self.manifest.validate()?;
        for s in self.partition(&self.manifest.labelled_train)?.into_iter().chain(self.partition(&self.manifest.test_classification)?) {
            if s.mask.is_none() {
                return Err(Error::Config(format!("sample {} has no mask", s.id)));
            }
        }
        if self.manifest.labelled_train.is_empty() {
            return Err(Error::Config("no labelled training samples".into()));
        }
        Ok(())
    }
}

pub mod dataset_io;
