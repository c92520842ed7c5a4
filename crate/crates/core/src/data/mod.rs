//! Images, datasets, the labeled/unlabeled split protocol, and batch pairing.

mod io;
pub mod synth;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{FateError, Result};

pub use io::{load_dataset, load_idx, load_png_dir, read_class_names, write_idx, DataSource};

/// Row-major `height x width x channels` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub pixels: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, channels: usize, pixels: Vec<f32>) -> Result<Self> {
        if height * width * channels != pixels.len() || pixels.is_empty() {
            return Err(FateError::Shape(format!(
                "{height}x{width}x{channels} image needs {} values, got {}",
                height * width * channels,
                pixels.len()
            )));
        }
        Ok(Image {
            height,
            width,
            channels,
            pixels,
        })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f32) -> Self {
        Image {
            height,
            width,
            channels,
            pixels: vec![value; height * width * channels],
        }
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f32 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f32) {
        self.pixels[(y * self.width + x) * self.channels + c] = v;
    }

    pub fn in_unit_range(&self) -> bool {
        self.pixels.iter().all(|&v| (0.0..=1.0).contains(&v))
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub images: Vec<Image>,
    pub labels: Vec<usize>,
    pub class_names: Vec<String>,
}

impl Dataset {
    /// Checks that labels are in range and every class occurs.
    pub fn new(images: Vec<Image>, labels: Vec<usize>, class_names: Vec<String>) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(FateError::Invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        let y = class_names.len();
        let mut seen = vec![false; y];
        for (i, &l) in labels.iter().enumerate() {
            if l >= y {
                return Err(FateError::LabelOutOfRange {
                    label: l as i64,
                    classes: y,
                    index: i,
                });
            }
            seen[l] = true;
        }
        if let Some(c) = seen.iter().position(|s| !s) {
            return Err(FateError::ClassTooSmall {
                name: class_names[c].clone(),
                available: 0,
                needed: 1,
            });
        }
        Ok(Dataset {
            images,
            labels,
            class_names,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub labels_per_class: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            labels_per_class: 1,
            seed: 0,
        }
    }
}

/// Index-level partition of a training pool into labeled and unlabeled sets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SslSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub labels_per_class: usize,
    pub seed: u64,
}

/// Draws `labels_per_class` labeled samples per class; everything else is
/// unlabeled. Labeled indices are listed class by class.
pub fn make_one_shot_split(ds: &Dataset, spec: SplitSpec) -> Result<SslSplit> {
    if spec.labels_per_class == 0 {
        return Err(FateError::Invalid("labels_per_class must be at least 1".into()));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes()];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labeled = Vec::with_capacity(spec.labels_per_class * ds.num_classes());
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < spec.labels_per_class + 1 {
            return Err(FateError::ClassTooSmall {
                name: ds.class_names[c].clone(),
                available: members.len(),
                needed: spec.labels_per_class + 1,
            });
        }
        let mut picks: Vec<usize> = members
            .choose_multiple(&mut rng, spec.labels_per_class)
            .copied()
            .collect();
        picks.sort_unstable();
        labeled.extend(picks);
    }
    let mut is_labeled = vec![false; ds.len()];
    for &i in &labeled {
        is_labeled[i] = true;
    }
    let unlabeled = (0..ds.len()).filter(|&i| !is_labeled[i]).collect();
    Ok(SslSplit {
        labeled,
        unlabeled,
        labels_per_class: spec.labels_per_class,
        seed: spec.seed,
    })
}

/// One training step's worth of sample indices into the pool dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchPair {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
    pub batch_size: usize,
    pub mu: f64,
}

/// Number of unlabeled samples per step, `mu * batch_size`, which must be a
/// positive integer.
pub fn unlabeled_batch_size(batch_size: usize, mu: f64) -> Result<usize> {
    let ub = mu * batch_size as f64;
    if !(ub >= 1.0) || (ub - ub.round()).abs() > 1e-9 {
        return Err(FateError::Invalid(format!(
            "mu * B = {mu} * {batch_size} is not a positive integer"
        )));
    }
    Ok(ub.round() as usize)
}

/// Draws labeled samples with replacement and walks a shuffled permutation of
/// the unlabeled set, reshuffling once fewer than `mu * B` samples remain.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    labeled: Vec<usize>,
    unlabeled: Vec<usize>,
    batch_size: usize,
    mu: f64,
    ub: usize,
    cursor: usize,
    epoch: usize,
    rng: ChaCha8Rng,
}

impl BatchSampler {
    pub fn new(split: &SslSplit, batch_size: usize, mu: f64, seed: u64) -> Result<Self> {
        let ub = unlabeled_batch_size(batch_size, mu)?;
        if split.unlabeled.len() < ub {
            return Err(FateError::Invalid(format!(
                "unlabeled set of {} cannot fill a batch of {ub}",
                split.unlabeled.len()
            )));
        }
        if split.labeled.is_empty() && batch_size > 0 {
            return Err(FateError::Invalid("labeled set is empty".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut unlabeled = split.unlabeled.clone();
        unlabeled.shuffle(&mut rng);
        Ok(BatchSampler {
            labeled: split.labeled.clone(),
            unlabeled,
            batch_size,
            mu,
            ub,
            cursor: 0,
            epoch: 0,
            rng,
        })
    }

    /// Complete unlabeled batches per pass over the unlabeled set.
    pub fn steps_per_epoch(&self) -> usize {
        self.unlabeled.len() / self.ub
    }

    /// Index of the pass the next batch comes from.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn next_pair(&mut self) -> BatchPair {
        if self.cursor + self.ub > self.unlabeled.len() {
            self.unlabeled.shuffle(&mut self.rng);
            self.cursor = 0;
            self.epoch += 1;
        }
        let unlabeled = self.unlabeled[self.cursor..self.cursor + self.ub].to_vec();
        self.cursor += self.ub;
        let labeled = (0..self.batch_size)
            .map(|_| self.labeled[self.rng.gen_range(0..self.labeled.len())])
            .collect();
        BatchPair {
            labeled,
            unlabeled,
            batch_size: self.batch_size,
            mu: self.mu,
        }
    }
}

/// A single batch pair drawn from a fresh sampler.
pub fn sample_batch_pair(split: &SslSplit, batch_size: usize, mu: f64, seed: u64) -> Result<BatchPair> {
    Ok(BatchSampler::new(split, batch_size, mu, seed)?.next_pair())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(classes: usize, per_class: usize) -> Dataset {
        let mut images = Vec::new();
        let mut labels = Vec::new();
        for i in 0..classes * per_class {
            images.push(Image::filled(2, 2, 1, 0.0));
            labels.push(i % classes);
        }
        Dataset::new(images, labels, (0..classes).map(|c| format!("c{c}")).collect()).unwrap()
    }

    #[test]
    fn one_label_per_class() {
        let ds = toy(10, 20);
        let split = make_one_shot_split(&ds, SplitSpec::default()).unwrap();
        assert_eq!(split.labeled.len(), 10);
        assert_eq!(split.unlabeled.len(), 190);
        let again = make_one_shot_split(&ds, SplitSpec::default()).unwrap();
        assert_eq!(split.labeled, again.labeled);
    }

    #[test]
    fn two_labels_per_class() {
        let ds = toy(5, 10);
        let split = make_one_shot_split(&ds, SplitSpec { labels_per_class: 2, seed: 3 }).unwrap();
        assert_eq!(split.labeled.len(), 10);
        let mut counts = [0; 5];
        for &i in &split.labeled {
            counts[ds.labels[i]] += 1;
        }
        assert_eq!(counts, [2; 5]);
    }

    #[test]
    fn small_class_is_named() {
        let mut ds = toy(3, 4);
        ds.labels[2] = 0;
        ds.labels[5] = 0;
        ds.labels[8] = 0;
        // class 2 now has a single sample
        let err = make_one_shot_split(&ds, SplitSpec::default()).unwrap_err();
        match err {
            FateError::ClassTooSmall { name, available, .. } => {
                assert_eq!(name, "c2");
                assert_eq!(available, 1);
            }
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn batch_shapes() {
        let ds = toy(10, 10);
        let split = make_one_shot_split(&ds, SplitSpec::default()).unwrap();
        let p = sample_batch_pair(&split, 32, 1.0, 0).unwrap();
        assert_eq!((p.labeled.len(), p.unlabeled.len()), (32, 32));
        let p = sample_batch_pair(&split, 4, 16.0, 0).unwrap();
        assert_eq!((p.labeled.len(), p.unlabeled.len()), (4, 64));
        assert!(sample_batch_pair(&split, 3, 0.5, 0).is_err());
    }

    #[test]
    fn epoch_touches_each_unlabeled_once() {
        let ds = toy(5, 21);
        let split = make_one_shot_split(&ds, SplitSpec::default()).unwrap();
        let mut s = BatchSampler::new(&split, 4, 2.0, 1).unwrap();
        let mut seen = std::collections::HashSet::new();
        for _ in 0..s.steps_per_epoch() {
            for u in s.next_pair().unlabeled {
                assert!(seen.insert(u));
                assert!(!split.labeled.contains(&u));
            }
        }
        assert_eq!(s.epoch(), 0);
        s.next_pair();
        assert_eq!(s.epoch(), 1);
    }
}
