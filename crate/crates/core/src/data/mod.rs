//! Datasets, preprocessing, augmentation and batching.

pub mod augment;
pub mod baseline;
pub mod batch;
pub mod gtsrb;
pub mod resize;
pub mod split;
pub mod synth;

pub use augment::{augment, hflip, rotate_zoom, AugmentPolicy};
pub use baseline::NearestCentroid;
pub use batch::{batch_iter, epoch_order, BatchIter, LabeledBatch};
pub use gtsrb::{load_gtsrb_dir, load_splits, LoadReport, LoadedSplits};
pub use resize::resize_bilinear;
pub use split::SplitManifest;
pub use synth::{synth_shapes, synth_splits};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `[3,R,R]`, values in `[0,1]`.
    pub image: Tensor<f32>,
    pub label: usize,
    pub source_id: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    pub class_names: Vec<String>,
    pub resolution: usize,
}

impl Dataset {
    /// Checks the sample invariants: label range, `[3,R,R]` shape, pixel range.
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>, resolution: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("dataset has no samples"));
        }
        for s in &samples {
            if s.label >= class_names.len() {
                return Err(Error::invalid(format!(
                    "sample {} has label {} but there are {} classes",
                    s.source_id,
                    s.label,
                    class_names.len()
                )));
            }
            if s.image.shape() != [3, resolution, resolution] {
                return Err(Error::invalid(format!(
                    "sample {} has shape {:?}, expected [3,{resolution},{resolution}]",
                    s.source_id,
                    s.image.shape()
                )));
            }
            if s.image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!(
                    "sample {} has pixels outside [0,1]",
                    s.source_id
                )));
            }
        }
        Ok(Dataset {
            samples,
            class_names,
            resolution,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes()];
        for s in &self.samples {
            counts[s.label] += 1;
        }
        counts
    }

    /// FNV-1a over source ids, labels and pixel bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        for s in &self.samples {
            eat(s.source_id.as_bytes());
            eat(&(s.label as u64).to_le_bytes());
            for v in s.image.data() {
                eat(&v.to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Labels shuffled across samples, destroying any image/label relation
    /// while keeping the class histogram.
    pub fn with_permuted_labels(&self, seed: u64) -> Dataset {
        let mut labels = self.labels();
        labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut out = self.clone();
        for (s, l) in out.samples.iter_mut().zip(labels) {
            s.label = l;
        }
        out
    }

    /// A label permutation that also spreads every true class evenly over
    /// the new labels. A plain shuffle leaves chance imbalances (one shape
    /// labelled "disk" 40 times, "triangle" 30 times), which a model that
    /// separates shapes turns into a fixed shape-to-label map and an
    /// accuracy far from chance. Dealing the labels round-robin removes
    /// that residual signal; the class histogram is kept exactly.
    pub fn with_decorrelated_labels(&self, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pools: Vec<Vec<usize>> = vec![Vec::new(); self.num_classes()];
        for s in &self.samples {
            pools[s.label].push(s.label);
        }
        // Interleave the label multiset: 0,1,2,0,1,2,... while counts last.
        let mut dealt = Vec::with_capacity(self.len());
        while dealt.len() < self.len() {
            for pool in pools.iter_mut() {
                if let Some(l) = pool.pop() {
                    dealt.push(l);
                }
            }
        }
        // Visit samples grouped by true class, in random order within a class.
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut rng);
        order.sort_by_key(|&i| self.samples[i].label);
        let mut out = self.clone();
        for (&i, l) in order.iter().zip(dealt) {
            out.samples[i].label = l;
        }
        out
    }

    /// Keeps only `classes` (relabelled `0..classes.len()` in the given order)
    /// and at most `per_class` samples of each, in original order.
    pub fn select_classes(&self, classes: &[usize], per_class: Option<usize>) -> Result<Dataset> {
        let mut taken = vec![0; classes.len()];
        let samples = self
            .samples
            .iter()
            .filter_map(|s| {
                let new = classes.iter().position(|&c| c == s.label)?;
                if per_class.is_some_and(|cap| taken[new] >= cap) {
                    return None;
                }
                taken[new] += 1;
                Some(Sample {
                    label: new,
                    ..s.clone()
                })
            })
            .collect();
        let names = classes
            .iter()
            .map(|&c| {
                self.class_names
                    .get(c)
                    .cloned()
                    .ok_or_else(|| Error::invalid(format!("class {c} does not exist")))
            })
            .collect::<Result<Vec<_>>>()?;
        Dataset::new(samples, names, self.resolution)
    }

    /// Stacks the given samples into `[B,3,R,R]`.
    pub fn stack(&self, indices: &[usize]) -> Result<Tensor<f32>> {
        let r = self.resolution;
        let mut data = Vec::with_capacity(indices.len() * 3 * r * r);
        for &i in indices {
            data.extend_from_slice(self.samples[i].image.data());
        }
        Tensor::new([indices.len(), 3, r, r], data)
    }
}
