use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct LabeledBatch {
    /// `[B,3,R,R]`
    pub images: Tensor<f32>,
    pub labels: Vec<usize>,
    /// Positions in the source dataset.
    pub indices: Vec<usize>,
    pub source_ids: Vec<String>,
}

/// Sample order for one epoch; a pure function of `(n, seed, epoch)`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    order.shuffle(&mut rng);
    order
}

pub struct BatchIter<'a> {
    dataset: &'a Dataset,
    order: Vec<usize>,
    batch_size: usize,
    pos: usize,
}

impl Iterator for BatchIter<'_> {
    type Item = LabeledBatch;

    fn next(&mut self) -> Option<LabeledBatch> {
        if self.pos >= self.order.len() {
            return None;
        }
        let end = (self.pos + self.batch_size).min(self.order.len());
        let indices = self.order[self.pos..end].to_vec();
        self.pos = end;
        Some(LabeledBatch {
            images: self.dataset.stack(&indices).expect("dataset samples share one shape"),
            labels: indices.iter().map(|&i| self.dataset.samples[i].label).collect(),
            source_ids: indices
                .iter()
                .map(|&i| self.dataset.samples[i].source_id.clone())
                .collect(),
            indices,
        })
    }
}

/// Shuffled batches covering every sample once; the last batch may be short.
/// `shuffle_seed == None` keeps dataset order.
pub fn batch_iter(dataset: &Dataset, batch_size: usize, shuffle_seed: Option<(u64, u64)>) -> Result<BatchIter<'_>> {
    if batch_size == 0 {
        return Err(Error::invalid("batch_size must be >= 1"));
    }
    let order = match shuffle_seed {
        Some((seed, epoch)) => epoch_order(dataset.len(), seed, epoch),
        None => (0..dataset.len()).collect(),
    };
    Ok(BatchIter {
        dataset,
        order,
        batch_size,
        pos: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Sample;

    fn dataset(n: usize) -> Dataset {
        let samples = (0..n)
            .map(|i| Sample {
                image: Tensor::full([3, 2, 2], 0.5f32).unwrap(),
                label: i % 2,
                source_id: format!("id{i}"),
            })
            .collect();
        Dataset::new(samples, vec!["a".into(), "b".into()], 2).unwrap()
    }

    #[test]
    fn twelve_by_five() {
        let d = dataset(12);
        let sizes: Vec<usize> = batch_iter(&d, 5, Some((1, 0)))
            .unwrap()
            .map(|b| b.labels.len())
            .collect();
        assert_eq!(sizes, vec![5, 5, 2]);
        assert!(batch_iter(&d, 0, None).is_err());
    }

    #[test]
    fn seeded_order_is_reproducible_and_varies_by_epoch() {
        let d = dataset(30);
        let ids = |seed, epoch| -> Vec<String> {
            batch_iter(&d, 7, Some((seed, epoch)))
                .unwrap()
                .flat_map(|b| b.source_ids)
                .collect()
        };
        assert_eq!(ids(3, 0), ids(3, 0));
        assert_ne!(ids(3, 0), ids(3, 1));
    }

    proptest::proptest! {
        #[test]
        fn every_sample_once_per_epoch(n in 1usize..60, bs in 1usize..17, seed: u64, epoch in 0u64..5) {
            let d = dataset(n);
            let mut seen: Vec<usize> = batch_iter(&d, bs, Some((seed, epoch))).unwrap().flat_map(|b| b.indices).collect();
            seen.sort_unstable();
            proptest::prop_assert_eq!(seen, (0..n).collect::<Vec<_>>());
        }
    }
}
