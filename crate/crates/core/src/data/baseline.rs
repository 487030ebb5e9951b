use super::Dataset;
use crate::error::{Error, Result};

/// Per-class mean image on raw pixels; predicts the class whose mean is
/// nearest in Euclidean distance.
#[derive(Clone, Debug)]
pub struct NearestCentroid {
    centroids: Vec<Vec<f64>>,
}

impl NearestCentroid {
    pub fn fit(train: &Dataset) -> Result<Self> {
        let dim = train.samples[0].image.numel();
        let mut sums = vec![vec![0.0f64; dim]; train.num_classes()];
        let counts = train.class_counts();
        for s in &train.samples {
            for (acc, &v) in sums[s.label].iter_mut().zip(s.image.data()) {
                *acc += f64::from(v);
            }
        }
        if counts.contains(&0) {
            return Err(Error::invalid("every class needs at least one training sample"));
        }
        for (sum, &n) in sums.iter_mut().zip(&counts) {
            sum.iter_mut().for_each(|v| *v /= n as f64);
        }
        Ok(NearestCentroid { centroids: sums })
    }

    pub fn predict(&self, pixels: &[f32]) -> usize {
        let dist = |c: &[f64]| -> f64 { c.iter().zip(pixels).map(|(a, &b)| (a - f64::from(b)).powi(2)).sum() };
        let mut best = (0, f64::INFINITY);
        for (k, c) in self.centroids.iter().enumerate() {
            let d = dist(c);
            if d < best.1 {
                best = (k, d);
            }
        }
        best.0
    }

    pub fn accuracy(&self, data: &Dataset) -> f64 {
        let hits = data
            .samples
            .iter()
            .filter(|s| self.predict(s.image.data()) == s.label)
            .count();
        hits as f64 / data.len() as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::synth_splits;

    #[test]
    fn raw_pixels_do_not_solve_the_shapes() {
        let (train, val) = synth_splits(100, 30, 32, 0).unwrap();
        let acc = NearestCentroid::fit(&train).unwrap().accuracy(&val);
        assert!(acc < 0.95, "nearest-centroid val accuracy {acc}");
        assert!(acc > 0.2, "nearest-centroid val accuracy {acc}");
    }
}
