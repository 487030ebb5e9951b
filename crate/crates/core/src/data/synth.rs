//! Procedural three-class shapes dataset: triangles, disks and rectangles of
//! random colour and size, jittered around the centre on a noisy background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const SHAPE_NAMES: [&str; 3] = ["triangle", "disk", "rectangle"];

/// Seed offset of the validation split in [`synth_splits`].
const VAL_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

/// Supersampling factor per axis for anti-aliased edges.
const SUBSAMPLES: usize = 4;

#[derive(Clone, Copy, Debug)]
enum Shape {
    /// Vertices as (y, x).
    Triangle([(f64, f64); 3]),
    Disk {
        cy: f64,
        cx: f64,
        r: f64,
    },
    Rect {
        cy: f64,
        cx: f64,
        hh: f64,
        hw: f64,
    },
}

impl Shape {
    fn contains(&self, y: f64, x: f64) -> bool {
        match *self {
            Shape::Triangle(v) => {
                let edge = |a: (f64, f64), b: (f64, f64)| (b.1 - a.1) * (y - a.0) - (b.0 - a.0) * (x - a.1);
                let (d0, d1, d2) = (edge(v[0], v[1]), edge(v[1], v[2]), edge(v[2], v[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
            Shape::Disk { cy, cx, r } => (y - cy).powi(2) + (x - cx).powi(2) <= r * r,
            Shape::Rect { cy, cx, hh, hw } => (y - cy).abs() <= hh && (x - cx).abs() <= hw,
        }
    }
}

fn random_color(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> [f64; 3] {
    [
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
        rng.random_range(lo..hi),
    ]
}

fn render(class: usize, r: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = r as f64;
    // Bright shape on a darker background: the colours vary freely, the
    // contrast polarity does not.
    let bg = random_color(rng, 0.0, 0.45);
    let fg = random_color(rng, 0.55, 1.0);
    let size = n * rng.random_range(0.24..0.32);
    let jitter = n / 8.0;
    let cy = n / 2.0 + rng.random_range(-jitter..jitter);
    let cx = n / 2.0 + rng.random_range(-jitter..jitter);
    let shape = match class {
        0 => {
            let turn = rng.random_range(-0.3..0.3f64);
            let r = size * 1.25;
            let vertex = |k: f64| {
                let a = turn + k * 2.0 * std::f64::consts::PI / 3.0;
                (cy - r * a.cos(), cx + r * a.sin())
            };
            Shape::Triangle([vertex(0.0), vertex(1.0), vertex(2.0)])
        }
        1 => Shape::Disk { cy, cx, r: size },
        _ => {
            let aspect = rng.random_range(0.7..1.0);
            let (hh, hw) = if rng.random_bool(0.5) {
                (size, size * aspect)
            } else {
                (size * aspect, size)
            };
            Shape::Rect { cy, cx, hh, hw }
        }
    };
    let noise: Vec<f64> = (0..3 * r * r).map(|_| rng.random_range(-0.08..0.08)).collect();
    let mut out = vec![0.0f32; 3 * r * r];
    let step = 1.0 / SUBSAMPLES as f64;
    for y in 0..r {
        for x in 0..r {
            let mut hits = 0;
            for sy in 0..SUBSAMPLES {
                for sx in 0..SUBSAMPLES {
                    let py = y as f64 + (sy as f64 + 0.5) * step;
                    let px = x as f64 + (sx as f64 + 0.5) * step;
                    hits += usize::from(shape.contains(py, px));
                }
            }
            let alpha = hits as f64 / (SUBSAMPLES * SUBSAMPLES) as f64;
            for c in 0..3 {
                let i = (c * r + y) * r + x;
                let v = bg[c] * (1.0 - alpha) + fg[c] * alpha + noise[i];
                out[i] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    out
}

/// `per_class` samples of each class, classes interleaved, deterministic in `seed`.
pub fn synth_shapes(num_classes: usize, per_class: usize, resolution: usize, seed: u64) -> Result<Dataset> {
    if num_classes != SHAPE_NAMES.len() {
        return Err(Error::invalid(format!(
            "synth_shapes renders exactly {} classes, got {num_classes}",
            SHAPE_NAMES.len()
        )));
    }
    if resolution < 16 {
        return Err(Error::invalid(format!(
            "synth_shapes needs resolution >= 16, got {resolution}"
        )));
    }
    if per_class == 0 {
        return Err(Error::invalid("synth_shapes needs per_class >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let samples = (0..per_class * num_classes)
        .map(|i| {
            let label = i % num_classes;
            let data = render(label, resolution, &mut rng);
            Sample {
                image: Tensor::new([3, resolution, resolution], data).expect("rendered shape"),
                label,
                source_id: format!("synth-{seed:x}-{i:05}"),
            }
        })
        .collect();
    Dataset::new(samples, SHAPE_NAMES.iter().map(|s| s.to_string()).collect(), resolution)
}

/// Train and validation sets drawn from independent streams of one seed.
pub fn synth_splits(
    train_per_class: usize,
    val_per_class: usize,
    resolution: usize,
    seed: u64,
) -> Result<(Dataset, Dataset)> {
    Ok((
        synth_shapes(3, train_per_class, resolution, seed)?,
        synth_shapes(3, val_per_class, resolution, seed ^ VAL_SEED_SALT)?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_balanced() {
        let a = synth_shapes(3, 100, 32, 4).unwrap();
        let b = synth_shapes(3, 100, 32, 4).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        assert_eq!(a.len(), 300);
        assert_eq!(a.class_counts(), vec![100, 100, 100]);
        assert_ne!(a.checksum(), synth_shapes(3, 100, 32, 5).unwrap().checksum());
    }

    #[test]
    fn splits_do_not_share_ids() {
        let (train, val) = synth_splits(5, 3, 16, 1).unwrap();
        assert!(val
            .samples
            .iter()
            .all(|v| train.samples.iter().all(|t| t.source_id != v.source_id)));
    }

    #[test]
    fn rejects_small_resolution_and_other_class_counts() {
        assert!(synth_shapes(3, 1, 8, 0).is_err());
        assert!(synth_shapes(4, 1, 32, 0).is_err());
    }
}
