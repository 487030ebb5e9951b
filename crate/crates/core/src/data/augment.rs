use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub rotation_max_deg: f64,
    pub zoom_range: (f64, f64),
    pub hflip_prob: f64,
    pub seed: u64,
}

impl Default for AugmentPolicy {
    /// No-op policy.
    fn default() -> Self {
        AugmentPolicy {
            rotation_max_deg: 0.0,
            zoom_range: (1.0, 1.0),
            hflip_prob: 0.0,
            seed: 0,
        }
    }
}

impl AugmentPolicy {
    pub fn violations(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if !(self.rotation_max_deg >= 0.0 && self.rotation_max_deg.is_finite()) {
            errs.push(format!(
                "rotation_max_deg {} must be finite and >= 0",
                self.rotation_max_deg
            ));
        }
        let (lo, hi) = self.zoom_range;
        if !(lo > 0.0 && lo <= 1.0 && 1.0 <= hi && hi.is_finite()) {
            errs.push(format!("zoom range ({lo}, {hi}) must satisfy 0 < lo <= 1 <= hi"));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            errs.push(format!("hflip_prob {} outside [0,1]", self.hflip_prob));
        }
        errs
    }

    pub fn validate(&self) -> Result<()> {
        match self.violations() {
            v if v.is_empty() => Ok(()),
            v => Err(Error::InvalidConfig(v)),
        }
    }

    pub fn is_identity(&self) -> bool {
        self.rotation_max_deg == 0.0 && self.zoom_range == (1.0, 1.0) && self.hflip_prob == 0.0
    }
}

/// Rotates by `angle_deg` (counter-clockwise) and scales by `zoom` about the
/// image centre. Each output pixel is inverse-mapped into the source and
/// sampled bilinearly, clamping to the border.
pub fn rotate_zoom(image: &Tensor<f32>, angle_deg: f64, zoom: f64) -> Tensor<f32> {
    let [c, h, w] = *image.shape() else {
        panic!("rotate_zoom expects [C,H,W], got {:?}", image.shape());
    };
    if angle_deg == 0.0 && zoom == 1.0 {
        return image.clone();
    }
    let (sin, cos) = angle_deg.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = image.data();
    let mut out = vec![0.0f32; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = ((y as f64 - cy) / zoom, (x as f64 - cx) / zoom);
            // Inverse of a counter-clockwise rotation in (row-down) image space.
            let sy = (cy + cos * dy - sin * dx).clamp(0.0, h as f64 - 1.0);
            let sx = (cx + sin * dy + cos * dx).clamp(0.0, w as f64 - 1.0);
            let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = ((sy - y0 as f64) as f32, (sx - x0 as f64) as f32);
            for ch in 0..c {
                let p = &src[ch * h * w..(ch + 1) * h * w];
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bottom = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out[(ch * h + y) * w + x] = (top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::new([c, h, w], out).expect("same shape")
}

/// Mirrors columns; an exact index permutation.
pub fn hflip(image: &Tensor<f32>) -> Tensor<f32> {
    let w = *image.shape().last().expect("image has a width");
    let mut data = image.data().to_vec();
    for row in data.chunks_exact_mut(w) {
        row.reverse();
    }
    Tensor::new(image.shape().to_vec(), data).expect("same shape")
}

/// Random rotation, zoom and flip. The draws depend only on `policy.seed`
/// and `draw_seed`, so assigning `draw_seed` by sample index keeps results
/// independent of processing order.
pub fn augment(sample: &Sample, policy: &AugmentPolicy, draw_seed: u64) -> Sample {
    if policy.is_identity() {
        return sample.clone();
    }
    let mut rng =
        ChaCha8Rng::seed_from_u64(policy.seed.rotate_left(32) ^ draw_seed.wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let max = policy.rotation_max_deg;
    let angle = if max > 0.0 { rng.random_range(-max..=max) } else { 0.0 };
    let (lo, hi) = policy.zoom_range;
    let zoom = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let flip = rng.random::<f64>() < policy.hflip_prob;
    let mut image = rotate_zoom(&sample.image, angle, zoom);
    if flip {
        image = hflip(&image);
    }
    Sample {
        image,
        label: sample.label,
        source_id: sample.source_id.clone(),
    }
}
