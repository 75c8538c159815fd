//! Per-image transforms: pixel permutations, rotations, label remapping.

use super::{IMAGE_DIM, IMAGE_SIDE};
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

/// A bijection on pixel indices `0..784`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation(Vec<u32>);

impl Permutation {
    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }

    /// Applies the permutation: `out[i] = input[perm[i]]`.
    pub fn apply(&self, input: &[f32], out: &mut [f32]) {
        debug_assert_eq!(input.len(), IMAGE_DIM);
        for (dst, &src) in out.iter_mut().zip(self.0.iter()) {
            *dst = input[src as usize];
        }
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0u32; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p as usize] = i as u32;
        }
        Permutation(inv)
    }
}

/// Seeded pixel permutation; same seed gives the same bijection on every
/// platform (integer-only Fisher-Yates over SplitMix64).
pub fn make_permutation(seed: u64) -> Permutation {
    let mut idx: Vec<u32> = (0..IMAGE_DIM as u32).collect();
    SplitMix64::new(seed).shuffle(&mut idx);
    Permutation(idx)
}

/// Rotates a 28x28 image counter-clockwise by `angle_degrees` around the
/// image center (13.5, 13.5), sampling with bilinear interpolation. Source
/// samples outside the image are 0; outputs are clamped to `[0, 1]`.
pub fn rotate_image(input: &[f32], angle_degrees: f64) -> Result<Vec<f32>> {
    if input.len() != IMAGE_DIM {
        return Err(Error::Consistency(format!(
            "expected {IMAGE_DIM} pixels, got {}",
            input.len()
        )));
    }
    if !(0.0..360.0).contains(&angle_degrees) {
        return Err(Error::Config(format!(
            "rotation angle {angle_degrees} outside [0, 360)"
        )));
    }
    if angle_degrees == 0.0 {
        return Ok(input.to_vec());
    }
    let theta = angle_degrees.to_radians();
    let (sin, cos) = theta.sin_cos();
    let center = (IMAGE_SIDE as f64 - 1.0) / 2.0;

    let mut out = vec![0.0f32; IMAGE_DIM];
    for r in 0..IMAGE_SIDE {
        for c in 0..IMAGE_SIDE {
            // Inverse-rotate the output coordinate to find its source sample.
            let y = r as f64 - center;
            let x = c as f64 - center;
            let src_x = cos * x + sin * y + center;
            let src_y = -sin * x + cos * y + center;
            out[r * IMAGE_SIDE + c] = bilinear(input, src_y, src_x).clamp(0.0, 1.0);
        }
    }
    Ok(out)
}

fn bilinear(img: &[f32], y: f64, x: f64) -> f32 {
    let y0 = y.floor();
    let x0 = x.floor();
    let dy = (y - y0) as f32;
    let dx = (x - x0) as f32;
    let sample = |yy: f64, xx: f64| -> f32 {
        if yy < 0.0 || xx < 0.0 || yy >= IMAGE_SIDE as f64 || xx >= IMAGE_SIDE as f64 {
            0.0
        } else {
            img[yy as usize * IMAGE_SIDE + xx as usize]
        }
    };
    let v00 = sample(y0, x0);
    let v01 = sample(y0, x0 + 1.0);
    let v10 = sample(y0 + 1.0, x0);
    let v11 = sample(y0 + 1.0, x0 + 1.0);
    (v00 * (1.0 - dx) + v01 * dx) * (1.0 - dy) + (v10 * (1.0 - dx) + v11 * dx) * dy
}

/// Maps the target class to 1 and every other class to 0.
pub fn relabel_one_vs_rest(labels: &[u8], target_class: u8) -> Vec<u8> {
    labels.iter().map(|&l| u8::from(l == target_class)).collect()
}
