//! Training-time augmentation: flips, in-plane 90-degree rotations,
//! zoom and additive Gaussian noise.
//!
//! Spatial transforms are applied identically to image and labels
//! (labels via nearest-neighbour lookup, so ids are preserved); noise
//! touches the image only.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::sample::TrainingPatch;
use super::{row_major_strides, LabelMap};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    pub flip: bool,
    pub rotate90: bool,
    /// Uniform zoom factor range; must contain 1.0.
    pub zoom: (f64, f64),
    pub gaussian_noise_std: f64,
}

impl AugmentPolicy {
    pub fn off() -> Self {
        AugmentPolicy { flip: false, rotate90: false, zoom: (1.0, 1.0), gaussian_noise_std: 0.0 }
    }

    /// Scratch-training preset: 90-degree rotations, noise and zoom.
    pub fn scratch_default() -> Self {
        AugmentPolicy { flip: false, rotate90: true, zoom: (0.9, 1.1), gaussian_noise_std: 0.05 }
    }

    /// Fine-tuning preset: noise and zoom only.
    pub fn finetune_default() -> Self {
        AugmentPolicy { flip: false, rotate90: false, zoom: (0.9, 1.1), gaussian_noise_std: 0.05 }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.zoom;
        if !(lo.is_finite() && hi.is_finite() && lo > 0.0 && lo <= hi) {
            return Err(Error::Config(format!("bad zoom range ({lo}, {hi})")));
        }
        if !(lo <= 1.0 && 1.0 <= hi) {
            return Err(Error::Config(format!("zoom range ({lo}, {hi}) must contain 1.0")));
        }
        if !(self.gaussian_noise_std >= 0.0 && self.gaussian_noise_std.is_finite()) {
            return Err(Error::Config(format!("bad noise std {}", self.gaussian_noise_std)));
        }
        Ok(())
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && !self.rotate90 && self.zoom == (1.0, 1.0) && self.gaussian_noise_std == 0.0
    }
}

/// Apply one random draw of the policy to a sample.
pub fn augment<R: Rng + ?Sized>(patch: &TrainingPatch, policy: &AugmentPolicy, rng: &mut R) -> TrainingPatch {
    policy.validate().expect("augment policy validated by config");
    let mut out = patch.clone();
    if policy.flip {
        let d = out.labels.shape().len();
        for axis in 0..d {
            if rng.random::<f64>() < 0.5 {
                out = flip_axis(&out, axis);
            }
        }
    }
    if policy.rotate90 {
        let shape = out.labels.shape();
        let d = shape.len();
        let square = shape[d - 1] == shape[d - 2];
        // non-square planes only admit half turns without changing shape
        let k = if square { rng.random_range(0..4usize) } else { 2 * rng.random_range(0..2usize) };
        out = rotate90_inplane(&out, k as u32);
    }
    {
        let (lo, hi) = policy.zoom;
        let z = if lo == hi { lo } else { rng.random_range(lo..=hi) };
        if z != 1.0 {
            out = zoom(&out, z);
        }
    }
    if policy.gaussian_noise_std > 0.0 {
        let std = policy.gaussian_noise_std;
        for v in out.image.data_mut() {
            *v += f32::standard_normal(rng) * std as f32;
        }
    }
    out
}

fn map_voxels(patch: &TrainingPatch, f: impl Fn(&[usize], &[usize]) -> Vec<usize>) -> TrainingPatch {
    let shape = patch.labels.shape().to_vec();
    let d = shape.len();
    let plane: usize = shape.iter().product();
    let strides = row_major_strides(&shape);
    let channels = patch.image.shape()[0];

    let mut image = vec![0.0f32; channels * plane];
    let mut labels = vec![0u16; plane];
    let mut coords = vec![0usize; d];
    for (out_flat, slot) in labels.iter_mut().enumerate() {
        let mut rem = out_flat;
        for a in (0..d).rev() {
            coords[a] = rem % shape[a];
            rem /= shape[a];
        }
        let src = f(&coords, &shape);
        let src_flat: usize = src.iter().zip(&strides).map(|(c, s)| c * s).sum();
        *slot = patch.labels.data()[src_flat];
        for c in 0..channels {
            image[c * plane + out_flat] = patch.image.data()[c * plane + src_flat];
        }
    }
    TrainingPatch {
        image: Tensor::new(patch.image.shape().to_vec(), image).expect("shape preserved"),
        labels: LabelMap::new(shape, labels).expect("shape preserved"),
    }
}

fn flip_axis(patch: &TrainingPatch, axis: usize) -> TrainingPatch {
    map_voxels(patch, |coords, shape| {
        let mut src = coords.to_vec();
        src[axis] = shape[axis] - 1 - coords[axis];
        src
    })
}

/// Rotate by `k` quarter turns in the plane of the last two spatial
/// axes. Four turns compose to the identity.
pub fn rotate90_inplane(patch: &TrainingPatch, k: u32) -> TrainingPatch {
    let k = k % 4;
    if k == 0 {
        return patch.clone();
    }
    let shape = patch.labels.shape();
    let d = shape.len();
    let (rows, cols) = (shape[d - 2], shape[d - 1]);
    assert!(
        k % 2 == 0 || rows == cols,
        "quarter turns on a non-square plane would change the shape"
    );
    map_voxels(patch, |coords, shape| {
        let mut src = coords.to_vec();
        let (r, c) = (coords[d - 2], coords[d - 1]);
        match k {
            1 => {
                src[d - 2] = c;
                src[d - 1] = shape[d - 2] - 1 - r;
            }
            2 => {
                src[d - 2] = shape[d - 2] - 1 - r;
                src[d - 1] = shape[d - 1] - 1 - c;
            }
            3 => {
                src[d - 2] = shape[d - 1] - 1 - c;
                src[d - 1] = r;
            }
            _ => unreachable!(),
        }
        src
    })
}

/// Scale about the patch center by `factor`, keeping the original
/// extent: image by multilinear interpolation, labels by nearest
/// neighbour, out-of-range regions zero.
fn zoom(patch: &TrainingPatch, factor: f64) -> TrainingPatch {
    let shape = patch.labels.shape().to_vec();
    let d = shape.len();
    let plane: usize = shape.iter().product();
    let strides = row_major_strides(&shape);
    let channels = patch.image.shape()[0];

    let mut image = vec![0.0f32; channels * plane];
    let mut labels = vec![0u16; plane];
    let mut coords = vec![0usize; d];
    let mut src = vec![0.0f64; d];
    'voxels: for (out_flat, slot) in labels.iter_mut().enumerate() {
        let mut rem = out_flat;
        for a in (0..d).rev() {
            coords[a] = rem % shape[a];
            rem /= shape[a];
        }
        for a in 0..d {
            let center = (shape[a] as f64 - 1.0) / 2.0;
            src[a] = center + (coords[a] as f64 - center) / factor;
            if src[a] < 0.0 || src[a] > shape[a] as f64 - 1.0 {
                continue 'voxels; // outside: zero image, background label
            }
        }
        let mut near = 0usize;
        for a in 0..d {
            near += (src[a].round() as usize).min(shape[a] - 1) * strides[a];
        }
        *slot = patch.labels.data()[near];
        for c in 0..channels {
            let row = &patch.image.data()[c * plane..(c + 1) * plane];
            image[c * plane + out_flat] = interp(row, &shape, &strides, &src) as f32;
        }
    }
    TrainingPatch {
        image: Tensor::new(patch.image.shape().to_vec(), image).expect("shape preserved"),
        labels: LabelMap::new(shape, labels).expect("shape preserved"),
    }
}

fn interp(row: &[f32], shape: &[usize], strides: &[usize], src: &[f64]) -> f64 {
    let d = shape.len();
    let mut acc = 0.0f64;
    for corner in 0..(1usize << d) {
        let mut weight = 1.0f64;
        let mut flat = 0usize;
        for a in 0..d {
            let f = src[a].floor();
            let lo = (f as usize).min(shape[a] - 1);
            let frac = src[a] - f;
            let up = (corner >> a) & 1 == 1;
            let idx = if up { (lo + 1).min(shape[a] - 1) } else { lo };
            weight *= if up { frac } else { 1.0 - frac };
            flat += idx * strides[a];
        }
        if weight != 0.0 {
            acc += weight * row[flat] as f64;
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn demo_patch() -> TrainingPatch {
        let image = Tensor::new(vec![1, 4, 4], (0..16).map(|i| i as f32).collect()).unwrap();
        let labels = LabelMap::new(vec![4, 4], (0..16).map(|i| (i % 3) as u16).collect()).unwrap();
        TrainingPatch { image, labels }
    }

    #[test]
    fn all_off_policy_is_identity() {
        let p = demo_patch();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = augment(&p, &AugmentPolicy::off(), &mut rng);
        assert_eq!(out.image.data(), p.image.data());
        assert_eq!(out.labels.data(), p.labels.data());
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        let p = demo_patch();
        let mut cur = p.clone();
        for _ in 0..4 {
            cur = rotate90_inplane(&cur, 1);
        }
        assert_eq!(cur.image.data(), p.image.data());
        assert_eq!(cur.labels.data(), p.labels.data());
        // and directly: k=4 == k=0
        let whole = rotate90_inplane(&p, 4);
        assert_eq!(whole.image.data(), p.image.data());
    }

    #[test]
    fn zoom_one_noise_zero_is_identity() {
        let p = demo_patch();
        let policy = AugmentPolicy { flip: false, rotate90: false, zoom: (1.0, 1.0), gaussian_noise_std: 0.0 };
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let out = augment(&p, &policy, &mut rng);
        assert_eq!(out.image.data(), p.image.data());
    }

    #[test]
    fn transforms_keep_label_ids() {
        let p = demo_patch();
        let policy = AugmentPolicy { flip: true, rotate90: true, zoom: (0.8, 1.2), gaussian_noise_std: 0.1 };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let out = augment(&p, &policy, &mut rng);
            assert!(out.labels.data().iter().all(|&v| v <= 2));
            assert_eq!(out.labels.shape(), p.labels.shape());
        }
    }

    #[test]
    fn double_flip_is_identity() {
        let p = demo_patch();
        let once = flip_axis(&p, 1);
        let twice = flip_axis(&once, 1);
        assert_eq!(twice.image.data(), p.image.data());
    }

    #[test]
    fn zoom_range_must_contain_one() {
        let policy = AugmentPolicy { flip: false, rotate90: false, zoom: (1.1, 1.3), gaussian_noise_std: 0.0 };
        assert!(policy.validate().is_err());
    }
}
