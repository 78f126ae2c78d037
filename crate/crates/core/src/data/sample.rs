//! Patch sampling with a configurable positive-to-negative ratio.

use rand::Rng;

use super::{row_major_strides, LabelMap, VolumeBundle};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One training sample: an image patch and the matching label patch.
#[derive(Debug, Clone)]
pub struct TrainingPatch {
    /// `[C, patch...]`
    pub image: Tensor<f32>,
    /// `[patch...]`
    pub labels: LabelMap,
}

/// Draws patches from one volume. A draw is "positive" with probability
/// `pos_fraction`; its center voxel is then uniform over the foreground,
/// otherwise uniform over the whole volume. Windows reaching outside the
/// volume are zero-padded.
pub struct PatchSampler<'a> {
    bundle: &'a VolumeBundle,
    patch: Vec<usize>,
    pos_fraction: f64,
    foreground: Vec<usize>,
    warned_empty: std::cell::Cell<bool>,
}

impl<'a> PatchSampler<'a> {
    pub fn new(bundle: &'a VolumeBundle, patch: &[usize], pos_fraction: f64) -> Result<Self> {
        let d = bundle.spatial_shape().len();
        if patch.len() != d {
            return Err(Error::Shape(format!(
                "{}-entry patch for a {}-axis volume",
                patch.len(),
                d
            )));
        }
        if patch.iter().any(|&p| p == 0) {
            return Err(Error::Config(format!("zero patch extent in {:?}", patch)));
        }
        if !(0.0..=1.0).contains(&pos_fraction) {
            return Err(Error::Config(format!("positive fraction {} outside [0, 1]", pos_fraction)));
        }
        let foreground: Vec<usize> = bundle
            .labels
            .data()
            .iter()
            .enumerate()
            .filter_map(|(i, &v)| (v > 0).then_some(i))
            .collect();
        Ok(PatchSampler {
            bundle,
            patch: patch.to_vec(),
            pos_fraction,
            foreground,
            warned_empty: std::cell::Cell::new(false),
        })
    }

    /// 3:1 positive-to-negative ratio.
    pub fn default_pos_fraction() -> f64 {
        0.75
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> TrainingPatch {
        let spatial = self.bundle.spatial_shape();
        let d = spatial.len();
        let positive = rng.random::<f64>() < self.pos_fraction;
        let center: Vec<usize> = if positive && !self.foreground.is_empty() {
            let flat = self.foreground[rng.random_range(0..self.foreground.len())];
            let mut rem = flat;
            let mut coords = vec![0usize; d];
            for a in (0..d).rev() {
                coords[a] = rem % spatial[a];
                rem /= spatial[a];
            }
            coords
        } else {
            if positive && !self.warned_empty.replace(true) {
                log::warn!("volume has no foreground; sampling negatives only");
            }
            (0..d).map(|a| rng.random_range(0..spatial[a])).collect()
        };
        self.extract(&center)
    }

    /// Copy the window centered at `center`, zero-padding out-of-range
    /// regions.
    pub fn extract(&self, center: &[usize]) -> TrainingPatch {
        let spatial = self.bundle.spatial_shape();
        let d = spatial.len();
        let start: Vec<isize> = (0..d).map(|a| center[a] as isize - (self.patch[a] / 2) as isize).collect();

        let channels = self.bundle.channels();
        let out_plane: usize = self.patch.iter().product();
        let in_plane: usize = spatial.iter().product();
        let in_strides = row_major_strides(spatial);

        let mut image = vec![0.0f32; channels * out_plane];
        let mut labels = vec![0u16; out_plane];
        let img = self.bundle.image.data();
        let lab = self.bundle.labels.data();

        let mut coords = vec![0usize; d];
        'voxels: for (out_flat, slot) in labels.iter_mut().enumerate() {
            let mut rem = out_flat;
            let mut in_flat = 0usize;
            for a in (0..d).rev() {
                coords[a] = rem % self.patch[a];
                rem /= self.patch[a];
            }
            for a in 0..d {
                let src = start[a] + coords[a] as isize;
                if src < 0 || src >= spatial[a] as isize {
                    continue 'voxels; // stays zero-padded
                }
                in_flat += src as usize * in_strides[a];
            }
            *slot = lab[in_flat];
            for c in 0..channels {
                image[c * out_plane + out_flat] = img[c * in_plane + in_flat];
            }
        }

        let mut image_shape = vec![channels];
        image_shape.extend_from_slice(&self.patch);
        TrainingPatch {
            image: Tensor::new(image_shape, image).expect("consistent patch shape"),
            labels: LabelMap::new(self.patch.clone(), labels).expect("consistent patch shape"),
        }
    }
}

/// Draw `n` patches with the given positive fraction (3:1 ratio = 0.75).
pub fn sample_patches<R: Rng + ?Sized>(
    bundle: &VolumeBundle,
    patch: &[usize],
    pos_fraction: f64,
    n: usize,
    rng: &mut R,
) -> Result<Vec<TrainingPatch>> {
    let sampler = PatchSampler::new(bundle, patch, pos_fraction)?;
    Ok((0..n).map(|_| sampler.draw(rng)).collect())
}
