//! Volume preprocessing pipeline: bundle types, foreground cropping,
//! resampling, intensity normalization, dataset fingerprinting, slice
//! selection and train/validation splitting.
//!
//! The canonical preprocessing order is crop -> resample -> normalize
//! (see [`preprocess_bundle`]); every stage is deterministic given its
//! inputs.

mod augment;
pub(crate) mod bundle_io;
mod sample;

pub use augment::{augment, rotate90_inplane, AugmentPolicy};
pub use bundle_io::{load_bundle, save_bundle, BUNDLE_FORMAT_VERSION};
pub use sample::{sample_patches, PatchSampler, TrainingPatch};

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Integer label map over a spatial grid; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    shape: Vec<usize>,
    data: Vec<u16>,
}

impl LabelMap {
    pub fn new(shape: Vec<usize>, data: Vec<u16>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "label shape {:?} implies {} voxels, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(LabelMap { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        LabelMap { shape: shape.to_vec(), data: vec![0; shape.iter().product()] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[u16] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [u16] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn max_label(&self) -> u16 {
        self.data.iter().copied().max().unwrap_or(0)
    }

    pub fn foreground_count(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0).count()
    }
}

/// One study: image channels, label map, voxel spacing and label names.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeBundle {
    /// `[C, spatial...]`
    pub image: Tensor<f32>,
    /// `[spatial...]`
    pub labels: LabelMap,
    /// Millimetres per voxel along each spatial axis.
    pub spacing: Vec<f64>,
    /// Names for label ids `1..=K`.
    pub label_names: BTreeMap<u16, String>,
}

impl VolumeBundle {
    pub fn new(
        image: Tensor<f32>,
        labels: LabelMap,
        spacing: Vec<f64>,
        label_names: BTreeMap<u16, String>,
    ) -> Result<Self> {
        let bundle = VolumeBundle { image, labels, spacing, label_names };
        bundle.validate()?;
        Ok(bundle)
    }

    pub fn validate(&self) -> Result<()> {
        if self.image.shape().len() < 2 {
            return Err(Error::Shape(format!(
                "image must be [C, spatial...], got {:?}",
                self.image.shape()
            )));
        }
        let spatial = &self.image.shape()[1..];
        if spatial != self.labels.shape() {
            return Err(Error::Shape(format!(
                "image spatial dims {:?} do not match labels {:?}",
                spatial,
                self.labels.shape()
            )));
        }
        if self.spacing.len() != spatial.len() {
            return Err(Error::Shape(format!(
                "{} spacing entries for {} spatial axes",
                self.spacing.len(),
                spatial.len()
            )));
        }
        if self.spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::Data(format!("spacing must be positive, got {:?}", self.spacing)));
        }
        // label ids must form a contiguous range 0..=K described by the name table
        let k = self.label_names.len() as u16;
        for (i, &id) in self.label_names.keys().enumerate() {
            if id != i as u16 + 1 {
                return Err(Error::Data(format!(
                    "label name ids must be contiguous 1..={}, found id {}",
                    k, id
                )));
            }
        }
        if let Some(&bad) = self.labels.data().iter().find(|&&v| v > k) {
            return Err(Error::Data(format!(
                "label id {} outside declared range 0..={}",
                bad, k
            )));
        }
        Ok(())
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn spatial_shape(&self) -> &[usize] {
        &self.image.shape()[1..]
    }

    /// Foreground classes plus background.
    pub fn num_classes(&self) -> usize {
        self.label_names.len() + 1
    }
}

/// Per-axis medians of spacing and shape over a training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetFingerprint {
    pub median_spacing: Vec<f64>,
    pub median_shape: Vec<usize>,
    pub n_volumes: usize,
    pub target_spacing: Vec<f64>,
}

/// Inclusive-exclusive axis-aligned box recorded by foreground cropping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
}

impl BoundingBox {
    pub fn extents(&self) -> Vec<usize> {
        self.lo.iter().zip(&self.hi).map(|(l, h)| h - l).collect()
    }
}

/// How a bundle was transformed, sufficient to map predictions back to
/// the original geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct PreprocTrace {
    pub original_shape: Vec<usize>,
    pub original_spacing: Vec<f64>,
    pub bbox: BoundingBox,
    pub cropped_shape: Vec<usize>,
}

/// Crop image and labels to the tight bounding box of voxels with
/// intensity > 0 in any channel, expanded by `margin` and clamped.
pub fn crop_foreground(bundle: &VolumeBundle, margin: usize) -> Result<(VolumeBundle, BoundingBox)> {
    let spatial = bundle.spatial_shape().to_vec();
    let d = spatial.len();
    let plane: usize = spatial.iter().product();
    let channels = bundle.channels();

    let mut lo = vec![usize::MAX; d];
    let mut hi = vec![0usize; d];
    let img = bundle.image.data();
    let mut any = false;
    for flat in 0..plane {
        let positive = (0..channels).any(|c| img[c * plane + flat] > 0.0);
        if !positive {
            continue;
        }
        any = true;
        let mut rem = flat;
        for a in (0..d).rev() {
            let coord = rem % spatial[a];
            rem /= spatial[a];
            lo[a] = lo[a].min(coord);
            hi[a] = hi[a].max(coord + 1);
        }
    }
    if !any {
        return Err(Error::Data("no foreground: volume has no positive intensities".into()));
    }
    for a in 0..d {
        lo[a] = lo[a].saturating_sub(margin);
        hi[a] = (hi[a] + margin).min(spatial[a]);
    }
    let bbox = BoundingBox { lo, hi };
    Ok((crop_to_box(bundle, &bbox)?, bbox))
}

/// Extract the sub-volume covered by `bbox` (image and labels alike).
pub fn crop_to_box(bundle: &VolumeBundle, bbox: &BoundingBox) -> Result<VolumeBundle> {
    let spatial = bundle.spatial_shape().to_vec();
    let d = spatial.len();
    let extents = bbox.extents();
    let out_plane: usize = extents.iter().product();
    let channels = bundle.channels();

    let mut image = vec![0.0f32; channels * out_plane];
    let mut labels = vec![0u16; out_plane];
    let in_strides = row_major_strides(&spatial);
    let img = bundle.image.data();
    let lab = bundle.labels.data();
    let in_plane: usize = spatial.iter().product();

    let mut coords = vec![0usize; d];
    for (out_flat, slot) in labels.iter_mut().enumerate() {
        let mut rem = out_flat;
        for a in (0..d).rev() {
            coords[a] = rem % extents[a] + bbox.lo[a];
            rem /= extents[a];
        }
        let in_flat: usize = coords.iter().zip(&in_strides).map(|(c, s)| c * s).sum();
        *slot = lab[in_flat];
        for c in 0..channels {
            image[c * out_plane + out_flat] = img[c * in_plane + in_flat];
        }
    }

    let mut shape = vec![channels];
    shape.extend_from_slice(&extents);
    VolumeBundle::new(
        Tensor::new(shape, image)?,
        LabelMap::new(extents, labels)?,
        bundle.spacing.clone(),
        bundle.label_names.clone(),
    )
}

/// Resample to `target_spacing`: image by multilinear interpolation,
/// labels by nearest neighbour. New extent per axis is
/// `round(old_extent * old_spacing / target_spacing)`, at least 1.
pub fn resample(bundle: &VolumeBundle, target_spacing: &[f64]) -> Result<VolumeBundle> {
    let spatial = bundle.spatial_shape().to_vec();
    let d = spatial.len();
    if target_spacing.len() != d {
        return Err(Error::Shape(format!(
            "{} target spacing entries for {} axes",
            target_spacing.len(),
            d
        )));
    }
    if target_spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Config(format!("target spacing must be positive, got {:?}", target_spacing)));
    }
    if bundle.spacing == target_spacing {
        return Ok(bundle.clone());
    }

    let new_shape: Vec<usize> = (0..d)
        .map(|a| {
            let extent = (spatial[a] as f64 * bundle.spacing[a] / target_spacing[a]).round();
            (extent as usize).max(1)
        })
        .collect();

    let channels = bundle.channels();
    let in_plane: usize = spatial.iter().product();
    let out_plane: usize = new_shape.iter().product();
    let in_strides = row_major_strides(&spatial);
    let scale: Vec<f64> = (0..d).map(|a| spatial[a] as f64 / new_shape[a] as f64).collect();

    let img = bundle.image.data();
    let lab = bundle.labels.data();
    let mut image = vec![0.0f32; channels * out_plane];
    let mut labels = vec![0u16; out_plane];

    let mut coords = vec![0usize; d];
    let mut src = vec![0.0f64; d];
    for out_flat in 0..out_plane {
        let mut rem = out_flat;
        for a in (0..d).rev() {
            coords[a] = rem % new_shape[a];
            rem /= new_shape[a];
        }
        for a in 0..d {
            src[a] = ((coords[a] as f64 + 0.5) * scale[a] - 0.5).clamp(0.0, spatial[a] as f64 - 1.0);
        }
        // nearest neighbour for labels
        let mut near_flat = 0usize;
        for a in 0..d {
            near_flat += (src[a].round() as usize).min(spatial[a] - 1) * in_strides[a];
        }
        labels[out_flat] = lab[near_flat];
        // multilinear for the image
        for c in 0..channels {
            image[c * out_plane + out_flat] = interp_multilinear(&img[c * in_plane..(c + 1) * in_plane], &spatial, &in_strides, &src) as f32;
        }
    }

    let mut shape = vec![channels];
    shape.extend_from_slice(&new_shape);
    VolumeBundle::new(
        Tensor::new(shape, image)?,
        LabelMap::new(new_shape, labels)?,
        target_spacing.to_vec(),
        bundle.label_names.clone(),
    )
}

fn interp_multilinear(plane: &[f32], shape: &[usize], strides: &[usize], src: &[f64]) -> f64 {
    let d = shape.len();
    let mut lo = vec![0usize; d];
    let mut frac = vec![0.0f64; d];
    for a in 0..d {
        let f = src[a].floor();
        lo[a] = (f as usize).min(shape[a] - 1);
        frac[a] = src[a] - f;
    }
    let mut acc = 0.0f64;
    for corner in 0..(1usize << d) {
        let mut weight = 1.0f64;
        let mut flat = 0usize;
        for a in 0..d {
            let up = (corner >> a) & 1 == 1;
            let idx = if up { (lo[a] + 1).min(shape[a] - 1) } else { lo[a] };
            weight *= if up { frac[a] } else { 1.0 - frac[a] };
            flat += idx * strides[a];
        }
        if weight != 0.0 {
            acc += weight * plane[flat] as f64;
        }
    }
    acc
}

/// Z-score the non-zero voxels of each channel in place; exact zeros are
/// left untouched so background never influences the statistics.
pub fn normalize_intensity(bundle: &VolumeBundle) -> Result<VolumeBundle> {
    let mut out = bundle.clone();
    let plane: usize = bundle.spatial_shape().iter().product();
    for c in 0..bundle.channels() {
        let row = &mut out.image.data_mut()[c * plane..(c + 1) * plane];
        let nonzero: Vec<usize> = (0..plane).filter(|&i| row[i] != 0.0).collect();
        if nonzero.len() < 2 {
            log::warn!("channel {c}: fewer than 2 non-zero voxels, left unscaled");
            continue;
        }
        let n = nonzero.len() as f64;
        let mean = nonzero.iter().map(|&i| row[i] as f64).sum::<f64>() / n;
        let var = nonzero.iter().map(|&i| (row[i] as f64 - mean).powi(2)).sum::<f64>() / n;
        if var == 0.0 {
            log::warn!("channel {c}: zero variance over non-zero voxels, left unscaled");
            continue;
        }
        let std = var.sqrt();
        for &i in &nonzero {
            row[i] = ((row[i] as f64 - mean) / std) as f32;
        }
    }
    Ok(out)
}

/// The canonical pipeline: crop -> resample -> normalize.
pub fn preprocess_bundle(
    bundle: &VolumeBundle,
    target_spacing: &[f64],
    crop_margin: usize,
) -> Result<(VolumeBundle, PreprocTrace)> {
    let original_shape = bundle.spatial_shape().to_vec();
    let original_spacing = bundle.spacing.clone();
    let (cropped, bbox) = crop_foreground(bundle, crop_margin)?;
    let cropped_shape = cropped.spatial_shape().to_vec();
    let resampled = resample(&cropped, target_spacing)?;
    let normalized = normalize_intensity(&resampled)?;
    Ok((normalized, PreprocTrace { original_shape, original_spacing, bbox, cropped_shape }))
}

/// Per-axis medians over the training set. For even counts the lower of
/// the two middle values is taken.
pub fn compute_fingerprint(bundles: &[VolumeBundle]) -> Result<DatasetFingerprint> {
    if bundles.is_empty() {
        return Err(Error::Usage("fingerprint of an empty dataset".into()));
    }
    let d = bundles[0].spatial_shape().len();
    for b in bundles {
        if b.spatial_shape().len() != d {
            return Err(Error::Data(format!(
                "mixed dimensionality: {} vs {} spatial axes",
                b.spatial_shape().len(),
                d
            )));
        }
    }
    let median_spacing: Vec<f64> = (0..d)
        .map(|a| {
            let mut v: Vec<f64> = bundles.iter().map(|b| b.spacing[a]).collect();
            v.sort_by(|x, y| x.partial_cmp(y).expect("finite spacing"));
            v[(v.len() - 1) / 2]
        })
        .collect();
    let median_shape: Vec<usize> = (0..d)
        .map(|a| {
            let mut v: Vec<usize> = bundles.iter().map(|b| b.spatial_shape()[a]).collect();
            v.sort_unstable();
            v[(v.len() - 1) / 2]
        })
        .collect();
    Ok(DatasetFingerprint {
        target_spacing: median_spacing.clone(),
        median_spacing,
        median_shape,
        n_volumes: bundles.len(),
    })
}

/// Indices of slices (along the first spatial axis) that contain
/// foreground, dilated by `surround` on each side.
pub fn select_slices(bundle: &VolumeBundle, surround: usize) -> Result<Vec<usize>> {
    let shape = bundle.labels.shape();
    if shape.len() != 3 {
        return Err(Error::Usage(format!(
            "slice selection expects a 3-D volume, got {:?}",
            shape
        )));
    }
    let (depth, plane) = (shape[0], shape[1] * shape[2]);
    let lab = bundle.labels.data();
    let mut keep = vec![false; depth];
    for (i, flag) in keep.iter_mut().enumerate() {
        *flag = lab[i * plane..(i + 1) * plane].iter().any(|&v| v > 0);
    }
    let mut out = Vec::new();
    for i in 0..depth {
        if keep[i] {
            let lo = i.saturating_sub(surround);
            let hi = (i + surround + 1).min(depth);
            for j in lo..hi {
                out.push(j);
            }
        }
    }
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        log::warn!("slice selection found no foreground anywhere");
    }
    Ok(out)
}

/// Deterministic shuffled split. `|train| = round(ratio * N)`, clamped so
/// both sides keep at least one element.
pub fn split_dataset(n: usize, ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Usage(format!("cannot split {} volumes into train/validation", n)));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("split ratio {} outside [0, 1]", ratio)));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    let n_train = ((ratio * n as f64).round() as usize).clamp(1, n - 1);
    let val = idx.split_off(n_train);
    Ok((idx, val))
}

pub(crate) fn row_major_strides(shape: &[usize]) -> Vec<usize> {
    let mut strides = vec![1usize; shape.len()];
    for a in (0..shape.len().saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * shape[a + 1];
    }
    strides
}
