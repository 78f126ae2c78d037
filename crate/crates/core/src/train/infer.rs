//! Sliding-window and slice-based inference, plus mapping predictions
//! back to a bundle's original geometry.

use crate::data::{preprocess_bundle, LabelMap, PreprocTrace, VolumeBundle};
use crate::error::{Error, Result};
use crate::net::{Network, PatchSpec};
use crate::tensor::{Graph, Scalar, Tensor};

use super::artifact::PreprocessMeta;

/// Forward pass plus channel softmax: `[N, C, ...]` -> probabilities.
pub fn predict_probs<T: Scalar>(net: &Network<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let input = g.leaf(x.clone(), false);
    let (logits, _) = net.forward_graph(&mut g, input, None)?;
    let probs = g.softmax_channels(logits)?;
    Ok(g.value(probs).clone())
}

/// Regular-grid window starts covering `extent` with windows of size
/// `patch` and the given fractional overlap. The last window is clamped
/// so every position is covered.
pub fn window_starts(extent: usize, patch: usize, overlap: f64) -> Vec<usize> {
    if patch >= extent {
        return vec![0];
    }
    let step = ((patch as f64 * (1.0 - overlap)).round() as usize).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + patch < extent).collect();
    starts.push(extent - patch);
    starts.dedup();
    starts
}

/// Tile a (preprocessed) volume with overlapping patches, average the
/// per-voxel class probabilities over covering windows with uniform
/// weights, and take the channel argmax.
pub fn sliding_window_infer<T: Scalar>(
    net: &Network<T>,
    volume: &VolumeBundle,
    patch: &[usize],
    overlap: f64,
) -> Result<LabelMap> {
    let spatial = volume.spatial_shape().to_vec();
    let d = spatial.len();
    if patch.len() != d {
        return Err(Error::Shape(format!("{}-entry patch for a {d}-axis volume", patch.len())));
    }
    if !(0.0..1.0).contains(&overlap) {
        return Err(Error::Config(format!("overlap {overlap} outside [0, 1)")));
    }
    let channels = volume.channels();
    let classes = net.plan.num_classes;

    // zero-pad up to the patch size where the volume is smaller
    let padded: Vec<usize> = (0..d).map(|a| spatial[a].max(patch[a])).collect();
    let padded_plane: usize = padded.iter().product();
    let image = pad_end(volume.image.data(), channels, &spatial, &padded);

    let mut acc = vec![0.0f64; classes * padded_plane];
    let mut cover = vec![0u32; padded_plane];

    let starts: Vec<Vec<usize>> = (0..d).map(|a| window_starts(padded[a], patch[a], overlap)).collect();
    let mut cursor = vec![0usize; d];
    loop {
        let origin: Vec<usize> = (0..d).map(|a| starts[a][cursor[a]]).collect();
        let window: Vec<T> = copy_window(&image, channels, &padded, &origin, patch)
            .into_iter()
            .map(|v| T::from_f64(v as f64))
            .collect();
        let mut shape = vec![1, channels];
        shape.extend_from_slice(patch);
        let probs = predict_probs(net, &Tensor::new(shape, window)?)?;
        scatter_probs(&mut acc, &mut cover, probs.data(), classes, &padded, &origin, patch);

        // advance the window cursor
        let mut axis = d;
        loop {
            if axis == 0 {
                // done: average, argmax, crop padding
                let labels = argmax_probs(&acc, &cover, classes, &padded, &spatial);
                return LabelMap::new(spatial, labels);
            }
            axis -= 1;
            cursor[axis] += 1;
            if cursor[axis] < starts[axis].len() {
                break;
            }
            cursor[axis] = 0;
        }
    }
}

fn pad_end(data: &[f32], channels: usize, spatial: &[usize], padded: &[usize]) -> Vec<f32> {
    if spatial == padded {
        return data.to_vec();
    }
    let d = spatial.len();
    let in_plane: usize = spatial.iter().product();
    let out_plane: usize = padded.iter().product();
    let in_strides = crate::data::row_major_strides(spatial);
    let mut out = vec![0.0f32; channels * out_plane];
    let mut coords = vec![0usize; d];
    'voxels: for flat in 0..out_plane {
        let mut rem = flat;
        let mut in_flat = 0usize;
        for a in (0..d).rev() {
            coords[a] = rem % padded[a];
            rem /= padded[a];
        }
        for a in 0..d {
            if coords[a] >= spatial[a] {
                continue 'voxels;
            }
            in_flat += coords[a] * in_strides[a];
        }
        for c in 0..channels {
            out[c * out_plane + flat] = data[c * in_plane + in_flat];
        }
    }
    out
}

fn copy_window(image: &[f32], channels: usize, padded: &[usize], origin: &[usize], patch: &[usize]) -> Vec<f32> {
    let d = padded.len();
    let src_plane: usize = padded.iter().product();
    let dst_plane: usize = patch.iter().product();
    let src_strides = crate::data::row_major_strides(padded);
    let mut out = vec![0.0f32; channels * dst_plane];
    let mut coords = vec![0usize; d];
    for flat in 0..dst_plane {
        let mut rem = flat;
        let mut src_flat = 0usize;
        for a in (0..d).rev() {
            coords[a] = rem % patch[a];
            rem /= patch[a];
        }
        for a in 0..d {
            src_flat += (origin[a] + coords[a]) * src_strides[a];
        }
        for c in 0..channels {
            out[c * dst_plane + flat] = image[c * src_plane + src_flat];
        }
    }
    out
}

fn scatter_probs<T: Scalar>(
    acc: &mut [f64],
    cover: &mut [u32],
    probs: &[T],
    classes: usize,
    padded: &[usize],
    origin: &[usize],
    patch: &[usize],
) {
    let d = padded.len();
    let dst_plane: usize = padded.iter().product();
    let src_plane: usize = patch.iter().product();
    let dst_strides = crate::data::row_major_strides(padded);
    let mut coords = vec![0usize; d];
    for flat in 0..src_plane {
        let mut rem = flat;
        let mut dst_flat = 0usize;
        for a in (0..d).rev() {
            coords[a] = rem % patch[a];
            rem /= patch[a];
        }
        for a in 0..d {
            dst_flat += (origin[a] + coords[a]) * dst_strides[a];
        }
        cover[dst_flat] += 1;
        for k in 0..classes {
            acc[k * dst_plane + dst_flat] += probs[k * src_plane + flat].to_f64();
        }
    }
}

fn argmax_probs(acc: &[f64], cover: &[u32], classes: usize, padded: &[usize], spatial: &[usize]) -> Vec<u16> {
    let d = padded.len();
    let padded_plane: usize = padded.iter().product();
    let out_plane: usize = spatial.iter().product();
    let out_strides = crate::data::row_major_strides(spatial);
    let _ = out_strides;
    let mut labels = vec![0u16; out_plane];
    let mut coords = vec![0usize; d];
    let padded_strides = crate::data::row_major_strides(padded);
    for (flat, slot) in labels.iter_mut().enumerate() {
        let mut rem = flat;
        let mut p_flat = 0usize;
        for a in (0..d).rev() {
            coords[a] = rem % spatial[a];
            rem /= spatial[a];
        }
        for a in 0..d {
            p_flat += coords[a] * padded_strides[a];
        }
        debug_assert!(cover[p_flat] > 0, "grid leaves a voxel uncovered");
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for k in 0..classes {
            let v = acc[k * padded_plane + p_flat];
            if v > best_v {
                best_v = v;
                best = k;
            }
        }
        *slot = best as u16;
    }
    labels
}

/// Slice-based inference for 2-D networks: every slice along the first
/// spatial axis is reflect-padded to the network's stride multiple,
/// classified, and stacked.
pub fn infer_slices<T: Scalar>(net: &Network<T>, volume: &VolumeBundle) -> Result<LabelMap> {
    let spatial = volume.spatial_shape().to_vec();
    if spatial.len() != 3 {
        return Err(Error::Usage(format!("slice inference expects a 3-D volume, got {:?}", spatial)));
    }
    let (depth, h, w) = (spatial[0], spatial[1], spatial[2]);
    let channels = volume.channels();
    let classes = net.plan.num_classes;
    let cum = net.plan.cumulative_strides();
    let (hp, wp) = (round_up(h, cum[0]), round_up(w, cum[1]));

    let plane = h * w;
    let mut labels = vec![0u16; depth * plane];
    let img = volume.image.data();
    let mut padded = vec![0.0f32; hp * wp];
    for z in 0..depth {
        let mut slice = vec![T::zero(); channels * hp * wp];
        for c in 0..channels {
            let src = &img[(c * depth + z) * plane..(c * depth + z + 1) * plane];
            reflect_pad_plane(src, h, w, hp, wp, &mut padded);
            for (d, v) in slice[c * hp * wp..(c + 1) * hp * wp].iter_mut().zip(&padded) {
                *d = T::from_f64(*v as f64);
            }
        }
        let probs = predict_probs(net, &Tensor::new(vec![1, channels, hp, wp], slice)?)?;
        let pd = probs.data();
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_v = f64::NEG_INFINITY;
                for k in 0..classes {
                    let v = pd[(k * hp + y) * wp + x].to_f64();
                    if v > best_v {
                        best_v = v;
                        best = k;
                    }
                }
                labels[(z * h + y) * w + x] = best as u16;
            }
        }
    }
    LabelMap::new(spatial, labels)
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Reflect-pad a 2-D plane on the high side of each axis (falls back to
/// edge clamping for very small planes).
pub(crate) fn reflect_pad_plane<V: Copy>(src: &[V], h: usize, w: usize, hp: usize, wp: usize, dst: &mut [V]) {
    let reflect = |idx: usize, extent: usize| -> usize {
        if idx < extent {
            idx
        } else if extent == 1 {
            0
        } else {
            let over = idx - extent + 1;
            extent.saturating_sub(1 + over)
        }
    };
    for y in 0..hp {
        let sy = reflect(y, h);
        for x in 0..wp {
            let sx = reflect(x, w);
            dst[y * wp + x] = src[sy * w + sx];
        }
    }
}

/// Nearest-neighbour mapping of a prediction on the preprocessed grid
/// back to the bundle's original geometry: undo the resampling, then
/// place the result inside the crop box.
pub fn map_prediction_to_original(pred: &LabelMap, trace: &PreprocTrace) -> Result<LabelMap> {
    let d = trace.original_shape.len();
    let pred_shape = pred.shape().to_vec();
    let cropped = &trace.cropped_shape;

    // resampled grid -> cropped grid
    let mut on_cropped = vec![0u16; cropped.iter().product()];
    let pred_strides = crate::data::row_major_strides(&pred_shape);
    let mut coords = vec![0usize; d];
    for (flat, slot) in on_cropped.iter_mut().enumerate() {
        let mut rem = flat;
        for a in (0..d).rev() {
            coords[a] = rem % cropped[a];
            rem /= cropped[a];
        }
        let mut src_flat = 0usize;
        for a in 0..d {
            let scale = pred_shape[a] as f64 / cropped[a] as f64;
            let s = ((coords[a] as f64 + 0.5) * scale - 0.5).round();
            let idx = (s.max(0.0) as usize).min(pred_shape[a] - 1);
            src_flat += idx * pred_strides[a];
        }
        *slot = pred.data()[src_flat];
    }

    // cropped grid -> original grid (padding with background)
    let mut out = vec![0u16; trace.original_shape.iter().product()];
    let out_strides = crate::data::row_major_strides(&trace.original_shape);
    for (flat, &v) in on_cropped.iter().enumerate() {
        let mut rem = flat;
        let mut dst_flat = 0usize;
        for a in (0..d).rev() {
            coords[a] = rem % cropped[a];
            rem /= cropped[a];
        }
        for a in 0..d {
            dst_flat += (coords[a] + trace.bbox.lo[a]) * out_strides[a];
        }
        out[dst_flat] = v;
    }
    LabelMap::new(trace.original_shape.clone(), out)
}

/// Full prediction path for an original-geometry bundle: preprocess with
/// the model's stored settings, run window/slice inference, and map the
/// prediction back for scoring.
pub fn predict_bundle<T: Scalar>(
    net: &Network<T>,
    preprocess: &PreprocessMeta,
    bundle: &VolumeBundle,
    overlap: f64,
) -> Result<LabelMap> {
    let (pre, trace) = preprocess_bundle(bundle, &preprocess.target_spacing, preprocess.crop_margin)?;
    let pred = match (&net.plan.dims, &preprocess.patch) {
        (2, _) => infer_slices(net, &pre)?,
        (_, PatchSpec::Fixed(patch)) => sliding_window_infer(net, &pre, patch, overlap)?,
        (_, PatchSpec::FullSlice) => {
            return Err(Error::Config("a 3-D network cannot use full-slice windows".into()))
        }
    };
    map_prediction_to_original(&pred, &trace)
}
