//! Minimal dense N-D tensor engine with reverse-mode differentiation.
//!
//! Supports exactly the operations the segmentation networks need:
//! N-D convolution and transposed convolution, instance/batch norm,
//! pointwise activations, channel softmax, concatenation and the soft
//! Dice loss. Values are stored flat in row-major order (last axis
//! fastest). Differentiation is tape-based: a [`Graph`] records the
//! forward pass and [`Graph::backward`] replays it in reverse.

mod check;
mod conv;
mod graph;

pub use check::grad_check;
pub use graph::{Graph, Var};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Element type for tensor computation. Training defaults to `f32`;
/// gradient checks run at `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssign
    + Copy
    + Send
    + Sync
    + std::fmt::Debug
    + std::fmt::Display
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    /// One draw from N(0, 1).
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
}

/// Dense N-D value: a shape plus a flat row-major buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if shape.iter().any(|&e| e == 0) {
            return Err(Error::Shape(format!("zero extent in shape {:?}", shape)));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![T::zero(); numel] }
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let numel = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; numel] }
    }

    pub fn scalar(value: T) -> Self {
        Tensor { shape: vec![1], data: vec![value] }
    }

    /// Gaussian-initialized tensor with the given standard deviation.
    pub fn randn<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Self {
        let numel: usize = shape.iter().product();
        let s = T::from_f64(std);
        let data = (0..numel).map(|_| T::standard_normal(rng) * s).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Scalar>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&v| f(v)).collect() }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Describes one convolution or transposed-convolution layer.
///
/// Weight layout is `[C_out, C_in, k...]` for standard layers and
/// `[C_in, C_out, k...]` for transposed layers.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub dims: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: Vec<usize>,
    pub stride: Vec<usize>,
    pub padding: Vec<usize>,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn new(
        dims: usize,
        in_channels: usize,
        out_channels: usize,
        kernel: Vec<usize>,
        stride: Vec<usize>,
        padding: Vec<usize>,
        transposed: bool,
    ) -> Result<Self> {
        let spec = ConvSpec { dims, in_channels, out_channels, kernel, stride, padding, transposed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.dims) {
            return Err(Error::Config(format!("conv dims must be 1..=3, got {}", self.dims)));
        }
        for (name, v) in [("kernel", &self.kernel), ("stride", &self.stride), ("padding", &self.padding)] {
            if v.len() != self.dims {
                return Err(Error::Config(format!(
                    "conv {} has {} entries, expected {}",
                    name,
                    v.len(),
                    self.dims
                )));
            }
        }
        if self.kernel.iter().any(|&k| k == 0) || self.stride.iter().any(|&s| s == 0) {
            return Err(Error::Config("kernel and stride entries must be >= 1".into()));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config("channel counts must be >= 1".into()));
        }
        Ok(())
    }

    /// Shape of the weight tensor in this layer's native layout.
    pub fn weight_shape(&self) -> Vec<usize> {
        let mut shape = if self.transposed {
            vec![self.in_channels, self.out_channels]
        } else {
            vec![self.out_channels, self.in_channels]
        };
        shape.extend_from_slice(&self.kernel);
        shape
    }

    pub fn kernel_numel(&self) -> usize {
        self.kernel.iter().product()
    }

    pub fn weight_numel(&self) -> usize {
        self.in_channels * self.out_channels * self.kernel_numel()
    }

    /// Output spatial extents for an input with the given spatial extents.
    pub fn out_spatial(&self, in_spatial: &[usize]) -> Result<Vec<usize>> {
        if in_spatial.len() != self.dims {
            return Err(Error::Shape(format!(
                "expected {} spatial axes, got {}",
                self.dims,
                in_spatial.len()
            )));
        }
        let mut out = Vec::with_capacity(self.dims);
        for axis in 0..self.dims {
            let (s, k, st, p) = (in_spatial[axis], self.kernel[axis], self.stride[axis], self.padding[axis]);
            if self.transposed {
                let extent = (s - 1) * st + k;
                if extent < 2 * p {
                    return Err(Error::dimension(axis, format!(
                        "transposed conv output collapses: extent {} < 2*padding {}",
                        extent,
                        2 * p
                    )));
                }
                out.push(extent - 2 * p);
            } else {
                let padded = s + 2 * p;
                if padded < k {
                    return Err(Error::dimension(axis, format!(
                        "input extent {} (padded {}) smaller than kernel {}",
                        s, padded, k
                    )));
                }
                out.push((padded - k) / st + 1);
            }
        }
        Ok(out)
    }
}

pub(crate) fn ceil_div(a: usize, b: usize) -> usize {
    a.div_ceil(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_shape_mismatch_rejected() {
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f64>::new(vec![2, 3], vec![0.0; 6]).is_ok());
    }

    #[test]
    fn conv_spec_output_sizes() {
        let spec = ConvSpec::new(2, 1, 1, vec![3, 3], vec![1, 1], vec![1, 1], false).unwrap();
        assert_eq!(spec.out_spatial(&[8, 8]).unwrap(), vec![8, 8]);

        let spec = ConvSpec::new(1, 1, 1, vec![2], vec![2], vec![0], true).unwrap();
        // (s-1)*stride + k - 2p = (2-1)*2 + 2 = 4
        assert_eq!(spec.out_spatial(&[2]).unwrap(), vec![4]);
    }

    #[test]
    fn conv_spec_weight_layout_swaps_for_transposed() {
        let spec = ConvSpec::new(3, 4, 8, vec![3, 3, 3], vec![1, 1, 1], vec![1, 1, 1], false).unwrap();
        assert_eq!(spec.weight_shape(), vec![8, 4, 3, 3, 3]);
        let t = ConvSpec { transposed: true, ..spec };
        assert_eq!(t.weight_shape(), vec![4, 8, 3, 3, 3]);
    }

    #[test]
    fn undersized_input_names_axis() {
        let spec = ConvSpec::new(2, 1, 1, vec![5, 3], vec![1, 1], vec![0, 0], false).unwrap();
        match spec.out_spatial(&[4, 8]) {
            Err(Error::Dimension { axis, .. }) => assert_eq!(axis, 0),
            other => panic!("expected dimension error, got {:?}", other),
        }
    }
}
