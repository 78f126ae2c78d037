//! Low-rank adaptation of convolution and transposed-convolution layers.
//!
//! The weight update is factorized per kernel position: for each spatial
//! multi-index `k`, `delta_W[:,:,k] = (alpha/rank) * A[k] * B[k]` with
//! `A[k]` of shape `C_out x r` and `B[k]` of shape `r x C_in`. The
//! original weight stays frozen; only `A`, `B` (and the layer bias)
//! receive gradients. The adapted forward pass evaluates
//! `Conv(x, W) + Conv(x, delta_W)`, which by linearity matches a single
//! convolution with the merged weight `W + delta_W`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ConvSpec, Graph, Scalar, Tensor, Var};

/// Which convolution layers receive adapters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoraTarget {
    /// All convolution and transposed-convolution layers.
    #[default]
    AllConv,
    /// Skip the final 1x1 output head.
    ExcludeOutputHead,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    #[serde(default)]
    pub target: LoraTarget,
}

impl LoraConfig {
    pub fn new(rank: usize, alpha: f64) -> Self {
        LoraConfig { rank, alpha, target: LoraTarget::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::Config("lora rank must be >= 1".into()));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("lora alpha must be positive and finite, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Effective update scale `alpha / rank`.
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Adapter state attached to one layer: the frozen original weight plus
/// the trainable low-rank factors.
#[derive(Debug, Clone)]
pub struct LoraState<T> {
    /// `[k..., C_out, r]`
    pub a: Tensor<T>,
    /// `[k..., r, C_in]`
    pub b: Tensor<T>,
    pub frozen_weight: Tensor<T>,
    pub spec: ConvSpec,
    pub rank: usize,
    pub alpha: f64,
}

/// Graph handles for one adapted layer's parameters.
pub struct LoraVars {
    pub weight: Var,
    pub a: Var,
    pub b: Var,
}

/// Trainable parameter count of an adapter: `prod(k) * r * (C_out + C_in)`.
pub fn lora_param_count(cfg: &LoraConfig, spec: &ConvSpec) -> usize {
    spec.kernel_numel() * cfg.rank * (spec.out_channels + spec.in_channels)
}

/// Freeze `weight` and attach zero-initialized low-rank factors.
///
/// `A` starts at zero so the adapted layer initially computes exactly
/// the frozen layer's output; `B` is Gaussian with std
/// `1/sqrt(C_in * prod(k))`.
pub fn inject<T: Scalar, R: Rng + ?Sized>(
    spec: &ConvSpec,
    weight: Tensor<T>,
    cfg: &LoraConfig,
    rng: &mut R,
) -> Result<LoraState<T>> {
    cfg.validate()?;
    if weight.shape() != spec.weight_shape().as_slice() {
        return Err(Error::Shape(format!(
            "weight shape {:?} does not match layer layout {:?}",
            weight.shape(),
            spec.weight_shape()
        )));
    }
    if cfg.rank >= spec.in_channels.min(spec.out_channels) {
        log::warn!(
            "lora rank {} >= min(C_in={}, C_out={}): no compression benefit",
            cfg.rank,
            spec.in_channels,
            spec.out_channels
        );
    }
    let mut a_shape = spec.kernel.clone();
    a_shape.extend_from_slice(&[spec.out_channels, cfg.rank]);
    let mut b_shape = spec.kernel.clone();
    b_shape.extend_from_slice(&[cfg.rank, spec.in_channels]);
    let std = 1.0 / ((spec.in_channels * spec.kernel_numel()) as f64).sqrt();
    Ok(LoraState {
        a: Tensor::zeros(&a_shape),
        b: Tensor::randn(&b_shape, std, rng),
        frozen_weight: weight,
        spec: spec.clone(),
        rank: cfg.rank,
        alpha: cfg.alpha,
    })
}

impl<T: Scalar> LoraState<T> {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn param_count(&self) -> usize {
        self.a.numel() + self.b.numel()
    }

    /// Insert this adapter's parameters into a graph. The frozen weight
    /// never requires gradients; `trainable` gates the factors only.
    pub fn leaves(&self, g: &mut Graph<T>, trainable: bool) -> LoraVars {
        LoraVars {
            weight: g.leaf(self.frozen_weight.clone(), false),
            a: g.leaf(self.a.clone(), trainable),
            b: g.leaf(self.b.clone(), trainable),
        }
    }

    /// Record the low-rank update on a graph, in the layer's native
    /// weight layout.
    pub fn delta_var(&self, g: &mut Graph<T>, vars: &LoraVars) -> Result<Var> {
        g.lora_delta(
            vars.a,
            vars.b,
            self.scale(),
            &self.spec.kernel,
            self.spec.out_channels,
            self.spec.in_channels,
            self.spec.transposed,
        )
    }
}

/// Materialize `delta_W = (alpha/rank) * A_k . B_k`, permuted into the
/// layer's native weight layout.
pub fn compose_delta<T: Scalar>(state: &LoraState<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let vars = state.leaves(&mut g, false);
    let delta = state.delta_var(&mut g, &vars)?;
    Ok(g.value(delta).clone())
}

/// `Conv(x, W_frozen) + Conv(x, delta_W)`; gradients flow only into the
/// factors (and bias, when its leaf is trainable).
pub fn adapted_forward<T: Scalar>(
    g: &mut Graph<T>,
    state: &LoraState<T>,
    vars: &LoraVars,
    x: Var,
    bias: Option<Var>,
) -> Result<Var> {
    let delta = state.delta_var(g, vars)?;
    let (base, update) = if state.spec.transposed {
        (
            g.conv_transpose_nd(x, vars.weight, bias, &state.spec)?,
            g.conv_transpose_nd(x, delta, None, &state.spec)?,
        )
    } else {
        (
            g.conv_nd(x, vars.weight, bias, &state.spec)?,
            g.conv_nd(x, delta, None, &state.spec)?,
        )
    };
    g.add(base, update)
}

/// Collapse the adapter: returns the merged plain weight
/// `W_frozen + delta_W` in the layer's native layout.
pub fn merge<T: Scalar>(state: &LoraState<T>) -> Result<Tensor<T>> {
    let delta = compose_delta(state)?;
    let data = state
        .frozen_weight
        .data()
        .iter()
        .zip(delta.data())
        .map(|(&w, &d)| w + d)
        .collect();
    Tensor::new(state.frozen_weight.shape().to_vec(), data)
}
