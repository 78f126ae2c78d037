//! Network planning and construction.
//!
//! Three entry points produce the same [`Network`] representation:
//! manually configured 2-D/3-D U-Nets ([`build_unet`]), a
//! fingerprint-driven self-configured encoder-decoder
//! ([`plan_dynunet`]) and plan inheritance from a saved model
//! ([`inherit_plan`]).
//!
//! A plan's `strides[l]` is the downsampling applied on entry to
//! encoder level `l` (level 0 included); the decoder mirrors every
//! stride with a transposed convolution, so a network maps a
//! `patch_size` input to logits of identical spatial extent.

use std::collections::HashSet;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lora::{self, LoraConfig, LoraState, LoraTarget};
use crate::tensor::{ConvSpec, Graph, Scalar, Tensor, Var};
use crate::train::ModelArtifact;

pub const LEAKY_RELU_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;
/// Abstract cost units charged per stored activation scalar.
pub const COST_PER_ACTIVATION: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    Instance,
    Batch,
}

/// Training/inference window: fixed extents for 3-D patches, whole
/// slices for the 2-D network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchSpec {
    Fixed(Vec<usize>),
    FullSlice,
}

/// Fully describes an encoder-decoder instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub dims: usize,
    pub levels: usize,
    /// Per-level, per-axis kernel extents.
    pub kernels: Vec<Vec<usize>>,
    /// Per-level, per-axis downsampling applied on entry to the level.
    pub strides: Vec<Vec<usize>>,
    /// Per-level channel widths (non-decreasing).
    pub channels: Vec<usize>,
    pub in_channels: usize,
    pub num_classes: usize,
    pub norm: NormKind,
    pub patch: PatchSpec,
    pub batch_size: usize,
}

impl NetworkPlan {
    pub fn validate(&self) -> Result<()> {
        if !(2..=3).contains(&self.dims) {
            return Err(Error::Config(format!("dims must be 2 or 3, got {}", self.dims)));
        }
        if self.levels == 0 {
            return Err(Error::Config("a plan needs at least one level".into()));
        }
        for (name, len) in [
            ("kernels", self.kernels.len()),
            ("strides", self.strides.len()),
            ("channels", self.channels.len()),
        ] {
            if len != self.levels {
                return Err(Error::Config(format!(
                    "{name} has {len} entries for {} levels",
                    self.levels
                )));
            }
        }
        for l in 0..self.levels {
            if self.kernels[l].len() != self.dims || self.strides[l].len() != self.dims {
                return Err(Error::Config(format!(
                    "level {l}: kernel/stride arity does not match dims {}",
                    self.dims
                )));
            }
            if self.kernels[l].iter().any(|&k| k == 0) || self.strides[l].iter().any(|&s| s == 0) {
                return Err(Error::Config(format!("level {l}: kernel and stride entries must be >= 1")));
            }
        }
        if self.channels.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Config(format!(
                "channels must be non-decreasing down the encoder, got {:?}",
                self.channels
            )));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("in_channels must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must include background plus >= 1 foreground".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if let PatchSpec::Fixed(patch) = &self.patch {
            if patch.len() != self.dims {
                return Err(Error::Config(format!(
                    "patch {:?} arity does not match dims {}",
                    patch, self.dims
                )));
            }
            let cum = self.cumulative_strides();
            for a in 0..self.dims {
                if patch[a] % cum[a] != 0 {
                    return Err(Error::Config(format!(
                        "patch axis {a} extent {} is not divisible by cumulative stride {}",
                        patch[a], cum[a]
                    )));
                }
            }
        }
        Ok(())
    }

    /// Product of all per-level strides along each axis.
    pub fn cumulative_strides(&self) -> Vec<usize> {
        let mut cum = vec![1usize; self.dims];
        for l in 0..self.levels {
            for a in 0..self.dims {
                cum[a] *= self.strides[l][a];
            }
        }
        cum
    }

    /// Feature-map extents at every level for a given input extent.
    pub fn level_shapes(&self, input: &[usize]) -> Vec<Vec<usize>> {
        let mut shapes = Vec::with_capacity(self.levels);
        let mut cur = input.to_vec();
        for l in 0..self.levels {
            for a in 0..self.dims {
                cur[a] = (cur[a] / self.strides[l][a]).max(1);
            }
            shapes.push(cur.clone());
        }
        shapes
    }
}

/// Deterministic monotone memory cost of one training step:
/// `sum over levels of (feature-map voxels * channels) * batch`, in
/// [`COST_PER_ACTIVATION`] units.
pub fn estimate_memory(plan: &NetworkPlan) -> Result<f64> {
    plan.validate()?;
    let PatchSpec::Fixed(patch) = &plan.patch else {
        return Err(Error::Usage("memory estimate needs a fixed patch size".into()));
    };
    let mut cost = 0.0;
    for (l, shape) in plan.level_shapes(patch).iter().enumerate() {
        let voxels: usize = shape.iter().product();
        cost += voxels as f64 * plan.channels[l] as f64 * COST_PER_ACTIVATION;
    }
    Ok(cost * plan.batch_size as f64)
}

/// Abstract memory budget in the same units as [`estimate_memory`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MemoryBudget {
    pub units: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannerOptions {
    pub base_channels: usize,
    pub max_channels: usize,
    pub max_levels: usize,
    /// Smallest admissible feature-map extent.
    pub min_featmap: usize,
    /// An axis coarser than `threshold x finest spacing` gets kernel 1 /
    /// stride 1 until resolutions equalize.
    pub anisotropy_threshold: f64,
    pub max_batch: usize,
    pub norm: NormKind,
}

impl Default for PlannerOptions {
    fn default() -> Self {
        PlannerOptions {
            base_channels: 16,
            max_channels: 256,
            max_levels: 6,
            min_featmap: 4,
            anisotropy_threshold: 2.0,
            max_batch: 16,
            norm: NormKind::Instance,
        }
    }
}

/// Self-configured plan from a dataset fingerprint and a memory budget.
///
/// Kernels default to 3 and strides to 2; axes whose running spacing
/// exceeds `anisotropy_threshold x` the finest axis use kernel 1 /
/// stride 1 at that level. Levels are added until the smallest
/// feature-map axis would drop below `min_featmap` or `max_levels` is
/// reached. The patch grows axis-by-axis in cumulative-stride steps
/// while the estimate at batch 2 fits the budget; the final batch is
/// the largest `b >= 2` that fits, else 1.
pub fn plan_dynunet(
    fp: &crate::data::DatasetFingerprint,
    in_channels: usize,
    num_classes: usize,
    mem: &MemoryBudget,
    opts: &PlannerOptions,
) -> Result<NetworkPlan> {
    let d = fp.median_spacing.len();
    if d != 3 {
        return Err(Error::Usage(format!(
            "self-configuration targets 3-D volumes, fingerprint has {d} axes"
        )));
    }
    if fp.n_volumes == 0 {
        return Err(Error::Usage("fingerprint computed from zero volumes".into()));
    }
    // extents after resampling to the target spacing
    let resampled: Vec<usize> = (0..d)
        .map(|a| {
            let e = (fp.median_shape[a] as f64 * fp.median_spacing[a] / fp.target_spacing[a]).round();
            (e as usize).max(1)
        })
        .collect();

    let mut kernels = Vec::new();
    let mut strides = Vec::new();
    let mut spacing = fp.target_spacing.clone();
    let mut shape = resampled.clone();
    while kernels.len() < opts.max_levels {
        let finest = spacing.iter().cloned().fold(f64::INFINITY, f64::min);
        let mut kernel = vec![0usize; d];
        let mut stride = vec![0usize; d];
        for a in 0..d {
            let coarse = spacing[a] > opts.anisotropy_threshold * finest;
            kernel[a] = if coarse { 1 } else { 3 };
            let can_halve = shape[a] / 2 >= opts.min_featmap;
            stride[a] = if coarse || !can_halve { 1 } else { 2 };
        }
        if !kernels.is_empty() && stride.iter().all(|&s| s == 1) {
            break;
        }
        for a in 0..d {
            spacing[a] *= stride[a] as f64;
            shape[a] = (shape[a] / stride[a]).max(1);
        }
        kernels.push(kernel);
        strides.push(stride);
    }
    let levels = kernels.len();
    let channels: Vec<usize> = (0..levels)
        .map(|l| (opts.base_channels << l.min(usize::BITS as usize - 1)).min(opts.max_channels))
        .collect();

    let mut plan = NetworkPlan {
        dims: 3,
        levels,
        kernels,
        strides,
        channels,
        in_channels,
        num_classes,
        norm: opts.norm,
        patch: PatchSpec::Fixed(vec![1; d]),
        batch_size: 1,
    };
    let cum = plan.cumulative_strides();
    let minimal: Vec<usize> = cum.clone();
    // cap the patch at the resampled median shape, rounded down to a
    // stride multiple (never below the minimal patch)
    let cap: Vec<usize> = (0..d).map(|a| (resampled[a] / cum[a]).max(1) * cum[a]).collect();

    let cost_at = |patch: &[usize], batch: usize, plan: &NetworkPlan| -> f64 {
        let mut p = plan.clone();
        p.patch = PatchSpec::Fixed(patch.to_vec());
        p.batch_size = batch;
        estimate_memory(&p).expect("planner emits valid plans")
    };

    if cost_at(&minimal, 1, &plan) > mem.units {
        return Err(Error::Config(format!(
            "memory budget {} units below the minimal requirement {} (patch {:?}, batch 1)",
            mem.units,
            cost_at(&minimal, 1, &plan),
            minimal
        )));
    }

    let mut patch = minimal.clone();
    if cost_at(&patch, 2, &plan) <= mem.units {
        // grow the physically shortest axis first; ties resolve to the
        // lower axis index
        loop {
            let mut grew = false;
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&x, &y| {
                let ex = patch[x] as f64 * fp.target_spacing[x];
                let ey = patch[y] as f64 * fp.target_spacing[y];
                ex.partial_cmp(&ey).unwrap().then(x.cmp(&y))
            });
            for &a in &order {
                if patch[a] + cum[a] > cap[a] {
                    continue;
                }
                let mut candidate = patch.clone();
                candidate[a] += cum[a];
                if cost_at(&candidate, 2, &plan) <= mem.units {
                    patch = candidate;
                    grew = true;
                    break;
                }
            }
            if !grew {
                break;
            }
        }
    }

    let per_sample = cost_at(&patch, 1, &plan);
    let fit = (mem.units / per_sample).floor() as usize;
    plan.batch_size = if fit >= 2 { fit.min(opts.max_batch) } else { 1 };
    plan.patch = PatchSpec::Fixed(patch);
    plan.validate()?;
    Ok(plan)
}

/// Reuse the stored plan of a saved model verbatim (fine-tuning mode);
/// the target dataset is not re-fingerprinted.
pub fn inherit_plan(artifact: &ModelArtifact) -> Result<NetworkPlan> {
    let plan = artifact.plan.clone();
    plan.validate().map_err(|e| Error::Format(format!("artifact carries an invalid plan: {e}")))?;
    Ok(plan)
}

// ---------------------------------------------------------------------
// Concrete networks
// ---------------------------------------------------------------------

/// A conv layer's weight: plain, or frozen-with-adapter.
#[derive(Debug, Clone)]
pub enum ConvWeight<T> {
    Plain(Tensor<T>),
    Adapted(LoraState<T>),
}

#[derive(Debug, Clone)]
pub enum LayerOp<T> {
    Conv { spec: ConvSpec, weight: ConvWeight<T>, bias: Tensor<T> },
    Norm { kind: NormKind, gamma: Tensor<T>, beta: Tensor<T>, eps: f64 },
    Activation { slope: f64 },
    Concat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerInput {
    /// The network input tensor.
    Input,
    /// Output of an earlier layer (by index).
    Layer(usize),
}

#[derive(Debug, Clone)]
pub struct Layer<T> {
    pub name: String,
    /// Distance group from the input; freeze schedules operate on these.
    pub depth_index: usize,
    pub inputs: Vec<LayerInput>,
    pub op: LayerOp<T>,
}

/// Instantiated encoder-decoder: plan plus ordered layers
/// (a valid topological order from input to output).
#[derive(Debug, Clone)]
pub struct Network<T> {
    pub plan: NetworkPlan,
    pub layers: Vec<Layer<T>>,
}

/// Graph handle for one named parameter ("layer.field").
pub struct ParamBinding {
    pub name: String,
    pub var: Var,
}

fn same_padding(kernel: &[usize]) -> Vec<usize> {
    kernel.iter().map(|&k| (k - 1) / 2).collect()
}

struct NetBuilder<T> {
    layers: Vec<Layer<T>>,
    last: Option<usize>,
}

impl<T: Scalar> NetBuilder<T> {
    fn new() -> Self {
        NetBuilder { layers: Vec::new(), last: None }
    }

    fn push(&mut self, name: String, depth: usize, inputs: Vec<LayerInput>, op: LayerOp<T>) -> usize {
        self.layers.push(Layer { name, depth_index: depth, inputs, op });
        let idx = self.layers.len() - 1;
        self.last = Some(idx);
        idx
    }

    fn chain_input(&self) -> LayerInput {
        match self.last {
            Some(idx) => LayerInput::Layer(idx),
            None => LayerInput::Input,
        }
    }

    fn conv<R: Rng + ?Sized>(
        &mut self,
        name: String,
        depth: usize,
        input: LayerInput,
        spec: ConvSpec,
        rng: &mut R,
    ) -> usize {
        let fan_in = (spec.in_channels * spec.kernel_numel()) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = Tensor::randn(&spec.weight_shape(), std, rng);
        let bias = Tensor::zeros(&[spec.out_channels]);
        self.push(name, depth, vec![input], LayerOp::Conv { spec, weight: ConvWeight::Plain(weight), bias })
    }

    fn norm_act<R: Rng + ?Sized>(&mut self, prefix: &str, suffix: &str, depth: usize, channels: usize, kind: NormKind, _rng: &mut R) {
        let input = self.chain_input();
        self.push(
            format!("{prefix}.norm{suffix}"),
            depth,
            vec![input],
            LayerOp::Norm { kind, gamma: Tensor::filled(&[channels], T::one()), beta: Tensor::zeros(&[channels]), eps: NORM_EPS },
        );
        let input = self.chain_input();
        self.push(format!("{prefix}.act{suffix}"), depth, vec![input], LayerOp::Activation { slope: LEAKY_RELU_SLOPE });
    }

    /// conv -> norm -> act, twice; the first conv applies `stride` and
    /// maps `in_ch` to `out_ch`.
    fn conv_block<R: Rng + ?Sized>(
        &mut self,
        prefix: &str,
        depth: usize,
        input: LayerInput,
        dims: usize,
        in_ch: usize,
        out_ch: usize,
        kernel: &[usize],
        stride: &[usize],
        norm: NormKind,
        rng: &mut R,
    ) -> usize {
        let spec0 = ConvSpec::new(dims, in_ch, out_ch, kernel.to_vec(), stride.to_vec(), same_padding(kernel), false)
            .expect("validated plan");
        self.conv(format!("{prefix}.conv0"), depth, input, spec0, rng);
        self.norm_act(prefix, "0", depth, out_ch, norm, rng);
        let spec1 = ConvSpec::new(dims, out_ch, out_ch, kernel.to_vec(), vec![1; dims], same_padding(kernel), false)
            .expect("validated plan");
        let input = self.chain_input();
        self.conv(format!("{prefix}.conv1"), depth, input, spec1, rng);
        self.norm_act(prefix, "1", depth, out_ch, norm, rng);
        self.layers.len() - 1
    }
}

impl<T: Scalar> Network<T> {
    /// Instantiate the classic U-Net topology for a plan: encoder blocks
    /// with strided downsampling, transposed-conv upsampling with skip
    /// concatenation, and a 1x1 output head.
    pub fn from_plan<R: Rng + ?Sized>(plan: NetworkPlan, rng: &mut R) -> Result<Self> {
        plan.validate()?;
        let d = plan.dims;
        let levels = plan.levels;
        let norm = plan.norm;
        let mut b = NetBuilder::new();

        // encoder; remember each level's block output for the skips
        let mut skips = Vec::with_capacity(levels);
        for l in 0..levels {
            let in_ch = if l == 0 { plan.in_channels } else { plan.channels[l - 1] };
            let input = b.chain_input();
            let out = b.conv_block(
                &format!("enc{l}"),
                l,
                input,
                d,
                in_ch,
                plan.channels[l],
                &plan.kernels[l],
                &plan.strides[l],
                norm,
                rng,
            );
            skips.push(out);
        }

        // decoder mirrors levels L-2 .. 0
        for l in (0..levels.saturating_sub(1)).rev() {
            let depth = 2 * (levels - 1) - l;
            let up_spec = ConvSpec::new(
                d,
                plan.channels[l + 1],
                plan.channels[l],
                plan.strides[l + 1].clone(),
                plan.strides[l + 1].clone(),
                vec![0; d],
                true,
            )?;
            let input = b.chain_input();
            let fan_in = (plan.channels[l + 1] * up_spec.kernel_numel()) as f64;
            let weight = Tensor::randn(&up_spec.weight_shape(), (2.0 / fan_in).sqrt(), rng);
            let bias = Tensor::zeros(&[plan.channels[l]]);
            let up = b.push(
                format!("dec{l}.up"),
                depth,
                vec![input],
                LayerOp::Conv { spec: up_spec, weight: ConvWeight::Plain(weight), bias },
            );
            let cat = b.push(
                format!("dec{l}.concat"),
                depth,
                vec![LayerInput::Layer(up), LayerInput::Layer(skips[l])],
                LayerOp::Concat,
            );
            b.conv_block(
                &format!("dec{l}"),
                depth,
                LayerInput::Layer(cat),
                d,
                2 * plan.channels[l],
                plan.channels[l],
                &plan.kernels[l],
                &vec![1; d],
                norm,
                rng,
            );
        }

        let head_depth = 2 * (levels - 1);
        // mirror a level-0 entry stride back to full resolution
        if plan.strides[0].iter().any(|&s| s > 1) {
            let up_spec = ConvSpec::new(
                d,
                plan.channels[0],
                plan.channels[0],
                plan.strides[0].clone(),
                plan.strides[0].clone(),
                vec![0; d],
                true,
            )?;
            let input = b.chain_input();
            let fan_in = (plan.channels[0] * up_spec.kernel_numel()) as f64;
            let weight = Tensor::randn(&up_spec.weight_shape(), (2.0 / fan_in).sqrt(), rng);
            let bias = Tensor::zeros(&[plan.channels[0]]);
            b.push(
                "up0.up".to_string(),
                head_depth,
                vec![input],
                LayerOp::Conv { spec: up_spec, weight: ConvWeight::Plain(weight), bias },
            );
            b.norm_act("up0", "", head_depth, plan.channels[0], norm, rng);
        }

        let head_spec = ConvSpec::new(d, plan.channels[0], plan.num_classes, vec![1; d], vec![1; d], vec![0; d], false)?;
        let input = b.chain_input();
        b.conv(String::from("head.conv"), head_depth, input, head_spec, rng);

        Ok(Network { plan, layers: b.layers })
    }

    /// Record a forward pass. Layers named in `trainable` expose their
    /// parameters with gradients enabled; `None` freezes everything
    /// (inference). Returns the logits plus parameter bindings.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        trainable: Option<&HashSet<String>>,
    ) -> Result<(Var, Vec<ParamBinding>)> {
        let mut outputs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut bindings = Vec::new();
        for layer in &self.layers {
            let train = trainable.map(|set| set.contains(&layer.name)).unwrap_or(false);
            let resolve = |input: &LayerInput, outputs: &[Var]| match input {
                LayerInput::Input => x,
                LayerInput::Layer(idx) => outputs[*idx],
            };
            let out = match &layer.op {
                LayerOp::Conv { spec, weight, bias } => {
                    let input = resolve(&layer.inputs[0], &outputs);
                    let bias_var = g.leaf(bias.clone(), train);
                    bindings.push(ParamBinding { name: format!("{}.bias", layer.name), var: bias_var });
                    match weight {
                        ConvWeight::Plain(w) => {
                            let w_var = g.leaf(w.clone(), train);
                            bindings.push(ParamBinding { name: format!("{}.weight", layer.name), var: w_var });
                            if spec.transposed {
                                g.conv_transpose_nd(input, w_var, Some(bias_var), spec)?
                            } else {
                                g.conv_nd(input, w_var, Some(bias_var), spec)?
                            }
                        }
                        ConvWeight::Adapted(state) => {
                            let vars = state.leaves(g, train);
                            bindings.push(ParamBinding { name: format!("{}.lora_a", layer.name), var: vars.a });
                            bindings.push(ParamBinding { name: format!("{}.lora_b", layer.name), var: vars.b });
                            lora::adapted_forward(g, state, &vars, input, Some(bias_var))?
                        }
                    }
                }
                LayerOp::Norm { kind, gamma, beta, eps } => {
                    let input = resolve(&layer.inputs[0], &outputs);
                    let gamma_var = g.leaf(gamma.clone(), train);
                    let beta_var = g.leaf(beta.clone(), train);
                    bindings.push(ParamBinding { name: format!("{}.gamma", layer.name), var: gamma_var });
                    bindings.push(ParamBinding { name: format!("{}.beta", layer.name), var: beta_var });
                    match kind {
                        NormKind::Instance => g.instance_norm(input, gamma_var, beta_var, *eps)?,
                        NormKind::Batch => g.batch_norm(input, gamma_var, beta_var, *eps)?,
                    }
                }
                LayerOp::Activation { slope } => {
                    let input = resolve(&layer.inputs[0], &outputs);
                    g.leaky_relu(input, *slope)
                }
                LayerOp::Concat => {
                    let vars: Vec<Var> = layer.inputs.iter().map(|i| resolve(i, &outputs)).collect();
                    g.concat_channels(&vars)?
                }
            };
            outputs.push(out);
        }
        let logits = *outputs.last().ok_or_else(|| Error::Usage("empty network".into()))?;
        Ok((logits, bindings))
    }

    /// Convenience inference pass.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let input = g.leaf(x.clone(), false);
        let (logits, _) = self.forward_graph(&mut g, input, None)?;
        Ok(g.value(logits).clone())
    }

    /// Names of all layers holding parameters, grouped by depth_index
    /// (input-most group first).
    pub fn depth_groups(&self) -> Vec<Vec<String>> {
        let max_depth = self.layers.iter().map(|l| l.depth_index).max().unwrap_or(0);
        let mut groups = vec![Vec::new(); max_depth + 1];
        for layer in &self.layers {
            if !matches!(layer.op, LayerOp::Concat) {
                groups[layer.depth_index].push(layer.name.clone());
            }
        }
        groups
    }

    pub fn layer_names(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.name.clone()).collect()
    }

    /// Layer names whose op is a normalization.
    pub fn norm_layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .filter(|l| matches!(l.op, LayerOp::Norm { .. }))
            .map(|l| l.name.clone())
            .collect()
    }

    /// Named parameters in deterministic layer order.
    pub fn named_params(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for layer in &self.layers {
            match &layer.op {
                LayerOp::Conv { weight, bias, .. } => {
                    match weight {
                        ConvWeight::Plain(w) => out.push((format!("{}.weight", layer.name), w)),
                        ConvWeight::Adapted(state) => {
                            out.push((format!("{}.weight", layer.name), &state.frozen_weight));
                            out.push((format!("{}.lora_a", layer.name), &state.a));
                            out.push((format!("{}.lora_b", layer.name), &state.b));
                        }
                    }
                    out.push((format!("{}.bias", layer.name), bias));
                }
                LayerOp::Norm { gamma, beta, .. } => {
                    out.push((format!("{}.gamma", layer.name), gamma));
                    out.push((format!("{}.beta", layer.name), beta));
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable access to a parameter by its "layer.field" name.
    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let (layer_name, field) = name.rsplit_once('.')?;
        let layer = self.layers.iter_mut().find(|l| l.name == layer_name)?;
        match (&mut layer.op, field) {
            (LayerOp::Conv { weight: ConvWeight::Plain(w), .. }, "weight") => Some(w),
            (LayerOp::Conv { weight: ConvWeight::Adapted(state), .. }, "weight") => Some(&mut state.frozen_weight),
            (LayerOp::Conv { weight: ConvWeight::Adapted(state), .. }, "lora_a") => Some(&mut state.a),
            (LayerOp::Conv { weight: ConvWeight::Adapted(state), .. }, "lora_b") => Some(&mut state.b),
            (LayerOp::Conv { bias, .. }, "bias") => Some(bias),
            (LayerOp::Norm { gamma, .. }, "gamma") => Some(gamma),
            (LayerOp::Norm { beta, .. }, "beta") => Some(beta),
            _ => None,
        }
    }

    pub fn total_param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Attach adapters to every targeted conv layer. Errors if any
    /// target is already adapted.
    pub fn inject_lora<R: Rng + ?Sized>(&mut self, cfg: &LoraConfig, rng: &mut R) -> Result<usize> {
        cfg.validate()?;
        let mut count = 0usize;
        for layer in &mut self.layers {
            if let LayerOp::Conv { spec, weight, .. } = &mut layer.op {
                if cfg.target == LoraTarget::ExcludeOutputHead && layer.name == "head.conv" {
                    continue;
                }
                match weight {
                    ConvWeight::Adapted(_) => {
                        return Err(Error::Usage(format!("layer {} is already adapted", layer.name)));
                    }
                    ConvWeight::Plain(w) => {
                        let state = lora::inject(spec, w.clone(), cfg, rng)?;
                        *weight = ConvWeight::Adapted(state);
                        count += 1;
                    }
                }
            }
        }
        Ok(count)
    }

    /// Collapse every adapter into its layer weight.
    pub fn merge_lora(&mut self) -> Result<usize> {
        let mut count = 0usize;
        for layer in &mut self.layers {
            if let LayerOp::Conv { weight, .. } = &mut layer.op {
                if let ConvWeight::Adapted(state) = weight {
                    *weight = ConvWeight::Plain(lora::merge(state)?);
                    count += 1;
                }
            }
        }
        Ok(count)
    }

    pub fn has_lora(&self) -> bool {
        self.layers.iter().any(|l| matches!(&l.op, LayerOp::Conv { weight: ConvWeight::Adapted(_), .. }))
    }

    /// Total trainable adapter parameters across all adapted layers.
    pub fn lora_param_total(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| match &l.op {
                LayerOp::Conv { weight: ConvWeight::Adapted(state), .. } => Some(state.param_count()),
                _ => None,
            })
            .sum()
    }

    /// Replace the 1x1 output head with a freshly initialized one for a
    /// new label space, inheriting the body (label remapping).
    pub fn replace_head<R: Rng + ?Sized>(&mut self, num_classes: usize, rng: &mut R) -> Result<()> {
        if num_classes < 2 {
            return Err(Error::Config("num_classes must include background plus >= 1 foreground".into()));
        }
        let layer = self
            .layers
            .iter_mut()
            .find(|l| l.name == "head.conv")
            .ok_or_else(|| Error::Usage("network has no output head".into()))?;
        let LayerOp::Conv { spec, weight, bias } = &mut layer.op else {
            return Err(Error::Usage("output head is not a convolution".into()));
        };
        let mut new_spec = spec.clone();
        new_spec.out_channels = num_classes;
        let fan_in = (new_spec.in_channels * new_spec.kernel_numel()) as f64;
        *weight = ConvWeight::Plain(Tensor::randn(&new_spec.weight_shape(), (2.0 / fan_in).sqrt(), rng));
        *bias = Tensor::zeros(&[num_classes]);
        *spec = new_spec;
        self.plan.num_classes = num_classes;
        Ok(())
    }

    /// Parameters that would receive gradients when exactly the given
    /// layers are trainable. Adapted convolutions contribute their
    /// factors and bias; the frozen original never counts.
    pub fn trainable_param_count(&self, trainable: &HashSet<String>) -> usize {
        let mut count = 0usize;
        for layer in &self.layers {
            if !trainable.contains(&layer.name) {
                continue;
            }
            match &layer.op {
                LayerOp::Conv { weight, bias, .. } => {
                    count += bias.numel();
                    match weight {
                        ConvWeight::Plain(w) => count += w.numel(),
                        ConvWeight::Adapted(state) => count += state.param_count(),
                    }
                }
                LayerOp::Norm { gamma, beta, .. } => count += gamma.numel() + beta.numel(),
                _ => {}
            }
        }
        count
    }

    /// Convert element type (used when loading 32-bit artifacts into a
    /// 64-bit network and vice versa).
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        let layers = self
            .layers
            .iter()
            .map(|layer| Layer {
                name: layer.name.clone(),
                depth_index: layer.depth_index,
                inputs: layer.inputs.clone(),
                op: match &layer.op {
                    LayerOp::Conv { spec, weight, bias } => LayerOp::Conv {
                        spec: spec.clone(),
                        weight: match weight {
                            ConvWeight::Plain(w) => ConvWeight::Plain(cast_tensor(w)),
                            ConvWeight::Adapted(s) => ConvWeight::Adapted(LoraState {
                                a: cast_tensor(&s.a),
                                b: cast_tensor(&s.b),
                                frozen_weight: cast_tensor(&s.frozen_weight),
                                spec: s.spec.clone(),
                                rank: s.rank,
                                alpha: s.alpha,
                            }),
                        },
                        bias: cast_tensor(bias),
                    },
                    LayerOp::Norm { kind, gamma, beta, eps } => LayerOp::Norm {
                        kind: *kind,
                        gamma: cast_tensor(gamma),
                        beta: cast_tensor(beta),
                        eps: *eps,
                    },
                    LayerOp::Activation { slope } => LayerOp::Activation { slope: *slope },
                    LayerOp::Concat => LayerOp::Concat,
                },
            })
            .collect();
        Network { plan: self.plan.clone(), layers }
    }
}

fn cast_tensor<T: Scalar, U: Scalar>(t: &Tensor<T>) -> Tensor<U> {
    t.map(|v| U::from_f64(v.to_f64()))
}

/// Manual U-Net hyperparameters ("user-defined" configuration).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnetHyper {
    pub kernels: Vec<Vec<usize>>,
    pub strides: Vec<Vec<usize>>,
    pub channels: Vec<usize>,
    pub patch: PatchSpec,
    pub batch_size: usize,
    pub norm: Option<NormKind>,
}

impl UnetHyper {
    /// Documented 3-D default: patch (16, 96, 96) with strides
    /// (1,2,2)/(2,2,2)/(2,2,2).
    pub fn default_3d() -> Self {
        UnetHyper {
            kernels: vec![vec![1, 3, 3], vec![3, 3, 3], vec![3, 3, 3]],
            strides: vec![vec![1, 2, 2], vec![2, 2, 2], vec![2, 2, 2]],
            channels: vec![16, 32, 64],
            patch: PatchSpec::Fixed(vec![16, 96, 96]),
            batch_size: 2,
            norm: None,
        }
    }
}

/// Plan for a manually configured 2-D or 3-D U-Net. The norm default is
/// instance for 3-D and batch for 2-D.
pub fn build_unet_plan(dims: usize, hyper: &UnetHyper, in_channels: usize, num_classes: usize) -> Result<NetworkPlan> {
    let norm = hyper.norm.unwrap_or(match dims {
        3 => NormKind::Instance,
        _ => NormKind::Batch,
    });
    let plan = NetworkPlan {
        dims,
        levels: hyper.kernels.len(),
        kernels: hyper.kernels.clone(),
        strides: hyper.strides.clone(),
        channels: hyper.channels.clone(),
        in_channels,
        num_classes,
        norm,
        patch: hyper.patch.clone(),
        batch_size: hyper.batch_size,
    };
    plan.validate()?;
    Ok(plan)
}

/// Build and instantiate a manually configured 2-D or 3-D U-Net.
pub fn build_unet<T: Scalar, R: Rng + ?Sized>(
    dims: usize,
    hyper: &UnetHyper,
    in_channels: usize,
    num_classes: usize,
    rng: &mut R,
) -> Result<Network<T>> {
    Network::from_plan(build_unet_plan(dims, hyper, in_channels, num_classes)?, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::DatasetFingerprint;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn fingerprint(spacing: [f64; 3], shape: [usize; 3]) -> DatasetFingerprint {
        DatasetFingerprint {
            median_spacing: spacing.to_vec(),
            median_shape: shape.to_vec(),
            n_volumes: 5,
            target_spacing: spacing.to_vec(),
        }
    }

    #[test]
    fn table_default_3d_plan_round_trips_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut hyper = UnetHyper::default_3d();
        hyper.channels = vec![4, 8, 8]; // keep the test light
        let net: Network<f32> = build_unet(3, &hyper, 1, 3, &mut rng).unwrap();
        assert_eq!(net.plan.cumulative_strides(), vec![4, 8, 8]);

        let x = Tensor::<f32>::randn(&[1, 1, 16, 96 / 2, 96 / 2], 1.0, &mut rng);
        // divisible by the cumulative strides, so the round trip holds
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), &[1, 3, 16, 48, 48]);
    }

    #[test]
    fn single_level_net_is_shape_preserving() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let hyper = UnetHyper {
            kernels: vec![vec![3, 3]],
            strides: vec![vec![1, 1]],
            channels: vec![6],
            patch: PatchSpec::FullSlice,
            batch_size: 1,
            norm: None,
        };
        let net: Network<f32> = build_unet(2, &hyper, 2, 4, &mut rng).unwrap();
        assert_eq!(net.plan.norm, NormKind::Batch);
        let x = Tensor::<f32>::randn(&[2, 2, 11, 13], 1.0, &mut rng);
        let y = net.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 4, 11, 13]);
    }

    #[test]
    fn indivisible_patch_is_rejected_with_axis() {
        let mut hyper = UnetHyper::default_3d();
        hyper.patch = PatchSpec::Fixed(vec![16, 96, 50]); // 50 % 8 != 0
        let plan = NetworkPlan {
            dims: 3,
            levels: 3,
            kernels: hyper.kernels.clone(),
            strides: hyper.strides.clone(),
            channels: hyper.channels.clone(),
            in_channels: 1,
            num_classes: 2,
            norm: NormKind::Instance,
            patch: hyper.patch.clone(),
            batch_size: 2,
        };
        match plan.validate() {
            Err(Error::Config(msg)) => assert!(msg.contains("axis 2"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn isotropic_plan_hits_five_levels() {
        let fp = fingerprint([1.0, 1.0, 1.0], [128, 128, 128]);
        let plan = plan_dynunet(&fp, 1, 3, &MemoryBudget { units: 1e9 }, &PlannerOptions::default()).unwrap();
        assert_eq!(plan.levels, 5);
        for l in 0..5 {
            assert_eq!(plan.kernels[l], vec![3, 3, 3]);
            assert_eq!(plan.strides[l], vec![2, 2, 2]);
        }
    }

    #[test]
    fn anisotropic_first_level_uses_kernel_one() {
        let fp = fingerprint([5.0, 1.0, 1.0], [40, 160, 160]);
        let plan = plan_dynunet(&fp, 1, 3, &MemoryBudget { units: 1e9 }, &PlannerOptions::default()).unwrap();
        assert_eq!(plan.kernels[0], vec![1, 3, 3]);
        assert_eq!(plan.strides[0], vec![1, 2, 2]);
        // once in-plane spacing catches up, the axis joins in
        assert!(plan.strides.iter().any(|s| s[0] == 2));
    }

    #[test]
    fn budget_below_minimum_is_config_error() {
        let fp = fingerprint([1.0, 1.0, 1.0], [64, 64, 64]);
        match plan_dynunet(&fp, 1, 3, &MemoryBudget { units: 10.0 }, &PlannerOptions::default()) {
            Err(Error::Config(msg)) => assert!(msg.contains("minimal"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn planner_is_deterministic_and_budget_monotone() {
        let fp = fingerprint([1.0, 1.0, 1.0], [48, 48, 48]);
        let opts = PlannerOptions { base_channels: 8, ..Default::default() };
        let mut prev_volume = 0usize;
        for units in [2_000.0, 20_000.0, 60_000.0, 200_000.0, 1e6] {
            let a = plan_dynunet(&fp, 1, 3, &MemoryBudget { units }, &opts).unwrap();
            let b = plan_dynunet(&fp, 1, 3, &MemoryBudget { units }, &opts).unwrap();
            assert_eq!(a, b);
            let PatchSpec::Fixed(patch) = &a.patch else { panic!() };
            let volume: usize = patch.iter().product();
            assert!(volume >= prev_volume, "patch volume shrank under a larger budget");
            prev_volume = volume;
            assert!(estimate_memory(&a).unwrap() <= units);
        }
    }

    #[test]
    fn memory_estimate_is_linear_in_batch_and_monotone_in_patch() {
        let fp = fingerprint([1.0, 1.0, 1.0], [32, 32, 32]);
        let opts = PlannerOptions { base_channels: 8, ..Default::default() };
        let plan = plan_dynunet(&fp, 1, 2, &MemoryBudget { units: 50_000.0 }, &opts).unwrap();

        let mut b1 = plan.clone();
        b1.batch_size = 1;
        let mut b2 = plan.clone();
        b2.batch_size = 2;
        assert_eq!(estimate_memory(&b2).unwrap(), 2.0 * estimate_memory(&b1).unwrap());

        let PatchSpec::Fixed(patch) = &plan.patch else { panic!() };
        let mut bigger = plan.clone();
        let cum = plan.cumulative_strides();
        let mut p2 = patch.clone();
        p2[0] += cum[0];
        bigger.patch = PatchSpec::Fixed(p2);
        assert!(estimate_memory(&bigger).unwrap() > estimate_memory(&plan).unwrap());
    }

    #[test]
    fn memory_estimate_hand_case() {
        // two levels, stride 2 then 2, patch 8^3, channels (4, 8), batch 3:
        // level0: 4^3 * 4 = 256; level1: 2^3 * 8 = 64; total 320 * 3 = 960
        let plan = NetworkPlan {
            dims: 3,
            levels: 2,
            kernels: vec![vec![3, 3, 3]; 2],
            strides: vec![vec![2, 2, 2]; 2],
            channels: vec![4, 8],
            in_channels: 1,
            num_classes: 2,
            norm: NormKind::Instance,
            patch: PatchSpec::Fixed(vec![8, 8, 8]),
            batch_size: 3,
        };
        assert_eq!(estimate_memory(&plan).unwrap(), 960.0);
    }

    #[test]
    fn depth_groups_cover_2l_minus_1() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let hyper = UnetHyper {
            kernels: vec![vec![3, 3, 3]; 3],
            strides: vec![vec![2, 2, 2]; 3],
            channels: vec![4, 8, 16],
            patch: PatchSpec::Fixed(vec![8, 8, 8]),
            batch_size: 1,
            norm: None,
        };
        let net: Network<f32> = build_unet(3, &hyper, 1, 2, &mut rng).unwrap();
        let groups = net.depth_groups();
        assert_eq!(groups.len(), 2 * 3 - 1);
        assert!(groups.iter().all(|g| !g.is_empty()));
        // the output head sits in the output-most group
        assert!(groups.last().unwrap().iter().any(|n| n == "head.conv"));
    }

    #[test]
    fn lora_injection_counts_and_double_inject_errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let hyper = UnetHyper {
            kernels: vec![vec![3, 3], vec![3, 3]],
            strides: vec![vec![1, 1], vec![2, 2]],
            channels: vec![4, 8],
            patch: PatchSpec::Fixed(vec![8, 8]),
            batch_size: 1,
            norm: None,
        };
        let mut net: Network<f32> = build_unet(2, &hyper, 1, 3, &mut rng).unwrap();
        let cfg = LoraConfig::new(2, 2.0);
        let n = net.inject_lora(&cfg, &mut rng).unwrap();
        // enc0: 2 convs, enc1: 2, dec0: up + 2 convs, head: 1 -> 8
        assert_eq!(n, 8);
        assert!(net.has_lora());
        assert!(net.lora_param_total() > 0);
        match net.inject_lora(&cfg, &mut rng) {
            Err(Error::Usage(msg)) => assert!(msg.contains("already adapted"), "{msg}"),
            other => panic!("expected usage error, got {other:?}"),
        }
    }

    #[test]
    fn lora_injection_preserves_forward_and_merge_restores_plain() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let hyper = UnetHyper {
            kernels: vec![vec![3, 3]],
            strides: vec![vec![1, 1]],
            channels: vec![4],
            patch: PatchSpec::FullSlice,
            batch_size: 1,
            norm: None,
        };
        let mut net: Network<f64> = build_unet(2, &hyper, 1, 2, &mut rng).unwrap();
        let x = Tensor::<f64>::randn(&[1, 1, 8, 8], 1.0, &mut rng);
        let before = net.forward(&x).unwrap();
        net.inject_lora(&LoraConfig::new(2, 2.0), &mut rng).unwrap();
        let adapted = net.forward(&x).unwrap();
        for (a, b) in adapted.data().iter().zip(before.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        net.merge_lora().unwrap();
        assert!(!net.has_lora());
        let merged = net.forward(&x).unwrap();
        for (a, b) in merged.data().iter().zip(before.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn exclude_head_selector_skips_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let hyper = UnetHyper {
            kernels: vec![vec![3, 3]],
            strides: vec![vec![1, 1]],
            channels: vec![4],
            patch: PatchSpec::FullSlice,
            batch_size: 1,
            norm: None,
        };
        let mut net: Network<f32> = build_unet(2, &hyper, 1, 2, &mut rng).unwrap();
        let mut cfg = LoraConfig::new(1, 1.0);
        cfg.target = LoraTarget::ExcludeOutputHead;
        let n = net.inject_lora(&cfg, &mut rng).unwrap();
        assert_eq!(n, 2); // enc0.conv0 and enc0.conv1 only
        let head = net.layers.iter().find(|l| l.name == "head.conv").unwrap();
        assert!(matches!(&head.op, LayerOp::Conv { weight: ConvWeight::Plain(_), .. }));
    }

    #[test]
    fn param_mut_reaches_every_named_param() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let hyper = UnetHyper {
            kernels: vec![vec![3, 3], vec![3, 3]],
            strides: vec![vec![1, 1], vec![2, 2]],
            channels: vec![4, 4],
            patch: PatchSpec::Fixed(vec![8, 8]),
            batch_size: 1,
            norm: None,
        };
        let mut net: Network<f32> = build_unet(2, &hyper, 1, 2, &mut rng).unwrap();
        let names: Vec<String> = net.named_params().iter().map(|(n, _)| n.clone()).collect();
        assert!(!names.is_empty());
        for name in names {
            assert!(net.param_mut(&name).is_some(), "no mutable access to {name}");
        }
    }
}
