//! Training engine: Dice loss, AdamW with cosine annealing, the two
//! freezing schedules, early stopping, checkpointing of the best epoch
//! and per-epoch validation via sliding-window inference.

mod artifact;
mod freeze;
mod infer;
mod optim;

pub use artifact::{load_artifact, save_artifact, LoraBlocks, ModelArtifact, PreprocessMeta, WeightBlock, MODEL_FORMAT_VERSION};
pub use freeze::{freeze_plan, FreezeMode, FreezePolicy, FreezeSchedule};
pub use infer::{
    infer_slices, map_prediction_to_original, predict_bundle, predict_probs, sliding_window_infer, window_starts,
};
pub use optim::{learning_rate, AdamW, LrSchedule};

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{
    augment, compute_fingerprint, preprocess_bundle, select_slices, AugmentPolicy, LabelMap, PatchSampler,
    TrainingPatch, VolumeBundle,
};
use crate::error::{Error, Result};
use crate::lora::LoraConfig;
use crate::net::{plan_dynunet, build_unet_plan, MemoryBudget, Network, PatchSpec, PlannerOptions, UnetHyper};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const DICE_EPS: f64 = 1e-5;
pub const DEFAULT_LR_SCRATCH: f64 = 1e-3;
pub const DEFAULT_LR_FINETUNE: f64 = 1e-4;
const MAX_DEFAULT_STEPS: usize = 50;

/// Soft Dice loss on logits: softmax over channels, then
/// `1 - mean_fg (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps)`.
pub fn dice_loss<T: Scalar>(g: &mut Graph<T>, logits: Var, target: &[u16]) -> Result<Var> {
    let probs = g.softmax_channels(logits)?;
    g.dice_loss(probs, target, DICE_EPS)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// T_max.
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Initial learning rate; defaults to 1e-3 for scratch runs and
    /// 1e-4 for fine-tuning.
    #[serde(default)]
    pub lr0: Option<f64>,
    #[serde(default = "default_lr_min")]
    pub lr_min: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default)]
    pub lr_schedule: LrSchedule,
    /// Defaults to the plan's batch size.
    #[serde(default)]
    pub batch_size: Option<usize>,
    /// Defaults to ceil(foreground patches / batch), capped at 50.
    #[serde(default)]
    pub steps_per_epoch: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to the mode preset (rotation+noise+zoom for scratch,
    /// noise+zoom for fine-tuning).
    #[serde(default)]
    pub augment: Option<AugmentPolicy>,
    #[serde(default)]
    pub freeze: FreezePolicy,
    #[serde(default)]
    pub lora: Option<LoraConfig>,
    #[serde(default)]
    pub crop_margin: usize,
    #[serde(default = "default_overlap")]
    pub val_overlap: f64,
    #[serde(default)]
    pub deterministic: bool,
    /// Slices kept around each annotated slice for 2-D training.
    #[serde(default = "default_surround")]
    pub slice_surround: usize,
    /// Forward-only loss patches drawn per validation volume.
    #[serde(default = "default_val_patches")]
    pub val_patches_per_volume: usize,
}

fn default_epochs() -> usize {
    200
}
fn default_patience() -> usize {
    20
}
fn default_lr_min() -> f64 {
    1e-6
}
fn default_weight_decay() -> f64 {
    1e-4
}
fn default_overlap() -> f64 {
    0.5
}
fn default_surround() -> usize {
    1
}
fn default_val_patches() -> usize {
    2
}

impl Default for TrainConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields have defaults")
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.patience < 1 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if let Some(lr0) = self.lr0 {
            if !(lr0 > self.lr_min && self.lr_min > 0.0) {
                return Err(Error::Config(format!(
                    "need lr0 > lr_min > 0, got lr0={lr0}, lr_min={}",
                    self.lr_min
                )));
            }
        }
        if !(self.lr_min > 0.0) {
            return Err(Error::Config("lr_min must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.val_overlap) {
            return Err(Error::Config(format!("val_overlap {} outside [0, 1)", self.val_overlap)));
        }
        if let Some(b) = self.batch_size {
            if b == 0 {
                return Err(Error::Config("batch_size must be >= 1".into()));
            }
        }
        if let Some(s) = self.steps_per_epoch {
            if s == 0 {
                return Err(Error::Config("steps_per_epoch must be >= 1".into()));
            }
        }
        self.freeze.validate()?;
        if let Some(l) = &self.lora {
            l.validate()?;
        }
        if let Some(a) = &self.augment {
            a.validate()?;
        }
        Ok(())
    }
}

/// All defaults materialized; echoed into `training.json` and the run
/// manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedTrainConfig {
    pub mode: String,
    pub epochs: usize,
    pub patience: usize,
    pub lr0: f64,
    pub lr_min: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub batch_size: usize,
    pub steps_per_epoch: usize,
    pub seed: u64,
    pub augment: AugmentPolicy,
    pub freeze: FreezePolicy,
    pub lora: Option<LoraConfig>,
    pub crop_margin: usize,
    pub val_overlap: f64,
    pub deterministic: bool,
    pub slice_surround: usize,
    /// Gradual-unfreeze event epochs (empty unless mode is gradual).
    pub unfreeze_epochs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub per_label_dsc: BTreeMap<u16, f64>,
    pub mean_dsc: f64,
    pub trainable_params: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub label_names: BTreeMap<u16, String>,
    pub epochs: Vec<EpochRecord>,
    /// 1-based index of the best epoch.
    pub best_epoch: usize,
    pub best_mean_dsc: f64,
    /// Validation mean DSC before the first update (fine-tuning starts
    /// exactly at the pre-trained model's score).
    pub initial_val_dsc: f64,
}

impl MetricsRecord {
    pub fn mean_dsc_curve(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.mean_dsc).collect()
    }

    /// One row per epoch: epoch, lr, train_loss, val_loss, per-label
    /// DSC columns, mean DSC.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["epoch".to_string(), "lr".into(), "train_loss".into(), "val_loss".into()];
        for name in self.label_names.values() {
            header.push(format!("dsc_{name}"));
        }
        header.push("mean_dsc".into());
        w.write_record(&header).map_err(csv_err)?;
        for e in &self.epochs {
            let mut row = vec![
                e.epoch.to_string(),
                format!("{:.8}", e.lr),
                format!("{:.6}", e.train_loss),
                format!("{:.6}", e.val_loss),
            ];
            for id in self.label_names.keys() {
                row.push(format!("{:.6}", e.per_label_dsc.get(id).copied().unwrap_or(0.0)));
            }
            row.push(format!("{:.6}", e.mean_dsc));
            w.write_record(&row).map_err(csv_err);
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_json(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Format(format!("csv: {e}"))
}

/// Result of a training run: the exported artifact, the metrics record
/// and the best-epoch network.
pub struct TrainOutcome<T> {
    pub artifact: ModelArtifact,
    pub metrics: MetricsRecord,
    pub network: Network<T>,
    pub resolved: ResolvedTrainConfig,
}

/// Architecture selection for scratch training.
#[derive(Debug, Clone)]
pub enum Arch {
    Unet2d(UnetHyper),
    Unet3d(UnetHyper),
    DynUnet { budget: MemoryBudget, options: PlannerOptions },
}

fn consistent_label_names(bundles: &[VolumeBundle]) -> Result<BTreeMap<u16, String>> {
    let names = bundles[0].label_names.clone();
    for b in bundles {
        if b.label_names != names {
            return Err(Error::Data(format!(
                "label spaces differ across volumes: {:?} vs {:?}",
                names, b.label_names
            )));
        }
    }
    Ok(names)
}

/// Train from random initialization.
pub fn train_scratch<T: Scalar>(
    arch: &Arch,
    cfg: &TrainConfig,
    train: &[VolumeBundle],
    val: &[VolumeBundle],
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if cfg.freeze.is_finetune_axis() || cfg.lora.is_some() {
        return Err(Error::Usage(
            "freezing schedules and low-rank adapters fine-tune a pre-trained model; train from scratch without them or pass an initial model".into(),
        ));
    }
    if train.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    let all: Vec<VolumeBundle> = train.iter().chain(val.iter()).cloned().collect();
    let label_names = consistent_label_names(&all)?;
    let in_channels = train[0].channels();
    let num_classes = label_names.len() + 1;
    let fp = compute_fingerprint(train)?;

    let plan = match arch {
        Arch::Unet2d(hyper) => build_unet_plan(2, hyper, in_channels, num_classes)?,
        Arch::Unet3d(hyper) => build_unet_plan(3, hyper, in_channels, num_classes)?,
        Arch::DynUnet { budget, options } => plan_dynunet(&fp, in_channels, num_classes, budget, options)?,
    };
    let meta = PreprocessMeta::new(fp.target_spacing.clone(), plan.patch.clone(), cfg.crop_margin, label_names);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let network = Network::from_plan(plan, &mut rng)?;
    run_training(network, meta, cfg, train, val, "scratch")
}

/// Fine-tune a pre-trained model: the plan, target spacing and patch
/// size are inherited from the artifact. With `remap_labels`, a target
/// dataset with a different label space gets a freshly initialized
/// output head while the body is inherited.
pub fn train_finetune<T: Scalar>(
    init: &ModelArtifact,
    cfg: &TrainConfig,
    train: &[VolumeBundle],
    val: &[VolumeBundle],
    remap_labels: bool,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Usage("empty training set".into()));
    }
    let all: Vec<VolumeBundle> = train.iter().chain(val.iter()).cloned().collect();
    let label_names = consistent_label_names(&all)?;
    let in_channels = train[0].channels();
    if in_channels != init.plan.in_channels {
        return Err(Error::Data(format!(
            "target data has {} channels, the model expects {}",
            in_channels, init.plan.in_channels
        )));
    }
    let mut network: Network<T> = init.instantiate()?;
    if label_names != init.preprocess.label_names {
        if !remap_labels {
            return Err(Error::Data(format!(
                "label-space mismatch: model was trained on {:?}, target set has {:?} (use label remapping)",
                init.preprocess.label_names, label_names
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6865_6164);
        network.replace_head(label_names.len() + 1, &mut rng)?;
    }
    if let Some(lora_cfg) = &cfg.lora {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6c6f_7261);
        network.inject_lora(lora_cfg, &mut rng)?;
    }
    let meta = PreprocessMeta::new(
        init.preprocess.target_spacing.clone(),
        init.preprocess.patch.clone(),
        init.preprocess.crop_margin,
        label_names,
    );
    run_training(network, meta, cfg, train, val, "finetune")
}

struct Mode3d<'a> {
    samplers: Vec<PatchSampler<'a>>,
    patch: Vec<usize>,
}

struct Mode2d {
    /// (volume index, slice index) pool from positive-slice selection.
    pool: Vec<(usize, usize)>,
    stride_multiple: Vec<usize>,
}

enum SampleMode<'a> {
    Volume(Mode3d<'a>),
    Slice(Mode2d),
}

fn slice_sample(bundle: &VolumeBundle, z: usize) -> TrainingPatch {
    let shape = bundle.spatial_shape();
    let (h, w) = (shape[1], shape[2]);
    let plane = h * w;
    let depth = shape[0];
    let channels = bundle.channels();
    let mut image = vec![0.0f32; channels * plane];
    for c in 0..channels {
        let src = &bundle.image.data()[(c * depth + z) * plane..(c * depth + z + 1) * plane];
        image[c * plane..(c + 1) * plane].copy_from_slice(src);
    }
    let labels = bundle.labels.data()[z * plane..(z + 1) * plane].to_vec();
    TrainingPatch {
        image: Tensor::new(vec![channels, h, w], image).expect("slice shape"),
        labels: LabelMap::new(vec![h, w], labels).expect("slice shape"),
    }
}

/// Stack samples into `[B, C, ...]` plus a flat target vector. 2-D
/// samples of unequal extent are reflect-padded to the common
/// stride-aligned maximum.
fn stack_batch<T: Scalar>(samples: &[TrainingPatch], stride_multiple: Option<&[usize]>) -> Result<(Tensor<T>, Vec<u16>)> {
    let n = samples.len();
    let channels = samples[0].image.shape()[0];
    let target_shape: Vec<usize> = match stride_multiple {
        None => samples[0].labels.shape().to_vec(),
        Some(mult) => {
            let d = samples[0].labels.shape().len();
            (0..d)
                .map(|a| {
                    let max = samples.iter().map(|s| s.labels.shape()[a]).max().unwrap();
                    max.div_ceil(mult[a]) * mult[a]
                })
                .collect()
        }
    };
    let plane: usize = target_shape.iter().product();
    let mut image = vec![T::zero(); n * channels * plane];
    let mut target = vec![0u16; n * plane];
    for (i, s) in samples.iter().enumerate() {
        let src_shape = s.labels.shape();
        if src_shape == target_shape.as_slice() {
            for c in 0..channels {
                let dst = &mut image[(i * channels + c) * plane..(i * channels + c + 1) * plane];
                for (d, v) in dst.iter_mut().zip(&s.image.data()[c * plane..(c + 1) * plane]) {
                    *d = T::from_f64(*v as f64);
                }
            }
            target[i * plane..(i + 1) * plane].copy_from_slice(s.labels.data());
        } else {
            // 2-D reflect padding up to the batch extent
            let (h, w) = (src_shape[0], src_shape[1]);
            let (hp, wp) = (target_shape[0], target_shape[1]);
            let src_plane = h * w;
            let mut padded_plane_f = vec![0.0f32; hp * wp];
            for c in 0..channels {
                infer::reflect_pad_plane(&s.image.data()[c * src_plane..(c + 1) * src_plane], h, w, hp, wp, &mut padded_plane_f);
                let dst = &mut image[(i * channels + c) * plane..(i * channels + c + 1) * plane];
                for (d, v) in dst.iter_mut().zip(&padded_plane_f) {
                    *d = T::from_f64(*v as f64);
                }
            }
            let mut padded_labels = vec![0u16; hp * wp];
            infer::reflect_pad_plane(s.labels.data(), h, w, hp, wp, &mut padded_labels);
            target[i * plane..(i + 1) * plane].copy_from_slice(&padded_labels);
        }
    }
    let mut shape = vec![n, channels];
    shape.extend_from_slice(&target_shape);
    Ok((Tensor::new(shape, image)?, target))
}

fn default_steps(mode: &SampleMode, pre_train: &[VolumeBundle], batch: usize) -> usize {
    let total = match mode {
        SampleMode::Volume(m) => {
            let patch_voxels: usize = m.patch.iter().product();
            pre_train
                .iter()
                .map(|b| b.labels.foreground_count().div_ceil(patch_voxels.max(1)).max(1))
                .sum::<usize>()
        }
        SampleMode::Slice(m) => m.pool.len(),
    };
    total.div_ceil(batch).clamp(1, MAX_DEFAULT_STEPS)
}

fn run_training<T: Scalar>(
    mut network: Network<T>,
    meta: PreprocessMeta,
    cfg: &TrainConfig,
    train: &[VolumeBundle],
    val: &[VolumeBundle],
    mode: &str,
) -> Result<TrainOutcome<T>> {
    if val.is_empty() {
        return Err(Error::Usage("empty validation set".into()));
    }
    let is_finetune = mode == "finetune";
    let lr0 = cfg.lr0.unwrap_or(if is_finetune { DEFAULT_LR_FINETUNE } else { DEFAULT_LR_SCRATCH });
    if !(lr0 > cfg.lr_min) {
        return Err(Error::Config(format!("lr0 {lr0} must exceed lr_min {}", cfg.lr_min)));
    }
    let augment_policy = cfg
        .augment
        .clone()
        .unwrap_or_else(|| if is_finetune { AugmentPolicy::finetune_default() } else { AugmentPolicy::scratch_default() });
    augment_policy.validate()?;
    let batch = cfg.batch_size.unwrap_or(network.plan.batch_size).max(1);

    // preprocess the training set once
    let mut pre_train = Vec::with_capacity(train.len());
    for b in train {
        let (pre, _) = preprocess_bundle(b, &meta.target_spacing, meta.crop_margin)?;
        pre_train.push(pre);
    }

    let sample_mode: SampleMode = if network.plan.dims == 3 {
        let PatchSpec::Fixed(patch) = &meta.patch else {
            return Err(Error::Config("3-D training needs a fixed patch size".into()));
        };
        let samplers: Vec<PatchSampler> = pre_train
            .iter()
            .map(|b| PatchSampler::new(b, patch, PatchSampler::default_pos_fraction()))
            .collect::<Result<_>>()?;
        SampleMode::Volume(Mode3d { samplers, patch: patch.clone() })
    } else {
        let mut pool = Vec::new();
        for (i, b) in pre_train.iter().enumerate() {
            for z in select_slices(b, cfg.slice_surround)? {
                pool.push((i, z));
            }
        }
        if pool.is_empty() {
            return Err(Error::Data("no annotated slices in the training set".into()));
        }
        let cum = network.plan.cumulative_strides();
        SampleMode::Slice(Mode2d { pool, stride_multiple: cum })
    };

    let steps = cfg.steps_per_epoch.unwrap_or_else(|| default_steps(&sample_mode, &pre_train, batch));
    let schedule = freeze_plan(&network, &cfg.freeze, cfg.epochs)?;
    let resolved = ResolvedTrainConfig {
        mode: mode.to_string(),
        epochs: cfg.epochs,
        patience: cfg.patience,
        lr0,
        lr_min: cfg.lr_min,
        weight_decay: cfg.weight_decay,
        lr_schedule: cfg.lr_schedule,
        batch_size: batch,
        steps_per_epoch: steps,
        seed: cfg.seed,
        augment: augment_policy.clone(),
        freeze: cfg.freeze.clone(),
        lora: cfg.lora.clone(),
        crop_margin: meta.crop_margin,
        val_overlap: cfg.val_overlap,
        deterministic: cfg.deterministic,
        slice_surround: cfg.slice_surround,
        unfreeze_epochs: schedule.unfreeze_epochs(),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5a17));
    let mut opt = AdamW::<T>::new();

    let initial = crate::metrics::evaluate_network(&network, &meta, val, cfg.val_overlap)?;
    let initial_val_dsc = initial.mean;
    log::info!("initial validation mean DSC {initial_val_dsc:.4}");

    let mut records: Vec<EpochRecord> = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_dsc = f64::NEG_INFINITY;
    let mut best_net = network.clone();

    for epoch in 0..cfg.epochs {
        let lr = learning_rate(cfg.lr_schedule, epoch, cfg.epochs, lr0, cfg.lr_min);
        let trainable = schedule.trainable_at(epoch);
        let trainable_params = network.trainable_param_count(&trainable);

        let mut loss_sum = 0.0f64;
        for step in 0..steps {
            let mut samples = Vec::with_capacity(batch);
            match &sample_mode {
                SampleMode::Volume(m) => {
                    for _ in 0..batch {
                        let vi = rng.random_range(0..m.samplers.len());
                        let patch = m.samplers[vi].draw(&mut rng);
                        samples.push(augment(&patch, &augment_policy, &mut rng));
                    }
                }
                SampleMode::Slice(m) => {
                    for _ in 0..batch {
                        let (vi, z) = m.pool[rng.random_range(0..m.pool.len())];
                        let slice = slice_sample(&pre_train[vi], z);
                        samples.push(augment(&slice, &augment_policy, &mut rng));
                    }
                }
            }
            let stride_mult = match &sample_mode {
                SampleMode::Slice(m) => Some(m.stride_multiple.as_slice()),
                SampleMode::Volume(_) => None,
            };
            let (input, target) = stack_batch::<T>(&samples, stride_mult)?;

            let mut g = Graph::new();
            let x = g.leaf(input, false);
            let (logits, bindings) = network.forward_graph(&mut g, x, Some(&trainable))?;
            let loss = dice_loss(&mut g, logits, &target)?;
            let loss_val = g.value(loss).data()[0].to_f64();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at epoch {} step {}",
                    epoch + 1,
                    step + 1
                )));
            }
            loss_sum += loss_val;
            g.backward(loss)?;
            for binding in &bindings {
                if let Some(grad) = g.grad(binding.var) {
                    let grad = grad.to_vec();
                    let param = network
                        .param_mut(&binding.name)
                        .ok_or_else(|| Error::Usage(format!("unknown parameter {}", binding.name)))?;
                    opt.step(&binding.name, param, &grad, lr, cfg.weight_decay)?;
                }
            }
        }
        let train_loss = loss_sum / steps as f64;

        // forward-only validation loss on a fixed set of draws
        let val_loss = validation_loss(&network, &pre_train, &sample_mode, val, &meta, cfg)?;
        let report = crate::metrics::evaluate_network(&network, &meta, val, cfg.val_overlap)?;

        let record = EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss,
            val_loss,
            per_label_dsc: report.per_label.clone(),
            mean_dsc: report.mean,
            trainable_params,
        };
        records.push(record);

        if report.mean > best_dsc {
            best_dsc = report.mean;
            best_epoch = epoch + 1;
            best_net = network.clone();
        }
        log::info!(
            "epoch={} lr={:.6e} train_loss={:.4} val_loss={:.4} mean_dsc={:.4} best_dsc={:.4} best_epoch={}",
            epoch + 1,
            lr,
            train_loss,
            val_loss,
            report.mean,
            best_dsc,
            best_epoch
        );
        if (epoch + 1) - best_epoch >= cfg.patience {
            log::info!("early stop at epoch {} (best {})", epoch + 1, best_epoch);
            break;
        }
    }

    let metrics = MetricsRecord {
        label_names: meta.label_names.clone(),
        epochs: records,
        best_epoch,
        best_mean_dsc: best_dsc,
        initial_val_dsc,
    };
    let artifact = ModelArtifact::from_network(&best_net, meta, serde_json::to_value(&resolved)?)?;
    Ok(TrainOutcome { artifact, metrics, network: best_net, resolved })
}

/// Dice loss on deterministic validation draws (same draws every epoch,
/// so the curve is comparable across epochs).
fn validation_loss<T: Scalar>(
    network: &Network<T>,
    _pre_train: &[VolumeBundle],
    sample_mode: &SampleMode,
    val: &[VolumeBundle],
    meta: &PreprocessMeta,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x76a1));
    let mut losses = Vec::new();
    for b in val {
        let (pre, _) = preprocess_bundle(b, &meta.target_spacing, meta.crop_margin)?;
        let samples: Vec<TrainingPatch> = match sample_mode {
            SampleMode::Volume(m) => {
                let sampler = PatchSampler::new(&pre, &m.patch, PatchSampler::default_pos_fraction())?;
                (0..cfg.val_patches_per_volume).map(|_| sampler.draw(&mut rng)).collect()
            }
            SampleMode::Slice(_) => {
                let slices = select_slices(&pre, cfg.slice_surround)?;
                if slices.is_empty() {
                    continue;
                }
                (0..cfg.val_patches_per_volume)
                    .map(|_| slice_sample(&pre, slices[rng.random_range(0..slices.len())]))
                    .collect()
            }
        };
        let stride_mult = match sample_mode {
            SampleMode::Slice(m) => Some(m.stride_multiple.as_slice()),
            SampleMode::Volume(_) => None,
        };
        for s in samples {
            let (input, target) = stack_batch::<T>(&[s], stride_mult)?;
            let mut g = Graph::new();
            let x = g.leaf(input, false);
            let (logits, _) = network.forward_graph(&mut g, x, None)?;
            let loss = dice_loss(&mut g, logits, &target)?;
            losses.push(g.value(loss).data()[0].to_f64());
        }
    }
    if losses.is_empty() {
        return Ok(f64::NAN);
    }
    Ok(losses.iter().sum::<f64>() / losses.len() as f64)
}
