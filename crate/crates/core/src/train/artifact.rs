//! Model artifact: architecture plan + weights + preprocessing metadata
//! + optional adapter state, stored as a single tar archive.
//!
//! Entries:
//!
//! * `manifest.json`   - format version, per-parameter offsets into the
//!   raw blocks, SHA-256 checksums of every entry;
//! * `arch.json`       - the [`NetworkPlan`];
//! * `preprocess.json` - target spacing, patch size, normalization mode,
//!   label names;
//! * `training.json`   - echo of the resolved training configuration;
//! * `weights.raw`     - all base parameters, 32-bit little-endian, in
//!   manifest order (adapter layers contribute their merged weights);
//! * `lora.json` / `lora.raw` - adapter factors plus the frozen
//!   original weights, present only for adapted models.

use std::collections::BTreeMap;
use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::bundle_io::{read_archive, sha256_hex, take_entry, tar_entry, verify_checksum};
use crate::error::{Error, Result};
use crate::lora::LoraState;
use crate::net::{ConvWeight, LayerOp, Network, NetworkPlan, PatchSpec};
use crate::tensor::{Scalar, Tensor};

pub const MODEL_FORMAT_VERSION: u32 = 1;

/// Preprocessing settings a model was trained with; inference must
/// reuse them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreprocessMeta {
    pub target_spacing: Vec<f64>,
    pub patch: PatchSpec,
    pub normalization: String,
    pub crop_margin: usize,
    pub label_names: BTreeMap<u16, String>,
}

impl PreprocessMeta {
    pub fn new(target_spacing: Vec<f64>, patch: PatchSpec, crop_margin: usize, label_names: BTreeMap<u16, String>) -> Self {
        PreprocessMeta {
            target_spacing,
            patch,
            normalization: "nonzero_zscore".to_string(),
            crop_margin,
            label_names,
        }
    }
}

/// One named flat parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Adapter state: per adapted layer the factors plus the frozen weight.
#[derive(Debug, Clone, PartialEq)]
pub struct LoraBlocks {
    pub rank: usize,
    pub alpha: f64,
    pub layers: Vec<String>,
    pub blocks: Vec<WeightBlock>,
}

/// The ".model"-equivalent interchange object.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelArtifact {
    pub plan: NetworkPlan,
    pub preprocess: PreprocessMeta,
    pub weights: Vec<WeightBlock>,
    pub lora: Option<LoraBlocks>,
    pub training: serde_json::Value,
}

fn block_from_tensor<T: Scalar>(name: String, t: &Tensor<T>) -> WeightBlock {
    WeightBlock { name, shape: t.shape().to_vec(), data: t.data().iter().map(|&v| v.to_f64() as f32).collect() }
}

fn tensor_from_block<T: Scalar>(block: &WeightBlock) -> Result<Tensor<T>> {
    Tensor::new(block.shape.clone(), block.data.iter().map(|&v| T::from_f64(v as f64)).collect())
}

impl ModelArtifact {
    /// Capture a network. Adapted layers export their merged weight in
    /// the base block (plain loaders see the fine-tuned model) while the
    /// adapter factors and frozen originals go to the side blocks.
    pub fn from_network<T: Scalar>(
        network: &Network<T>,
        preprocess: PreprocessMeta,
        training: serde_json::Value,
    ) -> Result<Self> {
        let mut weights = Vec::new();
        let mut lora_layers = Vec::new();
        let mut lora_blocks = Vec::new();
        let mut rank_alpha: Option<(usize, f64)> = None;
        for layer in &network.layers {
            match &layer.op {
                LayerOp::Conv { weight, bias, .. } => {
                    match weight {
                        ConvWeight::Plain(w) => {
                            weights.push(block_from_tensor(format!("{}.weight", layer.name), w));
                        }
                        ConvWeight::Adapted(state) => {
                            let merged = crate::lora::merge(state)?;
                            weights.push(block_from_tensor(format!("{}.weight", layer.name), &merged));
                            lora_blocks.push(block_from_tensor(format!("{}.lora_a", layer.name), &state.a));
                            lora_blocks.push(block_from_tensor(format!("{}.lora_b", layer.name), &state.b));
                            lora_blocks
                                .push(block_from_tensor(format!("{}.frozen_weight", layer.name), &state.frozen_weight));
                            lora_layers.push(layer.name.clone());
                            rank_alpha = Some((state.rank, state.alpha));
                        }
                    }
                    weights.push(block_from_tensor(format!("{}.bias", layer.name), bias));
                }
                LayerOp::Norm { gamma, beta, .. } => {
                    weights.push(block_from_tensor(format!("{}.gamma", layer.name), gamma));
                    weights.push(block_from_tensor(format!("{}.beta", layer.name), beta));
                }
                _ => {}
            }
        }
        let lora = rank_alpha.map(|(rank, alpha)| LoraBlocks { rank, alpha, layers: lora_layers, blocks: lora_blocks });
        Ok(ModelArtifact { plan: network.plan.clone(), preprocess, weights, lora, training })
    }

    /// Rebuild the network. When adapter state is present it is
    /// re-attached (frozen weight + factors), so the instantiated model
    /// computes the same adapted forward pass that was saved.
    pub fn instantiate<T: Scalar>(&self) -> Result<Network<T>> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut network: Network<T> = Network::from_plan(self.plan.clone(), &mut rng)
            .map_err(|e| Error::Format(format!("artifact plan does not build: {e}")))?;
        let mut filled = 0usize;
        for block in &self.weights {
            let param = network
                .param_mut(&block.name)
                .ok_or_else(|| Error::Format(format!("artifact names unknown parameter {}", block.name)))?;
            if param.shape() != block.shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter {} has shape {:?} in the artifact but {:?} in the plan",
                    block.name,
                    block.shape,
                    param.shape()
                )));
            }
            *param = tensor_from_block(block)?;
            filled += 1;
        }
        let expected = network.named_params().len();
        if filled != expected {
            return Err(Error::Format(format!(
                "artifact supplies {filled} parameters, plan expects {expected}",
            )));
        }
        if let Some(lora) = &self.lora {
            let lookup = |name: &str| -> Result<&WeightBlock> {
                lora.blocks
                    .iter()
                    .find(|b| b.name == name)
                    .ok_or_else(|| Error::Format(format!("adapter block {name} missing")))
            };
            for layer in &lora.layers {
                let a = tensor_from_block::<T>(lookup(&format!("{layer}.lora_a"))?)?;
                let b = tensor_from_block::<T>(lookup(&format!("{layer}.lora_b"))?)?;
                let frozen = tensor_from_block::<T>(lookup(&format!("{layer}.frozen_weight"))?)?;
                network.set_adapter(layer, a, b, frozen, lora.rank, lora.alpha)?;
            }
        }
        Ok(network)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BlockEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct ModelManifest {
    format_version: u32,
    weights: Vec<BlockEntry>,
    #[serde(default)]
    lora: Vec<BlockEntry>,
    checksums: BTreeMap<String, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct LoraHeader {
    rank: usize,
    alpha: f64,
    layers: Vec<String>,
}

fn pack_blocks(blocks: &[WeightBlock]) -> (Vec<u8>, Vec<BlockEntry>) {
    let mut raw = Vec::new();
    let mut entries = Vec::with_capacity(blocks.len());
    for block in blocks {
        let offset = raw.len();
        for v in &block.data {
            raw.extend_from_slice(&v.to_le_bytes());
        }
        entries.push(BlockEntry {
            name: block.name.clone(),
            shape: block.shape.clone(),
            offset,
            len: block.data.len(),
        });
    }
    (raw, entries)
}

fn unpack_blocks(raw: &[u8], entries: &[BlockEntry]) -> Result<Vec<WeightBlock>> {
    let mut blocks = Vec::with_capacity(entries.len());
    for e in entries {
        let start = e.offset;
        let end = start + e.len * 4;
        if end > raw.len() {
            return Err(Error::Format(format!("block {} reaches past the raw payload", e.name)));
        }
        let numel: usize = e.shape.iter().product();
        if numel != e.len {
            return Err(Error::Format(format!(
                "block {} declares shape {:?} but {} values",
                e.name, e.shape, e.len
            )));
        }
        let data: Vec<f32> = raw[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        blocks.push(WeightBlock { name: e.name.clone(), shape: e.shape.clone(), data });
    }
    Ok(blocks)
}

/// Write a model artifact (deterministic bytes for identical artifacts).
pub fn save_artifact(artifact: &ModelArtifact, path: &Path) -> Result<()> {
    artifact.plan.validate()?;
    let (weights_raw, weight_entries) = pack_blocks(&artifact.weights);
    let (lora_raw, lora_entries) = match &artifact.lora {
        Some(l) => pack_blocks(&l.blocks),
        None => (Vec::new(), Vec::new()),
    };

    let arch = serde_json::to_vec_pretty(&artifact.plan)?;
    let preprocess = serde_json::to_vec_pretty(&artifact.preprocess)?;
    let training = serde_json::to_vec_pretty(&artifact.training)?;
    let lora_header = artifact
        .lora
        .as_ref()
        .map(|l| serde_json::to_vec_pretty(&LoraHeader { rank: l.rank, alpha: l.alpha, layers: l.layers.clone() }))
        .transpose()?;

    let mut checksums = BTreeMap::new();
    checksums.insert("arch.json".to_string(), sha256_hex(&arch));
    checksums.insert("preprocess.json".to_string(), sha256_hex(&preprocess));
    checksums.insert("training.json".to_string(), sha256_hex(&training));
    checksums.insert("weights.raw".to_string(), sha256_hex(&weights_raw));
    if let Some(h) = &lora_header {
        checksums.insert("lora.json".to_string(), sha256_hex(h));
        checksums.insert("lora.raw".to_string(), sha256_hex(&lora_raw));
    }
    let manifest = ModelManifest {
        format_version: MODEL_FORMAT_VERSION,
        weights: weight_entries,
        lora: lora_entries,
        checksums,
    };
    let manifest_bytes = serde_json::to_vec_pretty(&manifest)?;

    let file = File::create(path)?;
    let mut builder = tar::Builder::new(file);
    tar_entry(&mut builder, "manifest.json", &manifest_bytes)?;
    tar_entry(&mut builder, "arch.json", &arch)?;
    tar_entry(&mut builder, "preprocess.json", &preprocess)?;
    tar_entry(&mut builder, "training.json", &training)?;
    tar_entry(&mut builder, "weights.raw", &weights_raw)?;
    if let Some(h) = &lora_header {
        tar_entry(&mut builder, "lora.json", h)?;
        tar_entry(&mut builder, "lora.raw", &lora_raw)?;
    }
    builder.into_inner()?.sync_all().ok();
    Ok(())
}

/// Load and verify a model artifact.
pub fn load_artifact(path: &Path) -> Result<ModelArtifact> {
    let mut entries = read_archive(path)?;
    let manifest_bytes = take_entry(&mut entries, "manifest.json", path)?;
    let manifest: ModelManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Format(format!("{}: bad manifest: {e}", path.display())))?;
    if manifest.format_version != MODEL_FORMAT_VERSION {
        return Err(Error::Version { found: manifest.format_version, expected: MODEL_FORMAT_VERSION });
    }

    let mut read_checked = |name: &str| -> Result<Vec<u8>> {
        let data = take_entry(&mut entries, name, path)?;
        verify_checksum(name, &data, &manifest.checksums, path)?;
        Ok(data)
    };
    let arch = read_checked("arch.json")?;
    let preprocess = read_checked("preprocess.json")?;
    let training = read_checked("training.json")?;
    let weights_raw = read_checked("weights.raw")?;

    let plan: NetworkPlan =
        serde_json::from_slice(&arch).map_err(|e| Error::Format(format!("{}: bad arch.json: {e}", path.display())))?;
    let preprocess: PreprocessMeta = serde_json::from_slice(&preprocess)
        .map_err(|e| Error::Format(format!("{}: bad preprocess.json: {e}", path.display())))?;
    let training: serde_json::Value = serde_json::from_slice(&training)
        .map_err(|e| Error::Format(format!("{}: bad training.json: {e}", path.display())))?;
    let weights = unpack_blocks(&weights_raw, &manifest.weights)?;

    let lora = if manifest.checksums.contains_key("lora.json") {
        let header_bytes = read_checked("lora.json")?;
        let lora_raw = read_checked("lora.raw")?;
        let header: LoraHeader = serde_json::from_slice(&header_bytes)
            .map_err(|e| Error::Format(format!("{}: bad lora.json: {e}", path.display())))?;
        Some(LoraBlocks {
            rank: header.rank,
            alpha: header.alpha,
            layers: header.layers,
            blocks: unpack_blocks(&lora_raw, &manifest.lora)?,
        })
    } else {
        None
    };

    Ok(ModelArtifact { plan, preprocess, weights, lora, training })
}

impl<T: Scalar> Network<T> {
    /// Attach a saved adapter to a layer, replacing its plain weight
    /// with the frozen original plus factors.
    pub fn set_adapter(
        &mut self,
        layer_name: &str,
        a: Tensor<T>,
        b: Tensor<T>,
        frozen_weight: Tensor<T>,
        rank: usize,
        alpha: f64,
    ) -> Result<()> {
        let layer = self
            .layers
            .iter_mut()
            .find(|l| l.name == layer_name)
            .ok_or_else(|| Error::Format(format!("adapter targets unknown layer {layer_name}")))?;
        let LayerOp::Conv { spec, weight, .. } = &mut layer.op else {
            return Err(Error::Format(format!("adapter targets non-conv layer {layer_name}")));
        };
        if frozen_weight.shape() != spec.weight_shape().as_slice() {
            return Err(Error::Format(format!(
                "frozen weight shape {:?} does not match layer {layer_name}",
                frozen_weight.shape()
            )));
        }
        *weight = ConvWeight::Adapted(LoraState { a, b, frozen_weight, spec: spec.clone(), rank, alpha });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lora::LoraConfig;
    use crate::net::{build_unet, UnetHyper};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn demo_network() -> Network<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let hyper = UnetHyper {
            kernels: vec![vec![3, 3], vec![3, 3]],
            strides: vec![vec![1, 1], vec![2, 2]],
            channels: vec![4, 8],
            patch: PatchSpec::Fixed(vec![8, 8]),
            batch_size: 1,
            norm: None,
        };
        build_unet(2, &hyper, 1, 3, &mut rng).unwrap()
    }

    fn meta() -> PreprocessMeta {
        let mut names = BTreeMap::new();
        names.insert(1, "a".to_string());
        names.insert(2, "b".to_string());
        PreprocessMeta::new(vec![1.0, 1.0], PatchSpec::Fixed(vec![8, 8]), 0, names)
    }

    #[test]
    fn round_trip_preserves_forward_bits() {
        let net = demo_network();
        let artifact = ModelArtifact::from_network(&net, meta(), serde_json::json!({"seed": 1})).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tar");
        save_artifact(&artifact, &path).unwrap();
        let loaded = load_artifact(&path).unwrap();
        assert_eq!(loaded.plan, net.plan);
        assert_eq!(loaded, artifact);

        let rebuilt: Network<f32> = loaded.instantiate().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::<f32>::randn(&[1, 1, 8, 8], 1.0, &mut rng);
        let y0 = net.forward(&x).unwrap();
        let y1 = rebuilt.forward(&x).unwrap();
        assert!(y0.data().iter().zip(y1.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn inherit_plan_round_trips() {
        let net = demo_network();
        let artifact = ModelArtifact::from_network(&net, meta(), serde_json::Value::Null).unwrap();
        let plan = crate::net::inherit_plan(&artifact).unwrap();
        assert_eq!(plan, net.plan);
    }

    #[test]
    fn adapted_artifact_reloads_identical_adapted_forward() {
        let mut net = demo_network();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        net.inject_lora(&LoraConfig::new(2, 2.0), &mut rng).unwrap();
        // give the factors non-trivial values
        for layer in net.layer_names() {
            if let Some(t) = net.param_mut(&format!("{layer}.lora_a")) {
                *t = Tensor::randn(t.shape(), 0.2, &mut rng);
            }
        }
        let x = Tensor::<f32>::randn(&[1, 1, 8, 8], 1.0, &mut rng);
        let y0 = net.forward(&x).unwrap();

        let artifact = ModelArtifact::from_network(&net, meta(), serde_json::Value::Null).unwrap();
        assert!(artifact.lora.is_some());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tar");
        save_artifact(&artifact, &path).unwrap();
        let rebuilt: Network<f32> = load_artifact(&path).unwrap().instantiate().unwrap();
        assert!(rebuilt.has_lora());
        let y1 = rebuilt.forward(&x).unwrap();
        assert!(y0.data().iter().zip(y1.data()).all(|(a, b)| a.to_bits() == b.to_bits()));

        // and the merged view (plain weights) matches within float error
        let mut merged = load_artifact(&path).unwrap();
        merged.lora = None;
        let plain: Network<f32> = merged.instantiate().unwrap();
        assert!(!plain.has_lora());
        let y2 = plain.forward(&x).unwrap();
        for (a, b) in y0.data().iter().zip(y2.data()) {
            assert!((a - b).abs() < 1e-4 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn tampered_weights_fail_checksum() {
        let artifact = ModelArtifact::from_network(&demo_network(), meta(), serde_json::Value::Null).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tar");
        save_artifact(&artifact, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // corrupt a byte in the middle of the archive payload
        let idx = bytes.len() / 2;
        bytes[idx] ^= 0x55;
        std::fs::write(&path, bytes).unwrap();
        assert!(load_artifact(&path).is_err());
    }

    #[test]
    fn save_is_byte_deterministic() {
        let artifact = ModelArtifact::from_network(&demo_network(), meta(), serde_json::json!({"x": 1})).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.tar"), dir.path().join("b.tar"));
        save_artifact(&artifact, &p1).unwrap();
        save_artifact(&artifact, &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn corrupted_manifest_is_format_error() {
        let artifact = ModelArtifact::from_network(&demo_network(), meta(), serde_json::Value::Null).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.tar");
        save_artifact(&artifact, &path).unwrap();
        // overwrite with an archive whose manifest is not JSON
        let file = File::create(&path).unwrap();
        let mut builder = tar::Builder::new(file);
        tar_entry(&mut builder, "manifest.json", b"not json").unwrap();
        builder.finish().unwrap();
        assert!(matches!(load_artifact(&path), Err(Error::Format(_))));
    }
}
