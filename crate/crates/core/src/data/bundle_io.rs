//! Bundle container I/O.
//!
//! A bundle is a single POSIX tar archive with three entries:
//!
//! * `manifest.json` - format version, shape, channels, spacing,
//!   label-name table and per-entry SHA-256 checksums;
//! * `image.raw`     - 32-bit little-endian floats, row-major
//!   `[C, spatial...]`;
//! * `labels.raw`    - 16-bit little-endian unsigned ints, row-major
//!   `[spatial...]`.
//!
//! All tar headers carry zero mtimes so identical bundles are
//! byte-identical on disk.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{LabelMap, VolumeBundle};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BUNDLE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct BundleManifest {
    format_version: u32,
    shape: Vec<usize>,
    channels: usize,
    spacing_mm: Vec<f64>,
    label_names: BTreeMap<u16, String>,
    checksums: BTreeMap<String, String>,
}

pub(crate) fn sha256_hex(data: &[u8]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(data);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

pub(crate) fn tar_entry(builder: &mut tar::Builder<impl Write>, name: &str, data: &[u8]) -> Result<()> {
    let mut header = tar::Header::new_gnu();
    header.set_size(data.len() as u64);
    header.set_mode(0o644);
    header.set_mtime(0);
    header.set_cksum();
    builder.append_data(&mut header, name, data)?;
    Ok(())
}

/// Read every entry of a tar archive into memory.
pub(crate) fn read_archive(path: &Path) -> Result<HashMap<String, Vec<u8>>> {
    let file = File::open(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    let mut archive = tar::Archive::new(file);
    let mut entries = HashMap::new();
    let iter = archive.entries().map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    for entry in iter {
        let mut entry = entry.map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        let name = entry
            .path()
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?
            .to_string_lossy()
            .into_owned();
        let mut data = Vec::with_capacity(entry.size() as usize);
        entry
            .read_to_end(&mut data)
            .map_err(|e| Error::Format(format!("{}: truncated entry {name}: {e}", path.display())))?;
        entries.insert(name, data);
    }
    Ok(entries)
}

pub(crate) fn take_entry(entries: &mut HashMap<String, Vec<u8>>, name: &str, path: &Path) -> Result<Vec<u8>> {
    entries
        .remove(name)
        .ok_or_else(|| Error::Format(format!("{}: missing entry {name}", path.display())))
}

pub(crate) fn verify_checksum(name: &str, data: &[u8], checksums: &BTreeMap<String, String>, path: &Path) -> Result<()> {
    let expected = checksums
        .get(name)
        .ok_or_else(|| Error::Format(format!("{}: no checksum recorded for {name}", path.display())))?;
    let actual = sha256_hex(data);
    if &actual != expected {
        return Err(Error::Format(format!(
            "{}: checksum mismatch for {name} (expected {expected}, got {actual})",
            path.display()
        )));
    }
    Ok(())
}

/// Write a bundle archive. Lossless: image 32-bit, labels unsigned
/// 16-bit, spacing 64-bit.
pub fn save_bundle(bundle: &VolumeBundle, path: &Path) -> Result<()> {
    bundle.validate()?;
    let image_bytes: Vec<u8> = bundle.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    let label_bytes: Vec<u8> = bundle.labels.data().iter().flat_map(|v| v.to_le_bytes()).collect();

    let mut checksums = BTreeMap::new();
    checksums.insert("image.raw".to_string(), sha256_hex(&image_bytes));
    checksums.insert("labels.raw".to_string(), sha256_hex(&label_bytes));

    let manifest = BundleManifest {
        format_version: BUNDLE_FORMAT_VERSION,
        shape: bundle.spatial_shape().to_vec(),
        channels: bundle.channels(),
        spacing_mm: bundle.spacing.clone(),
        label_names: bundle.label_names.clone(),
        checksums,
    };
    let manifest_bytes = serde_json::to_vec_pretty(&manifest)?;

    let file = File::create(path)?;
    let mut builder = tar::Builder::new(file);
    tar_entry(&mut builder, "manifest.json", &manifest_bytes)?;
    tar_entry(&mut builder, "image.raw", &image_bytes)?;
    tar_entry(&mut builder, "labels.raw", &label_bytes)?;
    builder.into_inner()?.sync_all().ok();
    Ok(())
}

/// Load and validate a bundle archive.
pub fn load_bundle(path: &Path) -> Result<VolumeBundle> {
    let mut entries = read_archive(path)?;
    let manifest_bytes = take_entry(&mut entries, "manifest.json", path)?;
    let manifest: BundleManifest = serde_json::from_slice(&manifest_bytes)
        .map_err(|e| Error::Format(format!("{}: bad manifest: {e}", path.display())))?;
    if manifest.format_version != BUNDLE_FORMAT_VERSION {
        return Err(Error::Version { found: manifest.format_version, expected: BUNDLE_FORMAT_VERSION });
    }

    let image_bytes = take_entry(&mut entries, "image.raw", path)?;
    let label_bytes = take_entry(&mut entries, "labels.raw", path)?;
    verify_checksum("image.raw", &image_bytes, &manifest.checksums, path)?;
    verify_checksum("labels.raw", &label_bytes, &manifest.checksums, path)?;

    let voxels: usize = manifest.shape.iter().product();
    if image_bytes.len() != voxels * manifest.channels * 4 {
        return Err(Error::Format(format!(
            "{}: image.raw holds {} bytes, expected {}",
            path.display(),
            image_bytes.len(),
            voxels * manifest.channels * 4
        )));
    }
    if label_bytes.len() != voxels * 2 {
        return Err(Error::Format(format!(
            "{}: labels.raw holds {} bytes, expected {}",
            path.display(),
            label_bytes.len(),
            voxels * 2
        )));
    }

    let image: Vec<f32> = image_bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let labels: Vec<u16> = label_bytes.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect();

    let mut image_shape = vec![manifest.channels];
    image_shape.extend_from_slice(&manifest.shape);
    VolumeBundle::new(
        Tensor::new(image_shape, image).map_err(|e| Error::Format(e.to_string()))?,
        LabelMap::new(manifest.shape, labels).map_err(|e| Error::Format(e.to_string()))?,
        manifest.spacing_mm,
        manifest.label_names,
    )
    .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write as _;

    fn demo_bundle() -> VolumeBundle {
        let image = Tensor::new(vec![2, 2, 3], (0..12).map(|i| i as f32 * 0.5 - 1.0).collect()).unwrap();
        let labels = LabelMap::new(vec![2, 3], vec![0, 1, 0, 2, 1, 0]).unwrap();
        let mut names = BTreeMap::new();
        names.insert(1, "left".to_string());
        names.insert(2, "right".to_string());
        VolumeBundle::new(image, labels, vec![1.5, 0.8], names).unwrap()
    }

    #[test]
    fn round_trip_is_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.bundle");
        let bundle = demo_bundle();
        save_bundle(&bundle, &path).unwrap();
        let loaded = load_bundle(&path).unwrap();
        assert_eq!(loaded, bundle);
        assert_eq!(loaded.spacing, vec![1.5, 0.8]);
    }

    #[test]
    fn spacing_survives_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.bundle");
        let mut bundle = demo_bundle();
        bundle.spacing = vec![1.5, 0.8];
        save_bundle(&bundle, &path).unwrap();
        assert_eq!(load_bundle(&path).unwrap().spacing, vec![1.5, 0.8]);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bundle"), dir.path().join("b.bundle"));
        save_bundle(&demo_bundle(), &p1).unwrap();
        save_bundle(&demo_bundle(), &p2).unwrap();
        assert_eq!(std::fs::read(p1).unwrap(), std::fs::read(p2).unwrap());
    }

    #[test]
    fn truncated_file_is_format_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.bundle");
        save_bundle(&demo_bundle(), &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_bundle(&path), Err(Error::Format(_))));
    }

    #[test]
    fn tampered_payload_fails_checksum() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.bundle");
        save_bundle(&demo_bundle(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        // locate the image payload (first voxel is -1.0) and corrupt it
        let needle = (-1.0f32).to_le_bytes();
        let idx = bytes.windows(4).position(|w| w == needle).unwrap();
        bytes[idx + 1] ^= 0xff;
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(&bytes).unwrap();
        match load_bundle(&path) {
            Err(Error::Format(msg)) => assert!(msg.contains("checksum") || msg.contains("manifest"), "{msg}"),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_version_is_version_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vol.bundle");
        let bundle = demo_bundle();
        // hand-roll an archive with a bumped version
        let image_bytes: Vec<u8> = bundle.image.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let label_bytes: Vec<u8> = bundle.labels.data().iter().flat_map(|v| v.to_le_bytes()).collect();
        let mut checksums = BTreeMap::new();
        checksums.insert("image.raw".into(), sha256_hex(&image_bytes));
        checksums.insert("labels.raw".into(), sha256_hex(&label_bytes));
        let manifest = BundleManifest {
            format_version: 99,
            shape: bundle.spatial_shape().to_vec(),
            channels: 2,
            spacing_mm: bundle.spacing.clone(),
            label_names: bundle.label_names.clone(),
            checksums,
        };
        let file = File::create(&path).unwrap();
        let mut builder = tar::Builder::new(file);
        tar_entry(&mut builder, "manifest.json", &serde_json::to_vec(&manifest).unwrap()).unwrap();
        tar_entry(&mut builder, "image.raw", &image_bytes).unwrap();
        tar_entry(&mut builder, "labels.raw", &label_bytes).unwrap();
        builder.finish().unwrap();
        assert!(matches!(load_bundle(&path), Err(Error::Version { found: 99, .. })));
    }
}
