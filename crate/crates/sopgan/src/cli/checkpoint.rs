//! Model checkpoints: a magic/version header, a JSON manifest describing
//! the architecture and tensor directory, then raw little-endian f64
//! payload. Bit-exact: saving the same model twice yields identical files.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cli::RunConfig;
use crate::dsp::NormStats;
use crate::error::{Error, Result};
use crate::gan::GanModel;
use crate::seed;

const MAGIC: &[u8; 8] = b"SOPGANCK";
const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    latent_dim: usize,
    image_shape: [usize; 3],
    base_channels: usize,
    feature_layer_index: usize,
    norm_stats: Option<NormStats>,
    config: RunConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    offset: u64,
}

fn write_parts(path: &Path, manifest: &Manifest, payload: &[f64]) -> Result<()> {
    let manifest_bytes = serde_json::to_vec(manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization: {e}")))?;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(manifest_bytes.len() as u64).to_le_bytes())?;
    out.write_all(&manifest_bytes)?;
    for v in payload {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn save(path: &Path, model: &GanModel, config: &RunConfig) -> Result<()> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, shape, data) in model.entries() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            shape,
            offset: (payload.len() * 8) as u64,
        });
        payload.extend(data);
    }
    let manifest = Manifest {
        latent_dim: model.latent_dim,
        image_shape: model.image_shape,
        base_channels: model.base_channels,
        feature_layer_index: model.feature_layer_index,
        norm_stats: model.norm_stats,
        config: config.clone(),
        tensors,
    };
    write_parts(path, &manifest, &payload)
}

fn corrupt(path: &Path, what: &str) -> Error {
    Error::Checkpoint(format!("{}: {what}", path.display()))
}

pub fn load(path: &Path) -> Result<(GanModel, RunConfig)> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 20 {
        return Err(corrupt(path, "file shorter than the fixed header"));
    }
    if &bytes[0..8] != MAGIC {
        return Err(corrupt(path, "bad magic (not a model checkpoint)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(corrupt(
            path,
            &format!("unsupported version {version} (expected {VERSION})"),
        ));
    }
    let manifest_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let payload_start = 20usize
        .checked_add(manifest_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt(path, "manifest length exceeds file size"))?;
    let manifest: Manifest = serde_json::from_slice(&bytes[20..payload_start])
        .map_err(|e| corrupt(path, &format!("manifest parse: {e}")))?;

    let payload = &bytes[payload_start..];
    if payload.len() % 8 != 0 {
        return Err(corrupt(path, "payload is not a whole number of f64s"));
    }
    let total_expected: usize = manifest
        .tensors
        .iter()
        .map(|t| t.shape.iter().product::<usize>() * 8)
        .sum();
    if total_expected != payload.len() {
        return Err(corrupt(
            path,
            &format!(
                "manifest declares {total_expected} payload bytes, file has {}",
                payload.len()
            ),
        ));
    }

    let mut model = GanModel::build(
        manifest.latent_dim,
        manifest.image_shape,
        manifest.base_channels,
        &mut seed::rng(0),
    )
    .map_err(|e| corrupt(path, &format!("architecture: {e}")))?;
    model.feature_layer_index = manifest.feature_layer_index;
    model.norm_stats = manifest.norm_stats;

    let mut seen = Vec::with_capacity(manifest.tensors.len());
    for entry in &manifest.tensors {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start
            .checked_add(numel * 8)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| {
                corrupt(path, &format!("tensor {} overruns the payload", entry.name))
            })?;
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        model
            .set_entry(&entry.name, &entry.shape, data)
            .map_err(|e| corrupt(path, &format!("tensor {}: {e}", entry.name)))?;
        seen.push(entry.name.as_str());
    }
    for (name, _, _) in model.entries() {
        if !seen.contains(&name) {
            return Err(corrupt(path, &format!("tensor {name} missing from manifest")));
        }
    }
    Ok((model, manifest.config))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> GanModel {
        GanModel::build(4, [1, 8, 8], 4, &mut seed::rng(5)).unwrap()
    }

    fn entry_data(model: &GanModel) -> Vec<(&'static str, Vec<usize>, Vec<f64>)> {
        model.entries()
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut model = tiny_model();
        model.norm_stats = Some(NormStats::new(-80.0, -10.0).unwrap());
        let cfg = RunConfig::default();
        save(&path, &model, &cfg).unwrap();
        let (loaded, loaded_cfg) = load(&path).unwrap();
        for ((n0, s0, d0), (n1, s1, d1)) in entry_data(&model).iter().zip(entry_data(&loaded)) {
            assert_eq!(*n0, n1);
            assert_eq!(*s0, s1);
            assert!(
                d0.iter().zip(&d1).all(|(a, b)| a.to_bits() == b.to_bits()),
                "tensor {n0} not bit-identical"
            );
        }
        assert_eq!(loaded.latent_dim, model.latent_dim);
        assert_eq!(loaded.image_shape, model.image_shape);
        assert_eq!(loaded.norm_stats.unwrap().lo, -80.0);
        assert_eq!(loaded_cfg.seed, cfg.seed);

        // saving the loaded model reproduces the file byte for byte
        let path2 = dir.path().join("model2.ckpt");
        save(&path2, &loaded, &loaded_cfg).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("not_a_ckpt");
        std::fs::write(&path, b"HELLO WORLD PADDING PADDING").unwrap();
        assert!(matches!(load(&path), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn unknown_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &tiny_model(), &RunConfig::default()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[8] = 9; // version 9
        std::fs::write(&path, &bytes).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("version"), "{err}");
    }

    #[test]
    fn truncation_anywhere_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(&path, &tiny_model(), &RunConfig::default()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [3, 12, 19, 40, bytes.len() / 2, bytes.len() - 8, bytes.len() - 1] {
            let path_cut = dir.path().join("cut.ckpt");
            std::fs::write(&path_cut, &bytes[..cut]).unwrap();
            assert!(
                matches!(load(&path_cut), Err(Error::Checkpoint(_))),
                "cut at {cut} not caught"
            );
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model();
        let mut manifest = Manifest {
            latent_dim: model.latent_dim,
            image_shape: model.image_shape,
            base_channels: model.base_channels,
            feature_layer_index: model.feature_layer_index,
            norm_stats: None,
            config: RunConfig::default(),
            tensors: Vec::new(),
        };
        let mut payload = Vec::new();
        for (name, mut shape, data) in model.entries() {
            if name == "g.dense.w" {
                shape.swap(0, 1); // transposed directory entry
            }
            manifest.tensors.push(TensorEntry {
                name: name.to_string(),
                shape,
                offset: (payload.len() * 8) as u64,
            });
            payload.extend(data);
        }
        write_parts(&path, &manifest, &payload).unwrap();
        let err = load(&path).unwrap_err();
        assert!(
            matches!(err, Error::Checkpoint(_)) && err.to_string().contains("g.dense.w"),
            "{err}"
        );
    }

    #[test]
    fn missing_tensor_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let model = tiny_model();
        let mut manifest = Manifest {
            latent_dim: model.latent_dim,
            image_shape: model.image_shape,
            base_channels: model.base_channels,
            feature_layer_index: model.feature_layer_index,
            norm_stats: None,
            config: RunConfig::default(),
            tensors: Vec::new(),
        };
        let mut payload = Vec::new();
        for (name, shape, data) in model.entries() {
            if name == "d.dense.b" {
                continue;
            }
            manifest.tensors.push(TensorEntry {
                name: name.to_string(),
                shape,
                offset: (payload.len() * 8) as u64,
            });
            payload.extend(data);
        }
        write_parts(&path, &manifest, &payload).unwrap();
        let err = load(&path).unwrap_err();
        assert!(err.to_string().contains("d.dense.b"), "{err}");
    }
}
