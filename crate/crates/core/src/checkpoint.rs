//! Binary model checkpoints.
//!
//! Layout: the magic string `HELIXCKPT1`, a little-endian u64 header length,
//! a JSON header carrying the full run configuration plus a tensor manifest
//! (name, shape, payload byte offset), then the raw little-endian f64 tensor
//! payloads in manifest order. Normalization statistics ride along as the
//! manifest tensors `norm.mu` and `norm.sigma`. A save -> load -> save trip
//! reproduces the file byte for byte.

use crate::config::RunConfig;
use crate::data::NormStats;
use crate::model::HelixModel;
use crate::tensor::{Tensor, TensorError};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

pub const MAGIC: &[u8; 10] = b"HELIXCKPT1";

#[derive(Error, Debug)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a checkpoint: expected magic {expected:?}, found {found:?}")]
    BadMagic { expected: String, found: String },
    #[error("truncated checkpoint: {detail}")]
    Truncated { detail: String },
    #[error("bad checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error("bad manifest for tensor '{tensor}': {detail}")]
    Manifest { tensor: String, detail: String },
    #[error("invalid checkpoint: {0}")]
    Invalid(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

fn io_err(path: &Path, source: std::io::Error) -> CheckpointError {
    CheckpointError::Io { path: path.display().to_string(), source }
}

/// One tensor's slot in the payload.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of this tensor within the payload section.
    pub offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    manifest: Vec<ManifestEntry>,
}

/// A loaded checkpoint: configuration, weights, and optional normalization.
pub struct Checkpoint {
    pub config: RunConfig,
    pub model: HelixModel,
    pub norm: Option<NormStats>,
}

fn named_tensors(
    model: &HelixModel,
    norm: Option<&NormStats>,
) -> Result<Vec<(String, Vec<usize>, Vec<f64>)>, CheckpointError> {
    let mut tensors: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    model.for_each_param(&mut |name, t| {
        tensors.push((name, t.shape().to_vec(), t.data().to_vec()));
    });
    if let Some(stats) = norm {
        let f = model.config.n_features;
        if stats.mu.len() != f || stats.sigma.len() != f {
            return Err(CheckpointError::Invalid(format!(
                "normalization covers {} features, model has {}",
                stats.mu.len(),
                f
            )));
        }
        tensors.push(("norm.mu".into(), vec![f], stats.mu.clone()));
        tensors.push(("norm.sigma".into(), vec![f], stats.sigma.clone()));
    }
    Ok(tensors)
}

/// Writes `model` (and optional normalization stats) under `config`.
/// `config.model` must equal the model's own configuration.
pub fn save_checkpoint(
    path: &Path,
    config: &RunConfig,
    model: &HelixModel,
    norm: Option<&NormStats>,
) -> Result<(), CheckpointError> {
    if config.model != model.config {
        return Err(CheckpointError::Invalid(
            "run config and model disagree on the model configuration".into(),
        ));
    }
    let tensors = named_tensors(model, norm)?;
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, shape, data) in &tensors {
        manifest.push(ManifestEntry { name: name.clone(), shape: shape.clone(), offset });
        offset += (data.len() * 8) as u64;
    }
    let header = serde_json::to_vec(&Header { config: config.clone(), manifest })?;
    let mut bytes = Vec::with_capacity(MAGIC.len() + 8 + header.len() + offset as usize);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(header.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header);
    for (_, _, data) in &tensors {
        for &v in data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, bytes).map_err(|e| io_err(path, e))
}

/// Reads a checkpoint, validating magic, header, manifest order/shapes, and
/// payload size. The model is rebuilt from the stored config and its
/// parameters are overwritten from the payload.
pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let bytes = std::fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < MAGIC.len() + 8 {
        return Err(CheckpointError::Truncated {
            detail: format!("file is {} bytes, smaller than the fixed prefix", bytes.len()),
        });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(CheckpointError::BadMagic {
            expected: String::from_utf8_lossy(MAGIC).into_owned(),
            found: String::from_utf8_lossy(&bytes[..MAGIC.len()]).into_owned(),
        });
    }
    let header_len = u64::from_le_bytes(bytes[MAGIC.len()..MAGIC.len() + 8].try_into().expect("8 bytes"))
        as usize;
    let payload_start = MAGIC.len() + 8 + header_len;
    if bytes.len() < payload_start {
        return Err(CheckpointError::Truncated {
            detail: format!(
                "header claims {} bytes but only {} remain",
                header_len,
                bytes.len() - MAGIC.len() - 8
            ),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[MAGIC.len() + 8..payload_start])?;
    header
        .config
        .validate()
        .map_err(|e| CheckpointError::Invalid(e.to_string()))?;
    let payload = &bytes[payload_start..];

    // The model defines the expected manifest: every parameter in traversal
    // order, then optional normalization tensors.
    let mut model = HelixModel::init(header.config.model.clone(), 0)?;
    let mut expected: Vec<(String, Vec<usize>)> = Vec::new();
    model.for_each_param(&mut |name, t| expected.push((name, t.shape().to_vec())));
    let f = header.config.model.n_features;
    let has_norm = match header.manifest.len() {
        n if n == expected.len() => false,
        n if n == expected.len() + 2 => true,
        n => {
            return Err(CheckpointError::Invalid(format!(
                "manifest lists {} tensors; expected {} (or {} with normalization)",
                n,
                expected.len(),
                expected.len() + 2
            )))
        }
    };
    if has_norm {
        expected.push(("norm.mu".into(), vec![f]));
        expected.push(("norm.sigma".into(), vec![f]));
    }

    let mut values: Vec<Vec<f64>> = Vec::with_capacity(expected.len());
    let mut offset = 0usize;
    for (entry, (want_name, want_shape)) in header.manifest.iter().zip(&expected) {
        if &entry.name != want_name {
            return Err(CheckpointError::Manifest {
                tensor: entry.name.clone(),
                detail: format!("expected tensor '{}' at this position", want_name),
            });
        }
        if &entry.shape != want_shape {
            return Err(CheckpointError::Manifest {
                tensor: entry.name.clone(),
                detail: format!("shape {:?} does not match configured {:?}", entry.shape, want_shape),
            });
        }
        if entry.offset != offset as u64 {
            return Err(CheckpointError::Manifest {
                tensor: entry.name.clone(),
                detail: format!("offset {} is not contiguous (expected {})", entry.offset, offset),
            });
        }
        let numel: usize = entry.shape.iter().product();
        let nbytes = numel * 8;
        if payload.len() < offset + nbytes {
            return Err(CheckpointError::Truncated {
                detail: format!(
                    "tensor '{}' needs bytes {}..{} but payload has {}",
                    entry.name,
                    offset,
                    offset + nbytes,
                    payload.len()
                ),
            });
        }
        let mut data = Vec::with_capacity(numel);
        for i in 0..numel {
            let at = offset + i * 8;
            data.push(f64::from_le_bytes(payload[at..at + 8].try_into().expect("8 bytes")));
        }
        values.push(data);
        offset += nbytes;
    }
    if payload.len() != offset {
        return Err(CheckpointError::Truncated {
            detail: format!("payload has {} bytes, manifest covers {}", payload.len(), offset),
        });
    }

    let norm = if has_norm {
        let sigma = values.pop().expect("norm.sigma read");
        let mu = values.pop().expect("norm.mu read");
        Some(NormStats { mu, sigma })
    } else {
        None
    };
    let mut iter = values.into_iter();
    let mut fill_err: Option<TensorError> = None;
    model.for_each_param_mut(&mut |name, t| {
        if fill_err.is_some() {
            return;
        }
        let data = iter.next().expect("manifest length was checked");
        match Tensor::new(t.shape().to_vec(), data) {
            Ok(tensor) => *t = tensor,
            Err(e) => {
                fill_err = Some(e);
                let _ = name;
            }
        }
    });
    if let Some(e) = fill_err {
        return Err(CheckpointError::Tensor(e));
    }
    Ok(Checkpoint { config: header.config, model, norm })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::rng::{stream, uniform, StreamKind};
    use crate::tape::{Mode, Tape};

    fn small_run_config() -> RunConfig {
        let mut config = RunConfig::default();
        config.model = ModelConfig {
            n_features: 3,
            d: 8,
            n_heads: 2,
            n_layers: 1,
            d_pe: 4,
            d_f: 4,
            ..ModelConfig::default()
        };
        config
    }

    fn fixture(seed: u64) -> (RunConfig, HelixModel, NormStats) {
        let config = small_run_config();
        let model = HelixModel::init(config.model.clone(), seed).unwrap();
        let norm = NormStats {
            mu: vec![0.5, -1.25, 3.0],
            sigma: vec![1.5, 2.0, 0.25],
        };
        (config, model, norm)
    }

    #[test]
    fn round_trip_restores_every_parameter_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (config, model, norm) = fixture(11);
        save_checkpoint(&path, &config, &model, Some(&norm)).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.config, config);
        assert_eq!(loaded.norm.as_ref(), Some(&norm));
        let mut originals = Vec::new();
        model.for_each_param(&mut |name, t| originals.push((name, t.data().to_vec())));
        let mut restored = Vec::new();
        loaded.model.for_each_param(&mut |name, t| restored.push((name, t.data().to_vec())));
        assert_eq!(originals.len(), restored.len());
        for ((name_a, a), (name_b, b)) in originals.iter().zip(&restored) {
            assert_eq!(name_a, name_b);
            assert_eq!(a.len(), b.len());
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits(), "parameter {} changed", name_a);
            }
        }
    }

    #[test]
    fn round_trip_preserves_forward_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (config, model, _) = fixture(12);
        save_checkpoint(&path, &config, &model, None).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert!(loaded.norm.is_none());

        let mut rng = stream(12, StreamKind::Data, 30);
        let values = Tensor::new(vec![2, 5, 3], (0..30).map(|_| uniform(&mut rng, -1.0, 1.0)).collect()).unwrap();
        let mask = Tensor::filled(vec![2, 5, 3], 1.0);
        let run = |m: &HelixModel| {
            let mut tape = Tape::new();
            let out = m
                .forward(&mut tape, &values, &mask, Mode::Eval, &mut stream(0, StreamKind::Dropout, 0), false)
                .unwrap();
            tape.value(out.x_hat).data().to_vec()
        };
        let a = run(&model);
        let b = run(&loaded.model);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let first = dir.path().join("a.ckpt");
        let second = dir.path().join("b.ckpt");
        let (config, model, norm) = fixture(13);
        save_checkpoint(&first, &config, &model, Some(&norm)).unwrap();
        let loaded = load_checkpoint(&first).unwrap();
        save_checkpoint(&second, &loaded.config, &loaded.model, loaded.norm.as_ref()).unwrap();
        let a = std::fs::read(&first).unwrap();
        let b = std::fs::read(&second).unwrap();
        assert_eq!(a, b, "round trip must reproduce the file bit for bit");
    }

    #[test]
    fn truncated_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (config, model, norm) = fixture(14);
        save_checkpoint(&path, &config, &model, Some(&norm)).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Truncated { .. })));

        std::fs::write(&path, &bytes[..4]).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Truncated { .. })));
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (config, model, _) = fixture(15);
        save_checkpoint(&path, &config, &model, None).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::BadMagic { .. })));
    }

    fn rewrite_header(bytes: &[u8], edit: impl FnOnce(&mut serde_json::Value)) -> Vec<u8> {
        let header_len =
            u64::from_le_bytes(bytes[10..18].try_into().unwrap()) as usize;
        let mut header: serde_json::Value =
            serde_json::from_slice(&bytes[18..18 + header_len]).unwrap();
        edit(&mut header);
        let new_header = serde_json::to_vec(&header).unwrap();
        let mut out = Vec::new();
        out.extend_from_slice(&bytes[..10]);
        out.extend_from_slice(&(new_header.len() as u64).to_le_bytes());
        out.extend_from_slice(&new_header);
        out.extend_from_slice(&bytes[18 + header_len..]);
        out
    }

    #[test]
    fn manifest_shape_disagreement_names_the_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (config, model, _) = fixture(16);
        save_checkpoint(&path, &config, &model, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let tampered = rewrite_header(&bytes, |header| {
            header["manifest"][0]["shape"] = serde_json::json!([7, 7]);
        });
        std::fs::write(&path, tampered).unwrap();
        match load_checkpoint(&path) {
            Err(CheckpointError::Manifest { tensor, detail }) => {
                assert_eq!(tensor, "embed.feat_id");
                assert!(detail.contains("[7, 7]"), "{}", detail);
            }
            other => panic!("expected manifest error, got {:?}", other.err().map(|e| e.to_string())),
        }
    }

    #[test]
    fn manifest_offset_gaps_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (config, model, _) = fixture(17);
        save_checkpoint(&path, &config, &model, None).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let tampered = rewrite_header(&bytes, |header| {
            header["manifest"][1]["offset"] = serde_json::json!(13);
        });
        std::fs::write(&path, tampered).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Manifest { .. })));
    }

    #[test]
    fn header_garbage_is_a_header_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&5u64.to_le_bytes());
        bytes.extend_from_slice(b"{oops");
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(CheckpointError::Header(_))));
    }

    #[test]
    fn config_model_mismatch_is_rejected_at_save() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (config, _, _) = fixture(18);
        let other = HelixModel::init(ModelConfig::default(), 18).unwrap();
        assert!(matches!(
            save_checkpoint(&path, &config, &other, None),
            Err(CheckpointError::Invalid(_))
        ));
    }
}
