//! Versioned binary parameter container.
//!
//! Layout: magic bytes `LSF1`, a little-endian u64 manifest length, the
//! manifest (JSON: named entries with shapes and byte offsets, plus model
//! metadata), then the raw little-endian f64 payloads. Round-trips are
//! bit-exact.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::ClusterConfig;
use crate::model::{SaeConfig, SaeModel};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"LSF1";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EntryDesc {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub entries: Vec<EntryDesc>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sae_config: Option<SaeConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cluster_config: Option<ClusterConfig>,
}

/// Serialize named arrays into the container format.
pub fn encode(entries: &[(String, Vec<usize>, &[f64])], manifest_extra: CheckpointManifest) -> Result<Vec<u8>> {
    let mut descs = Vec::with_capacity(entries.len());
    let mut offset = 0u64;
    for (name, shape, data) in entries {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dim {
                op: "checkpoint",
                detail: format!("entry {name}: shape {:?} vs {} values", shape, data.len()),
            });
        }
        descs.push(EntryDesc { name: name.clone(), shape: shape.clone(), offset });
        offset += (data.len() * 8) as u64;
    }
    let manifest = CheckpointManifest { entries: descs, ..manifest_extra };
    let manifest_json = serde_json::to_vec(&manifest)?;

    let mut out = Vec::with_capacity(4 + 8 + manifest_json.len() + offset as usize);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(manifest_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&manifest_json);
    for (_, _, data) in entries {
        for v in *data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Parse the container; returns the manifest and the named arrays.
pub fn decode(bytes: &[u8], origin: &str) -> Result<(CheckpointManifest, Vec<(String, Vec<usize>, Vec<f64>)>)> {
    let fail = |detail: String| Error::Format { path: origin.to_string(), detail };
    if bytes.len() < 12 || bytes[..4] != MAGIC {
        return Err(fail("missing LSF1 magic".into()));
    }
    let manifest_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
    let manifest_end = 12 + manifest_len;
    if bytes.len() < manifest_end {
        return Err(fail("truncated manifest".into()));
    }
    let manifest: CheckpointManifest = serde_json::from_slice(&bytes[12..manifest_end])?;
    let payload = &bytes[manifest_end..];
    let mut arrays = Vec::with_capacity(manifest.entries.len());
    for entry in &manifest.entries {
        let numel: usize = entry.shape.iter().product();
        let start = entry.offset as usize;
        let end = start + numel * 8;
        if end > payload.len() {
            return Err(fail(format!("entry {} reaches past the payload", entry.name)));
        }
        let data: Vec<f64> = payload[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        arrays.push((entry.name.clone(), entry.shape.clone(), data));
    }
    Ok((manifest, arrays))
}

/// Serialize a model (parameters, batch-norm running statistics, configs).
pub fn serialize_model(model: &mut SaeModel, clusters: Option<&ClusterConfig>) -> Result<Vec<u8>> {
    let config = model.config.clone();
    let mut entries: Vec<(String, Vec<usize>, Vec<f64>)> = Vec::new();
    for (name, p) in model.named_params_mut() {
        entries.push((name, p.shape.clone(), p.data.clone()));
    }
    for (name, s) in model.named_state_mut() {
        entries.push((name, vec![s.len()], s.clone()));
    }
    let borrowed: Vec<(String, Vec<usize>, &[f64])> =
        entries.iter().map(|(n, s, d)| (n.clone(), s.clone(), d.as_slice())).collect();
    encode(
        &borrowed,
        CheckpointManifest {
            entries: Vec::new(),
            sae_config: Some(config),
            cluster_config: clusters.cloned(),
        },
    )
}

/// Rebuild a model from container bytes.
pub fn deserialize_model(bytes: &[u8], origin: &str) -> Result<(SaeModel, Option<ClusterConfig>)> {
    let (manifest, arrays) = decode(bytes, origin)?;
    let config = manifest.sae_config.clone().ok_or_else(|| Error::Format {
        path: origin.to_string(),
        detail: "checkpoint carries no model config".into(),
    })?;
    let mut model = SaeModel::new(config, 0)?;
    let mut by_name: std::collections::HashMap<String, (Vec<usize>, Vec<f64>)> =
        arrays.into_iter().map(|(n, s, d)| (n, (s, d))).collect();
    for (name, p) in model.named_params_mut() {
        let (shape, data) = by_name.remove(&name).ok_or_else(|| Error::Format {
            path: origin.to_string(),
            detail: format!("checkpoint is missing parameter {name}"),
        })?;
        if shape != p.shape {
            return Err(Error::Format {
                path: origin.to_string(),
                detail: format!("parameter {name}: shape {:?} vs expected {:?}", shape, p.shape),
            });
        }
        *p = Tensor::new(&shape, data)?;
    }
    for (name, s) in model.named_state_mut() {
        let (shape, data) = by_name.remove(&name).ok_or_else(|| Error::Format {
            path: origin.to_string(),
            detail: format!("checkpoint is missing state {name}"),
        })?;
        if shape != [s.len()] {
            return Err(Error::Format {
                path: origin.to_string(),
                detail: format!("state {name}: length {:?} vs expected {}", shape, s.len()),
            });
        }
        *s = data;
    }
    if let Some(extra) = by_name.keys().next() {
        return Err(Error::Format {
            path: origin.to_string(),
            detail: format!("checkpoint has unknown entry {extra}"),
        });
    }
    Ok((model, manifest.cluster_config))
}

pub fn save_model(model: &mut SaeModel, clusters: Option<&ClusterConfig>, path: &Path) -> Result<()> {
    let bytes = serialize_model(model, clusters)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<(SaeModel, Option<ClusterConfig>)> {
    let bytes = fs::read(path)?;
    deserialize_model(&bytes, &path.display().to_string())
}

/// Content hash of a checkpoint, used to tie encoding indices to the
/// encoder that produced them.
pub fn fingerprint(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn fingerprint_model(model: &mut SaeModel, clusters: Option<&ClusterConfig>) -> Result<String> {
    Ok(fingerprint(&serialize_model(model, clusters)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_round_trip_is_bit_exact() {
        let values = vec![1.0f64, -0.0, f64::MIN_POSITIVE, 1.0 / 3.0, 2.5e300];
        let entries =
            vec![("a".to_string(), vec![5], values.as_slice()), ("b".to_string(), vec![1], &values[..1])];
        let bytes = encode(
            &entries,
            CheckpointManifest { entries: Vec::new(), sae_config: None, cluster_config: None },
        )
        .unwrap();
        let (_, arrays) = decode(&bytes, "<memory>").unwrap();
        assert_eq!(arrays[0].2, values);
        assert_eq!(arrays[0].2.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                   values.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
    }

    #[test]
    fn bad_magic_is_a_format_error() {
        let err = decode(b"nope", "<memory>").unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn model_round_trip_preserves_everything() {
        use crate::model::SaeConfig;
        let cfg = SaeConfig { input_hw: 16, width_scale: 0.1, ..SaeConfig::default() };
        let mut model = SaeModel::new(cfg, 42).unwrap();
        // Perturb some state so defaults cannot mask a bug.
        model.named_state_mut()[0].1[0] = 0.123456789;
        let clusters = crate::geometry::texture_cluster_config();
        let bytes = serialize_model(&mut model, Some(&clusters)).unwrap();
        let (mut back, cl) = deserialize_model(&bytes, "<memory>").unwrap();
        assert_eq!(cl.as_ref(), Some(&clusters));

        let bytes2 = serialize_model(&mut back, cl.as_ref()).unwrap();
        assert_eq!(bytes, bytes2, "round trip must be bit-exact");
        assert_eq!(fingerprint(&bytes), fingerprint(&bytes2));

        // Same batch encodes identically through both models.
        let batch = Tensor::full(&[1, 1, 16, 16], 0.4);
        assert_eq!(model.encode_eval(&batch).unwrap().data, back.encode_eval(&batch).unwrap().data);
    }

    #[test]
    fn fingerprint_tracks_content() {
        let mut model = SaeModel::new(
            SaeConfig { input_hw: 16, width_scale: 0.1, ..SaeConfig::default() },
            1,
        )
        .unwrap();
        let f1 = fingerprint_model(&mut model, None).unwrap();
        model.named_params_mut()[0].1.data[0] += 1.0;
        let f2 = fingerprint_model(&mut model, None).unwrap();
        assert_ne!(f1, f2);
        assert_eq!(f1.len(), 64);
    }
}
