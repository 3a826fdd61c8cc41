//! Checkpoint archive: named tensors (name, shape, payload) pinned to a
//! config digest. Loading under a different digest is refused.

use std::collections::BTreeMap;
use std::path::Path;

use byteorder::{ByteOrder, LittleEndian};

use crate::config::RunConfig;
use crate::digest;
use crate::error::{Error, Result};
use smn_tensor::io as tio;
use smn_tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SMNC";
pub const VERSION: u32 = 1;

/// Digest pinning the base detector's shape-determining config. Runtime
/// knobs (proposal counts, NMS thresholds) stay out so one checkpoint can be
/// evaluated under every protocol.
pub fn base_digest(cfg: &RunConfig) -> [u8; 32] {
    let names: Vec<&str> = cfg.scene.classes.iter().map(|c| c.name.as_str()).collect();
    digest::config_digest(&(
        cfg.detector.stride,
        &cfg.detector.backbone_channels,
        &cfg.detector.anchor_scales,
        &cfg.detector.anchor_ratios,
        cfg.detector.pool_size,
        cfg.detector.fc_dim,
        names,
    ))
}

/// Digest pinning the memory branch's shape-determining config.
pub fn smn_digest(cfg: &RunConfig) -> [u8; 32] {
    let base = base_digest(cfg);
    digest::config_digest(&(
        digest::hex(&base),
        cfg.memory.grid_h,
        cfg.memory.grid_w,
        cfg.memory.channels,
        cfg.memory.patch,
        cfg.context.depth,
        cfg.context.kernel,
        cfg.context.channels,
        cfg.context.residual_period,
        cfg.context.fc_dim,
    ))
}

pub fn save(path: &Path, cfg_digest: [u8; 32], entries: &[(String, Tensor)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let mut b4 = [0u8; 4];
    LittleEndian::write_u32(&mut b4, VERSION);
    out.extend_from_slice(&b4);
    out.extend_from_slice(&cfg_digest);
    LittleEndian::write_u32(&mut b4, entries.len() as u32);
    out.extend_from_slice(&b4);
    let mut b8 = [0u8; 8];
    for (name, tensor) in entries {
        LittleEndian::write_u32(&mut b4, name.len() as u32);
        out.extend_from_slice(&b4);
        out.extend_from_slice(name.as_bytes());
        let blob = tio::encode_tensor(tensor, tio::Dtype::F64);
        LittleEndian::write_u64(&mut b8, blob.len() as u64);
        out.extend_from_slice(&b8);
        out.extend_from_slice(&blob);
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load(path: &Path, expected_digest: [u8; 32]) -> Result<BTreeMap<String, Tensor>> {
    if !path.exists() {
        return Err(Error::MissingArtifact(format!("checkpoint {}", path.display())));
    }
    let bytes = std::fs::read(path)?;
    let need = |pos: usize, n: usize| -> Result<()> {
        if pos + n > bytes.len() {
            Err(Error::Checkpoint(format!("truncated at offset {pos}")))
        } else {
            Ok(())
        }
    };
    need(0, 12 + 32)?;
    if &bytes[..4] != MAGIC {
        return Err(Error::Checkpoint("bad magic, expected SMNC".into()));
    }
    let version = LittleEndian::read_u32(&bytes[4..8]);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let mut stored = [0u8; 32];
    stored.copy_from_slice(&bytes[8..40]);
    if stored != expected_digest {
        return Err(Error::Checkpoint(format!(
            "config digest mismatch: checkpoint {} vs current config {}; \
             the checkpoint was produced under a different model configuration",
            digest::hex(&stored)[..12].to_string(),
            digest::hex(&expected_digest)[..12].to_string(),
        )));
    }
    let count = LittleEndian::read_u32(&bytes[40..44]) as usize;
    let mut pos = 44;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        need(pos, 4)?;
        let name_len = LittleEndian::read_u32(&bytes[pos..pos + 4]) as usize;
        pos += 4;
        need(pos, name_len)?;
        let name = String::from_utf8(bytes[pos..pos + name_len].to_vec())
            .map_err(|_| Error::Checkpoint("entry name is not utf-8".into()))?;
        pos += name_len;
        need(pos, 8)?;
        let blob_len = LittleEndian::read_u64(&bytes[pos..pos + 8]) as usize;
        pos += 8;
        need(pos, blob_len)?;
        let tensor = tio::decode_tensor(&bytes[pos..pos + blob_len])
            .map_err(|e| Error::Checkpoint(format!("entry '{name}': {e}")))?;
        pos += blob_len;
        map.insert(name, tensor);
    }
    Ok(map)
}

/// Split a loaded archive into weight entries and optimizer-state entries
/// (the latter prefixed with `opt.`).
pub fn split_opt_state(map: BTreeMap<String, Tensor>) -> (BTreeMap<String, Tensor>, BTreeMap<String, Tensor>) {
    let mut weights = BTreeMap::new();
    let mut opt = BTreeMap::new();
    for (k, v) in map {
        if let Some(rest) = k.strip_prefix("opt.") {
            opt.insert(rest.to_string(), v);
        } else {
            weights.insert(k, v);
        }
    }
    (weights, opt)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::weights::{BaseWeights, NamedParams};

    #[test]
    fn round_trip_and_digest_refusal() {
        let cfg = RunConfig::toy();
        let mut r = rng::stream(5);
        let mut w = BaseWeights::init(&cfg.detector, cfg.class_count(), &cfg.train, &mut r);
        let dir = std::env::temp_dir().join(format!("smn-ckpt-test-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("base.smnc");
        save(&path, base_digest(&cfg), &w.named()).unwrap();

        let loaded = load(&path, base_digest(&cfg)).unwrap();
        let mut w2 = BaseWeights::init(&cfg.detector, cfg.class_count(), &cfg.train, &mut rng::stream(9));
        w2.load_named(&loaded).unwrap();
        assert_eq!(w2.checksum(), w.checksum());

        let mut other = cfg.clone();
        other.detector.fc_dim = 32;
        let err = load(&path, base_digest(&other)).unwrap_err();
        assert!(err.to_string().contains("digest mismatch"));
        std::fs::remove_dir_all(&dir).ok();
    }
}
