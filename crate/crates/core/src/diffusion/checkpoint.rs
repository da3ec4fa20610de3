//! Self-describing weight container:
//! `MVXC | version u32 | header length u32 | header JSON | f32 LE weights`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BulkRatioRegressor, DiffusionConfig, DiffusionModel, NoiseSchedule, RegressorConfig};
use crate::error::{Error, Result};
use crate::homogenize::BaseMaterial;
use crate::metrics::PropertyRanges;
use crate::nn::{Module, UNet};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MVXC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    /// Config as a JSON string; the hash covers these exact bytes.
    config: String,
    config_hash: String,
    param_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    schedule: Option<ScheduleHeader>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    ranges: Option<PropertyRanges>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    base: Option<BaseMaterial>,
    resolution: usize,
}

#[derive(Serialize, Deserialize)]
struct ScheduleHeader {
    kind: String,
    timesteps: usize,
    clip: f64,
}

fn config_hash(config: &str) -> String {
    hex::encode(Sha256::digest(config.as_bytes()))
}

fn encode(header: &Header, weights: &[f32]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(12 + json.len() + 4 * weights.len());
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for w in weights {
        out.extend_from_slice(&w.to_le_bytes());
    }
    Ok(out)
}

fn decode(bytes: &[u8], kind: &str) -> Result<(Header, Vec<f32>)> {
    if bytes.len() < 12 {
        return Err(Error::TruncatedPayload { expected: 12, found: bytes.len() });
    }
    let magic: [u8; 4] = bytes[..4].try_into().unwrap();
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic { expected: CHECKPOINT_MAGIC, found: magic });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::BadVersion(version));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(Error::TruncatedPayload { expected: 12 + hlen, found: bytes.len() });
    }
    let header: Header = serde_json::from_slice(&bytes[12..12 + hlen])
        .map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    if header.kind != kind {
        return Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    if config_hash(&header.config) != header.config_hash {
        return Err(Error::Checkpoint("config hash mismatch".into()));
    }
    let payload = &bytes[12 + hlen..];
    if payload.len() != 4 * header.param_count {
        return Err(Error::Checkpoint(format!(
            "header declares {} parameters, payload holds {} bytes",
            header.param_count,
            payload.len()
        )));
    }
    let weights = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok((header, weights))
}

pub fn diffusion_bytes(model: &DiffusionModel) -> Result<Vec<u8>> {
    let config = serde_json::to_string(&model.config)?;
    let header = Header {
        kind: "diffusion".into(),
        config_hash: config_hash(&config),
        config,
        param_count: model.net.param_count(),
        schedule: Some(ScheduleHeader {
            kind: "cosine".into(),
            timesteps: model.schedule.timesteps,
            clip: NoiseSchedule::CLIP,
        }),
        ranges: Some(model.ranges),
        base: None,
        resolution: model.config.resolution,
    };
    encode(&header, &model.net.flat_values())
}

pub fn diffusion_from_bytes(bytes: &[u8]) -> Result<DiffusionModel> {
    let (header, weights) = decode(bytes, "diffusion")?;
    let config: DiffusionConfig =
        serde_json::from_str(&header.config).map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    config.validate()?;
    let ranges = header.ranges.ok_or_else(|| Error::Checkpoint("missing normalization ranges".into()))?;
    let mut net = UNet::new(config.unet.clone(), &mut ChaCha8Rng::seed_from_u64(0));
    if !net.load_flat(&weights) {
        return Err(Error::Checkpoint(format!(
            "config builds {} parameters, checkpoint has {}",
            net.param_count(),
            weights.len()
        )));
    }
    Ok(DiffusionModel::from_parts(config, net, ranges))
}

pub fn save_diffusion(path: impl AsRef<Path>, model: &DiffusionModel) -> Result<()> {
    std::fs::write(path, diffusion_bytes(model)?)?;
    Ok(())
}

pub fn load_diffusion(path: impl AsRef<Path>) -> Result<DiffusionModel> {
    diffusion_from_bytes(&std::fs::read(path)?)
}

pub fn regressor_bytes(model: &BulkRatioRegressor) -> Result<Vec<u8>> {
    let config = serde_json::to_string(&model.config)?;
    let header = Header {
        kind: "regressor".into(),
        config_hash: config_hash(&config),
        config,
        param_count: model.param_count(),
        schedule: None,
        ranges: None,
        base: Some(model.base),
        resolution: model.resolution,
    };
    encode(&header, &model.flat_values())
}

pub fn regressor_from_bytes(bytes: &[u8]) -> Result<BulkRatioRegressor> {
    let (header, weights) = decode(bytes, "regressor")?;
    let config: RegressorConfig =
        serde_json::from_str(&header.config).map_err(|e| Error::Checkpoint(format!("bad config: {e}")))?;
    let base = header.base.ok_or_else(|| Error::Checkpoint("missing base material".into()))?;
    let mut model = BulkRatioRegressor::new(config, base, header.resolution)?;
    if !model.load_flat(&weights) {
        return Err(Error::Checkpoint("parameter count does not match the config".into()));
    }
    Ok(model)
}

pub fn save_regressor(path: impl AsRef<Path>, model: &BulkRatioRegressor) -> Result<()> {
    std::fs::write(path, regressor_bytes(model)?)?;
    Ok(())
}

pub fn load_regressor(path: impl AsRef<Path>) -> Result<BulkRatioRegressor> {
    regressor_from_bytes(&std::fs::read(path)?)
}
