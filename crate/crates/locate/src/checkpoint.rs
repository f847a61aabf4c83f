//! Versioned binary checkpoints.
//!
//! Layout: the 8-byte magic `LOCATECK`, a little-endian `u32` format
//! version, a `u64` header length, a JSON header, then every tensor as
//! little-endian `f64` in header order. Bit patterns survive unchanged.

use std::fs;
use std::path::Path;

use locate_core::cam::CamHeadParams;
use locate_core::CamParams;
use serde::{Deserialize, Serialize};

use crate::config::Config;
use crate::error::{LocateError, Result};

pub const MAGIC: &[u8; 8] = b"LOCATECK";
pub const VERSION: u32 = 1;

/// Position in the deterministic batch stream: the next batch to draw is
/// batch `batch` of epoch `epoch` under loader seed `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub epoch: usize,
    pub batch: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: Config,
    pub vocabulary: Vec<String>,
    /// Completed epochs.
    pub epoch: usize,
    pub steps: u64,
    pub rng: RngState,
    pub params: CamParams,
    pub velocity: CamParams,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: String,
    vocabulary: Vec<String>,
    epoch: usize,
    steps: u64,
    rng: RngState,
    feature_dim: usize,
    classes: usize,
    shared_head: bool,
    tensors: Vec<TensorEntry>,
}

fn named_heads(params: &CamParams, prefix: &str) -> Vec<(String, CamHeadParams)> {
    let mut out = vec![(format!("{prefix}cam"), params.ego.clone())];
    if let Some(exo) = &params.exo {
        out.push((format!("{prefix}cam_exo"), exo.clone()));
    }
    out
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let heads: Vec<(String, CamHeadParams)> =
            named_heads(&self.params, "").into_iter().chain(named_heads(&self.velocity, "momentum.")).collect();
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        for (prefix, head) in &heads {
            for ((name, shape), data) in CamHeadParams::TENSOR_NAMES.iter().zip(head.tensor_shapes()).zip(head.tensors()) {
                tensors.push(TensorEntry { name: format!("{prefix}.{name}"), shape });
                payload.extend(data.iter().flat_map(|v| v.to_le_bytes()));
            }
        }
        let header = Header {
            config: self.config.to_toml(),
            vocabulary: self.vocabulary.clone(),
            epoch: self.epoch,
            steps: self.steps,
            rng: self.rng,
            feature_dim: self.params.ego.feature_dim(),
            classes: self.params.ego.class_count(),
            shared_head: self.params.exo.is_none(),
            tensors,
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err("not a LOCATE checkpoint".into());
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(format!("checkpoint format version {version} cannot be read by this build (expects version {VERSION})"));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let header_bytes = bytes.get(20..20 + header_len).ok_or("truncated header")?;
        let header: Header = serde_json::from_slice(header_bytes).map_err(|e| format!("bad header: {e}"))?;
        let config = Config::from_toml(&header.config).map_err(|e| e.to_string())?;

        let mut payload = &bytes[20 + header_len..];
        let mut take = |entry: &TensorEntry| -> std::result::Result<Vec<f64>, String> {
            let n: usize = entry.shape.iter().product();
            if payload.len() < n * 8 {
                return Err(format!("truncated payload in tensor {}", entry.name));
            }
            let (head, rest) = payload.split_at(n * 8);
            payload = rest;
            Ok(head.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        };
        let mut entries = header.tensors.iter();
        let mut read_head = |prefix: &str| -> std::result::Result<CamHeadParams, String> {
            let mut head = CamHeadParams::zeros(header.feature_dim, header.classes);
            let shapes = head.tensor_shapes();
            for ((slot, name), shape) in head.tensors_mut().into_iter().zip(CamHeadParams::TENSOR_NAMES).zip(shapes) {
                let entry = entries.next().ok_or("missing tensors")?;
                let expected = format!("{prefix}.{name}");
                if entry.name != expected || entry.shape != shape {
                    return Err(format!(
                        "tensor {} {:?} where {expected} {shape:?} was expected",
                        entry.name, entry.shape
                    ));
                }
                *slot = take(entry)?;
            }
            Ok(head)
        };
        let mut read_params = |prefix: &str| -> std::result::Result<CamParams, String> {
            let ego = read_head(&format!("{prefix}cam"))?;
            let exo = if header.shared_head { None } else { Some(read_head(&format!("{prefix}cam_exo"))?) };
            Ok(CamParams { ego, exo })
        };
        let params = read_params("")?;
        let velocity = read_params("momentum.")?;
        if entries.next().is_some() {
            return Err("unexpected extra tensors".into());
        }
        Ok(Self {
            config,
            vocabulary: header.vocabulary,
            epoch: header.epoch,
            steps: header.steps,
            rng: header.rng,
            params,
            velocity,
        })
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| LocateError::io(dir, e))?;
    }
    fs::write(path, checkpoint.to_bytes()).map_err(|e| LocateError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| LocateError::io(path, e))?;
    Checkpoint::from_bytes(&bytes).map_err(|m| LocateError::Data(format!("{}: {m}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(shared: bool) -> Checkpoint {
        let params = CamParams::init(5, 3, shared, 9);
        let mut velocity = CamParams::init(5, 3, shared, 10);
        velocity.ego.tensors_mut()[0][0] = f64::MIN_POSITIVE / 3.0;
        Checkpoint {
            config: Config::default(),
            vocabulary: vec!["a".into(), "b".into(), "c".into()],
            epoch: 4,
            steps: 17,
            rng: RngState { seed: 3, epoch: 4, batch: 1 },
            params,
            velocity,
        }
    }

    #[test]
    fn round_trip_is_exact() {
        for shared in [true, false] {
            let c = sample(shared);
            assert_eq!(Checkpoint::from_bytes(&c.to_bytes()).unwrap(), c);
        }
    }

    #[test]
    fn truncation_and_version_errors() {
        let bytes = sample(true).to_bytes();
        for cut in [0, 10, 30, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err(), "cut at {cut}");
        }
        let mut bumped = bytes.clone();
        bumped[8..12].copy_from_slice(&(VERSION + 1).to_le_bytes());
        let msg = Checkpoint::from_bytes(&bumped).unwrap_err();
        assert!(msg.contains(&format!("version {}", VERSION + 1)) && msg.contains(&format!("version {VERSION}")), "{msg}");
    }
}
