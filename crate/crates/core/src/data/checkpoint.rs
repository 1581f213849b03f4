//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! | bytes      | content                                                  |
//! |------------|----------------------------------------------------------|
//! | 8          | magic `b"SIAMEXCK"`                                      |
//! | 4          | `u32` format version ([`CHECKPOINT_VERSION`])            |
//! | 1          | role tag: `1` = snn, `2` = autoencoder                   |
//! | 8          | `u64` header length `H`                                  |
//! | `H`        | UTF-8 JSON header: `networks` (name + spec per network), |
//! |            | `config` (training config snapshot), `seed`              |
//! | `8 * P`    | parameters as `f64`, network by network, layer by layer, |
//! |            | weight then bias, row-major                              |
//! | 32         | SHA-256 of every preceding byte                          |
//!
//! `P` is implied by the specs in the header, so a file is self-describing.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::write_atomic;
use crate::autoencoder::AeModel;
use crate::error::{Error, Result};
use crate::nn::{LayerParams, NetworkSpec, NetworkState, Tensor};
use crate::siamese::SnnModel;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"SIAMEXCK";
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 8 + 4 + 1 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Snn,
    Autoencoder,
}

impl Role {
    fn tag(self) -> u8 {
        match self {
            Role::Snn => 1,
            Role::Autoencoder => 2,
        }
    }

    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Role::Snn),
            2 => Some(Role::Autoencoder),
            _ => None,
        }
    }
}

impl std::fmt::Display for Role {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Role::Snn => "snn",
            Role::Autoencoder => "autoencoder",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub role: Role,
    /// Named networks, e.g. `subnet` or `encoder` and `decoder`.
    pub networks: Vec<(String, NetworkState)>,
    pub config: serde_json::Value,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    networks: Vec<NetworkHeader>,
    config: serde_json::Value,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
struct NetworkHeader {
    name: String,
    spec: NetworkSpec,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            networks: self
                .networks
                .iter()
                .map(|(name, net)| NetworkHeader {
                    name: name.clone(),
                    spec: net.spec().clone(),
                })
                .collect(),
            config: self.config.clone(),
            seed: self.seed,
        };
        let header = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.role.tag());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, net) in &self.networks {
            for slice in net.param_slices() {
                for v in slice {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    /// Decodes a checkpoint; `path` is only used in error messages.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::CorruptCheckpoint {
            path: path.to_path_buf(),
            reason,
        };
        if bytes.len() < PREFIX_LEN + DIGEST_LEN {
            return Err(corrupt(format!("file too short ({} bytes)", bytes.len())));
        }
        if &bytes[..8] != MAGIC {
            return Err(corrupt("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(Error::CheckpointVersion {
                path: path.to_path_buf(),
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch (truncated or modified)".into()));
        }
        let role = Role::from_tag(body[12])
            .ok_or_else(|| corrupt(format!("unknown role tag {}", body[12])))?;
        let header_len = u64::from_le_bytes(body[13..21].try_into().unwrap()) as usize;
        let header_end = PREFIX_LEN
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| corrupt("header length exceeds file".into()))?;
        let header: Header = serde_json::from_slice(&body[PREFIX_LEN..header_end])
            .map_err(|e| corrupt(format!("header: {e}")))?;

        let mut values = body[header_end..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        if (body.len() - header_end) % 8 != 0 {
            return Err(corrupt(
                "parameter block is not a whole number of f64 values".into(),
            ));
        }
        let mut networks = Vec::with_capacity(header.networks.len());
        for nh in header.networks {
            let shapes = nh
                .spec
                .shapes()
                .map_err(|e| corrupt(format!("network {}: {e}", nh.name)))?;
            let mut params = Vec::with_capacity(nh.spec.layers.len());
            for (layer, in_shape) in nh.spec.layers.iter().zip(&shapes) {
                params.push(match layer.param_shapes(in_shape) {
                    None => None,
                    Some((ws, bs)) => {
                        let mut take = |shape: Vec<usize>| -> Result<Tensor> {
                            let n: usize = shape.iter().product();
                            let data: Vec<f64> = values.by_ref().take(n).collect();
                            if data.len() != n {
                                return Err(corrupt(
                                    "parameter block shorter than specs require".into(),
                                ));
                            }
                            Tensor::new(shape, data)
                        };
                        let weight = take(ws)?;
                        let bias = take(bs)?;
                        Some(LayerParams { weight, bias })
                    }
                });
            }
            let net =
                NetworkState::from_params(nh.spec, params).map_err(|e| corrupt(e.to_string()))?;
            networks.push((nh.name, net));
        }
        if values.next().is_some() {
            return Err(corrupt("trailing parameter values".into()));
        }
        Ok(Checkpoint {
            role,
            networks,
            config: header.config,
            seed: header.seed,
        })
    }

    fn network(&self, name: &str, path: &Path) -> Result<NetworkState> {
        self.networks
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, net)| net.clone())
            .ok_or_else(|| Error::CorruptCheckpoint {
                path: path.to_path_buf(),
                reason: format!("missing network '{name}'"),
            })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_atomic(path, &ckpt.to_bytes()?)
}

/// Loads a checkpoint and checks its role tag.
pub fn load_checkpoint(path: &Path, expected: Role) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let ckpt = Checkpoint::from_bytes(&bytes, path)?;
    if ckpt.role != expected {
        return Err(Error::CheckpointRole {
            path: path.to_path_buf(),
            found: ckpt.role.to_string(),
            expected: expected.to_string(),
        });
    }
    Ok(ckpt)
}

pub fn save_snn(model: &SnnModel, config: serde_json::Value, seed: u64, path: &Path) -> Result<()> {
    save_checkpoint(
        &Checkpoint {
            role: Role::Snn,
            networks: vec![("subnet".into(), model.subnet.clone())],
            config,
            seed,
        },
        path,
    )
}

pub fn load_snn(path: &Path) -> Result<(SnnModel, Checkpoint)> {
    let ckpt = load_checkpoint(path, Role::Snn)?;
    let model = SnnModel::new(ckpt.network("subnet", path)?)?;
    Ok((model, ckpt))
}

pub fn save_autoencoder(
    model: &AeModel,
    config: serde_json::Value,
    seed: u64,
    path: &Path,
) -> Result<()> {
    save_checkpoint(
        &Checkpoint {
            role: Role::Autoencoder,
            networks: vec![
                ("encoder".into(), model.encoder.clone()),
                ("decoder".into(), model.decoder.clone()),
            ],
            config,
            seed,
        },
        path,
    )
}

pub fn load_autoencoder(path: &Path) -> Result<(AeModel, Checkpoint)> {
    let ckpt = load_checkpoint(path, Role::Autoencoder)?;
    let model = AeModel::new(
        ckpt.network("encoder", path)?,
        ckpt.network("decoder", path)?,
    )?;
    Ok((model, ckpt))
}
