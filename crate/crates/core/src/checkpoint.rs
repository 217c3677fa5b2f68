//! Checkpoint container: network shapes, raw and EMA parameters, schedule,
//! task and training metadata.
//!
//! Binary layout (all integers little endian):
//!
//! ```text
//! offset  size  field
//! 0       8     magic  b"CDPCKPT\0"
//! 8       4     format version (u32)
//! 12      8     header length H in bytes (u64)
//! 20      H     UTF-8 JSON header
//! 20+H    8P    raw parameters, f64 LE, flat order of ScoreNetwork::params_flat
//! ...     8P    EMA parameters, same order
//! ```
//!
//! `P` is implied by the layer shapes in the header. The JSON export carries
//! the header fields plus both parameter arrays.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Activation, Dense, ScoreNetwork};
use crate::schedule::NoiseSchedule;
use crate::toyworld::GmmTask;

pub const MAGIC: &[u8; 8] = b"CDPCKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format_version: u32,
    pub d_a: usize,
    pub d_s: usize,
    pub time_embed_dim: usize,
    pub activation: Activation,
    pub residual: bool,
    /// `(out, in)` of each dense layer.
    pub layer_shapes: Vec<(usize, usize)>,
    pub schedule: NoiseSchedule,
    pub task: GmmTask,
    pub step: usize,
    pub seed: u64,
    pub config_hash: String,
    pub code_version: String,
}

impl CheckpointHeader {
    pub fn num_params(&self) -> usize {
        self.layer_shapes.iter().map(|(o, i)| o * i + o).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: Vec<f64>,
    pub ema_params: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct JsonCheckpoint {
    header: CheckpointHeader,
    params: Vec<f64>,
    ema_params: Vec<f64>,
}

impl Checkpoint {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        net: &ScoreNetwork,
        ema_params: Vec<f64>,
        schedule: NoiseSchedule,
        task: GmmTask,
        step: usize,
        seed: u64,
        config_hash: String,
    ) -> Result<Self> {
        let header = CheckpointHeader {
            format_version: FORMAT_VERSION,
            d_a: net.d_a,
            d_s: net.d_s,
            time_embed_dim: net.time_embed_dim,
            activation: net.activation,
            residual: net.residual,
            layer_shapes: net.layers.iter().map(|l| l.weight.dim()).collect(),
            schedule,
            task,
            step,
            seed,
            config_hash,
            code_version: crate::CODE_VERSION.to_string(),
        };
        let ckpt = Checkpoint {
            header,
            params: net.params_flat(),
            ema_params,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn validate(&self) -> Result<()> {
        if self.header.format_version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {}",
                self.header.format_version
            )));
        }
        let p = self.header.num_params();
        if self.params.len() != p || self.ema_params.len() != p {
            return Err(Error::Checkpoint(format!(
                "expected {p} parameters, found {} raw and {} EMA",
                self.params.len(),
                self.ema_params.len()
            )));
        }
        self.network()?;
        Ok(())
    }

    fn build(&self, params: &[f64]) -> Result<ScoreNetwork> {
        let h = &self.header;
        let layers = h
            .layer_shapes
            .iter()
            .map(|&(o, i)| Dense {
                weight: ndarray::Array2::zeros((o, i)),
                bias: ndarray::Array1::zeros(o),
            })
            .collect();
        let mut net =
            ScoreNetwork::from_layers(h.d_a, h.d_s, h.time_embed_dim, h.activation, h.residual, layers)?;
        net.set_params_flat(params)?;
        if params.iter().any(|x| !x.is_finite()) {
            return Err(Error::Checkpoint("non-finite parameters".into()));
        }
        Ok(net)
    }

    pub fn network(&self) -> Result<ScoreNetwork> {
        self.build(&self.params)
    }

    pub fn ema_network(&self) -> Result<ScoreNetwork> {
        self.build(&self.ema_params)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let mut out = Vec::with_capacity(20 + header.len() + 16 * self.params.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for x in self.params.iter().chain(&self.ema_params) {
            out.extend_from_slice(&x.to_le_bytes());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(20..).ok_or_else(|| bad("truncated"))?;
        let header_bytes = body.get(..hlen).ok_or_else(|| bad("truncated header"))?;
        let header: CheckpointHeader = serde_json::from_slice(header_bytes)?;
        let p = header.num_params();
        let data = &body[hlen..];
        if data.len() != 16 * p {
            return Err(Error::Checkpoint(format!(
                "expected {} parameter bytes, found {}",
                16 * p,
                data.len()
            )));
        }
        let floats: Vec<f64> = data
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let ckpt = Checkpoint {
            header,
            params: floats[..p].to_vec(),
            ema_params: floats[p..].to_vec(),
        };
        ckpt.validate()?;
        Ok(ckpt)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn to_json_string(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&JsonCheckpoint {
            header: self.header.clone(),
            params: self.params.clone(),
            ema_params: self.ema_params.clone(),
        })?)
    }

    pub fn from_json_str(text: &str) -> Result<Self> {
        let j: JsonCheckpoint = serde_json::from_str(text)?;
        let ckpt = Checkpoint {
            header: j.header,
            params: j.params,
            ema_params: j.ema_params,
        };
        ckpt.validate()?;
        Ok(ckpt)
    }
}
