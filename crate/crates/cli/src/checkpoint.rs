//! Versioned binary checkpoints.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! magic      8 bytes  "RDIFFCK\0"
//! version    u32
//! T          u64
//! alpha      (T + 1) x f64
//! alpha_bar  (T + 1) x f64
//! manifest   u64 length + UTF-8 JSON
//! arrays     f64 payload, in manifest order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use robustdiff::models::{Dense, Mlp};
use robustdiff::training::TrainerState;
use robustdiff::{
    ConsistencyModel, EmaPair, EpsModel, NoiseSchedule, OptimizerKind, Parameterization, Parameterized, RngState,
    Tensor,
};

use crate::error::CliError;

pub const MAGIC: &[u8; 8] = b"RDIFFCK\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelState {
    Eps(EmaPair<EpsModel>),
    Consistency(EmaPair<ConsistencyModel>),
}

impl ModelState {
    pub fn kind(&self) -> ModelKind {
        match self {
            ModelState::Eps(_) => ModelKind::Eps,
            ModelState::Consistency(_) => ModelKind::Consistency,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Eps,
    Consistency,
}

/// Everything needed to resume a run or sample from it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub schedule: NoiseSchedule,
    pub model: ModelState,
    pub trainer: TrainerState,
    pub optimizer: OptimizerKind,
    pub lr: f64,
    /// Resolved configuration of the producing run.
    pub config: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    kind: ModelKind,
    data_dim: usize,
    time_embed: usize,
    max_step: usize,
    /// `[fan_in, fan_out]` per dense layer.
    layers: Vec<[usize; 2]>,
    parameterization: Option<Parameterization>,
    ema_mu: f64,
    arrays: Vec<ArrayEntry>,
    updates: u64,
    batches: u64,
    optimizer_step: u64,
    rng: RngState,
    optimizer: OptimizerKind,
    lr: f64,
    producer: String,
    config: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    len: usize,
}

fn layer_dims(mlp: &Mlp) -> Vec<[usize; 2]> {
    mlp.layers()
        .iter()
        .map(|l| [l.weight.shape()[0], l.weight.shape()[1]])
        .collect()
}

fn mlp_from_flat(dims: &[[usize; 2]], flat: &[f64]) -> Result<Mlp, String> {
    let mut off = 0;
    let mut layers = Vec::with_capacity(dims.len());
    let mut take = |shape: &[usize]| -> Result<Tensor, String> {
        let n: usize = shape.iter().product();
        let slice = flat.get(off..off + n).ok_or("parameter payload too short")?;
        off += n;
        Tensor::new(shape.to_vec(), slice.to_vec()).map_err(|e| e.to_string())
    };
    for &[i, o] in dims {
        let weight = take(&[i, o])?;
        let bias = take(&[o])?;
        layers.push(Dense { weight, bias });
    }
    if off != flat.len() {
        return Err("parameter payload longer than the layer manifest".into());
    }
    Mlp::from_layers(layers).map_err(|e| e.to_string())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let (kind, mlp, data_dim, time_embed, max_step, param, mu, online, target) = match &self.model {
            ModelState::Eps(p) => (
                ModelKind::Eps,
                p.online.mlp(),
                p.online.data_dim(),
                p.online.time_embed(),
                p.online.max_step(),
                None,
                p.mu(),
                p.online.flat_params(),
                p.target.flat_params(),
            ),
            ModelState::Consistency(p) => (
                ModelKind::Consistency,
                p.online.mlp(),
                p.online.data_dim(),
                p.online.time_embed(),
                p.online.max_step(),
                Some(p.online.parameterization()),
                p.mu(),
                p.online.flat_params(),
                p.target.flat_params(),
            ),
        };
        let (m, v) = &self.trainer.moments;
        let arrays: [(&str, &[f64]); 4] = [("online", &online), ("target", &target), ("adam_m", m), ("adam_v", v)];
        let manifest = Manifest {
            kind,
            data_dim,
            time_embed,
            max_step,
            layers: layer_dims(mlp),
            parameterization: param,
            ema_mu: mu,
            arrays: arrays
                .iter()
                .map(|(name, a)| ArrayEntry {
                    name: name.to_string(),
                    len: a.len(),
                })
                .collect(),
            updates: self.trainer.updates,
            batches: self.trainer.batches,
            optimizer_step: self.trainer.optimizer_step,
            rng: self.trainer.rng.clone(),
            optimizer: self.optimizer,
            lr: self.lr,
            producer: format!("robustdiff {}", env!("CARGO_PKG_VERSION")),
            config: self.config.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");

        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.schedule.steps() as u64).to_le_bytes());
        for v in self.schedule.alphas().iter().chain(self.schedule.alpha_bars()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in arrays {
            for v in a {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, String> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err("not a checkpoint (bad magic)".into());
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(format!("unsupported checkpoint version {version} (expected {FORMAT_VERSION})"));
        }
        let steps = r.u64()? as usize;
        let alpha = r.f64s(steps + 1)?;
        let alpha_bar = r.f64s(steps + 1)?;
        let schedule = NoiseSchedule::from_arrays(alpha, alpha_bar).map_err(|e| e.to_string())?;
        let json_len = r.u64()? as usize;
        let manifest: Manifest =
            serde_json::from_slice(r.take(json_len)?).map_err(|e| format!("bad manifest: {e}"))?;
        let mut arrays = Vec::with_capacity(manifest.arrays.len());
        for (entry, want) in manifest.arrays.iter().zip(["online", "target", "adam_m", "adam_v"]) {
            if entry.name != want {
                return Err(format!("unexpected array '{}' (expected '{want}')", entry.name));
            }
            arrays.push(r.f64s(entry.len)?);
        }
        if arrays.len() != 4 {
            return Err("checkpoint must carry four arrays".into());
        }
        if r.pos != bytes.len() {
            return Err("trailing bytes after payload".into());
        }
        let v = arrays.pop().expect("four arrays");
        let m = arrays.pop().expect("four arrays");
        let target = mlp_from_flat(&manifest.layers, &arrays[1])?;
        let online = mlp_from_flat(&manifest.layers, &arrays[0])?;
        let (dd, te, ms) = (manifest.data_dim, manifest.time_embed, manifest.max_step);
        let err = |e: robustdiff::Error| e.to_string();
        let model = match manifest.kind {
            ModelKind::Eps => ModelState::Eps(
                EmaPair::from_parts(
                    EpsModel::from_mlp(online, dd, te, ms).map_err(err)?,
                    EpsModel::from_mlp(target, dd, te, ms).map_err(err)?,
                    manifest.ema_mu,
                )
                .map_err(err)?,
            ),
            ModelKind::Consistency => {
                let p = manifest
                    .parameterization
                    .ok_or("consistency checkpoint without parameterization")?;
                ModelState::Consistency(
                    EmaPair::from_parts(
                        ConsistencyModel::from_mlp(online, dd, te, ms, p).map_err(err)?,
                        ConsistencyModel::from_mlp(target, dd, te, ms, p).map_err(err)?,
                        manifest.ema_mu,
                    )
                    .map_err(err)?,
                )
            }
        };
        Ok(Checkpoint {
            schedule,
            model,
            trainer: TrainerState {
                updates: manifest.updates,
                batches: manifest.batches,
                rng: manifest.rng,
                optimizer_step: manifest.optimizer_step,
                moments: (m, v),
            },
            optimizer: manifest.optimizer,
            lr: manifest.lr,
            config: manifest.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.to_bytes()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|msg| CliError::format(path, msg))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or("truncated checkpoint")?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("array length overflow")?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
