//! `RBCK1` checkpoint container.
//!
//! Layout: magic `RBCK1\0`, a little-endian u32 header length, a JSON header
//! describing the model config, normalization statistics, seeds, class names
//! and a tensor table, then every tensor as little-endian f64 in table order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig, Param, ParamSet, RunningStats};
use crate::error::{Error, Result};

const MAGIC: &[u8; 6] = b"RBCK1\0";
pub const FORMAT_VERSION: u32 = 1;

/// Per-channel input normalization computed from the training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedRecord {
    pub seed: u64,
    pub init_seed: u64,
    pub order_seed: u64,
    pub transform_seed: u64,
}

impl SeedRecord {
    /// Independent streams derived from one run seed, so flags that gate
    /// loss terms never shift the data order or initialization.
    pub fn derive(seed: u64) -> Self {
        let mix = |salt: u64| seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ salt;
        Self {
            seed,
            init_seed: mix(0x1111),
            order_seed: mix(0x2222),
            transform_seed: mix(0x3333),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub norm: NormStats,
    pub seeds: SeedRecord,
    pub class_names: Vec<String>,
    /// Resolved training configuration, stored verbatim.
    pub train_config: serde_json::Value,
    pub epoch: usize,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    version: u32,
    model: ModelConfig,
    norm: NormStats,
    seeds: SeedRecord,
    class_names: Vec<String>,
    train_config: serde_json::Value,
    epoch: usize,
    tensors: Vec<TensorEntry>,
}

fn running_params(running: &RunningStats) -> Vec<Param> {
    let mut out = Vec::new();
    for (b, (m, v)) in running.mean.iter().zip(&running.var).enumerate() {
        out.push(Param {
            name: format!("block{b}.bn.running_mean"),
            shape: vec![m.len()],
            data: m.clone(),
        });
        out.push(Param {
            name: format!("block{b}.bn.running_var"),
            shape: vec![v.len()],
            data: v.clone(),
        });
    }
    out
}

impl Checkpoint {
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        let mut tensors: Vec<Param> = self.model.params.entries.clone();
        tensors.extend(running_params(&self.model.running));
        let header = Header {
            version: FORMAT_VERSION,
            model: self.model.config.clone(),
            norm: self.norm.clone(),
            seeds: self.seeds.clone(),
            class_names: self.class_names.clone(),
            train_config: self.train_config.clone(),
            epoch: self.epoch,
            tensors: tensors
                .iter()
                .map(|t| TensorEntry {
                    name: t.name.clone(),
                    shape: t.shape.clone(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::data(e.to_string()))?;
        let io = |e| Error::data(format!("writing checkpoint: {e}"));
        out.write_all(MAGIC).map_err(io)?;
        out.write_all(&(json.len() as u32).to_le_bytes()).map_err(io)?;
        out.write_all(&json).map_err(io)?;
        for t in &tensors {
            let mut buf = Vec::with_capacity(t.data.len() * 8);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            out.write_all(&buf).map_err(io)?;
        }
        out.flush().map_err(io)
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let io = |e| Error::data(format!("reading checkpoint: {e}"));
        let mut magic = [0u8; 6];
        input.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::data("not an RBCK1 checkpoint"));
        }
        let mut len = [0u8; 4];
        input.read_exact(&mut len).map_err(io)?;
        let mut json = vec![0u8; u32::from_le_bytes(len) as usize];
        input.read_exact(&mut json).map_err(io)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| Error::data(format!("checkpoint header: {e}")))?;
        if header.version != FORMAT_VERSION {
            return Err(Error::data(format!(
                "unsupported checkpoint version {}",
                header.version
            )));
        }
        header.model.validate()?;

        let mut tensors = Vec::with_capacity(header.tensors.len());
        for t in header.tensors {
            let n: usize = t.shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            input.read_exact(&mut bytes).map_err(io)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(Param {
                name: t.name,
                shape: t.shape,
                data,
            });
        }

        // Check names and shapes against a freshly built model.
        let template = Model::init(header.model.clone(), 0)?;
        let n_params = template.params.entries.len();
        if tensors.len() != n_params + 2 * header.model.channels.len() {
            return Err(Error::data("checkpoint tensor table does not match its config"));
        }
        let running_tensors = tensors.split_off(n_params);
        for (got, want) in tensors.iter().zip(&template.params.entries) {
            if got.name != want.name || got.shape != want.shape {
                return Err(Error::data(format!("unexpected tensor `{}`", got.name)));
            }
        }
        let mut running = RunningStats {
            mean: Vec::new(),
            var: Vec::new(),
        };
        for pair in running_tensors.chunks_exact(2) {
            running.mean.push(pair[0].data.clone());
            running.var.push(pair[1].data.clone());
        }
        Ok(Self {
            model: Model {
                config: header.model,
                params: ParamSet { entries: tensors },
                running,
            },
            norm: header.norm,
            seeds: header.seeds,
            class_names: header.class_names,
            train_config: header.train_config,
            epoch: header.epoch,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(f))
    }
}
