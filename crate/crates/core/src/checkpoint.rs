//! Checkpoint container: a versioned binary file holding the model config, a
//! named-tensor index, optional training progress (optimizer state, step),
//! and the raw tensor data as little-endian f32.
//!
//! Layout: magic `QLMC` | u32 version | u64 header length | JSON header |
//! f32 data. The header lists each tensor's name, shape, and element offset
//! into the data section.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::model::{ModelConfig, Parameters};
use crate::optim::{OptHyper, OptState, OptimizerKind, TensorState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::Result;

const MAGIC: &[u8; 4] = b"QLMC";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the f32 data section.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct TrainMeta {
    step: u64,
    optimizer: OptimizerKind,
    hyper: OptHyper,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    train: Option<TrainMeta>,
    tensors: Vec<TensorEntry>,
}

/// Training progress stored alongside the model tensors.
pub struct TrainState<S> {
    pub step: u64,
    pub optimizer: OptimizerKind,
    pub hyper: OptHyper,
    pub opt_state: OptState<S>,
}

pub struct Checkpoint<S> {
    pub config: ModelConfig,
    pub params: Parameters<S>,
    pub train: Option<TrainState<S>>,
}

fn opt_state_tensors<S: Scalar>(state: &OptState<S>) -> Vec<(String, &Tensor<S>)> {
    let mut out = Vec::new();
    for (i, st) in state.tensors.iter().enumerate() {
        match st {
            TensorState::Lamb { m, v } => {
                out.push((format!("opt.{i}.m"), m));
                out.push((format!("opt.{i}.v"), v));
            }
            TensorState::AdafactorFactored { r, c, m } => {
                out.push((format!("opt.{i}.r"), r));
                out.push((format!("opt.{i}.c"), c));
                out.push((format!("opt.{i}.m"), m));
            }
            TensorState::AdafactorFull { v, m } => {
                out.push((format!("opt.{i}.v"), v));
                out.push((format!("opt.{i}.m"), m));
            }
        }
    }
    out
}

pub fn save<S: Scalar>(path: &Path, checkpoint: &Checkpoint<S>) -> Result<()> {
    let mut tensors: Vec<(String, &Tensor<S>)> = checkpoint.params.tensors();
    if let Some(train) = &checkpoint.train {
        tensors.extend(opt_state_tensors(&train.opt_state));
    }

    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset,
        });
        offset += t.numel() as u64;
    }
    let header = Header {
        config: checkpoint.config,
        train: checkpoint.train.as_ref().map(|tr| TrainMeta {
            step: tr.step,
            optimizer: tr.optimizer,
            hyper: tr.hyper,
        }),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)?;

    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(MAGIC)?;
    file.write_all(&VERSION.to_le_bytes())?;
    file.write_all(&(header_json.len() as u64).to_le_bytes())?;
    file.write_all(&header_json)?;
    for (_, t) in &tensors {
        for &v in t.as_slice() {
            file.write_all(&v.cast_f32().to_le_bytes())?;
        }
    }
    file.flush()?;
    Ok(())
}

pub fn load<S: Scalar>(path: &Path) -> Result<Checkpoint<S>> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)
        .map_err(|_| Error::CorruptCheckpoint("truncated magic".into()))?;
    if &magic != MAGIC {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let mut buf4 = [0u8; 4];
    file.read_exact(&mut buf4)
        .map_err(|_| Error::CorruptCheckpoint("truncated version".into()))?;
    let version = u32::from_le_bytes(buf4);
    if version != VERSION {
        return Err(Error::CorruptCheckpoint(format!("unsupported version {version}")));
    }
    let mut buf8 = [0u8; 8];
    file.read_exact(&mut buf8)
        .map_err(|_| Error::CorruptCheckpoint("truncated header length".into()))?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_json = vec![0u8; header_len];
    file.read_exact(&mut header_json)
        .map_err(|_| Error::CorruptCheckpoint("truncated header".into()))?;
    let header: Header = serde_json::from_slice(&header_json)
        .map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    header.config.validate()?;

    let mut data = Vec::new();
    file.read_to_end(&mut data)?;

    let read_tensor = |entry: &TensorEntry| -> Result<Tensor<S>> {
        let n: usize = entry.shape.iter().product();
        let start = entry.offset as usize * 4;
        let end = start + n * 4;
        if end > data.len() {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{}` exceeds data section",
                entry.name
            )));
        }
        let values = data[start..end]
            .chunks_exact(4)
            .map(|b| S::cast_from(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect();
        Ok(Tensor::from_vec(&entry.shape, values))
    };

    let lookup = |name: &str| -> Result<Tensor<S>> {
        let entry = header
            .tensors
            .iter()
            .find(|e| e.name == name)
            .ok_or_else(|| Error::CorruptCheckpoint(format!("missing tensor `{name}`")))?;
        read_tensor(entry)
    };

    // Model tensors, validated against the config's shape table.
    let mut params = Parameters::<S>::zeros(&header.config);
    for ((name, expected_shape), (_, slot)) in header
        .config
        .tensor_shapes()
        .into_iter()
        .zip(params.tensors_mut())
    {
        let t = lookup(&name)?;
        if t.shape() != expected_shape.as_slice() {
            return Err(Error::CorruptCheckpoint(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                expected_shape
            )));
        }
        *slot = t;
    }
    if !params.all_finite() {
        return Err(Error::CorruptCheckpoint("non-finite parameter".into()));
    }

    let train = match header.train {
        None => None,
        Some(meta) => {
            let n_tensors = header.config.tensor_shapes().len();
            let mut tensors = Vec::with_capacity(n_tensors);
            for i in 0..n_tensors {
                let st = match meta.optimizer {
                    OptimizerKind::Lamb => TensorState::Lamb {
                        m: lookup(&format!("opt.{i}.m"))?,
                        v: lookup(&format!("opt.{i}.v"))?,
                    },
                    OptimizerKind::Adafactor => {
                        if header.tensors.iter().any(|e| e.name == format!("opt.{i}.r")) {
                            TensorState::AdafactorFactored {
                                r: lookup(&format!("opt.{i}.r"))?,
                                c: lookup(&format!("opt.{i}.c"))?,
                                m: lookup(&format!("opt.{i}.m"))?,
                            }
                        } else {
                            TensorState::AdafactorFull {
                                v: lookup(&format!("opt.{i}.v"))?,
                                m: lookup(&format!("opt.{i}.m"))?,
                            }
                        }
                    }
                };
                tensors.push(st);
            }
            Some(TrainState {
                step: meta.step,
                optimizer: meta.optimizer,
                hyper: meta.hyper,
                opt_state: OptState {
                    step: meta.step,
                    tensors,
                },
            })
        }
    };

    Ok(Checkpoint {
        config: header.config,
        params,
        train,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, Variant};

    fn cfg() -> ModelConfig {
        ModelConfig {
            variant: Variant::Grover,
            context: 8,
            d_model: 8,
            n_heads: 2,
            n_layers: 1,
            vocab: 13,
            seed: 5,
        }
    }

    #[test]
    fn round_trip_model_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.qlmc");
        let params: Parameters<f32> = init_params(&cfg()).unwrap();
        save(
            &path,
            &Checkpoint {
                config: cfg(),
                params: params.clone(),
                train: None,
            },
        )
        .unwrap();
        let loaded: Checkpoint<f32> = load(&path).unwrap();
        assert_eq!(loaded.config, cfg());
        assert_eq!(loaded.params, params);
        assert!(loaded.train.is_none());
    }

    #[test]
    fn round_trip_with_optimizer_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.qlmc");
        let params: Parameters<f32> = init_params(&cfg()).unwrap();
        let refs: Vec<&Tensor<f32>> = params.tensors().into_iter().map(|(_, t)| t).collect();
        let mut opt_state = OptState::new(OptimizerKind::Adafactor, &refs);
        opt_state.step = 17;
        save(
            &path,
            &Checkpoint {
                config: cfg(),
                params: params.clone(),
                train: Some(TrainState {
                    step: 17,
                    optimizer: OptimizerKind::Adafactor,
                    hyper: OptHyper::default(),
                    opt_state: opt_state.clone(),
                }),
            },
        )
        .unwrap();
        let loaded: Checkpoint<f32> = load(&path).unwrap();
        let train = loaded.train.unwrap();
        assert_eq!(train.step, 17);
        assert_eq!(train.opt_state, opt_state);
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.qlmc");
        let params: Parameters<f32> = init_params(&cfg()).unwrap();
        save(
            &path,
            &Checkpoint {
                config: cfg(),
                params,
                train: None,
            },
        )
        .unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 100]).unwrap();
        assert!(matches!(
            load::<f32>(&path),
            Err(Error::CorruptCheckpoint(_))
        ));
    }
}
