//! Binary checkpoint container.
//!
//! Layout: the magic bytes `CONCL1\0`, a little-endian `u64` header length,
//! a UTF-8 JSON header, then raw little-endian `f64` payloads. The header
//! holds the format version, the configuration, counters, queue metadata,
//! the metrics rows written so far and a tensor manifest of
//! `(name, shape, offset)` with byte offsets relative to the payload start.

use std::path::Path;

use concl_core::encoder::{EncoderPair, EncoderParams};
use concl_core::loss::ConceptQueue;
use concl_core::tensor::Tensor;
use concl_core::trainer::{Counters, TrainState};
use serde::{Deserialize, Serialize};

use crate::config::ConfigFile;
use crate::io::{read_all, write_atomic, IoError};

pub const MAGIC: &[u8; 7] = b"CONCL1\0";
pub const FORMAT_VERSION: u32 = 1;
/// Random streams are derived from `(seed, purpose, epoch, index)`; the
/// seed together with the step and epoch counters is the whole RNG state.
pub const RNG_SCHEME: &str = "chacha8-counter-streams";

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic bytes")]
    BadMagic,
    #[error("unsupported checkpoint format version {found} (this build reads {FORMAT_VERSION})")]
    UnsupportedVersion { found: u32 },
    #[error("checkpoint truncated at byte offset {offset}: {what} needs {needed} bytes, file has {len}")]
    Truncated { offset: usize, needed: usize, len: usize, what: String },
    #[error("malformed checkpoint header: {0}")]
    Header(String),
    #[error("inconsistent checkpoint: {0}")]
    Inconsistent(String),
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct QueueMeta {
    capacity: usize,
    dim: usize,
    len: usize,
    total_enqueued: u64,
}

#[derive(Serialize, Deserialize)]
struct CountersJson {
    concept_evaluations: u64,
    fallbacks: u64,
    masks_generated: u64,
}

#[derive(Serialize, Deserialize)]
struct RngJson {
    scheme: String,
    seed: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format_version: u32,
    config: ConfigFile,
    epoch: u32,
    step: u64,
    counters: CountersJson,
    rng: RngJson,
    instance_queue: QueueMeta,
    concept_queue: QueueMeta,
    metrics: Vec<String>,
    tensors: Vec<TensorEntry>,
}

/// Training state plus what the driver needs to resume.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ConfigFile,
    pub state: TrainState,
    /// Metrics CSV rows written so far, without the header.
    pub metrics: Vec<String>,
}

impl Checkpoint {
    pub fn new(config: ConfigFile) -> Result<Self, CheckpointError> {
        let t = config.train_config().map_err(|e| CheckpointError::Config(e.to_string()))?;
        let state = TrainState::new(t).map_err(|e| CheckpointError::Config(e.to_string()))?;
        Ok(Self {
            config,
            state,
            metrics: Vec::new(),
        })
    }

    pub fn encode(&self) -> Vec<u8> {
        let s = &self.state;
        let names = s.pair.online.names();
        let mut tensors: Vec<(String, &[usize], &[f64])> = Vec::new();
        for (prefix, params) in [("online", &s.pair.online), ("key", &s.pair.key)] {
            for (n, t) in names.iter().zip(&params.tensors) {
                tensors.push((format!("{prefix}.{n}"), t.shape(), t.data()));
            }
        }
        for (n, t) in names.iter().zip(&s.velocity) {
            tensors.push((format!("velocity.{n}"), t.shape(), t.data()));
        }
        let iq: Vec<f64> = s.instance_queue.entries().flatten().copied().collect();
        let cq: Vec<f64> = s.concept_queue.entries().flatten().copied().collect();
        let iq_shape = [s.instance_queue.len(), s.instance_queue.dim()];
        let cq_shape = [s.concept_queue.len(), s.concept_queue.dim()];
        tensors.push(("queue.instance".into(), &iq_shape, &iq));
        tensors.push(("queue.concept".into(), &cq_shape, &cq));

        let mut offset = 0;
        let mut entries = Vec::with_capacity(tensors.len());
        for (name, shape, data) in &tensors {
            entries.push(TensorEntry {
                name: name.clone(),
                shape: shape.to_vec(),
                offset,
            });
            offset += data.len() * 8;
        }
        let meta = |q: &ConceptQueue| QueueMeta {
            capacity: q.capacity(),
            dim: q.dim(),
            len: q.len(),
            total_enqueued: q.total_enqueued(),
        };
        let header = Header {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            epoch: s.epoch,
            step: s.step,
            counters: CountersJson {
                concept_evaluations: s.counters.concept_evaluations,
                fallbacks: s.counters.fallbacks,
                masks_generated: s.counters.masks_generated,
            },
            rng: RngJson {
                scheme: RNG_SCHEME.into(),
                seed: s.config.seed,
            },
            instance_queue: meta(&s.instance_queue),
            concept_queue: meta(&s.concept_queue),
            metrics: self.metrics.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(MAGIC.len() + 8 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, _, data) in &tensors {
            for v in *data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let len = bytes.len();
        let need = |offset: usize, needed: usize, what: &str| -> Result<(), CheckpointError> {
            if offset + needed > len {
                Err(CheckpointError::Truncated {
                    offset: len,
                    needed: offset + needed,
                    len,
                    what: what.into(),
                })
            } else {
                Ok(())
            }
        };
        need(0, MAGIC.len(), "magic")?;
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut pos = MAGIC.len();
        need(pos, 8, "header length")?;
        let hlen = u64::from_le_bytes(bytes[pos..pos + 8].try_into().expect("8 bytes")) as usize;
        pos += 8;
        need(pos, hlen, "header")?;
        let raw: serde_json::Value = serde_json::from_slice(&bytes[pos..pos + hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        let found = raw.get("format_version").and_then(|v| v.as_u64()).ok_or_else(|| CheckpointError::Header("missing format_version".into()))?;
        if found != FORMAT_VERSION as u64 {
            return Err(CheckpointError::UnsupportedVersion { found: found as u32 });
        }
        let header: Header = serde_json::from_slice(&bytes[pos..pos + hlen]).map_err(|e| CheckpointError::Header(e.to_string()))?;
        pos += hlen;
        let payload = pos;

        let read = |name: &str, shape: &[usize]| -> Result<Vec<f64>, CheckpointError> {
            let e = header
                .tensors
                .iter()
                .find(|e| e.name == name)
                .ok_or_else(|| CheckpointError::Inconsistent(format!("tensor {name} missing")))?;
            if e.shape != shape {
                return Err(CheckpointError::Inconsistent(format!("tensor {name}: shape {:?}, expected {:?}", e.shape, shape)));
            }
            let n: usize = shape.iter().product();
            let start = payload + e.offset;
            need(start, n * 8, name)?;
            Ok(bytes[start..start + n * 8]
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
                .collect())
        };

        let config = header.config.clone();
        let train = config.train_config().map_err(|e| CheckpointError::Inconsistent(e.to_string()))?;
        let layout = train.encoder.layout();
        let load_params = |prefix: &str| -> Result<Vec<Tensor>, CheckpointError> {
            layout
                .iter()
                .map(|(n, shape)| {
                    let d = read(&format!("{prefix}.{n}"), shape)?;
                    Tensor::new(shape, d).map_err(|e| CheckpointError::Inconsistent(e.to_string()))
                })
                .collect()
        };
        let online = load_params("online")?;
        let key = load_params("key")?;
        let velocity = load_params("velocity")?;
        let load_queue = |name: &str, m: &QueueMeta| -> Result<ConceptQueue, CheckpointError> {
            let d = read(name, &[m.len, m.dim])?;
            ConceptQueue::from_entries(m.capacity, m.dim, &d, m.total_enqueued).map_err(|e| CheckpointError::Inconsistent(format!("{name}: {e}")))
        };
        let instance_queue = load_queue("queue.instance", &header.instance_queue)?;
        let concept_queue = load_queue("queue.concept", &header.concept_queue)?;
        if header.rng.scheme != RNG_SCHEME || header.rng.seed != train.seed {
            return Err(CheckpointError::Inconsistent("rng record does not match the configuration".into()));
        }
        let ema = train.ema;
        let state = TrainState {
            pair: EncoderPair {
                online: EncoderParams {
                    config: train.encoder.clone(),
                    tensors: online,
                },
                key: EncoderParams {
                    config: train.encoder.clone(),
                    tensors: key,
                },
                momentum: ema,
            },
            velocity,
            instance_queue,
            concept_queue,
            step: header.step,
            epoch: header.epoch,
            counters: Counters {
                concept_evaluations: header.counters.concept_evaluations,
                fallbacks: header.counters.fallbacks,
                masks_generated: header.counters.masks_generated,
            },
            config: train,
        };
        Ok(Self {
            config,
            state,
            metrics: header.metrics,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        Ok(write_atomic(path, &self.encode())?)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        Self::decode(&read_all(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let mut c = ConfigFile::default();
        c.widths = [2, 2, 2, 2, 2];
        c.groups = 1;
        c.hidden = 4;
        c.dim = 4;
        c.queue_capacity = 3;
        let mut ck = Checkpoint::new(c).unwrap();
        for i in 0..5 {
            let a = i as f64;
            let n = (a * a + 1.0).sqrt();
            ck.state.instance_queue.push(&[a / n, 1.0 / n, 0.0, 0.0]).unwrap();
        }
        ck.state.step = 7;
        ck.metrics.push("0,1,2".into());
        ck
    }

    #[test]
    fn round_trip_is_bitwise() {
        let ck = small();
        let bytes = ck.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.encode(), bytes);
    }

    #[test]
    fn version_bump_is_rejected() {
        let mut bytes = small().encode();
        let pat = b"\"format_version\":1";
        let at = bytes.windows(pat.len()).position(|w| w == pat).unwrap();
        bytes[at + pat.len() - 1] = b'2';
        assert!(matches!(Checkpoint::decode(&bytes), Err(CheckpointError::UnsupportedVersion { found: 2 })));
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = small().encode();
        let cut = &bytes[..bytes.len() - 5];
        match Checkpoint::decode(cut) {
            Err(CheckpointError::Truncated { offset, .. }) => assert_eq!(offset, cut.len()),
            other => panic!("expected truncation, got {other:?}"),
        }
        assert!(matches!(Checkpoint::decode(&bytes[..4]), Err(CheckpointError::Truncated { .. })));
        assert!(matches!(Checkpoint::decode(b"NOTACKPT"), Err(CheckpointError::BadMagic)));
    }
}
