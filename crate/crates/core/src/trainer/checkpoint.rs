//! Versioned binary checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "DUALVAE\0"
//! version  u32
//! meta     u32 length + UTF-8 TOML key/value block
//! count    u32
//! tensor*  u16 name length, name, u8 dtype (0 = f64, 1 = f32),
//!          u32 rows, u32 cols, rows*cols little-endian values
//! ```
//!
//! f32 payloads are widened to f64 on load; every f32 value is exactly
//! representable in f64, so widening is lossless.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Precision, TrainConfig};
use crate::data::hex_digest;
use crate::error::{Error, Result};
use crate::model::{ModelParams, ModelState, SideParams, PARAM_NAMES};
use crate::tensor::{RngState, Tensor, RNG_ALGORITHM};
use crate::data::{InteractionMatrix, Side};
use crate::dvi::Encoder;
use crate::jg::Decoder;

pub const MAGIC: &[u8; 8] = b"DUALVAE\0";
pub const FORMAT_VERSION: u32 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_F32: u8 = 1;

/// Everything needed to resume training or rebuild the evaluation state.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub params: ModelParams,
    /// `P`, users × A.
    pub user_probs: Tensor,
    /// `C`, items × A.
    pub item_probs: Tensor,
    pub rng: RngState,
    /// Epoch (1-based) the parameters come from.
    pub epoch: usize,
    pub best_metric: f64,
    /// Fingerprint of the id maps of the dataset trained on.
    pub data_fingerprint: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    train: TrainConfig,
    state: StateMeta,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    epoch: usize,
    /// Hex of the IEEE bits so the value survives text exactly.
    best_metric_bits: String,
    rng_algorithm: String,
    rng_seed: String,
    rng_stream: String,
    rng_word_pos: String,
    data_fingerprint: String,
}

impl Checkpoint {
    /// Evaluation-mode state: means re-encoded from the training matrix under
    /// the stored probabilities.
    pub fn state(&self, train: &InteractionMatrix) -> Result<ModelState> {
        if train.num_users() != self.user_probs.rows() || train.num_items() != self.item_probs.rows() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on {}x{} interactions, got {}x{}",
                self.user_probs.rows(),
                self.item_probs.rows(),
                train.num_users(),
                train.num_items()
            )));
        }
        let cfg = self.config.model()?;
        ModelState::from_probs(&self.params, train, &cfg, self.user_probs.clone(), self.item_probs.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = Meta {
            train: self.config.clone(),
            state: StateMeta {
                epoch: self.epoch,
                best_metric_bits: format!("{:016x}", self.best_metric.to_bits()),
                rng_algorithm: RNG_ALGORITHM.to_string(),
                rng_seed: self.rng.seed().to_string(),
                rng_stream: self.rng.stream().to_string(),
                rng_word_pos: self.rng.word_pos().to_string(),
                data_fingerprint: self.data_fingerprint.clone(),
            },
        };
        let text = toml::to_string(&meta).map_err(|e| Error::Checkpoint(format!("config encode: {e}")))?;
        let dtype = match self.config.precision {
            Precision::F64 => DTYPE_F64,
            Precision::F32 => DTYPE_F32,
        };
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        put_u32(&mut out, text.len())?;
        out.extend_from_slice(text.as_bytes());
        let mut tensors: Vec<(String, &Tensor)> = self.params.named();
        tensors.push(("user.probs".into(), &self.user_probs));
        tensors.push(("item.probs".into(), &self.item_probs));
        put_u32(&mut out, tensors.len())?;
        for (name, t) in tensors {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(dtype);
            put_u32(&mut out, t.rows())?;
            put_u32(&mut out, t.cols())?;
            for &v in t.data() {
                if dtype == DTYPE_F32 {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                } else {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len())? != MAGIC {
            return Err(Error::Checkpoint("bad magic bytes: not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )));
        }
        let len = r.u32()? as usize;
        let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("config block is not UTF-8".into()))?;
        let meta: Meta = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("config block: {e}")))?;
        let count = r.u32()? as usize;
        let mut tensors = std::collections::BTreeMap::new();
        for _ in 0..count {
            let nl = r.u16()? as usize;
            let name = String::from_utf8(r.take(nl)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let dtype = r.take(1)?[0];
            let rows = r.u32()? as usize;
            let cols = r.u32()? as usize;
            let n = rows
                .checked_mul(cols)
                .ok_or_else(|| Error::Checkpoint(format!("tensor {name}: shape overflow")))?;
            let data: Vec<f64> = match dtype {
                DTYPE_F64 => r
                    .take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect(),
                DTYPE_F32 => r
                    .take(n.checked_mul(4).ok_or_else(|| Error::Checkpoint("size overflow".into()))?)?
                    .chunks_exact(4)
                    .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
                    .collect(),
                other => return Err(Error::Checkpoint(format!("tensor {name}: unknown dtype {other}"))),
            };
            tensors.insert(name, Tensor::from_vec(rows, cols, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        let mut take = |name: &str| {
            tensors
                .remove(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))
        };
        let mut side = |s: Side| -> Result<SideParams> {
            let mut t: Vec<Tensor> = Vec::with_capacity(PARAM_NAMES.len());
            for p in PARAM_NAMES {
                t.push(take(&format!("{}.{p}", s.name()))?);
            }
            let mut it = t.into_iter();
            let mut next = || it.next().expect("seven tensors");
            Ok(SideParams {
                encoder: Encoder {
                    w1: next(),
                    b1: next(),
                    w2: next(),
                    b2: next(),
                },
                decoder: Decoder { w: next(), b: next() },
                prototypes: next(),
            })
        };
        let user = side(Side::User)?;
        let item = side(Side::Item)?;
        let user_probs = take("user.probs")?;
        let item_probs = take("item.probs")?;
        let st = &meta.state;
        if st.rng_algorithm != RNG_ALGORITHM {
            return Err(Error::Checkpoint(format!("unsupported rng algorithm {}", st.rng_algorithm)));
        }
        let parse_err = |what: &str| Error::Checkpoint(format!("bad {what} in checkpoint"));
        let rng = RngState::restore(
            st.rng_seed.parse().map_err(|_| parse_err("rng_seed"))?,
            st.rng_stream.parse().map_err(|_| parse_err("rng_stream"))?,
            st.rng_word_pos.parse().map_err(|_| parse_err("rng_word_pos"))?,
        );
        let best_metric = f64::from_bits(u64::from_str_radix(&st.best_metric_bits, 16).map_err(|_| parse_err("best_metric_bits"))?);
        Ok(Checkpoint {
            epoch: st.epoch,
            best_metric,
            data_fingerprint: st.data_fingerprint.clone(),
            config: meta.train,
            params: ModelParams { user, item },
            user_probs,
            item_probs,
            rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Hex SHA-256 of the serialized checkpoint.
    pub fn content_hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        h.update(self.to_bytes()?);
        Ok(hex_digest(h))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("value {v} exceeds u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated checkpoint: need {n} bytes at offset {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }
}
