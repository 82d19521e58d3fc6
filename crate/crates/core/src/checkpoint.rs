//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "NCPCKPT\0"
//! version  u32
//! header   u64 byte length, then UTF-8 JSON (model kind, wiring, head
//!          geometry, training config, selected epoch, free-form metadata)
//! arrays   u32 count, then per array:
//!            u32 name length, name bytes, u64 element count, f64 values
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::convhead::{ConvHead, ConvHeadConfig};
use crate::error::{Error, Result};
use crate::network::Policy;
use crate::params::{ModelKind, ModelParams};
use crate::trainer::{TrainConfig, TrainHistory};
use crate::wiring::WiringGraph;
use crate::Scalar;

pub const MAGIC: [u8; 8] = *b"NCPCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub kind: ModelKind,
    pub wiring: WiringGraph,
    pub head: Option<ConvHeadConfig>,
    pub train: TrainConfig,
    pub selected_epoch: Option<usize>,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub rnn: Vec<f64>,
    pub readout: [f64; 2],
    pub head: Vec<f64>,
    pub history: TrainHistory,
}

fn to_f64<T: Scalar>(v: &[T]) -> Vec<f64> {
    v.iter().map(|x| x.as_f64()).collect()
}

fn from_f64<T: Scalar>(v: &[f64]) -> Vec<T> {
    v.iter().map(|&x| T::lit(x)).collect()
}

impl Checkpoint {
    pub fn from_policy<T: Scalar>(
        policy: &Policy<T>,
        train: TrainConfig,
        selected_epoch: Option<usize>,
        history: TrainHistory,
        meta: serde_json::Value,
    ) -> Self {
        Self {
            header: CheckpointHeader {
                kind: policy.kind(),
                wiring: policy.wiring.clone(),
                head: policy.head.as_ref().map(|h| h.config.clone()),
                train,
                selected_epoch,
                meta,
            },
            rnn: to_f64(&policy.rnn.values),
            readout: [policy.readout[0].as_f64(), policy.readout[1].as_f64()],
            head: policy.head.as_ref().map_or_else(Vec::new, |h| to_f64(&h.params)),
            history,
        }
    }

    pub fn policy<T: Scalar>(&self) -> Result<Policy<T>> {
        let h = &self.header;
        h.wiring.validate()?;
        let rnn = ModelParams::from_values(h.kind, &h.wiring, from_f64(&self.rnn))?;
        let head = match &h.head {
            Some(cfg) => Some(ConvHead::from_params(cfg.clone(), from_f64(&self.head))?),
            None if self.head.is_empty() => None,
            None => return Err(Error::Format("head weights without head geometry".into())),
        };
        let mut policy = Policy::new(h.wiring.clone(), rnn, head)?;
        policy.readout = [T::lit(self.readout[0]), T::lit(self.readout[1])];
        Ok(policy)
    }

    fn arrays(&self) -> [(&'static str, &[f64]); 6] {
        [
            ("rnn", &self.rnn),
            ("readout", &self.readout),
            ("head", &self.head),
            ("history.train_loss", &self.history.train_loss),
            ("history.val_loss", &self.history.val_loss),
            ("history.lr", &self.history.lr),
        ]
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut out = Vec::with_capacity(64 + header.len() + 8 * (self.rnn.len() + self.head.len()));
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        let arrays = self.arrays();
        out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
        for (name, values) in arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(MAGIC.len(), "magic")? != MAGIC {
            return Err(Error::BadMagic);
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::UnsupportedVersion {
                found: version,
                expected: VERSION,
            });
        }
        let len = r.len64("header length")?;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(len, "header")?).map_err(|e| Error::Format(format!("checkpoint header: {e}")))?;
        let count = r.u32("array count")?;
        let mut arrays = BTreeMap::new();
        for _ in 0..count {
            let n = r.u32("array name length")? as usize;
            let name = std::str::from_utf8(r.take(n, "array name")?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_string();
            let len = r.len64("array length")?;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| Error::Truncated(name.clone()))?, &name)?;
            let values: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            if arrays.insert(name.clone(), values).is_some() {
                return Err(Error::Format(format!("duplicate array {name}")));
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last array".into()));
        }
        let mut take = |name: &str| arrays.remove(name).ok_or_else(|| Error::Format(format!("missing array {name}")));
        let rnn = take("rnn")?;
        let readout = take("readout")?;
        let readout: [f64; 2] = readout
            .try_into()
            .map_err(|_| Error::Format("readout must hold two values".into()))?;
        let head = take("head")?;
        let history = TrainHistory {
            train_loss: take("history.train_loss")?,
            val_loss: take("history.val_loss")?,
            lr: take("history.lr")?,
        };
        if let Some(name) = arrays.keys().next() {
            return Err(Error::Format(format!("unknown array {name}")));
        }
        Ok(Self {
            header,
            rnn,
            readout,
            head,
            history,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path.as_ref(), self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path.as_ref()).map_err(|e| Error::io(&path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Truncated(what.to_string()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn len64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Truncated(what.to_string()))
    }
}
