//! Versioned binary checkpoints.
//!
//! Layout, little-endian throughout: magic `RLPFCKPT`, format version (u32),
//! 32-byte config hash, epoch (u64), validation MSE (f64 bits), parameter
//! count (u32), then per parameter its name, decay flag, shape and values,
//! then an optional optimiser block with the step count, hyperparameters and
//! both moment arrays per parameter.

use std::io::{Read, Write};

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::Array;
use crate::params::{AdamW, AdamWConfig, ParameterStore};

pub const MAGIC: &[u8; 8] = b"RLPFCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("checkpoint was written for a different configuration")]
    ConfigMismatch,
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// SHA-256 of a configuration's canonical text.
pub fn config_hash(text: &str) -> [u8; 32] {
    Sha256::digest(text.as_bytes()).into()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub epoch: u64,
    pub validation_mse: f64,
    pub params: ParameterStore,
    pub optimizer: Option<AdamW>,
}

impl Checkpoint {
    pub fn check_config(&self, hash: &[u8; 32]) -> Result<(), CheckpointError> {
        if &self.config_hash == hash {
            Ok(())
        } else {
            Err(CheckpointError::ConfigMismatch)
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, VERSION);
        out.extend_from_slice(&self.config_hash);
        put_u64(&mut out, self.epoch);
        put_f64(&mut out, self.validation_mse);
        put_u32(&mut out, self.params.len() as u32);
        for p in self.params.iter() {
            put_u32(&mut out, p.name.len() as u32);
            out.extend_from_slice(p.name.as_bytes());
            out.push(u8::from(p.decay));
            put_array(&mut out, &p.value);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(opt) => {
                out.push(1);
                put_u64(&mut out, opt.step);
                let c = opt.config;
                for v in [c.learning_rate, c.beta1, c.beta2, c.eps, c.weight_decay] {
                    put_f64(&mut out, v);
                }
                for (m, v) in opt.first_moments.iter().zip(&opt.second_moments) {
                    put_array(&mut out, m);
                    put_array(&mut out, v);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let config_hash: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let epoch = r.u64()?;
        let validation_mse = r.f64()?;
        let count = r.u32()? as usize;
        let mut params = ParameterStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| CheckpointError::Malformed("parameter name is not UTF-8".into()))?;
            let decay = match r.take(1)?[0] {
                0 => false,
                1 => true,
                other => return Err(CheckpointError::Malformed(format!("decay flag {other}"))),
            };
            let value = r.array()?;
            params
                .insert(&name, value, decay)
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
        }
        let optimizer = match r.take(1)?[0] {
            0 => None,
            1 => {
                let step = r.u64()?;
                let config = AdamWConfig {
                    learning_rate: r.f64()?,
                    beta1: r.f64()?,
                    beta2: r.f64()?,
                    eps: r.f64()?,
                    weight_decay: r.f64()?,
                };
                let mut first_moments = Vec::with_capacity(count);
                let mut second_moments = Vec::with_capacity(count);
                for p in params.iter() {
                    let (m, v) = (r.array()?, r.array()?);
                    if m.shape() != p.value.shape() || v.shape() != p.value.shape() {
                        return Err(CheckpointError::Malformed(format!(
                            "optimiser moments for `{}` have the wrong shape",
                            p.name
                        )));
                    }
                    first_moments.push(m);
                    second_moments.push(v);
                }
                Some(AdamW {
                    config,
                    step,
                    first_moments,
                    second_moments,
                })
            }
            other => return Err(CheckpointError::Malformed(format!("optimiser flag {other}"))),
        };
        if r.pos != bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(Checkpoint {
            config_hash,
            epoch,
            validation_mse,
            params,
            optimizer,
        })
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<(), CheckpointError> {
        w.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_f64(out: &mut Vec<u8>, v: f64) {
    out.extend_from_slice(&v.to_bits().to_le_bytes());
}

fn put_array(out: &mut Vec<u8>, a: &Array) {
    put_u32(out, a.ndim() as u32);
    for &d in a.shape() {
        put_u64(out, d as u64);
    }
    for &v in a.iter() {
        put_f64(out, v);
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CheckpointError::Malformed("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_bits(self.u64()?))
    }

    fn array(&mut self) -> Result<Array, CheckpointError> {
        let rank = self.u32()? as usize;
        if rank > crate::autodiff::MAX_RANK {
            return Err(CheckpointError::Malformed(format!("rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let len = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .filter(|&l| l <= self.bytes.len() / 8)
            .ok_or_else(|| CheckpointError::Malformed("array too large".into()))?;
        let data = (0..len).map(|_| self.f64()).collect::<Result<Vec<_>, _>>()?;
        Array::from_shape_vec(shape, data).map_err(|e| CheckpointError::Malformed(e.to_string()))
    }
}
