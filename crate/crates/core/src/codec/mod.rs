//! Uniform quantization of sparse updates and lossless entropy coding of
//! the integer levels into a byte-aligned container.
//!
//! Each level is binarized as a significance flag, a sign flag, a
//! greater-than-one flag and an order-0 exponential-Golomb code of
//! `|level| - 2`. Flags and Golomb prefixes use adaptive contexts that are
//! reset for every tensor; Golomb suffix bits are coded as bypass bits.

mod container;
pub mod range;

pub use container::{decode, encode, inspect, RecordInfo, FORMAT_VERSION, MAGIC};

use thiserror::Error;

use crate::tensor::{ParamSet, Tensor};
use range::{BitModel, Decoder, Encoder};

/// Largest level magnitude accepted by the quantizer.
pub const MAX_LEVEL: i64 = 1 << 52;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CodecError {
    #[error("tensor `{0}` contains a non-finite value")]
    NonFinite(String),
    #[error("step size for `{name}` must be positive and finite, got {step}")]
    InvalidStep { name: String, step: f64 },
    #[error("tensor `{0}` quantizes to a level beyond the supported range")]
    LevelOverflow(String),
    #[error("tensor `{0}` does not fit the container ({1})")]
    Unrepresentable(String, &'static str),
    #[error("corrupt bitstream: {0}")]
    Corrupt(String),
}

pub type Result<T> = std::result::Result<T, CodecError>;

#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub step_size: f64,
    pub levels: Vec<i64>,
}

impl QuantizedTensor {
    pub fn numel(&self) -> usize {
        self.levels.len()
    }

    pub fn nonzeros(&self) -> usize {
        self.levels.iter().filter(|&&l| l != 0).count()
    }
}

fn check_step(name: &str, step: f64) -> Result<()> {
    if step > 0.0 && step.is_finite() {
        Ok(())
    } else {
        Err(CodecError::InvalidStep {
            name: name.to_string(),
            step,
        })
    }
}

/// Maps each element to `round(v / step)` (halves away from zero). The
/// level is nudged by one where floating-point rounding would otherwise
/// leave a reconstruction error above half a step.
pub fn quantize(name: &str, t: &Tensor, step_size: f64) -> Result<QuantizedTensor> {
    check_step(name, step_size)?;
    let half = step_size / 2.0;
    let mut levels = Vec::with_capacity(t.numel());
    for &v in t.data() {
        if !v.is_finite() {
            return Err(CodecError::NonFinite(name.to_string()));
        }
        let q = (v / step_size).round();
        if q.abs() > MAX_LEVEL as f64 {
            return Err(CodecError::LevelOverflow(name.to_string()));
        }
        let mut level = q as i64;
        let err = v - level as f64 * step_size;
        if err > half {
            level += 1;
        } else if err < -half {
            level -= 1;
        }
        levels.push(level);
    }
    Ok(QuantizedTensor {
        name: name.to_string(),
        shape: t.shape().to_vec(),
        step_size,
        levels,
    })
}

pub fn dequantize(q: &QuantizedTensor) -> Tensor {
    let data = q.levels.iter().map(|&l| l as f64 * q.step_size).collect();
    Tensor::new(q.shape.clone(), data).expect("level count matches shape")
}

/// Quantizes every tensor of an update with the step size chosen by `step_for`.
pub fn quantize_update(update: &ParamSet, step_for: impl Fn(&str) -> f64) -> Result<Vec<QuantizedTensor>> {
    update
        .iter()
        .map(|(name, t)| quantize(name, t, step_for(name)))
        .collect()
}

pub fn dequantize_update(tensors: &[QuantizedTensor]) -> ParamSet {
    let mut out = ParamSet::new();
    for q in tensors {
        out.insert(q.name.clone(), dequantize(q));
    }
    out
}

const PREFIX_CONTEXTS: usize = 16;
const MAX_PREFIX: usize = 62;

struct Contexts {
    sig: [BitModel; 2],
    sign: BitModel,
    gt1: BitModel,
    prefix: [BitModel; PREFIX_CONTEXTS],
}

impl Contexts {
    fn new() -> Self {
        Self {
            sig: [BitModel::default(); 2],
            sign: BitModel::default(),
            gt1: BitModel::default(),
            prefix: [BitModel::default(); PREFIX_CONTEXTS],
        }
    }
}

/// Entropy-codes a sequence of levels with fresh contexts.
pub fn encode_levels(levels: &[i64]) -> Vec<u8> {
    let mut enc = Encoder::new();
    let mut ctx = Contexts::new();
    let mut prev_sig = false;
    for &level in levels {
        let sig = level != 0;
        enc.encode(&mut ctx.sig[prev_sig as usize], sig);
        prev_sig = sig;
        if !sig {
            continue;
        }
        enc.encode(&mut ctx.sign, level < 0);
        let mag = level.unsigned_abs();
        enc.encode(&mut ctx.gt1, mag > 1);
        if mag > 1 {
            let n = mag - 1;
            let len = 63 - n.leading_zeros() as usize;
            for i in 0..len {
                enc.encode(&mut ctx.prefix[i.min(PREFIX_CONTEXTS - 1)], true);
            }
            enc.encode(&mut ctx.prefix[len.min(PREFIX_CONTEXTS - 1)], false);
            for b in (0..len).rev() {
                enc.encode_bypass((n >> b) & 1 == 1);
            }
        }
    }
    enc.finish()
}

/// Inverse of [`encode_levels`] for a known element count. The payload must
/// be consumed exactly.
pub fn decode_levels(payload: &[u8], count: usize) -> Result<Vec<i64>> {
    let mut dec = Decoder::new(payload)?;
    let mut ctx = Contexts::new();
    let mut prev_sig = false;
    let mut levels = Vec::with_capacity(count);
    for _ in 0..count {
        let sig = dec.decode(&mut ctx.sig[prev_sig as usize])?;
        prev_sig = sig;
        if !sig {
            levels.push(0);
            continue;
        }
        let negative = dec.decode(&mut ctx.sign)?;
        let mut mag: u64 = 1;
        if dec.decode(&mut ctx.gt1)? {
            let mut len = 0;
            while dec.decode(&mut ctx.prefix[len.min(PREFIX_CONTEXTS - 1)])? {
                len += 1;
                if len > MAX_PREFIX {
                    return Err(CodecError::Corrupt("exponential-Golomb prefix too long".into()));
                }
            }
            let mut n: u64 = 1;
            for _ in 0..len {
                n = (n << 1) | dec.decode_bypass()? as u64;
            }
            mag = n + 1;
        }
        if mag > MAX_LEVEL as u64 {
            return Err(CodecError::Corrupt("level magnitude out of range".into()));
        }
        levels.push(if negative { -(mag as i64) } else { mag as i64 });
    }
    if !dec.exhausted() {
        return Err(CodecError::Corrupt("payload has unread trailing bytes".into()));
    }
    Ok(levels)
}

/// Dense 32-bit float serialization of an update, little-endian.
pub fn encode_raw_f32(update: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(update.numel() * 4);
    for (_, t) in update.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Inverse of [`encode_raw_f32`]; `template` supplies names and shapes.
pub fn decode_raw_f32(bytes: &[u8], template: &ParamSet) -> Result<ParamSet> {
    if bytes.len() != template.numel() * 4 {
        return Err(CodecError::Corrupt(format!(
            "raw update has {} bytes, expected {}",
            bytes.len(),
            template.numel() * 4
        )));
    }
    let mut values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64);
    let mut out = ParamSet::new();
    for (name, t) in template.iter() {
        let data: Vec<f64> = values.by_ref().take(t.numel()).collect();
        out.insert(name, Tensor::new(t.shape().to_vec(), data).expect("template shape"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
