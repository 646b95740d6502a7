use std::collections::BTreeMap;

use crate::codec::{self, QuantizedTensor};
use crate::model::GroupLabel;
use crate::sparsify::{self, SparsifyConfig, TensorKind};
use crate::tensor::ParamSet;

use super::{ProtocolError, Result};

/// Sparsification, quantization and serialization of one update direction.
#[derive(Debug, Clone)]
pub struct UpdatePipeline {
    /// Dense 32-bit floats instead of quantized, entropy-coded levels.
    pub raw: bool,
    pub sparsify: Option<SparsifyConfig>,
    pub weight_step: f64,
    pub other_step: f64,
    groups: BTreeMap<String, GroupLabel>,
    template: ParamSet,
}

impl UpdatePipeline {
    /// `template` fixes the names and shapes of every update; `groups`
    /// assigns each of them its parameter group.
    pub fn new(
        raw: bool,
        sparsify: Option<SparsifyConfig>,
        weight_step: f64,
        other_step: f64,
        groups: BTreeMap<String, GroupLabel>,
        template: ParamSet,
    ) -> Self {
        let sparsify = sparsify.map(|c| SparsifyConfig {
            step_size: weight_step,
            ..c
        });
        Self {
            raw,
            sparsify,
            weight_step,
            other_step,
            groups,
            template,
        }
    }

    pub fn template(&self) -> &ParamSet {
        &self.template
    }

    fn is_weight(&self, name: &str) -> bool {
        self.groups.get(name) == Some(&GroupLabel::Weights)
    }

    pub fn step_for(&self, name: &str) -> f64 {
        if self.is_weight(name) {
            self.weight_step
        } else {
            self.other_step
        }
    }

    pub fn kind_of(&self, name: &str) -> TensorKind {
        if self.is_weight(name) {
            TensorKind::Weight
        } else {
            TensorKind::Other {
                step_size: self.other_step,
            }
        }
    }

    pub fn sparsify(&self, delta: &ParamSet) -> ParamSet {
        match &self.sparsify {
            Some(cfg) => sparsify::sparsify(delta, cfg, |n| self.kind_of(n)).0,
            None => delta.clone(),
        }
    }

    fn check(&self, delta: &ParamSet) -> Result<()> {
        match self.template.manifest_mismatch(delta) {
            Some(name) => Err(ProtocolError::Manifest(name)),
            None => Ok(()),
        }
    }

    /// Serializes an (already sparsified) update.
    pub fn encode(&self, delta: &ParamSet) -> Result<Vec<u8>> {
        self.check(delta)?;
        if self.raw {
            return Ok(codec::encode_raw_f32(delta));
        }
        let q = codec::quantize_update(delta, |n| self.step_for(n))?;
        Ok(codec::encode(&q)?)
    }

    pub fn decode(&self, bytes: &[u8]) -> Result<ParamSet> {
        let delta = if self.raw {
            codec::decode_raw_f32(bytes, &self.template)?
        } else {
            let q: Vec<QuantizedTensor> = codec::decode(bytes)?;
            codec::dequantize_update(&q)
        };
        self.check(&delta)?;
        Ok(delta)
    }

    /// Bytes of a dense 32-bit encoding of one update.
    pub fn raw_bytes(&self) -> u64 {
        4 * self.template.numel() as u64
    }
}

/// Zero fraction over all elements of an update.
pub fn zero_fraction(update: &ParamSet) -> f64 {
    sparsify::measure_sparsity(update).overall()
}
