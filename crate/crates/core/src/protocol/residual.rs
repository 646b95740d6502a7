//! Error accumulation. The stored residual is the transmitted update minus
//! the accumulated update, `R = dW_sent - dW_acc`, and it is subtracted
//! from the next raw update, `dW_acc = (W_new - W_old) - R`, so that the
//! part of an update lost to compression is sent later.

use crate::model::{param_diff, ModelError};
use crate::tensor::{ParamSet, Tensor};

use super::Result;

pub fn accumulate(raw: &ParamSet, residual: &ParamSet) -> Result<ParamSet> {
    Ok(param_diff(raw, residual)?)
}

/// Residual after sending `transmitted` in place of `accumulated`. Tensors
/// selected by `skip` (trained after sparsification) keep a zero residual.
pub fn next(transmitted: &ParamSet, accumulated: &ParamSet, skip: impl Fn(&str) -> bool) -> Result<ParamSet> {
    let mut r = param_diff(transmitted, accumulated)?;
    for (name, t) in r.iter_mut() {
        if skip(name) {
            *t = Tensor::zeros(t.shape());
        }
    }
    Ok(r)
}

pub(crate) fn check_manifest(residual: &ParamSet, template: &ParamSet) -> Result<()> {
    match residual.manifest_mismatch(template) {
        Some(name) => Err(ModelError::Manifest(name).into()),
        None => Ok(()),
    }
}
