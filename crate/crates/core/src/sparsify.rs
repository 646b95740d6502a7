//! Sparsification of differential updates.
//!
//! Four schemes are provided:
//! - `Thresholded`: structured filter-mean threshold followed by the
//!   Gaussian-approximation element threshold.
//! - `FixedRate`: per-tensor top-k by magnitude.
//! - `Ternary`: top-k followed by ternarization to `{-mu, 0, +mu}`.
//! - `StructuredFixedRate`: structured filter threshold, then top-k among the
//!   surviving elements so the tensor reaches a fixed sparsity.
//!
//! Structured thresholds only apply to conv/dense weights. Biases,
//! BatchNorm parameters and scaling factors are element-thresholded in the
//! threshold-based modes and passed through in the rate-based modes.

use serde::{Deserialize, Serialize};

use crate::tensor::{ParamSet, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SparsifyMode {
    Thresholded,
    FixedRate,
    Ternary,
    StructuredFixedRate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SparsifyConfig {
    pub mode: SparsifyMode,
    /// Shift of the element threshold in standard deviations.
    pub delta: f64,
    /// Multiplier of the structured (filter-mean) threshold.
    pub gamma: f64,
    /// Fraction of elements zeroed by the rate-based modes.
    pub rate: f64,
    /// Quantization step of weight tensors; the element threshold never
    /// drops below half of it.
    pub step_size: f64,
}

impl Default for SparsifyConfig {
    fn default() -> Self {
        Self {
            mode: SparsifyMode::Thresholded,
            delta: 1.0,
            gamma: 1.0,
            rate: 0.96,
            step_size: 4.88e-4,
        }
    }
}

impl SparsifyConfig {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.rate > 0.0 && self.rate <= 1.0) {
            return Err(format!("rate must be in (0, 1], got {}", self.rate));
        }
        if self.delta < 0.0 || self.gamma < 0.0 || self.delta.is_nan() || self.gamma.is_nan() {
            return Err("delta and gamma must be non-negative".into());
        }
        if !(self.step_size > 0.0) {
            return Err(format!("step_size must be positive, got {}", self.step_size));
        }
        Ok(())
    }
}

/// How a tensor of an update is treated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TensorKind {
    /// Conv or dense weight with output elements along the first axis.
    Weight,
    /// Anything without filter structure, with its own quantization step.
    Other { step_size: f64 },
}

/// Population mean and standard deviation.
fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Element threshold from a Gaussian approximation of the update,
/// clamped to at least half a quantization step. `None` for an empty slice.
pub fn unstructured_threshold(values: &[f64], delta: f64, step_size: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let (mean, std) = mean_std(values);
    let theta = (mean - delta * std).abs().max((mean + delta * std).abs());
    Some(theta.max(step_size / 2.0))
}

/// `(gamma / M) * sum_m |mean(filter_m)|` over the `M` output elements
/// (first axis) of a layer update.
pub fn structured_threshold(layer: &Tensor, gamma: f64) -> f64 {
    filter_means(layer).map(f64::abs).sum::<f64>() * gamma / layer.shape()[0] as f64
}

fn filter_means(layer: &Tensor) -> impl Iterator<Item = f64> + '_ {
    let m = layer.shape().first().copied().unwrap_or(1);
    let row = layer.numel() / m;
    layer
        .data()
        .chunks(row)
        .map(move |f| f.iter().sum::<f64>() / row as f64)
}

/// Number of elements kept by a rate-based mode.
pub fn kept_count(numel: usize, rate: f64) -> usize {
    let keep = ((1.0 - rate) * numel as f64 + 1e-9).floor() as usize;
    keep.min(numel)
}

/// Indices of the `k` largest magnitudes among `candidates`; ties go to the
/// lower flat index.
fn top_k(values: &[f64], mut candidates: Vec<usize>, k: usize) -> Vec<usize> {
    if k >= candidates.len() {
        return candidates;
    }
    if k == 0 {
        return Vec::new();
    }
    let order = |a: &usize, b: &usize| values[*b].abs().total_cmp(&values[*a].abs()).then_with(|| a.cmp(b));
    candidates.select_nth_unstable_by(k - 1, order);
    candidates.truncate(k);
    candidates.sort_unstable();
    candidates
}

fn zero_weak_filters(values: &mut [f64], m: usize, gamma: f64, shape: &[usize]) {
    let t = Tensor::new(shape.to_vec(), values.to_vec()).expect("shape from tensor");
    let theta_s = structured_threshold(&t, gamma);
    let row = values.len() / m;
    for (filter, mean) in values.chunks_mut(row).zip(filter_means(&t).collect::<Vec<_>>()) {
        if mean.abs() < theta_s {
            filter.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

fn zero_below(values: &mut [f64], theta: f64) {
    for v in values.iter_mut() {
        if v.abs() < theta {
            *v = 0.0;
        }
    }
}

fn keep_only(values: &mut [f64], keep: &[usize]) {
    let mut next = keep.iter().peekable();
    for (i, v) in values.iter_mut().enumerate() {
        if next.peek() == Some(&&i) {
            next.next();
        } else {
            *v = 0.0;
        }
    }
}

/// Sparsifies one tensor of an update. Both thresholds are derived from
/// the incoming (unsparsified) values.
pub fn sparsify_tensor(t: &Tensor, kind: TensorKind, cfg: &SparsifyConfig) -> Tensor {
    let mut out = t.clone();
    let original = t.data();
    let values = out.data_mut();
    match kind {
        TensorKind::Other { step_size } => match cfg.mode {
            SparsifyMode::Thresholded | SparsifyMode::StructuredFixedRate => {
                if let Some(theta) = unstructured_threshold(original, cfg.delta, step_size) {
                    zero_below(values, theta);
                }
            }
            SparsifyMode::FixedRate | SparsifyMode::Ternary => {}
        },
        TensorKind::Weight => {
            let m = t.shape()[0];
            let k = kept_count(values.len(), cfg.rate);
            match cfg.mode {
                SparsifyMode::Thresholded => {
                    let theta_u =
                        unstructured_threshold(original, cfg.delta, cfg.step_size).expect("tensors are non-empty");
                    zero_weak_filters(values, m, cfg.gamma, t.shape());
                    zero_below(values, theta_u);
                }
                SparsifyMode::StructuredFixedRate => {
                    zero_weak_filters(values, m, cfg.gamma, t.shape());
                    let survivors = (0..values.len()).filter(|&i| values[i] != 0.0).collect();
                    let keep = top_k(values, survivors, k);
                    keep_only(values, &keep);
                }
                SparsifyMode::FixedRate => {
                    let keep = top_k(original, (0..values.len()).collect(), k);
                    keep_only(values, &keep);
                }
                SparsifyMode::Ternary => {
                    let keep = top_k(original, (0..values.len()).collect(), k);
                    keep_only(values, &keep);
                    let nonzero: Vec<f64> = keep.iter().map(|&i| values[i]).filter(|v| *v != 0.0).collect();
                    if !nonzero.is_empty() {
                        let mu = nonzero.iter().map(|v| v.abs()).sum::<f64>() / nonzero.len() as f64;
                        for &i in &keep {
                            if values[i] != 0.0 {
                                values[i] = mu.copysign(values[i]);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Sparsifies every tensor of `delta`; `classify` names each tensor's kind.
pub fn sparsify(
    delta: &ParamSet,
    cfg: &SparsifyConfig,
    classify: impl Fn(&str) -> TensorKind,
) -> (ParamSet, SparsityReport) {
    let mut out = ParamSet::new();
    for (name, t) in delta.iter() {
        out.insert(name, sparsify_tensor(t, classify(name), cfg));
    }
    let report = measure_sparsity(&out);
    (out, report)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSparsity {
    pub name: String,
    pub zeros: usize,
    pub numel: usize,
}

impl TensorSparsity {
    pub fn fraction(&self) -> f64 {
        self.zeros as f64 / self.numel as f64
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparsityReport {
    pub tensors: Vec<TensorSparsity>,
}

impl SparsityReport {
    /// Zero fraction over all elements.
    pub fn overall(&self) -> f64 {
        let zeros: usize = self.tensors.iter().map(|t| t.zeros).sum();
        let numel: usize = self.tensors.iter().map(|t| t.numel).sum();
        if numel == 0 {
            return 0.0;
        }
        zeros as f64 / numel as f64
    }

    pub fn get(&self, name: &str) -> Option<&TensorSparsity> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

pub fn measure_sparsity(update: &ParamSet) -> SparsityReport {
    SparsityReport {
        tensors: update
            .iter()
            .map(|(name, t)| TensorSparsity {
                name: name.to_string(),
                zeros: t.data().iter().filter(|&&v| v == 0.0).count(),
                numel: t.numel(),
            })
            .collect(),
    }
}
