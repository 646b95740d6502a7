//! Layer and model definitions, per-filter scaling factors and the
//! bookkeeping that turns a model state into transmittable differences.

mod scaled;

pub use scaled::{ScaledKind, ScaledLayer};

use std::collections::BTreeSet;

use rand::Rng;
use thiserror::Error;

use crate::tensor::{ParamSet, Tape, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("no layer named `{0}`")]
    UnknownLayer(String),
    #[error("layer `{0}` is neither convolutional nor dense")]
    NotScalable(String),
    #[error("model has no convolutional or dense layer")]
    NoScalableLayers,
    #[error("parameter manifests differ at `{0}`")]
    Manifest(String),
    #[error("unknown model preset `{0}`")]
    UnknownPreset(String),
    #[error("layer `{layer}` cannot accept input of shape {shape:?}")]
    Input { layer: String, shape: Vec<usize> },
}

pub type Result<T> = std::result::Result<T, ModelError>;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Dense {
        out: usize,
    },
    BatchNorm,
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
}

/// Which layers receive scaling factors.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScalingPolicy {
    AllLayers,
    ListedLayers(Vec<String>),
    /// Only the dense layers of the updatable classifier head.
    PartialClassifierOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub name: String,
    /// Channels, height, width of one input sample.
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    pub scaling_policy: ScalingPolicy,
    /// Layer names whose parameters are trained and transmitted. `None`
    /// means the whole model.
    pub update_scope: Option<Vec<String>>,
}

pub const PRESETS: [&str; 3] = ["tiny_cnn", "vgg11_thinned", "vgg11_thinned_partial"];

/// Convolutional filter counts of the thinned VGG11.
pub const VGG11_THINNED_FILTERS: [usize; 8] = [32, 64, 128, 128, 128, 128, 128, 128];

fn conv3(out: usize) -> LayerSpec {
    LayerSpec::Conv {
        out,
        kernel: 3,
        stride: 1,
        padding: 1,
    }
}

fn vgg11_features() -> Vec<LayerSpec> {
    // Pool after conv 1, 2, 4, 6 and 8.
    let mut layers = Vec::new();
    for (i, &f) in VGG11_THINNED_FILTERS.iter().enumerate() {
        layers.push(conv3(f));
        layers.push(LayerSpec::Relu);
        if matches!(i, 0 | 1 | 3 | 5 | 7) {
            layers.push(LayerSpec::MaxPool { size: 2 });
        }
    }
    layers.push(LayerSpec::Flatten);
    layers
}

impl ModelSpec {
    pub fn preset(name: &str, input: [usize; 3], classes: usize) -> Result<ModelSpec> {
        let (layers, scaling_policy, update_scope) = match name {
            "tiny_cnn" => (
                vec![
                    conv3(8),
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                    LayerSpec::MaxPool { size: 2 },
                    conv3(16),
                    LayerSpec::BatchNorm,
                    LayerSpec::Relu,
                    LayerSpec::MaxPool { size: 2 },
                    LayerSpec::Flatten,
                    LayerSpec::Dense { out: 32 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { out: classes },
                ],
                ScalingPolicy::AllLayers,
                None,
            ),
            "vgg11_thinned" => {
                let mut layers = vgg11_features();
                layers.extend([
                    LayerSpec::Dense { out: 128 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { out: classes },
                ]);
                (layers, ScalingPolicy::AllLayers, None)
            }
            "vgg11_thinned_partial" => {
                let mut layers = vgg11_features();
                layers.extend([
                    LayerSpec::BatchNorm,
                    LayerSpec::Dense { out: 248 },
                    LayerSpec::Relu,
                    LayerSpec::Dense { out: classes },
                ]);
                (
                    layers,
                    ScalingPolicy::PartialClassifierOnly,
                    Some(vec!["bn1".to_string(), "fc1".into(), "fc2".into()]),
                )
            }
            other => return Err(ModelError::UnknownPreset(other.to_string())),
        };
        Ok(ModelSpec {
            name: name.to_string(),
            input,
            layers,
            scaling_policy,
            update_scope,
        })
    }
}

/// Parameter group; decides quantization step size and trainability.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum GroupLabel {
    Weights,
    Scaling,
    BiasBn,
}

impl GroupLabel {
    pub fn as_str(self) -> &'static str {
        match self {
            GroupLabel::Weights => "weights",
            GroupLabel::Scaling => "scaling",
            GroupLabel::BiasBn => "bias_bn",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamGroup {
    pub label: GroupLabel,
    pub members: Vec<String>,
}

/// Frozen parameter groups for one training phase.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrainMask {
    pub frozen: BTreeSet<GroupLabel>,
}

impl TrainMask {
    pub fn is_frozen(&self, g: GroupLabel) -> bool {
        self.frozen.contains(&g)
    }

    /// BatchNorm uses batch statistics (and updates running statistics)
    /// only while its group is trainable.
    pub fn batch_norm_trains(&self) -> bool {
        !self.is_frozen(GroupLabel::BiasBn)
    }
}

pub fn freeze_groups(frozen: &[GroupLabel]) -> TrainMask {
    TrainMask {
        frozen: frozen.iter().copied().collect(),
    }
}

/// Main-training mask: everything but the scaling factors.
pub fn weights_phase() -> TrainMask {
    freeze_groups(&[GroupLabel::Scaling])
}

/// Scaling sub-epoch mask: only the scaling factors.
pub fn scaling_phase() -> TrainMask {
    freeze_groups(&[GroupLabel::Weights, GroupLabel::BiasBn])
}

#[derive(Debug, Clone, PartialEq)]
enum LayerKind {
    Conv {
        stride: usize,
        padding: usize,
        scaled: bool,
    },
    Dense {
        scaled: bool,
    },
    BatchNorm,
    Relu,
    MaxPool {
        size: usize,
    },
    Flatten,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    name: String,
    kind: LayerKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Train,
    Eval,
}

/// Result of [`Model::forward`]: logits plus the tape handle of every
/// parameter used.
pub struct Forward {
    pub logits: Var,
    pub params: Vec<(String, Var)>,
}

/// An instantiated model: architecture plus its full parameter state.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    spec: ModelSpec,
    layers: Vec<Layer>,
    pub params: ParamSet,
}

impl Model {
    /// Builds the model with He-uniform (fan-in) weights, zero biases and
    /// unit/zero BatchNorm affine parameters.
    pub fn new(spec: ModelSpec, rng: &mut impl Rng) -> Result<Model> {
        let mut params = ParamSet::new();
        let mut layers = Vec::new();
        let (mut n_conv, mut n_fc, mut n_bn, mut n_act, mut n_pool) = (0, 0, 0, 0, 0);
        let mut shape: Vec<usize> = spec.input.to_vec();
        for ls in &spec.layers {
            let (name, kind) = match *ls {
                LayerSpec::Conv {
                    out,
                    kernel,
                    stride,
                    padding,
                } => {
                    n_conv += 1;
                    let name = format!("conv{n_conv}");
                    if shape.len() != 3 || shape[1] + 2 * padding < kernel || shape[2] + 2 * padding < kernel {
                        return Err(ModelError::Input { layer: name, shape });
                    }
                    let fan_in = shape[0] * kernel * kernel;
                    params.insert(
                        format!("{name}.weight"),
                        he_uniform(&[out, shape[0], kernel, kernel], fan_in, rng),
                    );
                    params.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
                    shape = vec![
                        out,
                        (shape[1] + 2 * padding - kernel) / stride + 1,
                        (shape[2] + 2 * padding - kernel) / stride + 1,
                    ];
                    (
                        name,
                        LayerKind::Conv {
                            stride,
                            padding,
                            scaled: false,
                        },
                    )
                }
                LayerSpec::Dense { out } => {
                    n_fc += 1;
                    let name = format!("fc{n_fc}");
                    if shape.len() != 1 {
                        return Err(ModelError::Input { layer: name, shape });
                    }
                    params.insert(format!("{name}.weight"), he_uniform(&[out, shape[0]], shape[0], rng));
                    params.insert(format!("{name}.bias"), Tensor::zeros(&[out]));
                    shape = vec![out];
                    (name, LayerKind::Dense { scaled: false })
                }
                LayerSpec::BatchNorm => {
                    n_bn += 1;
                    let name = format!("bn{n_bn}");
                    let c = shape[0];
                    params.insert(format!("{name}.weight"), Tensor::ones(&[c]));
                    params.insert(format!("{name}.bias"), Tensor::zeros(&[c]));
                    params.insert(format!("{name}.running_mean"), Tensor::zeros(&[c]));
                    params.insert(format!("{name}.running_var"), Tensor::ones(&[c]));
                    (name, LayerKind::BatchNorm)
                }
                LayerSpec::Relu => {
                    n_act += 1;
                    (format!("relu{n_act}"), LayerKind::Relu)
                }
                LayerSpec::MaxPool { size } => {
                    n_pool += 1;
                    let name = format!("pool{n_pool}");
                    if shape.len() != 3 || size == 0 || shape[1] < size || shape[2] < size {
                        return Err(ModelError::Input { layer: name, shape });
                    }
                    shape = vec![shape[0], shape[1] / size, shape[2] / size];
                    (name, LayerKind::MaxPool { size })
                }
                LayerSpec::Flatten => {
                    shape = vec![shape.iter().product()];
                    ("flatten".to_string(), LayerKind::Flatten)
                }
            };
            layers.push(Layer { name, kind });
        }
        if let Some(scope) = &spec.update_scope {
            for s in scope {
                if !layers.iter().any(|l| &l.name == s) {
                    return Err(ModelError::UnknownLayer(s.clone()));
                }
            }
        }
        Ok(Model { spec, layers, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn layer_names(&self) -> impl Iterator<Item = &str> {
        self.layers.iter().map(|l| l.name.as_str())
    }

    fn layer_of(name: &str) -> &str {
        name.split('.').next().unwrap_or(name)
    }

    pub fn group_of(&self, param: &str) -> Option<GroupLabel> {
        if !self.params.contains(param) {
            return None;
        }
        let layer = self.layers.iter().find(|l| l.name == Self::layer_of(param))?;
        let suffix = param.rsplit('.').next()?;
        Some(match (&layer.kind, suffix) {
            (LayerKind::Conv { .. } | LayerKind::Dense { .. }, "weight") => GroupLabel::Weights,
            (_, "scaling") => GroupLabel::Scaling,
            _ => GroupLabel::BiasBn,
        })
    }

    /// Groups partition the parameter set; each group lists members in
    /// parameter order.
    pub fn param_groups(&self) -> Vec<ParamGroup> {
        [GroupLabel::Weights, GroupLabel::Scaling, GroupLabel::BiasBn]
            .into_iter()
            .map(|label| ParamGroup {
                label,
                members: self
                    .params
                    .names()
                    .filter(|n| self.group_of(n) == Some(label))
                    .map(str::to_string)
                    .collect(),
            })
            .collect()
    }

    /// True for parameters that are trained and transmitted.
    pub fn in_update_scope(&self, param: &str) -> bool {
        match &self.spec.update_scope {
            None => true,
            Some(scope) => scope.iter().any(|s| s == Self::layer_of(param)),
        }
    }

    /// Names of the parameters included in a transmitted update.
    pub fn update_names(&self) -> Vec<String> {
        self.params
            .names()
            .filter(|n| self.in_update_scope(n))
            .map(str::to_string)
            .collect()
    }

    fn is_buffer(param: &str) -> bool {
        param.ends_with(".running_mean") || param.ends_with(".running_var")
    }

    /// Parameters the optimizer updates under `mask` (running statistics
    /// are never optimizer-trained).
    pub fn trainable_names(&self, mask: &TrainMask) -> Vec<String> {
        self.params
            .names()
            .filter(|n| !Self::is_buffer(n) && self.in_update_scope(n))
            .filter(|n| self.group_of(n).is_some_and(|g| !mask.is_frozen(g)))
            .map(str::to_string)
            .collect()
    }

    pub fn count_scaling_params(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.ends_with(".scaling"))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Names of layers carrying scaling factors.
    pub fn scaled_layers(&self) -> Vec<&str> {
        self.layers
            .iter()
            .filter(|l| {
                matches!(
                    l.kind,
                    LayerKind::Conv { scaled: true, .. } | LayerKind::Dense { scaled: true }
                )
            })
            .map(|l| l.name.as_str())
            .collect()
    }

    /// Equips the layers selected by `policy` with scaling factors of value
    /// one, shaped `M x 1 x ... x 1` like the layer weight.
    pub fn equip_scaling(&mut self, policy: &ScalingPolicy) -> Result<()> {
        let scalable: Vec<String> = self
            .layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { .. } | LayerKind::Dense { .. }))
            .map(|l| l.name.clone())
            .collect();
        if scalable.is_empty() {
            return Err(ModelError::NoScalableLayers);
        }
        let selected: Vec<String> = match policy {
            ScalingPolicy::AllLayers => scalable,
            ScalingPolicy::ListedLayers(names) => {
                for n in names {
                    if !self.layers.iter().any(|l| &l.name == n) {
                        return Err(ModelError::UnknownLayer(n.clone()));
                    }
                    if !scalable.contains(n) {
                        return Err(ModelError::NotScalable(n.clone()));
                    }
                }
                names.clone()
            }
            ScalingPolicy::PartialClassifierOnly => scalable
                .into_iter()
                .filter(|n| n.starts_with("fc") && self.in_update_scope(&format!("{n}.weight")))
                .collect(),
        };
        // Rebuild the parameter order so each scaling tensor follows its
        // layer's bias.
        let mut rebuilt = ParamSet::new();
        for (name, t) in self.params.iter() {
            rebuilt.insert(name, t.clone());
            if let Some(layer) = name.strip_suffix(".bias") {
                if selected.iter().any(|s| s == layer) && !self.params.contains(&format!("{layer}.scaling")) {
                    let w = self.params.require(&format!("{layer}.weight"))?;
                    let mut shape = vec![1; w.rank()];
                    shape[0] = w.shape()[0];
                    rebuilt.insert(format!("{layer}.scaling"), Tensor::ones(&shape));
                }
            }
        }
        self.params = rebuilt;
        for l in &mut self.layers {
            if selected.contains(&l.name) {
                match &mut l.kind {
                    LayerKind::Conv { scaled, .. } | LayerKind::Dense { scaled } => *scaled = true,
                    _ => unreachable!("selection only holds conv/dense names"),
                }
            }
        }
        Ok(())
    }

    /// Records one forward pass on `tape`. In [`Phase::Train`] with a
    /// trainable BatchNorm group the running statistics are updated.
    pub fn forward(&mut self, tape: &mut Tape, x: Tensor, phase: Phase, mask: &TrainMask) -> Result<Forward> {
        let expected = [
            x.shape().first().copied().unwrap_or(0),
            self.spec.input[0],
            self.spec.input[1],
            self.spec.input[2],
        ];
        if x.shape() != expected {
            return Err(ModelError::Input {
                layer: "input".into(),
                shape: x.shape().to_vec(),
            });
        }
        let trainable: BTreeSet<String> = match phase {
            Phase::Train => self.trainable_names(mask).into_iter().collect(),
            Phase::Eval => BTreeSet::new(),
        };
        let bn_train = phase == Phase::Train && mask.batch_norm_trains();
        let mut handles: Vec<(String, Var)> = Vec::new();
        let mut leaf = |tape: &mut Tape, params: &ParamSet, name: String| -> Result<Var> {
            let v = tape.leaf(params.require(&name)?.clone(), trainable.contains(&name));
            handles.push((name, v));
            Ok(v)
        };
        let mut h = tape.leaf(x, false);
        for layer in &self.layers {
            let n = &layer.name;
            h = match layer.kind {
                LayerKind::Conv {
                    stride,
                    padding,
                    scaled,
                } => {
                    let w = leaf(tape, &self.params, format!("{n}.weight"))?;
                    let b = leaf(tape, &self.params, format!("{n}.bias"))?;
                    let w = if scaled {
                        let s = leaf(tape, &self.params, format!("{n}.scaling"))?;
                        tape.scale_rows(w, s)?
                    } else {
                        w
                    };
                    tape.conv2d(h, w, Some(b), stride, padding)?
                }
                LayerKind::Dense { scaled } => {
                    let w = leaf(tape, &self.params, format!("{n}.weight"))?;
                    let b = leaf(tape, &self.params, format!("{n}.bias"))?;
                    let w = if scaled {
                        let s = leaf(tape, &self.params, format!("{n}.scaling"))?;
                        tape.scale_rows(w, s)?
                    } else {
                        w
                    };
                    tape.dense(h, w, Some(b))?
                }
                LayerKind::BatchNorm => {
                    let g = leaf(tape, &self.params, format!("{n}.weight"))?;
                    let b = leaf(tape, &self.params, format!("{n}.bias"))?;
                    let mean_name = format!("{n}.running_mean");
                    let var_name = format!("{n}.running_var");
                    if bn_train && self.in_update_scope(&mean_name) {
                        let (out, stats) = tape.batch_norm_train(h, g, b, BN_EPS)?;
                        let rm = self
                            .params
                            .get_mut(&mean_name)
                            .ok_or_else(|| TensorError::UnknownParam(mean_name.clone()))?;
                        for (r, m) in rm.data_mut().iter_mut().zip(&stats.mean) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
                        }
                        let rv = self
                            .params
                            .get_mut(&var_name)
                            .ok_or_else(|| TensorError::UnknownParam(var_name.clone()))?;
                        for (r, v) in rv.data_mut().iter_mut().zip(&stats.var_unbiased) {
                            *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
                        }
                        out
                    } else {
                        let rm = self.params.require(&mean_name)?.data().to_vec();
                        let rv = self.params.require(&var_name)?.data().to_vec();
                        tape.batch_norm_eval(h, g, b, &rm, &rv, BN_EPS)?
                    }
                }
                LayerKind::Relu => tape.relu(h),
                LayerKind::MaxPool { size } => tape.max_pool(h, size)?,
                LayerKind::Flatten => tape.flatten(h)?,
            };
        }
        Ok(Forward {
            logits: h,
            params: handles,
        })
    }

    /// Eval-mode logits.
    pub fn predict(&mut self, x: Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, x, Phase::Eval, &TrainMask::default())?;
        Ok(tape.value(f.logits).clone())
    }

    /// Mean cross-entropy on one batch and the gradients of every trainable
    /// parameter under `mask`.
    pub fn loss_and_grads(&mut self, x: Tensor, labels: &[usize], mask: &TrainMask) -> Result<(f64, ParamSet)> {
        let mut tape = Tape::new();
        let f = self.forward(&mut tape, x, Phase::Train, mask)?;
        let loss = tape.softmax_cross_entropy(f.logits, labels)?;
        let value = tape.value(loss).item();
        if !value.is_finite() {
            return Err(TensorError::NonFinite("training loss".into()).into());
        }
        let mut grads = tape.backward(loss)?;
        let mut out = ParamSet::new();
        for (name, v) in f.params {
            if let Some(g) = grads.take(v) {
                out.insert(name, g);
            }
        }
        Ok((value, out))
    }
}

fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

/// Elementwise `new - old` over identical manifests.
pub fn param_diff(new: &ParamSet, old: &ParamSet) -> Result<ParamSet> {
    if let Some(name) = new.manifest_mismatch(old) {
        return Err(ModelError::Manifest(name));
    }
    let mut out = ParamSet::new();
    for ((name, a), (_, b)) in new.iter().zip(old.iter()) {
        out.insert(name, a.zip_map(b, "param_diff", |x, y| x - y)?);
    }
    Ok(out)
}

/// `base + delta` where `delta` names a subset of `base`; tensors absent
/// from `delta` are copied unchanged.
pub fn param_add(base: &ParamSet, delta: &ParamSet) -> Result<ParamSet> {
    let mut out = base.clone();
    for (name, d) in delta.iter() {
        let t = out
            .get_mut(name)
            .ok_or_else(|| ModelError::Manifest(name.to_string()))?;
        if t.shape() != d.shape() {
            return Err(ModelError::Manifest(name.to_string()));
        }
        t.data_mut().iter_mut().zip(d.data()).for_each(|(a, b)| *a += b);
    }
    Ok(out)
}
