//! Central finite-difference checks of the autograd engine.

use fsfl::model::{Model, ModelSpec, ScalingPolicy, TrainMask};
use fsfl::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const H: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-6;
/// Coordinates probed per input tensor and trial.
const PROBES: usize = 24;

type Build = dyn Fn(&mut Tape, &[Var]) -> Var;

#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: &'static str,
    pub trials: usize,
    /// Largest relative error `|g - g_fd| / max(|g|, |g_fd|)` over the
    /// probed gradient vector of any input in any trial.
    pub worst: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.worst < TOLERANCE
    }
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Values at least 0.02 away from zero.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let mut t = random(rng, shape);
    for v in t.data_mut() {
        *v = v.signum() * (0.02 + v.abs());
    }
    t
}

/// Pairwise distinct values on a 0.01 lattice plus small jitter.
fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let mut ranks: Vec<usize> = (0..n).collect();
    ranks.shuffle(rng);
    let data = ranks
        .into_iter()
        .map(|r| (r as f64 - n as f64 / 2.0) * 0.01 + rng.random_range(-0.002..0.002))
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// `sum(op(inputs) * weights)`, with fixed random weights so every output
/// element contributes.
fn loss(build: &Build, inputs: &[Tensor], weights: &Tensor, grad: bool) -> (f64, Option<Vec<Tensor>>) {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), grad)).collect();
    let out = build(&mut tape, &vars);
    let w = tape.leaf(weights.clone(), false);
    let prod = tape.mul(out, w).unwrap();
    let l = tape.sum(prod);
    let value = tape.value(l).item();
    if !grad {
        return (value, None);
    }
    let mut grads = tape.backward(l).unwrap();
    let g = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    (value, Some(g))
}

fn relative(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).powi(2))
        .sum::<f64>()
        .sqrt();
    let a: f64 = analytic.iter().map(|v| v * v).sum::<f64>().sqrt();
    let n: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scale = a.max(n);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

fn check_once(build: &Build, inputs: &[Tensor], rng: &mut ChaCha8Rng) -> f64 {
    let out_shape = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), false)).collect();
        let out = build(&mut tape, &vars);
        tape.value(out).shape().to_vec()
    };
    let weights = random(rng, &out_shape);
    let (_, grads) = loss(build, inputs, &weights, true);
    let grads = grads.unwrap();
    let mut worst: f64 = 0.0;
    for (k, input) in inputs.iter().enumerate() {
        let mut idx: Vec<usize> = (0..input.numel()).collect();
        idx.shuffle(rng);
        idx.truncate(PROBES);
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for &i in &idx {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += H;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= H;
            let fd = (loss(build, &plus, &weights, false).0 - loss(build, &minus, &weights, false).0) / (2.0 * H);
            analytic.push(grads[k].data()[i]);
            numeric.push(fd);
        }
        worst = worst.max(relative(&analytic, &numeric));
    }
    worst
}

struct Case {
    op: &'static str,
    inputs: Box<dyn Fn(&mut ChaCha8Rng, usize) -> Vec<Tensor>>,
    build: Box<dyn Fn(usize) -> Box<Build>>,
}

fn cases() -> Vec<Case> {
    vec![
        Case {
            op: "conv2d",
            inputs: Box::new(|rng, trial| {
                let bias = trial % 2 == 0;
                let mut v = vec![random(rng, &[2, 3, 6, 5]), random(rng, &[4, 3, 3, 3])];
                if bias {
                    v.push(random(rng, &[4]));
                }
                v
            }),
            build: Box::new(|trial| {
                let (stride, pad) = [(1, 1), (2, 0), (1, 0), (2, 1)][trial % 4];
                Box::new(move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad).unwrap())
            }),
        },
        Case {
            op: "dense",
            inputs: Box::new(|rng, trial| {
                let mut v = vec![random(rng, &[3, 7]), random(rng, &[5, 7])];
                if trial % 2 == 0 {
                    v.push(random(rng, &[5]));
                }
                v
            }),
            build: Box::new(|_| Box::new(|t, v| t.dense(v[0], v[1], v.get(2).copied()).unwrap())),
        },
        Case {
            op: "relu",
            inputs: Box::new(|rng, _| vec![away_from_zero(rng, &[2, 3, 4, 4])]),
            build: Box::new(|_| Box::new(|t, v| t.relu(v[0]))),
        },
        Case {
            op: "max_pool",
            inputs: Box::new(|rng, _| vec![distinct(rng, &[2, 3, 6, 4])]),
            build: Box::new(|_| Box::new(|t, v| t.max_pool(v[0], 2).unwrap())),
        },
        Case {
            op: "batch_norm_train",
            inputs: Box::new(|rng, trial| {
                let shape: &[usize] = if trial % 2 == 0 { &[4, 3, 3, 3] } else { &[6, 3] };
                vec![random(rng, shape), random(rng, &[3]), random(rng, &[3])]
            }),
            build: Box::new(|_| Box::new(|t, v| t.batch_norm_train(v[0], v[1], v[2], 1e-5).unwrap().0)),
        },
        Case {
            op: "batch_norm_eval",
            inputs: Box::new(|rng, _| vec![random(rng, &[3, 2, 2, 3]), random(rng, &[2]), random(rng, &[2])]),
            build: Box::new(|_| {
                Box::new(|t, v| {
                    t.batch_norm_eval(v[0], v[1], v[2], &[0.3, -0.1], &[0.7, 1.9], 1e-5)
                        .unwrap()
                })
            }),
        },
        Case {
            op: "scale_rows",
            inputs: Box::new(|rng, trial| {
                if trial % 2 == 0 {
                    vec![random(rng, &[4, 3, 3, 3]), random(rng, &[4, 1, 1, 1])]
                } else {
                    vec![random(rng, &[5, 6]), random(rng, &[5, 1])]
                }
            }),
            build: Box::new(|_| Box::new(|t, v| t.scale_rows(v[0], v[1]).unwrap())),
        },
        Case {
            op: "scaled_conv2d",
            inputs: Box::new(|rng, _| {
                vec![
                    random(rng, &[2, 2, 5, 5]),
                    random(rng, &[3, 2, 3, 3]),
                    random(rng, &[3, 1, 1, 1]),
                    random(rng, &[3]),
                ]
            }),
            build: Box::new(|_| {
                Box::new(|t, v| {
                    let w = t.scale_rows(v[1], v[2]).unwrap();
                    t.conv2d(v[0], w, Some(v[3]), 1, 1).unwrap()
                })
            }),
        },
        Case {
            op: "mul",
            inputs: Box::new(|rng, _| vec![random(rng, &[3, 4]), random(rng, &[3, 4])]),
            build: Box::new(|_| Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
        },
        Case {
            op: "sum",
            inputs: Box::new(|rng, _| vec![random(rng, &[2, 5])]),
            build: Box::new(|_| Box::new(|t, v| t.sum(v[0]))),
        },
        Case {
            op: "flatten",
            inputs: Box::new(|rng, _| vec![random(rng, &[2, 3, 2, 2])]),
            build: Box::new(|_| Box::new(|t, v| t.flatten(v[0]).unwrap())),
        },
        Case {
            op: "softmax_cross_entropy",
            inputs: Box::new(|rng, _| {
                let mut logits = random(rng, &[4, 5]);
                logits.data_mut().iter_mut().for_each(|v| *v *= 3.0);
                vec![logits]
            }),
            build: Box::new(|trial| {
                let labels: Vec<usize> = (0..4).map(|i| (i * 3 + trial) % 5).collect();
                Box::new(move |t, v| t.softmax_cross_entropy(v[0], &labels).unwrap())
            }),
        },
    ]
}

/// Runs `trials` seeded checks of every op.
pub fn check_ops(trials: usize, seed: u64) -> Vec<OpReport> {
    cases()
        .into_iter()
        .enumerate()
        .map(|(k, case)| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64);
            let mut worst: f64 = 0.0;
            for trial in 0..trials {
                let inputs = (case.inputs)(&mut rng, trial);
                let build = (case.build)(trial);
                worst = worst.max(check_once(build.as_ref(), &inputs, &mut rng));
            }
            OpReport {
                op: case.op,
                trials,
                worst,
            }
        })
        .collect()
}

/// The full training loss of a scaled tiny CNN against finite differences,
/// probing every parameter tensor. The error is taken over the joint
/// gradient vector: biases and scaling factors feeding a training-mode
/// BatchNorm have (near) zero true gradient, where per-tensor ratios
/// measure only rounding noise.
pub fn check_model(trials: usize, seed: u64) -> OpReport {
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1000 + trial as u64);
        let spec = ModelSpec::preset("tiny_cnn", [3, 8, 8], 3).unwrap();
        let mut model = Model::new(spec, &mut rng).unwrap();
        model.equip_scaling(&ScalingPolicy::AllLayers).unwrap();
        for (name, t) in model.params.iter_mut() {
            if name.ends_with(".scaling") {
                t.data_mut().iter_mut().for_each(|v| *v = rng.random_range(0.5..1.5));
            }
        }
        let x = random(&mut rng, &[4, 3, 8, 8]);
        let labels = [0, 2, 1, 2];
        let mask = TrainMask::default();
        let (_, grads) = model.loss_and_grads(x.clone(), &labels, &mask).unwrap();
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for name in model.trainable_names(&mask) {
            let n = model.params.get(&name).unwrap().numel();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.truncate(8);
            for i in idx {
                let probe = |delta: f64| {
                    let mut m = model.clone();
                    m.params.get_mut(&name).unwrap().data_mut()[i] += delta;
                    m.loss_and_grads(x.clone(), &labels, &mask).unwrap().0
                };
                numeric.push((probe(H) - probe(-H)) / (2.0 * H));
                analytic.push(grads.get(&name).unwrap().data()[i]);
            }
        }
        worst = worst.max(relative(&analytic, &numeric));
    }
    OpReport {
        op: "tiny_cnn_loss",
        trials,
        worst,
    }
}
