use std::collections::BTreeMap;

use super::{ParamSet, Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    SgdMomentum { momentum: f64 },
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn sgd() -> Self {
        OptimizerKind::SgdMomentum { momentum: 0.9 }
    }

    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Optimizer hyperparameters plus per-parameter moment buffers.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, learning_rate: f64) -> Self {
        Self {
            kind,
            learning_rate,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter named in `trainable`.
    /// Parameters outside `trainable` are left untouched even if `grads`
    /// holds a gradient for them.
    pub fn step<'a>(
        &mut self,
        params: &mut ParamSet,
        grads: &ParamSet,
        trainable: impl IntoIterator<Item = &'a str>,
    ) -> Result<()> {
        let names: Vec<&str> = trainable.into_iter().collect();
        for &name in &names {
            let g = grads
                .get(name)
                .ok_or_else(|| TensorError::MissingGradient(name.to_string()))?;
            let p = params.require(name)?;
            if p.shape() != g.shape() {
                return Err(super::shape_err(
                    "optimizer_step",
                    format!("`{name}`: param {:?}, grad {:?}", p.shape(), g.shape()),
                ));
            }
        }
        self.step += 1;
        let lr = self.learning_rate;
        for name in names {
            let g = grads.get(name).expect("checked").data();
            let p = params.get_mut(name).expect("checked").data_mut();
            match self.kind {
                OptimizerKind::SgdMomentum { momentum } => {
                    if momentum == 0.0 {
                        p.iter_mut().zip(g).for_each(|(w, gv)| *w -= lr * gv);
                    } else {
                        let v = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                        for ((w, vel), gv) in p.iter_mut().zip(v.iter_mut()).zip(g) {
                            *vel = momentum * *vel + gv;
                            *w -= lr * *vel;
                        }
                    }
                }
                OptimizerKind::Adam { beta1, beta2, eps } => {
                    let m = self.first.entry(name.to_string()).or_insert_with(|| vec![0.0; g.len()]);
                    let v = self
                        .second
                        .entry(name.to_string())
                        .or_insert_with(|| vec![0.0; g.len()]);
                    let t = self.step as i32;
                    let bc1 = 1.0 - beta1.powi(t);
                    let bc2 = 1.0 - beta2.powi(t);
                    for i in 0..p.len() {
                        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                        let m_hat = m[i] / bc1;
                        let v_hat = v[i] / bc2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn single(name: &str, v: f64) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, Tensor::new(vec![1], vec![v]).unwrap());
        p
    }

    #[test]
    fn plain_sgd_step() {
        let mut opt = OptimizerState::new(OptimizerKind::SgdMomentum { momentum: 0.0 }, 0.1);
        let mut p = single("w", 1.0);
        opt.step(&mut p, &single("w", 0.5), ["w"]).unwrap();
        assert!((p.get("w").unwrap().item() - 0.95).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        let mut opt = OptimizerState::new(OptimizerKind::sgd(), 0.1);
        let mut p = single("w", 0.0);
        let g = single("w", 1.0);
        opt.step(&mut p, &g, ["w"]).unwrap();
        opt.step(&mut p, &g, ["w"]).unwrap();
        // v1 = 1, v2 = 1.9; w = -0.1 - 0.19
        assert!((p.get("w").unwrap().item() + 0.29).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        // m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps).
        for g in [3.0, -0.02, 1e-4] {
            let lr = 1e-3;
            let mut opt = OptimizerState::new(OptimizerKind::adam(), lr);
            let mut p = single("w", 0.5);
            opt.step(&mut p, &single("w", g), ["w"]).unwrap();
            let expected = 0.5 - lr * g / (g.abs() + 1e-8);
            assert!((p.get("w").unwrap().item() - expected).abs() < 1e-15);
            assert!(((0.5 - p.get("w").unwrap().item()).abs() - lr).abs() < 1e-6);
        }
    }

    #[test]
    fn frozen_parameter_is_untouched() {
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.1);
        let mut p = single("w", 1.0);
        p.insert("s", Tensor::new(vec![1], vec![1.0]).unwrap());
        let mut g = single("w", 0.5);
        g.insert("s", Tensor::new(vec![1], vec![0.7]).unwrap());
        opt.step(&mut p, &g, ["w"]).unwrap();
        assert_eq!(p.get("s").unwrap().item(), 1.0);
        assert_ne!(p.get("w").unwrap().item(), 1.0);
    }

    #[test]
    fn missing_gradient_rejected() {
        let mut opt = OptimizerState::new(OptimizerKind::adam(), 0.1);
        let mut p = single("w", 1.0);
        let err = opt.step(&mut p, &ParamSet::new(), ["w"]).unwrap_err();
        assert_eq!(err, TensorError::MissingGradient("w".into()));
        assert_eq!(opt.steps(), 0);
    }
}
