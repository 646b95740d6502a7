use crate::tensor::{Tape, Tensor};

use super::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScaledKind {
    Conv { stride: usize, padding: usize },
    Dense,
}

/// A convolutional or dense layer whose filters (rows) are multiplied by
/// per-output scaling factors before being applied: `F*_m = F_m * s_m`.
/// The bias is not scaled.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledLayer {
    pub kind: ScaledKind,
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub scaling: Tensor,
}

impl ScaledLayer {
    /// Scaling factors start at one.
    pub fn new(kind: ScaledKind, weight: Tensor, bias: Option<Tensor>) -> Self {
        let mut shape = vec![1; weight.rank()];
        shape[0] = weight.shape()[0];
        Self {
            kind,
            weight,
            bias,
            scaling: Tensor::ones(&shape),
        }
    }

    pub fn outputs(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, true)
    }

    /// Output of the same layer with the scaling factors ignored.
    pub fn unscaled_forward(&self, x: &Tensor) -> Result<Tensor> {
        self.run(x, false)
    }

    fn run(&self, x: &Tensor, scaled: bool) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), false);
        let mut w = tape.leaf(self.weight.clone(), false);
        if scaled {
            let s = tape.leaf(self.scaling.clone(), false);
            w = tape.scale_rows(w, s)?;
        }
        let b = self.bias.clone().map(|b| tape.leaf(b, false));
        let y = match self.kind {
            ScaledKind::Conv { stride, padding } => tape.conv2d(xv, w, b, stride, padding)?,
            ScaledKind::Dense => tape.dense(xv, w, b)?,
        };
        Ok(tape.value(y).clone())
    }
}
