use serde::{Deserialize, Serialize};

use super::{join, AdaRmsNorm, Linear, Module};
use crate::rng::RngStream;
use crate::tensor::{Element, Result, Tensor};

/// Shape of the pointwise feedforward sub-block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeedForwardKind {
    /// `down(gelu(gate·x) ⊙ value·x)` with hidden width 3·d.
    #[default]
    Geglu,
    /// `down(gelu(up·x))` with hidden width 4·d.
    Gelu,
}

impl FeedForwardKind {
    pub fn hidden(self, d: usize) -> usize {
        match self {
            FeedForwardKind::Geglu => 3 * d,
            FeedForwardKind::Gelu => 4 * d,
        }
    }
}

/// Inverted dropout: zeroes entries with probability `p`, rescales the rest.
pub(crate) fn dropout<E: Element>(x: &Tensor<E>, p: f64, rng: Option<&mut RngStream>) -> Result<Tensor<E>> {
    let Some(rng) = rng else { return Ok(x.clone()) };
    if p <= 0.0 {
        return Ok(x.clone());
    }
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..x.numel())
        .map(|_| if rng.uniform() < p { 0.0 } else { keep })
        .collect();
    x.mul(&Tensor::from_f64_slice(&mask, x.shape())?)
}

/// Pre-norm feedforward sub-block with a residual connection. All linears are
/// bias-free and the down projection starts at zero.
#[derive(Clone, Debug)]
pub struct FeedForward<E: Element> {
    pub kind: FeedForwardKind,
    pub norm: AdaRmsNorm<E>,
    pub up_value: Linear<E>,
    /// Absent for the plain GELU variant.
    pub up_gate: Option<Linear<E>>,
    pub down: Linear<E>,
    pub dropout: f64,
}

impl<E: Element> FeedForward<E> {
    pub fn new(d: usize, cond_width: usize, kind: FeedForwardKind, dropout: f64, rng: &mut RngStream) -> Self {
        let hidden = kind.hidden(d);
        let up_value = Linear::new(d, hidden, rng);
        let up_gate = (kind == FeedForwardKind::Geglu).then(|| Linear::new(d, hidden, rng));
        FeedForward {
            kind,
            norm: AdaRmsNorm::new(d, cond_width),
            up_value,
            up_gate,
            down: Linear::zeros(hidden, d),
            dropout,
        }
    }

    /// The feedforward map itself, without norm or residual.
    pub fn branch(&self, x: &Tensor<E>, rng: Option<&mut RngStream>) -> Result<Tensor<E>> {
        let value = self.up_value.forward(x)?;
        let hidden = match &self.up_gate {
            Some(gate) => gate.forward(x)?.gelu()?.mul(&value)?,
            None => value.gelu()?,
        };
        self.down.forward(&dropout(&hidden, self.dropout, rng)?)
    }

    /// `x + branch(norm(x, cond))`; dropout is active only when `rng` is given.
    pub fn forward(&self, x: &Tensor<E>, cond: &Tensor<E>, rng: Option<&mut RngStream>) -> Result<Tensor<E>> {
        x.add(&self.branch(&self.norm.forward(x, cond)?, rng)?)
    }
}

impl<E: Element> Module<E> for FeedForward<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.up_value.visit(&join(prefix, "up_value"), f);
        if let Some(g) = &self.up_gate {
            g.visit(&join(prefix, "up_gate"), f);
        }
        self.down.visit(&join(prefix, "down"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.up_value.visit_mut(&join(prefix, "up_value"), f);
        if let Some(g) = &mut self.up_gate {
            g.visit_mut(&join(prefix, "up_gate"), f);
        }
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}
