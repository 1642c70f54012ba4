use super::{join, AttentionKind, FeedForward, FeedForwardKind, Module, SelfAttention};
use crate::rng::RngStream;
use crate::tensor::{Element, Result, Tensor};

/// One transformer block: AdaRMSNorm → RoPE cosine self-attention → residual,
/// then AdaRMSNorm → feedforward → residual. No output gates.
#[derive(Clone, Debug)]
pub struct HditBlock<E: Element> {
    pub attn: SelfAttention<E>,
    pub ff: FeedForward<E>,
}

impl<E: Element> HditBlock<E> {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        d: usize,
        heads: usize,
        cond_width: usize,
        kind: AttentionKind,
        shifted: bool,
        ff_kind: FeedForwardKind,
        dropout: f64,
        rng: &mut RngStream,
    ) -> Result<Self> {
        Ok(HditBlock {
            attn: SelfAttention::new(d, heads, cond_width, kind, shifted, rng)?,
            ff: FeedForward::new(d, cond_width, ff_kind, dropout, rng),
        })
    }

    /// `x: [b, h, w, d]`, `cond: [b, cond_width]`.
    pub fn forward(&self, x: &Tensor<E>, cond: &Tensor<E>, rng: Option<&mut RngStream>) -> Result<Tensor<E>> {
        self.ff.forward(&self.attn.forward(x, cond)?, cond, rng)
    }

    /// Token-set form for global blocks: `x: [b, n, d]` with one rotary
    /// position per token.
    pub fn forward_tokens(&self, x: &Tensor<E>, positions: &[(f64, f64)], cond: &Tensor<E>) -> Result<Tensor<E>> {
        self.ff.forward(&self.attn.forward_tokens(x, positions, cond)?, cond, None)
    }
}

impl<E: Element> Module<E> for HditBlock<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.attn.visit(&join(prefix, "attn"), f);
        self.ff.visit(&join(prefix, "ff"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.attn.visit_mut(&join(prefix, "attn"), f);
        self.ff.visit_mut(&join(prefix, "ff"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Distribution, Purpose};

    #[test]
    fn identity_at_construction() {
        let mut rng = RngStream::new(0, Purpose::Init);
        let block = HditBlock::<f64>::new(
            16,
            2,
            8,
            AttentionKind::Neighborhood { kernel: 3 },
            false,
            FeedForwardKind::Geglu,
            0.0,
            &mut rng,
        )
        .unwrap();
        let x = rng.fill::<f64>(&[2, 4, 4, 16], Distribution::StandardNormal);
        let cond = rng.fill::<f64>(&[2, 8], Distribution::StandardNormal);
        assert_eq!(block.forward(&x, &cond, None).unwrap().data(), x.data());
    }
}
