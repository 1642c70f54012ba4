//! Transformer building blocks: norms, attention variants, rotary position
//! encoding, feedforward layers, the mapping network and token merge/split.
//!
//! Token maps are laid out `[batch, height, width, channels]` throughout.

mod attention;
mod block;
mod feedforward;
mod linear;
mod mapping;
mod norm;
mod rope;
mod tokens;

pub use attention::{
    cosine_attention, global_attention, neighborhood_attention, swin_attention, swin_mask, window_partition,
    window_reverse, AttentionKind, SelfAttention, COSINE_EPS, TAU_FLOOR, TAU_INIT,
};
pub use block::HditBlock;
pub use feedforward::{FeedForward, FeedForwardKind};
pub use linear::Linear;
pub use mapping::{c_noise, fourier_features, MappingNetwork, FOURIER_FREQUENCIES};
pub use norm::{rms_norm, AdaRmsNorm, RmsNorm, NORM_EPS};
pub use rope::{apply_axial_rope, AxialRope, ROPE_BASE};
pub use tokens::{lerp_merge, pixel_shuffle, pixel_unshuffle, LerpSkip, PatchEmbed, TokenMerge, TokenSplit};

use crate::rng::RngStream;
use crate::tensor::{Element, Result, Tensor};

/// Anything that owns named parameters.
pub trait Module<E: Element> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>));
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Flattened `(name, tensor)` list in visiting order.
pub fn named_parameters<E: Element, M: Module<E> + ?Sized>(m: &M) -> Vec<(String, Tensor<E>)> {
    let mut out = Vec::new();
    m.visit("", &mut |name, t| out.push((name, t.clone())));
    out
}

pub fn parameter_count<E: Element, M: Module<E> + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit("", &mut |_, t| n += t.numel());
    n
}

/// Replaces every parameter with `f(name, old)`.
pub fn map_parameters<E: Element, M: Module<E> + ?Sized>(
    m: &mut M,
    mut f: impl FnMut(&str, &Tensor<E>) -> Result<Tensor<E>>,
) -> Result<()> {
    let mut err = None;
    m.visit_mut("", &mut |name, t| {
        if err.is_some() {
            return;
        }
        match f(&name, t) {
            Ok(new) => *t = new,
            Err(e) => err = Some(e),
        }
    });
    err.map_or(Ok(()), Err)
}

pub fn zero_grads<E: Element, M: Module<E> + ?Sized>(m: &M) {
    m.visit("", &mut |_, t| t.zero_grad());
}

/// Fan-in variance-scaling normal init: `N(0, 1/fan_in)`.
pub(crate) fn variance_scaling<E: Element>(rng: &mut RngStream, shape: &[usize], fan_in: usize) -> Tensor<E> {
    let std = 1.0 / (fan_in.max(1) as f64).sqrt();
    let data = rng
        .sample_vec(shape.iter().product(), crate::rng::Distribution::StandardNormal)
        .into_iter()
        .map(|v| E::from_f64(v * std))
        .collect();
    Tensor::parameter(data, shape).expect("finite init")
}

pub(crate) fn constant_param<E: Element>(shape: &[usize], v: f64) -> Tensor<E> {
    Tensor::full(shape, v).as_parameter()
}

/// Reshapes a per-sample `[batch, d]` vector so it broadcasts over a
/// `[batch, ..., d]` tensor of the given rank.
pub(crate) fn per_sample<E: Element>(v: &Tensor<E>, rank: usize) -> Result<Tensor<E>> {
    let (b, d) = (v.shape()[0], v.shape()[1]);
    let mut shape = vec![1; rank];
    shape[0] = b;
    shape[rank - 1] = d;
    v.reshape(&shape)
}
