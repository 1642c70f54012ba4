use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{join, AdaRmsNorm, AxialRope, Linear, Module};
use crate::rng::RngStream;
use crate::tensor::{Element, Result, Tensor, TensorError};

/// ε in the query/key normalization denominators.
pub const COSINE_EPS: f64 = 1e-6;
/// Initial logit temperature; logits are `cos / τ`, so this is a ×10 scale.
pub const TAU_INIT: f64 = 0.1;
/// Lower clamp applied to τ after every optimizer step.
pub const TAU_FLOOR: f64 = 0.01;

const MASKED: f64 = -1e9;

/// Where each query looks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum AttentionKind {
    /// Saturating `kernel × kernel` window centered on the query.
    Neighborhood { kernel: usize },
    /// Non-overlapping windows, shifted by half a window on odd blocks.
    Swin { window: usize },
    Global,
}

impl fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AttentionKind::Neighborhood { kernel } => write!(f, "neighborhood({kernel})"),
            AttentionKind::Swin { window } => write!(f, "swin({window})"),
            AttentionKind::Global => f.write_str("global"),
        }
    }
}

impl FromStr for AttentionKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let s = s.trim();
        if s == "global" {
            return Ok(AttentionKind::Global);
        }
        let parse_arg = |name: &str| -> Option<std::result::Result<usize, String>> {
            let inner = s.strip_prefix(name)?.strip_prefix('(')?.strip_suffix(')')?;
            Some(inner.trim().parse().map_err(|e| format!("{s}: {e}")))
        };
        if let Some(k) = parse_arg("neighborhood") {
            return Ok(AttentionKind::Neighborhood { kernel: k? });
        }
        if let Some(w) = parse_arg("swin") {
            return Ok(AttentionKind::Swin { window: w? });
        }
        Err(format!("unknown attention kind '{s}' (expected global, neighborhood(k) or swin(w))"))
    }
}

impl TryFrom<String> for AttentionKind {
    type Error = String;
    fn try_from(s: String) -> std::result::Result<Self, String> {
        s.parse()
    }
}

impl From<AttentionKind> for String {
    fn from(k: AttentionKind) -> String {
        k.to_string()
    }
}

fn cosine_normalize<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let last = x.rank() - 1;
    x.mul(&x.square()?.sum_axis(last, true)?.add_scalar(COSINE_EPS)?.rsqrt()?)
}

/// `τ: [heads]` reshaped to broadcast over `[batch, heads, ...]` of `rank`.
fn tau_view<E: Element>(tau: &Tensor<E>, rank: usize) -> Result<Tensor<E>> {
    let mut shape = vec![1; rank];
    shape[1] = tau.numel();
    tau.reshape(&shape)
}

/// `softmax(cos(q, k) / τ + mask) · v` for `q, k, v: [batch, heads, ..., n, d]`.
///
/// `mask` is additive and broadcasts against the `[..., n, n]` logits.
pub fn cosine_attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    tau: &Tensor<E>,
    mask: Option<&Tensor<E>>,
) -> Result<Tensor<E>> {
    let r = q.rank();
    if r < 3 || k.shape() != q.shape() || v.shape()[..r - 1] != q.shape()[..r - 1] || tau.numel() != q.shape()[1] {
        return Err(TensorError::ShapeMismatch {
            op: "cosine_attention",
            lhs: q.shape().to_vec(),
            rhs: v.shape().to_vec(),
        });
    }
    let qn = cosine_normalize(q)?;
    let kn = cosine_normalize(k)?;
    let mut logits = qn.matmul(&kn.transpose(r - 2, r - 1)?)?.div(&tau_view(tau, r)?)?;
    if let Some(m) = mask {
        logits = logits.add(m)?;
    }
    logits.softmax(r - 1)?.matmul(v)
}

/// Full attention over an `h × w` map: `q, k, v: [batch, heads, h, w, d]`.
pub fn global_attention<E: Element>(q: &Tensor<E>, k: &Tensor<E>, v: &Tensor<E>, tau: &Tensor<E>) -> Result<Tensor<E>> {
    let &[b, heads, h, w, d] = q.shape() else {
        return Err(rank5_error("global_attention", q));
    };
    let flat = [b, heads, h * w, d];
    cosine_attention(&q.reshape(&flat)?, &k.reshape(&flat)?, &v.reshape(&flat)?, tau, None)?.reshape(q.shape())
}

fn rank5_error<E: Element>(op: &'static str, t: &Tensor<E>) -> TensorError {
    TensorError::InvalidSpec {
        op,
        reason: format!("expected [batch, heads, h, w, d], got {:?}", t.shape()),
    }
}

/// Neighborhood attention with border-saturating windows.
pub fn neighborhood_attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    tau: &Tensor<E>,
    kernel: usize,
) -> Result<Tensor<E>> {
    let &[b, heads, h, w, d] = q.shape() else {
        return Err(rank5_error("neighborhood_attention", q));
    };
    let grouped = [b * heads, h, w, d];
    let qn = cosine_normalize(q)?.reshape(&grouped)?;
    let kn = cosine_normalize(k)?.reshape(&grouped)?;
    let logits = qn.neighborhood_logits(&kn, kernel)?;
    let kk = logits.shape()[3];
    let logits = logits
        .reshape(&[b, heads, h * w * kk])?
        .div(&tau_view(tau, 3)?)?
        .reshape(&[b * heads, h, w, kk])?;
    logits
        .softmax(3)?
        .neighborhood_mix(&v.reshape(&grouped)?, kernel)?
        .reshape(q.shape())
}

/// `[batch, heads, h, w, d]` → `[batch, heads, windows, window², d]`.
pub fn window_partition<E: Element>(x: &Tensor<E>, window: usize) -> Result<Tensor<E>> {
    let &[b, heads, h, w, d] = x.shape() else {
        return Err(rank5_error("window_partition", x));
    };
    if window == 0 || h % window != 0 || w % window != 0 {
        return Err(TensorError::InvalidSpec {
            op: "window_partition",
            reason: format!("{h}×{w} map is not divisible by window {window}"),
        });
    }
    let (nh, nw) = (h / window, w / window);
    x.reshape(&[b, heads, nh, window, nw, window, d])?
        .permute(&[0, 1, 2, 4, 3, 5, 6])?
        .reshape(&[b, heads, nh * nw, window * window, d])
}

/// Inverse of [`window_partition`].
pub fn window_reverse<E: Element>(x: &Tensor<E>, window: usize, h: usize, w: usize) -> Result<Tensor<E>> {
    let &[b, heads, _, _, d] = x.shape() else {
        return Err(rank5_error("window_reverse", x));
    };
    let (nh, nw) = (h / window, w / window);
    x.reshape(&[b, heads, nh, nw, window, window, d])?
        .permute(&[0, 1, 2, 4, 3, 5, 6])?
        .reshape(&[b, heads, h, w, d])
}

/// Additive mask `[windows, window², window²]` for a map that was cyclically
/// shifted by `shift`: tokens from different pre-shift regions cannot attend
/// to each other.
pub fn swin_mask<E: Element>(h: usize, w: usize, window: usize, shift: usize) -> Result<Tensor<E>> {
    let region = |i: usize, n: usize| -> usize {
        if i < n - window {
            0
        } else if i < n - shift {
            1
        } else {
            2
        }
    };
    let (nh, nw) = (h / window, w / window);
    let t = window * window;
    let mut data = Vec::with_capacity(nh * nw * t * t);
    for wi in 0..nh {
        for wj in 0..nw {
            let labels: Vec<usize> = (0..t)
                .map(|p| {
                    let (i, j) = (wi * window + p / window, wj * window + p % window);
                    region(i, h) * 3 + region(j, w)
                })
                .collect();
            for a in 0..t {
                for bb in 0..t {
                    data.push(if labels[a] == labels[bb] { 0.0 } else { MASKED });
                }
            }
        }
    }
    Tensor::from_f64_slice(&data, &[nh * nw, t, t])
}

/// Window attention; with `shifted`, windows are offset by `window/2` through
/// a cyclic shift plus masking. Shifting is skipped when one window covers
/// the whole map.
pub fn swin_attention<E: Element>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    tau: &Tensor<E>,
    window: usize,
    shifted: bool,
) -> Result<Tensor<E>> {
    let &[_, _, h, w, _] = q.shape() else {
        return Err(rank5_error("swin_attention", q));
    };
    let shift = if shifted && window < h.min(w) { window / 2 } else { 0 };
    let roll = |t: &Tensor<E>, s: isize| -> Result<Tensor<E>> {
        if shift == 0 {
            Ok(t.clone())
        } else {
            t.roll(2, s)?.roll(3, s)
        }
    };
    let s = shift as isize;
    let qw = window_partition(&roll(q, -s)?, window)?;
    let kw = window_partition(&roll(k, -s)?, window)?;
    let vw = window_partition(&roll(v, -s)?, window)?;
    let mask = if shift > 0 { Some(swin_mask(h, w, window, shift)?) } else { None };
    let out = cosine_attention(&qw, &kw, &vw, tau, mask.as_ref())?;
    roll(&window_reverse(&out, window, h, w)?, s)
}

/// Pre-norm self-attention sub-block with a residual connection.
#[derive(Clone, Debug)]
pub struct SelfAttention<E: Element> {
    pub norm: AdaRmsNorm<E>,
    pub qkv: Linear<E>,
    /// Per-head logit temperature, learned in linear space.
    pub tau: Tensor<E>,
    pub out: Linear<E>,
    pub heads: usize,
    pub kind: AttentionKind,
    /// Swin only: offset windows by half a window.
    pub shifted: bool,
    rope: AxialRope,
}

impl<E: Element> SelfAttention<E> {
    pub fn new(
        d: usize,
        heads: usize,
        cond_width: usize,
        kind: AttentionKind,
        shifted: bool,
        rng: &mut RngStream,
    ) -> Result<Self> {
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::InvalidSpec {
                op: "self_attention",
                reason: format!("width {d} not divisible into {heads} heads"),
            });
        }
        Ok(SelfAttention {
            norm: AdaRmsNorm::new(d, cond_width),
            qkv: Linear::new(d, 3 * d, rng),
            tau: Tensor::full(&[heads], TAU_INIT).as_parameter(),
            out: Linear::zeros(d, d),
            heads,
            kind,
            shifted,
            rope: AxialRope::new(d / heads)?,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.out.d_in() / self.heads
    }

    /// Projects `x: [b, n, d]` to rotated `q, k` and `v`, each `[b, heads, n, head_dim]`.
    fn project(&self, x: &Tensor<E>, cond: &Tensor<E>, positions: &[(f64, f64)]) -> Result<[Tensor<E>; 3]> {
        let &[b, n, d] = x.shape() else { unreachable!("callers flatten to [b, n, d]") };
        let hd = self.head_dim();
        let qkv = self
            .qkv
            .forward(&self.norm.forward(x, cond)?)?
            .reshape(&[b, n, 3, self.heads, hd])?
            .permute(&[2, 0, 3, 1, 4])?;
        let parts = qkv.split(&[1, 1, 1], 0)?;
        let shape = [b, self.heads, n, hd];
        debug_assert_eq!(d, self.heads * hd);
        let (cos, sin) = self.rope.tables_at::<E>(positions);
        let q = self.rope.apply(&parts[0].reshape(&shape)?, &cos, &sin)?;
        let k = self.rope.apply(&parts[1].reshape(&shape)?, &cos, &sin)?;
        let v = parts[2].reshape(&shape)?;
        Ok([q, k, v])
    }

    fn finish(&self, x: &Tensor<E>, attended: &Tensor<E>) -> Result<Tensor<E>> {
        // attended: [b, heads, n, hd] -> [b, n, d]
        let merged = attended.permute(&[0, 2, 1, 3])?.reshape(x.shape())?;
        x.add(&self.out.forward(&merged)?)
    }

    /// Residual attention over a token map `x: [b, h, w, d]`; `cond: [b, c]`.
    pub fn forward(&self, x: &Tensor<E>, cond: &Tensor<E>) -> Result<Tensor<E>> {
        let &[b, h, w, d] = x.shape() else {
            return Err(TensorError::InvalidSpec {
                op: "self_attention",
                reason: format!("expected [b, h, w, d], got {:?}", x.shape()),
            });
        };
        let positions: Vec<(f64, f64)> = (0..h)
            .flat_map(|i| (0..w).map(move |j| (i as f64, j as f64)))
            .collect();
        let flat = x.reshape(&[b, h * w, d])?;
        let [q, k, v] = self.project(&flat, cond, &positions)?;
        let hd = self.head_dim();
        let grid = [b, self.heads, h, w, hd];
        let attended = match self.kind {
            AttentionKind::Global => cosine_attention(&q, &k, &v, &self.tau, None)?,
            AttentionKind::Neighborhood { kernel } => {
                neighborhood_attention(&q.reshape(&grid)?, &k.reshape(&grid)?, &v.reshape(&grid)?, &self.tau, kernel)?
            }
            AttentionKind::Swin { window } => swin_attention(
                &q.reshape(&grid)?,
                &k.reshape(&grid)?,
                &v.reshape(&grid)?,
                &self.tau,
                window,
                self.shifted,
            )?,
        }
        .reshape(&[b, self.heads, h * w, hd])?;
        self.finish(&flat, &attended)?.reshape(x.shape())
    }

    /// Global attention over an unordered token set `x: [b, n, d]` with
    /// explicit rotary positions, one per token.
    pub fn forward_tokens(&self, x: &Tensor<E>, positions: &[(f64, f64)], cond: &Tensor<E>) -> Result<Tensor<E>> {
        if self.kind != AttentionKind::Global || x.rank() != 3 || positions.len() != x.shape()[1] {
            return Err(TensorError::InvalidSpec {
                op: "self_attention_tokens",
                reason: "token-set attention needs a global layer and one position per token".into(),
            });
        }
        let [q, k, v] = self.project(x, cond, positions)?;
        self.finish(x, &cosine_attention(&q, &k, &v, &self.tau, None)?)
    }
}

impl<E: Element> Module<E> for SelfAttention<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.qkv.visit(&join(prefix, "qkv"), f);
        f(join(prefix, "tau"), &self.tau);
        self.out.visit(&join(prefix, "out"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.qkv.visit_mut(&join(prefix, "qkv"), f);
        f(join(prefix, "tau"), &mut self.tau);
        self.out.visit_mut(&join(prefix, "out"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Distribution, Purpose};

    fn randn(seed: u64, shape: &[usize]) -> Tensor<f64> {
        RngStream::new(seed, Purpose::Test).fill(shape, Distribution::StandardNormal)
    }

    fn taus(heads: usize, v: f64) -> Tensor<f64> {
        Tensor::full(&[heads], v)
    }

    #[test]
    fn attention_kind_round_trips_text() {
        for k in [
            AttentionKind::Global,
            AttentionKind::Neighborhood { kernel: 7 },
            AttentionKind::Swin { window: 8 },
        ] {
            assert_eq!(k.to_string().parse::<AttentionKind>().unwrap(), k);
        }
        assert!("local(3)".parse::<AttentionKind>().is_err());
        assert!("neighborhood(x)".parse::<AttentionKind>().is_err());
    }

    #[test]
    fn single_token_returns_value() {
        let (q, k, v) = (randn(1, &[1, 2, 1, 8]), randn(2, &[1, 2, 1, 8]), randn(3, &[1, 2, 1, 8]));
        let out = cosine_attention(&q, &k, &v, &taus(2, 0.1), None).unwrap();
        for (a, b) in out.data().iter().zip(v.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn query_scale_invariance() {
        let (q, k, v) = (randn(4, &[1, 1, 5, 8]), randn(5, &[1, 1, 5, 8]), randn(6, &[1, 1, 5, 8]));
        let base = cosine_attention(&q, &k, &v, &taus(1, 0.5), None).unwrap();
        // scale query row 2 by 7
        let mut qd = q.to_vec();
        qd[16..24].iter_mut().for_each(|x| *x *= 7.0);
        let scaled = cosine_attention(&Tensor::from_vec(qd, &[1, 1, 5, 8]).unwrap(), &k, &v, &taus(1, 0.5), None).unwrap();
        for (a, b) in base.data().iter().zip(scaled.data()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn swin_partition_and_roll_round_trip() {
        let x = randn(7, &[2, 3, 8, 8, 4]);
        let back = window_reverse(
            &window_partition(&x.roll(2, -2).unwrap().roll(3, -2).unwrap(), 4).unwrap(),
            4,
            8,
            8,
        )
        .unwrap()
        .roll(2, 2)
        .unwrap()
        .roll(3, 2)
        .unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn swin_rejects_indivisible_maps() {
        let x = randn(8, &[1, 1, 6, 6, 8]);
        assert!(swin_attention(&x, &x, &x, &taus(1, 0.1), 4, false).is_err());
    }

    #[test]
    fn swin_mask_blocks_wrapped_regions() {
        let m = swin_mask::<f64>(8, 8, 4, 2).unwrap();
        assert_eq!(m.shape(), &[4, 16, 16]);
        // the top-left window holds a single region
        assert!(m.data()[..256].iter().all(|&v| v == 0.0));
        // the bottom-right window mixes four regions
        assert!(m.data()[3 * 256..].iter().any(|&v| v < 0.0));
    }

    #[test]
    fn attention_block_is_identity_at_construction() {
        let mut rng = RngStream::new(9, Purpose::Init);
        for kind in [
            AttentionKind::Global,
            AttentionKind::Neighborhood { kernel: 3 },
            AttentionKind::Swin { window: 2 },
        ] {
            let att = SelfAttention::<f64>::new(16, 2, 6, kind, true, &mut rng).unwrap();
            let x = randn(10, &[2, 4, 4, 16]);
            let y = att.forward(&x, &randn(11, &[2, 6])).unwrap();
            assert_eq!(y.data(), x.data(), "{kind}");
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let mut rng = RngStream::new(9, Purpose::Init);
        assert!(SelfAttention::<f32>::new(24, 5, 4, AttentionKind::Global, false, &mut rng).is_err());
    }
}
