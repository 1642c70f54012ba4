use super::{constant_param, join, per_sample, Linear, Module};
use crate::tensor::{Element, Result, Tensor, TensorError};

/// Added to the mean square before the square root.
pub const NORM_EPS: f64 = 1e-6;

/// `x / sqrt(mean(x²) + eps)` over the last axis (fused forward/backward).
fn rms_normalize<E: Element>(x: &Tensor<E>) -> Result<Tensor<E>> {
    let d = *x.shape().last().ok_or(TensorError::EmptyAxis { op: "rms_norm" })?;
    if d == 0 {
        return Err(TensorError::EmptyAxis { op: "rms_norm" });
    }
    let eps = E::from_f64(NORM_EPS);
    let inv_d = E::from_f64(1.0 / d as f64);
    let xd = x.data();
    let mut out = vec![E::zero(); xd.len()];
    let mut rs = Vec::with_capacity(xd.len() / d);
    for (src, dst) in xd.chunks(d).zip(out.chunks_mut(d)) {
        let ms = src.iter().map(|&v| v * v).sum::<E>() * inv_d;
        let r = E::one() / (ms + eps).sqrt();
        rs.push(r);
        dst.iter_mut().zip(src).for_each(|(o, &v)| *o = v * r);
    }
    let xc = x.clone();
    Tensor::from_op("rms_normalize", out, x.shape().to_vec(), &[x], move |g, _| {
        let mut gx = vec![E::zero(); g.len()];
        for (((src, gr), dst), &r) in xc.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)).zip(&rs) {
            let dot = src.iter().zip(gr).map(|(&a, &b)| a * b).sum::<E>();
            let c = dot * r * r * inv_d;
            for ((o, &xv), &gv) in dst.iter_mut().zip(src).zip(gr) {
                *o = r * (gv - xv * c);
            }
        }
        vec![Some(gx)]
    })
}

/// `y = x / sqrt(mean(x²) + ε) · scale` per token; `scale` broadcasts
/// against `x` (a `[d]` vector or a per-sample `[b, 1, .., d]` tensor).
pub fn rms_norm<E: Element>(x: &Tensor<E>, scale: &Tensor<E>) -> Result<Tensor<E>> {
    rms_normalize(x)?.mul(scale)
}

/// RMSNorm with a learned per-channel scale (initialized to one).
#[derive(Clone, Debug)]
pub struct RmsNorm<E: Element> {
    pub scale: Tensor<E>,
}

impl<E: Element> RmsNorm<E> {
    pub fn new(d: usize) -> Self {
        RmsNorm {
            scale: constant_param(&[d], 1.0),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        rms_norm(x, &self.scale)
    }
}

impl<E: Element> Module<E> for RmsNorm<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(join(prefix, "scale"), &self.scale);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(join(prefix, "scale"), &mut self.scale);
    }
}

/// RMSNorm whose per-channel scale is `1 + W·cond`; no additive shift.
///
/// `W` starts at zero so the layer is a plain RMSNorm at construction.
#[derive(Clone, Debug)]
pub struct AdaRmsNorm<E: Element> {
    pub cond_to_scale: Linear<E>,
}

impl<E: Element> AdaRmsNorm<E> {
    pub fn new(d: usize, cond_width: usize) -> Self {
        AdaRmsNorm {
            cond_to_scale: Linear::zeros(cond_width, d),
        }
    }

    /// `x: [b, ..., d]`, `cond: [b, cond_width]`.
    pub fn forward(&self, x: &Tensor<E>, cond: &Tensor<E>) -> Result<Tensor<E>> {
        let scale = self.cond_to_scale.forward(cond)?.add_scalar(1.0)?;
        rms_norm(x, &per_sample(&scale, x.rank())?)
    }
}

impl<E: Element> Module<E> for AdaRmsNorm<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.cond_to_scale.visit(&join(prefix, "cond_to_scale"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.cond_to_scale.visit_mut(&join(prefix, "cond_to_scale"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Distribution, Purpose, RngStream};

    #[test]
    fn ones_stay_ones() {
        let x = Tensor::<f64>::full(&[2, 8], 1.0);
        let y = rms_norm(&x, &Tensor::full(&[8], 1.0)).unwrap();
        for v in y.data() {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn scale_invariant() {
        let x = RngStream::new(3, Purpose::Test).fill::<f64>(&[4, 16], Distribution::StandardNormal);
        let s = Tensor::full(&[16], 1.0);
        let y = rms_norm(&x, &s).unwrap();
        for c in [0.1, 10.0] {
            let yc = rms_norm(&x.scale(c).unwrap(), &s).unwrap();
            for (a, b) in y.data().iter().zip(yc.data()) {
                // ε in the denominator shifts the result by at most ε/(2·c²·ms)
                assert!((a - b).abs() < 1e-4 * a.abs().max(1.0), "{a} vs {b} at c={c}");
            }
        }
    }

    #[test]
    fn matches_direct_formula_in_binary64() {
        let x = RngStream::new(4, Purpose::Test).fill::<f32>(&[3, 12], Distribution::StandardNormal);
        let scale = RngStream::new(5, Purpose::Test).fill::<f32>(&[12], Distribution::Uniform01);
        let y = rms_norm(&x, &scale).unwrap();
        let xd = x.to_f64_vec();
        let sd = scale.to_f64_vec();
        for row in 0..3 {
            let r = &xd[row * 12..(row + 1) * 12];
            let ms = r.iter().map(|v| v * v).sum::<f64>() / 12.0;
            for c in 0..12 {
                let expect = r[c] / (ms + NORM_EPS).sqrt() * sd[c];
                let got = y.data()[row * 12 + c] as f64;
                assert!((got - expect).abs() <= 1e-5 * expect.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn ada_norm_starts_as_plain_rms_norm() {
        let x = RngStream::new(6, Purpose::Test).fill::<f64>(&[2, 3, 3, 8], Distribution::StandardNormal);
        let cond = RngStream::new(7, Purpose::Test).fill::<f64>(&[2, 5], Distribution::StandardNormal);
        let ada = AdaRmsNorm::new(8, 5);
        let y = ada.forward(&x, &cond).unwrap();
        let plain = rms_norm(&x, &Tensor::full(&[8], 1.0)).unwrap();
        assert_eq!(y.data(), plain.data());
    }
}
