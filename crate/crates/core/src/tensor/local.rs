//! Fused kernels for rotary embeddings and neighborhood attention.

use super::kernels::for_each_chunk;
use super::{Element, Result, Tensor, TensorError};

/// Number of keys along an axis of extent `n` that a window of size `kernel`
/// covers once it saturates at the borders.
pub fn window_extent(n: usize, kernel: usize) -> usize {
    kernel.min(n)
}

/// First key index of the window for query `i` on an axis of extent `n`.
///
/// The window is centered on the query and slides back inside the map at the
/// borders, so every query sees exactly `window_extent(n, kernel)` keys.
pub fn neighborhood_window(i: usize, n: usize, kernel: usize) -> usize {
    let ext = window_extent(n, kernel);
    (i as isize - (kernel / 2) as isize).clamp(0, (n - ext) as isize) as usize
}

fn check_kernel(op: &'static str, kernel: usize) -> Result<()> {
    if kernel % 2 == 0 {
        return Err(TensorError::InvalidSpec {
            op,
            reason: format!("kernel size {kernel} must be odd"),
        });
    }
    Ok(())
}

fn rank4(op: &'static str, t: &Tensor<impl Element>) -> Result<(usize, usize, usize, usize)> {
    match *t.shape() {
        [g, h, w, d] => Ok((g, h, w, d)),
        _ => Err(TensorError::InvalidSpec {
            op,
            reason: format!("expected [groups, h, w, d], got {:?}", t.shape()),
        }),
    }
}

impl<E: Element> Tensor<E> {
    /// Rotates channel pairs `(p, p + pairs)` for `p < pairs` by the angle
    /// whose cosine/sine are tabulated per position; channels from
    /// `2·pairs` on pass through. `self: [..., n, d]`, `cos, sin: [n, pairs]`.
    pub fn rotate_pairs(&self, cos: &[E], sin: &[E], pairs: usize) -> Result<Tensor<E>> {
        let r = self.rank();
        if r < 2 {
            return Err(TensorError::InvalidSpec {
                op: "rotate_pairs",
                reason: "need at least [n, d]".into(),
            });
        }
        let (n, d) = (self.shape()[r - 2], self.shape()[r - 1]);
        if 2 * pairs > d || cos.len() != n * pairs || sin.len() != n * pairs {
            return Err(TensorError::InvalidSpec {
                op: "rotate_pairs",
                reason: format!("{pairs} pairs over d={d}, n={n}, table {}", cos.len()),
            });
        }
        let rotate = move |src: &[E], cos: &[E], sin: &[E], sign: E| -> Vec<E> {
            let mut out = src.to_vec();
            for (row, chunk) in out.chunks_mut(d).enumerate() {
                let pos = row % n;
                for p in 0..pairs {
                    let (c, s) = (cos[pos * pairs + p], sign * sin[pos * pairs + p]);
                    let (x0, x1) = (chunk[p], chunk[p + pairs]);
                    chunk[p] = x0 * c - x1 * s;
                    chunk[p + pairs] = x0 * s + x1 * c;
                }
            }
            out
        };
        let out = rotate(self.data(), cos, sin, E::one());
        let (cos, sin) = (cos.to_vec(), sin.to_vec());
        Tensor::from_op("rotate_pairs", out, self.shape().to_vec(), &[self], move |g, _| {
            vec![Some(rotate(g, &cos, &sin, -E::one()))]
        })
    }

    /// Dot products between each query and the keys of its saturating
    /// `kernel × kernel` neighborhood.
    ///
    /// `self` (queries) and `keys` are `[groups, h, w, d]`; the result is
    /// `[groups, h, w, kh·kw]` with keys enumerated row-major inside the window.
    pub fn neighborhood_logits(&self, keys: &Tensor<E>, kernel: usize) -> Result<Tensor<E>> {
        check_kernel("neighborhood_logits", kernel)?;
        let (g, h, w, d) = rank4("neighborhood_logits", self)?;
        if keys.shape() != self.shape() {
            return Err(TensorError::ShapeMismatch {
                op: "neighborhood_logits",
                lhs: self.shape().to_vec(),
                rhs: keys.shape().to_vec(),
            });
        }
        let (kh, kw) = (window_extent(h, kernel), window_extent(w, kernel));
        let kk = kh * kw;
        let plane = h * w * d;
        let (qd, kd) = (self.data(), keys.data());
        let mut out = vec![E::zero(); g * h * w * kk];
        for_each_chunk(&mut out, h * w * kk, |gi, o| {
            let (q, k) = (&qd[gi * plane..(gi + 1) * plane], &kd[gi * plane..(gi + 1) * plane]);
            for i in 0..h {
                let si = neighborhood_window(i, h, kernel);
                for j in 0..w {
                    let sj = neighborhood_window(j, w, kernel);
                    let qv = &q[(i * w + j) * d..(i * w + j + 1) * d];
                    let orow = &mut o[(i * w + j) * kk..(i * w + j + 1) * kk];
                    for a in 0..kh {
                        for b in 0..kw {
                            let kv = &k[((si + a) * w + sj + b) * d..((si + a) * w + sj + b + 1) * d];
                            orow[a * kw + b] = qv.iter().zip(kv).map(|(&x, &y)| x * y).sum();
                        }
                    }
                }
            }
        });
        let (qc, kc) = (self.clone(), keys.clone());
        Tensor::from_op("neighborhood_logits", out, vec![g, h, w, kk], &[self, keys], move |go, _| {
            let (qd, kd) = (qc.data(), kc.data());
            let gq = qc.requires_grad().then(|| {
                let mut gq = vec![E::zero(); qd.len()];
                for_each_chunk(&mut gq, plane, |gi, dst| {
                    let k = &kd[gi * plane..(gi + 1) * plane];
                    let gg = &go[gi * h * w * kk..(gi + 1) * h * w * kk];
                    for i in 0..h {
                        let si = neighborhood_window(i, h, kernel);
                        for j in 0..w {
                            let sj = neighborhood_window(j, w, kernel);
                            let row = &mut dst[(i * w + j) * d..(i * w + j + 1) * d];
                            for a in 0..kh {
                                for b in 0..kw {
                                    let c = gg[(i * w + j) * kk + a * kw + b];
                                    let kv = &k[((si + a) * w + sj + b) * d..][..d];
                                    row.iter_mut().zip(kv).for_each(|(r, &y)| *r += c * y);
                                }
                            }
                        }
                    }
                });
                gq
            });
            let gk = kc.requires_grad().then(|| {
                let mut gk = vec![E::zero(); kd.len()];
                for_each_chunk(&mut gk, plane, |gi, dst| {
                    let q = &qd[gi * plane..(gi + 1) * plane];
                    let gg = &go[gi * h * w * kk..(gi + 1) * h * w * kk];
                    for i in 0..h {
                        let si = neighborhood_window(i, h, kernel);
                        for j in 0..w {
                            let sj = neighborhood_window(j, w, kernel);
                            let qv = &q[(i * w + j) * d..(i * w + j + 1) * d];
                            for a in 0..kh {
                                for b in 0..kw {
                                    let c = gg[(i * w + j) * kk + a * kw + b];
                                    let row = &mut dst[((si + a) * w + sj + b) * d..][..d];
                                    row.iter_mut().zip(qv).for_each(|(r, &x)| *r += c * x);
                                }
                            }
                        }
                    }
                });
                gk
            });
            vec![gq, gk]
        })
    }

    /// Weighted sum of neighborhood values: `self` holds attention weights
    /// `[groups, h, w, kh·kw]`, `values` is `[groups, h, w, d]`.
    pub fn neighborhood_mix(&self, values: &Tensor<E>, kernel: usize) -> Result<Tensor<E>> {
        check_kernel("neighborhood_mix", kernel)?;
        let (g, h, w, d) = rank4("neighborhood_mix", values)?;
        let (kh, kw) = (window_extent(h, kernel), window_extent(w, kernel));
        let kk = kh * kw;
        if self.shape() != [g, h, w, kk] {
            return Err(TensorError::ShapeMismatch {
                op: "neighborhood_mix",
                lhs: self.shape().to_vec(),
                rhs: values.shape().to_vec(),
            });
        }
        let plane = h * w * d;
        let (ad, vd) = (self.data(), values.data());
        let mut out = vec![E::zero(); g * plane];
        for_each_chunk(&mut out, plane, |gi, o| {
            let v = &vd[gi * plane..(gi + 1) * plane];
            let att = &ad[gi * h * w * kk..(gi + 1) * h * w * kk];
            for i in 0..h {
                let si = neighborhood_window(i, h, kernel);
                for j in 0..w {
                    let sj = neighborhood_window(j, w, kernel);
                    let row = &mut o[(i * w + j) * d..(i * w + j + 1) * d];
                    for a in 0..kh {
                        for b in 0..kw {
                            let c = att[(i * w + j) * kk + a * kw + b];
                            let vv = &v[((si + a) * w + sj + b) * d..][..d];
                            row.iter_mut().zip(vv).for_each(|(r, &y)| *r += c * y);
                        }
                    }
                }
            }
        });
        let (ac, vc) = (self.clone(), values.clone());
        Tensor::from_op("neighborhood_mix", out, vec![g, h, w, d], &[self, values], move |go, _| {
            let (ad, vd) = (ac.data(), vc.data());
            let ga = ac.requires_grad().then(|| {
                let mut ga = vec![E::zero(); ad.len()];
                for_each_chunk(&mut ga, h * w * kk, |gi, dst| {
                    let v = &vd[gi * plane..(gi + 1) * plane];
                    let gg = &go[gi * plane..(gi + 1) * plane];
                    for i in 0..h {
                        let si = neighborhood_window(i, h, kernel);
                        for j in 0..w {
                            let sj = neighborhood_window(j, w, kernel);
                            let grow = &gg[(i * w + j) * d..(i * w + j + 1) * d];
                            for a in 0..kh {
                                for b in 0..kw {
                                    let vv = &v[((si + a) * w + sj + b) * d..][..d];
                                    dst[(i * w + j) * kk + a * kw + b] =
                                        grow.iter().zip(vv).map(|(&x, &y)| x * y).sum();
                                }
                            }
                        }
                    }
                });
                ga
            });
            let gv = vc.requires_grad().then(|| {
                let mut gv = vec![E::zero(); vd.len()];
                for_each_chunk(&mut gv, plane, |gi, dst| {
                    let att = &ad[gi * h * w * kk..(gi + 1) * h * w * kk];
                    let gg = &go[gi * plane..(gi + 1) * plane];
                    for i in 0..h {
                        let si = neighborhood_window(i, h, kernel);
                        for j in 0..w {
                            let sj = neighborhood_window(j, w, kernel);
                            let grow = &gg[(i * w + j) * d..(i * w + j + 1) * d];
                            for a in 0..kh {
                                for b in 0..kw {
                                    let c = att[(i * w + j) * kk + a * kw + b];
                                    let row = &mut dst[((si + a) * w + sj + b) * d..][..d];
                                    row.iter_mut().zip(grow).for_each(|(r, &y)| *r += c * y);
                                }
                            }
                        }
                    }
                });
                gv
            });
            vec![ga, gv]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn windows_saturate_at_borders() {
        // 4-wide axis, kernel 3
        assert_eq!(neighborhood_window(0, 4, 3), 0);
        assert_eq!(neighborhood_window(1, 4, 3), 0);
        assert_eq!(neighborhood_window(2, 4, 3), 1);
        assert_eq!(neighborhood_window(3, 4, 3), 1);
        // kernel larger than the axis covers it entirely
        assert_eq!(window_extent(4, 7), 4);
        assert_eq!(neighborhood_window(3, 4, 7), 0);
    }

    #[test]
    fn even_kernel_rejected() {
        let q = Tensor::<f64>::zeros(&[1, 2, 2, 4]);
        assert!(matches!(q.neighborhood_logits(&q, 2), Err(TensorError::InvalidSpec { .. })));
    }

    #[test]
    fn rotation_by_zero_is_identity() {
        let x = Tensor::<f64>::from_vec((0..8).map(|i| i as f64).collect(), &[2, 4]).unwrap();
        let y = x.rotate_pairs(&[1.0, 1.0], &[0.0, 0.0], 1).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn quarter_turn_rotates_first_pair_only() {
        // pair (0, 1) rotated, channels 2.. untouched
        let x = Tensor::<f64>::from_vec(vec![1.0, 0.0, 5.0, 6.0], &[1, 4]).unwrap();
        let y = x.rotate_pairs(&[0.0], &[1.0], 1).unwrap();
        assert_eq!(y.data(), &[0.0, 1.0, 5.0, 6.0]);
        // with two pairs, channel 0 pairs with channel 2
        let y = x.rotate_pairs(&[0.0, 1.0], &[1.0, 0.0], 2).unwrap();
        assert_eq!(y.data(), &[-5.0, 0.0, 1.0, 6.0]);
    }
}
