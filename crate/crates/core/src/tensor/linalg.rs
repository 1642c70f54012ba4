use super::kernels::{for_each_chunk, gemm, Transpose};
use super::{numel, Element, Result, Tensor, TensorError};

impl<E: Element> Tensor<E> {
    /// Batched matrix product `[..., m, k] · [..., k, n]`.
    ///
    /// The right operand may also be a plain `[k, n]` matrix shared by every
    /// batch entry.
    pub fn matmul(&self, b: &Tensor<E>) -> Result<Tensor<E>> {
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: self.shape().to_vec(),
            rhs: b.shape().to_vec(),
        };
        let (ra, rb) = (self.rank(), b.rank());
        if ra < 2 || rb < 2 {
            return Err(mismatch());
        }
        let (m, k) = (self.shape()[ra - 2], self.shape()[ra - 1]);
        let (kb, n) = (b.shape()[rb - 2], b.shape()[rb - 1]);
        let batch_shape = &self.shape()[..ra - 2];
        let shared_rhs = rb == 2;
        if kb != k || (!shared_rhs && &b.shape()[..rb - 2] != batch_shape) {
            return Err(mismatch());
        }
        let batch = numel(batch_shape);
        let mut out_shape = batch_shape.to_vec();
        out_shape.extend_from_slice(&[m, n]);

        let (ad, bd) = (self.data(), b.data());
        let b_stride = if shared_rhs { 0 } else { k * n };
        let mut out = vec![E::zero(); batch * m * n];
        if shared_rhs {
            // one large product instead of `batch` small ones
            gemm(batch * m, k, n, ad, Transpose::No, bd, Transpose::No, &mut out, false);
        } else {
            for_each_chunk(&mut out, m * n, |i, c| {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..],
                    Transpose::No,
                    &bd[i * b_stride..],
                    Transpose::No,
                    c,
                    false,
                );
            });
        }

        let (ac, bc) = (self.clone(), b.clone());
        Tensor::from_op("matmul", out, out_shape, &[self, b], move |g, _| {
            let (ad, bd) = (ac.data(), bc.data());
            let ga = ac.requires_grad().then(|| {
                let mut ga = vec![E::zero(); ad.len()];
                if shared_rhs {
                    gemm(batch * m, n, k, g, Transpose::No, bd, Transpose::Yes, &mut ga, false);
                } else {
                    for_each_chunk(&mut ga, m * k, |i, c| {
                        gemm(m, n, k, &g[i * m * n..], Transpose::No, &bd[i * b_stride..], Transpose::Yes, c, false);
                    });
                }
                ga
            });
            let gb = bc.requires_grad().then(|| {
                let mut gb = vec![E::zero(); bd.len()];
                if shared_rhs {
                    gemm(k, batch * m, n, ad, Transpose::Yes, g, Transpose::No, &mut gb, false);
                } else {
                    for_each_chunk(&mut gb, k * n, |i, c| {
                        gemm(k, m, n, &ad[i * m * k..], Transpose::Yes, &g[i * m * n..], Transpose::No, c, false);
                    });
                }
                gb
            });
            vec![ga, gb]
        })
    }

    /// `x · wᵀ` for `x: [..., in]` and `w: [out, in]`.
    pub fn linear(&self, w: &Tensor<E>) -> Result<Tensor<E>> {
        let r = self.rank();
        if r == 0 || w.rank() != 2 || w.shape()[1] != self.shape()[r - 1] {
            return Err(TensorError::ShapeMismatch {
                op: "linear",
                lhs: self.shape().to_vec(),
                rhs: w.shape().to_vec(),
            });
        }
        let (d_in, d_out) = (w.shape()[1], w.shape()[0]);
        let rows = self.numel() / d_in.max(1);
        let mut out_shape = self.shape().to_vec();
        out_shape[r - 1] = d_out;
        let mut out = vec![E::zero(); rows * d_out];
        gemm(rows, d_in, d_out, self.data(), Transpose::No, w.data(), Transpose::Yes, &mut out, false);

        let (xc, wc) = (self.clone(), w.clone());
        Tensor::from_op("linear", out, out_shape, &[self, w], move |g, _| {
            let gx = xc.requires_grad().then(|| {
                let mut gx = vec![E::zero(); rows * d_in];
                gemm(rows, d_out, d_in, g, Transpose::No, wc.data(), Transpose::No, &mut gx, false);
                gx
            });
            let gw = wc.requires_grad().then(|| {
                let mut gw = vec![E::zero(); d_out * d_in];
                gemm(d_out, rows, d_in, g, Transpose::Yes, xc.data(), Transpose::No, &mut gw, false);
                gw
            });
            vec![gx, gw]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn identity_and_dot_product() {
        let i = t(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let b = t(&[3.0, 4.0, 5.0, 6.0], &[2, 2]);
        assert_eq!(i.matmul(&b).unwrap().data(), b.data());
        let r = t(&[1.0, 2.0], &[1, 2]).matmul(&t(&[3.0, 4.0], &[2, 1])).unwrap();
        assert_eq!(r.shape(), &[1, 1]);
        assert_eq!(r.data(), &[11.0]);
    }

    #[test]
    fn inner_extent_mismatch() {
        let a = t(&[1.0; 6], &[2, 3]);
        let b = t(&[1.0; 6], &[2, 3]);
        assert!(matches!(a.matmul(&b), Err(TensorError::ShapeMismatch { .. })));
        let w = t(&[1.0; 4], &[2, 2]);
        assert!(a.linear(&w).is_err());
    }

    #[test]
    fn batched_matches_per_batch() {
        let a: Vec<f64> = (0..2 * 2 * 3).map(|i| i as f64 - 4.0).collect();
        let b: Vec<f64> = (0..2 * 3 * 2).map(|i| (i as f64) * 0.5).collect();
        let c = t(&a, &[2, 2, 3]).matmul(&t(&b, &[2, 3, 2])).unwrap();
        for batch in 0..2 {
            let ab = t(&a[batch * 6..(batch + 1) * 6], &[2, 3]);
            let bb = t(&b[batch * 6..(batch + 1) * 6], &[3, 2]);
            let cb = ab.matmul(&bb).unwrap();
            assert_eq!(&c.data()[batch * 4..(batch + 1) * 4], cb.data());
        }
    }

    #[test]
    fn linear_equals_matmul_with_transpose() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let w = t(&[1.0, 0.0, -1.0, 2.0, 1.0, 0.5], &[2, 3]);
        let y = x.linear(&w).unwrap();
        let y2 = x.matmul(&w.transpose(0, 1).unwrap()).unwrap();
        assert_eq!(y.data(), y2.data());
    }
}
