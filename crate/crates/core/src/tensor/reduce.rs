//! Reductions and softmax.

use super::{Element, Result, Tensor, TensorError};

/// Splits `shape` around `axis` into `(outer, len, inner)`.
pub(crate) fn axis_split(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::AxisOutOfRange {
            op,
            axis,
            rank: shape.len(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize, keepdim: bool) -> Vec<usize> {
    let mut s = shape.to_vec();
    if keepdim {
        s[axis] = 1;
    } else {
        s.remove(axis);
    }
    s
}

impl<E: Element> Tensor<E> {
    /// Sum of all elements (shape `[]`).
    pub fn sum(&self) -> Result<Tensor<E>> {
        let total = self.data().iter().copied().sum();
        let n = self.numel();
        Tensor::from_op("sum", vec![total], vec![], &[self], move |g, _| {
            vec![Some(vec![g[0]; n])]
        })
    }

    pub fn mean(&self) -> Result<Tensor<E>> {
        if self.numel() == 0 {
            return Err(TensorError::EmptyAxis { op: "mean" });
        }
        self.sum()?.scale(1.0 / self.numel() as f64)
    }

    pub fn sum_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<E>> {
        let (outer, len, inner) = axis_split("sum_axis", self.shape(), axis)?;
        let x = self.data();
        let mut out = vec![E::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for l in 0..len {
                let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
            }
        }
        let shape = reduced_shape(self.shape(), axis, keepdim);
        Tensor::from_op("sum_axis", out, shape, &[self], move |g, _| {
            let mut gx = vec![E::zero(); outer * len * inner];
            for o in 0..outer {
                let src = &g[o * inner..(o + 1) * inner];
                for l in 0..len {
                    gx[(o * len + l) * inner..(o * len + l + 1) * inner].copy_from_slice(src);
                }
            }
            vec![Some(gx)]
        })
    }

    pub fn mean_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<E>> {
        let (_, len, _) = axis_split("mean_axis", self.shape(), axis)?;
        if len == 0 {
            return Err(TensorError::EmptyAxis { op: "mean_axis" });
        }
        self.sum_axis(axis, keepdim)?.scale(1.0 / len as f64)
    }

    /// Population variance along `axis`.
    pub fn variance_axis(&self, axis: usize, keepdim: bool) -> Result<Tensor<E>> {
        let mu = self.mean_axis(axis, true)?;
        self.sub(&mu)?.square()?.mean_axis(axis, keepdim)
    }

    /// Softmax along `axis` with max subtraction.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<E>> {
        let (outer, len, inner) = axis_split("softmax", self.shape(), axis)?;
        if len == 0 {
            return Err(TensorError::EmptyAxis { op: "softmax" });
        }
        let x = self.data();
        let mut out = vec![E::zero(); x.len()];
        if inner == 1 {
            for (row, dst) in x.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
                let m = row.iter().copied().fold(row[0], E::max);
                let mut s = E::zero();
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = (v - m).exp();
                    s += *d;
                }
                let inv = E::one() / s;
                dst.iter_mut().for_each(|d| *d *= inv);
            }
        }
        for o in 0..outer {
            for i in 0..inner {
                if inner == 1 {
                    break;
                }
                let at = |l: usize| (o * len + l) * inner + i;
                let mut m = x[at(0)];
                for l in 1..len {
                    m = m.max(x[at(l)]);
                }
                let mut s = E::zero();
                for l in 0..len {
                    let e = (x[at(l)] - m).exp();
                    out[at(l)] = e;
                    s += e;
                }
                let inv = E::one() / s;
                for l in 0..len {
                    out[at(l)] *= inv;
                }
            }
        }
        Tensor::from_op("softmax", out, self.shape().to_vec(), &[self], move |g, y| {
            let mut gx = vec![E::zero(); y.len()];
            if inner == 1 {
                for ((gr, yr), dst) in g.chunks_exact(len).zip(y.chunks_exact(len)).zip(gx.chunks_exact_mut(len)) {
                    let dot = gr.iter().zip(yr).fold(E::zero(), |acc, (&a, &b)| acc + a * b);
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                return vec![Some(gx)];
            }
            for o in 0..outer {
                for i in 0..inner {
                    let at = |l: usize| (o * len + l) * inner + i;
                    let mut dot = E::zero();
                    for l in 0..len {
                        dot += g[at(l)] * y[at(l)];
                    }
                    for l in 0..len {
                        gx[at(l)] = y[at(l)] * (g[at(l)] - dot);
                    }
                }
            }
            vec![Some(gx)]
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
    fn softmax_uniform_and_stable() {
        let y = t(&[0.0, 0.0, 0.0], &[3]).softmax(0).unwrap();
        for v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let y = t(&[1000.0, 0.0], &[2]).softmax(0).unwrap();
        assert_eq!(y.data()[0], 1.0);
        assert!(y.data()[1] < 1e-30);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let xs: Vec<f64> = (0..9).map(|i| ((i * 37 % 11) as f64) * 0.37 - 1.5).collect();
        let y = t(&xs, &[9]).softmax(0).unwrap();
        let z: f64 = xs.iter().map(|v| v.exp()).sum();
        for (yi, xi) in y.data().iter().zip(&xs) {
            let expect = xi.exp() / z;
            assert!(((yi - expect) / expect).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_along_leading_axis() {
        let y = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]).softmax(0).unwrap();
        assert!((y.data()[0] + y.data()[2] - 1.0).abs() < 1e-15);
        assert!((y.data()[1] + y.data()[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_empty_axis_errors() {
        let x = Tensor::<f64>::from_vec(vec![], &[2, 0]).unwrap();
        assert!(matches!(x.softmax(1), Err(TensorError::EmptyAxis { .. })));
    }

    #[test]
    fn axis_sums_and_means() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        assert_eq!(x.sum_axis(0, false).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(x.sum_axis(1, true).unwrap().shape(), &[2, 1]);
        assert_eq!(x.mean_axis(1, false).unwrap().data(), &[2.0, 5.0]);
        assert_eq!(x.sum().unwrap().item(), 21.0);
        assert_eq!(x.mean().unwrap().item(), 3.5);
    }

    #[test]
    fn variance_of_known_rows() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 4.0, 4.0], &[2, 3]);
        let v = x.variance_axis(1, false).unwrap();
        assert!((v.data()[0] - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(v.data()[1], 0.0);
    }
}
