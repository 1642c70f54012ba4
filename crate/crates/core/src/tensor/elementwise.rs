//! Broadcasting binary ops and pointwise unary ops.

use super::{numel, Element, Result, Tensor, TensorError};

/// Numpy-style broadcast of two shapes (trailing dimensions aligned).
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out` (zero on broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let offset = out.len() - shape.len();
    let mut strides = vec![0; out.len()];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Calls `f(out_index, a_index, b_index)` for every output element in order.
fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total = numel(out);
    if total == 0 {
        return;
    }
    let rank = out.len();
    if rank == 0 {
        f(0, 0, 0);
        return;
    }
    let last = rank - 1;
    let inner = out[last];
    let (ia_step, ib_step) = (sa[last], sb[last]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    let mut i = 0;
    while i < total {
        let (mut ia, mut ib) = (oa, ob);
        for _ in 0..inner {
            f(i, ia, ib);
            ia += ia_step;
            ib += ib_step;
            i += 1;
        }
        // advance the outer odometer
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

// Generic (rather than `fn` pointer) element functions so the loops inline.
fn binary<E: Element, F, DA, DB>(
    op: &'static str,
    a: &Tensor<E>,
    b: &Tensor<E>,
    f: F,
    da: DA,
    db: DB,
) -> Result<Tensor<E>>
where
    F: Fn(E, E) -> E,
    DA: Fn(E, E) -> E + 'static,
    DB: Fn(E, E) -> E + 'static,
{
    let out_shape = broadcast_shape(a.shape(), b.shape()).ok_or_else(|| TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })?;
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![E::zero(); numel(&out_shape)];
    let same = a.shape() == b.shape();
    if same {
        for ((o, &x), &y) in out.iter_mut().zip(ad).zip(bd) {
            *o = f(x, y);
        }
    } else if bd.len() == 1 && a.shape() == out_shape.as_slice() {
        let y = bd[0];
        for (o, &x) in out.iter_mut().zip(ad) {
            *o = f(x, y);
        }
    } else {
        let sa = broadcast_strides(a.shape(), &out_shape);
        let sb = broadcast_strides(b.shape(), &out_shape);
        for_each_pair(&out_shape, &sa, &sb, |i, ia, ib| out[i] = f(ad[ia], bd[ib]));
    }
    let (ac, bc) = (a.clone(), b.clone());
    let shape_for_bw = out_shape.clone();
    Tensor::from_op(op, out, out_shape, &[a, b], move |g, _| {
        let (ad, bd) = (ac.data(), bc.data());
        let mut ga = ac.requires_grad().then(|| vec![E::zero(); ad.len()]);
        let mut gb = bc.requires_grad().then(|| vec![E::zero(); bd.len()]);
        if ac.shape() == bc.shape() {
            for i in 0..g.len() {
                if let Some(ga) = ga.as_mut() {
                    ga[i] += g[i] * da(ad[i], bd[i]);
                }
                if let Some(gb) = gb.as_mut() {
                    gb[i] += g[i] * db(ad[i], bd[i]);
                }
            }
        } else {
            let sa = broadcast_strides(ac.shape(), &shape_for_bw);
            let sb = broadcast_strides(bc.shape(), &shape_for_bw);
            for_each_pair(&shape_for_bw, &sa, &sb, |i, ia, ib| {
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += g[i] * da(ad[ia], bd[ib]);
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += g[i] * db(ad[ia], bd[ib]);
                }
            });
        }
        vec![ga, gb]
    })
}

fn unary<E: Element>(
    op: &'static str,
    x: &Tensor<E>,
    f: impl Fn(E) -> E,
    // derivative from (input, output)
    df: impl Fn(E, E) -> E + 'static,
) -> Result<Tensor<E>> {
    let out: Vec<E> = x.data().iter().map(|&v| f(v)).collect();
    let xc = x.clone();
    Tensor::from_op(op, out, x.shape().to_vec(), &[x], move |g, y| {
        let grad = g
            .iter()
            .zip(xc.data())
            .zip(y)
            .map(|((&g, &x), &y)| g * df(x, y))
            .collect();
        vec![Some(grad)]
    })
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
// 1 / sqrt(2*pi)
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

impl<E: Element> Tensor<E> {
    pub fn add(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        binary("add", self, other, |a, b| a + b, |_, _| E::one(), |_, _| E::one())
    }

    pub fn sub(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        binary("sub", self, other, |a, b| a - b, |_, _| E::one(), |_, _| -E::one())
    }

    pub fn mul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        binary("mul", self, other, |a, b| a * b, |_, b| b, |a, _| a)
    }

    pub fn div(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        binary("div", self, other, |a, b| a / b, |_, b| E::one() / b, |a, b| -a / (b * b))
    }

    /// `c * x`.
    pub fn scale(&self, c: f64) -> Result<Tensor<E>> {
        let c = E::from_f64(c);
        let out = self.data().iter().map(|&v| v * c).collect();
        Tensor::from_op("scale", out, self.shape().to_vec(), &[self], move |g, _| {
            vec![Some(g.iter().map(|&g| g * c).collect())]
        })
    }

    /// `x + c`.
    pub fn add_scalar(&self, c: f64) -> Result<Tensor<E>> {
        let c = E::from_f64(c);
        let out = self.data().iter().map(|&v| v + c).collect();
        Tensor::from_op("add_scalar", out, self.shape().to_vec(), &[self], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    pub fn neg(&self) -> Result<Tensor<E>> {
        self.scale(-1.0)
    }

    pub fn square(&self) -> Result<Tensor<E>> {
        unary("square", self, |x| x * x, |x, _| x + x)
    }

    pub fn sqrt(&self) -> Result<Tensor<E>> {
        unary("sqrt", self, |x| x.sqrt(), |_, y| E::from_f64(0.5) / y)
    }

    pub fn rsqrt(&self) -> Result<Tensor<E>> {
        unary("rsqrt", self, |x| E::one() / x.sqrt(), |_, y| E::from_f64(-0.5) * y * y * y)
    }

    pub fn recip(&self) -> Result<Tensor<E>> {
        unary("recip", self, |x| E::one() / x, |_, y| -(y * y))
    }

    pub fn exp(&self) -> Result<Tensor<E>> {
        unary("exp", self, |x| x.exp(), |_, y| y)
    }

    /// GELU with the exact Gaussian CDF: `x·Φ(x)`.
    pub fn gelu(&self) -> Result<Tensor<E>> {
        let half = E::from_f64(0.5);
        let r2 = E::from_f64(FRAC_1_SQRT_2);
        unary(
            "gelu",
            self,
            move |x| half * x * (E::one() + (x * r2).erf()),
            |x, _| {
                let cdf = E::from_f64(0.5) * (E::one() + (x * E::from_f64(FRAC_1_SQRT_2)).erf());
                let pdf = E::from_f64(INV_SQRT_2PI) * (-(x * x) * E::from_f64(0.5)).exp();
                cdf + x * pdf
            },
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(data: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(data.to_vec(), shape).unwrap()
    }

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[4, 1, 3], &[2, 1]), Some(vec![4, 2, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
    }

    #[test]
    fn add_sub_mul_div_same_shape() {
        let a = t(&[1.0, 2.0, 3.0], &[3]);
        let b = t(&[4.0, 5.0, 6.0], &[3]);
        assert_eq!(a.add(&b).unwrap().data(), &[5.0, 7.0, 9.0]);
        assert_eq!(a.sub(&b).unwrap().data(), &[-3.0, -3.0, -3.0]);
        assert_eq!(a.mul(&b).unwrap().data(), &[4.0, 10.0, 18.0]);
        assert_eq!(t(&[8.0, 9.0], &[2]).div(&t(&[2.0, 3.0], &[2])).unwrap().data(), &[4.0, 3.0]);
    }

    #[test]
    fn broadcast_add_row_and_column() {
        let a = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let row = t(&[10.0, 20.0, 30.0], &[3]);
        let col = t(&[100.0, 200.0], &[2, 1]);
        assert_eq!(a.add(&row).unwrap().data(), &[11.0, 22.0, 33.0, 14.0, 25.0, 36.0]);
        assert_eq!(a.add(&col).unwrap().data(), &[101.0, 102.0, 103.0, 204.0, 205.0, 206.0]);
    }

    #[test]
    fn broadcast_gradients_reduce() {
        let a = Tensor::<f64>::parameter(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::<f64>::parameter(vec![10.0, 20.0], &[2]).unwrap();
        a.mul(&b).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![10.0, 20.0, 10.0, 20.0]);
        assert_eq!(b.grad().unwrap(), vec![4.0, 6.0]);
    }

    #[test]
    fn mismatched_shapes_error() {
        let a = t(&[1.0, 2.0], &[2]);
        let b = t(&[1.0, 2.0, 3.0], &[3]);
        assert!(matches!(a.add(&b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn scale_rsqrt_square() {
        let x = t(&[4.0, 0.25], &[2]);
        assert_eq!(x.scale(2.0).unwrap().data(), &[8.0, 0.5]);
        assert_eq!(x.rsqrt().unwrap().data(), &[0.5, 2.0]);
        assert_eq!(x.square().unwrap().data(), &[16.0, 0.0625]);
    }

    #[test]
    fn gelu_reference_points() {
        let x = t(&[0.0, 1.0, -1.0, 3.0], &[4]);
        let y = x.gelu().unwrap();
        // x * Phi(x) with Phi(1) = 0.8413447460685429
        assert_eq!(y.data()[0], 0.0);
        assert!((y.data()[1] - 0.841_344_746_068_542_9).abs() < 1e-14);
        assert!((y.data()[2] + 0.158_655_253_931_457_05).abs() < 1e-14);
        assert!((y.data()[3] - 3.0 * 0.998_650_101_968_369_9).abs() < 1e-13);
    }
}
