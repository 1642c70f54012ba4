//! Pure index-remapping ops. All of them materialize their output.

use super::reduce::axis_split;
use super::{numel, Element, Result, Tensor, TensorError};

fn invalid(op: &'static str, reason: impl Into<String>) -> TensorError {
    TensorError::InvalidSpec {
        op,
        reason: reason.into(),
    }
}

fn contiguous_strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` into `dst` where `dst` is laid out row-major over `out_shape`
/// and `src` is read with `src_strides` (one per output axis).
fn strided_copy<E: Element>(src: &[E], out_shape: &[usize], src_strides: &[usize], dst: &mut [E]) {
    let total = numel(out_shape);
    if total == 0 {
        return;
    }
    let rank = out_shape.len();
    if rank == 0 {
        dst[0] = src[0];
        return;
    }
    let last = rank - 1;
    let (inner, inner_stride) = (out_shape[last], src_strides[last]);
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    let mut i = 0;
    while i < total {
        if inner_stride == 1 {
            dst[i..i + inner].copy_from_slice(&src[base..base + inner]);
        } else {
            let mut s = base;
            for d in &mut dst[i..i + inner] {
                *d = src[s];
                s += inner_stride;
            }
        }
        i += inner;
        let mut d = last;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            base += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            base -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
}

fn permute_data<E: Element>(data: &[E], shape: &[usize], perm: &[usize]) -> (Vec<E>, Vec<usize>) {
    let strides = contiguous_strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| strides[p]).collect();
    let mut out = vec![E::zero(); data.len()];
    strided_copy(data, &out_shape, &src_strides, &mut out);
    (out, out_shape)
}

impl<E: Element> Tensor<E> {
    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<E>> {
        if numel(shape) != self.numel() {
            return Err(invalid(
                "reshape",
                format!("{:?} has {} elements, target {:?}", self.shape(), self.numel(), shape),
            ));
        }
        Tensor::from_op("reshape", self.to_vec(), shape.to_vec(), &[self], |g, _| {
            vec![Some(g.to_vec())]
        })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<E>> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(invalid("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let (out, out_shape) = permute_data(self.data(), self.shape(), perm);
        let mut inverse = vec![0; rank];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        let bw_shape = out_shape.clone();
        Tensor::from_op("permute", out, out_shape, &[self], move |g, _| {
            vec![Some(permute_data(g, &bw_shape, &inverse).0)]
        })
    }

    pub fn transpose(&self, a: usize, b: usize) -> Result<Tensor<E>> {
        let mut perm: Vec<usize> = (0..self.rank()).collect();
        if a >= perm.len() || b >= perm.len() {
            return Err(invalid("transpose", format!("axes ({a},{b}) for rank {}", self.rank())));
        }
        perm.swap(a, b);
        self.permute(&perm)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[&Tensor<E>], axis: usize) -> Result<Tensor<E>> {
        let first = parts.first().ok_or_else(|| invalid("concat", "no inputs"))?;
        let (outer, _, inner) = axis_split("concat", first.shape(), axis)?;
        let mut lens = Vec::with_capacity(parts.len());
        for p in parts {
            let same_rank = p.rank() == first.rank();
            let same_rest = same_rank
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !same_rest {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: p.shape().to_vec(),
                });
            }
            lens.push(p.shape()[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (p, &l) in parts.iter().zip(&lens) {
                out.extend_from_slice(&p.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Tensor::from_op("concat", out, shape, parts, move |g, _| {
            let mut grads: Vec<Vec<E>> = lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
            let mut off = 0;
            for _ in 0..outer {
                for (gp, &l) in grads.iter_mut().zip(&lens) {
                    gp.extend_from_slice(&g[off..off + l * inner]);
                    off += l * inner;
                }
            }
            grads.into_iter().map(Some).collect()
        })
    }

    /// Contiguous sub-range `[start, start+len)` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<E>> {
        let (outer, full, inner) = axis_split("slice", self.shape(), axis)?;
        if start + len > full {
            return Err(invalid("slice", format!("[{start}, {}) exceeds extent {full}", start + len)));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Tensor::from_op("slice", out, shape, &[self], move |g, _| {
            let mut gx = vec![E::zero(); outer * full * inner];
            for o in 0..outer {
                gx[(o * full + start) * inner..(o * full + start + len) * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(gx)]
        })
    }

    /// Splits along `axis` into pieces of the given sizes.
    pub fn split(&self, sizes: &[usize], axis: usize) -> Result<Vec<Tensor<E>>> {
        let (_, full, _) = axis_split("split", self.shape(), axis)?;
        if sizes.iter().sum::<usize>() != full {
            return Err(invalid("split", format!("sizes {sizes:?} do not sum to {full}")));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&s| {
                let piece = self.slice(axis, start, s);
                start += s;
                piece
            })
            .collect()
    }

    /// Cyclic shift along `axis`: `out[i] = x[(i - shift) mod n]`.
    pub fn roll(&self, axis: usize, shift: isize) -> Result<Tensor<E>> {
        let (outer, n, inner) = axis_split("roll", self.shape(), axis)?;
        if n == 0 {
            return Ok(self.clone());
        }
        let s = shift.rem_euclid(n as isize) as usize;
        let roll = move |src: &[E]| {
            let mut out = vec![E::zero(); src.len()];
            for o in 0..outer {
                for i in 0..n {
                    let from = (i + n - s) % n;
                    out[(o * n + i) * inner..(o * n + i + 1) * inner]
                        .copy_from_slice(&src[(o * n + from) * inner..(o * n + from + 1) * inner]);
                }
            }
            out
        };
        let unroll = move |src: &[E]| {
            let mut out = vec![E::zero(); src.len()];
            for o in 0..outer {
                for i in 0..n {
                    let to = (i + n - s) % n;
                    out[(o * n + to) * inner..(o * n + to + 1) * inner]
                        .copy_from_slice(&src[(o * n + i) * inner..(o * n + i + 1) * inner]);
                }
            }
            out
        };
        Tensor::from_op("roll", roll(self.data()), self.shape().to_vec(), &[self], move |g, _| {
            vec![Some(unroll(g))]
        })
    }

    /// Selects rows of a `[rows, d]` table.
    pub fn index_select(&self, ids: &[usize]) -> Result<Tensor<E>> {
        if self.rank() != 2 {
            return Err(invalid("index_select", "table must be rank 2"));
        }
        let (rows, d) = (self.shape()[0], self.shape()[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(invalid("index_select", format!("row {bad} out of {rows}")));
        }
        let x = self.data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&x[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        Tensor::from_op("index_select", out, vec![ids.len(), d], &[self], move |g, _| {
            let mut gx = vec![E::zero(); rows * d];
            for (r, &i) in ids.iter().enumerate() {
                gx[i * d..(i + 1) * d]
                    .iter_mut()
                    .zip(&g[r * d..(r + 1) * d])
                    .for_each(|(a, &b)| *a += b);
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
    fn reshape_round_trip() {
        let x = t(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]);
        let y = x.reshape(&[3, 2]).unwrap().reshape(&[2, 3]).unwrap();
        assert_eq!(y.data(), x.data());
        assert_eq!(y.shape(), &[2, 3]);
        assert!(x.reshape(&[4, 2]).is_err());
    }

    #[test]
    fn permute_is_transpose() {
        let x = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        assert_eq!(x.permute(&[1, 0]).unwrap().data(), &[1.0, 3.0, 2.0, 4.0]);
        assert!(x.permute(&[0, 0]).is_err());
    }

    #[test]
    fn permute_rank3() {
        let x = t(&(0..24).map(|i| i as f64).collect::<Vec<_>>(), &[2, 3, 4]);
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), &[4, 2, 3]);
        // y[k, i, j] = x[i, j, k]
        for i in 0..2 {
            for j in 0..3 {
                for k in 0..4 {
                    assert_eq!(y.data()[k * 6 + i * 3 + j], x.data()[i * 12 + j * 4 + k]);
                }
            }
        }
    }

    #[test]
    fn concat_blocks_in_order() {
        let a = t(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t(&[5.0, 6.0, 7.0, 8.0], &[2, 2]);
        let c = Tensor::concat(&[&a, &b], 0).unwrap();
        assert_eq!(c.shape(), &[4, 2]);
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let c1 = Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c1.data(), &[1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
    }

    #[test]
    fn split_inverts_concat() {
        let a = t(&[1.0, 2.0, 3.0], &[3, 1]);
        let b = t(&[4.0, 5.0], &[2, 1]);
        let parts = Tensor::concat(&[&a, &b], 0).unwrap().split(&[3, 2], 0).unwrap();
        assert_eq!(parts[0].data(), a.data());
        assert_eq!(parts[1].data(), b.data());
        assert!(a.split(&[1, 1], 0).is_err());
    }

    #[test]
    fn roll_and_unroll() {
        let x = t(&[0.0, 1.0, 2.0, 3.0], &[4]);
        let r = x.roll(0, 1).unwrap();
        assert_eq!(r.data(), &[3.0, 0.0, 1.0, 2.0]);
        assert_eq!(r.roll(0, -1).unwrap().data(), x.data());
    }

    #[test]
    fn slice_gradient_scatters() {
        let x = Tensor::<f64>::parameter(vec![1.0, 2.0, 3.0, 4.0], &[4]).unwrap();
        x.slice(0, 1, 2).unwrap().sum().unwrap().backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 1.0, 0.0]);
    }

    #[test]
    fn index_select_accumulates_repeats() {
        let table = Tensor::<f64>::parameter(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let rows = table.index_select(&[1, 1, 0]).unwrap();
        assert_eq!(rows.data(), &[3.0, 4.0, 3.0, 4.0, 1.0, 2.0]);
        rows.sum().unwrap().backward().unwrap();
        assert_eq!(table.grad().unwrap(), vec![1.0, 1.0, 2.0, 2.0]);
        assert!(table.index_select(&[2]).is_err());
    }
}
