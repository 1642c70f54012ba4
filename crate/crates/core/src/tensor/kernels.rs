use super::Element;

/// Whether a gemm operand is read transposed.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transpose {
    No,
    Yes,
}

/// `c[m,n] = op(a) · op(b)` (or `+=` when `accumulate`).
///
/// `a` holds `[m,k]` row-major (or `[k,m]` when transposed), `b` holds `[k,n]`
/// (or `[n,k]`). Backed by the `matrixmultiply` microkernels.
#[allow(clippy::too_many_arguments)]
pub fn gemm<E: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[E],
    ta: Transpose,
    b: &[E],
    tb: Transpose,
    c: &mut [E],
    accumulate: bool,
) {
    assert!(a.len() >= m * k, "gemm: lhs buffer too small");
    assert!(b.len() >= k * n, "gemm: rhs buffer too small");
    assert!(c.len() >= m * n, "gemm: output buffer too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = E::zero());
        }
        return;
    }
    let (rsa, csa) = match ta {
        Transpose::No => (k as isize, 1),
        Transpose::Yes => (1, m as isize),
    };
    let (rsb, csb) = match tb {
        Transpose::No => (n as isize, 1),
        Transpose::Yes => (1, k as isize),
    };
    let beta = if accumulate { E::one() } else { E::zero() };
    E::gemm_raw(m, k, n, a, rsa, csa, b, rsb, csb, beta, &mut c[..m * n], n as isize);
}

/// Applies `f(chunk_index, chunk)` to consecutive `chunk`-sized pieces of
/// `out`, in parallel when the `parallel` feature is on. Each chunk is written
/// by exactly one call, so results do not depend on scheduling.
pub(crate) fn for_each_chunk<E, F>(out: &mut [E], chunk: usize, f: F)
where
    E: Element,
    F: Fn(usize, &mut [E]) + Send + Sync,
{
    if chunk == 0 {
        return;
    }
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        if out.len() / chunk > 1 && rayon::current_num_threads() > 1 {
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(i, c)| f(i, c));
            return;
        }
    }
    out.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
        let mut t = vec![0.0; x.len()];
        for i in 0..rows {
            for j in 0..cols {
                t[j * rows + i] = x[i * cols + j];
            }
        }
        t
    }

    #[test]
    fn transposed_operands_match_naive() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<f64> = (0..m * k).map(|i| i as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64).sin()).collect();
        let expected = naive(m, k, n, &a, &b);
        let at = transpose(m, k, &a);
        let bt = transpose(k, n, &b);
        for (ta, tb) in [
            (Transpose::No, Transpose::No),
            (Transpose::Yes, Transpose::No),
            (Transpose::No, Transpose::Yes),
            (Transpose::Yes, Transpose::Yes),
        ] {
            let aa = if ta == Transpose::Yes { &at } else { &a };
            let bb = if tb == Transpose::Yes { &bt } else { &b };
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, aa, ta, bb, tb, &mut c, false);
            for (x, y) in c.iter().zip(&expected) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn accumulate_adds_into_output() {
        let mut c = vec![1.0f32; 4];
        gemm(2, 1, 2, &[1.0, 2.0], Transpose::No, &[3.0, 4.0], Transpose::No, &mut c, true);
        assert_eq!(c, vec![4.0, 5.0, 7.0, 9.0]);
    }
}
