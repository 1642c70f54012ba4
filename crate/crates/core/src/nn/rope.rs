use crate::tensor::{Element, Result, Tensor, TensorError};

/// Base of the geometric frequency ladder.
pub const ROPE_BASE: f64 = 10_000.0;

/// Axial rotary position encoding for one head size.
///
/// Half of each head's channels are rotated: `head_dim/4` pairs, pair `p`
/// joining channels `p` and `p + head_dim/4`. The first `head_dim/8` pairs turn
/// with the row coordinate, the next `head_dim/8` with the column coordinate;
/// both axes share the ladder `ω_j = base^(-j/(head_dim/8))`. The other half of
/// the channels passes through unchanged. Positions are integer token
/// coordinates at the level where attention runs.
#[derive(Clone, Debug, PartialEq)]
pub struct AxialRope {
    head_dim: usize,
    freqs: Vec<f64>,
}

impl AxialRope {
    pub fn new(head_dim: usize) -> Result<Self> {
        if head_dim == 0 || head_dim % 8 != 0 {
            return Err(TensorError::InvalidSpec {
                op: "axial_rope",
                reason: format!("head dim {head_dim} must be a positive multiple of 8"),
            });
        }
        let per_axis = head_dim / 8;
        let freqs = (0..per_axis)
            .map(|j| ROPE_BASE.powf(-(j as f64) / per_axis as f64))
            .collect();
        Ok(AxialRope { head_dim, freqs })
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn pairs(&self) -> usize {
        self.head_dim / 4
    }

    pub fn frequencies(&self) -> &[f64] {
        &self.freqs
    }

    /// Cosine/sine tables `[positions, pairs]` for arbitrary `(row, col)`.
    pub fn tables_at<E: Element>(&self, positions: &[(f64, f64)]) -> (Vec<E>, Vec<E>) {
        let m = self.freqs.len();
        let mut cos = Vec::with_capacity(positions.len() * 2 * m);
        let mut sin = Vec::with_capacity(positions.len() * 2 * m);
        for &(r, c) in positions {
            for axis_pos in [r, c] {
                for &w in &self.freqs {
                    let a = axis_pos * w;
                    cos.push(E::from_f64(a.cos()));
                    sin.push(E::from_f64(a.sin()));
                }
            }
        }
        (cos, sin)
    }

    /// Tables for a row-major `h × w` grid.
    pub fn tables<E: Element>(&self, h: usize, w: usize) -> (Vec<E>, Vec<E>) {
        let pos: Vec<(f64, f64)> = (0..h)
            .flat_map(|i| (0..w).map(move |j| (i as f64, j as f64)))
            .collect();
        self.tables_at(&pos)
    }

    /// Rotates `x: [..., n, head_dim]` with precomputed tables for its `n` positions.
    pub fn apply<E: Element>(&self, x: &Tensor<E>, cos: &[E], sin: &[E]) -> Result<Tensor<E>> {
        if x.shape().last() != Some(&self.head_dim) {
            return Err(TensorError::ShapeMismatch {
                op: "axial_rope",
                lhs: x.shape().to_vec(),
                rhs: vec![self.head_dim],
            });
        }
        x.rotate_pairs(cos, sin, self.pairs())
    }
}

/// Rotates queries or keys laid out `[heads, h, w, head_dim]`.
pub fn apply_axial_rope<E: Element>(x: &Tensor<E>, rope: &AxialRope) -> Result<Tensor<E>> {
    let &[heads, h, w, d] = x.shape() else {
        return Err(TensorError::InvalidSpec {
            op: "apply_axial_rope",
            reason: format!("expected [heads, h, w, d], got {:?}", x.shape()),
        });
    };
    if d % 8 != 0 || d != rope.head_dim() {
        return Err(TensorError::InvalidSpec {
            op: "apply_axial_rope",
            reason: format!("head dim {d} does not match rope of {}", rope.head_dim()),
        });
    }
    let (cos, sin) = rope.tables::<E>(h, w);
    rope.apply(&x.reshape(&[heads, h * w, d])?, &cos, &sin)?.reshape(&[heads, h, w, d])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Distribution, Purpose, RngStream};

    #[test]
    fn indivisible_head_dim_rejected() {
        assert!(AxialRope::new(12).is_err());
        assert!(AxialRope::new(16).is_ok());
    }

    #[test]
    fn origin_is_identity() {
        let rope = AxialRope::new(16).unwrap();
        let x = RngStream::new(1, Purpose::Test).fill::<f64>(&[2, 1, 1, 16], Distribution::StandardNormal);
        assert_eq!(apply_axial_rope(&x, &rope).unwrap().data(), x.data());
    }

    #[test]
    fn rotated_pair_norms_preserved_and_second_half_untouched() {
        let rope = AxialRope::new(16).unwrap();
        let x = RngStream::new(2, Purpose::Test).fill::<f64>(&[1, 3, 5, 16], Distribution::StandardNormal);
        let y = apply_axial_rope(&x, &rope).unwrap();
        let pairs = rope.pairs();
        for (a, b) in x.data().chunks(16).zip(y.data().chunks(16)) {
            for p in 0..pairs {
                let na = a[p].hypot(a[p + pairs]);
                let nb = b[p].hypot(b[p + pairs]);
                assert!((na - nb).abs() < 1e-6);
            }
            assert_eq!(&a[8..], &b[8..]);
        }
    }
}
