use super::{constant_param, join, Linear, Module};
use crate::rng::RngStream;
use crate::tensor::{Element, Result, Tensor, TensorError};

fn check_map<E: Element>(op: &'static str, x: &Tensor<E>, factor: usize) -> Result<[usize; 4]> {
    match *x.shape() {
        [b, h, w, c] if factor > 0 && h % factor == 0 && w % factor == 0 => Ok([b, h, w, c]),
        _ => Err(TensorError::InvalidSpec {
            op,
            reason: format!("expected [b, h, w, c] with h, w divisible by {factor}, got {:?}", x.shape()),
        }),
    }
}

/// `[b, h, w, c]` → `[b, h/r, w/r, r²·c]`; channel index `(di·r + dj)·c + ch`
/// holds source pixel `(r·i + di, r·j + dj)`.
pub fn pixel_unshuffle<E: Element>(x: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    let [b, h, w, c] = check_map("pixel_unshuffle", x, r)?;
    x.reshape(&[b, h / r, r, w / r, r, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h / r, w / r, r * r * c])
}

/// Inverse of [`pixel_unshuffle`]: `[b, h, w, r²·c]` → `[b, r·h, r·w, c]`.
pub fn pixel_shuffle<E: Element>(x: &Tensor<E>, r: usize) -> Result<Tensor<E>> {
    let [b, h, w, rc] = check_map("pixel_shuffle", x, 1)?;
    if r == 0 || rc % (r * r) != 0 {
        return Err(TensorError::InvalidSpec {
            op: "pixel_shuffle",
            reason: format!("{rc} channels not divisible by {r}²"),
        });
    }
    let c = rc / (r * r);
    x.reshape(&[b, h, w, r, r, c])?
        .permute(&[0, 1, 3, 2, 4, 5])?
        .reshape(&[b, h * r, w * r, c])
}

/// Non-overlapping `p × p` patches flattened and projected to the level-0 width.
#[derive(Clone, Debug)]
pub struct PatchEmbed<E: Element> {
    pub patch: usize,
    pub proj: Linear<E>,
}

impl<E: Element> PatchEmbed<E> {
    pub fn new(patch: usize, channels: usize, d: usize, rng: &mut RngStream) -> Self {
        PatchEmbed {
            patch,
            proj: Linear::new(patch * patch * channels, d, rng),
        }
    }

    pub fn forward(&self, img: &Tensor<E>) -> Result<Tensor<E>> {
        self.proj.forward(&pixel_unshuffle(img, self.patch)?)
    }
}

impl<E: Element> Module<E> for PatchEmbed<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// 2×2 pixel-unshuffle followed by a projection `4·d_in → d_out`.
#[derive(Clone, Debug)]
pub struct TokenMerge<E: Element> {
    pub proj: Linear<E>,
}

impl<E: Element> TokenMerge<E> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut RngStream) -> Self {
        TokenMerge {
            proj: Linear::new(4 * d_in, d_out, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.proj.forward(&pixel_unshuffle(x, 2)?)
    }
}

impl<E: Element> Module<E> for TokenMerge<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// Projection `d_in → 4·d_out` followed by a 2×2 pixel shuffle.
#[derive(Clone, Debug)]
pub struct TokenSplit<E: Element> {
    pub proj: Linear<E>,
}

impl<E: Element> TokenSplit<E> {
    pub fn new(d_in: usize, d_out: usize, rng: &mut RngStream) -> Self {
        TokenSplit {
            proj: Linear::new(d_in, 4 * d_out, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        pixel_shuffle(&self.proj.forward(x)?, 2)
    }
}

impl<E: Element> Module<E> for TokenSplit<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.proj.visit(&join(prefix, "proj"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.proj.visit_mut(&join(prefix, "proj"), f);
    }
}

/// `f · skip + (1 − f) · upsampled` with a scalar `f` tensor.
pub fn lerp_merge<E: Element>(skip: &Tensor<E>, upsampled: &Tensor<E>, f: &Tensor<E>) -> Result<Tensor<E>> {
    if skip.shape() != upsampled.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "lerp_merge",
            lhs: skip.shape().to_vec(),
            rhs: upsampled.shape().to_vec(),
        });
    }
    skip.mul(f)?.add(&upsampled.mul(&f.neg()?.add_scalar(1.0)?)?)
}

/// Learned skip interpolation; `f` starts at 0.5.
#[derive(Clone, Debug)]
pub struct LerpSkip<E: Element> {
    pub f: Tensor<E>,
}

impl<E: Element> Default for LerpSkip<E> {
    fn default() -> Self {
        LerpSkip {
            f: constant_param(&[1], 0.5),
        }
    }
}

impl<E: Element> LerpSkip<E> {
    pub fn forward(&self, skip: &Tensor<E>, upsampled: &Tensor<E>) -> Result<Tensor<E>> {
        lerp_merge(skip, upsampled, &self.f)
    }
}

impl<E: Element> Module<E> for LerpSkip<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(join(prefix, "f"), &self.f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(join(prefix, "f"), &mut self.f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{Distribution, Purpose};

    fn t(v: &[f64], shape: &[usize]) -> Tensor<f64> {
        Tensor::from_vec(v.to_vec(), shape).unwrap()
    }

    fn identity(n: usize) -> Tensor<f64> {
        let mut d = vec![0.0; n * n];
        (0..n).for_each(|i| d[i * n + i] = 1.0);
        t(&d, &[n, n])
    }

    #[test]
    fn lerp_endpoints_and_midpoint() {
        let (s, u) = (t(&[2.0], &[1]), t(&[4.0], &[1]));
        assert_eq!(lerp_merge(&s, &u, &t(&[1.0], &[1])).unwrap().data(), &[2.0]);
        assert_eq!(lerp_merge(&s, &u, &t(&[0.0], &[1])).unwrap().data(), &[4.0]);
        assert_eq!(lerp_merge(&s, &u, &t(&[0.5], &[1])).unwrap().data(), &[3.0]);
        assert!(lerp_merge(&s, &t(&[1.0, 2.0], &[2]), &t(&[0.5], &[1])).is_err());
    }

    #[test]
    fn patch_embed_shape_and_identity() {
        let mut rng = RngStream::new(0, Purpose::Init);
        let pe = PatchEmbed::<f64>::new(4, 3, 32, &mut rng);
        let img = rng.fill::<f64>(&[1, 64, 64, 3], Distribution::StandardNormal);
        assert_eq!(pe.forward(&img).unwrap().shape(), &[1, 16, 16, 32]);

        let mut id = PatchEmbed::<f64>::new(2, 1, 4, &mut rng);
        id.proj.weight = identity(4);
        let img = t(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2, 1]);
        assert_eq!(id.forward(&img).unwrap().data(), &[1.0, 2.0, 3.0, 4.0]);
        assert!(id.forward(&t(&[0.0; 3], &[1, 1, 3, 1])).is_err());
    }

    #[test]
    fn merge_channel_order_and_split_inverse() {
        let mut rng = RngStream::new(0, Purpose::Init);
        let x = rng.fill::<f64>(&[2, 8, 8, 4], Distribution::StandardNormal);
        let mut merge = TokenMerge::<f64>::new(4, 16, &mut rng);
        merge.proj.weight = identity(16);
        let m = merge.forward(&x).unwrap();
        assert_eq!(m.shape(), &[2, 4, 4, 16]);
        // token (1, 2) channel block (di=1, dj=0) is source pixel (3, 4)
        let tok = &m.data()[((0 * 4 + 1) * 4 + 2) * 16..][..16];
        let src = &x.data()[((0 * 8 + 3) * 8 + 4) * 4..][..4];
        assert_eq!(&tok[8..12], src);

        let mut split = TokenSplit::<f64>::new(16, 4, &mut rng);
        split.proj.weight = identity(16);
        assert_eq!(split.forward(&m).unwrap().data(), x.data());
        assert!(merge.forward(&t(&[0.0; 12], &[1, 3, 1, 4])).is_err());
    }

    #[test]
    fn shuffle_round_trip() {
        let x = RngStream::new(1, Purpose::Test).fill::<f32>(&[1, 6, 9, 2], Distribution::StandardNormal);
        let y = pixel_shuffle(&pixel_unshuffle(&x, 3).unwrap(), 3).unwrap();
        assert_eq!(y.data(), x.data());
    }
}
