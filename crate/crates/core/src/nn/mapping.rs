use super::feedforward::dropout;
use super::{join, Linear, Module, RmsNorm};
use crate::rng::RngStream;
use crate::tensor::{Element, Result, Tensor, TensorError};

/// Number of Fourier frequencies for the noise-level embedding; the embedding
/// holds a cosine and a sine per frequency.
pub const FOURIER_FREQUENCIES: usize = 64;
const FOURIER_LOW: f64 = 1.0 / 16.0;
const FOURIER_HIGH: f64 = 16.0;

/// Noise-level input `c_noise(σ) = ln(σ)/4`.
pub fn c_noise(sigma: f64) -> f64 {
    sigma.ln() / 4.0
}

/// `[cos(2π f_j t), sin(2π f_j t)]` for log-spaced `f_j`, one row per input.
pub fn fourier_features<E: Element>(t: &[f64]) -> Result<Tensor<E>> {
    let n = FOURIER_FREQUENCIES;
    let ratio = (FOURIER_HIGH / FOURIER_LOW).ln();
    let mut data = Vec::with_capacity(t.len() * 2 * n);
    for &v in t {
        let angles: Vec<f64> = (0..n)
            .map(|j| 2.0 * std::f64::consts::PI * FOURIER_LOW * (ratio * j as f64 / (n - 1) as f64).exp() * v)
            .collect();
        data.extend(angles.iter().map(|a| a.cos()));
        data.extend(angles.iter().map(|a| a.sin()));
    }
    Tensor::from_f64_slice(&data, &[t.len(), 2 * n])
}

#[derive(Clone, Debug)]
struct MappingLayer<E: Element> {
    norm: RmsNorm<E>,
    up_value: Linear<E>,
    up_gate: Linear<E>,
    down: Linear<E>,
}

impl<E: Element> Module<E> for MappingLayer<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.norm.visit(&join(prefix, "norm"), f);
        self.up_value.visit(&join(prefix, "up_value"), f);
        self.up_gate.visit(&join(prefix, "up_gate"), f);
        self.down.visit(&join(prefix, "down"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.norm.visit_mut(&join(prefix, "norm"), f);
        self.up_value.visit_mut(&join(prefix, "up_value"), f);
        self.up_gate.visit_mut(&join(prefix, "up_gate"), f);
        self.down.visit_mut(&join(prefix, "down"), f);
    }
}

/// Embeds (noise level, class) into the conditioning vector shared by every
/// block: Fourier features of `c_noise(σ)` projected to the mapping width,
/// plus a learned class row (the last row means "unconditional"), followed
/// by residual GEGLU layers between RMSNorms.
#[derive(Clone, Debug)]
pub struct MappingNetwork<E: Element> {
    pub fourier_proj: Linear<E>,
    pub class_table: Tensor<E>,
    in_norm: RmsNorm<E>,
    layers: Vec<MappingLayer<E>>,
    out_norm: RmsNorm<E>,
    pub num_classes: usize,
    pub dropout: f64,
}

impl<E: Element> MappingNetwork<E> {
    pub fn new(width: usize, depth: usize, num_classes: usize, dropout: f64, rng: &mut RngStream) -> Self {
        let fourier_proj = Linear::new(2 * FOURIER_FREQUENCIES, width, rng);
        let class_table = super::variance_scaling(rng, &[num_classes + 1, width], 1);
        let layers = (0..depth)
            .map(|_| MappingLayer {
                norm: RmsNorm::new(width),
                up_value: Linear::new(width, 3 * width, rng),
                up_gate: Linear::new(width, 3 * width, rng),
                down: Linear::zeros(3 * width, width),
            })
            .collect();
        MappingNetwork {
            fourier_proj,
            class_table,
            in_norm: RmsNorm::new(width),
            layers,
            out_norm: RmsNorm::new(width),
            num_classes,
            dropout,
        }
    }

    pub fn width(&self) -> usize {
        self.fourier_proj.d_out()
    }

    /// Row index used for unconditional generation and conditioning dropout.
    pub fn unconditional_id(&self) -> usize {
        self.num_classes
    }

    /// `sigma: [b]` noise levels, `class_ids`: one per sample (`None` =
    /// unconditional). Returns `[b, width]`.
    pub fn forward(&self, sigma: &[f64], class_ids: &[Option<usize>], mut rng: Option<&mut RngStream>) -> Result<Tensor<E>> {
        if sigma.len() != class_ids.len() {
            return Err(TensorError::InvalidSpec {
                op: "mapping",
                reason: format!("{} noise levels for {} class ids", sigma.len(), class_ids.len()),
            });
        }
        let mut ids = Vec::with_capacity(class_ids.len());
        for c in class_ids {
            match *c {
                Some(c) if c >= self.num_classes => {
                    return Err(TensorError::InvalidSpec {
                        op: "mapping",
                        reason: format!("class id {c} out of range for {} classes", self.num_classes),
                    })
                }
                Some(c) => ids.push(c),
                None => ids.push(self.unconditional_id()),
            }
        }
        if sigma.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(TensorError::InvalidSpec {
                op: "mapping",
                reason: "noise levels must be positive and finite".into(),
            });
        }
        let t: Vec<f64> = sigma.iter().map(|&s| c_noise(s)).collect();
        let noise = self.fourier_proj.forward(&fourier_features(&t)?)?;
        let mut x = self.in_norm.forward(&noise.add(&self.class_table.index_select(&ids)?)?)?;
        for layer in &self.layers {
            let h = layer.norm.forward(&x)?;
            let hidden = layer.up_gate.forward(&h)?.gelu()?.mul(&layer.up_value.forward(&h)?)?;
            x = x.add(&layer.down.forward(&dropout(&hidden, self.dropout, rng.as_deref_mut())?)?)?;
        }
        self.out_norm.forward(&x)
    }
}

impl<E: Element> Module<E> for MappingNetwork<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.fourier_proj.visit(&join(prefix, "fourier_proj"), f);
        f(join(prefix, "class_table"), &self.class_table);
        self.in_norm.visit(&join(prefix, "in_norm"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        self.out_norm.visit(&join(prefix, "out_norm"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.fourier_proj.visit_mut(&join(prefix, "fourier_proj"), f);
        f(join(prefix, "class_table"), &mut self.class_table);
        self.in_norm.visit_mut(&join(prefix, "in_norm"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        self.out_norm.visit_mut(&join(prefix, "out_norm"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    fn net() -> MappingNetwork<f64> {
        MappingNetwork::new(16, 2, 3, 0.0, &mut RngStream::new(0, Purpose::Init))
    }

    #[test]
    fn unconditional_id_always_valid() {
        let m = net();
        let y = m.forward(&[0.5, 3.0], &[None, Some(2)], None).unwrap();
        assert_eq!(y.shape(), &[2, 16]);
        assert!(m.forward(&[0.5], &[Some(3)], None).is_err());
    }

    #[test]
    fn forward_is_pure() {
        let m = net();
        let a = m.forward(&[0.7], &[Some(1)], None).unwrap();
        let b = m.forward(&[0.7], &[Some(1)], None).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn output_width_is_mapping_width() {
        let m = MappingNetwork::<f32>::new(24, 1, 0, 0.0, &mut RngStream::new(0, Purpose::Init));
        assert_eq!(m.forward(&[1.0], &[None], None).unwrap().shape(), &[1, 24]);
        assert_eq!(m.width(), 24);
    }

    #[test]
    fn fourier_features_at_zero() {
        let f = fourier_features::<f64>(&[0.0]).unwrap();
        assert!(f.data()[..FOURIER_FREQUENCIES].iter().all(|&v| v == 1.0));
        assert!(f.data()[FOURIER_FREQUENCIES..].iter().all(|&v| v == 0.0));
    }
}
