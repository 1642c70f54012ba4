use super::{join, variance_scaling, Module};
use crate::rng::RngStream;
use crate::tensor::{Element, Result, Tensor};

/// Dense layer `y = x·Wᵀ (+ b)` with `W: [out, in]`.
#[derive(Clone, Debug)]
pub struct Linear<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Option<Tensor<E>>,
    pub zero_init: bool,
}

impl<E: Element> Linear<E> {
    /// Bias-free layer with fan-in variance-scaling init.
    pub fn new(d_in: usize, d_out: usize, rng: &mut RngStream) -> Self {
        Linear {
            weight: variance_scaling(rng, &[d_out, d_in], d_in),
            bias: None,
            zero_init: false,
        }
    }

    /// Bias-free layer whose weights start at exactly zero.
    pub fn zeros(d_in: usize, d_out: usize) -> Self {
        Linear {
            weight: Tensor::zeros(&[d_out, d_in]).as_parameter(),
            bias: None,
            zero_init: true,
        }
    }

    pub fn with_bias(mut self) -> Self {
        let d_out = self.weight.shape()[0];
        self.bias = Some(Tensor::zeros(&[d_out]).as_parameter());
        self
    }

    pub fn d_in(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn d_out(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let y = x.linear(&self.weight)?;
        match &self.bias {
            Some(b) => y.add(b),
            None => Ok(y),
        }
    }
}

impl<E: Element> Module<E> for Linear<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        f(join(prefix, "weight"), &self.weight);
        if let Some(b) = &self.bias {
            f(join(prefix, "bias"), b);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        f(join(prefix, "weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(join(prefix, "bias"), b);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    #[test]
    fn zero_init_is_exactly_zero() {
        let l = Linear::<f32>::zeros(4, 3).with_bias();
        assert!(l.zero_init);
        assert!(l.weight.data().iter().all(|&v| v == 0.0));
        assert!(l.bias.as_ref().unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_variance_follows_fan_in() {
        let mut rng = RngStream::new(0, Purpose::Init);
        let l = Linear::<f64>::new(256, 256, &mut rng);
        let var = l.weight.data().iter().map(|v| v * v).sum::<f64>() / l.weight.numel() as f64;
        assert!((var * 256.0 - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn forward_applies_bias() {
        let mut l = Linear::<f64>::zeros(2, 2).with_bias();
        l.bias = Some(Tensor::from_vec(vec![1.0, -1.0], &[2]).unwrap());
        let y = l.forward(&Tensor::from_vec(vec![5.0, 5.0], &[1, 2]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.0, -1.0]);
    }
}
