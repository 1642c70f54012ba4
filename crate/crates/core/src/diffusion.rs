//! EDM-preconditioned denoising objective: preconditioner, loss weighting,
//! stratified noise-level sampling, AdamW and the weight EMA.

use serde::{Deserialize, Serialize};

use crate::model::HditModel;
use crate::nn::{map_parameters, named_parameters, Module, TAU_FLOOR};
use crate::rng::{Distribution, Purpose, RngStream};
use crate::tensor::{Element, Result, Tensor, TensorError};

/// Loss weighting `w(σ)` applied to the x₀ mean squared error.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    /// `1/σ²`.
    Snr,
    /// `min(1/σ², γ)`.
    MinSnr,
    /// `1/(σ² + 1/γ)`.
    SoftMinSnr,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionConfig {
    pub data_sigma: f64,
    /// `[σ_min, σ_max]` for training noise levels.
    pub sigma_range: [f64; 2],
    pub weighting: Weighting,
    pub gamma: f64,
    pub conditioning_dropout_rate: f64,
    /// Reference resolution of the noise schedule; when set, σ draws are
    /// shifted toward `σ · res / base`.
    #[serde(default)]
    pub resolution_shift_base: Option<usize>,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            data_sigma: 0.5,
            sigma_range: [1e-3, 1e3],
            weighting: Weighting::SoftMinSnr,
            gamma: 4.0,
            conditioning_dropout_rate: 0.1,
            resolution_shift_base: None,
        }
    }
}

impl DiffusionConfig {
    pub fn sigma_min(&self) -> f64 {
        self.sigma_range[0]
    }
    pub fn sigma_max(&self) -> f64 {
        self.sigma_range[1]
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let [lo, hi] = self.sigma_range;
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(format!("sigma range must satisfy 0 < min < max, got [{lo}, {hi}]"));
        }
        if !(self.data_sigma > 0.0) || !(self.gamma > 0.0) {
            return Err("data sigma and gamma must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.conditioning_dropout_rate) {
            return Err("conditioning dropout rate must lie in [0, 1]".into());
        }
        if self.resolution_shift_base == Some(0) {
            return Err("resolution shift base must be positive".into());
        }
        Ok(())
    }
}

/// Preconditioning coefficients at one noise level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub c_noise: f64,
}

pub fn precond(sigma: f64, sigma_data: f64) -> Result<Precond> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(TensorError::InvalidSpec {
            op: "precondition",
            reason: format!("noise level must be positive, got {sigma}"),
        });
    }
    let total = sigma * sigma + sigma_data * sigma_data;
    Ok(Precond {
        c_skip: sigma_data * sigma_data / total,
        c_out: sigma * sigma_data / total.sqrt(),
        c_in: 1.0 / total.sqrt(),
        c_noise: crate::nn::c_noise(sigma),
    })
}

fn per_sample<E: Element>(v: &[f64], rank: usize) -> Result<Tensor<E>> {
    let mut shape = vec![1; rank];
    shape[0] = v.len();
    Tensor::from_f64_slice(v, &shape)
}

/// `D(x_σ, σ) = c_skip·x_σ + c_out·F(c_in·x_σ)` with per-sample `σ`; `raw`
/// receives the scaled input and returns `F`.
pub fn precondition<E: Element>(
    raw: impl FnOnce(&Tensor<E>) -> Result<Tensor<E>>,
    x_sigma: &Tensor<E>,
    sigma: &[f64],
    sigma_data: f64,
) -> Result<Tensor<E>> {
    let coeffs = sigma.iter().map(|&s| precond(s, sigma_data)).collect::<Result<Vec<_>>>()?;
    let r = x_sigma.rank();
    let col = |f: fn(&Precond) -> f64| per_sample::<E>(&coeffs.iter().map(f).collect::<Vec<_>>(), r);
    let f = raw(&x_sigma.mul(&col(|c| c.c_in)?)?)?;
    x_sigma.mul(&col(|c| c.c_skip)?)?.add(&f.mul(&col(|c| c.c_out)?)?)
}

/// Anything that maps a noisy batch to a clean estimate.
pub trait Denoiser<E: Element> {
    fn denoise(&self, x_sigma: &Tensor<E>, sigma: &[f64], class_ids: &[Option<usize>]) -> Result<Tensor<E>>;
}

/// The model wrapped in its preconditioner, in inference mode.
pub struct Preconditioned<'a, E: Element> {
    pub model: &'a HditModel<E>,
    pub sigma_data: f64,
}

impl<E: Element> Denoiser<E> for Preconditioned<'_, E> {
    fn denoise(&self, x_sigma: &Tensor<E>, sigma: &[f64], class_ids: &[Option<usize>]) -> Result<Tensor<E>> {
        precondition(|x| self.model.forward(x, sigma, class_ids, None), x_sigma, sigma, self.sigma_data)
    }
}

pub fn loss_weight(sigma: f64, weighting: Weighting, gamma: f64) -> f64 {
    let snr = 1.0 / (sigma * sigma);
    match weighting {
        Weighting::Snr => snr,
        Weighting::MinSnr => snr.min(gamma),
        Weighting::SoftMinSnr => 1.0 / (sigma * sigma + 1.0 / gamma),
    }
}

/// Base noise-level density: `σ(u) = σ_data · tan(π u / 2)`.
pub fn sigma_from_u(u: f64, sigma_data: f64) -> f64 {
    sigma_data * (std::f64::consts::FRAC_PI_2 * u).tan()
}

/// CDF of the base density (before clamping): `u(σ) = (2/π)·atan(σ/σ_data)`.
pub fn sigma_cdf(sigma: f64, sigma_data: f64) -> f64 {
    std::f64::consts::FRAC_2_PI * (sigma / sigma_data).atan()
}

/// `σ · target/base`: shifts the SNR by the squared resolution ratio.
pub fn shift_sigma(sigma: f64, target_res: usize, base_res: usize) -> f64 {
    sigma * target_res as f64 / base_res as f64
}

/// Maps a uniform draw to a noise level. With a shift base, the log-σ of the
/// base schedule and of the resolution-shifted schedule are interpolated
/// with weight `u`, so low noise levels follow the base schedule and high
/// ones the shifted one. The result is clamped to the configured range.
pub fn sigma_for_u(u: f64, cfg: &DiffusionConfig, res: usize) -> f64 {
    let base = sigma_from_u(u, cfg.data_sigma);
    let sigma = match cfg.resolution_shift_base {
        Some(b) if b != res => base * (u * (res as f64 / b as f64).ln()).exp(),
        _ => base,
    };
    sigma.clamp(cfg.sigma_min(), cfg.sigma_max())
}

/// Stratified uniforms: one draw in each `[i/n, (i+1)/n)`, shuffled.
pub fn stratified_uniforms(n: usize, rng: &mut RngStream) -> Vec<f64> {
    let mut u: Vec<f64> = (0..n).map(|i| (i as f64 + rng.uniform()) / n as f64).collect();
    rng.shuffle(&mut u);
    u
}

pub fn sample_sigma(batch: usize, cfg: &DiffusionConfig, res: usize, rng: &mut RngStream) -> Vec<f64> {
    stratified_uniforms(batch, rng).into_iter().map(|u| sigma_for_u(u, cfg, res)).collect()
}

/// Random draws for one training step, each from its own stream keyed by
/// the global step.
#[derive(Clone, Debug)]
pub struct StepDraws<E: Element> {
    pub sigma: Vec<f64>,
    pub noise: Tensor<E>,
    pub labels: Vec<Option<usize>>,
}

impl<E: Element> StepDraws<E> {
    pub fn new(
        seed: u64,
        step: u64,
        shape: &[usize],
        labels: &[Option<usize>],
        cfg: &DiffusionConfig,
    ) -> Self {
        let b = shape[0];
        let sigma = sample_sigma(b, cfg, shape[1], &mut RngStream::keyed(seed, Purpose::Sigma, step));
        let noise = RngStream::keyed(seed, Purpose::Noise, step).fill(shape, Distribution::StandardNormal);
        let mut drop = RngStream::keyed(seed, Purpose::CondDropout, step);
        let labels = labels
            .iter()
            .map(|&l| if drop.uniform() < cfg.conditioning_dropout_rate { None } else { l })
            .collect();
        StepDraws { sigma, noise, labels }
    }
}

/// `mean_i w(σ_i) · mean((D_i − x_i)²)` for a denoised batch.
pub fn weighted_mse<E: Element>(denoised: &Tensor<E>, clean: &Tensor<E>, sigma: &[f64], cfg: &DiffusionConfig) -> Result<Tensor<E>> {
    let b = clean.shape()[0];
    let per = clean.numel() / b;
    let w: Vec<f64> = sigma.iter().map(|&s| loss_weight(s, cfg.weighting, cfg.gamma)).collect();
    denoised
        .sub(clean)?
        .square()?
        .reshape(&[b, per])?
        .mean_axis(1, false)?
        .mul(&Tensor::from_f64_slice(&w, &[b])?)?
        .mean()
}

/// Loss of one training step on `images: [b, h, w, c]` in `[−1, 1]`.
pub fn training_loss<E: Element>(
    model: &HditModel<E>,
    images: &Tensor<E>,
    draws: &StepDraws<E>,
    cfg: &DiffusionConfig,
    dropout: Option<&mut RngStream>,
) -> Result<Tensor<E>> {
    let x_sigma = images.add(&draws.noise.mul(&per_sample(&draws.sigma, images.rank())?)?)?;
    let denoised = precondition(
        |x| model.forward(x, &draws.sigma, &draws.labels, dropout),
        &x_sigma,
        &draws.sigma,
        cfg.data_sigma,
    )?;
    weighted_mse(&denoised, images, &draws.sigma, cfg)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub betas: [f64; 2],
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        OptimizerConfig {
            learning_rate: 5e-4,
            betas: [0.9, 0.95],
            eps: 1e-8,
            weight_decay: 1e-2,
        }
    }
}

/// AdamW with decoupled weight decay on matrices only; after each update the
/// attention temperatures are clamped to their floor.
#[derive(Clone, Debug)]
pub struct AdamW<E: Element> {
    pub cfg: OptimizerConfig,
    pub step: u64,
    pub m: Vec<Tensor<E>>,
    pub v: Vec<Tensor<E>>,
}

impl<E: Element> AdamW<E> {
    pub fn new<M: Module<E>>(cfg: OptimizerConfig, model: &M) -> Self {
        let params = named_parameters(model);
        AdamW {
            cfg,
            step: 0,
            m: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
            v: params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect(),
        }
    }

    /// Applies one update from the gradients stored on the parameters.
    pub fn update<M: Module<E>>(&mut self, model: &mut M) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let [b1, b2] = self.cfg.betas;
        let (bc1, bc2) = (1.0 - b1.powi(t), 1.0 - b2.powi(t));
        let (lr, eps, wd) = (self.cfg.learning_rate, self.cfg.eps, self.cfg.weight_decay);
        let c = |v: f64| E::from_f64(v);
        let mut k = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        map_parameters(model, |name, p| {
            let g = p.grad().unwrap_or_else(|| vec![E::zero(); p.numel()]);
            let mut m = ms[k].to_vec();
            let mut v = vs[k].to_vec();
            let decay = if p.rank() >= 2 { c(1.0 - lr * wd) } else { E::one() };
            let floor = name.ends_with(".tau").then(|| c(TAU_FLOOR));
            let mut data = p.to_vec();
            for i in 0..data.len() {
                m[i] = c(b1) * m[i] + c(1.0 - b1) * g[i];
                v[i] = c(b2) * v[i] + c(1.0 - b2) * g[i] * g[i];
                let update = (m[i] / c(bc1)) / ((v[i] / c(bc2)).sqrt() + c(eps));
                data[i] = data[i] * decay - c(lr) * update;
                if let Some(f) = floor {
                    data[i] = data[i].max(f);
                }
            }
            ms[k] = Tensor::from_vec(m, p.shape())?;
            vs[k] = Tensor::from_vec(v, p.shape())?;
            k += 1;
            Tensor::parameter(data, p.shape())
        })
    }
}

/// Shadow copy of the parameters, blended after each step.
#[derive(Clone, Debug)]
pub struct Ema<E: Element> {
    pub shadow: Vec<Tensor<E>>,
}

impl<E: Element> Ema<E> {
    pub fn new<M: Module<E>>(model: &M) -> Self {
        Ema {
            shadow: named_parameters(model).into_iter().map(|(_, t)| t.detach()).collect(),
        }
    }

    /// Warmup schedule `min(max_decay, 1 − (1 + step)^(−2/3))`: early steps
    /// average over a short window, later ones approach `max_decay`.
    pub fn warmup_decay(step: u64, max_decay: f64) -> f64 {
        (1.0 - (1.0 + step as f64).powf(-2.0 / 3.0)).clamp(0.0, max_decay)
    }

    /// `shadow ← decay·shadow + (1 − decay)·param`.
    pub fn update<M: Module<E>>(&mut self, model: &M, decay: f64) -> Result<()> {
        let params = named_parameters(model);
        let (d, e) = (E::from_f64(decay), E::from_f64(1.0 - decay));
        for (s, (_, p)) in self.shadow.iter_mut().zip(params) {
            let blended: Vec<E> = s.data().iter().zip(p.data()).map(|(&a, &b)| d * a + e * b).collect();
            *s = Tensor::from_vec(blended, p.shape())?;
        }
        Ok(())
    }

    /// A copy of `model` carrying the averaged weights.
    pub fn apply<M: Module<E> + Clone>(&self, model: &M) -> Result<M> {
        let mut out = model.clone();
        let mut it = self.shadow.iter();
        map_parameters(&mut out, |_, _| Ok(it.next().expect("same parameter order").detach()))?;
        Ok(out)
    }

    /// Root-sum-square distance between the shadow and the live weights.
    pub fn distance<M: Module<E>>(&self, model: &M) -> f64 {
        named_parameters(model)
            .iter()
            .zip(&self.shadow)
            .map(|((_, p), s)| {
                p.data().iter().zip(s.data()).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>()
            })
            .sum::<f64>()
            .sqrt()
    }
}

/// Root-sum-square of all parameters.
pub fn weight_norm<E: Element, M: Module<E>>(model: &M) -> f64 {
    named_parameters(model)
        .iter()
        .map(|(_, t)| t.data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    #[test]
    fn zero_noise_limit_trusts_input() {
        let p = precond(1e-8, 0.5).unwrap();
        assert!((p.c_skip - 1.0).abs() < 1e-12);
        assert!(p.c_out < 1e-7);
        assert!(precond(0.0, 0.5).is_err());
    }

    #[test]
    fn coefficient_identities() {
        for i in 0..100 {
            let s = 10f64.powf(-3.0 + 6.0 * i as f64 / 99.0);
            let p = precond(s, 0.5).unwrap();
            let total = s * s + 0.25;
            assert!((p.c_in * p.c_in * total - 1.0).abs() < 1e-12);
            assert!((p.c_skip * total / 0.25 - 1.0).abs() < 1e-12);
            assert!((p.c_out * p.c_out * total / (s * s * 0.25) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn scaled_input_has_unit_variance() {
        let mut rng = RngStream::new(0, Purpose::Test);
        let sigma = 2.0;
        let p = precond(sigma, 0.5).unwrap();
        let n = 100_000;
        let xs = rng.sample_vec(n, Distribution::StandardNormal);
        let es = rng.sample_vec(n, Distribution::StandardNormal);
        let var = xs.iter().zip(&es).map(|(x, e)| (p.c_in * (0.5 * x + sigma * e)).powi(2)).sum::<f64>() / n as f64;
        assert!((var - 1.0).abs() < 0.02, "{var}");
    }

    #[test]
    fn weighting_values() {
        assert_eq!(loss_weight(0.5, Weighting::SoftMinSnr, 4.0), 2.0);
        assert_eq!(loss_weight(0.1, Weighting::MinSnr, 4.0), 4.0);
        for s in [0.1, 10.0] {
            let (soft, hard) = (loss_weight(s, Weighting::SoftMinSnr, 4.0), loss_weight(s, Weighting::MinSnr, 4.0));
            assert!((soft - hard).abs() / hard < 0.05);
        }
    }

    #[test]
    fn soft_weight_is_bounded_and_decreasing() {
        let mut prev = f64::INFINITY;
        for i in 0..200 {
            let s = 10f64.powf(-3.0 + 6.0 * i as f64 / 199.0);
            let w = loss_weight(s, Weighting::SoftMinSnr, 4.0);
            assert!(w < prev && w <= 1.0 / (s * s) && w <= 4.0);
            prev = w;
        }
    }

    #[test]
    fn sigma_at_median_is_data_sigma() {
        let cfg = DiffusionConfig::default();
        assert!((sigma_for_u(0.5, &cfg, 64) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn one_draw_per_stratum() {
        let u = stratified_uniforms(100, &mut RngStream::new(1, Purpose::Sigma));
        let mut strata: Vec<usize> = u.iter().map(|v| (v * 100.0) as usize).collect();
        strata.sort();
        assert_eq!(strata, (0..100).collect::<Vec<_>>());
    }

    #[test]
    fn shift_scales_linearly() {
        assert_eq!(shift_sigma(1.3, 64, 64), 1.3);
        assert_eq!(shift_sigma(1.0, 256, 64), 4.0);
        for s in [0.01, 1.0, 50.0] {
            assert!((shift_sigma(s, 128, 32) / s - 4.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shifted_schedule_interpolates() {
        let cfg = DiffusionConfig {
            resolution_shift_base: Some(64),
            ..DiffusionConfig::default()
        };
        // low end follows the base schedule, high end the shifted one
        let lo = sigma_for_u(0.01, &cfg, 256);
        assert!((lo / sigma_from_u(0.01, 0.5) - 4f64.powf(0.01)).abs() < 1e-9);
        let hi = sigma_for_u(0.9, &cfg, 256);
        assert!((hi / sigma_from_u(0.9, 0.5) - 4f64.powf(0.9)).abs() < 1e-9);
    }

    #[test]
    fn perfect_denoiser_has_zero_loss() {
        let x = RngStream::new(3, Purpose::Test).fill::<f64>(&[2, 4, 4, 3], Distribution::Uniform01);
        let loss = weighted_mse(&x, &x, &[0.2, 3.0], &DiffusionConfig::default()).unwrap();
        assert_eq!(loss.item(), 0.0);
    }

    #[test]
    fn zero_network_loss_matches_closed_form() {
        let cfg = DiffusionConfig::default();
        let x = Tensor::<f64>::full(&[1, 4, 4, 3], 0.3);
        let eps = RngStream::new(4, Purpose::Noise).fill::<f64>(&[1, 4, 4, 3], Distribution::StandardNormal);
        let sigma = 20.0;
        let xs = x.add(&eps.scale(sigma).unwrap()).unwrap();
        let d = precondition(|z| Ok(z.scale(0.0)?), &xs, &[sigma], 0.5).unwrap();
        let loss = weighted_mse(&d, &x, &[sigma], &cfg).unwrap().item();
        let p = precond(sigma, 0.5).unwrap();
        let expected = loss_weight(sigma, cfg.weighting, cfg.gamma)
            * eps.data().iter().map(|e| (p.c_skip * (0.3 + sigma * e) - 0.3).powi(2)).sum::<f64>()
            / 48.0;
        assert!((loss - expected).abs() < 1e-12 * expected.max(1.0));
    }

    #[test]
    fn ema_endpoints_and_geometric_convergence() {
        let mut rng = RngStream::new(0, Purpose::Init);
        let target = Linear::<f64>::new(3, 2, &mut rng);
        let start = Linear::<f64>::zeros(3, 2);
        let mut ema = Ema::new(&start);
        ema.update(&target, 1.0).unwrap();
        assert!(ema.shadow[0].data().iter().all(|&v| v == 0.0));
        ema.update(&target, 0.0).unwrap();
        assert_eq!(ema.shadow[0].data(), target.weight.data());

        let mut ema = Ema::new(&start);
        let decay = 0.9;
        let mut prev = ema.distance(&target);
        for _ in 0..100 {
            ema.update(&target, decay).unwrap();
            let d = ema.distance(&target);
            assert!((d / prev - decay).abs() < 1e-9);
            prev = d;
        }
    }

    #[test]
    fn adamw_first_step_moves_by_learning_rate() {
        let mut lin = Linear::<f64>::zeros(2, 1);
        lin.forward(&Tensor::full(&[1, 2], 1.0)).unwrap().sum().unwrap().backward().unwrap();
        let cfg = OptimizerConfig::default();
        let mut opt = AdamW::new(cfg.clone(), &lin);
        opt.update(&mut lin).unwrap();
        for &w in lin.weight.data() {
            assert!((w + cfg.learning_rate).abs() < 1e-9, "{w}");
        }
    }
}
