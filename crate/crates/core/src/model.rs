//! The hourglass network: patch embedding, encoder levels with token merges,
//! a core stack, decoder levels with token splits and lerp skips, and the
//! output head.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nn::{
    join, pixel_shuffle, AttentionKind, FeedForwardKind, HditBlock, LerpSkip, Linear, MappingNetwork, Module,
    PatchEmbed, RmsNorm, TokenMerge, TokenSplit,
};
use crate::rng::RngStream;
use crate::tensor::{Element, Tensor, TensorError};

/// Token grid side of the innermost level at the primary resolution.
pub const CORE_TOKENS: usize = 16;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("invalid model config: {0}")]
    Invalid(String),
    #[error("resolution {target} is not a power-of-two multiple of {base}")]
    NotPowerOfTwo { base: usize, target: usize },
}

/// Full architectural description. Level lists run from the outermost level
/// (full token resolution) to the innermost core.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Image side length the model is built for.
    pub input_resolution: usize,
    #[serde(default = "default_channels")]
    pub channels: usize,
    pub patch_size: usize,
    /// Blocks per side for outer levels; total blocks for the core.
    pub depths: Vec<usize>,
    pub widths: Vec<usize>,
    pub attention_heads: Vec<usize>,
    /// `"neighborhood(k)"`, `"swin(w)"` or `"global"` per level.
    pub attention: Vec<AttentionKind>,
    pub mapping_depth: usize,
    pub mapping_width: usize,
    /// Zero for an unconditional model.
    #[serde(default)]
    pub num_classes: usize,
    /// Dropout rate per level (empty = no dropout).
    #[serde(default)]
    pub dropout_rate: Vec<f64>,
    #[serde(default)]
    pub feedforward: FeedForwardKind,
    /// Accept an innermost grid other than 16×16 tokens.
    #[serde(default)]
    pub allow_any_core_resolution: bool,
}

fn default_channels() -> usize {
    3
}

impl ModelConfig {
    pub fn levels(&self) -> usize {
        self.widths.len()
    }

    /// Token grid side at `level` for a given image side.
    pub fn tokens_at(&self, level: usize, res: usize) -> usize {
        res / (self.patch_size << level)
    }

    pub fn dropout_at(&self, level: usize) -> f64 {
        self.dropout_rate.get(level).copied().unwrap_or(0.0)
    }

    /// Divisor every image side must respect.
    pub fn resolution_multiple(&self) -> usize {
        self.patch_size << (self.levels().max(1) - 1)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        let l = self.levels();
        if l == 0 {
            return bad("at least one level is required".into());
        }
        if self.depths.len() != l || self.attention_heads.len() != l || self.attention.len() != l {
            return bad(format!(
                "per-level lists disagree: {} widths, {} depths, {} head counts, {} attention kinds",
                l,
                self.depths.len(),
                self.attention_heads.len(),
                self.attention.len()
            ));
        }
        if !self.dropout_rate.is_empty() && self.dropout_rate.len() != l {
            return bad(format!("{} dropout rates for {l} levels", self.dropout_rate.len()));
        }
        if self.dropout_rate.iter().any(|p| !(0.0..1.0).contains(p)) {
            return bad("dropout rates must lie in [0, 1)".into());
        }
        if self.patch_size == 0 || self.channels == 0 || self.mapping_width == 0 {
            return bad("patch size, channels and mapping width must be positive".into());
        }
        if self.widths.windows(2).any(|w| w[1] < w[0]) {
            return bad(format!("widths must not shrink toward the core: {:?}", self.widths));
        }
        for (i, (&d, &h)) in self.widths.iter().zip(&self.attention_heads).enumerate() {
            if h == 0 || d % h != 0 || (d / h) % 8 != 0 {
                return bad(format!("level {i}: width {d} with {h} heads needs a head dim divisible by 8"));
            }
        }
        let m = self.resolution_multiple();
        if self.input_resolution == 0 || self.input_resolution % m != 0 {
            return bad(format!("resolution {} is not divisible by {m}", self.input_resolution));
        }
        for (i, kind) in self.attention.iter().enumerate() {
            let side = self.tokens_at(i, self.input_resolution);
            match *kind {
                AttentionKind::Neighborhood { kernel } if kernel % 2 == 0 || kernel == 0 => {
                    return bad(format!("level {i}: neighborhood kernel {kernel} must be odd"))
                }
                AttentionKind::Swin { window } if window == 0 || side % window != 0 => {
                    return bad(format!("level {i}: {side}×{side} tokens not divisible by window {window}"))
                }
                _ => {}
            }
        }
        let core = self.tokens_at(l - 1, self.input_resolution);
        if core != CORE_TOKENS && !self.allow_any_core_resolution {
            return bad(format!(
                "innermost level has {core}×{core} tokens; expected {CORE_TOKENS}×{CORE_TOKENS} \
                 (set allow_any_core_resolution to override)"
            ));
        }
        Ok(())
    }

    /// Config for `target_res`: one extra neighborhood level per doubling,
    /// prepended with the current outermost width and two blocks per side.
    pub fn adapt_resolution(&self, target_res: usize) -> Result<ModelConfig, ConfigError> {
        let base = self.input_resolution;
        if target_res < base || target_res % base != 0 || !(target_res / base).is_power_of_two() {
            return Err(ConfigError::NotPowerOfTwo { base, target: target_res });
        }
        let k = (target_res / base).trailing_zeros() as usize;
        let kernel = self
            .attention
            .iter()
            .find_map(|a| match a {
                AttentionKind::Neighborhood { kernel } => Some(*kernel),
                _ => None,
            })
            .unwrap_or(7);
        let mut cfg = self.clone();
        cfg.input_resolution = target_res;
        for _ in 0..k {
            cfg.widths.insert(0, self.widths[0]);
            cfg.depths.insert(0, 2);
            cfg.attention_heads.insert(0, self.attention_heads[0]);
            cfg.attention.insert(0, AttentionKind::Neighborhood { kernel });
            if !cfg.dropout_rate.is_empty() {
                cfg.dropout_rate.insert(0, 0.0);
            }
        }
        Ok(cfg)
    }
}

/// Named reference configurations.
pub mod presets {
    use super::*;

    /// ImageNet-128² ablation step E: one neighborhood level around a global core.
    pub fn ablation_e() -> ModelConfig {
        ModelConfig {
            input_resolution: 128,
            channels: 3,
            patch_size: 4,
            depths: vec![2, 11],
            widths: vec![384, 768],
            attention_heads: vec![6, 12],
            attention: vec![AttentionKind::Neighborhood { kernel: 7 }, AttentionKind::Global],
            mapping_depth: 1,
            mapping_width: 768,
            num_classes: 1000,
            dropout_rate: vec![],
            feedforward: FeedForwardKind::Geglu,
            allow_any_core_resolution: false,
        }
    }

    /// Ablation step A: global attention on every level and a GELU
    /// feedforward of width 4·d.
    pub fn ablation_a() -> ModelConfig {
        ModelConfig {
            attention: vec![AttentionKind::Global, AttentionKind::Global],
            feedforward: FeedForwardKind::Gelu,
            ..ablation_e()
        }
    }

    /// FFHQ-1024²: three neighborhood levels and two global levels.
    pub fn ffhq_1024() -> ModelConfig {
        ModelConfig {
            input_resolution: 1024,
            channels: 3,
            patch_size: 4,
            depths: vec![2, 2, 2, 2, 2],
            widths: vec![128, 256, 384, 768, 1024],
            attention_heads: vec![2, 4, 6, 12, 16],
            attention: vec![
                AttentionKind::Neighborhood { kernel: 7 },
                AttentionKind::Neighborhood { kernel: 7 },
                AttentionKind::Neighborhood { kernel: 7 },
                AttentionKind::Global,
                AttentionKind::Global,
            ],
            mapping_depth: 2,
            mapping_width: 768,
            num_classes: 0,
            dropout_rate: vec![0.0, 0.0, 0.0, 0.0, 0.1],
            feedforward: FeedForwardKind::Geglu,
            // the two global levels sit at 32² and 16² tokens
            allow_any_core_resolution: true,
        }
    }

    /// ImageNet-256²: two neighborhood levels around a deep global core.
    pub fn imagenet_256() -> ModelConfig {
        ModelConfig {
            input_resolution: 256,
            channels: 3,
            patch_size: 4,
            depths: vec![2, 2, 16],
            widths: vec![384, 768, 1536],
            attention_heads: vec![6, 12, 24],
            attention: vec![
                AttentionKind::Neighborhood { kernel: 7 },
                AttentionKind::Neighborhood { kernel: 7 },
                AttentionKind::Global,
            ],
            mapping_depth: 2,
            mapping_width: 768,
            num_classes: 1000,
            dropout_rate: vec![],
            feedforward: FeedForwardKind::Geglu,
            allow_any_core_resolution: false,
        }
    }

    /// Two-level toy model for 32² images (4×4 core tokens).
    pub fn toy_32() -> ModelConfig {
        ModelConfig {
            input_resolution: 32,
            channels: 3,
            patch_size: 4,
            depths: vec![1, 2],
            widths: vec![64, 128],
            attention_heads: vec![1, 2],
            attention: vec![AttentionKind::Neighborhood { kernel: 7 }, AttentionKind::Global],
            mapping_depth: 1,
            mapping_width: 128,
            num_classes: 2,
            dropout_rate: vec![],
            feedforward: FeedForwardKind::Geglu,
            allow_any_core_resolution: true,
        }
    }

    /// Tiny two-level model for 16² images, small enough for binary64
    /// finite-difference checks.
    pub fn grad_check_16() -> ModelConfig {
        ModelConfig {
            input_resolution: 16,
            channels: 3,
            patch_size: 2,
            depths: vec![1, 1],
            widths: vec![8, 16],
            attention_heads: vec![1, 2],
            attention: vec![AttentionKind::Neighborhood { kernel: 3 }, AttentionKind::Global],
            mapping_depth: 1,
            mapping_width: 8,
            num_classes: 2,
            dropout_rate: vec![],
            feedforward: FeedForwardKind::Geglu,
            allow_any_core_resolution: true,
        }
    }
}

/// Parameters and wiring of the hourglass network.
#[derive(Clone, Debug)]
pub struct HditModel<E: Element> {
    pub config: ModelConfig,
    pub mapping: MappingNetwork<E>,
    pub patch_embed: PatchEmbed<E>,
    /// Encoder stacks for every level except the core.
    pub encoder: Vec<Vec<HditBlock<E>>>,
    pub merges: Vec<TokenMerge<E>>,
    pub core: Vec<HditBlock<E>>,
    pub splits: Vec<TokenSplit<E>>,
    pub skips: Vec<LerpSkip<E>>,
    pub decoder: Vec<Vec<HditBlock<E>>>,
    pub out_norm: RmsNorm<E>,
    pub out_proj: Linear<E>,
}

fn stack<E: Element>(
    cfg: &ModelConfig,
    level: usize,
    depth: usize,
    rng: &mut RngStream,
) -> Result<Vec<HditBlock<E>>, TensorError> {
    (0..depth)
        .map(|i| {
            HditBlock::new(
                cfg.widths[level],
                cfg.attention_heads[level],
                cfg.mapping_width,
                cfg.attention[level],
                i % 2 == 1,
                cfg.feedforward,
                cfg.dropout_at(level),
                rng,
            )
        })
        .collect()
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl<E: Element> HditModel<E> {
    /// Builds a model with residual output projections at zero and every
    /// other linear drawn from `N(0, 1/fan_in)`.
    pub fn new(cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self, ModelError> {
        cfg.validate()?;
        let l = cfg.levels();
        let p2c = cfg.patch_size * cfg.patch_size * cfg.channels;
        let mapping = MappingNetwork::new(cfg.mapping_width, cfg.mapping_depth, cfg.num_classes, 0.0, rng);
        let patch_embed = PatchEmbed::new(cfg.patch_size, cfg.channels, cfg.widths[0], rng);
        let mut encoder = Vec::new();
        let mut merges = Vec::new();
        for i in 0..l - 1 {
            encoder.push(stack(cfg, i, cfg.depths[i], rng)?);
            merges.push(TokenMerge::new(cfg.widths[i], cfg.widths[i + 1], rng));
        }
        let core = stack(cfg, l - 1, cfg.depths[l - 1], rng)?;
        let mut splits = Vec::new();
        let mut decoder = Vec::new();
        for i in 0..l - 1 {
            splits.push(TokenSplit::new(cfg.widths[i + 1], cfg.widths[i], rng));
            decoder.push(stack(cfg, i, cfg.depths[i], rng)?);
        }
        Ok(HditModel {
            config: cfg.clone(),
            mapping,
            patch_embed,
            encoder,
            merges,
            core,
            splits,
            skips: (0..l - 1).map(|_| LerpSkip::default()).collect(),
            decoder,
            out_norm: RmsNorm::new(cfg.widths[0]),
            out_proj: Linear::zeros(cfg.widths[0], p2c),
        })
    }

    /// Raw network output `F(x, σ, class)` for `x: [b, h, w, c]`; inputs are
    /// expected to be already scaled by `c_in`. Dropout is active only when
    /// `rng` is given.
    pub fn forward(
        &self,
        x: &Tensor<E>,
        sigma: &[f64],
        class_ids: &[Option<usize>],
        rng: Option<&mut RngStream>,
    ) -> Result<Tensor<E>, TensorError> {
        let cond = self.mapping.forward(sigma, class_ids, None)?;
        self.forward_with_cond(x, &cond, rng)
    }

    /// Forward pass with a precomputed conditioning vector `[b, mapping_width]`.
    pub fn forward_with_cond(
        &self,
        x: &Tensor<E>,
        cond: &Tensor<E>,
        mut rng: Option<&mut RngStream>,
    ) -> Result<Tensor<E>, TensorError> {
        let m = self.config.resolution_multiple();
        match *x.shape() {
            [b, h, w, c] if h % m == 0 && w % m == 0 && c == self.config.channels && cond.shape()[0] == b => {}
            _ => {
                return Err(TensorError::InvalidSpec {
                    op: "hdit_forward",
                    reason: format!(
                        "input {:?} must be [b, h, w, {}] with h, w divisible by {m}",
                        x.shape(),
                        self.config.channels
                    ),
                })
            }
        }
        let mut h = self.patch_embed.forward(x)?;
        let mut taps = Vec::with_capacity(self.merges.len());
        for (blocks, merge) in self.encoder.iter().zip(&self.merges) {
            for blk in blocks {
                h = blk.forward(&h, cond, rng.as_deref_mut())?;
            }
            taps.push(h.clone());
            h = merge.forward(&h)?;
        }
        for blk in &self.core {
            h = blk.forward(&h, cond, rng.as_deref_mut())?;
        }
        for i in (0..self.splits.len()).rev() {
            h = self.skips[i].forward(&taps[i], &self.splits[i].forward(&h)?)?;
            for blk in &self.decoder[i] {
                h = blk.forward(&h, cond, rng.as_deref_mut())?;
            }
        }
        let out = self.out_proj.forward(&self.out_norm.forward(&h)?)?;
        pixel_shuffle(&out, self.config.patch_size)
    }
}

impl<E: Element> Module<E> for HditModel<E> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Tensor<E>)) {
        self.mapping.visit(&join(prefix, "mapping"), f);
        self.patch_embed.visit(&join(prefix, "patch_embed"), f);
        for (l, blocks) in self.encoder.iter().enumerate() {
            for (i, b) in blocks.iter().enumerate() {
                b.visit(&join(prefix, &format!("encoder.{l}.{i}")), f);
            }
            self.merges[l].visit(&join(prefix, &format!("merge.{l}")), f);
        }
        for (i, b) in self.core.iter().enumerate() {
            b.visit(&join(prefix, &format!("core.{i}")), f);
        }
        for l in (0..self.splits.len()).rev() {
            self.splits[l].visit(&join(prefix, &format!("split.{l}")), f);
            self.skips[l].visit(&join(prefix, &format!("skip.{l}")), f);
            for (i, b) in self.decoder[l].iter().enumerate() {
                b.visit(&join(prefix, &format!("decoder.{l}.{i}")), f);
            }
        }
        self.out_norm.visit(&join(prefix, "out_norm"), f);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<E>)) {
        self.mapping.visit_mut(&join(prefix, "mapping"), f);
        self.patch_embed.visit_mut(&join(prefix, "patch_embed"), f);
        for (l, blocks) in self.encoder.iter_mut().enumerate() {
            for (i, b) in blocks.iter_mut().enumerate() {
                b.visit_mut(&join(prefix, &format!("encoder.{l}.{i}")), f);
            }
            self.merges[l].visit_mut(&join(prefix, &format!("merge.{l}")), f);
        }
        for (i, b) in self.core.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("core.{i}")), f);
        }
        for l in (0..self.splits.len()).rev() {
            self.splits[l].visit_mut(&join(prefix, &format!("split.{l}")), f);
            self.skips[l].visit_mut(&join(prefix, &format!("skip.{l}")), f);
            for (i, b) in self.decoder[l].iter_mut().enumerate() {
                b.visit_mut(&join(prefix, &format!("decoder.{l}.{i}")), f);
            }
        }
        self.out_norm.visit_mut(&join(prefix, "out_norm"), f);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::presets::*;
    use super::*;
    use crate::nn::{parameter_count, Linear};
    use crate::rng::{Distribution, Purpose};

    #[test]
    fn preset_configs_validate() {
        for cfg in [ablation_e(), ablation_a(), ffhq_1024(), imagenet_256(), toy_32(), grad_check_16()] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn core_resolution_rule_needs_override() {
        let mut cfg = toy_32();
        cfg.allow_any_core_resolution = false;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn shrinking_widths_rejected() {
        let mut cfg = ablation_e();
        cfg.widths = vec![768, 384];
        cfg.attention_heads = vec![12, 6];
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn adapt_resolution_prepends_levels() {
        let e = ablation_e();
        assert_eq!(e.adapt_resolution(128).unwrap(), e);
        let a = e.adapt_resolution(256).unwrap();
        assert_eq!(a.widths, vec![384, 384, 768]);
        assert_eq!(a.depths, vec![2, 2, 11]);
        a.validate().unwrap();
        assert_eq!(e.adapt_resolution(512).unwrap().levels(), 4);
        assert!(e.adapt_resolution(384).is_err());
        assert!(e.adapt_resolution(64).is_err());
    }

    #[test]
    fn shape_preserved_for_toy_model() {
        let mut cfg = toy_32();
        cfg.input_resolution = 64;
        let model = HditModel::<f32>::new(&cfg, &mut RngStream::new(0, Purpose::Init)).unwrap();
        let x = RngStream::new(1, Purpose::Test).fill::<f32>(&[1, 64, 64, 3], Distribution::StandardNormal);
        let y = model.forward(&x, &[1.0], &[Some(0)], None).unwrap();
        assert_eq!(y.shape(), &[1, 64, 64, 3]);
        assert!(model.forward(&x.slice(1, 0, 60).unwrap(), &[1.0], &[None], None).is_err());
    }

    #[test]
    fn interior_blocks_are_identity_at_construction() {
        let cfg = grad_check_16();
        let mut model = HditModel::<f64>::new(&cfg, &mut RngStream::new(0, Purpose::Init)).unwrap();
        // a nonzero head so the comparison is not trivially 0 == 0
        model.out_proj = Linear::new(8, 12, &mut RngStream::new(5, Purpose::Init));
        let x = RngStream::new(1, Purpose::Test).fill::<f64>(&[2, 16, 16, 3], Distribution::StandardNormal);
        let full = model.forward(&x, &[0.3, 4.0], &[Some(1), None], None).unwrap();
        let mut ablated = model.clone();
        ablated.encoder.iter_mut().for_each(Vec::clear);
        ablated.decoder.iter_mut().for_each(Vec::clear);
        ablated.core.clear();
        let bare = ablated.forward(&x, &[0.3, 4.0], &[Some(1), None], None).unwrap();
        assert_eq!(full.data(), bare.data());
        assert!(full.data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn zero_head_outputs_zero_at_construction() {
        let model = HditModel::<f32>::new(&grad_check_16(), &mut RngStream::new(0, Purpose::Init)).unwrap();
        let x = RngStream::new(1, Purpose::Test).fill::<f32>(&[1, 16, 16, 3], Distribution::StandardNormal);
        assert!(model.forward(&x, &[1.0], &[None], None).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn build_is_reproducible() {
        let cfg = grad_check_16();
        let a = HditModel::<f32>::new(&cfg, &mut RngStream::new(3, Purpose::Init)).unwrap();
        let b = HditModel::<f32>::new(&cfg, &mut RngStream::new(3, Purpose::Init)).unwrap();
        let (pa, pb) = (crate::nn::named_parameters(&a), crate::nn::named_parameters(&b));
        assert_eq!(pa.len(), pb.len());
        for ((na, ta), (nb, tb)) in pa.iter().zip(&pb) {
            assert_eq!(na, nb);
            assert_eq!(ta.data(), tb.data());
        }
        assert!(parameter_count(&a) > 0);
    }
}
