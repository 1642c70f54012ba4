//! Analytic FLOP and parameter counts for isotropic (DiT-style) transformers
//! and hourglass configurations.
//!
//! One multiply-accumulate counts as one FLOP. Softmax, normalization and
//! other elementwise work is excluded, as is the per-sample conditioning
//! path (mapping network and AdaRMSNorm scale projections), whose cost does
//! not grow with the token count.

use std::fmt::Write as _;

use crate::model::{ConfigError, ModelConfig};
use crate::nn::{AttentionKind, FeedForwardKind, FOURIER_FREQUENCIES};

/// An isotropic transformer on `p × p` patches.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DitConfig {
    pub width: usize,
    pub depth: usize,
    pub patch: usize,
    pub channels: usize,
}

impl DitConfig {
    /// DiT-B/4.
    pub const B4: DitConfig = DitConfig {
        width: 768,
        depth: 12,
        patch: 4,
        channels: 3,
    };
}

/// Costs of one level (both sides of the hourglass for outer levels).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LevelCost {
    pub level: usize,
    /// Token grid side.
    pub side: usize,
    pub width: usize,
    pub blocks: usize,
    pub attention_projections: f64,
    pub attention_mixing: f64,
    pub feedforward: f64,
}

impl LevelCost {
    pub fn total(&self) -> f64 {
        self.attention_projections + self.attention_mixing + self.feedforward
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CostReport {
    pub arch: &'static str,
    pub resolution: usize,
    pub levels: Vec<LevelCost>,
    /// Patch embedding, output head, token merges and splits.
    pub token_ops: f64,
    pub parameters: usize,
}

impl CostReport {
    pub fn attention_projections(&self) -> f64 {
        self.levels.iter().map(|l| l.attention_projections).sum()
    }
    pub fn attention_mixing(&self) -> f64 {
        self.levels.iter().map(|l| l.attention_mixing).sum()
    }
    pub fn feedforward(&self) -> f64 {
        self.levels.iter().map(|l| l.feedforward).sum()
    }
    pub fn total(&self) -> f64 {
        self.levels.iter().map(LevelCost::total).sum::<f64>() + self.token_ops
    }
    pub fn gflops(&self) -> f64 {
        self.total() / 1e9
    }
    /// Tokens per level, outermost first.
    pub fn tokens(&self) -> Vec<usize> {
        self.levels.iter().map(|l| l.side * l.side).collect()
    }
}

fn block_level(
    level: usize,
    side: usize,
    d: usize,
    blocks: usize,
    kind: AttentionKind,
    ff: FeedForwardKind,
) -> LevelCost {
    let n = (side * side) as f64;
    let df = d as f64;
    let keys = match kind {
        AttentionKind::Global => n,
        AttentionKind::Neighborhood { kernel } => (kernel.min(side) * kernel.min(side)) as f64,
        AttentionKind::Swin { window } => (window * window) as f64,
    };
    let ff_factor = match ff {
        FeedForwardKind::Geglu => 9.0,
        FeedForwardKind::Gelu => 8.0,
    };
    let b = blocks as f64;
    LevelCost {
        level,
        side,
        width: d,
        blocks,
        attention_projections: b * 4.0 * n * df * df,
        attention_mixing: b * 2.0 * n * keys * df,
        feedforward: b * ff_factor * n * df * df,
    }
}

/// Isotropic transformer: per layer `4nd²` projections, `2n²d` attention,
/// `8nd²` MLP, plus patch embedding and a linear head.
pub fn count_dit(cfg: &DitConfig, res: usize) -> CostReport {
    let side = res / cfg.patch;
    let n = (side * side) as f64;
    let p2c = cfg.patch * cfg.patch * cfg.channels;
    let d = cfg.width;
    let level = block_level(0, side, d, cfg.depth, AttentionKind::Global, FeedForwardKind::Gelu);
    // QKV/out and MLP weights with biases, adaLN modulation (6d outputs),
    // patch embed, head
    let per_layer = 4 * d * d + 4 * d + 8 * d * d + 5 * d + 6 * d * d + 6 * d;
    CostReport {
        arch: "dit",
        resolution: res,
        levels: vec![level],
        token_ops: 2.0 * n * (p2c * d) as f64,
        parameters: cfg.depth * per_layer + 2 * (p2c * d + p2c.max(d)),
    }
}

/// Parameters of one hourglass block of width `d`.
fn block_parameters(d: usize, heads: usize, cond: usize, ff: FeedForwardKind) -> usize {
    let attention = cond * d + 3 * d * d + heads + d * d;
    let feedforward = cond * d
        + match ff {
            FeedForwardKind::Geglu => 9 * d * d,
            FeedForwardKind::Gelu => 8 * d * d,
        };
    attention + feedforward
}

/// Parameter count of the hourglass model described by `cfg`.
pub fn hdit_parameters(cfg: &ModelConfig) -> usize {
    let w = cfg.mapping_width;
    let mapping = 2 * FOURIER_FREQUENCIES * w + (cfg.num_classes + 1) * w + 2 * w + cfg.mapping_depth * (w + 9 * w * w);
    let p2c = cfg.patch_size * cfg.patch_size * cfg.channels;
    let d0 = cfg.widths[0];
    let embed_and_head = p2c * d0 + d0 + d0 * p2c;
    let l = cfg.levels();
    let mut blocks = 0;
    for i in 0..l {
        let per_side = if i + 1 == l { 1 } else { 2 };
        blocks += per_side
            * cfg.depths[i]
            * block_parameters(cfg.widths[i], cfg.attention_heads[i], w, cfg.feedforward);
    }
    let transitions: usize = (0..l - 1).map(|i| 2 * 4 * cfg.widths[i] * cfg.widths[i + 1] + 1).sum();
    mapping + embed_and_head + blocks + transitions
}

/// Hourglass cost at image side `res`. Outer levels count encoder and
/// decoder blocks; the core counts its single stack.
pub fn count_hdit(cfg: &ModelConfig, res: usize) -> Result<CostReport, ConfigError> {
    let m = cfg.resolution_multiple();
    if cfg.levels() == 0 || res % m != 0 {
        return Err(ConfigError::Invalid(format!("resolution {res} is not divisible by {m}")));
    }
    let l = cfg.levels();
    let p2c = (cfg.patch_size * cfg.patch_size * cfg.channels) as f64;
    let mut levels = Vec::with_capacity(l);
    let mut token_ops = 0.0;
    for i in 0..l {
        let side = cfg.tokens_at(i, res);
        let blocks = if i + 1 == l { cfg.depths[i] } else { 2 * cfg.depths[i] };
        levels.push(block_level(i, side, cfg.widths[i], blocks, cfg.attention[i], cfg.feedforward));
        if i + 1 < l {
            // merge into and split out of the next level, both evaluated on its tokens
            let n_next = (cfg.tokens_at(i + 1, res).pow(2)) as f64;
            token_ops += 2.0 * n_next * (4 * cfg.widths[i] * cfg.widths[i + 1]) as f64;
        }
    }
    let n0 = (cfg.tokens_at(0, res).pow(2)) as f64;
    token_ops += 2.0 * n0 * p2c * cfg.widths[0] as f64;
    Ok(CostReport {
        arch: "hdit",
        resolution: res,
        levels,
        token_ops,
        parameters: hdit_parameters(cfg),
    })
}

/// One row of a resolution sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub resolution: usize,
    pub hdit_gflops: f64,
    pub dit_gflops: f64,
}

impl SweepRow {
    /// `1 − hdit/dit`, in percent.
    pub fn reduction_percent(&self) -> f64 {
        100.0 * (1.0 - self.hdit_gflops / self.dit_gflops)
    }
}

/// Costs the hourglass adapted to each resolution next to the isotropic
/// baseline at the same resolution.
pub fn scaling_sweep(base: &ModelConfig, dit: &DitConfig, resolutions: &[usize]) -> Result<Vec<SweepRow>, ConfigError> {
    resolutions
        .iter()
        .map(|&res| {
            let cfg = base.adapt_resolution(res)?;
            Ok(SweepRow {
                resolution: res,
                hdit_gflops: count_hdit(&cfg, res)?.gflops(),
                dit_gflops: count_dit(dit, res).gflops(),
            })
        })
        .collect()
}

/// CSV with header `x,y,r`: resolution, hourglass GFLOP, reduction in percent.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from("x,y,r\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.4},{:.4}", r.resolution, r.hdit_gflops, r.reduction_percent());
    }
    s
}

/// Growth of cost with resolution for the adapted hourglass.
#[derive(Clone, Debug)]
pub struct AsymptoticReport {
    /// `(res, FLOPs(2·res)/FLOPs(res))` for each doubling.
    pub hdit_ratios: Vec<(usize, f64)>,
    pub dit_ratios: Vec<(usize, f64)>,
    /// Attention-mixing FLOPs summed over all levels added by adaptation, at
    /// the largest resolution.
    pub added_level_attention: f64,
    /// Attention-mixing FLOPs of the outermost level at the largest resolution.
    pub outermost_attention: f64,
}

impl AsymptoticReport {
    pub fn last_hdit_ratio(&self) -> f64 {
        self.hdit_ratios.last().map_or(f64::NAN, |r| r.1)
    }
    pub fn last_dit_ratio(&self) -> f64 {
        self.dit_ratios.last().map_or(f64::NAN, |r| r.1)
    }
    /// Geometric-series bound: added levels cost at most 4/3 of the outermost.
    pub fn geometric_bound_holds(&self) -> bool {
        self.added_level_attention <= 4.0 / 3.0 * self.outermost_attention
    }
}

/// Doubles the resolution `doublings` times starting at the config's own.
pub fn asymptotic_check(cfg: &ModelConfig, dit: &DitConfig, doublings: usize) -> Result<AsymptoticReport, ConfigError> {
    if doublings < 3 {
        return Err(ConfigError::Invalid(format!("need at least 3 doublings, got {doublings}")));
    }
    let base = cfg.input_resolution;
    let resolutions: Vec<usize> = (0..=doublings).map(|k| base << k).collect();
    let mut hdit = Vec::new();
    let mut dit_costs = Vec::new();
    for &r in &resolutions {
        hdit.push(count_hdit(&cfg.adapt_resolution(r)?, r)?);
        dit_costs.push(count_dit(dit, r).total());
    }
    let hdit_ratios = resolutions
        .windows(2)
        .zip(hdit.windows(2))
        .map(|(r, c)| (r[0], c[1].total() / c[0].total()))
        .collect();
    let dit_ratios = resolutions
        .windows(2)
        .zip(dit_costs.windows(2))
        .map(|(r, c)| (r[0], c[1] / c[0]))
        .collect();
    let last = hdit.last().expect("nonempty");
    let added = last.levels.len() - cfg.levels();
    Ok(AsymptoticReport {
        hdit_ratios,
        dit_ratios,
        added_level_attention: last.levels[..added].iter().map(|l| l.attention_mixing).sum(),
        outermost_attention: last.levels[0].attention_mixing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::presets;

    #[test]
    fn dit_b4_matches_hand_count() {
        // 12 · (4·1024·768² + 2·1024²·768 + 8·1024·768²) plus embed and head
        let layers = 12.0 * (4.0 * 1024.0 * 768.0f64.powi(2) + 2.0 * 1024.0f64.powi(2) * 768.0 + 8.0 * 1024.0 * 768.0f64.powi(2));
        let r = count_dit(&DitConfig::B4, 128);
        assert_eq!(r.total() - r.token_ops, layers);
        assert!((r.gflops() - 106.0).abs() / 106.0 < 0.05);
    }

    #[test]
    fn zero_depth_is_embed_and_head_only() {
        let r = count_dit(&DitConfig { depth: 0, ..DitConfig::B4 }, 128);
        assert_eq!(r.total(), r.token_ops);
        assert_eq!(r.token_ops, 2.0 * 1024.0 * 48.0 * 768.0);
    }

    #[test]
    fn single_global_level_matches_dit() {
        let cfg = ModelConfig {
            input_resolution: 128,
            depths: vec![12],
            widths: vec![768],
            attention_heads: vec![12],
            attention: vec![AttentionKind::Global],
            feedforward: FeedForwardKind::Gelu,
            allow_any_core_resolution: true,
            ..presets::ablation_e()
        };
        for res in [64, 128, 256] {
            assert_eq!(count_hdit(&cfg, res).unwrap().total(), count_dit(&DitConfig::B4, res).total());
        }
    }

    #[test]
    fn token_linear_terms_scale_by_four() {
        let cfg = presets::ablation_e();
        let (a, b) = (count_hdit(&cfg, 128).unwrap(), count_hdit(&cfg, 256).unwrap());
        assert_eq!(b.attention_projections(), 4.0 * a.attention_projections());
        assert_eq!(b.feedforward(), 4.0 * a.feedforward());
        assert_eq!(b.token_ops, 4.0 * a.token_ops);
    }

    #[test]
    fn equal_costs_mean_no_reduction() {
        let row = SweepRow {
            resolution: 128,
            hdit_gflops: 5.0,
            dit_gflops: 5.0,
        };
        assert_eq!(row.reduction_percent(), 0.0);
    }

    #[test]
    fn csv_has_header_and_rows() {
        let rows = scaling_sweep(&presets::ablation_e(), &DitConfig::B4, &[128]).unwrap();
        let csv = sweep_csv(&rows);
        assert!(csv.starts_with("x,y,r\n128,"));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn parameter_count_matches_built_model() {
        use crate::model::HditModel;
        use crate::rng::{Purpose, RngStream};
        let mut swin = presets::toy_32();
        swin.attention[0] = AttentionKind::Swin { window: 4 };
        swin.feedforward = FeedForwardKind::Gelu;
        for cfg in [presets::toy_32(), presets::grad_check_16(), swin] {
            let model = HditModel::<f32>::new(&cfg, &mut RngStream::new(0, Purpose::Init)).unwrap();
            assert_eq!(crate::nn::parameter_count(&model), hdit_parameters(&cfg));
        }
    }

    #[test]
    fn asymptotic_needs_three_doublings() {
        assert!(asymptotic_check(&presets::ablation_e(), &DitConfig::B4, 2).is_err());
        let r = asymptotic_check(&presets::ablation_e(), &DitConfig::B4, 3).unwrap();
        assert!(r.geometric_bound_holds());
        assert!(r.last_dit_ratio() > 10.0);
    }
}
