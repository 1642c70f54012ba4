//! Self-verification suites: finite-difference gradients, reference-oracle
//! equivalences and structural invariants, each reported check by check.

use std::fmt;
use std::str::FromStr;

use crate::diffusion::{precond, AdamW, OptimizerConfig};
use crate::gradcheck::{check_function, check_module, randomize_parameters, worst, GradReport};
use crate::model::{presets, HditModel, ModelConfig};
use crate::nn::{
    cosine_attention, global_attention, join, lerp_merge, map_parameters, named_parameters, neighborhood_attention,
    pixel_shuffle, pixel_unshuffle, swin_attention, AdaRmsNorm, AttentionKind, AxialRope, FeedForward,
    FeedForwardKind, HditBlock, Linear, MappingNetwork, Module, PatchEmbed, SelfAttention, TokenMerge, TokenSplit,
    TAU_FLOOR,
};
use crate::rng::{Distribution, Purpose, RngStream};
use crate::tensor::{Element, Result, Tensor};

/// Tolerance for gradient agreement (relative, binary64).
pub const GRAD_TOL: f64 = 1e-4;
/// Tolerance for equivalent attention formulations (max abs diff).
pub const ORACLE_TOL: f64 = 1e-5;
/// Tolerance for the preconditioner identities (relative).
pub const PRECOND_TOL: f64 = 1e-10;
/// Entries probed per parameter tensor in the gradient suite.
const GRAD_ENTRIES: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Suite {
    Grad,
    Oracle,
    Invariants,
    All,
}

impl FromStr for Suite {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "grad" => Ok(Suite::Grad),
            "oracle" => Ok(Suite::Oracle),
            "invariants" => Ok(Suite::Invariants),
            "all" => Ok(Suite::All),
            _ => Err(format!("unknown suite {s:?} (expected grad, oracle, invariants or all)")),
        }
    }
}

/// How a measured value is compared with its tolerance.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Bound {
    Below,
    Exact,
    AtLeast,
}

/// Outcome of one named check: the measured value against its tolerance.
#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
    pub bound: Bound,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn below(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        CheckResult {
            name: name.into(),
            value,
            tolerance,
            bound: Bound::Below,
            passed: value < tolerance,
            detail: String::new(),
        }
    }

    fn exact(name: impl Into<String>, value: f64) -> Self {
        CheckResult {
            name: name.into(),
            value,
            tolerance: 0.0,
            bound: Bound::Exact,
            passed: value == 0.0,
            detail: String::new(),
        }
    }

    fn with_detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    fn errored(name: impl Into<String>, err: impl fmt::Display) -> Self {
        CheckResult {
            name: name.into(),
            value: f64::NAN,
            tolerance: 0.0,
            bound: Bound::Exact,
            passed: false,
            detail: format!("error: {err}"),
        }
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        let bound = match self.bound {
            Bound::Below => format!("< {:.0e}", self.tolerance),
            Bound::Exact => "== 0".to_string(),
            Bound::AtLeast => format!(">= {:.0e}", self.tolerance),
        };
        write!(f, "{verdict} {:<40} {:.3e} ({bound})", self.name, self.value)?;
        if !self.detail.is_empty() {
            write!(f, "  {}", self.detail)?;
        }
        Ok(())
    }
}

/// Knobs for exercising the failure paths of the suites.
#[derive(Clone, Debug, Default)]
pub struct VerifyOptions {
    /// Overwrite one attention temperature with a negative value before the
    /// invariants run.
    pub inject_negative_tau: bool,
}

pub fn run(suite: Suite, opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut out = Vec::new();
    if matches!(suite, Suite::Grad | Suite::All) {
        out.extend(grad_suite());
    }
    if matches!(suite, Suite::Oracle | Suite::All) {
        out.extend(oracle_suite());
    }
    if matches!(suite, Suite::Invariants | Suite::All) {
        out.extend(invariants_suite(opts));
    }
    out
}

fn randn<E: Element>(rng: &mut RngStream, shape: &[usize]) -> Tensor<E> {
    rng.fill(shape, Distribution::StandardNormal)
}

fn max_abs_diff<E: Element>(a: &Tensor<E>, b: &Tensor<E>) -> f64 {
    if a.shape() != b.shape() {
        return f64::INFINITY;
    }
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .fold(0.0, f64::max)
}

fn record(name: &str, r: Result<CheckResult>) -> CheckResult {
    r.unwrap_or_else(|e| CheckResult::errored(name, e))
}

// ---------------------------------------------------------------------------
// gradients

/// `Σ out ⊙ probe` with a fixed random probe, so every output entry matters.
fn projected<E: Element>(out: &Tensor<E>, seed: u64) -> Result<Tensor<E>> {
    let probe = randn::<E>(&mut RngStream::keyed(seed, Purpose::Test, 99), out.shape());
    out.mul(&probe)?.sum()
}

fn module_grad<M: Module<f64> + Clone>(
    name: &str,
    mut module: M,
    loss: impl Fn(&M) -> Result<Tensor<f64>>,
) -> CheckResult {
    let mut rng = RngStream::keyed(1, Purpose::Test, name.len() as u64);
    let reports: Result<Vec<GradReport>> = (|| {
        randomize_parameters(&mut module, &mut rng)?;
        check_module(&module, loss, GRAD_ENTRIES, &mut rng)
    })();
    match reports {
        Ok(r) => {
            let bad = r
                .iter()
                .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
                .map(|r| format!("worst tensor {}", r.name))
                .unwrap_or_default();
            let entries: usize = r.iter().map(|r| r.entries_checked).sum();
            CheckResult::below(name, worst(&r), GRAD_TOL).with_detail(format!("{entries} entries, {bad}"))
        }
        Err(e) => CheckResult::errored(name, e),
    }
}

pub fn grad_suite() -> Vec<CheckResult> {
    let mut init = RngStream::new(2, Purpose::Init);
    let mut data = RngStream::new(3, Purpose::Test);
    let cw = 6;
    let x = randn::<f64>(&mut data, &[2, 4, 4, 16]);
    let cond = randn::<f64>(&mut data, &[2, cw]);
    let mut out = Vec::new();

    out.push(module_grad("grad/linear", Linear::<f64>::new(16, 8, &mut init).with_bias(), |m| {
        projected(&m.forward(&x)?, 1)
    }));
    out.push(module_grad("grad/ada_rms_norm", AdaRmsNorm::<f64>::new(16, cw), |m| {
        projected(&m.forward(&x, &cond)?, 2)
    }));
    for (label, kind, shifted) in [
        ("global", AttentionKind::Global, false),
        ("neighborhood", AttentionKind::Neighborhood { kernel: 3 }, false),
        ("swin_shifted", AttentionKind::Swin { window: 2 }, true),
    ] {
        match SelfAttention::<f64>::new(16, 2, cw, kind, shifted, &mut init) {
            Ok(att) => out.push(module_grad(&format!("grad/attention_{label}"), att, |m| {
                projected(&m.forward(&x, &cond)?, 3)
            })),
            Err(e) => out.push(CheckResult::errored(format!("grad/attention_{label}"), e)),
        }
    }
    for (label, kind) in [("geglu", FeedForwardKind::Geglu), ("gelu", FeedForwardKind::Gelu)] {
        out.push(module_grad(
            &format!("grad/feedforward_{label}"),
            FeedForward::<f64>::new(16, cw, kind, 0.0, &mut init),
            |m| projected(&m.forward(&x, &cond, None)?, 4),
        ));
    }
    match HditBlock::<f64>::new(16, 2, cw, AttentionKind::Neighborhood { kernel: 3 }, false, FeedForwardKind::Geglu, 0.0, &mut init) {
        Ok(b) => out.push(module_grad("grad/block", b, |m| projected(&m.forward(&x, &cond, None)?, 5))),
        Err(e) => out.push(CheckResult::errored("grad/block", e)),
    }
    out.push(module_grad("grad/mapping", MappingNetwork::<f64>::new(8, 2, 3, 0.0, &mut init), |m| {
        projected(&m.forward(&[0.3, 4.0], &[Some(1), None], None)?, 6)
    }));
    let img = randn::<f64>(&mut data, &[1, 8, 8, 3]);
    out.push(module_grad("grad/patch_embed", PatchEmbed::<f64>::new(2, 3, 16, &mut init), |m| {
        projected(&m.forward(&img)?, 7)
    }));
    out.push(module_grad("grad/token_merge", TokenMerge::<f64>::new(16, 24, &mut init), |m| {
        projected(&m.forward(&x)?, 8)
    }));
    let coarse = randn::<f64>(&mut data, &[1, 2, 2, 24]);
    out.push(module_grad("grad/token_split", TokenSplit::<f64>::new(24, 16, &mut init), |m| {
        projected(&m.forward(&coarse)?, 9)
    }));
    let up = randn::<f64>(&mut data, &[2, 4, 4, 16]);
    out.push(module_grad("grad/lerp_skip", crate::nn::LerpSkip::<f64>::default(), |m| {
        projected(&m.forward(&x, &up)?, 10)
    }));

    // inputs as well as parameters: attention with respect to q, k, v and τ
    let q = randn::<f64>(&mut data, &[1, 2, 3, 3, 8]);
    let k = randn::<f64>(&mut data, &[1, 2, 3, 3, 8]);
    let v = randn::<f64>(&mut data, &[1, 2, 3, 3, 8]);
    let tau = Tensor::<f64>::from_vec(vec![0.7, 1.3], &[2]).expect("two heads");
    let names: Vec<String> = ["q", "k", "v", "tau"].iter().map(|s| s.to_string()).collect();
    let r = check_function(
        &names,
        &[q, k, v, tau],
        |t| projected(&neighborhood_attention(&t[0], &t[1], &t[2], &t[3], 3)?, 11),
        GRAD_ENTRIES * 4,
        &mut RngStream::new(4, Purpose::Test),
    );
    out.push(match r {
        Ok(r) => CheckResult::below("grad/neighborhood_inputs", worst(&r), GRAD_TOL),
        Err(e) => CheckResult::errored("grad/neighborhood_inputs", e),
    });

    out.push(model_grad());
    out
}

fn model_grad() -> CheckResult {
    let name = "grad/model_grad_check_16";
    let cfg = presets::grad_check_16();
    let model = match HditModel::<f64>::new(&cfg, &mut RngStream::new(5, Purpose::Init)) {
        Ok(m) => m,
        Err(e) => return CheckResult::errored(name, e),
    };
    let mut rng = RngStream::new(6, Purpose::Test);
    let img = randn::<f64>(&mut rng, &[2, 16, 16, cfg.channels]);
    module_grad(name, model, |m| {
        projected(&m.forward(&img, &[0.4, 2.5], &[Some(0), None], None)?, 12)
    })
}

// ---------------------------------------------------------------------------
// oracles

/// Neighborhood attention with a kernel covering the whole map against
/// global attention, over 20 random shapes.
fn neighborhood_vs_global() -> Result<CheckResult> {
    let mut rng = RngStream::new(10, Purpose::Test);
    let mut worst_diff: f64 = 0.0;
    for _ in 0..20 {
        let (h, w) = (1 + rng.below(6), 1 + rng.below(6));
        let heads = 1 + rng.below(2);
        let d = 4 + rng.below(5);
        let kernel = 2 * h.max(w) - 1 + 2 * rng.below(2);
        let shape = [1 + rng.below(2), heads, h, w, d];
        let (q, k, v) = (randn::<f32>(&mut rng, &shape), randn::<f32>(&mut rng, &shape), randn::<f32>(&mut rng, &shape));
        let tau: Tensor<f32> = Tensor::from_f64_slice(&rng.sample_vec(heads, Distribution::Uniform01).iter().map(|u| 0.05 + u).collect::<Vec<_>>(), &[heads])?;
        let a = neighborhood_attention(&q, &k, &v, &tau, kernel)?;
        let g = global_attention(&q, &k, &v, &tau)?;
        worst_diff = worst_diff.max(max_abs_diff(&a, &g));
    }
    Ok(CheckResult::below("oracle/neighborhood_covering_eq_global", worst_diff, ORACLE_TOL).with_detail("20 cases"))
}

fn swin_vs_global() -> Result<CheckResult> {
    let mut rng = RngStream::new(11, Purpose::Test);
    let mut worst_diff: f64 = 0.0;
    for side in [2, 4, 8] {
        let shape = [2, 2, side, side, 8];
        let (q, k, v) = (randn::<f32>(&mut rng, &shape), randn::<f32>(&mut rng, &shape), randn::<f32>(&mut rng, &shape));
        let tau = Tensor::<f32>::from_vec(vec![0.1, 0.4], &[2])?;
        let g = global_attention(&q, &k, &v, &tau)?;
        for shifted in [false, true] {
            worst_diff = worst_diff.max(max_abs_diff(&swin_attention(&q, &k, &v, &tau, side, shifted)?, &g));
        }
    }
    Ok(CheckResult::below("oracle/swin_full_window_eq_global", worst_diff, ORACLE_TOL))
}

/// Explicit loops over normalized dot products, in binary64.
fn cosine_loop_oracle(q: &[f64], k: &[f64], v: &[f64], n: usize, d: usize, tau: f64) -> Vec<f64> {
    let unit = |x: &[f64]| {
        let norm = (x.iter().map(|a| a * a).sum::<f64>() + crate::nn::COSINE_EPS).sqrt();
        x.iter().map(|a| a / norm).collect::<Vec<_>>()
    };
    let mut out = vec![0.0; n * d];
    for i in 0..n {
        let qi = unit(&q[i * d..(i + 1) * d]);
        let logits: Vec<f64> = (0..n)
            .map(|j| {
                let kj = unit(&k[j * d..(j + 1) * d]);
                qi.iter().zip(&kj).map(|(a, b)| a * b).sum::<f64>() / tau
            })
            .collect();
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let e: Vec<f64> = logits.iter().map(|l| (l - top).exp()).collect();
        let z: f64 = e.iter().sum();
        for j in 0..n {
            for c in 0..d {
                out[i * d + c] += e[j] / z * v[j * d + c];
            }
        }
    }
    out
}

fn cosine_vs_loop() -> Result<CheckResult> {
    let mut rng = RngStream::new(12, Purpose::Test);
    let (n, d) = (5, 8);
    let mut worst_rel: f64 = 0.0;
    for tau in [0.05, 0.1, 1.0] {
        let (q, k, v) = (randn::<f64>(&mut rng, &[1, 1, n, d]), randn::<f64>(&mut rng, &[1, 1, n, d]), randn::<f64>(&mut rng, &[1, 1, n, d]));
        let got = cosine_attention(&q, &k, &v, &Tensor::full(&[1], tau), None)?;
        let want = cosine_loop_oracle(q.data(), k.data(), v.data(), n, d, tau);
        let num: f64 = got.data().iter().zip(&want).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let den: f64 = want.iter().map(|b| b * b).sum::<f64>().sqrt();
        worst_rel = worst_rel.max(num / den);
    }
    Ok(CheckResult::below("oracle/cosine_attention_eq_loop", worst_rel, ORACLE_TOL))
}

/// Every query of a 4×4 map with kernel 3 against masked global attention
/// over the explicitly enumerated, border-clamped window.
fn neighborhood_window_oracle() -> Result<CheckResult> {
    let (h, w, kernel, d) = (4, 4, 3, 8);
    let mut rng = RngStream::new(13, Purpose::Test);
    let shape = [1, 1, h, w, d];
    let (q, k, v) = (randn::<f64>(&mut rng, &shape), randn::<f64>(&mut rng, &shape), randn::<f64>(&mut rng, &shape));
    let tau = Tensor::<f64>::full(&[1], 0.2);
    let start = |i: usize, n: usize| i.saturating_sub(kernel / 2).min(n - kernel.min(n));
    let n = h * w;
    let mut mask = vec![-1e9; n * n];
    for qi in 0..n {
        let (r0, c0) = (start(qi / w, h), start(qi % w, w));
        for r in r0..r0 + kernel.min(h) {
            for c in c0..c0 + kernel.min(w) {
                mask[qi * n + r * w + c] = 0.0;
            }
        }
    }
    // the corner query sees exactly the 3×3 corner block
    let corner: Vec<usize> = (0..n).filter(|&j| mask[j] == 0.0).collect();
    let corner_ok = corner == vec![0, 1, 2, 4, 5, 6, 8, 9, 10];
    let mask = Tensor::from_vec(mask, &[n, n])?;
    let flat = [1, 1, n, d];
    let want = cosine_attention(&q.reshape(&flat)?, &k.reshape(&flat)?, &v.reshape(&flat)?, &tau, Some(&mask))?;
    let got = neighborhood_attention(&q, &k, &v, &tau, kernel)?.reshape(&flat)?;
    let mut r = CheckResult::below("oracle/neighborhood_window_enumeration", max_abs_diff(&got, &want), ORACLE_TOL);
    if !corner_ok {
        r.passed = false;
        r.detail = format!("corner window {corner:?}");
    }
    Ok(r)
}

/// Rotation by explicit 2×2 matrices, then the inner-product shift test.
fn rope_shift_equivariance() -> Result<CheckResult> {
    let rope = AxialRope::new(16)?;
    let mut rng = RngStream::new(14, Purpose::Test);
    let hd = rope.head_dim();
    let quarter = hd / 4;
    let explicit = |x: &[f64], (r, c): (f64, f64)| {
        let mut y = x.to_vec();
        let f = rope.frequencies();
        for p in 0..quarter {
            let pos = if p < f.len() { r } else { c };
            let a = pos * f[p % f.len()];
            let (s, co) = a.sin_cos();
            let (u, v) = (x[p], x[p + quarter]);
            y[p] = co * u - s * v;
            y[p + quarter] = s * u + co * v;
        }
        y
    };
    let mut worst_diff: f64 = 0.0;
    for _ in 0..20 {
        let q = randn::<f64>(&mut rng, &[1, hd]);
        let k = randn::<f64>(&mut rng, &[1, hd]);
        let p1 = (rng.below(16) as f64, rng.below(16) as f64);
        let p2 = (rng.below(16) as f64, rng.below(16) as f64);
        let delta = (rng.below(32) as f64 - 16.0, rng.below(32) as f64 - 16.0);
        let mut rot = |x: &Tensor<f64>, p: (f64, f64)| -> Result<Vec<f64>> {
            let (cos, sin) = rope.tables_at::<f64>(&[p]);
            let y = rope.apply(x, &cos, &sin)?.to_vec();
            worst_diff = worst_diff.max(y.iter().zip(explicit(x.data(), p)).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));
            Ok(y)
        };
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let base = dot(&rot(&q, p1)?, &rot(&k, p2)?);
        let moved = dot(
            &rot(&q, (p1.0 + delta.0, p1.1 + delta.1))?,
            &rot(&k, (p2.0 + delta.0, p2.1 + delta.1))?,
        );
        worst_diff = worst_diff.max((base - moved).abs());
    }
    Ok(CheckResult::below("oracle/rope_shift_equivariance", worst_diff, ORACLE_TOL))
}

/// Permuting tokens together with their rotary positions permutes the
/// output of a global block.
fn permutation_equivariance() -> Result<CheckResult> {
    let mut init = RngStream::new(15, Purpose::Init);
    let mut blk = HditBlock::<f64>::new(16, 2, 4, AttentionKind::Global, false, FeedForwardKind::Geglu, 0.0, &mut init)?;
    let mut rng = RngStream::new(16, Purpose::Test);
    randomize_parameters(&mut blk, &mut rng)?;
    let n = 9;
    let positions: Vec<(f64, f64)> = (0..n).map(|i| ((i / 3) as f64, (i % 3) as f64)).collect();
    let x = randn::<f64>(&mut rng, &[1, n, 16]);
    let cond = randn::<f64>(&mut rng, &[1, 4]);
    let mut perm: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut perm);
    let base = blk.forward_tokens(&x, &positions, &cond)?;
    let rows = |t: &Tensor<f64>| -> Result<Tensor<f64>> { t.reshape(&[n, 16])?.index_select(&perm)?.reshape(&[1, n, 16]) };
    let px = rows(&x)?;
    let ppos: Vec<(f64, f64)> = perm.iter().map(|&i| positions[i]).collect();
    let moved = blk.forward_tokens(&px, &ppos, &cond)?;
    Ok(CheckResult::below(
        "oracle/block_permutation_equivariance",
        max_abs_diff(&moved, &rows(&base)?),
        ORACLE_TOL,
    ))
}

pub fn oracle_suite() -> Vec<CheckResult> {
    vec![
        record("oracle/neighborhood_covering_eq_global", neighborhood_vs_global()),
        record("oracle/swin_full_window_eq_global", swin_vs_global()),
        record("oracle/cosine_attention_eq_loop", cosine_vs_loop()),
        record("oracle/neighborhood_window_enumeration", neighborhood_window_oracle()),
        record("oracle/rope_shift_equivariance", rope_shift_equivariance()),
        record("oracle/block_permutation_equivariance", permutation_equivariance()),
    ]
}

// ---------------------------------------------------------------------------
// invariants

/// Every block of freshly built models passes its input through unchanged.
fn blocks_identity() -> Result<CheckResult> {
    let mut rng = RngStream::new(20, Purpose::Test);
    let mut worst_diff: f64 = 0.0;
    let mut blocks = 0;
    let mut swin = presets::grad_check_16();
    swin.attention[0] = AttentionKind::Swin { window: 4 };
    swin.depths[0] = 2;
    for cfg in [presets::grad_check_16(), presets::toy_32(), swin] {
        let m = HditModel::<f64>::new(&cfg, &mut RngStream::new(21, Purpose::Init)).map_err(model_to_tensor)?;
        let cond = randn::<f64>(&mut rng, &[2, cfg.mapping_width]);
        let stacks = m.encoder.iter().chain(std::iter::once(&m.core)).chain(m.decoder.iter());
        for (level, stack) in stacks.enumerate() {
            let lvl = if level < cfg.levels() { level } else { level - cfg.levels() };
            let side = cfg.input_resolution / cfg.patch_size >> lvl;
            let x = randn::<f64>(&mut rng, &[2, side, side, cfg.widths[lvl]]);
            for b in stack {
                worst_diff = worst_diff.max(max_abs_diff(&b.forward(&x, &cond, None)?, &x));
                blocks += 1;
            }
        }
    }
    Ok(CheckResult::exact("invariants/blocks_identity_at_init", worst_diff).with_detail(format!("{blocks} blocks")))
}

fn model_to_tensor(e: crate::model::ModelError) -> crate::tensor::TensorError {
    match e {
        crate::model::ModelError::Tensor(t) => t,
        crate::model::ModelError::Config(c) => crate::tensor::TensorError::InvalidSpec {
            op: "build_model",
            reason: c.to_string(),
        },
    }
}

fn shuffle_round_trip() -> Result<CheckResult> {
    let mut rng = RngStream::new(22, Purpose::Test);
    let mut worst_diff: f64 = 0.0;
    for (r, shape) in [(2, [2, 8, 8, 5]), (4, [1, 16, 8, 3])] {
        let x = randn::<f32>(&mut rng, &shape);
        worst_diff = worst_diff.max(max_abs_diff(&pixel_shuffle(&pixel_unshuffle(&x, r)?, r)?, &x));
        let y = randn::<f32>(&mut rng, &[1, 2, 2, 4 * r * r]);
        worst_diff = worst_diff.max(max_abs_diff(&pixel_unshuffle(&pixel_shuffle(&y, r)?, r)?, &y));
    }
    Ok(CheckResult::exact("invariants/pixel_shuffle_round_trip", worst_diff))
}

fn lerp_endpoints() -> Result<CheckResult> {
    let skip = Tensor::<f64>::from_vec(vec![2.0, -1.0], &[2])?;
    let up = Tensor::<f64>::from_vec(vec![4.0, 5.0], &[2])?;
    let at = |f: f64| lerp_merge(&skip, &up, &Tensor::full(&[1], f));
    let mut diff = max_abs_diff(&at(1.0)?, &skip).max(max_abs_diff(&at(0.0)?, &up));
    diff = diff.max(max_abs_diff(&at(0.5)?, &Tensor::from_vec(vec![3.0, 2.0], &[2])?));
    Ok(CheckResult::exact("invariants/lerp_endpoints", diff))
}

fn rope_isometry() -> Result<CheckResult> {
    let rope = AxialRope::new(32)?;
    let mut rng = RngStream::new(23, Purpose::Test);
    let x = randn::<f64>(&mut rng, &[6, 32]);
    let pos: Vec<(f64, f64)> = (0..6).map(|i| (i as f64 * 1.5, 7.0 - i as f64)).collect();
    let (cos, sin) = rope.tables_at::<f64>(&pos);
    let y = rope.apply(&x, &cos, &sin)?;
    let norm = |t: &Tensor<f64>, i: usize| t.data()[i * 32..(i + 1) * 32].iter().map(|v| v * v).sum::<f64>();
    let mut diff = (0..6).map(|i| (norm(&x, i) - norm(&y, i)).abs()).fold(0.0, f64::max);
    let (c0, s0) = rope.tables_at::<f64>(&[(0.0, 0.0)]);
    let row = x.slice(0, 0, 1)?;
    diff = diff.max(max_abs_diff(&rope.apply(&row, &c0, &s0)?, &row));
    Ok(CheckResult::below("invariants/rope_isometry_and_origin", diff, 1e-10))
}

/// Attention rows are convex combinations (`v = I` exposes the weights),
/// and the output is linear in `v`.
fn attention_weights_and_superposition() -> Result<Vec<CheckResult>> {
    let mut rng = RngStream::new(24, Purpose::Test);
    let n = 6;
    let q = randn::<f64>(&mut rng, &[1, 2, n, 8]);
    let k = randn::<f64>(&mut rng, &[1, 2, n, 8]);
    let tau = Tensor::<f64>::from_vec(vec![0.05, 0.5], &[2])?;
    let mut eye = vec![0.0; 2 * n * n];
    for h in 0..2 {
        for i in 0..n {
            eye[h * n * n + i * n + i] = 1.0;
        }
    }
    let weights = cosine_attention(&q, &k, &Tensor::from_vec(eye, &[1, 2, n, n])?, &tau, None)?;
    let mut row_err: f64 = 0.0;
    let mut negative = false;
    for row in weights.data().chunks(n) {
        row_err = row_err.max((row.iter().sum::<f64>() - 1.0).abs());
        negative |= row.iter().any(|&w| w < 0.0);
    }
    // logits bounded by 1/τ ⇒ any weight ratio within a row is at most e^(2/τ)
    let mut ratio_ok = true;
    for (h, t) in [0.05f64, 0.5].iter().enumerate() {
        for row in weights.data()[h * n * n..(h + 1) * n * n].chunks(n) {
            let (lo, hi) = row.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &w| (a.min(w), b.max(w)));
            ratio_ok &= (hi / lo).ln() <= 2.0 / t + 1e-9;
        }
    }
    let mut rows = CheckResult::below("invariants/attention_rows_sum_to_one", row_err, 1e-6);
    if negative || !ratio_ok {
        rows.passed = false;
        rows.detail = "weights negative or logits outside ±1/τ".into();
    }
    let v1 = randn::<f64>(&mut rng, &[1, 2, n, 8]);
    let v2 = randn::<f64>(&mut rng, &[1, 2, n, 8]);
    let lhs = cosine_attention(&q, &k, &v1.add(&v2)?, &tau, None)?;
    let rhs = cosine_attention(&q, &k, &v1, &tau, None)?.add(&cosine_attention(&q, &k, &v2, &tau, None)?)?;
    Ok(vec![rows, CheckResult::below("invariants/attention_linear_in_values", max_abs_diff(&lhs, &rhs), 1e-12)])
}

fn precond_identities() -> Result<CheckResult> {
    let sd = 0.5;
    let mut worst_rel: f64 = 0.0;
    for i in 0..100 {
        let sigma = 10f64.powf(-3.0 + 6.0 * i as f64 / 99.0);
        let p = precond(sigma, sd)?;
        let total = sigma * sigma + sd * sd;
        let errs = [
            p.c_skip + p.c_out * p.c_out / (sd * sd) - 1.0,
            p.c_in * p.c_in * total - 1.0,
            p.c_out / (sigma * sd * p.c_in) - 1.0,
            // the effective target (x − c_skip·x_σ)/c_out has unit variance
            ((1.0 - p.c_skip).powi(2) * sd * sd + p.c_skip * p.c_skip * sigma * sigma) / (p.c_out * p.c_out) - 1.0,
        ];
        worst_rel = errs.iter().map(|e| e.abs()).fold(worst_rel, f64::max);
    }
    Ok(CheckResult::below("invariants/preconditioner_identities", worst_rel, PRECOND_TOL).with_detail("100 σ values"))
}

/// Every attention temperature is at or above the floor, after an optimizer
/// step that pushes them down.
fn tau_floor(opts: &VerifyOptions) -> Result<CheckResult> {
    let cfg: ModelConfig = presets::grad_check_16();
    let mut m = HditModel::<f32>::new(&cfg, &mut RngStream::new(25, Purpose::Init)).map_err(model_to_tensor)?;
    // gradient that drives every τ towards zero
    for (name, t) in named_parameters(&m) {
        if name.ends_with(".tau") {
            t.sum()?.scale(1e6)?.backward()?;
        }
    }
    let mut opt = AdamW::new(
        OptimizerConfig {
            learning_rate: 10.0,
            ..OptimizerConfig::default()
        },
        &m,
    );
    opt.update(&mut m)?;
    if opts.inject_negative_tau {
        let mut first = true;
        map_parameters(&mut m, |name, t| {
            if first && name.ends_with(".tau") {
                first = false;
                return Tensor::parameter(vec![-0.5; t.numel()], t.shape());
            }
            Ok(t.clone())
        })?;
    }
    let taus: Vec<(String, f64)> = named_parameters(&m)
        .into_iter()
        .filter(|(n, _)| n.ends_with(".tau"))
        .flat_map(|(n, t)| t.to_f64_vec().into_iter().map(move |v| (n.clone(), v)))
        .collect();
    let (lowest_name, lowest) = taus
        .iter()
        .cloned()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .unwrap_or_else(|| (join("", "none"), f64::INFINITY));
    Ok(CheckResult {
        name: "invariants/tau_at_or_above_floor".into(),
        value: lowest,
        tolerance: TAU_FLOOR,
        bound: Bound::AtLeast,
        passed: lowest >= TAU_FLOOR * (1.0 - 1e-6),
        detail: format!("lowest at {lowest_name}"),
    })
}

fn forward_determinism() -> Result<CheckResult> {
    let cfg = presets::grad_check_16();
    let mut m = HditModel::<f64>::new(&cfg, &mut RngStream::new(26, Purpose::Init)).map_err(model_to_tensor)?;
    let mut rng = RngStream::new(27, Purpose::Test);
    randomize_parameters(&mut m, &mut rng)?;
    let x = randn::<f64>(&mut rng, &[1, 16, 16, 3]);
    let a = m.forward(&x, &[1.0], &[Some(1)], None)?;
    let b = m.forward(&x, &[1.0], &[Some(1)], None)?;
    Ok(CheckResult::exact("invariants/forward_deterministic", max_abs_diff(&a, &b)))
}

pub fn invariants_suite(opts: &VerifyOptions) -> Vec<CheckResult> {
    let mut out = vec![
        record("invariants/blocks_identity_at_init", blocks_identity()),
        record("invariants/pixel_shuffle_round_trip", shuffle_round_trip()),
        record("invariants/lerp_endpoints", lerp_endpoints()),
        record("invariants/rope_isometry_and_origin", rope_isometry()),
    ];
    match attention_weights_and_superposition() {
        Ok(r) => out.extend(r),
        Err(e) => out.push(CheckResult::errored("invariants/attention_weights", e)),
    }
    out.push(record("invariants/preconditioner_identities", precond_identities()));
    out.push(record("invariants/tau_at_or_above_floor", tau_floor(opts)));
    out.push(record("invariants/forward_deterministic", forward_determinism()));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_names_parse() {
        assert_eq!("all".parse::<Suite>().unwrap(), Suite::All);
        assert!("everything".parse::<Suite>().is_err());
    }

    #[test]
    fn oracle_and_invariant_suites_pass() {
        for r in oracle_suite().into_iter().chain(invariants_suite(&VerifyOptions::default())) {
            assert!(r.passed, "{r}");
        }
    }

    #[test]
    fn negative_tau_fails_invariants() {
        let results = invariants_suite(&VerifyOptions {
            inject_negative_tau: true,
        });
        let tau = results.iter().find(|r| r.name == "invariants/tau_at_or_above_floor").unwrap();
        assert!(!tau.passed);
    }
}
