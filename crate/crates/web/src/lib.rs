//! Browser bindings for three views of the model: how its cost scales with
//! resolution next to an isotropic transformer, the noise-level loss
//! weightings, and which keys a query sees under neighborhood attention.
//!
//! Every export returns a JSON string; the plain functions underneath are
//! ordinary Rust and are tested natively.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use hdit::cost::{count_dit, count_hdit, DitConfig};
use hdit::diffusion::{loss_weight, Weighting};
use hdit::model::{presets, ModelConfig};
use hdit::tensor::{neighborhood_window, window_extent};

fn preset(name: &str) -> Result<ModelConfig, String> {
    match name {
        "ablation_e" => Ok(presets::ablation_e()),
        "ablation_a" => Ok(presets::ablation_a()),
        "ffhq_1024" => Ok(presets::ffhq_1024()),
        "imagenet_256" => Ok(presets::imagenet_256()),
        _ => Err(format!("unknown preset {name:?}")),
    }
}

/// Cost rows for `preset` adapted to `base·2^k` for `k` in `0..doublings`.
pub fn cost_rows(name: &str, doublings: u32) -> Result<Value, String> {
    let base = preset(name)?;
    let mut rows = Vec::new();
    for k in 0..doublings.min(8) {
        let res = base.input_resolution << k;
        let cfg = base.adapt_resolution(res).map_err(|e| e.to_string())?;
        let h = count_hdit(&cfg, res).map_err(|e| e.to_string())?;
        let d = count_dit(&DitConfig::B4, res);
        rows.push(json!({
            "resolution": res,
            "hdit_gflops": h.gflops(),
            "dit_gflops": d.gflops(),
            "reduction_percent": 100.0 * (1.0 - h.gflops() / d.gflops()),
            "levels": h.levels.iter().map(|l| json!({
                "side": l.side,
                "width": l.width,
                "gflops": l.total() / 1e9,
            })).collect::<Vec<_>>(),
        }));
    }
    Ok(json!({ "preset": name, "rows": rows }))
}

/// SNR, min-SNR and soft-min-SNR weights on a log-spaced σ grid.
pub fn weight_curves(gamma: f64, points: usize) -> Value {
    let n = points.clamp(2, 2000);
    let sigma: Vec<f64> = (0..n).map(|i| 10f64.powf(-2.0 + 4.0 * i as f64 / (n - 1) as f64)).collect();
    let curve = |w| sigma.iter().map(|&s| loss_weight(s, w, gamma)).collect::<Vec<_>>();
    json!({
        "sigma": sigma,
        "snr": curve(Weighting::Snr),
        "min_snr": curve(Weighting::MinSnr),
        "soft_min_snr": curve(Weighting::SoftMinSnr),
    })
}

/// Row-major `h × w` mask: 1 where query `(qi, qj)` attends.
pub fn window_mask(h: usize, w: usize, kernel: usize, qi: usize, qj: usize) -> Result<Value, String> {
    if kernel % 2 == 0 || h == 0 || w == 0 || qi >= h || qj >= w {
        return Err("need an odd kernel and a query inside the map".into());
    }
    let (r0, c0) = (neighborhood_window(qi, h, kernel), neighborhood_window(qj, w, kernel));
    let (rh, cw) = (window_extent(h, kernel), window_extent(w, kernel));
    let mask: Vec<u8> = (0..h * w)
        .map(|k| {
            let (r, c) = (k / w, k % w);
            u8::from((r0..r0 + rh).contains(&r) && (c0..c0 + cw).contains(&c))
        })
        .collect();
    Ok(json!({ "h": h, "w": w, "mask": mask, "keys": rh * cw }))
}

fn to_js(v: Result<Value, String>) -> Result<String, JsValue> {
    v.map(|v| v.to_string()).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn cost_sweep(preset: &str, doublings: u32) -> Result<String, JsValue> {
    to_js(cost_rows(preset, doublings))
}

#[wasm_bindgen]
pub fn loss_weights(gamma: f64, points: usize) -> String {
    weight_curves(gamma, points).to_string()
}

#[wasm_bindgen]
pub fn neighborhood(h: usize, w: usize, kernel: usize, qi: usize, qj: usize) -> Result<String, JsValue> {
    to_js(window_mask(h, w, kernel, qi, qj))
}
