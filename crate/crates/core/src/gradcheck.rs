//! Central finite-difference gradient checks in binary64.

use crate::nn::{map_parameters, named_parameters, Module};
use crate::rng::{Distribution, RngStream};
use crate::tensor::{Result, Tensor};

/// Step for central differences.
pub const FD_STEP: f64 = 1e-5;
/// Gradient magnitude below which the absolute error is used instead of the
/// relative one.
pub const MAGNITUDE_FLOOR: f64 = 1e-6;

/// Worst disagreement between autodiff and finite differences for one tensor.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub name: String,
    pub entries_checked: usize,
    pub max_rel_err: f64,
}

/// `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(MAGNITUDE_FLOOR)
}

fn with_entry(t: &Tensor<f64>, idx: usize, delta: f64) -> Tensor<f64> {
    let mut d = t.to_vec();
    d[idx] += delta;
    Tensor::parameter(d, t.shape()).expect("finite perturbation")
}

/// Checks `∂f/∂inputs` for up to `max_entries` randomly chosen entries per
/// input (all entries when the tensor is smaller).
pub fn check_function(
    names: &[String],
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> Result<Tensor<f64>>,
    max_entries: usize,
    rng: &mut RngStream,
) -> Result<Vec<GradReport>> {
    let leaves: Vec<Tensor<f64>> = inputs.iter().map(|t| t.as_parameter()).collect();
    f(&leaves)?.backward()?;
    let mut reports = Vec::with_capacity(leaves.len());
    for (k, leaf) in leaves.iter().enumerate() {
        let grad = leaf.grad().unwrap_or_else(|| vec![0.0; leaf.numel()]);
        let mut idx: Vec<usize> = (0..leaf.numel()).collect();
        rng.shuffle(&mut idx);
        idx.truncate(max_entries);
        let mut worst: f64 = 0.0;
        for &i in &idx {
            let probe = |delta: f64| -> Result<f64> {
                let mut args: Vec<Tensor<f64>> = leaves.iter().map(Tensor::detach).collect();
                args[k] = with_entry(leaf, i, delta).detach();
                Ok(crate::tensor::no_grad(|| f(&args))?.item())
            };
            let numeric = (probe(FD_STEP)? - probe(-FD_STEP)?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(grad[i], numeric));
        }
        reports.push(GradReport {
            name: names.get(k).cloned().unwrap_or_else(|| format!("input{k}")),
            entries_checked: idx.len(),
            max_rel_err: worst,
        });
    }
    Ok(reports)
}

/// Replaces every parameter with a random nonzero value so zero-initialized
/// branches carry gradient: matrices get `N(0, 1/fan_in)`, vectors and
/// scalars (norm scales, τ, lerp coefficients) get `U[0.5, 1.5)`.
pub fn randomize_parameters<M: Module<f64>>(m: &mut M, rng: &mut RngStream) -> Result<()> {
    map_parameters(m, |_, t| {
        let shape = t.shape().to_vec();
        let data: Vec<f64> = if shape.len() >= 2 {
            let std = 1.0 / (shape[1] as f64).sqrt();
            rng.sample_vec(t.numel(), Distribution::StandardNormal).iter().map(|v| v * std).collect()
        } else {
            rng.sample_vec(t.numel(), Distribution::Uniform01).iter().map(|v| 0.5 + v).collect()
        };
        Tensor::parameter(data, &shape)
    })
}

/// Checks the gradient of `loss(module)` with respect to every parameter.
pub fn check_module<M: Module<f64> + Clone>(
    module: &M,
    loss: impl Fn(&M) -> Result<Tensor<f64>>,
    max_entries: usize,
    rng: &mut RngStream,
) -> Result<Vec<GradReport>> {
    let params = named_parameters(module);
    let names: Vec<String> = params.iter().map(|(n, _)| n.clone()).collect();
    let tensors: Vec<Tensor<f64>> = params.into_iter().map(|(_, t)| t).collect();
    check_function(
        &names,
        &tensors,
        |ts| {
            let mut m = module.clone();
            let mut it = ts.iter();
            map_parameters(&mut m, |_, _| Ok(it.next().expect("same parameter order").clone()))?;
            loss(&m)
        },
        max_entries,
        rng,
    )
}

/// Largest relative error over a set of reports.
pub fn worst(reports: &[GradReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    #[test]
    fn matmul_sum_gradient_matches() {
        let mut rng = RngStream::new(0, Purpose::Test);
        let x = rng.fill::<f64>(&[3, 4], Distribution::StandardNormal);
        let w = rng.fill::<f64>(&[4, 2], Distribution::StandardNormal);
        let names = ["x".to_string(), "w".to_string()];
        let reports = check_function(&names, &[x, w], |t| t[0].matmul(&t[1])?.sum(), 100, &mut rng).unwrap();
        assert!(worst(&reports) < 1e-6, "{reports:?}");
    }

    #[test]
    fn relative_error_uses_floor() {
        assert!(relative_error(2.0, 3.0) > 0.3);
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!(relative_error(1e-9, 2e-9) < 1e-2);
    }
}
