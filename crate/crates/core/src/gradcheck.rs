//! Central finite-difference check of backpropagated gradients.
//!
//! Used by the test suites to verify the loss implementations; it never
//! touches the backward pass it is checking except to read its output.

use candle_core::Tensor;
use rand::Rng;

use crate::error::Result;
use crate::nn::{seeded_rng, ParamStore};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheck {
    pub checked: usize,
    pub max_rel_error: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: String,
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Coordinates sampled per parameter tensor (all when the tensor is smaller).
    pub per_tensor: usize,
    pub step: f64,
    /// Denominator floor, so near-zero gradients are compared absolutely.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions {
            per_tensor: 4,
            step: 1e-5,
            floor: 1e-6,
            seed: 0,
        }
    }
}

/// Compares `d loss / d param` from backprop against central differences for
/// every parameter whose name starts with one of `prefixes`.
pub fn check_gradients(
    store: &ParamStore,
    prefixes: &[&str],
    opts: GradCheckOptions,
    loss: impl Fn() -> Result<Tensor>,
) -> Result<GradCheck> {
    let grads = loss()?.backward()?;
    let mut rng = seeded_rng(opts.seed, "gradcheck", 0);
    let mut report = GradCheck {
        checked: 0,
        max_rel_error: 0.0,
        worst: String::new(),
    };
    for (name, var) in store.iter() {
        if !prefixes.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        let shape = var.dims().to_vec();
        let original = var.as_tensor().flatten_all()?.to_vec1::<f64>()?;
        let analytic = match grads.get(var.as_tensor()) {
            Some(g) => g.flatten_all()?.to_vec1::<f64>()?,
            None => vec![0.0; original.len()],
        };
        let coords: Vec<usize> = if original.len() <= opts.per_tensor {
            (0..original.len()).collect()
        } else {
            (0..opts.per_tensor).map(|_| rng.random_range(0..original.len())).collect()
        };
        for i in coords {
            let mut probe = original.clone();
            probe[i] = original[i] + opts.step;
            var.set(&Tensor::from_vec(probe.clone(), shape.as_slice(), var.device())?)?;
            let plus = loss()?.to_scalar::<f64>()?;
            probe[i] = original[i] - opts.step;
            var.set(&Tensor::from_vec(probe, shape.as_slice(), var.device())?)?;
            let minus = loss()?.to_scalar::<f64>()?;
            var.set(&Tensor::from_vec(original.clone(), shape.as_slice(), var.device())?)?;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let denom = analytic[i].abs().max(numeric.abs()).max(opts.floor);
            let rel = (analytic[i] - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst = format!("{name}[{i}] analytic={:e} numeric={:e}", analytic[i], numeric);
            }
        }
    }
    Ok(report)
}
