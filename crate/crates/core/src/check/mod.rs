//! Verification machinery: central finite differences against the autodiff
//! engine, and brute-force oracles against the production kernels. Used by
//! the test suites and by the `gradcheck` command.
//!
//! Everything here runs in f64; f32 finite differences are too noisy for the
//! tolerances this crate holds itself to.

pub mod oracle;
mod suite;

pub use suite::{available_checks, run_checks, CheckReport, DEFAULT_INSTANCES};

use crate::tensor::{NoGradGuard, Tensor};

/// Spec'd step for central differences.
pub const FD_STEP: f64 = 1e-5;

/// Relative error with a unit floor: `|a−b| / max(1, |a|, |b|)`. Behaves as
/// a relative error for O(1)-or-larger gradients and as an absolute error
/// near zero, where a pure ratio would explode on finite-difference noise.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Worst [`rel_err`] between the autodiff gradient and central finite
/// differences of `forward`, taken over every element of every tensor in
/// `checked`.
///
/// `forward` must rebuild its graph from the tensors' *current* buffers on
/// every call: perturbations go through [`Tensor::set_data`]. `grad_scale`
/// multiplies the analytic gradient before comparison; anything other than
/// 1.0 simulates a broken backward rule (used to prove the checker catches
/// one).
pub fn max_rel_err_params(
    forward: &dyn Fn() -> Tensor<f64>,
    checked: &[Tensor<f64>],
    h: f64,
    grad_scale: f64,
) -> f64 {
    for p in checked {
        p.zero_grad();
        debug_assert!(p.requires_grad(), "checked tensors must require grad");
    }
    let loss = forward();
    loss.backward().expect("gradcheck forward must be differentiable");
    let analytic: Vec<Vec<f64>> = checked
        .iter()
        .map(|p| {
            p.grad()
                .map(|g| g.iter().map(|v| v * grad_scale).collect())
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();

    let value = || -> f64 {
        let _ng = NoGradGuard::new();
        forward().item()
    };

    let mut worst = 0.0f64;
    for (p, grads) in checked.iter().zip(&analytic) {
        let base = p.to_vec();
        for j in 0..base.len() {
            let mut bumped = base.clone();
            bumped[j] = base[j] + h;
            p.set_data(bumped);
            let fp = value();
            let mut bumped = base.clone();
            bumped[j] = base[j] - h;
            p.set_data(bumped);
            let fm = value();
            p.set_data(base.clone());
            let fd = (fp - fm) / (2.0 * h);
            worst = worst.max(rel_err(grads[j], fd));
        }
    }
    worst
}
