//! Central finite-difference gradient checking.
//!
//! The checker perturbs one scalar weight at a time and re-runs the caller's
//! forward closure, so it is independent of the backward implementation it
//! validates.

use crate::autograd::{Arr, Param, Var};

/// Central finite differences of a scalar loss w.r.t. every entry of `param`.
///
/// `loss` must re-read the parameter's current value on each call.
pub fn fd_loss(param: &Param, eps: f64, loss: &mut dyn FnMut() -> f64) -> Arr {
    let mut grad = Arr::zeros(param.value().raw_dim());
    let n = param.len();
    let slice = grad.as_slice_mut().expect("standard layout");
    for i in 0..n {
        param.nudge(i, eps);
        let plus = loss();
        param.nudge(i, -2.0 * eps);
        let minus = loss();
        param.nudge(i, eps);
        slice[i] = (plus - minus) / (2.0 * eps);
    }
    grad
}

/// Worst relative error between two gradient arrays, with an absolute floor
/// so that near-zero pairs do not blow up the ratio.
pub fn max_relative_error(analytic: &Arr, numeric: &Arr) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let mut worst = 0.0f64;
    for (&a, &n) in analytic.iter().zip(numeric.iter()) {
        let diff = (a - n).abs();
        if diff < 1e-8 {
            continue;
        }
        let rel = diff / (a.abs() + n.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    worst
}

/// Run backward once, then compare each listed parameter's accumulated
/// gradient against central finite differences. Panics with the offending
/// parameter name if any relative error exceeds `tol`.
pub fn check_param_grads<F: Fn() -> Var>(
    params: &[(&str, &std::rc::Rc<Param>)],
    forward: F,
    eps: f64,
    tol: f64,
) {
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = forward();
    loss.backward();
    for (name, p) in params {
        let analytic = p.grad().clone();
        let mut f = || forward().scalar();
        let numeric = fd_loss(p, eps, &mut f);
        let err = max_relative_error(&analytic, &numeric);
        assert!(
            err < tol,
            "gradient check failed for {name}: max relative error {err:.3e} (tol {tol:.1e})"
        );
    }
}

/// Same comparison but returns the worst error instead of panicking; used by
/// the acceptance suite to report margins.
pub fn worst_param_error<F: Fn() -> Var>(
    params: &[(&str, &std::rc::Rc<Param>)],
    forward: F,
    eps: f64,
) -> f64 {
    for (_, p) in params {
        p.zero_grad();
    }
    let loss = forward();
    loss.backward();
    let mut worst = 0.0f64;
    for (_, p) in params {
        let analytic = p.grad().clone();
        let mut f = || forward().scalar();
        let numeric = fd_loss(p, eps, &mut f);
        worst = worst.max(max_relative_error(&analytic, &numeric));
    }
    worst
}

/// Central finite difference of one scalar weight.
pub fn fd_single(param: &Param, flat_index: usize, eps: f64, loss: &mut dyn FnMut() -> f64) -> f64 {
    param.nudge(flat_index, eps);
    let plus = loss();
    param.nudge(flat_index, -2.0 * eps);
    let minus = loss();
    param.nudge(flat_index, eps);
    (plus - minus) / (2.0 * eps)
}

/// Compare analytic vs numeric gradients on selected scalar entries only;
/// returns the worst relative error. Suits large models where a full sweep
/// would be too slow.
pub fn worst_sampled_error<F: Fn() -> Var>(
    entries: &[(&str, &std::rc::Rc<Param>, usize)],
    forward: F,
    eps: f64,
) -> f64 {
    for (_, p, _) in entries {
        p.zero_grad();
    }
    let loss = forward();
    loss.backward();
    let mut worst = 0.0f64;
    for (name, p, idx) in entries {
        let analytic = p.grad().as_slice().expect("standard layout")[*idx];
        let mut f = || forward().scalar();
        let numeric = fd_single(p, *idx, eps, &mut f);
        let diff = (analytic - numeric).abs();
        if diff < 1e-8 {
            continue;
        }
        let rel = diff / (analytic.abs() + numeric.abs()).max(1e-8);
        if rel > worst {
            worst = rel;
        }
        let _ = name;
    }
    worst
}
