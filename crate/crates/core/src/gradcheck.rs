//! Central finite-difference oracle for validating analytic gradients.

use std::fmt;

use crate::{Error, Parameters, Result, Tensor};

pub const DEFAULT_EPS: f64 = 1e-5;
pub const DEFAULT_REL_TOL: f64 = 1e-4;
pub const DEFAULT_ABS_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub name: String,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub pass: bool,
}

impl fmt::Display for GradReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "[{}] {:<32} max_abs={:.3e} max_rel={:.3e} worst={}",
            if self.pass { "PASS" } else { "FAIL" },
            self.name,
            self.max_abs_err,
            self.max_rel_err,
            self.worst_index
        )
    }
}

/// `g[i] = (f(x + eps·e_i) − f(x − eps·e_i)) / (2·eps)` for every flat index.
pub fn finite_diff(f: impl Fn(&Tensor) -> f64, x: &Tensor, eps: f64) -> Result<Tensor> {
    if !(eps > 0.0) {
        return Err(Error::param(format!("eps must be positive, got {eps}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + eps;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - eps;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("finite_diff probe at index {i}")));
        }
        grad.push((plus - minus) / (2.0 * eps));
    }
    Tensor::new(x.dims().to_vec(), grad)
}

/// Compares analytic and numeric gradients elementwise.
///
/// Relative error is `|a − n| / max(|a|, |n|, abs_floor)`; the report passes
/// when the largest relative error is below `rel_tol`.
pub fn check(
    name: &str,
    analytic: &Tensor,
    numeric: &Tensor,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<GradReport> {
    if !analytic.same_dims(numeric) {
        return Err(Error::shape(format!(
            "gradcheck {name}: analytic {:?} vs numeric {:?}",
            analytic.dims(),
            numeric.dims()
        )));
    }
    let mut max_abs_err = 0.0f64;
    let mut max_rel_err = 0.0f64;
    let mut worst_index = 0;
    for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
        let abs = (a - n).abs();
        let rel = abs / a.abs().max(n.abs()).max(abs_floor);
        max_abs_err = max_abs_err.max(abs);
        if rel > max_rel_err {
            max_rel_err = rel;
            worst_index = i;
        }
    }
    Ok(GradReport {
        name: name.to_string(),
        max_abs_err,
        max_rel_err,
        worst_index,
        pass: max_rel_err < rel_tol,
    })
}

/// Checks every tensor of a parameter set against finite differences of `loss`.
///
/// `grads` must list the same names in the same order as `params`.
pub fn check_parameters<P: Parameters + Clone>(
    prefix: &str,
    params: &P,
    grads: &P,
    loss: impl Fn(&P) -> f64,
    eps: f64,
    rel_tol: f64,
    abs_floor: f64,
) -> Result<Vec<GradReport>> {
    let named = params.named();
    let analytic = grads.named();
    let mut reports = Vec::with_capacity(named.len());
    for (k, ((name, value), (_, grad))) in named.iter().zip(&analytic).enumerate() {
        let numeric = finite_diff(
            |t| {
                let mut probe = params.clone();
                let mut slots = probe.named_mut();
                slots[k].1.data_mut().copy_from_slice(t.data());
                drop(slots);
                loss(&probe)
            },
            value,
            eps,
        )?;
        let label = if prefix.is_empty() {
            name.clone()
        } else {
            format!("{prefix}.{name}")
        };
        reports.push(check(&label, grad, &numeric, rel_tol, abs_floor)?);
    }
    Ok(reports)
}
