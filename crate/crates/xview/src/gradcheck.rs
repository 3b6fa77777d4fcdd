//! Central-finite-difference gradient checking.
//!
//! The reference gradient of a scalar-valued computation is obtained by
//! perturbing each input element by ±h and differencing the two forward
//! evaluations; the analytic gradient from [`Graph::backward`] must agree.
//! Discrepancy is measured per element as |a − n| / max(1, |a|, |n|), so it
//! is relative for large gradients and absolute near zero.

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::params::{ParamStore, Session};
use crate::tensor::Tensor;

/// Outcome of one gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_discrepancy: f64,
    /// (input index, element index) of the worst element.
    pub worst: (usize, usize),
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_discrepancy <= self.tol
    }
}

impl std::fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "gradcheck {}: max discrepancy {:.3e} (tol {:.1e}) at input {} elem {}: analytic {:.9e} vs numeric {:.9e}",
            if self.passed() { "ok" } else { "FAILED" },
            self.max_discrepancy,
            self.tol,
            self.worst.0,
            self.worst.1,
            self.analytic_at_worst,
            self.numeric_at_worst,
        )
    }
}

/// Check the gradient of `build` w.r.t. every element of every input.
///
/// `build` must construct the computation on the given graph from leaves
/// provided in the same order as `inputs` and return a scalar output var.
pub fn grad_check(
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    build: impl Fn(&Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| g.leaf(t.clone(), false))
            .collect::<Result<_>>()?;
        let out = build(&g, &vars)?;
        Ok(g.value(out).item())
    };

    // analytic pass
    let g = Graph::new();
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| g.leaf(t.clone(), true))
        .collect::<Result<_>>()?;
    let out = build(&g, &vars)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();

    let mut report = GradCheckReport {
        max_discrepancy: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tol,
    };
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[ti].data_mut()[e] = orig + h;
            let f_plus = eval(&work)?;
            work[ti].data_mut()[e] = orig - h;
            let f_minus = eval(&work)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            let a = analytic[ti].data()[e];
            let denom = 1.0f64.max(a.abs()).max(numeric.abs());
            let disc = (a - numeric).abs() / denom;
            if disc > report.max_discrepancy {
                report.max_discrepancy = disc;
                report.worst = (ti, e);
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    Ok(report)
}

/// Check gradients of a module forward pass w.r.t. its tensor inputs and,
/// when `check_params` is set, every parameter element in the store.
///
/// `build` receives a session over the (possibly perturbed) store plus a
/// leaf var per input, and must return a scalar.
pub fn grad_check_model(
    store: &ParamStore,
    inputs: &[Tensor],
    h: f64,
    tol: f64,
    check_params: bool,
    build: impl Fn(&Session, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    let eval = |store: &ParamStore, tensors: &[Tensor]| -> Result<f64> {
        let s = Session::frozen(store);
        let vars: Vec<Var> = tensors
            .iter()
            .map(|t| s.g.leaf(t.clone(), false))
            .collect::<Result<_>>()?;
        let out = build(&s, &vars)?;
        Ok(s.g.value(out).item())
    };

    // analytic pass over inputs and parameters together
    let s = Session::new(store);
    let vars: Vec<Var> = inputs
        .iter()
        .map(|t| s.g.leaf(t.clone(), true))
        .collect::<Result<_>>()?;
    let out = build(&s, &vars)?;
    let input_grads: Vec<Tensor> = {
        let grads = s.g.backward(out)?;
        vars.iter().map(|&v| grads.get(v)).collect()
    };
    let param_grads = s.grads(out)?;

    let mut report = GradCheckReport {
        max_discrepancy: 0.0,
        worst: (0, 0),
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        tol,
    };
    let consider = |slot: usize, elem: usize, a: f64, numeric: f64, report: &mut GradCheckReport| {
        let denom = 1.0f64.max(a.abs()).max(numeric.abs());
        let disc = (a - numeric).abs() / denom;
        if disc > report.max_discrepancy {
            report.max_discrepancy = disc;
            report.worst = (slot, elem);
            report.analytic_at_worst = a;
            report.numeric_at_worst = numeric;
        }
    };

    let mut work: Vec<Tensor> = inputs.to_vec();
    for (ti, input) in inputs.iter().enumerate() {
        for e in 0..input.numel() {
            let orig = input.data()[e];
            work[ti].data_mut()[e] = orig + h;
            let f_plus = eval(store, &work)?;
            work[ti].data_mut()[e] = orig - h;
            let f_minus = eval(store, &work)?;
            work[ti].data_mut()[e] = orig;
            let numeric = (f_plus - f_minus) / (2.0 * h);
            consider(ti, e, input_grads[ti].data()[e], numeric, &mut report);
        }
    }

    if check_params {
        let mut perturbed = store.clone();
        for pi in 0..store.len() {
            let id = store.id_at(pi);
            let numel = store.get(id).numel();
            for e in 0..numel {
                let orig = store.get(id).data()[e];
                perturbed.get_mut(id).data_mut()[e] = orig + h;
                let f_plus = eval(&perturbed, inputs)?;
                perturbed.get_mut(id).data_mut()[e] = orig - h;
                let f_minus = eval(&perturbed, inputs)?;
                perturbed.get_mut(id).data_mut()[e] = orig;
                let numeric = (f_plus - f_minus) / (2.0 * h);
                consider(inputs.len() + pi, e, param_grads[pi].data()[e], numeric, &mut report);
            }
        }
    }
    Ok(report)
}

/// Default step and tolerance for double-precision checks.
pub const FD_STEP: f64 = 1e-5;
pub const FD_TOL: f64 = 1e-6;
