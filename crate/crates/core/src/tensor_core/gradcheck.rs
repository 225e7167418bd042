//! Central finite-difference verification of tape gradients.

use std::fmt;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Maximum allowed relative error.
    pub tol: f64,
    /// Lower bound on the relative-error denominator, so that gradients
    /// which are zero up to rounding are compared absolutely.
    pub floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-5,
            tol: 1e-4,
            floor: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tol: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol)
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for p in &self.params {
            let verdict = if p.max_rel_error <= self.tol { "ok" } else { "FAIL" };
            writeln!(
                f,
                "  {:<28} max_rel_err={:.3e} at [{}] (analytic {:.6e}, numeric {:.6e}) {}",
                p.name, p.max_rel_error, p.worst_index, p.analytic, p.numeric, verdict
            )?;
        }
        Ok(())
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, params: &[(String, Tensor)]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let value = tape.value(out);
    if value.len() != 1 {
        return Err(Error::Dimension(format!(
            "gradient check needs a scalar function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.item())
}

/// Compares the tape gradient of `f` with central differences
/// `(f(p+h) - f(p-h)) / 2h` for every element of every parameter.
pub fn grad_check<F>(f: F, params: &[(String, Tensor)], cfg: GradCheckConfig) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| tape.leaf(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    if !tape.value(out).is_finite() {
        return Err(Error::Numerical("function is not finite at the base point".into()));
    }
    let grads = tape.backward(out)?;

    let mut work: Vec<(String, Tensor)> = params.to_vec();
    let mut checks = Vec::with_capacity(params.len());
    for (pi, &var) in vars.iter().enumerate() {
        let analytic = grads.get_or_zeros(var, &params[pi].1);
        let mut check = ParamCheck {
            name: params[pi].0.clone(),
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for i in 0..params[pi].1.len() {
            let orig = params[pi].1.data()[i];
            work[pi].1.data_mut()[i] = orig + cfg.h;
            let plus = evaluate(&f, &work)?;
            work[pi].1.data_mut()[i] = orig - cfg.h;
            let minus = evaluate(&f, &work)?;
            work[pi].1.data_mut()[i] = orig;
            if !plus.is_finite() || !minus.is_finite() {
                return Err(Error::Numerical(format!(
                    "function is not finite when perturbing {}[{i}]",
                    params[pi].0
                )));
            }
            let numeric = (plus - minus) / (2.0 * cfg.h);
            let a = analytic.data()[i];
            let err = relative_error(a, numeric, cfg.floor);
            if err > check.max_rel_error || i == 0 {
                check.max_rel_error = err;
                check.worst_index = i;
                check.analytic = a;
                check.numeric = numeric;
            }
        }
        checks.push(check);
    }
    Ok(GradCheckReport {
        tol: cfg.tol,
        params: checks,
    })
}
