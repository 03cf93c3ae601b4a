//! Central-difference verification of the analytic backward rules, run in
//! 64-bit.

use super::tape::{Bound, Tape, Var};
use super::tensor::{ParamId, ParamStore};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub eps: f64,
    pub tol: f64,
    /// Check at most this many evenly spaced entries per parameter.
    pub max_entries_per_param: Option<usize>,
    pub corrupt_backward: bool,
    /// How many offenders to keep in the report.
    pub report_worst: usize,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            eps: 1e-3,
            tol: 1e-4,
            max_entries_per_param: None,
            corrupt_backward: false,
            report_worst: 5,
        }
    }
}

impl GradcheckConfig {
    pub fn new(eps: f64, tol: f64) -> Self {
        GradcheckConfig {
            eps,
            tol,
            ..Default::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Offender {
    pub param: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub checked: usize,
    pub max_error: f64,
    pub tol: f64,
    /// Largest errors first.
    pub worst: Vec<Offender>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_error <= self.tol
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "{} entries, max error {:.3e} (tol {:.1e}) {}",
            self.checked,
            self.max_error,
            self.tol,
            if self.passed() { "PASS" } else { "FAIL" }
        )?;
        for o in &self.worst {
            write!(
                f,
                "\n  {}[{}]: analytic {:.6e} numeric {:.6e} err {:.3e}",
                o.param, o.index, o.analytic, o.numeric, o.error
            )?;
        }
        Ok(())
    }
}

fn evaluate<F>(f: &F, params: &ParamStore<f64>) -> Result<f64>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.set_check_finite(true);
    let bound = tape.bind(params);
    let loss = f(&mut tape, &bound)?;
    let v = tape.value(loss);
    if v.len() != 1 {
        return Err(Error::Graph(format!(
            "gradcheck objective must be scalar, got {} values",
            v.len()
        )));
    }
    Ok(v[0])
}

/// Compares `d f / d theta` from the tape against central differences,
/// scoring each entry by `|analytic - numeric| / max(1, |numeric|)`.
pub fn gradcheck<F>(
    f: F,
    params: &ParamStore<f64>,
    cfg: &GradcheckConfig,
) -> Result<GradcheckReport>
where
    F: Fn(&mut Tape<f64>, &Bound) -> Result<Var>,
{
    let mut tape = Tape::new();
    tape.set_check_finite(true);
    tape.set_corrupt_backward(cfg.corrupt_backward);
    let bound = tape.bind(params);
    let loss = f(&mut tape, &bound)?;
    let grads = tape.backward(loss)?;

    let mut work = params.clone();
    let mut offenders = Vec::new();
    let mut checked = 0;
    let mut max_error = 0.0f64;
    for pi in 0..params.len() {
        let id = ParamId(pi);
        let numel = params.get(id).tensor.numel();
        let zeros = vec![0.0; numel];
        let analytic = grads.get(bound.get(id)).unwrap_or(&zeros).to_vec();
        let stride = match cfg.max_entries_per_param {
            Some(m) if m > 0 && numel > m => numel.div_ceil(m),
            _ => 1,
        };
        for idx in (0..numel).step_by(stride) {
            let orig = work.get(id).tensor.data()[idx];
            work.get_mut(id).tensor.data_mut()[idx] = orig + cfg.eps;
            let plus = evaluate(&f, &work)?;
            work.get_mut(id).tensor.data_mut()[idx] = orig - cfg.eps;
            let minus = evaluate(&f, &work)?;
            work.get_mut(id).tensor.data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let error = (analytic[idx] - numeric).abs() / numeric.abs().max(1.0);
            if !error.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient for {}[{idx}]",
                    params.get(id).name
                )));
            }
            checked += 1;
            max_error = max_error.max(error);
            offenders.push(Offender {
                param: params.get(id).name.clone(),
                index: idx,
                analytic: analytic[idx],
                numeric,
                error,
            });
        }
    }
    offenders.sort_by(|a, b| b.error.total_cmp(&a.error));
    offenders.truncate(cfg.report_worst);
    Ok(GradcheckReport {
        checked,
        max_error,
        tol: cfg.tol,
        worst: offenders,
    })
}
