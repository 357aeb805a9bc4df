//! Central-difference gradient checking.
//!
//! The function under test is rebuilt from scratch on a fresh [`Graph`] for
//! every evaluation, so the numerical side never touches a backward rule.

use crate::error::{FgdError, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
pub struct GradcheckConfig {
    pub step: f64,
    pub rel_tol: f64,
    /// Denominator floor of the relative error, so that two gradients that
    /// are both ~0 compare as equal instead of dividing noise by noise.
    pub abs_floor: f64,
}

impl GradcheckConfig {
    pub fn new(step: f64, rel_tol: f64) -> Self {
        GradcheckConfig { step, rel_tol, abs_floor: 1e-6 }
    }
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig::new(1e-4, 1e-4)
    }
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub max_rel_error: f64,
    /// `(input index, element index)` of the worst element.
    pub worst: Option<(usize, usize)>,
    pub analytic_at_worst: f64,
    pub numeric_at_worst: f64,
    pub elements_checked: usize,
    pub rel_tol: f64,
    pub passed: bool,
}

/// Relative error used throughout: `|a − n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `backward` against central differences of `f` for every
/// element of every input.
///
/// `f` receives a fresh graph plus the inputs bound via [`Graph::input`] and
/// must return a scalar node.
pub fn gradcheck<F>(f: F, inputs: &[Tensor], cfg: GradcheckConfig) -> Result<GradcheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(cfg.step > 0.0) {
        return Err(FgdError::param(format!("gradcheck step must be positive, got {}", cfg.step)));
    }
    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out);
        if v.numel() != 1 {
            return Err(FgdError::Contract("gradcheck function must return a scalar".into()));
        }
        let v = v.item();
        if !v.is_finite() {
            return Err(FgdError::Oracle(format!("function value is not finite ({v})")));
        }
        Ok(v)
    };

    let analytic: Vec<Vec<f64>> = {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        if !g.value(out).item().is_finite() {
            return Err(FgdError::Oracle("function value is not finite".into()));
        }
        let grads = g.backward(out)?;
        vars.iter()
            .zip(inputs)
            .map(|(&v, t)| grads.wrt(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect()
    };

    let mut report = GradcheckReport {
        max_rel_error: 0.0,
        worst: None,
        analytic_at_worst: 0.0,
        numeric_at_worst: 0.0,
        elements_checked: 0,
        rel_tol: cfg.rel_tol,
        passed: true,
    };
    let mut xs = inputs.to_vec();
    for (ti, t) in inputs.iter().enumerate() {
        for ei in 0..t.numel() {
            let orig = t.data()[ei];
            xs[ti].data_mut()[ei] = orig + cfg.step;
            let up = eval(&xs)?;
            xs[ti].data_mut()[ei] = orig - cfg.step;
            let down = eval(&xs)?;
            xs[ti].data_mut()[ei] = orig;
            let numeric = (up - down) / (2.0 * cfg.step);
            let a = analytic[ti][ei];
            let err = relative_error(a, numeric, cfg.abs_floor);
            report.elements_checked += 1;
            if report.worst.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst = Some((ti, ei));
                report.analytic_at_worst = a;
                report.numeric_at_worst = numeric;
            }
        }
    }
    report.passed = report.max_rel_error <= cfg.rel_tol;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::OpKind;

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::from_slice(&[1.0, 2.0]);
        let r = gradcheck(
            |g, v| {
                let s = g.square(v[0]);
                Ok(g.sum_all(s))
            },
            &[x],
            GradcheckConfig::new(1e-4, 1e-5),
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.elements_checked, 2);
    }

    #[test]
    fn constant_function_passes() {
        let x = Tensor::from_slice(&[1.0, -2.0, 0.5]);
        let r = gradcheck(
            |g, _| Ok(g.constant(Tensor::scalar(4.0))),
            &[x],
            GradcheckConfig::default(),
        )
        .unwrap();
        assert!(r.passed);
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn corrupted_backward_rule_fails() {
        let x = Tensor::from_slice(&[1.0, 2.0]);
        let r = gradcheck(
            |g, v| {
                g.inject_backward_fault(Some(OpKind::Square));
                let s = g.square(v[0]);
                Ok(g.sum_all(s))
            },
            &[x],
            GradcheckConfig::default(),
        )
        .unwrap();
        assert!(!r.passed);
        assert!(r.max_rel_error > 0.3);
    }

    #[test]
    fn non_finite_value_is_oracle_error() {
        let x = Tensor::from_slice(&[1.0]);
        let r = gradcheck(
            |g, v| Ok(g.scale(v[0], f64::INFINITY)),
            &[x],
            GradcheckConfig::default(),
        );
        assert!(matches!(r, Err(FgdError::Oracle(_))));
    }

    #[test]
    fn non_positive_step_is_rejected() {
        let x = Tensor::from_slice(&[1.0]);
        let r = gradcheck(|_, v| Ok(v[0]), &[x], GradcheckConfig::new(0.0, 1e-4));
        assert!(r.is_err());
    }
}
