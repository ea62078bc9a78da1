use super::{Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};

pub const DEFAULT_EPS: f64 = 1e-5;

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

/// Outcome of a finite-difference check for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// Compares autodiff gradients of the scalar computation `f` against central
/// differences, coordinate by coordinate, for every tensor in `params`.
///
/// `f` receives a fresh inference-mode graph and the parameters registered as
/// leaves (in order) and must return a single-element node. It must be
/// deterministic.
pub fn grad_check<S, F>(params: &[Tensor<S>], eps: f64, f: F) -> Result<Vec<ParamCheck>>
where
    S: Scalar,
    F: Fn(&Graph<S>, &[Var]) -> Result<Var>,
{
    let analytic = {
        let g = Graph::new();
        let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
        g.backward_checked(&f, &vars)?;
        vars.iter()
            .map(|&v| g.value(v).grad().expect("param leaf has grad").to_vec())
            .collect::<Vec<_>>()
    };

    let eval = |tensors: &[Tensor<S>]| -> Result<f64> {
        let g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|p| g.constant(p.clone())).collect();
        let out = f(&g, &vars)?;
        let v = g.scalar(out).as_f64();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(v)
    };

    let mut work: Vec<Tensor<S>> = params.to_vec();
    let step = S::lit(eps);
    let mut report = Vec::with_capacity(params.len());
    for (pi, grads) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            max_rel_error: 0.0,
            worst_index: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for (i, g) in grads.iter().enumerate() {
            let orig = work[pi].data()[i];
            work[pi].data_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[pi].data_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[pi].data_mut()[i] = orig;

            let numeric = (plus - minus) / (2.0 * eps);
            let a = g.as_f64();
            let err = relative_error(a, numeric);
            if err > check.max_rel_error || i == 0 {
                check = ParamCheck {
                    max_rel_error: err,
                    worst_index: i,
                    analytic: a,
                    numeric,
                };
            }
        }
        report.push(check);
    }
    Ok(report)
}

impl<S: Scalar> Graph<S> {
    fn backward_checked<F>(&self, f: &F, vars: &[Var]) -> Result<Var>
    where
        F: Fn(&Graph<S>, &[Var]) -> Result<Var>,
    {
        let out = f(self, vars)?;
        if !self.scalar(out).is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        self.backward(out)?;
        Ok(out)
    }
}
