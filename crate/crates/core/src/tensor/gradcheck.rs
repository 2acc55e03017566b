//! Central finite-difference verification of [`Graph::backward`].

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Worst disagreement found for one parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamCheck {
    pub index: usize,
    pub worst_rel_error: f64,
    /// Flat entry index where the worst error occurred.
    pub worst_entry: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Max over all entries of `|a - n| / max(1, |a|, |n|)`.
    pub max_rel_error: f64,
    pub per_param: Vec<ParamCheck>,
}

impl GradCheckReport {
    /// Parameter tensor holding the worst entry.
    pub fn worst(&self) -> Option<&ParamCheck> {
        self.per_param
            .iter()
            .max_by(|a, b| a.worst_rel_error.total_cmp(&b.worst_rel_error))
    }
}

fn eval(params: &[Tensor], f: &impl Fn(&mut Graph, &[Var]) -> Result<Var>) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.constant(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    let v = g.value(root).item();
    if !v.is_finite() {
        return Err(Error::Numeric(format!("function value {v} is not finite")));
    }
    Ok(v)
}

/// Compare the analytic gradient of the scalar `f` with central differences
/// `(f(x+h) - f(x-h)) / 2h` for every entry of every parameter.
///
/// `f` receives a fresh graph and one variable per parameter (in order) and
/// must return a one-element root.
pub fn gradient_check(
    params: &[Tensor],
    step: f64,
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
) -> Result<GradCheckReport> {
    if !(step > 0.0 && step.is_finite()) {
        return Err(Error::config(format!("gradient-check step must be positive, got {step}")));
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.variable(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    if !g.value(root).item().is_finite() {
        return Err(Error::Numeric("function value is not finite".into()));
    }
    let mut grads = g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.dims())))
        .collect();
    drop(g);

    let mut work = params.to_vec();
    let mut per_param = Vec::with_capacity(params.len());
    for (pi, a) in analytic.iter().enumerate() {
        let mut check = ParamCheck {
            index: pi,
            worst_rel_error: 0.0,
            worst_entry: 0,
            analytic: 0.0,
            numeric: 0.0,
        };
        for e in 0..a.len() {
            let orig = work[pi].data()[e];
            work[pi].data_mut()[e] = orig + step;
            let fp = eval(&work, &f)?;
            work[pi].data_mut()[e] = orig - step;
            let fm = eval(&work, &f)?;
            work[pi].data_mut()[e] = orig;
            let num = (fp - fm) / (2.0 * step);
            let an = a.data()[e];
            let rel = (an - num).abs() / 1f64.max(an.abs()).max(num.abs());
            if rel > check.worst_rel_error || e == 0 {
                check = ParamCheck {
                    index: pi,
                    worst_rel_error: rel,
                    worst_entry: e,
                    analytic: an,
                    numeric: num,
                };
            }
        }
        per_param.push(check);
    }
    let max_rel_error = per_param
        .iter()
        .map(|c| c.worst_rel_error)
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        max_rel_error,
        per_param,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches() {
        let x = Tensor::new(&[4], vec![0.3, -0.7, 1.1, 0.05]).unwrap();
        let r = gradient_check(&[x], 1e-5, |g, v| {
            let sq = g.mul(v[0], v[0])?;
            Ok(g.sum(sq))
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-7, "{r:?}");
    }

    #[test]
    fn constant_function_has_zero_gradients() {
        let x = Tensor::ones(&[3]);
        let r = gradient_check(&[x], 1e-5, |g, _| Ok(g.constant(Tensor::scalar(2.0)))).unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn non_finite_value_is_numeric_error() {
        let x = Tensor::ones(&[1]);
        let r = gradient_check(&[x], 1e-5, |g, v| Ok(g.scale(v[0], f64::INFINITY)));
        assert!(matches!(r, Err(Error::Numeric(_))));
    }

    #[test]
    #[cfg(debug_assertions)]
    fn debug_builds_record_first_non_finite_op() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::ones(&[2]));
        let y = g.scale(x, 2.0);
        assert_eq!(g.non_finite_node(), None);
        let z = g.scale(y, f64::INFINITY);
        let _ = g.scale(z, 1.0);
        assert_eq!(g.non_finite_node(), Some(z));
    }
}
