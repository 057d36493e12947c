use super::graph::{Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Max over all coordinates of `|analytic - numeric| / max(1, |analytic|, |numeric|)`.
    pub max_rel_err: f64,
    /// `(param index, coordinate)` of the worst coordinate.
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

fn evaluate<F>(params: &[Tensor], f: &mut F, with_grad: bool) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| g.leaf(p.clone().with_requires_grad(with_grad)))
        .collect();
    let root = f(&mut g, &vars)?;
    let value = g.value(root).item()?;
    if !with_grad {
        return Ok((value, Vec::new()));
    }
    g.backward(root)?;
    let grads = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| {
            g.grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    Ok((value, grads))
}

/// Compares reverse-mode gradients of `f` against central differences with step `eps`.
///
/// `f` receives fresh leaves for `params` (in order) and must return a scalar node.
pub fn grad_check<F>(params: &[Tensor], eps: f64, mut f: F) -> Result<GradCheckReport>
where
    F: FnMut(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-3) {
        return Err(Error::Contract(format!(
            "eps must lie in (0, 1e-3], got {eps}"
        )));
    }
    let (_, analytic) = evaluate(params, &mut f, true)?;
    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        coordinates: 0,
    };
    for (pi, grads) in analytic.iter().enumerate() {
        for (ci, &a) in grads.iter().enumerate() {
            let orig = work[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + eps;
            let (plus, _) = evaluate(&work, &mut f, false)?;
            work[pi].data_mut()[ci] = orig - eps;
            let (minus, _) = evaluate(&work, &mut f, false)?;
            work[pi].data_mut()[ci] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            if !a.is_finite() || !numeric.is_finite() {
                return Err(Error::NonFiniteGradient {
                    param: pi,
                    coord: ci,
                    analytic: a,
                    numeric,
                });
            }
            let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
            report.coordinates += 1;
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = rel;
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}
