//! Central finite-difference validation of autodiff gradients.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

fn eval_scalar<F>(f: &F, params: &[Tensor], trainable: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
        .collect();
    let out = f(&mut g, &vars)?;
    let value = g.value(out);
    if value.len() != 1 {
        return Err(Error::NotScalar(value.shape().to_vec()));
    }
    if !value.item().is_finite() {
        return Err(Error::NonFinite { op: "grad_check" });
    }
    Ok((g, vars, out))
}

/// Largest `|autodiff − central difference| / max(1, |central difference|)`
/// over every entry of every tensor in `params`.
pub fn grad_check<F>(f: F, params: &[Tensor], fd_step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(fd_step > 0.0) {
        return Err(Error::invalid("fd_step must be positive"));
    }
    let (g, vars, out) = eval_scalar(&f, params, true)?;
    let grads = g.backward(out)?;
    let analytic: Vec<Tensor> = vars.iter().map(|&v| grads.get(v)).collect();
    drop(g);

    let mut work = params.to_vec();
    let mut worst = 0.0f64;
    for (pi, param) in params.iter().enumerate() {
        for idx in 0..param.len() {
            let orig = param.data()[idx];
            work[pi].data_mut()[idx] = orig + fd_step;
            let (gp, _, op) = eval_scalar(&f, &work, false)?;
            let plus = gp.value(op).item();
            work[pi].data_mut()[idx] = orig - fd_step;
            let (gm, _, om) = eval_scalar(&f, &work, false)?;
            let minus = gm.value(om).item();
            work[pi].data_mut()[idx] = orig;
            let numeric = (plus - minus) / (2.0 * fd_step);
            let err = (analytic[pi].data()[idx] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}
