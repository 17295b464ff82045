use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::Params;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `0` disables clipping.
    pub clip_norm: f64,
}

/// First/second moments per parameter and the number of completed updates.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl OptimizerState {
    pub fn new(params: &Params) -> Self {
        let zeros = |p: &Tensor| Tensor::zeros(p.shape());
        Self {
            step: 0,
            m: params.tensors().iter().map(zeros).collect(),
            v: params.tensors().iter().map(zeros).collect(),
        }
    }
}

pub fn global_norm(grads: &[Tensor]) -> f64 {
    grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt()
}

/// Scales `grads` in place so their joint L2 norm is at most `max_norm`;
/// returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
    }
    norm
}

/// One AdamW update: clip, decoupled decay, then the bias-corrected Adam step.
///
/// `step` is only used to name the offending parameter in errors.
pub fn adamw_update(
    params: &mut Params,
    grads: &mut [Tensor],
    opt: &mut OptimizerState,
    lr: f64,
    cfg: &AdamWConfig,
    step: u64,
) -> Result<f64> {
    if grads.len() != params.len() || opt.m.len() != params.len() {
        return Err(Error::invalid("gradient, moment and parameter lists differ in length"));
    }
    for (name, g) in params.names().iter().zip(grads.iter()) {
        if !g.all_finite() {
            return Err(Error::NonFiniteGradient {
                param: name.clone(),
                step,
            });
        }
    }
    let norm = clip_global_norm(grads, cfg.clip_norm);
    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (((p, g), m), v) in params
        .tensors_mut()
        .iter_mut()
        .zip(grads.iter())
        .zip(opt.m.iter_mut())
        .zip(opt.v.iter_mut())
    {
        if p.shape() != g.shape() {
            return Err(Error::Shape {
                op: "adamw_update",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let decay = lr * cfg.weight_decay;
        for (((pi, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut().iter_mut())
            .zip(v.data_mut().iter_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * gi;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * gi * gi;
            *pi -= decay * *pi;
            *pi -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + cfg.eps);
        }
    }
    Ok(norm)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(wd: f64) -> AdamWConfig {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: wd,
            clip_norm: 1.0,
        }
    }

    fn single(v: f64) -> Params {
        let mut p = Params::new();
        p.push("w", Tensor::vector(vec![v]));
        p
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut p = single(0.7);
        let mut opt = OptimizerState::new(&p);
        let mut g = vec![Tensor::vector(vec![0.0])];
        adamw_update(&mut p, &mut g, &mut opt, 0.1, &cfg(0.0), 0).unwrap();
        assert_eq!(p.tensors()[0].data(), &[0.7]);
        assert_eq!(opt.step, 1);
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut g = vec![Tensor::vector(vec![6.0, 0.0]), Tensor::vector(vec![8.0])];
        assert_eq!(clip_global_norm(&mut g, 1.0), 10.0);
        assert!((global_norm(&g) - 1.0).abs() < 1e-15);
        let mut small = vec![Tensor::vector(vec![0.3])];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small[0].data(), &[0.3]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = single(1.0);
        let mut opt = OptimizerState::new(&p);
        let mut g = vec![Tensor::vector(vec![f64::NAN])];
        let err = adamw_update(&mut p, &mut g, &mut opt, 0.1, &cfg(0.0), 17).unwrap_err();
        assert_eq!(err.to_string(), "non-finite gradient for parameter `w` at step 17");
    }
}
