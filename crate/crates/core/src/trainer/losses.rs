use crate::alignment::AlignmentSpec;
use crate::error::{Error, Result};
use crate::tensor::{Graph, Var};

/// Mean over positions of `−log softmax(logits)[target]`.
pub fn loss_nll(g: &mut Graph, logits: Var, targets: &[u32]) -> Result<Var> {
    let shape = g.value(logits).shape().to_vec();
    if g.value(logits).rows() != targets.len() || shape.len() < 2 {
        return Err(Error::Shape {
            op: "loss_nll",
            lhs: shape,
            rhs: vec![targets.len()],
        });
    }
    let logp = g.log_softmax(logits)?;
    let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let picked = g.pick_per_row(logp, &idx)?;
    let mean = g.mean(picked)?;
    g.scale(mean, -1.0)
}

/// Mean over positions of `−Σ_v P_T(v) log P_M(v)` with both sides softened
/// by `temperature`; the teacher side carries no gradient.
pub fn loss_rkd(g: &mut Graph, student_logits: Var, teacher_logits: Var, temperature: f64) -> Result<Var> {
    let (ss, ts) = (
        g.value(student_logits).shape().to_vec(),
        g.value(teacher_logits).shape().to_vec(),
    );
    if ss != ts || ss.is_empty() {
        return Err(Error::Shape {
            op: "loss_rkd",
            lhs: ss,
            rhs: ts,
        });
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {temperature}")));
    }
    let t = g.detach(teacher_logits)?;
    let (s, t) = if temperature == 1.0 {
        (student_logits, t)
    } else {
        (g.scale(student_logits, 1.0 / temperature)?, g.scale(t, 1.0 / temperature)?)
    };
    let p_t = g.row_softmax(t)?;
    let logp_m = g.log_softmax(s)?;
    let prod = g.mul(p_t, logp_m)?;
    let per_pos = g.sum_last_dim(prod)?;
    let mean = g.mean(per_pos)?;
    g.scale(mean, -1.0)
}

/// `nll + λ(step)·proj`; exactly `nll` when the weight is zero or no projection term exists.
pub fn loss_total(g: &mut Graph, nll: Var, proj: Option<Var>, step: u64, spec: &AlignmentSpec) -> Result<Var> {
    let lambda = spec.lambda_at(step);
    match proj {
        Some(p) if lambda != 0.0 => {
            let weighted = g.scale(p, lambda)?;
            g.add(nll, weighted)
        }
        _ => Ok(nll),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn scalar(g: &mut Graph, v: f64) -> Var {
        g.constant(Tensor::scalar(v))
    }

    #[test]
    fn nll_examples() {
        let mut g = Graph::new();
        let uniform = g.constant(Tensor::zeros(&[1, 3, 16]));
        let l = loss_nll(&mut g, uniform, &[0, 5, 15]).unwrap();
        assert!((g.value(l).item() - 16f64.ln()).abs() < 1e-12);
        let half = g.constant(Tensor::new(vec![1, 1, 2], vec![0.0, 0.0]).unwrap());
        let l = loss_nll(&mut g, half, &[1]).unwrap();
        assert!((g.value(l).item() - 2f64.ln()).abs() < 1e-12);
        let sure = g.constant(Tensor::new(vec![2, 2], vec![50.0, 0.0, 0.0, 50.0]).unwrap());
        let l = loss_nll(&mut g, sure, &[0, 1]).unwrap();
        assert!(g.value(l).item() < 1e-20);
        assert!(loss_nll(&mut g, sure, &[0]).is_err());
    }

    #[test]
    fn rkd_examples() {
        let mut g = Graph::new();
        let logits = Tensor::new(vec![1, 2, 3], vec![0.2, -1.0, 0.7, 1.5, 0.0, -0.3]).unwrap();
        let a = g.constant(logits.clone());
        let b = g.constant(logits.clone());
        let l = loss_rkd(&mut g, a, b, 1.0).unwrap();
        let mut entropy = 0.0;
        for row in logits.data().chunks(3) {
            let z: f64 = row.iter().map(|x| x.exp()).sum();
            entropy -= row.iter().map(|x| x.exp() / z * (x.exp() / z).ln()).sum::<f64>();
        }
        assert!((g.value(l).item() - entropy / 2.0).abs() < 1e-12);

        let u = g.constant(Tensor::zeros(&[2, 4]));
        let u2 = g.constant(Tensor::zeros(&[2, 4]));
        let l = loss_rkd(&mut g, u, u2, 1.0).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        // A very peaked teacher reduces to NLL on its argmax.
        let student = g.constant(Tensor::new(vec![1, 3], vec![0.3, 0.1, -0.4]).unwrap());
        let teacher = g.constant(Tensor::new(vec![1, 3], vec![0.0, 800.0, 0.0]).unwrap());
        let kd = loss_rkd(&mut g, student, teacher, 1.0).unwrap();
        let nll = loss_nll(&mut g, student, &[1]).unwrap();
        assert!((g.value(kd).item() - g.value(nll).item()).abs() < 1e-12);
        assert!(loss_rkd(&mut g, student, u, 1.0).is_err());
    }

    #[test]
    fn total_examples() {
        let spec = AlignmentSpec {
            lambda0: 0.1,
            s_stop: 1500,
            ..AlignmentSpec::default()
        };
        let mut g = Graph::new();
        let nll = scalar(&mut g, 2.0);
        let proj = scalar(&mut g, -0.5);
        let t = loss_total(&mut g, nll, Some(proj), 0, &spec).unwrap();
        assert!((g.value(t).item() - 1.95).abs() < 1e-15);
        let t = loss_total(&mut g, nll, Some(proj), 1500, &spec).unwrap();
        assert_eq!(t, nll);
        let zero = AlignmentSpec {
            lambda0: 0.0,
            ..spec
        };
        for s in [0, 10, 2000] {
            assert_eq!(loss_total(&mut g, nll, Some(proj), s, &zero).unwrap(), nll);
        }
    }
}
