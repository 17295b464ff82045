//! Finite-difference gradient suites over primitives, losses and whole models.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::{interpolate_to, AlignmentSpec, InterpolationPlan, LossKind, Reduction};
use crate::error::{Error, Result};
use crate::models::{Activation, DeepLinearNet, ModelConfig, TransformerModel};
use crate::tensor::gradcheck::grad_check;
use crate::tensor::{Graph, Primitive, Tensor, Var};
use crate::trainer::{loss_nll, loss_rkd, loss_total};

pub const GRADCHECK_THRESHOLD: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;
/// Random draws per primitive and per loss.
pub const SEEDS: u64 = 20;
const MODEL_SEEDS: u64 = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Primitives,
    Losses,
    Model,
}

impl FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "primitives" => Ok(Scope::Primitives),
            "losses" => Ok(Scope::Losses),
            "model" => Ok(Scope::Model),
            other => Err(Error::invalid(format!(
                "unknown scope {other:?}; expected primitives, losses or model"
            ))),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Scope::Primitives => "primitives",
            Scope::Losses => "losses",
            Scope::Model => "model",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemResult {
    pub name: String,
    pub cases: u64,
    /// Worst relative error over all cases.
    pub worst: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckReport {
    pub scope: Scope,
    pub threshold: f64,
    pub items: Vec<ItemResult>,
}

impl CheckReport {
    pub fn offenders(&self) -> Vec<&ItemResult> {
        self.items.iter().filter(|i| !(i.worst < self.threshold)).collect()
    }

    pub fn pass(&self) -> bool {
        self.offenders().is_empty()
    }

    pub fn worst(&self) -> f64 {
        self.items.iter().map(|i| i.worst).fold(0.0, f64::max)
    }
}

impl fmt::Display for CheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for i in &self.items {
            let mark = if i.worst < self.threshold { "ok  " } else { "FAIL" };
            writeln!(f, "{mark} {:<28} cases={:<3} worst_rel_err={:.3e}", i.name, i.cases, i.worst)?;
        }
        write!(
            f,
            "scope {}: {} items, worst {:.3e}, threshold {:.0e}",
            self.scope,
            self.items.len(),
            self.worst(),
            self.threshold
        )
    }
}

pub fn run(scope: Scope) -> Result<CheckReport> {
    let items = match scope {
        Scope::Primitives => primitive_items()?,
        Scope::Losses => loss_items()?,
        Scope::Model => model_items()?,
    };
    Ok(CheckReport {
        scope,
        threshold: GRADCHECK_THRESHOLD,
        items,
    })
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product::<usize>().max(1);
    let data = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Entries in `[0.1, 1]` with random sign, away from the ReLU kink.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let t = uniform(rng, shape, 0.1, 1.0);
    let signs: Vec<f64> = t
        .data()
        .iter()
        .map(|v| if rng.gen::<bool>() { *v } else { -v })
        .collect();
    Tensor::new(shape.to_vec(), signs).expect("same shape")
}

fn ids(rng: &mut ChaCha8Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| rng.gen_range(0..vocab as u32)).collect()
}

/// `Σ out ⊙ w`, turning any output into a scalar with a dense upstream gradient.
fn contract(g: &mut Graph, out: Var, w: &Tensor) -> Result<Var> {
    let wv = g.constant(w.clone());
    let prod = g.mul(out, wv)?;
    g.sum(prod)
}

fn item<F>(name: &str, cases: u64, mut case: F) -> Result<ItemResult>
where
    F: FnMut(u64) -> Result<f64>,
{
    let mut worst = 0.0f64;
    for seed in 0..cases {
        let e = case(seed)?;
        if e.is_nan() || worst.is_nan() {
            worst = f64::NAN;
        } else {
            worst = worst.max(e);
        }
    }
    Ok(ItemResult {
        name: name.into(),
        cases,
        worst,
    })
}

pub fn all_primitives() -> Vec<Primitive> {
    vec![
        Primitive::MatMul,
        Primitive::MatMulT,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale(-1.7),
        Primitive::Relu,
        Primitive::Gelu,
        Primitive::Silu,
        Primitive::RmsNorm { eps: 1e-6 },
        Primitive::L2NormalizeRows { eps: 1e-12 },
        Primitive::RowSoftmax,
        Primitive::LogSoftmax,
        Primitive::Log,
        Primitive::Sum,
        Primitive::Mean,
        Primitive::SumLastDim,
        Primitive::LogSumExpLastDim,
        Primitive::GatherRows {
            ids: vec![4, 0, 4, 2],
            prefix: vec![2, 2],
        },
        Primitive::PickPerRow { index: vec![0, 4, 2, 2] },
        Primitive::Transpose,
        Primitive::Concat,
        Primitive::Reshape(vec![4, 3]),
        Primitive::Rope { base: 10_000.0 },
        Primitive::CausalAttention,
    ]
}

fn primitive_inputs(prim: &Primitive, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    match prim {
        Primitive::MatMul => vec![uniform(rng, &[2, 3, 4], -1.0, 1.0), uniform(rng, &[4, 5], -1.0, 1.0)],
        Primitive::MatMulT => vec![uniform(rng, &[3, 4], -1.0, 1.0), uniform(rng, &[5, 4], -1.0, 1.0)],
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            vec![uniform(rng, &[3, 4], -2.0, 2.0), uniform(rng, &[3, 4], -2.0, 2.0)]
        }
        Primitive::RmsNorm { .. } => vec![uniform(rng, &[3, 5], -2.0, 2.0), uniform(rng, &[5], 0.5, 1.5)],
        Primitive::Relu => vec![away_from_zero(rng, &[4, 3])],
        Primitive::Log => vec![uniform(rng, &[4, 3], 0.2, 3.0)],
        Primitive::GatherRows { .. } => vec![uniform(rng, &[5, 3], -1.0, 1.0)],
        Primitive::PickPerRow { .. } => vec![uniform(rng, &[4, 5], -1.0, 1.0)],
        Primitive::Concat => vec![uniform(rng, &[2, 3, 2], -1.0, 1.0), uniform(rng, &[2, 3, 4], -1.0, 1.0)],
        Primitive::Rope { .. } => vec![uniform(rng, &[2, 5, 2, 4], -1.0, 1.0)],
        Primitive::CausalAttention => vec![
            uniform(rng, &[2, 4, 4, 3], -1.0, 1.0),
            uniform(rng, &[2, 4, 2, 3], -1.0, 1.0),
            uniform(rng, &[2, 4, 2, 3], -1.0, 1.0),
        ],
        _ => vec![uniform(rng, &[3, 4], -2.0, 2.0)],
    }
}

fn primitive_items() -> Result<Vec<ItemResult>> {
    let mut out = Vec::new();
    for prim in all_primitives() {
        out.push(item(prim.name(), SEEDS, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let inputs = primitive_inputs(&prim, &mut rng);
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.constant(t.clone())).collect();
            let y = g.apply(&prim, &vars)?;
            let shape = g.value(y).shape().to_vec();
            let w = uniform(&mut rng, &shape, -1.0, 1.0);
            grad_check(
                |g, p| {
                    let y = g.apply(&prim, p)?;
                    contract(g, y, &w)
                },
                &inputs,
                FD_STEP,
            )
        })?);
    }
    out.push(item("interpolate_last_dim", SEEDS, |seed| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (src, dst) = (rng.gen_range(2..9), rng.gen_range(2..9));
        let plan = Arc::new(InterpolationPlan::new(src, dst)?);
        let x = uniform(&mut rng, &[3, src], -1.0, 1.0);
        let w = uniform(&mut rng, &[3, dst], -1.0, 1.0);
        grad_check(
            |g, p| {
                let y = g.interpolate_last_dim(p[0], plan.clone())?;
                contract(g, y, &w)
            },
            &[x],
            FD_STEP,
        )
    })?);
    Ok(out)
}

const B: usize = 2;
const T: usize = 3;
const V: usize = 7;

fn loss_items() -> Result<Vec<ItemResult>> {
    let mut out = vec![
        item("nll", SEEDS, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let logits = uniform(&mut rng, &[B, T, V], -2.0, 2.0);
            let y = ids(&mut rng, B * T, V);
            grad_check(|g, p| loss_nll(g, p[0], &y), &[logits], FD_STEP)
        })?,
        item("rkd", SEEDS, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let student = uniform(&mut rng, &[B, T, V], -2.0, 2.0);
            let teacher = uniform(&mut rng, &[B, T, V], -2.0, 2.0);
            let temperature = rng.gen_range(0.5..3.0);
            grad_check(
                |g, p| {
                    let t = g.constant(teacher.clone());
                    loss_rkd(g, p[0], t, temperature)
                },
                &[student],
                FD_STEP,
            )
        })?,
    ];
    for (name, kind) in [("proj_cosine", LossKind::Cosine), ("proj_logsum", LossKind::Logsum)] {
        for reduction in [Reduction::Mean, Reduction::Sum] {
            let label = format!("{name}/{}", if reduction == Reduction::Mean { "mean" } else { "sum" });
            out.push(item(&label, SEEDS, |seed| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let d = rng.gen_range(2..9);
                let h_m = uniform(&mut rng, &[B, T, d], -1.5, 1.5);
                let h_t = uniform(&mut rng, &[B, T, d], -1.5, 1.5);
                grad_check(
                    |g, p| {
                        let t = g.constant(h_t.clone());
                        kind.implementation().loss(g, p[0], t, reduction)
                    },
                    &[h_m],
                    FD_STEP,
                )
            })?);
        }
    }
    for (name, kind) in [("let_total_cosine", LossKind::Cosine), ("let_total_logsum", LossKind::Logsum)] {
        out.push(item(name, SEEDS, |seed| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (d_m, d_t) = (rng.gen_range(2..9), rng.gen_range(2..9));
            let logits = uniform(&mut rng, &[B, T, V], -2.0, 2.0);
            let h_m = uniform(&mut rng, &[B, T, d_m], -1.5, 1.5);
            let h_t = uniform(&mut rng, &[B, T, d_t], -1.5, 1.5);
            let y = ids(&mut rng, B * T, V);
            let spec = AlignmentSpec {
                loss_kind: kind,
                lambda0: rng.gen_range(0.1..3.0),
                s_stop: 10,
                ..AlignmentSpec::default()
            };
            let step = seed % 10;
            grad_check(
                |g, p| {
                    let nll = loss_nll(g, p[0], &y)?;
                    let hm = interpolate_to(g, p[1], d_t)?;
                    let ht = g.constant(h_t.clone());
                    let proj = spec.projection_loss(g, hm, ht)?;
                    loss_total(g, nll, Some(proj), step, &spec)
                },
                &[logits, h_m],
                FD_STEP,
            )
        })?);
    }
    Ok(out)
}

fn tiny_config(activation: Activation) -> ModelConfig {
    ModelConfig {
        vocab_size: 5,
        hidden_size: 4,
        intermediate_size: 6,
        num_layers: 2,
        num_heads: 2,
        num_kv_heads: 1,
        activation,
        max_seq_len: 8,
        tie_embeddings: activation == Activation::Swiglu,
        rope_base: 10_000.0,
    }
}

/// Small model with weights widened beyond the default init so every path carries signal.
fn tiny_model(activation: Activation, seed: u64) -> Result<TransformerModel> {
    let mut m = TransformerModel::init(tiny_config(activation), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in m.params_mut().tensors_mut() {
        for v in t.data_mut() {
            *v += rng.gen_range(-0.5..0.5);
        }
    }
    Ok(m)
}

fn model_items() -> Result<Vec<ItemResult>> {
    let mut out = Vec::new();
    for (name, act) in [
        ("transformer_nll/swiglu", Activation::Swiglu),
        ("transformer_nll/gelu", Activation::Gelu),
        ("transformer_nll/silu", Activation::Silu),
        ("transformer_nll/relu", Activation::Relu),
    ] {
        out.push(item(name, MODEL_SEEDS, |seed| {
            let m = tiny_model(act, seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = ids(&mut rng, 6, 5);
            let y = ids(&mut rng, 6, 5);
            grad_check(
                |g, p| {
                    let logits = m.forward_graph(g, p, &x, 2, None)?.logits.expect("full pass");
                    loss_nll(g, logits, &y)
                },
                m.params().tensors(),
                FD_STEP,
            )
        })?);
    }
    out.push(item("transformer_let_total", MODEL_SEEDS, |seed| {
        let m = tiny_model(Activation::Swiglu, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = ids(&mut rng, 6, 5);
        let y = ids(&mut rng, 6, 5);
        let h_t = uniform(&mut rng, &[2, 3, 3], -1.0, 1.0);
        let spec = AlignmentSpec {
            lambda0: 1.0,
            s_stop: 4,
            ..AlignmentSpec::default()
        };
        grad_check(
            |g, p| {
                let pass = m.forward_graph(g, p, &x, 2, None)?;
                let nll = loss_nll(g, pass.logits.expect("full pass"), &y)?;
                let hm = interpolate_to(g, pass.hidden[1], 3)?;
                let ht = g.constant(h_t.clone());
                let proj = spec.projection_loss(g, hm, ht)?;
                loss_total(g, nll, Some(proj), 1, &spec)
            },
            m.params().tensors(),
            FD_STEP,
        )
    })?);
    out.push(item("transformer_rkd", MODEL_SEEDS, |seed| {
        let m = tiny_model(Activation::Swiglu, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = ids(&mut rng, 6, 5);
        let teacher = uniform(&mut rng, &[2, 3, 5], -2.0, 2.0);
        grad_check(
            |g, p| {
                let logits = m.forward_graph(g, p, &x, 2, None)?.logits.expect("full pass");
                let t = g.constant(teacher.clone());
                loss_rkd(g, logits, t, 2.0)
            },
            m.params().tensors(),
            FD_STEP,
        )
    })?);
    out.push(item("deep_linear_projection", SEEDS, |seed| {
        let net = DeepLinearNet::gaussian(3, 3, 0.8, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = uniform(&mut rng, &[3], -1.0, 1.0);
        let target = uniform(&mut rng, &[3], -1.0, 1.0);
        grad_check(
            |g, p| {
                let xv = g.constant(x.clone());
                let states = DeepLinearNet::forward_graph(g, p, xv, 3)?;
                let tv = g.constant(target.clone());
                crate::alignment::proj_loss_cosine(g, states[3], tv, Reduction::Mean)
            },
            net.weights(),
            FD_STEP,
        )
    })?);
    Ok(out)
}
