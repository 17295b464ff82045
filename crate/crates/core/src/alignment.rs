//! Hidden-state alignment between the target model and the frozen small model.
//!
//! Layer-pair selection, hidden-dimension interpolation, the projection
//! losses, the linearly decaying alignment weight, and the cosine-similarity
//! diagnostic.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

/// Guard for zero-norm rows in every normalization.
pub const NORM_EPS: f64 = 1e-12;

/// Default "early" layer of the target model.
pub const DEFAULT_EARLY_LAYER: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Variant {
    L2E,
    L2M,
    L2L,
    M2E,
    M2M,
    M2L,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::L2E,
        Variant::L2M,
        Variant::L2L,
        Variant::M2E,
        Variant::M2M,
        Variant::M2L,
    ];
}

/// Which small-model layer is aligned with which target-model layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerPairStrategy {
    Variant(Variant),
    /// `Lx-Fy`: the x-th layer counted from the end of the small model paired
    /// with the y-th layer counted from the start of the target model.
    FromEnds { from_last: usize, from_first: usize },
    /// Absolute 1-based layer indices.
    Explicit { teacher_layer: usize, target_layer: usize },
}

impl Default for LayerPairStrategy {
    fn default() -> Self {
        LayerPairStrategy::Variant(Variant::L2E)
    }
}

impl fmt::Display for LayerPairStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerPairStrategy::Variant(v) => write!(f, "{v:?}"),
            LayerPairStrategy::FromEnds { from_last, from_first } => write!(f, "L{from_last}-F{from_first}"),
            LayerPairStrategy::Explicit {
                teacher_layer,
                target_layer,
            } => write!(f, "T{teacher_layer}-M{target_layer}"),
        }
    }
}

impl FromStr for LayerPairStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let variant = match s {
            "L2E" => Some(Variant::L2E),
            "L2M" => Some(Variant::L2M),
            "L2L" => Some(Variant::L2L),
            "M2E" => Some(Variant::M2E),
            "M2M" => Some(Variant::M2M),
            "M2L" => Some(Variant::M2L),
            _ => None,
        };
        if let Some(v) = variant {
            return Ok(LayerPairStrategy::Variant(v));
        }
        let bad = || Error::Config(format!("unknown layer-pair strategy `{s}`"));
        let (left, right) = s.split_once('-').ok_or_else(bad)?;
        let parse = |part: &str, prefix: char| -> Option<usize> {
            part.strip_prefix(prefix)?.parse::<usize>().ok().filter(|&n| n >= 1)
        };
        if let (Some(a), Some(b)) = (parse(left, 'L'), parse(right, 'F')) {
            return Ok(LayerPairStrategy::FromEnds {
                from_last: a,
                from_first: b,
            });
        }
        if let (Some(a), Some(b)) = (parse(left, 'T'), parse(right, 'M')) {
            return Ok(LayerPairStrategy::Explicit {
                teacher_layer: a,
                target_layer: b,
            });
        }
        Err(bad())
    }
}

impl Serialize for LayerPairStrategy {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for LayerPairStrategy {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

fn middle(layers: usize) -> usize {
    layers.div_ceil(2)
}

/// Resolves a strategy to `(teacher_layer, target_layer)`, both 1-based.
pub fn select_layers(
    strategy: LayerPairStrategy,
    teacher_layers: usize,
    target_layers: usize,
    early_index: usize,
) -> Result<(usize, usize)> {
    let (teacher, target) = match strategy {
        LayerPairStrategy::Variant(v) => {
            let teacher = match v {
                Variant::L2E | Variant::L2M | Variant::L2L => teacher_layers,
                Variant::M2E | Variant::M2M | Variant::M2L => middle(teacher_layers),
            };
            let target = match v {
                Variant::L2E | Variant::M2E => early_index,
                Variant::L2M | Variant::M2M => middle(target_layers),
                Variant::L2L | Variant::M2L => target_layers,
            };
            (teacher, target)
        }
        LayerPairStrategy::FromEnds { from_last, from_first } => {
            ((teacher_layers + 1).checked_sub(from_last).unwrap_or(0), from_first)
        }
        LayerPairStrategy::Explicit {
            teacher_layer,
            target_layer,
        } => (teacher_layer, target_layer),
    };
    if teacher < 1 || teacher > teacher_layers {
        return Err(Error::Config(format!(
            "{strategy}: small-model layer {teacher} outside 1..={teacher_layers}"
        )));
    }
    if target < 1 || target > target_layers {
        return Err(Error::Config(format!(
            "{strategy}: target-model layer {target} outside 1..={target_layers}"
        )));
    }
    Ok((teacher, target))
}

/// Fixed linear-interpolation map from `source_dim` features to `target_dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct InterpolationPlan {
    source_dim: usize,
    target_dim: usize,
    source_index: Vec<f64>,
    lower: Vec<usize>,
    frac: Vec<f64>,
}

impl InterpolationPlan {
    pub fn new(source_dim: usize, target_dim: usize) -> Result<Self> {
        if source_dim == 0 || target_dim == 0 {
            return Err(Error::invalid("interpolation dimensions must be at least 1"));
        }
        let mut source_index = Vec::with_capacity(target_dim);
        let mut lower = Vec::with_capacity(target_dim);
        let mut frac = Vec::with_capacity(target_dim);
        for j in 0..target_dim {
            let u = if target_dim == 1 {
                0.0
            } else {
                j as f64 * (source_dim - 1) as f64 / (target_dim - 1) as f64
            };
            let lo = (u.floor() as usize).min(source_dim - 1);
            source_index.push(u);
            lower.push(lo);
            frac.push(u - lo as f64);
        }
        Ok(Self {
            source_dim,
            target_dim,
            source_index,
            lower,
            frac,
        })
    }

    pub fn source_dim(&self) -> usize {
        self.source_dim
    }

    pub fn target_dim(&self) -> usize {
        self.target_dim
    }

    /// Fractional source position `u_j` of each output coordinate.
    pub fn source_index(&self) -> &[f64] {
        &self.source_index
    }

    /// Interpolation weight `β_j` of each output coordinate.
    pub fn weights(&self) -> &[f64] {
        &self.frac
    }

    pub fn is_identity(&self) -> bool {
        self.source_dim == self.target_dim
    }

    pub(crate) fn apply_row<'a>(&'a self, row: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
        self.lower.iter().zip(&self.frac).map(move |(&lo, &b)| {
            if b == 0.0 {
                row[lo]
            } else {
                (1.0 - b) * row[lo] + b * row[lo + 1]
            }
        })
    }

    pub(crate) fn scatter_row(&self, grad: &[f64], out: &mut [f64]) {
        for ((&lo, &b), &g) in self.lower.iter().zip(&self.frac).zip(grad) {
            if b == 0.0 {
                out[lo] += g;
            } else {
                out[lo] += (1.0 - b) * g;
                out[lo + 1] += b * g;
            }
        }
    }
}

/// Interpolates one hidden vector to `target_dim` features.
pub fn interpolate_hidden(h: &[f64], target_dim: usize) -> Result<Vec<f64>> {
    if h.is_empty() {
        return Err(Error::invalid("cannot interpolate an empty hidden vector"));
    }
    let plan = InterpolationPlan::new(h.len(), target_dim)?;
    Ok(plan.apply_row(h).collect())
}

/// Brings `h` (`[..., d_source]`) to `target_dim` features on the graph; a no-op when dims match.
pub fn interpolate_to(g: &mut Graph, h: Var, target_dim: usize) -> Result<Var> {
    let source_dim = g.value(h).last_dim();
    if source_dim == target_dim {
        return Ok(h);
    }
    let plan = Arc::new(InterpolationPlan::new(source_dim, target_dim)?);
    g.interpolate_last_dim(h, plan)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[default]
    Cosine,
    Logsum,
}

/// How per-token losses combine over batch and sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    #[default]
    Mean,
    Sum,
}

/// A projection loss between target-model and small-model hidden states.
///
/// `h_t` is always treated as a constant.
pub trait ProjectionLoss {
    fn name(&self) -> &'static str;
    fn loss(&self, g: &mut Graph, h_m: Var, h_t: Var, reduction: Reduction) -> Result<Var>;
}

pub struct CosineLoss;
pub struct LogSumLoss;

impl ProjectionLoss for CosineLoss {
    fn name(&self) -> &'static str {
        "cosine"
    }

    fn loss(&self, g: &mut Graph, h_m: Var, h_t: Var, reduction: Reduction) -> Result<Var> {
        let (nm, nt) = normalized_pair(g, h_m, h_t, "proj_loss_cosine")?;
        let prod = g.mul(nm, nt)?;
        let cos = g.sum_last_dim(prod)?;
        let reduced = reduce(g, cos, reduction)?;
        g.scale(reduced, -1.0)
    }
}

impl ProjectionLoss for LogSumLoss {
    fn name(&self) -> &'static str {
        "logsum"
    }

    /// Per token: `log Σ_i exp((ĥ_M,i − ĥ_T,i)²)` over normalized vectors.
    fn loss(&self, g: &mut Graph, h_m: Var, h_t: Var, reduction: Reduction) -> Result<Var> {
        let (nm, nt) = normalized_pair(g, h_m, h_t, "proj_loss_logsum")?;
        let diff = g.sub(nm, nt)?;
        let sq = g.mul(diff, diff)?;
        let lse = g.logsumexp_last_dim(sq)?;
        reduce(g, lse, reduction)
    }
}

impl LossKind {
    pub fn implementation(self) -> &'static dyn ProjectionLoss {
        match self {
            LossKind::Cosine => &CosineLoss,
            LossKind::Logsum => &LogSumLoss,
        }
    }
}

fn normalized_pair(g: &mut Graph, h_m: Var, h_t: Var, op: &'static str) -> Result<(Var, Var)> {
    let (sm, st) = (g.value(h_m).shape().to_vec(), g.value(h_t).shape().to_vec());
    if sm != st || sm.is_empty() {
        return Err(Error::Shape { op, lhs: sm, rhs: st });
    }
    let h_t = g.detach(h_t)?;
    let nm = g.l2_normalize_rows(h_m, NORM_EPS)?;
    let nt = g.l2_normalize_rows(h_t, NORM_EPS)?;
    Ok((nm, nt))
}

fn reduce(g: &mut Graph, per_token: Var, reduction: Reduction) -> Result<Var> {
    match reduction {
        Reduction::Mean => g.mean(per_token),
        Reduction::Sum => g.sum(per_token),
    }
}

/// Negative cosine similarity between `h_m` and `h_t` (`[..., d]` each).
pub fn proj_loss_cosine(g: &mut Graph, h_m: Var, h_t: Var, reduction: Reduction) -> Result<Var> {
    CosineLoss.loss(g, h_m, h_t, reduction)
}

pub fn proj_loss_logsum(g: &mut Graph, h_m: Var, h_t: Var, reduction: Reduction) -> Result<Var> {
    LogSumLoss.loss(g, h_m, h_t, reduction)
}

/// Alignment weight at step `s`: `λ0 · max(0, (S_stop − s) / S_stop)`.
pub fn lambda_at(step: u64, lambda0: f64, s_stop: u64) -> f64 {
    if step >= s_stop {
        return 0.0;
    }
    lambda0 * ((s_stop - step) as f64 / s_stop as f64)
}

/// Mean cosine similarity over all rows; a diagnostic with no graph involvement.
pub fn cosine_similarity_metric(h_m: &Tensor, h_t: &Tensor) -> Result<f64> {
    if h_m.shape() != h_t.shape() || h_m.is_empty() {
        return Err(Error::Shape {
            op: "cosine_similarity_metric",
            lhs: h_m.shape().to_vec(),
            rhs: h_t.shape().to_vec(),
        });
    }
    let d = h_m.last_dim();
    let rows = h_m.rows();
    let mut total = 0.0;
    for (a, b) in h_m.data().chunks_exact(d).zip(h_t.data().chunks_exact(d)) {
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt().max(NORM_EPS);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| (x / na) * (y / nb)).sum();
        total += dot;
    }
    Ok(total / rows as f64)
}

fn default_early_layer() -> usize {
    DEFAULT_EARLY_LAYER
}

fn default_lambda0() -> f64 {
    0.1
}

fn default_s_stop() -> u64 {
    1500
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlignmentSpec {
    #[serde(default)]
    pub strategy: LayerPairStrategy,
    #[serde(default)]
    pub loss_kind: LossKind,
    #[serde(default = "default_lambda0")]
    pub lambda0: f64,
    #[serde(default = "default_s_stop")]
    pub s_stop: u64,
    #[serde(default)]
    pub token_reduction: Reduction,
    /// Target-model layer used as "early" by the `*2E` strategies.
    #[serde(default = "default_early_layer")]
    pub early_layer: usize,
}

impl Default for AlignmentSpec {
    fn default() -> Self {
        Self {
            strategy: LayerPairStrategy::default(),
            loss_kind: LossKind::default(),
            lambda0: default_lambda0(),
            s_stop: default_s_stop(),
            token_reduction: Reduction::default(),
            early_layer: DEFAULT_EARLY_LAYER,
        }
    }
}

impl AlignmentSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda0 >= 0.0 && self.lambda0.is_finite()) {
            return Err(Error::Config(format!("lambda0 must be finite and >= 0, got {}", self.lambda0)));
        }
        if self.s_stop < 1 {
            return Err(Error::Config("s_stop must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lambda_at(&self, step: u64) -> f64 {
        lambda_at(step, self.lambda0, self.s_stop)
    }

    pub fn layers(&self, teacher_layers: usize, target_layers: usize) -> Result<(usize, usize)> {
        select_layers(self.strategy, teacher_layers, target_layers, self.early_layer)
    }

    pub fn projection_loss(&self, g: &mut Graph, h_m: Var, h_t: Var) -> Result<Var> {
        self.loss_kind.implementation().loss(g, h_m, h_t, self.token_reduction)
    }
}
