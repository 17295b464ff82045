//! Numerical checks of the curvature structure that alignment at depth `k`
//! induces on a deep linear network.
//!
//! The projection loss `−cos(h^(k), target)` only depends on the first `k`
//! weight matrices, so its gradient vanishes on layers `j ≥ k` and every
//! Hessian block touching such a layer is zero. With `C` the largest live
//! block norm, `‖H‖_F ≤ k·C`.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::alignment::NORM_EPS;
use crate::error::{Error, Result};
use crate::metrics::Table;
use crate::models::DeepLinearNet;
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_FD_STEP: f64 = 1e-4;
/// Largest parameter count for which a dense Hessian is formed.
pub const MAX_DENSE_PARAMS: usize = 400;

fn check_depth(k: usize, layers: usize) -> Result<()> {
    if k < 1 || k > layers {
        return Err(Error::invalid(format!("alignment depth {k} outside 1..={layers}")));
    }
    Ok(())
}

fn neg_cosine(h: &[f64], target: &[f64]) -> f64 {
    let dot: f64 = h.iter().zip(target).map(|(a, b)| a * b).sum();
    let nh = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nt = target.iter().map(|v| v * v).sum::<f64>().sqrt();
    -dot / (nh * nt)
}

/// `−cos(h^(k), target)` as a function of the flattened weights `Θ`.
pub fn projection_loss(theta: &[f64], layers: usize, dim: usize, k: usize, x: &[f64], target: &[f64]) -> Result<f64> {
    check_depth(k, layers)?;
    if theta.len() != layers * dim * dim || x.len() != dim || target.len() != dim {
        return Err(Error::invalid("parameter, input or target size does not match the network"));
    }
    let mut h = x.to_vec();
    for w in theta.chunks_exact(dim * dim).take(k) {
        h = (0..dim)
            .map(|i| w[i * dim..(i + 1) * dim].iter().zip(&h).map(|(a, b)| a * b).sum())
            .collect();
    }
    Ok(neg_cosine(&h, target))
}

/// Dense Hessian by central second differences, symmetrized as `(H + Hᵀ)/2`.
pub fn numeric_hessian<F>(f: F, params: &[f64], fd_step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&[f64]) -> f64,
{
    if !(fd_step > 0.0) {
        return Err(Error::invalid("fd_step must be positive"));
    }
    let n = params.len();
    let h = fd_step;
    let mut x = params.to_vec();
    let eval = |x: &mut Vec<f64>, moves: &[(usize, f64)]| {
        for &(i, d) in moves {
            x[i] = params[i] + d;
        }
        let v = f(x);
        for &(i, _) in moves {
            x[i] = params[i];
        }
        v
    };
    let f0 = eval(&mut x, &[]);
    let mut hess = vec![vec![0.0; n]; n];
    for i in 0..n {
        let fp = eval(&mut x, &[(i, h)]);
        let fm = eval(&mut x, &[(i, -h)]);
        hess[i][i] = (fp - 2.0 * f0 + fm) / (h * h);
        for j in 0..i {
            let pp = eval(&mut x, &[(i, h), (j, h)]);
            let pm = eval(&mut x, &[(i, h), (j, -h)]);
            let mp = eval(&mut x, &[(i, -h), (j, h)]);
            let mm = eval(&mut x, &[(i, -h), (j, -h)]);
            let v = (pp - pm - mp + mm) / (4.0 * h * h);
            hess[i][j] = v;
            hess[j][i] = v;
        }
    }
    for (i, row) in hess.iter().enumerate() {
        if let Some(j) = row.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("non-finite Hessian entry at ({i}, {j})")));
        }
    }
    Ok(hess)
}

fn bind_weights(g: &mut Graph, net: &DeepLinearNet) -> Vec<Var> {
    net.weights().iter().map(|w| g.param(w.clone())).collect()
}

/// Autodiff gradient of the projection loss, one tensor per layer.
pub fn projection_gradient(net: &DeepLinearNet, k: usize, x: &[f64], target: &[f64]) -> Result<Vec<Tensor>> {
    check_depth(k, net.num_layers())?;
    let mut g = Graph::new();
    let ws = bind_weights(&mut g, net);
    let xv = g.constant(Tensor::vector(x.to_vec()));
    let states = DeepLinearNet::forward_graph(&mut g, &ws, xv, k)?;
    let h = states[k];
    let t = g.constant(Tensor::vector(target.to_vec()));
    let hn = g.l2_normalize_rows(h, NORM_EPS)?;
    let tn = g.l2_normalize_rows(t, NORM_EPS)?;
    let prod = g.mul(hn, tn)?;
    let cos = g.sum(prod)?;
    let loss = g.scale(cos, -1.0)?;
    let grads = g.backward(loss)?;
    Ok(ws.iter().map(|&w| grads.get(w)).collect())
}

/// Largest `|∂L_proj/∂θ^(j)|` over layers `j ≥ k` (0-based), by autodiff.
/// Returns 0 when no such layer exists.
pub fn verify_gradient_vanishing(net: &DeepLinearNet, k: usize, x: &[f64], target: &[f64]) -> Result<f64> {
    let grads = projection_gradient(net, k, x, target)?;
    Ok(grads[k..].iter().map(Tensor::max_abs).fold(0.0, f64::max))
}

/// Same quantity from central finite differences of the loss.
pub fn verify_gradient_vanishing_fd(
    net: &DeepLinearNet,
    k: usize,
    x: &[f64],
    target: &[f64],
    fd_step: f64,
) -> Result<f64> {
    let (layers, dim) = (net.num_layers(), net.dim());
    check_depth(k, layers)?;
    let mut theta = net.flat();
    let block = dim * dim;
    let mut worst = 0.0f64;
    for idx in k * block..layers * block {
        let orig = theta[idx];
        theta[idx] = orig + fd_step;
        let p = projection_loss(&theta, layers, dim, k, x, target)?;
        theta[idx] = orig - fd_step;
        let m = projection_loss(&theta, layers, dim, k, x, target)?;
        theta[idx] = orig;
        worst = worst.max(((p - m) / (2.0 * fd_step)).abs());
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HessianReport {
    pub k: usize,
    pub layers: usize,
    pub dim: usize,
    pub fd_step: f64,
    /// `block_norms[i][j] = ‖H^(i,j)‖_F`.
    pub block_norms: Vec<Vec<f64>>,
    /// Largest `|entry|` in blocks with `i ≥ k` or `j ≥ k`.
    pub forbidden_max: f64,
    /// Same, recomputed with half the finite-difference step.
    pub forbidden_max_half_step: f64,
    pub total_norm: f64,
    /// `sqrt(Σ_live ‖H^(i,j)‖²)`.
    pub live_norm: f64,
    /// Largest live block norm.
    pub c: f64,
    pub bound: f64,
    pub max_asymmetry: f64,
}

impl HessianReport {
    pub fn live_blocks(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for i in 0..self.k {
            for j in 0..self.k {
                out.push((i, j));
            }
        }
        out
    }

    /// Forbidden entries fall below `10·fd_step²` and shrink at least twofold
    /// when the step is halved (exact zeros pass trivially).
    pub fn forbidden_ok(&self) -> bool {
        self.forbidden_max < self.forbidden_tolerance() && self.halving_ok()
    }

    pub fn forbidden_tolerance(&self) -> f64 {
        10.0 * self.fd_step * self.fd_step
    }

    pub fn halving_ok(&self) -> bool {
        self.forbidden_max_half_step <= 0.5 * self.forbidden_max
    }

    pub fn bound_ok(&self) -> bool {
        self.total_norm <= self.bound * (1.0 + 1e-12)
    }

    pub fn block_sum_ok(&self) -> bool {
        (self.total_norm - self.live_norm).abs() <= 1e-8 * self.total_norm.max(1e-300)
    }
}

fn forbidden_max(hess: &[Vec<f64>], k: usize, block: usize) -> f64 {
    let mut worst = 0.0f64;
    for (a, row) in hess.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            if a / block >= k || b / block >= k {
                worst = worst.max(v.abs());
            }
        }
    }
    worst
}

/// Dense finite-difference Hessian of the projection loss and its block structure.
pub fn verify_block_structure(
    net: &DeepLinearNet,
    k: usize,
    x: &[f64],
    target: &[f64],
    fd_step: f64,
) -> Result<HessianReport> {
    let (layers, dim) = (net.num_layers(), net.dim());
    check_depth(k, layers)?;
    let n = layers * dim * dim;
    if n > MAX_DENSE_PARAMS {
        return Err(Error::invalid(format!(
            "{n} parameters exceed the dense Hessian limit of {MAX_DENSE_PARAMS}; use fewer layers or a smaller width"
        )));
    }
    let theta = net.flat();
    let f = |t: &[f64]| projection_loss(t, layers, dim, k, x, target).unwrap_or(f64::NAN);
    let hess = numeric_hessian(f, &theta, fd_step)?;
    let half = numeric_hessian(f, &theta, fd_step / 2.0)?;
    let block = dim * dim;
    let mut norms = vec![vec![0.0; layers]; layers];
    let mut total_sq = 0.0;
    let mut max_asym = 0.0f64;
    for (a, row) in hess.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            norms[a / block][b / block] += v * v;
            total_sq += v * v;
            max_asym = max_asym.max((v - hess[b][a]).abs());
        }
    }
    for row in &mut norms {
        for v in row.iter_mut() {
            *v = v.sqrt();
        }
    }
    let mut live_sq = 0.0;
    let mut c = 0.0f64;
    for row in norms.iter().take(k) {
        for v in row.iter().take(k) {
            live_sq += v * v;
            c = c.max(*v);
        }
    }
    Ok(HessianReport {
        k,
        layers,
        dim,
        fd_step,
        forbidden_max: forbidden_max(&hess, k, block),
        forbidden_max_half_step: forbidden_max(&half, k, block),
        total_norm: total_sq.sqrt(),
        live_norm: live_sq.sqrt(),
        c,
        bound: k as f64 * c,
        max_asymmetry: max_asym,
        block_norms: norms,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepConfig {
    pub layers: usize,
    pub dim: usize,
    pub ks: Vec<usize>,
    pub trials: usize,
    pub seed: u64,
    pub fd_step: f64,
    /// Standard deviation of the Gaussian weight entries. `None` uses identity
    /// weights with one shared input/target pair, so every trial is identical.
    pub weight_scale: Option<f64>,
}

impl SweepConfig {
    pub fn new(layers: usize, dim: usize, ks: Vec<usize>, trials: usize) -> Self {
        Self {
            layers,
            dim,
            ks,
            trials,
            seed: 0,
            fd_step: DEFAULT_FD_STEP,
            weight_scale: Some(1.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.dim == 0 || self.trials == 0 || self.ks.is_empty() {
            return Err(Error::invalid("layers, dim, trials and the k list must be nonempty/positive"));
        }
        for &k in &self.ks {
            check_depth(k, self.layers)?;
        }
        let n = self.layers * self.dim * self.dim;
        if n > MAX_DENSE_PARAMS {
            return Err(Error::invalid(format!(
                "{n} parameters exceed the dense Hessian limit of {MAX_DENSE_PARAMS}; use fewer layers or a smaller width"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub k: usize,
    pub trial: usize,
    pub gradient_max: f64,
    pub report: HessianReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KSummary {
    pub k: usize,
    pub mean_total_norm: f64,
    pub max_total_norm: f64,
    /// `k·C` with `C` the largest live block norm over the whole sweep.
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Claim {
    pub name: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepOutcome {
    pub config: SweepConfig,
    pub trials: Vec<TrialResult>,
    pub per_k: Vec<KSummary>,
    pub global_c: f64,
    pub claims: Vec<Claim>,
    pub gradient_tolerance: f64,
}

impl SweepOutcome {
    pub fn all_pass(&self) -> bool {
        self.claims.iter().all(|c| c.pass)
    }

    pub fn trial_table(&self) -> Table {
        Table {
            key: "k".into(),
            columns: [
                "trial",
                "gradient_max",
                "forbidden_max",
                "forbidden_max_half_step",
                "h_proj_fro",
                "c",
                "bound",
            ]
            .map(String::from)
            .to_vec(),
            rows: self
                .trials
                .iter()
                .map(|t| {
                    let r = &t.report;
                    (
                        t.k as u64,
                        [
                            t.trial as f64,
                            t.gradient_max,
                            r.forbidden_max,
                            r.forbidden_max_half_step,
                            r.total_norm,
                            r.c,
                            r.bound,
                        ]
                        .map(Some)
                        .to_vec(),
                    )
                })
                .collect(),
        }
    }

    pub fn summary_table(&self) -> Table {
        Table {
            key: "k".into(),
            columns: vec!["mean_h_proj_fro".into(), "max_h_proj_fro".into(), "bound".into()],
            rows: self
                .per_k
                .iter()
                .map(|s| (s.k as u64, vec![Some(s.mean_total_norm), Some(s.max_total_norm), Some(s.bound)]))
                .collect(),
        }
    }

    /// Writes `trials.csv`, `summary.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.trial_table().write_csv(&dir.join("trials.csv"))?;
        self.summary_table().write_csv(&dir.join("summary.csv"))?;
        let json = serde_json::json!({
            "pass": self.all_pass(),
            "claims": self.claims,
            "tolerances": {
                "gradient": self.gradient_tolerance,
                "forbidden_entry": 10.0 * self.config.fd_step * self.config.fd_step,
                "fd_step": self.config.fd_step,
                "block_sum_relative": 1e-8,
            },
            "global_c": self.global_c,
            "per_k": self.per_k,
        });
        let path = dir.join("summary.json");
        let text = serde_json::to_string_pretty(&json)? + "\n";
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if v.iter().map(|a| a * a).sum::<f64>() > 1e-2 {
            return v;
        }
    }
}

/// Runs every `(k, trial)` pair; a trial draws its network, input and target
/// from `(seed, trial)`, so each k sees the same networks.
pub fn curvature_sweep(cfg: &SweepConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let gradient_tolerance = 1e-10;
    let mut trials = Vec::new();
    for &k in &cfg.ks {
        for trial in 0..cfg.trials {
            let stream = match cfg.weight_scale {
                Some(_) => format!("trial/{trial}"),
                None => "identity".to_string(),
            };
            let mut rng = ChaCha8Rng::seed_from_u64(crate::seeding::substream(cfg.seed, &stream));
            let net = match cfg.weight_scale {
                Some(s) => DeepLinearNet::gaussian(cfg.layers, cfg.dim, s, rng.gen())?,
                None => DeepLinearNet::identity(cfg.layers, cfg.dim)?,
            };
            let x = random_unit(&mut rng, cfg.dim);
            let target = random_unit(&mut rng, cfg.dim);
            let gradient_max = verify_gradient_vanishing(&net, k, &x, &target)?;
            let report = verify_block_structure(&net, k, &x, &target, cfg.fd_step)?;
            trials.push(TrialResult {
                k,
                trial,
                gradient_max,
                report,
            });
        }
    }
    let global_c = trials.iter().map(|t| t.report.c).fold(0.0, f64::max);
    let per_k: Vec<KSummary> = cfg
        .ks
        .iter()
        .map(|&k| {
            let norms: Vec<f64> = trials.iter().filter(|t| t.k == k).map(|t| t.report.total_norm).collect();
            KSummary {
                k,
                mean_total_norm: norms.iter().sum::<f64>() / norms.len() as f64,
                max_total_norm: norms.iter().copied().fold(0.0, f64::max),
                bound: k as f64 * global_c,
            }
        })
        .collect();
    let claim = |name: &str, pass: bool, detail: String| Claim {
        name: name.into(),
        pass,
        detail,
    };
    let worst_grad = trials.iter().map(|t| t.gradient_max).fold(0.0, f64::max);
    let worst_forbidden = trials.iter().map(|t| t.report.forbidden_max).fold(0.0, f64::max);
    let halving_fail = trials.iter().filter(|t| !t.report.halving_ok()).count();
    let bound_fail = trials.iter().filter(|t| !t.report.bound_ok()).count();
    let sum_fail = trials.iter().filter(|t| !t.report.block_sum_ok()).count();
    let worst_asym = trials.iter().map(|t| t.report.max_asymmetry).fold(0.0, f64::max);
    let mut sorted = per_k.clone();
    sorted.sort_by_key(|s| s.k);
    let monotone = sorted.windows(2).all(|w| w[0].bound <= w[1].bound);
    let tol = 10.0 * cfg.fd_step * cfg.fd_step;
    let claims = vec![
        claim(
            "gradient_vanishes_above_k",
            worst_grad < gradient_tolerance,
            format!("max |grad| on layers >= k: {worst_grad:e}"),
        ),
        claim(
            "forbidden_blocks_zero",
            worst_forbidden < tol,
            format!("max forbidden |entry| {worst_forbidden:e} (tolerance {tol:e})"),
        ),
        claim(
            "step_halving_noise_test",
            halving_fail == 0,
            format!("{halving_fail} trials failed"),
        ),
        claim(
            "frobenius_bound",
            bound_fail == 0,
            format!("{bound_fail} trials exceed k*C"),
        ),
        claim(
            "block_norm_identity",
            sum_fail == 0,
            format!("{sum_fail} trials differ from the live-block accumulation"),
        ),
        claim("symmetric", worst_asym == 0.0, format!("max asymmetry {worst_asym:e}")),
        claim("bound_monotone_in_k", monotone, "k*C with the sweep-wide C".into()),
    ];
    Ok(SweepOutcome {
        config: cfg.clone(),
        trials,
        per_k,
        global_c,
        claims,
        gradient_tolerance,
    })
}
