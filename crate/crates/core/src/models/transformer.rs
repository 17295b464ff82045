use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{Activation, ModelConfig, Params, RMS_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor, Var};

const INIT_STD: f64 = 0.02;

/// Per-layer activations `[batch, seq, hidden]`; entry 0 is the embedding output.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenStates(pub Vec<Tensor>);

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn layer(&self, k: usize) -> &Tensor {
        &self.0[k]
    }
}

/// Graph handles produced by one forward pass.
pub struct ForwardPass {
    /// `[batch, seq, vocab]`, absent when the pass stopped early.
    pub logits: Option<Var>,
    /// `hidden[k]` is the residual stream after layer `k` (`hidden[0]` = embeddings).
    pub hidden: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    params: Params,
}

fn layer_name(layer: usize, part: &str) -> String {
    format!("layers.{layer}.{part}")
}

fn trunc_normal(rng: &mut ChaCha8Rng, n: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("valid std");
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            out.push(v);
        }
    }
    out
}

impl TransformerModel {
    /// Deterministic initialization: truncated normal (std 0.02, cut at 2σ), unit
    /// norm gains, residual output projections scaled by `1/sqrt(2L)`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.hidden_size;
        let ff = config.intermediate_size;
        let kv = config.kv_dim();
        let resid_std = INIT_STD / (2.0 * config.num_layers as f64).sqrt();
        let mut params = Params::new();
        let mat = |rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64| {
            Tensor::matrix(rows, cols, trunc_normal(rng, rows * cols, std)).expect("sized")
        };
        params.push("embed", mat(&mut rng, config.vocab_size, d, INIT_STD));
        for l in 0..config.num_layers {
            params.push(layer_name(l, "attn_norm"), Tensor::full(&[d], 1.0));
            params.push(layer_name(l, "wq"), mat(&mut rng, d, d, INIT_STD));
            params.push(layer_name(l, "wk"), mat(&mut rng, d, kv, INIT_STD));
            params.push(layer_name(l, "wv"), mat(&mut rng, d, kv, INIT_STD));
            params.push(layer_name(l, "wo"), mat(&mut rng, d, d, resid_std));
            params.push(layer_name(l, "ffn_norm"), Tensor::full(&[d], 1.0));
            if config.activation == Activation::Swiglu {
                params.push(layer_name(l, "w_gate"), mat(&mut rng, d, ff, INIT_STD));
            }
            params.push(layer_name(l, "w_up"), mat(&mut rng, d, ff, INIT_STD));
            params.push(layer_name(l, "w_down"), mat(&mut rng, ff, d, resid_std));
        }
        params.push("final_norm", Tensor::full(&[d], 1.0));
        if !config.tie_embeddings {
            params.push("lm_head", mat(&mut rng, config.vocab_size, d, INIT_STD));
        }
        Ok(Self { config, params })
    }

    /// Wraps existing parameters, checking names and shapes against a fresh layout.
    pub fn from_params(config: ModelConfig, params: Params) -> Result<Self> {
        let layout = Self::init(config.clone(), 0)?;
        if layout.params.names() != params.names() {
            return Err(Error::invalid("parameter names do not match the model layout"));
        }
        for ((name, a), b) in layout.params.iter().zip(params.tensors()) {
            if a.shape() != b.shape() {
                return Err(Error::invalid(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    b.shape(),
                    a.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.config.num_layers
    }

    pub fn hidden_size(&self) -> usize {
        self.config.hidden_size
    }

    /// Records every parameter on `g`, as trainable leaves or as constants.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    fn var(&self, bound: &[Var], name: &str) -> Var {
        bound[self.params.index_of(name).expect("known parameter")]
    }

    fn check_tokens(&self, ids: &[u32], batch: usize) -> Result<usize> {
        if batch == 0 || ids.is_empty() || ids.len() % batch != 0 {
            return Err(Error::invalid(format!(
                "{} token ids do not split into {batch} sequences",
                ids.len()
            )));
        }
        let seq = ids.len() / batch;
        if seq > self.config.max_seq_len {
            return Err(Error::invalid(format!(
                "sequence length {seq} exceeds max_seq_len {}",
                self.config.max_seq_len
            )));
        }
        if let Some(pos) = ids.iter().position(|&t| t as usize >= self.config.vocab_size) {
            return Err(Error::invalid(format!(
                "token id {} at position {pos} (sequence {}, offset {}) out of range for vocab {}",
                ids[pos],
                pos / seq,
                pos % seq,
                self.config.vocab_size
            )));
        }
        Ok(seq)
    }

    /// Token embeddings, `[batch, seq, hidden]`.
    pub fn embed(&self, g: &mut Graph, bound: &[Var], ids: &[u32], batch: usize) -> Result<Var> {
        let seq = self.check_tokens(ids, batch)?;
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        g.gather_rows(self.var(bound, "embed"), &idx, &[batch, seq])
    }

    /// One pre-norm transformer block applied to `h: [batch, seq, hidden]`.
    pub fn block(&self, g: &mut Graph, bound: &[Var], layer: usize, h: Var) -> Result<Var> {
        let c = &self.config;
        let shape = g.value(h).shape().to_vec();
        let (batch, seq) = (shape[0], shape[1]);
        let hd = c.head_dim();
        let p = |name: &str| self.var(bound, &layer_name(layer, name));

        let x = g.rms_norm(h, p("attn_norm"), RMS_EPS)?;
        let q = g.matmul(x, p("wq"))?;
        let q = g.reshape(q, &[batch, seq, c.num_heads, hd])?;
        let q = g.rope(q, c.rope_base)?;
        let k = g.matmul(x, p("wk"))?;
        let k = g.reshape(k, &[batch, seq, c.num_kv_heads, hd])?;
        let k = g.rope(k, c.rope_base)?;
        let v = g.matmul(x, p("wv"))?;
        let v = g.reshape(v, &[batch, seq, c.num_kv_heads, hd])?;
        let a = g.causal_attention(q, k, v)?;
        let a = g.reshape(a, &[batch, seq, c.hidden_size])?;
        let o = g.matmul(a, p("wo"))?;
        let h = g.add(h, o)?;

        let x = g.rms_norm(h, p("ffn_norm"), RMS_EPS)?;
        let up = g.matmul(x, p("w_up"))?;
        let act = match c.activation {
            Activation::Swiglu => {
                let gate = g.matmul(x, p("w_gate"))?;
                let gate = g.silu(gate)?;
                g.mul(gate, up)?
            }
            Activation::Relu => g.relu(up)?,
            Activation::Gelu => g.gelu(up)?,
            Activation::Silu => g.silu(up)?,
        };
        let down = g.matmul(act, p("w_down"))?;
        g.add(h, down)
    }

    /// Final norm and output projection, `[batch, seq, vocab]`.
    pub fn head(&self, g: &mut Graph, bound: &[Var], h: Var) -> Result<Var> {
        let x = g.rms_norm(h, self.var(bound, "final_norm"), RMS_EPS)?;
        let table = if self.config.tie_embeddings { "embed" } else { "lm_head" };
        g.matmul_t(x, self.var(bound, table))
    }

    /// Runs the model on `ids` (`batch` equal-length sequences, row-major).
    ///
    /// With `stop_after = Some(k)` only layers `1..=k` run and no logits are produced.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        bound: &[Var],
        ids: &[u32],
        batch: usize,
        stop_after: Option<usize>,
    ) -> Result<ForwardPass> {
        let last = stop_after.unwrap_or(self.config.num_layers);
        if last > self.config.num_layers {
            return Err(Error::invalid(format!(
                "layer {last} requested from a {}-layer model",
                self.config.num_layers
            )));
        }
        let mut h = self.embed(g, bound, ids, batch)?;
        let mut hidden = Vec::with_capacity(last + 1);
        hidden.push(h);
        for l in 0..last {
            h = self.block(g, bound, l, h)?;
            hidden.push(h);
        }
        let logits = if stop_after.is_none() {
            Some(self.head(g, bound, h)?)
        } else {
            None
        };
        Ok(ForwardPass { logits, hidden })
    }

    /// Gradient-free forward returning logits and every hidden state.
    pub fn forward_with_hidden(&self, ids: &[u32], batch: usize) -> Result<(Tensor, HiddenStates)> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let pass = self.forward_graph(&mut g, &bound, ids, batch, None)?;
        let logits = g.value(pass.logits.expect("full pass")).clone();
        let hidden = pass.hidden.iter().map(|&v| g.value(v).clone()).collect();
        Ok((logits, HiddenStates(hidden)))
    }
}
