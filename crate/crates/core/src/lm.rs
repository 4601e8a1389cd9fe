//! Decoder-only transformer language model.
//!
//! Pre-layer-norm residual blocks, learned absolute positions shared by an
//! optional prefix and the token sequence, and an untied output projection.
//! Parameters are stored in a flat [`ParamSet`]; a forward pass binds them as
//! graph leaves and addresses them through an index layout.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::seeded;
use crate::tensor::{Graph, Tensor, TensorError, Var};

pub const LN_EPS: f64 = 1e-5;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model configuration: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds the context window of {max}")]
    Length { len: usize, max: usize },
    #[error("loss mask selects no target positions")]
    EmptyMask,
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    /// Total number of scalars.
    pub fn n_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Bind every tensor as a graph leaf, trainable or constant.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| if trainable { g.param(t) } else { g.constant(t.clone()) })
            .collect()
    }

    pub fn zero_grad(&mut self) {
        self.tensors.iter_mut().for_each(Tensor::zero_grad);
    }

    /// Replace the tensor values with `other`'s after checking names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.names != other.names {
            return Err(ModelError::Config("parameter names do not match".into()));
        }
        for ((name, mine), theirs) in self.names.iter().zip(&mut self.tensors).zip(&other.tensors) {
            if mine.shape() != theirs.shape() {
                return Err(ModelError::Config(format!(
                    "parameter {name}: shape {:?} vs {:?}",
                    mine.shape(),
                    theirs.shape()
                )));
            }
            *mine = theirs.clone();
        }
        Ok(())
    }
}

pub(crate) struct Init {
    rng: ChaCha8Rng,
    std: f64,
}

impl Init {
    pub(crate) fn new(seed: u64, std: f64) -> Self {
        Self { rng: seeded(seed), std }
    }

    pub(crate) fn normal(&mut self, shape: &[usize]) -> Tensor {
        Tensor::randn(shape, self.std, &mut self.rng)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) struct HeadLayout {
    wq: usize,
    bq: usize,
    wk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
}

/// Index layout of one transformer block inside a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub(crate) struct BlockLayout {
    ln1_g: usize,
    ln1_b: usize,
    heads: Vec<HeadLayout>,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

/// Scalar count of one block of width `d`, `n_heads` heads and MLP width `d_ff`.
pub(crate) fn block_param_count(d: usize, d_ff: usize) -> usize {
    // ln1, q/k/v maps, q/v biases, per-head output maps, output bias, ln2, MLP
    2 * d + 3 * d * d + 2 * d + d * d + d + 2 * d + (d * d_ff + d_ff) + (d_ff * d + d)
}

pub(crate) fn init_block(
    ps: &mut ParamSet,
    init: &mut Init,
    prefix: &str,
    d: usize,
    n_heads: usize,
    d_ff: usize,
) -> BlockLayout {
    let dh = d / n_heads;
    let ln1_g = ps.push(format!("{prefix}.ln1.gain"), Tensor::filled(&[d], 1.0));
    let ln1_b = ps.push(format!("{prefix}.ln1.bias"), Tensor::zeros(&[d]));
    let heads = (0..n_heads)
        .map(|h| {
            let p = format!("{prefix}.attn.head{h}");
            HeadLayout {
                wq: ps.push(format!("{p}.q.weight"), init.normal(&[d, dh])),
                bq: ps.push(format!("{p}.q.bias"), Tensor::zeros(&[dh])),
                wk: ps.push(format!("{p}.k.weight"), init.normal(&[d, dh])),
                wv: ps.push(format!("{p}.v.weight"), init.normal(&[d, dh])),
                bv: ps.push(format!("{p}.v.bias"), Tensor::zeros(&[dh])),
                wo: ps.push(format!("{p}.out.weight"), init.normal(&[dh, d])),
            }
        })
        .collect();
    BlockLayout {
        ln1_g,
        ln1_b,
        heads,
        bo: ps.push(format!("{prefix}.attn.out.bias"), Tensor::zeros(&[d])),
        ln2_g: ps.push(format!("{prefix}.ln2.gain"), Tensor::filled(&[d], 1.0)),
        ln2_b: ps.push(format!("{prefix}.ln2.bias"), Tensor::zeros(&[d])),
        fc1_w: ps.push(format!("{prefix}.mlp.fc1.weight"), init.normal(&[d, d_ff])),
        fc1_b: ps.push(format!("{prefix}.mlp.fc1.bias"), Tensor::zeros(&[d_ff])),
        fc2_w: ps.push(format!("{prefix}.mlp.fc2.weight"), init.normal(&[d_ff, d])),
        fc2_b: ps.push(format!("{prefix}.mlp.fc2.bias"), Tensor::zeros(&[d])),
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var, TensorError> {
    let y = g.matmul(x, w)?;
    g.add(y, b)
}

/// `x + attn(ln1(x))`, then `+ mlp(ln2(·))`. Keys carry no bias.
pub(crate) fn block_forward(
    g: &mut Graph,
    p: &[Var],
    lay: &BlockLayout,
    x: Var,
    causal: bool,
) -> Result<Var, TensorError> {
    let h = g.layer_norm(x, p[lay.ln1_g], p[lay.ln1_b], LN_EPS)?;
    let dh = g.value(p[lay.heads[0].wq]).cols();
    let scale = 1.0 / (dh as f64).sqrt();
    let mut attn: Option<Var> = None;
    for head in &lay.heads {
        let q = linear(g, h, p[head.wq], p[head.bq])?;
        let k = g.matmul(h, p[head.wk])?;
        let v = linear(g, h, p[head.wv], p[head.bv])?;
        let kt = g.transpose(k)?;
        let s = g.matmul(q, kt)?;
        let mut s = g.scale(s, scale)?;
        if causal {
            s = g.causal_mask(s)?;
        }
        let a = g.softmax(s)?;
        let o = g.matmul(a, v)?;
        let o = g.matmul(o, p[head.wo])?;
        attn = Some(match attn {
            Some(acc) => g.add(acc, o)?,
            None => o,
        });
    }
    let attn = g.add(attn.expect("at least one head"), p[lay.bo])?;
    let x = g.add(x, attn)?;
    let h = g.layer_norm(x, p[lay.ln2_g], p[lay.ln2_b], LN_EPS)?;
    let h = linear(g, h, p[lay.fc1_w], p[lay.fc1_b])?;
    let h = g.gelu(h)?;
    let h = linear(g, h, p[lay.fc2_w], p[lay.fc2_b])?;
    g.add(x, h)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for LmConfig {
    fn default() -> Self {
        Self::desk(0)
    }
}

impl LmConfig {
    /// d_model 128, 4 layers, 4 heads, MLP 512, context 512.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            d_model: 128,
            n_layers: 4,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 512,
            seed: 0,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads.max(1)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(ModelError::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.d_ff == 0 || self.max_seq_len == 0 {
            return fail("vocab_size, d_model, d_ff and max_seq_len must be positive".into());
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        Ok(())
    }

    /// Exact trainable scalar count.
    pub fn count_params(&self) -> usize {
        let d = self.d_model;
        self.vocab_size * d
            + self.max_seq_len * d
            + self.n_layers * block_param_count(d, self.d_ff)
            + 2 * d
            + d * self.vocab_size
            + self.vocab_size
    }
}

#[derive(Clone, Debug, PartialEq)]
struct LmLayout {
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockLayout>,
    lnf_g: usize,
    lnf_b: usize,
    out_w: usize,
    out_b: usize,
}

/// Model input: optional prefix embedding rows followed by token ids.
#[derive(Clone, Debug, PartialEq)]
pub struct PrefixedBatch {
    pub prefix: Option<Tensor>,
    pub token_ids: Vec<usize>,
    /// One flag per token; never covers prefix rows.
    pub loss_mask: Vec<bool>,
}

impl PrefixedBatch {
    pub fn prefix_len(&self) -> usize {
        self.prefix.as_ref().map_or(0, Tensor::rows)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lm {
    cfg: LmConfig,
    layout: LmLayout,
    params: ParamSet,
}

impl Lm {
    /// Fresh model with N(0, 0.02) weights, unit layer-norm gains and zero biases.
    pub fn new(cfg: LmConfig) -> Result<Self> {
        Self::with_init_std(cfg, INIT_STD)
    }

    pub fn with_init_std(cfg: LmConfig, std: f64) -> Result<Self> {
        cfg.validate()?;
        let mut init = Init::new(cfg.seed, std);
        let mut ps = ParamSet::new();
        let d = cfg.d_model;
        let tok_emb = ps.push("tok_emb", init.normal(&[cfg.vocab_size, d]));
        let pos_emb = ps.push("pos_emb", init.normal(&[cfg.max_seq_len, d]));
        let blocks = (0..cfg.n_layers)
            .map(|l| init_block(&mut ps, &mut init, &format!("block{l}"), d, cfg.n_heads, cfg.d_ff))
            .collect();
        let layout = LmLayout {
            tok_emb,
            pos_emb,
            blocks,
            lnf_g: ps.push("ln_f.gain", Tensor::filled(&[d], 1.0)),
            lnf_b: ps.push("ln_f.bias", Tensor::zeros(&[d])),
            out_w: ps.push("out.weight", init.normal(&[d, cfg.vocab_size])),
            out_b: ps.push("out.bias", Tensor::zeros(&[cfg.vocab_size])),
        };
        Ok(Self {
            cfg,
            layout,
            params: ps,
        })
    }

    pub fn config(&self) -> &LmConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len > self.cfg.max_seq_len {
            return Err(ModelError::Length {
                len,
                max: self.cfg.max_seq_len,
            });
        }
        Ok(())
    }

    /// Residual stream after the last block, one row per prefix row and token.
    fn hidden(&self, g: &mut Graph, p: &[Var], prefix: Option<Var>, ids: &[usize]) -> Result<Var> {
        let k = prefix.map_or(0, |v| g.value(v).rows());
        let len = k + ids.len();
        self.check_len(len)?;
        if len == 0 {
            return Err(ModelError::Config("empty input sequence".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.cfg.vocab_size) {
            return Err(ModelError::Config(format!("token id {bad} outside vocabulary")));
        }
        let mut parts = Vec::with_capacity(2);
        if let Some(pv) = prefix {
            if g.shape(pv).len() != 2 || g.shape(pv)[1] != self.cfg.d_model {
                return Err(TensorError::Shape {
                    op: "prefix",
                    lhs: g.shape(pv).to_vec(),
                    rhs: vec![k, self.cfg.d_model],
                }
                .into());
            }
            if k > 0 {
                parts.push(pv);
            }
        }
        if !ids.is_empty() {
            parts.push(g.embedding(p[self.layout.tok_emb], ids)?);
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            g.concat_rows(&parts)?
        };
        let pos = g.slice_rows(p[self.layout.pos_emb], 0, len)?;
        let mut x = g.add(x, pos)?;
        for b in &self.layout.blocks {
            x = block_forward(g, p, b, x, true)?;
        }
        Ok(x)
    }

    fn head(&self, g: &mut Graph, p: &[Var], h: Var) -> Result<Var> {
        let h = g.layer_norm(h, p[self.layout.lnf_g], p[self.layout.lnf_b], LN_EPS)?;
        let y = g.matmul(h, p[self.layout.out_w])?;
        Ok(g.add(y, p[self.layout.out_b])?)
    }

    /// Logits for every position, `(k + T) × vocab_size`.
    pub fn forward(&self, g: &mut Graph, p: &[Var], prefix: Option<Var>, ids: &[usize]) -> Result<Var> {
        let h = self.hidden(g, p, prefix, ids)?;
        self.head(g, p, h)
    }

    /// Mean masked next-token cross-entropy. Only the rows that predict a
    /// masked target are projected to the vocabulary.
    pub fn loss(&self, g: &mut Graph, p: &[Var], prefix: Option<Var>, ids: &[usize], mask: &[bool]) -> Result<Var> {
        if mask.len() != ids.len() {
            return Err(ModelError::Config(format!(
                "loss mask length {} differs from {} tokens",
                mask.len(),
                ids.len()
            )));
        }
        let first = (1..ids.len()).find(|&j| mask[j]).ok_or(ModelError::EmptyMask)?;
        let k = prefix.map_or(0, |v| g.value(v).rows());
        let h = self.hidden(g, p, prefix, ids)?;
        let h = g.slice_rows(h, k + first - 1, k + ids.len() - 1)?;
        let logits = self.head(g, p, h)?;
        Ok(g.cross_entropy(logits, &ids[first..], &mask[first..])?)
    }

    /// Forward pass without gradient tracking.
    pub fn logits(&self, prefix: Option<&Tensor>, ids: &[usize]) -> Result<Tensor> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let pv = prefix.map(|t| g.constant(t.clone()));
        let out = self.forward(&mut g, &p, pv, ids)?;
        Ok(g.value(out).clone())
    }

    /// Logits of the last position only.
    pub fn next_logits(&self, prefix: Option<&Tensor>, ids: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::inference();
        let p = self.params.bind(&mut g, false);
        let pv = prefix.map(|t| g.constant(t.clone()));
        let h = self.hidden(&mut g, &p, pv, ids)?;
        let n = g.value(h).rows();
        let last = g.slice_rows(h, n - 1, n)?;
        let out = self.head(&mut g, &p, last)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Rebuild a model around stored parameters.
    pub fn from_params(cfg: LmConfig, params: &ParamSet) -> Result<Self> {
        let mut lm = Self::new(cfg)?;
        lm.params.load_from(params)?;
        Ok(lm)
    }
}

/// Logits of `batch` under `lm`.
pub fn lm_forward(lm: &Lm, batch: &PrefixedBatch) -> Result<Tensor> {
    lm.logits(batch.prefix.as_ref(), &batch.token_ids)
}

/// Mean masked next-token cross-entropy of precomputed logits: row `k + t`
/// predicts token `t + 1`.
pub fn lm_loss(logits: &Tensor, batch: &PrefixedBatch) -> Result<f64> {
    let k = batch.prefix_len();
    let t = batch.token_ids.len();
    if logits.rows() != k + t || batch.loss_mask.len() != t {
        return Err(TensorError::Shape {
            op: "lm_loss",
            lhs: logits.shape().to_vec(),
            rhs: vec![k + t, batch.loss_mask.len()],
        }
        .into());
    }
    if !batch.loss_mask.iter().skip(1).any(|&m| m) {
        return Err(ModelError::EmptyMask);
    }
    let mut g = Graph::inference();
    let l = g.constant(logits.clone());
    let rows = g.slice_rows(l, k, k + t - 1)?;
    let ce = g.cross_entropy(rows, &batch.token_ids[1..], &batch.loss_mask[1..])?;
    Ok(g.value(ce).item())
}
