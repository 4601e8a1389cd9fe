//! Autoregressive generation: greedy, beam search, top-k and top-p sampling.
//!
//! Every strategy reports the sum of full-distribution log-softmax values of
//! the emitted tokens, so [`score_sequence`] reproduces it exactly. Ties are
//! broken toward the lowest token id.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::EOS;
use crate::lm::{Lm, ModelError};
use crate::projector::Projector;
use crate::rng::seeded;
use crate::tensor::Tensor;

type Result<T, E = ModelError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    Greedy,
    #[default]
    Beam,
    TopK,
    TopP,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    pub beam_width: usize,
    pub k: usize,
    pub p: f64,
    pub max_new_tokens: usize,
    pub seed: u64,
    pub length_normalization: bool,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            strategy: Strategy::Beam,
            beam_width: 4,
            k: 10,
            p: 0.9,
            max_new_tokens: 256,
            seed: 0,
            length_normalization: false,
        }
    }
}

impl DecodeConfig {
    pub fn greedy(max_new_tokens: usize) -> Self {
        Self {
            strategy: Strategy::Greedy,
            max_new_tokens,
            ..Default::default()
        }
    }

    pub fn beam(beam_width: usize, max_new_tokens: usize) -> Self {
        Self {
            strategy: Strategy::Beam,
            beam_width,
            max_new_tokens,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(ModelError::Config(m.to_string()));
        if self.beam_width == 0 {
            return fail("beam_width must be at least 1");
        }
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if !(self.p > 0.0 && self.p <= 1.0) {
            return fail("p must lie in (0, 1]");
        }
        if self.max_new_tokens == 0 {
            return fail("max_new_tokens must be at least 1");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    Eos,
    Length,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Generation {
    /// Emitted ids, including the final eos when `stop == Eos`.
    pub token_ids: Vec<usize>,
    pub logprob: f64,
    pub stop: StopReason,
}

impl Generation {
    /// Emitted ids without the terminating eos.
    pub fn content(&self) -> &[usize] {
        match self.stop {
            StopReason::Eos => &self.token_ids[..self.token_ids.len() - 1],
            StopReason::Length => &self.token_ids,
        }
    }
}

/// A language model with an optional fixed prefix.
pub struct Conditioned<'a> {
    lm: &'a Lm,
    prefix: Option<Tensor>,
}

impl<'a> Conditioned<'a> {
    pub fn new(lm: &'a Lm, projector: Option<(&Projector, &[f64])>) -> Result<Self> {
        let prefix = projector.map(|(p, f)| p.project(f)).transpose()?;
        Ok(Self { lm, prefix })
    }

    pub fn with_prefix(lm: &'a Lm, prefix: Option<Tensor>) -> Self {
        Self { lm, prefix }
    }

    fn prefix_len(&self) -> usize {
        self.prefix.as_ref().map_or(0, Tensor::rows)
    }

    fn log_probs(&self, ids: &[usize]) -> Result<Vec<f64>> {
        Ok(log_softmax(&self.lm.next_logits(self.prefix.as_ref(), ids)?))
    }

    fn check_len(&self, len: usize) -> Result<()> {
        let max = self.lm.config().max_seq_len;
        let len = self.prefix_len() + len;
        if len > max {
            return Err(ModelError::Length { len, max });
        }
        Ok(())
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Ids sorted by descending value, ascending id on ties.
fn ranked(xs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..xs.len()).collect();
    idx.sort_by(|&a, &b| xs[b].total_cmp(&xs[a]).then(a.cmp(&b)));
    idx
}

/// Support kept by top-k truncation.
pub fn top_k_support(logp: &[f64], k: usize) -> Vec<usize> {
    let mut r = ranked(logp);
    r.truncate(k.max(1));
    r
}

/// Smallest prefix of the sorted distribution whose mass reaches `p`.
pub fn top_p_support(logp: &[f64], p: f64) -> Vec<usize> {
    let r = ranked(logp);
    let mut mass = 0.0;
    let mut out = Vec::new();
    for id in r {
        out.push(id);
        mass += logp[id].exp();
        if mass >= p - 1e-12 {
            break;
        }
    }
    out
}

fn sample_from<R: Rng>(logp: &[f64], support: &[usize], rng: &mut R) -> usize {
    let weights: Vec<f64> = support.iter().map(|&i| logp[i].exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (&id, w) in support.iter().zip(&weights) {
        if u < *w {
            return id;
        }
        u -= w;
    }
    *support.last().expect("non-empty support")
}

/// Generate a continuation of `prompt`, optionally conditioned on image
/// features through `projector`.
pub fn generate(
    lm: &Lm,
    projector: Option<(&Projector, &[f64])>,
    prompt: &[usize],
    cfg: &DecodeConfig,
) -> Result<Generation> {
    generate_with(&Conditioned::new(lm, projector)?, prompt, cfg)
}

pub fn generate_with(model: &Conditioned<'_>, prompt: &[usize], cfg: &DecodeConfig) -> Result<Generation> {
    cfg.validate()?;
    if prompt.is_empty() {
        return Err(ModelError::Config("prompt must contain at least one token".into()));
    }
    model.check_len(prompt.len() + cfg.max_new_tokens)?;
    match cfg.strategy {
        Strategy::Beam => beam(model, prompt, cfg),
        Strategy::Greedy | Strategy::TopK | Strategy::TopP => {
            let mut rng = seeded(cfg.seed);
            let mut ids = prompt.to_vec();
            let mut logprob = 0.0;
            for _ in 0..cfg.max_new_tokens {
                let lp = model.log_probs(&ids)?;
                let next = match cfg.strategy {
                    Strategy::TopK => sample_from(&lp, &top_k_support(&lp, cfg.k), &mut rng),
                    Strategy::TopP => sample_from(&lp, &top_p_support(&lp, cfg.p), &mut rng),
                    _ => argmax(&lp),
                };
                logprob += lp[next];
                ids.push(next);
                if next == EOS {
                    return Ok(Generation {
                        token_ids: ids.split_off(prompt.len()),
                        logprob,
                        stop: StopReason::Eos,
                    });
                }
            }
            Ok(Generation {
                token_ids: ids.split_off(prompt.len()),
                logprob,
                stop: StopReason::Length,
            })
        }
    }
}

#[derive(Clone)]
struct Hyp {
    ids: Vec<usize>,
    score: f64,
}

fn by_score(a: &Hyp, b: &Hyp) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.ids.cmp(&b.ids))
}

fn beam(model: &Conditioned<'_>, prompt: &[usize], cfg: &DecodeConfig) -> Result<Generation> {
    let width = cfg.beam_width;
    let mut active = vec![Hyp {
        ids: Vec::new(),
        score: 0.0,
    }];
    let mut pool: Vec<Hyp> = Vec::new();
    for _ in 0..cfg.max_new_tokens {
        let mut cands = Vec::with_capacity(active.len() * model.lm.config().vocab_size);
        for h in &active {
            let mut ids = prompt.to_vec();
            ids.extend(&h.ids);
            for (tok, lp) in model.log_probs(&ids)?.into_iter().enumerate() {
                let mut next = h.ids.clone();
                next.push(tok);
                cands.push(Hyp {
                    ids: next,
                    score: h.score + lp,
                });
            }
        }
        cands.sort_by(by_score);
        active.clear();
        for (rank, c) in cands.into_iter().enumerate() {
            if c.ids.last() == Some(&EOS) {
                if rank < width {
                    pool.push(c);
                }
            } else if active.len() < width {
                active.push(c);
            }
            if active.len() == width && rank >= width {
                break;
            }
        }
        pool.sort_by(by_score);
        pool.truncate(width);
        if active.is_empty() {
            break;
        }
        // extensions only lower a raw score
        if !cfg.length_normalization && pool.first().is_some_and(|p| p.score >= active[0].score) {
            break;
        }
    }
    let key = |h: &Hyp| {
        if cfg.length_normalization {
            h.score / h.ids.len().max(1) as f64
        } else {
            h.score
        }
    };
    let best = pool
        .iter()
        .map(|h| (h, StopReason::Eos))
        .chain(active.iter().map(|h| (h, StopReason::Length)))
        .min_by(|(a, _), (b, _)| key(b).total_cmp(&key(a)).then_with(|| a.ids.cmp(&b.ids)))
        .expect("beam keeps at least one hypothesis");
    Ok(Generation {
        token_ids: best.0.ids.clone(),
        logprob: best.0.score,
        stop: best.1,
    })
}

/// Teacher-forced log-probability of `continuation` after `prompt`.
pub fn score_sequence(
    lm: &Lm,
    projector: Option<(&Projector, &[f64])>,
    prompt: &[usize],
    continuation: &[usize],
) -> Result<f64> {
    score_with(&Conditioned::new(lm, projector)?, prompt, continuation)
}

pub fn score_with(model: &Conditioned<'_>, prompt: &[usize], continuation: &[usize]) -> Result<f64> {
    if continuation.is_empty() {
        return Ok(0.0);
    }
    if prompt.is_empty() {
        return Err(ModelError::Config("prompt must contain at least one token".into()));
    }
    let mut ids = prompt.to_vec();
    ids.extend(&continuation[..continuation.len() - 1]);
    model.check_len(ids.len())?;
    let logits = model.lm.logits(model.prefix.as_ref(), &ids)?;
    let start = model.prefix_len() + prompt.len() - 1;
    Ok(continuation
        .iter()
        .enumerate()
        .map(|(i, &tok)| log_softmax(logits.row(start + i))[tok])
        .sum())
}
