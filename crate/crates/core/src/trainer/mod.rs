//! Instruction tuning of the language model, optionally with the projector.
//!
//! Three regimes share one loop: text-only tuning of the LM, joint tuning of
//! projector and LM, and projector-only tuning against a frozen LM. Frozen
//! parameters are bound as graph constants and get no optimizer state.

mod checkpoint;
mod optim;

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use checkpoint::{load_checkpoint, save_checkpoint, CheckpointHeader, TensorEntry, FORMAT_VERSION, MAGIC};
pub use optim::{adamw_step, grad_norm, lr_at, AdamState, OptimHyper};

use crate::corpus::EncodedSample;
use crate::lm::{Lm, ModelError};
use crate::projector::Projector;
use crate::rng::{derive_seed, seeded};
use crate::tensor::{grad_check, GradCheckReport, Graph, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training setup: {0}")]
    Config(String),
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(usize),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        Self::Model(e.into())
    }
}

type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    /// LM only; image features are ignored.
    LlmKg,
    /// Projector and LM.
    VlmKg,
    /// Projector only; the LM stays fixed.
    VlmKgFrozen,
}

impl Regime {
    pub const ALL: [Regime; 3] = [Regime::LlmKg, Regime::VlmKg, Regime::VlmKgFrozen];

    pub fn as_str(self) -> &'static str {
        match self {
            Regime::LlmKg => "llm_kg",
            Regime::VlmKg => "vlm_kg",
            Regime::VlmKgFrozen => "vlm_kg_frozen",
        }
    }

    pub fn uses_projector(self) -> bool {
        self != Regime::LlmKg
    }

    pub fn trains_lm(self) -> bool {
        self != Regime::VlmKgFrozen
    }

    /// Default optimizer settings for the regime.
    pub fn default_hyper(self) -> OptimHyper {
        match self {
            Regime::LlmKg => OptimHyper::llm_kg(),
            _ => OptimHyper::vlm_kg(),
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Regime {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.replace('-', "_");
        Regime::ALL
            .into_iter()
            .find(|r| r.as_str() == norm)
            .ok_or_else(|| TrainError::Config(format!("unknown regime {s:?}")))
    }
}

/// Language model plus optional projector.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub lm: Lm,
    pub projector: Option<Projector>,
}

impl Model {
    /// Prefix embeddings for a sample under `regime`.
    pub fn prefix_for(&self, regime: Regime, features: Option<&[f64]>) -> Result<Option<Tensor>> {
        if !regime.uses_projector() {
            return Ok(None);
        }
        let p = self
            .projector
            .as_ref()
            .ok_or_else(|| TrainError::Config(format!("regime {regime} needs a projector")))?;
        let f = features.ok_or_else(|| TrainError::Config("sample has no image features".into()))?;
        Ok(Some(p.project(f)?))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub regime: Regime,
    pub hyper: OptimHyper,
    /// Train on every position instead of only the output segment.
    pub full_sequence_loss: bool,
    /// Compute validation loss after every epoch rather than only the last.
    pub validate_every_epoch: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            regime: Regime::LlmKg,
            hyper: OptimHyper::llm_kg(),
            full_sequence_loss: false,
            validate_every_epoch: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct TrainReport {
    /// Token-weighted mean training loss per epoch.
    pub epoch_train_loss: Vec<f64>,
    /// Token-weighted validation loss, per epoch or only after the last.
    pub epoch_val_loss: Vec<f64>,
    pub steps: u64,
    pub skipped_steps: u64,
    #[serde(skip)]
    pub wall_time_secs: f64,
    pub checkpoint: Option<PathBuf>,
}

impl TrainReport {
    pub fn final_train_loss(&self) -> Option<f64> {
        self.epoch_train_loss.last().copied()
    }

    pub fn final_val_loss(&self) -> Option<f64> {
        self.epoch_val_loss.last().copied()
    }
}

/// Where to write the step log and the final checkpoint.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub log_csv: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

fn check_setup(model: &Model, data: &[&EncodedSample], regime: Regime) -> Result<()> {
    let lm = model.lm.config();
    let k = if regime.uses_projector() {
        let p = model
            .projector
            .as_ref()
            .ok_or_else(|| TrainError::Config(format!("regime {regime} needs a projector")))?;
        if p.config().d_lm != lm.d_model {
            return Err(TrainError::Config(format!(
                "projector width {} differs from LM width {}",
                p.config().d_lm,
                lm.d_model
            )));
        }
        p.config().output_rows()
    } else {
        0
    };
    for s in data {
        if let Some(&bad) = s.token_ids.iter().find(|&&t| t >= lm.vocab_size) {
            return Err(TrainError::Config(format!("sample {} uses token {bad} beyond the vocabulary", s.id)));
        }
        if k + s.token_ids.len() > lm.max_seq_len {
            return Err(TrainError::Config(format!(
                "sample {} needs {} positions, context is {}",
                s.id,
                k + s.token_ids.len(),
                lm.max_seq_len
            )));
        }
        if regime.uses_projector() {
            let d_vis = model.projector.as_ref().map_or(0, |p| p.config().d_vis);
            match &s.image_features {
                Some(f) if f.len() == d_vis => {}
                Some(f) => {
                    return Err(TrainError::Config(format!(
                        "sample {} has {} image features, projector expects {d_vis}",
                        s.id,
                        f.len()
                    )))
                }
                None => return Err(TrainError::Config(format!("sample {} has no image features", s.id))),
            }
        }
    }
    Ok(())
}

fn mask_for(s: &EncodedSample, full: bool) -> Vec<bool> {
    if full {
        (0..s.token_ids.len()).map(|i| i > 0).collect()
    } else {
        s.loss_mask.clone()
    }
}

fn targets(mask: &[bool]) -> usize {
    mask.iter().skip(1).filter(|&&m| m).count()
}

/// Forward and backward for one sample; gradients of `loss · weight` are
/// folded into the parameters' grad buffers. Returns the unweighted loss.
fn accumulate(model: &mut Model, s: &EncodedSample, regime: Regime, full: bool, weight: f64) -> Result<f64> {
    let mut g = Graph::new();
    let lv = model.lm.params().bind(&mut g, regime.trains_lm());
    let mut pv = Vec::new();
    let prefix = match (&model.projector, regime.uses_projector()) {
        (Some(p), true) => {
            pv = p.params().bind(&mut g, true);
            let f = s.image_features.as_ref().expect("checked");
            let fv = g.constant(Tensor::new(vec![f.len()], f.clone())?);
            Some(p.forward(&mut g, &pv, fv)?)
        }
        _ => None,
    };
    let loss = model.lm.loss(&mut g, &lv, prefix, &s.token_ids, &mask_for(s, full))?;
    let value = g.value(loss).item();
    let scaled = g.scale(loss, weight)?;
    let grads = g.backward(scaled)?;
    if regime.trains_lm() {
        for (v, t) in lv.iter().zip(model.lm.params_mut().tensors_mut()) {
            grads.accumulate_into(*v, t);
        }
    }
    if let Some(p) = model.projector.as_mut().filter(|_| regime.uses_projector()) {
        for (v, t) in pv.iter().zip(p.params_mut().tensors_mut()) {
            grads.accumulate_into(*v, t);
        }
    }
    Ok(value)
}

/// Token-weighted mean masked loss over `data`, without gradient tracking.
pub fn evaluate_loss(model: &Model, data: &[EncodedSample], regime: Regime, full_sequence: bool) -> Result<f64> {
    let refs: Vec<&EncodedSample> = data.iter().collect();
    check_setup(model, &refs, regime)?;
    let (mut total, mut count) = (0.0, 0usize);
    for s in data {
        let mask = mask_for(s, full_sequence);
        let prefix = model.prefix_for(regime, s.image_features.as_deref())?;
        let mut g = Graph::inference();
        let lv = model.lm.params().bind(&mut g, false);
        let pv = prefix.map(|t| g.constant(t));
        let l = model.lm.loss(&mut g, &lv, pv, &s.token_ids, &mask)?;
        let n = targets(&mask);
        total += g.value(l).item() * n as f64;
        count += n;
    }
    Ok(if count == 0 { f64::NAN } else { total / count as f64 })
}

/// Run `cfg.hyper.epochs` epochs over `train`. Each optimizer step averages
/// gradients over `grad_accum_steps` micro-batches of `batch_size` samples.
pub fn train(
    model: &mut Model,
    train: &[EncodedSample],
    val: &[EncodedSample],
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
) -> Result<TrainReport> {
    let started = Instant::now();
    let hyper = &cfg.hyper;
    hyper.validate()?;
    if train.is_empty() {
        return Err(TrainError::Config("training set is empty".into()));
    }
    let all: Vec<&EncodedSample> = train.iter().chain(val).collect();
    check_setup(model, &all, cfg.regime)?;
    for s in train {
        if targets(&mask_for(s, cfg.full_sequence_loss)) == 0 {
            return Err(ModelError::EmptyMask.into());
        }
    }

    let mut lm_state = cfg.regime.trains_lm().then(|| AdamState::new(model.lm.params()));
    let mut proj_state = match (&model.projector, cfg.regime.uses_projector()) {
        (Some(p), true) => Some(AdamState::new(p.params())),
        _ => None,
    };
    let mut log = match &outputs.log_csv {
        Some(p) => {
            let mut w = std::io::BufWriter::new(std::fs::File::create(p)?);
            writeln!(w, "step,epoch,lr,loss")?;
            Some(w)
        }
        None => None,
    };

    let mut rng = seeded(derive_seed(cfg.seed, "shuffle"));
    let group = hyper.batch_size * hyper.grad_accum_steps;
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=hyper.epochs {
        order.shuffle(&mut rng);
        let (mut ep_loss, mut ep_tokens) = (0.0, 0usize);
        for chunk in order.chunks(group) {
            model.lm.params_mut().zero_grad();
            if let Some(p) = model.projector.as_mut() {
                p.params_mut().zero_grad();
            }
            let micro: Vec<&[usize]> = chunk.chunks(hyper.batch_size).collect();
            let (mut step_loss, mut step_n) = (0.0, 0usize);
            for mb in &micro {
                let weight = 1.0 / (mb.len() * micro.len()) as f64;
                for &i in *mb {
                    let s = &train[i];
                    let l = accumulate(model, s, cfg.regime, cfg.full_sequence_loss, weight)?;
                    let n = targets(&mask_for(s, cfg.full_sequence_loss));
                    ep_loss += l * n as f64;
                    ep_tokens += n;
                    step_loss += l;
                    step_n += 1;
                }
            }
            let step = report.steps + 1;
            let lr = lr_at(step, hyper);
            match apply_update(model, lm_state.as_mut(), proj_state.as_mut(), hyper, step, lr) {
                Ok(()) => report.steps = step,
                Err(TrainError::NonFiniteGradient(_)) => report.skipped_steps += 1,
                Err(e) => return Err(e),
            }
            if let Some(w) = log.as_mut() {
                writeln!(w, "{step},{epoch},{lr:e},{}", step_loss / step_n as f64)?;
            }
        }
        report.epoch_train_loss.push(ep_loss / ep_tokens as f64);
        if !val.is_empty() && (cfg.validate_every_epoch || epoch == hyper.epochs) {
            report
                .epoch_val_loss
                .push(evaluate_loss(model, val, cfg.regime, cfg.full_sequence_loss)?);
        }
    }
    if let Some(mut w) = log {
        w.flush()?;
    }
    if let Some(path) = &outputs.checkpoint {
        save_checkpoint(path, model, Some(cfg.regime), report.steps)?;
        report.checkpoint = Some(path.clone());
    }
    report.wall_time_secs = started.elapsed().as_secs_f64();
    Ok(report)
}

fn apply_update(
    model: &mut Model,
    lm_state: Option<&mut AdamState>,
    proj_state: Option<&mut AdamState>,
    hyper: &OptimHyper,
    step: u64,
    lr: f64,
) -> Result<()> {
    let mut norm_sq = 0.0;
    if lm_state.is_some() {
        norm_sq += grad_norm(model.lm.params().tensors()).powi(2);
    }
    if let (Some(p), true) = (&model.projector, proj_state.is_some()) {
        norm_sq += grad_norm(p.params().tensors()).powi(2);
    }
    let norm = norm_sq.sqrt();
    if !norm.is_finite() {
        return Err(TrainError::NonFiniteGradient(0));
    }
    if let Some(c) = hyper.clip_norm {
        if norm > c {
            let f = c / norm;
            optim::scale_grads(model.lm.params_mut().tensors_mut(), f);
            if let Some(p) = model.projector.as_mut() {
                optim::scale_grads(p.params_mut().tensors_mut(), f);
            }
        }
    }
    if let Some(st) = lm_state {
        adamw_step(model.lm.params_mut().tensors_mut(), st, hyper, step, lr)?;
    }
    if let (Some(st), Some(p)) = (proj_state, model.projector.as_mut()) {
        adamw_step(p.params_mut().tensors_mut(), st, hyper, step, lr)?;
    }
    Ok(())
}

/// Save `model` to `dir/name` and return the path.
pub fn checkpoint_into(dir: &Path, name: &str, model: &Model, regime: Regime, step: u64) -> Result<PathBuf> {
    let path = dir.join(name);
    save_checkpoint(&path, model, Some(regime), step)?;
    Ok(path)
}

fn as_tensor_error(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "model",
            msg: other.to_string(),
        },
    }
}

/// Finite-difference check of the masked loss with respect to every LM and
/// projector parameter at once; the prefix comes from `features`.
#[allow(clippy::too_many_arguments)]
pub fn grad_check_model(
    model: &Model,
    features: &[f64],
    ids: &[usize],
    mask: &[bool],
    h: f64,
    tol: f64,
    coords_per_tensor: usize,
    seed: u64,
) -> Result<GradCheckReport> {
    let projector = model
        .projector
        .as_ref()
        .ok_or_else(|| TrainError::Config("gradient check needs a projector".into()))?;
    let n_lm = model.lm.params().len();
    let params: Vec<Tensor> = model
        .lm
        .params()
        .tensors()
        .iter()
        .chain(projector.params().tensors())
        .cloned()
        .collect();
    let feats = Tensor::new(vec![features.len()], features.to_vec())?;
    let report = grad_check(
        |g, v| {
            let f = g.constant(feats.clone());
            let prefix = projector.forward(g, &v[n_lm..], f).map_err(as_tensor_error)?;
            model.lm.loss(g, &v[..n_lm], Some(prefix), ids, mask).map_err(as_tensor_error)
        },
        &params,
        h,
        tol,
        coords_per_tensor,
        seed,
    )?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_vocab, encode, gen_synthetic, EncodeMode, SynthConfig, Template};
    use crate::lm::LmConfig;
    use crate::projector::ProjectorConfig;

    fn data(n: usize) -> (Vec<EncodedSample>, usize) {
        let samples = gen_synthetic(&SynthConfig {
            n_samples: n,
            d_vis: 6,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let t = Template::default();
        let v = build_vocab(&samples, &t).unwrap();
        let enc = samples
            .iter()
            .map(|s| encode(s, &v, &t, EncodeMode::Train).unwrap())
            .collect();
        (enc, v.len())
    }

    fn model(vocab: usize) -> Model {
        Model {
            lm: Lm::new(LmConfig {
                vocab_size: vocab,
                d_model: 8,
                n_layers: 1,
                n_heads: 2,
                d_ff: 16,
                max_seq_len: 128,
                seed: 0,
            })
            .unwrap(),
            projector: Some(
                Projector::new(ProjectorConfig {
                    d_vis: 6,
                    d_lm: 8,
                    clip_length: 2,
                    prefix_length: 2,
                    n_layers: 1,
                    n_heads: 2,
                    ..Default::default()
                })
                .unwrap(),
            ),
        }
    }

    fn cfg(regime: Regime, batch: usize, accum: usize) -> TrainConfig {
        TrainConfig {
            regime,
            hyper: OptimHyper {
                lr_peak: 1e-2,
                batch_size: batch,
                grad_accum_steps: accum,
                epochs: 1,
                ..OptimHyper::llm_kg()
            },
            ..Default::default()
        }
    }

    #[test]
    fn regimes_parse_from_flags() {
        assert_eq!("llm-kg".parse::<Regime>().unwrap(), Regime::LlmKg);
        assert_eq!("vlm_kg_frozen".parse::<Regime>().unwrap(), Regime::VlmKgFrozen);
        assert!("vlm".parse::<Regime>().is_err());
    }

    #[test]
    fn accumulating_identical_micro_batches_matches_one_step() {
        let (d, v) = data(1);
        let twice = vec![d[0].clone(), d[0].clone()];
        let mut a = model(v);
        let mut b = model(v);
        train(&mut a, &twice, &[], &cfg(Regime::VlmKg, 1, 2), &TrainOutputs::default()).unwrap();
        train(&mut b, &d, &[], &cfg(Regime::VlmKg, 1, 1), &TrainOutputs::default()).unwrap();
        let pa = a.lm.params().tensors().iter().chain(a.projector.as_ref().unwrap().params().tensors());
        let pb = b.lm.params().tensors().iter().chain(b.projector.as_ref().unwrap().params().tensors());
        for (x, y) in pa.zip(pb) {
            for (p, q) in x.data().iter().zip(y.data()) {
                assert!((p - q).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn frozen_regime_leaves_the_lm_untouched() {
        let (d, v) = data(6);
        let mut m = model(v);
        let before = m.clone();
        let r = train(&mut m, &d, &d[..2], &cfg(Regime::VlmKgFrozen, 2, 1), &TrainOutputs::default()).unwrap();
        assert_eq!(r.steps, 3);
        assert_eq!(m.lm, before.lm);
        assert_ne!(m.projector, before.projector);
        let r = train(&mut m, &d, &[], &cfg(Regime::LlmKg, 2, 1), &TrainOutputs::default()).unwrap();
        assert_eq!(r.steps, 3);
        assert_ne!(m.lm, before.lm);
    }

    #[test]
    fn training_is_deterministic_and_logged() {
        let (d, v) = data(5);
        let dir = tempfile::tempdir().unwrap();
        let run = |tag: &str| {
            let mut m = model(v);
            let out = TrainOutputs {
                log_csv: Some(dir.path().join(format!("{tag}.csv"))),
                checkpoint: Some(dir.path().join(format!("{tag}.ckpt"))),
            };
            let r = train(&mut m, &d, &d[..1], &cfg(Regime::VlmKg, 2, 2), &out).unwrap();
            assert_eq!(r.steps, 2);
            assert!(r.epoch_train_loss.iter().all(|l| l.is_finite()));
            (std::fs::read(&out.log_csv.unwrap()).unwrap(), std::fs::read(&out.checkpoint.unwrap()).unwrap())
        };
        let (la, ca) = run("a");
        let (lb, cb) = run("b");
        assert_eq!(la, lb);
        assert_eq!(ca, cb);
        assert!(String::from_utf8(la).unwrap().starts_with("step,epoch,lr,loss\n1,1,"));
    }

    #[test]
    fn mismatched_setups_are_config_errors() {
        let (d, v) = data(2);
        let mut m = model(v);
        m.projector = None;
        let r = train(&mut m, &d, &[], &cfg(Regime::VlmKg, 1, 1), &TrainOutputs::default());
        assert!(matches!(r, Err(TrainError::Config(_))));
        let mut m = model(v + 1);
        let mut bad = d.clone();
        bad[0].image_features = Some(vec![0.0; 3]);
        let r = train(&mut m, &bad, &[], &cfg(Regime::VlmKg, 1, 1), &TrainOutputs::default());
        assert!(matches!(r, Err(TrainError::Config(_))));
        let mut small = model(3);
        let r = train(&mut small, &d, &[], &cfg(Regime::LlmKg, 1, 1), &TrainOutputs::default());
        assert!(matches!(r, Err(TrainError::Config(_))));
    }

    #[test]
    fn joint_gradients_match_finite_differences() {
        let (d, v) = data(1);
        let mut m = model(v);
        let mut rng = seeded(9);
        for t in m.lm.params_mut().tensors_mut().iter_mut().chain(m.projector.as_mut().unwrap().params_mut().tensors_mut()) {
            *t = Tensor::randn(t.shape(), 0.5, &mut rng);
        }
        let s = &d[0];
        let n = 6;
        let mut mask = vec![false; n];
        mask[n - 3..].iter_mut().for_each(|b| *b = true);
        let r = grad_check_model(&m, s.image_features.as_ref().unwrap(), &s.token_ids[..n], &mask, 1e-5, 1e-4, 20, 0).unwrap();
        assert!(r.passed, "{:?}", r.worst());
        let tensors = m.lm.params().len() + m.projector.as_ref().unwrap().params().len();
        assert_eq!(r.entries.iter().map(|e| e.tensor).max(), Some(tensors - 1));
    }

    #[test]
    fn loss_decreases_on_a_small_corpus() {
        let (d, v) = data(4);
        let mut m = model(v);
        let mut c = cfg(Regime::LlmKg, 2, 1);
        c.hyper.epochs = 30;
        let r = train(&mut m, &d, &[], &c, &TrainOutputs::default()).unwrap();
        assert!(r.epoch_train_loss[29] < r.epoch_train_loss[0]);
    }
}
