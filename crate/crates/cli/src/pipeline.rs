//! Corpus preparation, model construction, training, decoding and scoring
//! wired from a [`RunConfig`].

use std::io::Write;
use std::path::{Path, PathBuf};

use sha1::{Digest, Sha1};
use vlmkg::corpus::{
    build_vocab, decode, encode, gen_synthetic, read_corpus_jsonl, write_corpus_jsonl, EncodeMode, EncodedSample,
    InstructionSample, Template, Vocab,
};
use vlmkg::decoder::{generate_with, Conditioned, DecodeConfig};
use vlmkg::kg_schema::{parse_triplets, KnowledgeGraph};
use vlmkg::lm::{Lm, LmConfig};
use vlmkg::metrics::{evaluate_corpus, EvalReport};
use vlmkg::projector::Projector;
use vlmkg::trainer::{evaluate_loss, load_checkpoint, train, Model, Regime, TrainConfig, TrainOutputs, TrainReport};
use vlmkg::vision::FeatureSource;

use crate::config::RunConfig;
use crate::error::{CliError, Result};

/// Git object id of `bytes` stored as a blob.
pub fn git_blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha1::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    Ok(git_blob_hash(&bytes))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    let mut f = std::fs::File::create(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    f.write_all(text.as_bytes())?;
    Ok(())
}

/// Loaded corpus with its train/validation split and vocabulary.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub samples: Vec<InstructionSample>,
    pub n_train: usize,
    pub vocab: Vocab,
    pub template: Template,
    /// Where the corpus came from: a path or `synthetic`.
    pub source: String,
    pub corpus_hash: String,
}

impl Prepared {
    pub fn train(&self) -> &[InstructionSample] {
        &self.samples[..self.n_train]
    }

    pub fn val(&self) -> &[InstructionSample] {
        &self.samples[self.n_train..]
    }

    pub fn encode_all(&self, samples: &[InstructionSample]) -> Result<Vec<EncodedSample>> {
        samples
            .iter()
            .map(|s| Ok(encode(s, &self.vocab, &self.template, EncodeMode::Train)?))
            .collect()
    }

    pub fn gold(&self, samples: &[InstructionSample]) -> Vec<KnowledgeGraph> {
        samples
            .iter()
            .map(|s| KnowledgeGraph::new(s.id.clone(), s.output_triplets.triplets.clone()))
            .collect()
    }
}

/// Load or generate the corpus, attach features, build the vocabulary and
/// split. Generated corpora and the vocabulary are written into `out_dir`.
pub fn prepare(cfg: &RunConfig, out_dir: &Path) -> Result<Prepared> {
    let template = Template::new(&cfg.corpus.template)?;
    let (mut samples, source, corpus_hash) = match &cfg.corpus.path {
        Some(p) => (read_corpus_jsonl(p)?, p.display().to_string(), hash_file(p)?),
        None => {
            let samples = gen_synthetic(&cfg.corpus.synth)?;
            let path = out_dir.join("corpus.jsonl");
            write_corpus_jsonl(&path, &samples)?;
            (samples, "synthetic".to_string(), hash_file(&path)?)
        }
    };
    if samples.is_empty() {
        return Err(CliError::Config("corpus is empty".into()));
    }
    for s in &mut samples {
        s.instruction.clone_from(&cfg.corpus.instruction);
    }
    if let Some(p) = &cfg.corpus.features {
        FeatureSource::load(p)?.attach(&mut samples)?;
    }
    let vocab = match &cfg.corpus.vocab {
        Some(p) => Vocab::load(p)?,
        None => build_vocab(&samples, &template)?,
    };
    vocab.save(&out_dir.join("vocab.txt"))?;
    let n = samples.len();
    let n_val = ((n as f64) * cfg.corpus.val_fraction).round() as usize;
    let n_val = if cfg.corpus.val_fraction > 0.0 && n > 1 { n_val.clamp(1, n - 1) } else { 0 };
    Ok(Prepared {
        samples,
        n_train: n - n_val,
        vocab,
        template,
        source,
        corpus_hash,
    })
}

/// Fresh model from the config, or the weights in `init`. A checkpoint
/// without a projector gets a freshly initialized one when `regime` needs it.
pub fn build_model(cfg: &RunConfig, vocab_len: usize, regime: Regime, init: Option<&Path>) -> Result<Model> {
    if cfg.lm.vocab_size != 0 && cfg.lm.vocab_size != vocab_len {
        return Err(CliError::Config(format!(
            "lm.vocab_size {} does not match the vocabulary size {vocab_len}",
            cfg.lm.vocab_size
        )));
    }
    let mut model = match init {
        Some(p) => {
            let (m, _) = load_checkpoint(p)?;
            if m.lm.config().vocab_size != vocab_len {
                return Err(CliError::Config(format!(
                    "checkpoint {} has vocabulary {}, corpus has {vocab_len}",
                    p.display(),
                    m.lm.config().vocab_size
                )));
            }
            m
        }
        None => Model {
            lm: Lm::new(LmConfig {
                vocab_size: vocab_len,
                ..cfg.lm.clone()
            })?,
            projector: None,
        },
    };
    if regime.uses_projector() && model.projector.is_none() {
        model.projector = Some(Projector::new(cfg.projector.clone())?);
    }
    Ok(model)
}

pub fn train_config(cfg: &RunConfig, regime: Regime) -> TrainConfig {
    TrainConfig {
        regime,
        hyper: cfg.trainer.hyper(regime).clone(),
        full_sequence_loss: cfg.trainer.full_sequence_loss,
        validate_every_epoch: cfg.trainer.validate_every_epoch,
        seed: cfg.train_seed(),
    }
}

/// Train `model` in place; writes `train_log.csv` and `model.ckpt` to `dir`.
pub fn run_training(cfg: &RunConfig, prep: &Prepared, model: &mut Model, regime: Regime, dir: &Path) -> Result<TrainReport> {
    let tr = prep.encode_all(prep.train())?;
    let val = prep.encode_all(prep.val())?;
    let outputs = TrainOutputs {
        log_csv: Some(dir.join("train_log.csv")),
        checkpoint: Some(dir.join("model.ckpt")),
    };
    let mut report = train(model, &tr, &val, &train_config(cfg, regime), &outputs)?;
    report.checkpoint = Some(PathBuf::from("model.ckpt"));
    Ok(report)
}

pub fn validation_loss(cfg: &RunConfig, prep: &Prepared, model: &Model, regime: Regime) -> Result<Option<f64>> {
    if prep.val().is_empty() {
        return Ok(None);
    }
    let val = prep.encode_all(prep.val())?;
    Ok(Some(evaluate_loss(model, &val, regime, cfg.trainer.full_sequence_loss)?))
}

/// One decoded sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub text: String,
    pub graph: KnowledgeGraph,
    pub skipped: usize,
}

pub fn predict(
    model: &Model,
    regime: Regime,
    samples: &[InstructionSample],
    prep: &Prepared,
    decode_cfg: &DecodeConfig,
) -> Result<Vec<Prediction>> {
    samples
        .iter()
        .map(|s| {
            let enc = encode(s, &prep.vocab, &prep.template, EncodeMode::Inference)?;
            let prefix = model.prefix_for(regime, s.image_features.as_deref())?;
            let cond = Conditioned::with_prefix(&model.lm, prefix);
            let g = generate_with(&cond, enc.prompt(), decode_cfg)?;
            let text = decode(g.content(), &prep.vocab);
            let parsed = parse_triplets(&text);
            Ok(Prediction {
                text,
                graph: KnowledgeGraph::new(s.id.clone(), parsed.graph.triplets),
                skipped: parsed.skipped,
            })
        })
        .collect()
}

pub fn score(cfg: &RunConfig, preds: &[Prediction], gold: &[KnowledgeGraph]) -> Result<EvalReport> {
    let graphs: Vec<KnowledgeGraph> = preds.iter().map(|p| p.graph.clone()).collect();
    Ok(evaluate_corpus(&graphs, gold, &cfg.metrics)?)
}
