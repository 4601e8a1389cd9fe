//! Tokenizer, instruction formatting, synthetic paired corpora and dataset files.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::kg_schema::{
    serialize_triplets, triplet_from_row, triplet_to_row, Entity, EntityLabel, KgError, KnowledgeGraph, Relation,
    Triplet,
};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("sample {0} has no output triplets")]
    MissingOutput(String),
    #[error("token {token:?} in sample {id} is not in the vocabulary")]
    UnknownToken { id: String, token: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("invalid template: {0}")]
    Template(String),
    #[error("{path}:{line}: {msg}")]
    Format { path: String, line: usize, msg: String },
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub const BOS: usize = 0;
pub const EOS: usize = 1;
pub const PAD: usize = 2;
/// Reserved for image positions; prefix embeddings are spliced in directly so
/// the id never appears in encoded text.
pub const IMG: usize = 3;
pub const UNK: usize = 4;
pub const SPECIAL_TOKENS: [&str; 5] = ["<bos>", "<eos>", "<pad>", "<img>", "<unk>"];

pub const DEFAULT_INSTRUCTION: &str = "Extract knowledge graph triplets (entity, relation, entity) from the report.";
pub const DEFAULT_TEMPLATE: &str = "### Instruction: {instruction} ### Input: {report} ### Output: {triplets}";

fn is_split_punct(c: char) -> bool {
    c.is_ascii_punctuation() && c != '_'
}

/// Lowercase, split on whitespace, and emit every punctuation character
/// (except `_`) as its own token.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut tokens = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for c in word.chars() {
            if is_split_punct(c) {
                if !cur.is_empty() {
                    tokens.push(std::mem::take(&mut cur));
                }
                tokens.push(c.to_string());
            } else {
                cur.extend(c.to_lowercase());
            }
        }
        if !cur.is_empty() {
            tokens.push(cur);
        }
    }
    tokens
}

/// Canonical whitespace form: tokens joined by single spaces.
pub fn normalize(text: &str) -> String {
    tokenize(text).join(" ")
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn is_special(id: usize) -> bool {
        id < SPECIAL_TOKENS.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<(), CorpusError> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        let tokens: Vec<String> = text.lines().map(str::to_string).collect();
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*special) {
                return Err(CorpusError::Format {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: format!("expected special token {special}"),
                });
            }
        }
        let unique: HashSet<&String> = tokens.iter().collect();
        if unique.len() != tokens.len() {
            return Err(CorpusError::Format {
                path: path.display().to_string(),
                line: 0,
                msg: "duplicate tokens".into(),
            });
        }
        Ok(Self::from_tokens(tokens))
    }
}

/// Prompt layout with `{instruction}`, `{report}` and `{triplets}` slots.
/// `{triplets}` starts the output segment.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Template(String);

impl Default for Template {
    fn default() -> Self {
        Self(DEFAULT_TEMPLATE.to_string())
    }
}

impl Template {
    pub fn new(text: &str) -> Result<Self, CorpusError> {
        for slot in ["{report}", "{triplets}"] {
            if text.matches(slot).count() != 1 {
                return Err(CorpusError::Template(format!("{slot} must appear exactly once")));
            }
        }
        let split = text.find("{triplets}").expect("checked");
        if text[split..].contains("{report}") || text[split..].contains("{instruction}") {
            return Err(CorpusError::Template("{triplets} must come last".into()));
        }
        Ok(Self(text.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// `(prompt text, output text)`; the output text includes anything after
    /// the `{triplets}` slot.
    pub fn fill(&self, sample: &InstructionSample) -> (String, String) {
        let split = self.0.find("{triplets}").unwrap_or(self.0.len());
        let prompt = self.0[..split]
            .replace("{instruction}", &sample.instruction)
            .replace("{report}", &sample.input_report);
        let tail = self.0.get(split + "{triplets}".len()..).unwrap_or("");
        let output = format!("{}{}", serialize_triplets(&sample.output_triplets), tail);
        (prompt, output)
    }

    pub fn format(&self, sample: &InstructionSample) -> String {
        let (p, o) = self.fill(sample);
        p + &o
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstructionSample {
    pub id: String,
    pub instruction: String,
    pub input_report: String,
    pub output_triplets: KnowledgeGraph,
    pub image_features: Option<Vec<f64>>,
}

impl InstructionSample {
    pub fn new(id: impl Into<String>, report: impl Into<String>, triplets: Vec<Triplet>) -> Self {
        let id = id.into();
        Self {
            output_triplets: KnowledgeGraph::new(id.clone(), triplets),
            id,
            instruction: DEFAULT_INSTRUCTION.to_string(),
            input_report: report.into(),
            image_features: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncodedSample {
    pub id: String,
    pub token_ids: Vec<usize>,
    /// True on output-segment tokens and the final eos.
    pub loss_mask: Vec<bool>,
    pub image_features: Option<Vec<f64>>,
    /// Number of leading ids (bos + prompt) before the output segment.
    pub prompt_len: usize,
}

impl EncodedSample {
    /// The prompt ids used to start generation.
    pub fn prompt(&self) -> &[usize] {
        &self.token_ids[..self.prompt_len]
    }

    /// Output ids without the trailing eos.
    pub fn target(&self) -> &[usize] {
        let end = self.token_ids.len() - usize::from(self.token_ids.last() == Some(&EOS));
        &self.token_ids[self.prompt_len..end]
    }

    /// Mask every predictable position (all but the leading bos).
    pub fn with_full_sequence_mask(mut self) -> Self {
        self.loss_mask = (0..self.token_ids.len()).map(|i| i > 0).collect();
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EncodeMode {
    /// Output required; unknown tokens are errors.
    Train,
    /// Output may be empty; unknown tokens map to [`UNK`].
    Inference,
}

/// Vocabulary over every token of every formatted sample, specials first and
/// the rest sorted.
pub fn build_vocab(samples: &[InstructionSample], template: &Template) -> Result<Vocab, CorpusError> {
    if samples.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut seen = BTreeSet::new();
    for s in samples {
        seen.extend(tokenize(&template.format(s)));
    }
    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    tokens.extend(seen.into_iter().filter(|t| !SPECIAL_TOKENS.contains(&t.as_str())));
    Ok(Vocab::from_tokens(tokens))
}

fn lookup(vocab: &Vocab, tokens: &[String], id: &str, mode: EncodeMode) -> Result<Vec<usize>, CorpusError> {
    tokens
        .iter()
        .map(|t| match (vocab.id(t), mode) {
            (Some(i), _) => Ok(i),
            (None, EncodeMode::Inference) => Ok(UNK),
            (None, EncodeMode::Train) => Err(CorpusError::UnknownToken {
                id: id.to_string(),
                token: t.clone(),
            }),
        })
        .collect()
}

/// `bos + tokens(prompt) + tokens(output) + eos`, with the loss mask over the
/// output tokens and the eos.
pub fn encode(
    sample: &InstructionSample,
    vocab: &Vocab,
    template: &Template,
    mode: EncodeMode,
) -> Result<EncodedSample, CorpusError> {
    if mode == EncodeMode::Train && sample.output_triplets.is_empty() {
        return Err(CorpusError::MissingOutput(sample.id.clone()));
    }
    let (prompt, output) = template.fill(sample);
    let prompt_ids = lookup(vocab, &tokenize(&prompt), &sample.id, mode)?;
    let output_ids = lookup(vocab, &tokenize(&output), &sample.id, mode)?;
    let prompt_len = 1 + prompt_ids.len();
    let mut token_ids = Vec::with_capacity(prompt_len + output_ids.len() + 1);
    token_ids.push(BOS);
    token_ids.extend(prompt_ids);
    token_ids.extend(output_ids);
    token_ids.push(EOS);
    let loss_mask = (0..token_ids.len()).map(|i| i >= prompt_len).collect();
    Ok(EncodedSample {
        id: sample.id.clone(),
        token_ids,
        loss_mask,
        image_features: sample.image_features.clone(),
        prompt_len,
    })
}

/// Tokens joined by spaces; bos, eos and pad are dropped.
pub fn decode(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&i| !matches!(i, BOS | EOS | PAD))
        .map(|&i| vocab.token(i).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub anatomy_lexicon: Vec<String>,
    pub observation_lexicon: Vec<String>,
    pub image_only_fraction: f64,
    /// Probability that a finding is phrased as `suggestive_of` rather than
    /// `located_at`.
    pub suggestive_fraction: f64,
    pub d_vis: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_samples: 256,
            anatomy_lexicon: [
                "left lung",
                "right lung",
                "lung base",
                "heart",
                "mediastinum",
                "pleural space",
                "left lower lobe",
                "right upper lobe",
            ]
            .map(String::from)
            .to_vec(),
            observation_lexicon: [
                "opacity",
                "pleural effusion",
                "consolidation",
                "atelectasis",
                "pneumothorax",
                "edema",
                "cardiomegaly",
                "pneumonia",
            ]
            .map(String::from)
            .to_vec(),
            image_only_fraction: 0.0,
            suggestive_fraction: 0.3,
            d_vis: 512,
            noise_sigma: 0.1,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let err = |m: &str| Err(CorpusError::Config(m.to_string()));
        if self.anatomy_lexicon.is_empty() || self.observation_lexicon.is_empty() {
            return err("lexicons must be non-empty");
        }
        let anat: HashSet<&String> = self.anatomy_lexicon.iter().collect();
        if self.observation_lexicon.iter().any(|o| anat.contains(o)) {
            return err("anatomy and observation lexicons must be disjoint");
        }
        for term in self.anatomy_lexicon.iter().chain(&self.observation_lexicon) {
            Entity::new(term).map_err(|e| CorpusError::Config(e.to_string()))?;
        }
        if !(0.0..=1.0).contains(&self.image_only_fraction) {
            return err("image_only_fraction must lie in [0, 1]");
        }
        if !(0.0..=1.0).contains(&self.suggestive_fraction) {
            return err("suggestive_fraction must lie in [0, 1]");
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return err("noise_sigma must be finite and non-negative");
        }
        if self.d_vis == 0 {
            return err("d_vis must be positive");
        }
        Ok(())
    }
}

const BASIS_SEED: u64 = 0x5eed_ba51_5000_0001;
const NO_FINDINGS: &str = "No other findings are described.";

fn basis_vector(t: &Triplet, d_vis: usize) -> Vec<f64> {
    let key = format!("{}|{}|{}", t.subject.text(), t.relation, t.object.text());
    let mut rng = seeded(derive_seed(BASIS_SEED, &key));
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    (0..d_vis).map(|_| n.sample(&mut rng)).collect()
}

/// Synthetic image embedding for a sample: the sum of a fixed basis vector
/// per finding plus seeded Gaussian noise keyed by the sample id.
pub fn synthetic_features(triplets: &[Triplet], sample_id: &str, d_vis: usize, noise_sigma: f64, seed: u64) -> Vec<f64> {
    let mut v = vec![0.0; d_vis];
    for t in triplets {
        v.iter_mut().zip(basis_vector(t, d_vis)).for_each(|(a, b)| *a += b);
    }
    if noise_sigma > 0.0 {
        let mut rng = seeded(derive_seed(seed, &format!("noise:{sample_id}")));
        let n = Normal::new(0.0, noise_sigma).expect("valid sigma");
        v.iter_mut().for_each(|a| *a += n.sample(&mut rng));
    }
    v
}

/// Which triplets of a generated sample were left out of the report text.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSample {
    pub sample: InstructionSample,
    pub image_only: Vec<bool>,
}

/// Seeded paired corpus. Each sample has 1–4 findings; a finding is omitted
/// from the report with probability `image_only_fraction` but always stays in
/// the output and the image features. Output order: findings visible in the
/// report (in report order) followed by image-only findings.
pub fn gen_synthetic(cfg: &SynthConfig) -> Result<Vec<InstructionSample>, CorpusError> {
    Ok(gen_synthetic_detailed(cfg)?.into_iter().map(|s| s.sample).collect())
}

pub fn gen_synthetic_detailed(cfg: &SynthConfig) -> Result<Vec<SynthSample>, CorpusError> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let mut out = Vec::with_capacity(cfg.n_samples);
    for i in 0..cfg.n_samples {
        let id = format!("syn-{i:05}");
        let n_findings = rng.random_range(1..=4usize);
        let mut findings: Vec<(Triplet, String)> = Vec::new();
        let mut attempts = 0;
        while findings.len() < n_findings && attempts < 64 {
            attempts += 1;
            let obs = &cfg.observation_lexicon[rng.random_range(0..cfg.observation_lexicon.len())];
            let suggestive = cfg.observation_lexicon.len() > 1 && rng.random_bool(cfg.suggestive_fraction);
            let (triplet, sentence) = if suggestive {
                let other = loop {
                    let o = &cfg.observation_lexicon[rng.random_range(0..cfg.observation_lexicon.len())];
                    if o != obs {
                        break o;
                    }
                };
                (
                    Triplet::new(
                        Entity::with_label(obs, EntityLabel::ObservationPresent)?,
                        Relation::SuggestiveOf,
                        Entity::with_label(other, EntityLabel::ObservationUncertain)?,
                    ),
                    format!("{obs} suggestive of {other}."),
                )
            } else {
                let anat = &cfg.anatomy_lexicon[rng.random_range(0..cfg.anatomy_lexicon.len())];
                (
                    Triplet::new(
                        Entity::with_label(obs, EntityLabel::ObservationPresent)?,
                        Relation::LocatedAt,
                        Entity::with_label(anat, EntityLabel::Anatomy)?,
                    ),
                    format!("There is {obs} in the {anat}."),
                )
            };
            if findings.iter().all(|(t, _)| t.match_key() != triplet.match_key()) {
                findings.push((triplet, sentence));
            }
        }
        let hidden: Vec<bool> = findings.iter().map(|_| rng.random_bool(cfg.image_only_fraction)).collect();
        let mut sentences = Vec::new();
        let mut visible = Vec::new();
        let mut image_only = Vec::new();
        for ((t, s), h) in findings.iter().zip(&hidden) {
            if *h {
                image_only.push(t.clone());
            } else {
                sentences.push(s.clone());
                visible.push(t.clone());
            }
        }
        let report = if sentences.is_empty() {
            NO_FINDINGS.to_string()
        } else {
            sentences.join(" ")
        };
        let flags: Vec<bool> = visible.iter().map(|_| false).chain(image_only.iter().map(|_| true)).collect();
        let triplets: Vec<Triplet> = visible.into_iter().chain(image_only).collect();
        let features = synthetic_features(&triplets, &id, cfg.d_vis, cfg.noise_sigma, cfg.seed);
        let mut sample = InstructionSample::new(id, report, triplets);
        sample.image_features = Some(features);
        out.push(SynthSample {
            sample,
            image_only: flags,
        });
    }
    Ok(out)
}

#[derive(Serialize, Deserialize)]
struct CorpusRecord {
    id: String,
    report: String,
    triplets: Vec<[String; 5]>,
    image_features: Option<Vec<f64>>,
}

pub fn write_corpus_jsonl(path: &Path, samples: &[InstructionSample]) -> Result<(), CorpusError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for s in samples {
        let rec = CorpusRecord {
            id: s.id.clone(),
            report: s.input_report.clone(),
            triplets: s.output_triplets.triplets.iter().map(triplet_to_row).collect(),
            image_features: s.image_features.clone(),
        };
        serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::other)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_corpus_jsonl(path: &Path) -> Result<Vec<InstructionSample>, CorpusError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: CorpusRecord = serde_json::from_str(&line).map_err(|e| CorpusError::Format {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        let triplets = rec.triplets.iter().map(triplet_from_row).collect::<Result<Vec<_>, _>>()?;
        let mut s = InstructionSample::new(rec.id, rec.report, triplets);
        s.image_features = rec.image_features;
        samples.push(s);
    }
    Ok(samples)
}

/// Check every sample's feature vector against the configured dimension.
pub fn check_feature_dims(samples: &[InstructionSample], d_vis: usize) -> Result<(), CorpusError> {
    for s in samples {
        if let Some(f) = &s.image_features {
            if f.len() != d_vis {
                return Err(CorpusError::Config(format!(
                    "sample {} has {} image features, expected {d_vis}",
                    s.id,
                    f.len()
                )));
            }
        }
    }
    Ok(())
}
