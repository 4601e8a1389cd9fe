//! Run configuration: one JSON document with a section per module, dotted
//! command-line overrides, and cross-section validation.
//!
//! The global `seed` is authoritative. Module seeds are derived from it on
//! resolution, so the snapshot written to a run directory shows the values
//! that were actually used.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use vlmkg::corpus::{SynthConfig, Template, DEFAULT_INSTRUCTION, DEFAULT_TEMPLATE};
use vlmkg::decoder::DecodeConfig;
use vlmkg::lm::LmConfig;
use vlmkg::metrics::EvalConfig;
use vlmkg::projector::ProjectorConfig;
use vlmkg::rng::derive_seed;
use vlmkg::trainer::{OptimHyper, Regime};

use crate::error::{CliError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSection {
    /// Generator settings, used when `path` is unset.
    pub synth: SynthConfig,
    /// Existing corpus JSONL.
    pub path: Option<PathBuf>,
    /// Feature file that replaces per-sample features.
    pub features: Option<PathBuf>,
    /// Vocabulary file; built from the corpus when unset.
    pub vocab: Option<PathBuf>,
    /// Trailing share of samples held out for validation.
    pub val_fraction: f64,
    pub instruction: String,
    pub template: String,
}

impl Default for CorpusSection {
    fn default() -> Self {
        Self {
            synth: SynthConfig::default(),
            path: None,
            features: None,
            vocab: None,
            val_fraction: 0.1,
            instruction: DEFAULT_INSTRUCTION.to_string(),
            template: DEFAULT_TEMPLATE.to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerSection {
    pub regime: Regime,
    pub llm_kg: OptimHyper,
    pub vlm_kg: OptimHyper,
    pub full_sequence_loss: bool,
    pub validate_every_epoch: bool,
    /// Starting weights; projector-less checkpoints get a fresh projector.
    pub init_checkpoint: Option<PathBuf>,
}

impl Default for TrainerSection {
    fn default() -> Self {
        Self {
            regime: Regime::VlmKg,
            llm_kg: OptimHyper::llm_kg(),
            vlm_kg: OptimHyper::vlm_kg(),
            full_sequence_loss: false,
            validate_every_epoch: true,
            init_checkpoint: None,
        }
    }
}

impl TrainerSection {
    pub fn hyper(&self, regime: Regime) -> &OptimHyper {
        match regime {
            Regime::LlmKg => &self.llm_kg,
            Regime::VlmKg | Regime::VlmKgFrozen => &self.vlm_kg,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub corpus: CorpusSection,
    pub lm: LmConfig,
    pub projector: ProjectorConfig,
    pub trainer: TrainerSection,
    pub decode: DecodeConfig,
    pub metrics: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let lm = LmConfig {
            max_seq_len: 768,
            ..LmConfig::desk(0)
        };
        let projector = ProjectorConfig {
            d_lm: lm.d_model,
            ..ProjectorConfig::default()
        };
        Self {
            seed: 0,
            run_dir: PathBuf::from("runs/default"),
            corpus: CorpusSection::default(),
            lm,
            projector,
            trainer: TrainerSection::default(),
            decode: DecodeConfig::default(),
            metrics: EvalConfig::default(),
        }
    }
}

const HYPER_FIELDS: [&str; 10] = [
    "lr_peak",
    "beta1",
    "beta2",
    "eps",
    "weight_decay",
    "warmup_steps",
    "grad_accum_steps",
    "batch_size",
    "epochs",
    "clip_norm",
];

fn parse_value(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Every key of `given` must exist in `template`, recursively.
fn check_known(given: &Value, template: &Value, path: &str) -> Result<()> {
    let (Value::Object(g), Value::Object(t)) = (given, template) else {
        return Ok(());
    };
    for (k, v) in g {
        let here = if path.is_empty() { k.clone() } else { format!("{path}.{k}") };
        match t.get(k) {
            None => return Err(CliError::Config(format!("unknown key {here}"))),
            Some(tv) if tv.is_object() => check_known(v, tv, &here)?,
            Some(_) => {}
        }
    }
    Ok(())
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("{key}: {} is not a section", parts[..i].join("."))))?;
        let slot = obj
            .get_mut(*part)
            .ok_or_else(|| CliError::Config(format!("unknown key {key}")))?;
        if i + 1 == parts.len() {
            *slot = value;
            return Ok(());
        }
        cur = slot;
    }
    Err(CliError::Config("empty override key".into()))
}

impl RunConfig {
    /// Defaults, then the optional file, then `key=value` overrides.
    /// `trainer.<field>` for an optimizer field sets it for every regime.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut root = serde_json::to_value(RunConfig::default())?;
        if let Some(p) = path {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())))?;
            let given: Value =
                serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            check_known(&given, &root, "")?;
            let parsed: RunConfig =
                serde_json::from_value(given).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            root = serde_json::to_value(parsed)?;
        }
        for o in overrides {
            let (key, raw) = o
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("override {o:?} is not key=value")))?;
            let key = key.trim();
            let value = parse_value(raw.trim());
            match key.strip_prefix("trainer.") {
                Some(field) if HYPER_FIELDS.contains(&field) => {
                    set_path(&mut root, &format!("trainer.llm_kg.{field}"), value.clone())?;
                    set_path(&mut root, &format!("trainer.vlm_kg.{field}"), value)?;
                }
                _ => set_path(&mut root, key, value)?,
            }
        }
        let cfg: RunConfig = serde_json::from_value(root).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.resolved()
    }

    /// Derive module seeds and check cross-section consistency.
    pub fn resolved(mut self) -> Result<Self> {
        self.corpus.synth.seed = derive_seed(self.seed, "corpus");
        self.lm.seed = derive_seed(self.seed, "lm");
        self.projector.seed = derive_seed(self.seed, "projector");
        self.decode.seed = derive_seed(self.seed, "decode");
        self.validate()?;
        Ok(self)
    }

    pub fn train_seed(&self) -> u64 {
        derive_seed(self.seed, "train")
    }

    pub fn validate(&self) -> Result<()> {
        if self.projector.d_lm != self.lm.d_model {
            return Err(CliError::Config(format!(
                "projector.d_lm {} must equal lm.d_model {}",
                self.projector.d_lm, self.lm.d_model
            )));
        }
        if self.corpus.path.is_none() && self.corpus.features.is_none() && self.corpus.synth.d_vis != self.projector.d_vis {
            return Err(CliError::Config(format!(
                "corpus.synth.d_vis {} must equal projector.d_vis {}",
                self.corpus.synth.d_vis, self.projector.d_vis
            )));
        }
        if !(0.0..1.0).contains(&self.corpus.val_fraction) {
            return Err(CliError::Config("corpus.val_fraction must be in [0, 1)".into()));
        }
        Template::new(&self.corpus.template)?;
        self.corpus.synth.validate()?;
        self.projector.validate()?;
        self.decode.validate()?;
        self.trainer.llm_kg.validate()?;
        self.trainer.vlm_kg.validate()?;
        let probe = LmConfig {
            vocab_size: self.lm.vocab_size.max(1),
            ..self.lm.clone()
        };
        probe.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }
}
