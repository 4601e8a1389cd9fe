//! Subcommand implementations. Each one writes its artifacts under the run
//! directory and returns a summary for the terminal.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde_json::json;
use vlmkg::corpus::{gen_synthetic_detailed, write_corpus_jsonl};
use vlmkg::kg_schema::{kg_diff, read_kg_jsonl, write_kg_jsonl, KnowledgeGraph};
use vlmkg::lm::{Lm, LmConfig};
use vlmkg::metrics::{format_table, render_diff, EvalReport, REPORT_COLUMNS};
use vlmkg::projector::{Projector, ProjectorConfig};
use vlmkg::rng::{derive_seed, seeded};
use vlmkg::tensor::{check_op, OpKind, Tensor};
use vlmkg::trainer::{grad_check_model, load_checkpoint, Model, Regime, TrainReport};
use vlmkg::vision::FeatureSource;

use crate::config::RunConfig;
use crate::error::{CliError, Result};
use crate::pipeline::{
    build_model, hash_file, predict, prepare, run_training, score, validation_loss, write_text, Prediction, Prepared,
};

/// `(prefix_length n, clip_length k)` cells of the projector sweep.
pub const PROJECTOR_GRID: [(usize, usize); 4] = [(64, 64), (128, 64), (64, 128), (128, 128)];
/// Generation budgets of the length sweep.
pub const LENGTH_GRID: [usize; 4] = [200, 256, 300, 512];

/// Run directory with its config snapshot and input record.
pub struct RunDir {
    pub path: PathBuf,
    inputs: BTreeMap<String, serde_json::Value>,
}

impl RunDir {
    pub fn create(cfg: &RunConfig) -> Result<Self> {
        std::fs::create_dir_all(&cfg.run_dir)
            .map_err(|e| CliError::Io(format!("{}: {e}", cfg.run_dir.display())))?;
        write_text(&cfg.run_dir.join("config.json"), &cfg.to_json())?;
        Ok(Self {
            path: cfg.run_dir.clone(),
            inputs: BTreeMap::new(),
        })
    }

    pub fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn sub(&self, name: &str) -> Result<PathBuf> {
        let p = self.path.join(name);
        std::fs::create_dir_all(&p)?;
        Ok(p)
    }

    pub fn record_corpus(&mut self, prep: &Prepared) {
        self.inputs.insert(
            "corpus".into(),
            json!({"source": prep.source, "git_blob": prep.corpus_hash, "samples": prep.samples.len()}),
        );
    }

    /// Paths inside the run directory are recorded relative to it.
    pub fn record_file(&mut self, role: &str, path: &Path) -> Result<()> {
        let shown = path.strip_prefix(&self.path).unwrap_or(path);
        self.inputs.insert(
            role.into(),
            json!({"path": shown.display().to_string(), "git_blob": hash_file(path)?}),
        );
        Ok(())
    }

    pub fn finish(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.inputs)? + "\n";
        write_text(&self.file("inputs.json"), &text)
    }
}

fn fmt_loss(v: Option<f64>) -> String {
    v.map_or_else(|| "nan".into(), |x| format!("{x:.6}"))
}

fn metric_cells(r: &EvalReport) -> String {
    let mut s = String::new();
    for v in r.bleu.iter().chain([&r.rouge_l]) {
        let _ = write!(s, ",{v:.2}");
    }
    s
}

fn metric_header() -> String {
    REPORT_COLUMNS.join(",")
}

fn train_report_json(r: &TrainReport, regime: Regime) -> Result<String> {
    let v = json!({
        "regime": regime,
        "steps": r.steps,
        "skipped_steps": r.skipped_steps,
        "epoch_train_loss": r.epoch_train_loss,
        "epoch_val_loss": r.epoch_val_loss,
        "checkpoint": r.checkpoint,
    });
    Ok(serde_json::to_string_pretty(&v)? + "\n")
}

fn loss_table(r: &TrainReport) -> String {
    let mut s = String::from("epoch  train_loss    val_loss\n");
    for (i, l) in r.epoch_train_loss.iter().enumerate() {
        let v = if r.epoch_val_loss.len() == r.epoch_train_loss.len() {
            r.epoch_val_loss.get(i).copied()
        } else if i + 1 == r.epoch_train_loss.len() {
            r.epoch_val_loss.last().copied()
        } else {
            None
        };
        let _ = writeln!(s, "{:>5}  {l:>10.6}  {:>10}", i + 1, fmt_loss(v));
    }
    s
}

pub fn gen_corpus(cfg: &RunConfig) -> Result<String> {
    let mut run = RunDir::create(cfg)?;
    let samples = gen_synthetic_detailed(&cfg.corpus.synth)?;
    let plain: Vec<_> = samples.iter().map(|s| s.sample.clone()).collect();
    let corpus_path = run.file("corpus.jsonl");
    write_corpus_jsonl(&corpus_path, &plain)?;
    let ids: Vec<String> = plain.iter().map(|s| s.id.clone()).collect();
    FeatureSource::synthetic(&plain, cfg.corpus.synth.d_vis, cfg.corpus.synth.noise_sigma, cfg.corpus.synth.seed)
        .save(&run.file("features.txt"), &ids)?;
    let cfg_local = RunConfig {
        corpus: crate::config::CorpusSection {
            path: Some(corpus_path.clone()),
            ..cfg.corpus.clone()
        },
        ..cfg.clone()
    };
    let prep = prepare(&cfg_local, &run.path)?;
    run.record_file("corpus", &corpus_path)?;
    let triplets: usize = samples.iter().map(|s| s.image_only.len()).sum();
    let hidden: usize = samples.iter().map(|s| s.image_only.iter().filter(|&&h| h).count()).sum();
    let report = format!(
        "samples,train,val,triplets,image_only_triplets,vocab_size,d_vis\n{},{},{},{},{},{},{}\n",
        plain.len(),
        prep.n_train,
        plain.len() - prep.n_train,
        triplets,
        hidden,
        prep.vocab.len(),
        cfg.corpus.synth.d_vis
    );
    write_text(&run.file("corpus_report.csv"), &report)?;
    run.finish()?;
    Ok(report)
}

pub fn train(cfg: &RunConfig, regime: Regime) -> Result<String> {
    let mut run = RunDir::create(cfg)?;
    let prep = prepare(cfg, &run.path)?;
    run.record_corpus(&prep);
    let init = cfg.trainer.init_checkpoint.as_deref();
    if let Some(p) = init {
        run.record_file("init_checkpoint", p)?;
    }
    if regime == Regime::VlmKgFrozen && init.is_none() {
        return Err(CliError::Config(
            "vlm_kg_frozen freezes a tuned LM; set trainer.init_checkpoint".into(),
        ));
    }
    let mut model = build_model(cfg, prep.vocab.len(), regime, init)?;
    let report = run_training(cfg, &prep, &mut model, regime, &run.path)?;
    write_text(&run.file("train_report.json"), &train_report_json(&report, regime)?)?;
    run.finish()?;
    Ok(format!("regime {regime}, {} steps\n{}", report.steps, loss_table(&report)))
}

fn checkpoint_arg(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<PathBuf> {
    checkpoint
        .map(Path::to_path_buf)
        .or_else(|| cfg.trainer.init_checkpoint.clone())
        .ok_or_else(|| CliError::Usage("a checkpoint is required (--checkpoint)".into()))
}

fn load_for_decoding(path: &Path, prep: &Prepared) -> Result<(Model, Regime)> {
    let (model, header) = load_checkpoint(path)?;
    if model.lm.config().vocab_size != prep.vocab.len() {
        return Err(CliError::Config(format!(
            "checkpoint {} has vocabulary {}, corpus has {}",
            path.display(),
            model.lm.config().vocab_size,
            prep.vocab.len()
        )));
    }
    let regime = header.regime.unwrap_or(if model.projector.is_some() {
        Regime::VlmKg
    } else {
        Regime::LlmKg
    });
    Ok((model, regime))
}

fn write_predictions(dir: &Path, preds: &[Prediction]) -> Result<()> {
    let graphs: Vec<KnowledgeGraph> = preds.iter().map(|p| p.graph.clone()).collect();
    write_kg_jsonl(&dir.join("predictions.jsonl"), &graphs)?;
    let mut text = String::new();
    for p in preds {
        let _ = writeln!(text, "{}\t{}\t{}", p.graph.source_id, p.skipped, p.text);
    }
    write_text(&dir.join("generations.tsv"), &text)
}

pub fn generate(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<String> {
    let mut run = RunDir::create(cfg)?;
    let ckpt = checkpoint_arg(cfg, checkpoint)?;
    run.record_file("checkpoint", &ckpt)?;
    let prep = prepare(cfg, &run.path)?;
    run.record_corpus(&prep);
    let (model, regime) = load_for_decoding(&ckpt, &prep)?;
    let preds = predict(&model, regime, prep.val(), &prep, &cfg.decode)?;
    write_predictions(&run.path, &preds)?;
    run.finish()?;
    let skipped: usize = preds.iter().map(|p| p.skipped).sum();
    Ok(format!(
        "decoded {} samples with {regime}, {} triplets, {skipped} malformed fragments\n",
        preds.len(),
        preds.iter().map(|p| p.graph.len()).sum::<usize>()
    ))
}

fn write_eval(dir: &Path, name: &str, report: &EvalReport, preds: &[KnowledgeGraph], gold: &[KnowledgeGraph]) -> Result<String> {
    write_text(&dir.join("report.csv"), &report.to_csv())?;
    write_text(&dir.join("rows.csv"), &report.rows_csv())?;
    let mut diff = String::new();
    for (p, g) in preds.iter().zip(gold) {
        let _ = writeln!(diff, "# {}", g.source_id);
        diff.push_str(&render_diff(&kg_diff(p, g)));
    }
    write_text(&dir.join("diff.txt"), &diff)?;
    Ok(report.to_table(name))
}

/// Score predictions against gold graphs. Without `predictions`, decode the
/// validation split from `checkpoint` first; without `gold`, use the
/// validation split of the configured corpus.
pub fn evaluate(cfg: &RunConfig, predictions: Option<&Path>, gold: Option<&Path>, checkpoint: Option<&Path>) -> Result<String> {
    let mut run = RunDir::create(cfg)?;
    let needs_corpus = predictions.is_none() || gold.is_none();
    let prep = if needs_corpus {
        let p = prepare(cfg, &run.path)?;
        run.record_corpus(&p);
        Some(p)
    } else {
        None
    };
    let gold_graphs = match gold {
        Some(g) => {
            run.record_file("gold", g)?;
            read_kg_jsonl(g)?
        }
        None => {
            let p = prep.as_ref().expect("prepared");
            p.gold(p.val())
        }
    };
    let (pred_graphs, name) = match predictions {
        Some(p) => {
            run.record_file("predictions", p)?;
            (read_kg_jsonl(p)?, "predictions".to_string())
        }
        None => {
            let ckpt = checkpoint_arg(cfg, checkpoint)?;
            run.record_file("checkpoint", &ckpt)?;
            let p = prep.as_ref().expect("prepared");
            let (model, regime) = load_for_decoding(&ckpt, p)?;
            let preds = predict(&model, regime, p.val(), p, &cfg.decode)?;
            write_predictions(&run.path, &preds)?;
            (preds.into_iter().map(|x| x.graph).collect(), regime.to_string())
        }
    };
    if gold_graphs.is_empty() {
        return Err(CliError::Config("no gold graphs to evaluate against".into()));
    }
    let report = vlmkg::metrics::evaluate_corpus(&pred_graphs, &gold_graphs, &cfg.metrics)?;
    let table = write_eval(&run.path, &name, &report, &pred_graphs, &gold_graphs)?;
    run.finish()?;
    Ok(table)
}

/// Finite-difference settings of the gradient check.
pub const GRADCHECK_H: f64 = 1e-5;
pub const GRADCHECK_TOL: f64 = 1e-4;
pub const GRADCHECK_COORDS: usize = 50;

/// Small composite used by the gradient check: 2-layer LM and 2-layer
/// projector. Weights are drawn at fan-in scale, gains near one and biases
/// small, so attention stays unsaturated and gradients clear finite-difference
/// noise.
pub fn gradcheck_composite(seed: u64) -> Result<(Model, Vec<f64>, Vec<usize>, Vec<bool>)> {
    let mut lm = Lm::new(LmConfig {
        vocab_size: 7,
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 12,
        seed,
    })?;
    let mut projector = Projector::new(ProjectorConfig {
        d_vis: 6,
        d_lm: 8,
        clip_length: 2,
        prefix_length: 2,
        n_layers: 2,
        n_heads: 2,
        seed,
        ..ProjectorConfig::default()
    })?;
    let names: Vec<String> = lm.params().names().iter().chain(projector.params().names()).cloned().collect();
    let mut rng = seeded(derive_seed(seed, "gradcheck"));
    let tensors = lm.params_mut().tensors_mut().iter_mut().chain(projector.params_mut().tensors_mut());
    for (t, name) in tensors.zip(&names) {
        let shape = t.shape().to_vec();
        *t = if name.ends_with("gain") {
            let mut g = Tensor::randn(&shape, 0.2, &mut rng);
            g.data_mut().iter_mut().for_each(|v| *v += 1.0);
            g
        } else if name.ends_with("weight") {
            Tensor::randn(&shape, 1.0 / (shape[0] as f64).sqrt(), &mut rng)
        } else if shape.len() == 2 {
            Tensor::randn(&shape, 1.0, &mut rng)
        } else {
            Tensor::randn(&shape, 0.1, &mut rng)
        };
    }
    let features = Tensor::randn(&[6], 1.0, &mut rng).into_data();
    let ids = vec![0, 4, 5, 6, 3, 1];
    let mask = vec![false, false, false, true, true, true];
    Ok((
        Model {
            lm,
            projector: Some(projector),
        },
        features,
        ids,
        mask,
    ))
}

/// One row per op kind and seed plus the composites; fails with an
/// invariant error when any check exceeds the tolerance.
pub fn gradcheck(cfg: &RunConfig, seeds: u64) -> Result<String> {
    let run = RunDir::create(cfg)?;
    let mut csv = String::from("target,seed,max_rel_error,checked,passed\n");
    let mut failed = Vec::new();
    let mut worst = 0.0f64;
    for kind in OpKind::ALL {
        for s in 0..seeds {
            let seed = derive_seed(cfg.seed, "gradcheck").wrapping_add(s);
            let r = check_op(kind, seed, GRADCHECK_H, GRADCHECK_TOL, GRADCHECK_COORDS)?;
            let _ = writeln!(csv, "{},{s},{:e},{},{}", kind.name(), r.max_rel_error, r.entries.len(), r.passed);
            worst = worst.max(r.max_rel_error);
            if !r.passed {
                failed.push(format!("{}#{s}", kind.name()));
            }
        }
    }
    for s in 0..seeds {
        let (model, f, ids, mask) = gradcheck_composite(derive_seed(cfg.seed, "composite").wrapping_add(s))?;
        let r = grad_check_model(&model, &f, &ids, &mask, GRADCHECK_H, GRADCHECK_TOL, GRADCHECK_COORDS, s)?;
        let _ = writeln!(csv, "lm+projector,{s},{:e},{},{}", r.max_rel_error, r.entries.len(), r.passed);
        worst = worst.max(r.max_rel_error);
        if !r.passed {
            failed.push(format!("lm+projector#{s}"));
        }
    }
    write_text(&run.file("gradcheck.csv"), &csv)?;
    run.finish()?;
    if failed.is_empty() {
        Ok(format!("all gradient checks passed, max relative error {worst:.3e}\n"))
    } else {
        Err(CliError::Invariant(format!("gradient check failed for {}", failed.join(", "))))
    }
}

/// Train one regime in `dir` from `init` and score the validation split.
struct Cell {
    report: EvalReport,
    val_loss: Option<f64>,
}

fn run_cell(cfg: &RunConfig, prep: &Prepared, regime: Regime, init: Option<&Path>, dir: &Path) -> Result<(Cell, Model)> {
    let mut model = build_model(cfg, prep.vocab.len(), regime, init)?;
    let tr = run_training(cfg, prep, &mut model, regime, dir)?;
    write_text(&dir.join("train_report.json"), &train_report_json(&tr, regime)?)?;
    let cell = eval_cell(cfg, prep, &model, regime, &cfg.decode, dir)?;
    Ok((cell, model))
}

fn eval_cell(cfg: &RunConfig, prep: &Prepared, model: &Model, regime: Regime, dc: &vlmkg::decoder::DecodeConfig, dir: &Path) -> Result<Cell> {
    if prep.val().is_empty() {
        return Err(CliError::Config("ablations need a validation split; set corpus.val_fraction > 0".into()));
    }
    let preds = predict(model, regime, prep.val(), prep, dc)?;
    write_predictions(dir, &preds)?;
    let gold = prep.gold(prep.val());
    let report = score(cfg, &preds, &gold)?;
    let graphs: Vec<KnowledgeGraph> = preds.into_iter().map(|p| p.graph).collect();
    write_eval(dir, regime.as_str(), &report, &graphs, &gold)?;
    Ok(Cell {
        report,
        val_loss: validation_loss(cfg, prep, model, regime)?,
    })
}

pub fn ablate_projector(cfg: &RunConfig) -> Result<String> {
    let mut run = RunDir::create(cfg)?;
    let prep = prepare(cfg, &run.path)?;
    run.record_corpus(&prep);
    let init = cfg.trainer.init_checkpoint.as_deref();
    if let Some(p) = init {
        run.record_file("init_checkpoint", p)?;
    }
    let mut csv = format!("n,k,{},val_loss,exact_match\n", metric_header());
    let mut cells = Vec::new();
    for (n, k) in PROJECTOR_GRID {
        let mut c = cfg.clone();
        c.projector.prefix_length = n;
        c.projector.clip_length = k;
        c.validate()?;
        let dir = run.sub(&format!("n{n}_k{k}"))?;
        let (cell, _) = run_cell(&c, &prep, Regime::VlmKg, init, &dir)?;
        let _ = writeln!(csv, "{n},{k}{},{},{:.2}", metric_cells(&cell.report), fmt_loss(cell.val_loss), cell.report.exact_match);
        cells.push((format!("n={n} k={k}"), cell.report));
    }
    write_text(&run.file("ablate_projector.csv"), &csv)?;
    run.finish()?;
    let rows: Vec<(String, &EvalReport)> = cells.iter().map(|(n, r)| (n.clone(), r)).collect();
    Ok(format_table(&rows))
}

pub fn ablate_length(cfg: &RunConfig, checkpoint: Option<&Path>) -> Result<String> {
    let mut run = RunDir::create(cfg)?;
    let prep = prepare(cfg, &run.path)?;
    run.record_corpus(&prep);
    let (model, regime) = match checkpoint {
        Some(p) => {
            run.record_file("checkpoint", p)?;
            load_for_decoding(p, &prep)?
        }
        None => {
            let init = cfg.trainer.init_checkpoint.as_deref();
            if let Some(p) = init {
                run.record_file("init_checkpoint", p)?;
            }
            let dir = run.sub("train")?;
            let mut model = build_model(cfg, prep.vocab.len(), Regime::VlmKg, init)?;
            let tr = run_training(cfg, &prep, &mut model, Regime::VlmKg, &dir)?;
            write_text(&dir.join("train_report.json"), &train_report_json(&tr, Regime::VlmKg)?)?;
            (model, Regime::VlmKg)
        }
    };
    let mut csv = format!("Tokens,{},exact_match\n", metric_header());
    let mut cells = Vec::new();
    for tokens in LENGTH_GRID {
        let dc = vlmkg::decoder::DecodeConfig {
            max_new_tokens: tokens,
            ..cfg.decode.clone()
        };
        let dir = run.sub(&format!("tokens{tokens}"))?;
        let cell = eval_cell(cfg, &prep, &model, regime, &dc, &dir)?;
        let _ = writeln!(csv, "{tokens}{},{:.2}", metric_cells(&cell.report), cell.report.exact_match);
        cells.push((format!("{tokens} tokens"), cell.report));
    }
    write_text(&run.file("ablate_length.csv"), &csv)?;
    run.finish()?;
    let rows: Vec<(String, &EvalReport)> = cells.iter().map(|(n, r)| (n.clone(), r)).collect();
    Ok(format_table(&rows))
}

/// Text-only stage (or `trainer.init_checkpoint`), then joint tuning and
/// projector-only tuning from the same weights.
pub fn ablate_freeze(cfg: &RunConfig) -> Result<String> {
    let mut run = RunDir::create(cfg)?;
    let prep = prepare(cfg, &run.path)?;
    run.record_corpus(&prep);
    let base = match cfg.trainer.init_checkpoint.as_deref() {
        Some(p) => {
            run.record_file("init_checkpoint", p)?;
            p.to_path_buf()
        }
        None => {
            let dir = run.sub("llm_kg")?;
            run_cell(cfg, &prep, Regime::LlmKg, None, &dir)?;
            dir.join("model.ckpt")
        }
    };
    let mut csv = format!("Model,{},val_loss,exact_match\n", metric_header());
    let mut cells = Vec::new();
    for (label, regime) in [("VLM-KG*", Regime::VlmKgFrozen), ("VLM-KG", Regime::VlmKg)] {
        let dir = run.sub(regime.as_str())?;
        let (cell, _) = run_cell(cfg, &prep, regime, Some(&base), &dir)?;
        let _ = writeln!(csv, "{label}{},{},{:.2}", metric_cells(&cell.report), fmt_loss(cell.val_loss), cell.report.exact_match);
        cells.push((label.to_string(), cell.report));
    }
    write_text(&run.file("ablate_freeze.csv"), &csv)?;
    run.finish()?;
    let rows: Vec<(String, &EvalReport)> = cells.iter().map(|(n, r)| (n.clone(), r)).collect();
    Ok(format_table(&rows))
}
