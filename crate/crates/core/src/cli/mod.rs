//! The `keap` command line.
//!
//! Every subcommand takes free-form `--key value` options layered over
//! per-command defaults and optional `--config` files of `key = value`
//! lines. The resolved set is echoed into run directories so a run can be
//! repeated from its own record.

mod config;

pub use config::{parse_config_text, parse_flags, synthetic_model, synthetic_train, Command, RunConfig, MODEL_KEYS, TRAIN_KEYS};

use std::collections::HashSet;
use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::data::{
    filter_leakage, generate_synthetic_kg, load_holdout, load_triplets, DataError, KnowledgeGraph, ResiduePolicy,
    SynthMode,
};
use crate::eval::{self, ContactProbeSettings, EvalError, F1Average, MetricReport};
use crate::gradcheck::{gradcheck_fresh, GradcheckSettings};
use crate::model::{ModelConfig, Variant};
use crate::seed::derive_seed;
use crate::tensor::TensorError;
use crate::train::{
    evaluate_reconstruction, load_checkpoint, save_checkpoint, write_trace_csv, CheckpointError, CheckpointSink,
    Corpus, TrainError, Trainer,
};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Input(String),
    #[error("checkpoint mismatch: {0}")]
    Mismatch(String),
    #[error("{0}")]
    Check(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Input(_) | CliError::Mismatch(_) => EXIT_USAGE,
            CliError::Check(_) => EXIT_CHECK,
            CliError::Numeric(_) => EXIT_NUMERIC,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(m) => CliError::Usage(m),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<TensorError> for CliError {
    fn from(e: TensorError) -> Self {
        match e {
            TensorError::DegenerateRow { .. } => CliError::Numeric(e.to_string()),
            TensorError::Config(m) => CliError::Usage(m),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<CheckpointError> for CliError {
    fn from(e: CheckpointError) -> Self {
        match e {
            CheckpointError::Version { .. } | CheckpointError::Mismatch(_) => CliError::Mismatch(e.to_string()),
            other => CliError::Input(other.to_string()),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::NonFinite { .. } => CliError::Numeric(e.to_string()),
            TrainError::Tensor(t) => t.into(),
            TrainError::Data(d) => d.into(),
            TrainError::Checkpoint(c) => c.into(),
            TrainError::Contract(m) => CliError::Usage(m),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Config(m) => CliError::Usage(m),
            EvalError::Tensor(t) => t.into(),
            EvalError::Undefined(m) => CliError::Numeric(format!("metric undefined: {m}")),
            other => CliError::Input(other.to_string()),
        }
    }
}

const OPTIONS_HELP: &str = "Options are given as --key value (or --key=value) and override values from \
--config files, which hold `key = value` lines with # comments. The rightmost assignment wins.";

#[derive(Parser, Debug)]
#[command(name = "keap", version, about = "Knowledge-enhanced masked protein modeling", after_help = OPTIONS_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args, Debug)]
struct Opts {
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--KEY VALUE")]
    options: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Pretrain on a triplet file and write a run directory.
    Pretrain(Opts),
    /// Compare backpropagated and finite-difference gradients.
    Gradcheck(Opts),
    /// Train every variant at every mask ratio and report final losses.
    Ablate(Opts),
    /// Run a downstream probe on frozen encoder states.
    Eval(Opts),
    /// Remove held-out proteins from a triplet file.
    FilterKg(Opts),
    /// Write a synthetic triplet file.
    GenSynth(Opts),
}

/// Runs the command line and returns the process exit code.
pub fn main_with<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = if e.use_stderr() {
                write!(err, "{}", e.render())
            } else {
                write!(out, "{}", e.render())
            };
            return code;
        }
    };
    let (cmd, opts) = match cli.command {
        Sub::Pretrain(o) => (Command::Pretrain, o),
        Sub::Gradcheck(o) => (Command::Gradcheck, o),
        Sub::Ablate(o) => (Command::Ablate, o),
        Sub::Eval(o) => (Command::Eval, o),
        Sub::FilterKg(o) => (Command::FilterKg, o),
        Sub::GenSynth(o) => (Command::GenSynth, o),
    };
    let result = RunConfig::resolve(cmd, &opts.options).and_then(|rc| match cmd {
        Command::Pretrain => cmd_pretrain(&rc, out, err).map(|_| ()),
        Command::Gradcheck => cmd_gradcheck(&rc, out),
        Command::Ablate => cmd_ablate(&rc, out, err),
        Command::Eval => cmd_eval(&rc, out),
        Command::FilterKg => cmd_filter_kg(&rc, out),
        Command::GenSynth => cmd_gen_synth(&rc, out),
    });
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "keap {}: {e}", cmd.name());
            e.exit_code()
        }
    }
}

fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Input(format!("{}: {e}", path.display()))
}

fn write_output(rc: &RunConfig, bytes: &[u8], out: &mut dyn Write) -> Result<(), CliError> {
    match rc.opt_str("out") {
        Some(p) => fs::write(p, bytes).map_err(|e| io_err(Path::new(p), e)),
        None => out
            .write_all(bytes)
            .map_err(|e| CliError::Input(format!("stdout: {e}"))),
    }
}

fn load_graph(rc: &RunConfig, key: &str, err: &mut dyn Write) -> Result<KnowledgeGraph, CliError> {
    let path = rc.require(key)?;
    let policy: ResiduePolicy = rc.get("residue_policy")?;
    let (kg, report) = load_triplets(Path::new(path), policy)?;
    for (line, reason) in &report.rejected {
        let _ = writeln!(err, "warning: {path}:{line}: skipped ({reason})");
    }
    for w in &report.warnings {
        let _ = writeln!(err, "warning: {path}: {w}");
    }
    Ok(kg)
}

fn run_root(rc: &RunConfig) -> PathBuf {
    match rc.opt_str("run_root") {
        Some(r) => PathBuf::from(r),
        None => std::env::var_os("KEAP_RUN_DIR")
            .map(PathBuf::from)
            .unwrap_or_else(|| PathBuf::from("runs")),
    }
}

/// Loads, filters and trains; returns the run directory. The directory
/// holds `config.resolved`, `loss.csv`, `final.ckpt`, optional periodic
/// checkpoints and, with a holdout, `removal.json`.
pub fn cmd_pretrain(rc: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<PathBuf, CliError> {
    let mut kg = load_graph(rc, "triplets", err)?;
    let dir = run_root(rc).join(rc.require("name")?);
    fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    rc.write_to(&dir.join("config.resolved"))?;
    if let Some(h) = rc.opt_str("holdout") {
        let holdout = load_holdout(Path::new(h), rc.get("residue_policy")?)?;
        let (kept, report) = filter_leakage(&kg, &holdout);
        let json = serde_json::to_string_pretty(&report).expect("report serialises");
        let path = dir.join("removal.json");
        fs::write(&path, json + "\n").map_err(|e| io_err(&path, e))?;
        kg = kept;
    }
    if kg.is_empty() {
        return Err(CliError::Input("no triplets left to train on".into()));
    }
    let mut model = rc.model_config()?;
    let train = rc.train_config()?;
    let corpus = Corpus::build(&kg, &model, train.min_word_count)?;
    model.text_vocab = corpus.text_vocab.size();
    let mut trainer = Trainer::new(model, train.clone(), corpus)?;
    if train.checkpoint_interval > 0 {
        let ck = dir.join("checkpoints");
        fs::create_dir_all(&ck).map_err(|e| io_err(&ck, e))?;
        trainer = trainer.with_checkpoints(CheckpointSink {
            dir: ck,
            interval: train.checkpoint_interval,
        });
    }
    let outcome = trainer.run();
    let csv = dir.join("loss.csv");
    let mut buf = Vec::new();
    write_trace_csv(&trainer.trace, &mut buf).map_err(|e| io_err(&csv, e))?;
    fs::write(&csv, buf).map_err(|e| io_err(&csv, e))?;
    outcome?;
    save_checkpoint(&trainer.checkpoint(), &dir.join("final.ckpt"))?;
    let last = trainer.trace.last().map_or(f64::NAN, |r| r.loss);
    let _ = writeln!(out, "trained {} steps, final loss {last:.4}, run directory {}", trainer.state.step, dir.display());
    Ok(dir)
}

pub fn cmd_gradcheck(rc: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let cfg = rc.model_config_over(&ModelConfig::tiny())?;
    let settings = GradcheckSettings {
        samples: rc.get("samples")?,
        step: rc.get("fd_step")?,
        tolerance: rc.get("tolerance")?,
        max_params: rc.get("max_params")?,
        batch_size: rc.get("batch_size")?,
        seed: rc.get("seed")?,
        corrupt: rc.opt_str("corrupt_grad").map(String::from),
    };
    let report = gradcheck_fresh(&cfg, &settings)?;
    let mut text = String::new();
    for s in &report.samples {
        let verdict = if s.rel_error < report.tolerance { "ok" } else { "FAIL" };
        text.push_str(&format!(
            "{verdict} {}[{}] analytic {:.6e} numeric {:.6e} rel {:.3e}\n",
            s.tensor, s.index, s.analytic, s.numeric, s.rel_error
        ));
    }
    text.push_str(&format!(
        "checked {} parameters, max relative error {:.3e} (tolerance {:.1e})\n",
        report.samples.len(),
        report.max_rel_error,
        report.tolerance
    ));
    out.write_all(text.as_bytes())
        .map_err(|e| CliError::Input(format!("stdout: {e}")))?;
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Check(format!(
            "gradient check failed for: {}",
            report.failing_tensors().join(", ")
        )))
    }
}

/// One cell of the ablation grid.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub mask_ratio: f64,
    pub steps: u64,
    /// Mean training loss over the last 50 updates.
    pub train_loss: f64,
    /// Reconstruction loss on the evaluation set with every selected residue
    /// masked.
    pub final_loss: f64,
    pub masked_accuracy: f64,
    pub match_accuracy: Option<f64>,
}

fn parse_variant(name: &str) -> Result<(Variant, bool), CliError> {
    let (base, matching) = match name.strip_suffix("+match") {
        Some(b) => (b, true),
        None => (name, false),
    };
    let v = base.parse::<Variant>().map_err(|e| CliError::Usage(e.to_string()))?;
    Ok((v, matching))
}

/// Trains each requested variant at each mask ratio with the same seed.
pub fn ablate(rc: &RunConfig, err: &mut dyn Write) -> Result<Vec<AblationRow>, CliError> {
    let base = rc.model_config_over(&synthetic_model())?;
    let train = rc.train_config()?;
    let eval_size: usize = rc.get("eval_size")?;
    let (kg, eval_kg) = match rc.opt_str("triplets") {
        Some(_) => {
            let kg = load_graph(rc, "triplets", err)?;
            let held: KnowledgeGraph = kg.triplets().iter().take(eval_size.min(kg.len())).cloned().collect();
            (kg, held)
        }
        None => {
            let mode: SynthMode = rc.get("synth_mode")?;
            let n: usize = rc.get("synth_n")?;
            let len: usize = rc.get("synth_len")?;
            (
                generate_synthetic_kg(n, len, mode, derive_seed(train.seed, "synth"))?,
                generate_synthetic_kg(eval_size.max(1), len, mode, derive_seed(train.seed, "synth-eval"))?,
            )
        }
    };
    let variants: Vec<(String, Variant, bool)> = rc
        .list("variants")
        .into_iter()
        .map(|name| parse_variant(&name).map(|(v, m)| (name, v, m)))
        .collect::<Result<_, _>>()?;
    let ratios: Vec<f64> = rc
        .list("ratios")
        .iter()
        .map(|r| {
            r.parse::<f64>()
                .map_err(|e| CliError::Usage(format!("mask ratio `{r}`: {e}")))
        })
        .collect::<Result<_, _>>()?;
    if variants.is_empty() || ratios.is_empty() {
        return Err(CliError::Usage("ablate needs at least one variant and one ratio".into()));
    }
    let corpus = Corpus::build(&kg, &base, train.min_word_count)?;
    let eval_corpus = Corpus::with_vocab(&eval_kg, &base, corpus.text_vocab.clone())?;
    let mut rows = Vec::with_capacity(variants.len() * ratios.len());
    for (name, variant, matching) in &variants {
        for &ratio in &ratios {
            let mut cfg = base.clone();
            cfg.variant = *variant;
            cfg.triplet_match = *matching;
            cfg.mask_ratio = ratio;
            cfg.text_vocab = corpus.text_vocab.size();
            let mut trainer = Trainer::new(cfg.clone(), train.clone(), corpus.clone())?;
            trainer.run()?;
            let tail = trainer.trace.len().min(50).max(1);
            let train_loss = trainer.trace.iter().rev().take(tail).map(|r| r.loss).sum::<f64>() / tail as f64;
            let rep = evaluate_reconstruction(&cfg, &trainer.state.params, &eval_corpus.data, 64, train.seed)?;
            let row = AblationRow {
                variant: name.clone(),
                mask_ratio: ratio,
                steps: trainer.state.step,
                train_loss,
                final_loss: rep.loss,
                masked_accuracy: rep.accuracy,
                match_accuracy: rep.match_accuracy,
            };
            let _ = writeln!(
                err,
                "{} ratio {}: final loss {:.4}, accuracy {:.3}",
                row.variant, row.mask_ratio, row.final_loss, row.masked_accuracy
            );
            rows.push(row);
        }
    }
    Ok(rows)
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant,mask_ratio,steps,train_loss,final_loss,masked_accuracy,match_accuracy\n");
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{}\n",
            r.variant,
            r.mask_ratio,
            r.steps,
            r.train_loss,
            r.final_loss,
            r.masked_accuracy,
            r.match_accuracy.map(|m| format!("{m:.6}")).unwrap_or_default()
        ));
    }
    s
}

pub fn cmd_ablate(rc: &RunConfig, out: &mut dyn Write, err: &mut dyn Write) -> Result<(), CliError> {
    let rows = ablate(rc, err)?;
    write_output(rc, ablation_csv(&rows).as_bytes(), out)
}

/// Metric reports for one evaluation task.
pub fn evaluate_task(rc: &RunConfig) -> Result<Vec<MetricReport>, CliError> {
    let ckpt = load_checkpoint(Path::new(rc.require("checkpoint")?))?;
    let from_ckpt = &ckpt.model_config;
    let requested = rc.model_config_over(from_ckpt)?;
    if &requested != from_ckpt {
        let differing: Vec<&str> = MODEL_KEYS
            .iter()
            .copied()
            .filter(|k| rc.is_explicit(k) && rc.opt_str(k).is_some())
            .collect();
        return Err(CliError::Mismatch(format!(
            "options {} disagree with the checkpoint's model configuration",
            differing.join(", ")
        )));
    }
    let cfg = &ckpt.model_config;
    let params = &ckpt.state.params;
    let data = PathBuf::from(rc.require("data")?);
    let seed: u64 = rc.get("seed")?;
    let reports = match rc.require("task")? {
        "contact" => {
            let (records, fp) = eval::load_contact_records(&data)?;
            let settings = ContactProbeSettings {
                epochs: rc.get("probe_epochs")?,
                lr: rc.get("probe_lr")?,
                seed,
                ..ContactProbeSettings::default()
            };
            eval::eval_contact(cfg, params, &records, settings, &fp)?
        }
        "ppi" => {
            let (records, fp) = eval::load_ppi(&data)?;
            let average = match rc.raw("f1_average") {
                "micro" => F1Average::Micro,
                "macro" => F1Average::Macro,
                other => return Err(CliError::Usage(format!("f1_average must be micro or macro, got `{other}`"))),
            };
            eval::eval_ppi(cfg, params, &records, rc.get("folds")?, seed, average, &fp)?
        }
        "similarity" => {
            let (records, fp) = eval::load_similarity(&data)?;
            eval::eval_similarity(cfg, params, &records, &fp)?
        }
        "affinity" => {
            let (records, fp) = eval::load_affinity(&data)?;
            eval::eval_affinity(cfg, params, &records, rc.get("folds")?, seed, &fp)?
        }
        other => {
            return Err(CliError::Usage(format!(
                "unknown task `{other}`; expected contact, ppi, similarity or affinity"
            )))
        }
    };
    Ok(reports)
}

pub fn cmd_eval(rc: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let reports = evaluate_task(rc)?;
    let mut buf = Vec::new();
    eval::write_reports_jsonl(&reports, &mut buf).map_err(|e| CliError::Input(e.to_string()))?;
    write_output(rc, &buf, out)
}

pub fn cmd_filter_kg(rc: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let mut sink = std::io::sink();
    let kg = load_graph(rc, "input", &mut sink)?;
    let policy: ResiduePolicy = rc.get("residue_policy")?;
    let holdout = match rc.opt_str("holdout") {
        Some(h) => load_holdout(Path::new(h), policy)?,
        None => HashSet::new(),
    };
    let (kept, report) = filter_leakage(&kg, &holdout);
    let dest = PathBuf::from(rc.require("out")?);
    kept.save(&dest)?;
    let json = serde_json::to_string(&report).expect("report serialises");
    writeln!(out, "{json}").map_err(|e| CliError::Input(format!("stdout: {e}")))
}

pub fn cmd_gen_synth(rc: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let mode: SynthMode = rc.get("mode")?;
    let kg = generate_synthetic_kg(rc.get("n")?, rc.get("len")?, mode, rc.get("seed")?)?;
    let dest = PathBuf::from(rc.require("out")?);
    kg.save(&dest)?;
    writeln!(out, "wrote {} triplets to {}", kg.len(), dest.display())
        .map_err(|e| CliError::Input(format!("stdout: {e}")))
}
