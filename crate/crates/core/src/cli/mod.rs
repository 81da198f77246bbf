//! Command-line front end.
//!
//! Exit codes: 0 success, 2 configuration error, 3 checkpoint error,
//! 4 data error, 1 anything else.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::corpus::{self, CharVocab, Document, Format, SyntheticSpec};
use crate::error::Error;
use crate::flops;
use crate::model::{CarryMask, DecodePolicy, Model, ModelConfig};
use crate::nn::Checkpoint;
use crate::par::{self, Parallelism};
use crate::training::{run_trainer, Trainer};
use crate::windowing::{evaluate_corpus, EvalDoc, EvalReport, PlanMode};

use config::{parse_format, parse_mode, ConfigError, RunConfig, OUTPUT_DIR_ENV};

pub const EXIT_OK: i32 = 0;
pub const EXIT_OTHER: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_CHECKPOINT: i32 = 3;
pub const EXIT_DATA: i32 = 4;

#[derive(Debug, Parser)]
#[command(name = "winrec", version, about = "Window-level recurrence for decoder-only transformers")]
pub struct Cli {
    /// Seed for every random stream (overrides the config file).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model from a run configuration.
    Train(TrainArgs),
    /// Evaluate a checkpoint at one window length and several overlaps.
    Eval(EvalArgs),
    /// Evaluate checkpoints over window lengths and overlaps.
    Sweep(SweepArgs),
    /// Print FLOPs per token.
    Flops(FlopsArgs),
    /// Greedy continuation of a prompt.
    Generate(GenerateArgs),
    /// Write a synthetic topic-marker corpus in token-binary format.
    GenData(GenDataArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// `key=value` overrides applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Continue from a `state.ckpt` written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CorpusArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// text, text-per-file or binary.
    #[arg(long, default_value = "binary")]
    pub format: String,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long)]
    pub window: usize,
    /// Comma-separated overlaps.
    #[arg(long, default_value = "0", value_delimiter = ',')]
    pub overlap: Vec<usize>,
    /// baseline or recurrent; defaults to the mode the checkpoint was trained in.
    #[arg(long)]
    pub mode: Option<String>,
    /// Hide the carry from attention.
    #[arg(long)]
    pub mask_carry: bool,
    /// Name written in the model column; defaults to the file stem.
    #[arg(long)]
    pub name: Option<String>,
    /// Also write the CSV to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long = "checkpoint", required = true)]
    pub checkpoints: Vec<PathBuf>,
    #[command(flatten)]
    pub corpus: CorpusArgs,
    #[arg(long, value_delimiter = ',', required = true)]
    pub windows: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub overlaps: Vec<usize>,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlopsArgs {
    /// Take the architecture from a checkpoint instead of a preset.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// gpt2-small or default.
    #[arg(long, default_value = "gpt2-small")]
    pub preset: String,
    #[arg(long, value_delimiter = ',', required = true)]
    pub windows: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "0")]
    pub overlaps: Vec<usize>,
    /// baseline, recurrent or both.
    #[arg(long, default_value = "both")]
    pub mode: String,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// UTF-8 text for character models, whitespace-separated ids otherwise.
    #[arg(long)]
    pub prompt_file: PathBuf,
    #[arg(long)]
    pub n_tokens: usize,
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub overlap: usize,
    #[arg(long)]
    pub mask_carry: bool,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub docs: usize,
    #[arg(long, default_value_t = 2048)]
    pub doc_length: usize,
    #[arg(long, default_value_t = 4)]
    pub topics: usize,
    #[arg(long, default_value_t = 48)]
    pub shared: usize,
    #[arg(long, default_value_t = 1.0 / 32.0)]
    pub eps: f64,
}

/// Failure of a command, carrying the exit code it maps to.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub message: String,
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError {
            code: EXIT_CONFIG,
            message: e.to_string(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Config(_) | Error::InvalidOverlap { .. } | Error::ContextSize { .. } | Error::Plan(_) => {
                EXIT_CONFIG
            }
            Error::Checkpoint(_) => EXIT_CHECKPOINT,
            Error::Format { .. } | Error::Vocabulary { .. } | Error::Alignment { .. } | Error::Input(_) => {
                EXIT_DATA
            }
            _ => EXIT_OTHER,
        };
        CliError {
            code,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError {
            code: EXIT_OTHER,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn config_error(message: impl Into<String>) -> CliError {
    CliError {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

fn checkpoint_error(path: &Path, e: Error) -> CliError {
    CliError {
        code: EXIT_CHECKPOINT,
        message: format!("{}: {e}", path.display()),
    }
}

/// Parses arguments, runs the command, and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let mut stdout = std::io::stdout().lock();
    match run(cli, &mut stdout) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {}", e.message);
            e.code
        }
    }
}

pub fn run(cli: Cli, out: &mut dyn Write) -> CliResult<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a, cli.seed, out),
        Command::Eval(a) => cmd_eval(a, out),
        Command::Sweep(a) => cmd_sweep(a, out),
        Command::Flops(a) => cmd_flops(a, out),
        Command::Generate(a) => cmd_generate(a, out),
        Command::GenData(a) => cmd_gen_data(a, cli.seed.unwrap_or(0), out),
    }
}

/// Reads a corpus. Raw text is tokenized with `vocab`.
fn read_docs(path: &Path, format: Format, vocab: Option<&CharVocab>, vocab_size: usize) -> CliResult<Vec<Document>> {
    if !path.exists() {
        return Err(CliError {
            code: EXIT_DATA,
            message: format!("corpus {} does not exist", path.display()),
        });
    }
    Ok(corpus::load_corpus(path, format, vocab, Some(vocab_size))?)
}

fn cmd_train(a: TrainArgs, seed: Option<u64>, out: &mut dyn Write) -> CliResult<()> {
    let mut cfg = RunConfig::load(&a.config)?;
    cfg.apply_overrides(&a.overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    if let Ok(dir) = std::env::var(OUTPUT_DIR_ENV) {
        cfg.output_dir = PathBuf::from(dir);
    }
    cfg.train.seed = cfg.seed;

    let vocab = match cfg.data.format {
        Format::RawText(split) => {
            let path = cfg.data.train.clone().ok_or_else(|| config_error("config: field data.train: missing"))?;
            if path.exists() {
                let texts = corpus::read_texts(&path, split)?;
                let v = CharVocab::build(texts.iter().map(|t| t.text.as_str()));
                cfg.model.vocab = v.len();
                Some(v)
            } else {
                None
            }
        }
        Format::TokenBinary => None,
    };
    let mut need = vec!["data.train", "data.val"];
    if cfg.data.test.is_some() {
        need.push("data.test");
    }
    cfg.validate(&need)?;

    let load = |p: &Option<PathBuf>| -> CliResult<Vec<Vec<u32>>> {
        let docs = read_docs(p.as_ref().unwrap(), cfg.data.format, vocab.as_ref(), cfg.model.vocab)?;
        Ok(docs.into_iter().map(|d| d.tokens).collect())
    };
    let train = load(&cfg.data.train)?;
    let val = load(&cfg.data.val)?;

    fs::create_dir_all(&cfg.output_dir)?;
    fs::write(cfg.output_dir.join("run.cfg"), cfg.to_text())?;

    let mut trainer = match &a.resume {
        Some(p) => {
            let ck = Checkpoint::load(p).map_err(|e| checkpoint_error(p, e))?;
            let t = Trainer::resume(&ck, &train, cfg.train.clone()).map_err(|e| checkpoint_error(p, e))?;
            if t.model().config() != &cfg.model {
                return Err(checkpoint_error(p, Error::Checkpoint("architecture differs from config".into())));
            }
            t
        }
        None => Trainer::new(Model::init(cfg.model.clone(), cfg.seed)?, &train, cfg.train.clone())?,
    };

    let log_path = cfg.output_dir.join("train_log.csv");
    let append = a.resume.is_some() && log_path.exists();
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(append)
        .write(true)
        .truncate(!append)
        .open(&log_path)?;
    if !append {
        writeln!(log, "{}", crate::training::LogRecord::CSV_HEADER)?;
    }
    let (best, best_val, _) = run_trainer(&mut trainer, &val, |r| {
        writeln!(log, "{}", r.csv_row())?;
        Ok(())
    })?;

    let annotate = |mut ck: Checkpoint| {
        ck.meta.push(("train.mode".into(), cfg.train.mode.as_str().into()));
        ck.meta.push(("train.window".into(), cfg.train.window.to_string()));
        ck.meta.push(("train.overlap".into(), cfg.train.overlap.to_string()));
        if let Some(v) = &vocab {
            ck.meta.push(("vocab.chars".into(), v.chars()));
        }
        ck
    };
    annotate(best.to_checkpoint()).save(&cfg.output_dir.join("best.ckpt"))?;
    annotate(trainer.model().to_checkpoint()).save(&cfg.output_dir.join("last.ckpt"))?;
    annotate(trainer.snapshot()).save(&cfg.output_dir.join("state.ckpt"))?;
    if !cfg.eval.is_empty() {
        // score the best model on the test split, or validation when absent
        let path = cfg.data.test.as_ref().or(cfg.data.val.as_ref()).unwrap();
        let docs = read_docs(path, cfg.data.format, vocab.as_ref(), cfg.model.vocab)?;
        let ed = eval_docs(&docs);
        let mut csv = format!("{}\n", EvalReport::CSV_HEADER);
        for t in &cfg.eval {
            let r = evaluate_corpus(&best, &ed, t.window, t.overlap, t.mode, CarryMask::Visible, Parallelism::Parallel)?;
            csv.push_str(&r.csv_row("best", t.mode, t.window, t.overlap));
            csv.push('\n');
        }
        fs::write(cfg.output_dir.join("eval.csv"), csv)?;
    }
    writeln!(
        out,
        "trained {} steps; best validation nll {:.6}; outputs in {}",
        trainer.step_count(),
        best_val,
        cfg.output_dir.display()
    )?;
    Ok(())
}

/// A checkpoint with what evaluation needs to know about it.
struct Loaded {
    name: String,
    model: Model,
    vocab: Option<CharVocab>,
    trained_mode: Option<PlanMode>,
    trained_window: Option<usize>,
}

fn load_checkpoint(path: &Path) -> CliResult<Loaded> {
    let ck = Checkpoint::load(path).map_err(|e| checkpoint_error(path, e))?;
    let model = Model::from_checkpoint(&ck).map_err(|e| checkpoint_error(path, e))?;
    let vocab = ck.meta("vocab.chars").map(CharVocab::from_chars);
    if let Some(v) = &vocab {
        if v.len() != model.config().vocab {
            return Err(checkpoint_error(
                path,
                Error::Checkpoint("stored vocabulary does not match model.vocab".into()),
            ));
        }
    }
    Ok(Loaded {
        name: path
            .file_stem()
            .map_or("model".into(), |s| s.to_string_lossy().into_owned()),
        model,
        vocab,
        trained_mode: ck.meta("train.mode").and_then(PlanMode::parse),
        trained_window: ck.meta("train.window").and_then(|w| w.parse().ok()),
    })
}

fn resolve_mode(flag: &Option<String>, l: &Loaded) -> CliResult<PlanMode> {
    match flag {
        Some(m) => parse_mode(m).map_err(config_error),
        None => Ok(l.trained_mode.unwrap_or(PlanMode::Recurrent)),
    }
}

fn corpus_for(l: &Loaded, c: &CorpusArgs) -> CliResult<Vec<Document>> {
    let format = parse_format(&c.format).map_err(|e| config_error(format!("--format: {e}")))?;
    if matches!(format, Format::RawText(_)) && l.vocab.is_none() {
        return Err(config_error("--format: checkpoint has no character vocabulary; use binary"));
    }
    read_docs(&c.corpus, format, l.vocab.as_ref(), l.model.config().vocab)
}

fn eval_docs(docs: &[Document]) -> Vec<EvalDoc<'_>> {
    docs.iter()
        .map(|d| EvalDoc {
            tokens: &d.tokens,
            word_weights: d.word_ends.as_deref(),
        })
        .collect()
}

fn emit(out: &mut dyn Write, file: &Option<PathBuf>, lines: &[String]) -> CliResult<()> {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    out.write_all(text.as_bytes())?;
    if let Some(p) = file {
        fs::write(p, &text)?;
    }
    Ok(())
}

fn cmd_eval(a: EvalArgs, out: &mut dyn Write) -> CliResult<()> {
    let l = load_checkpoint(&a.checkpoint)?;
    let mode = resolve_mode(&a.mode, &l)?;
    let docs = corpus_for(&l, &a.corpus)?;
    let ed = eval_docs(&docs);
    let mask = if a.mask_carry { CarryMask::Masked } else { CarryMask::Visible };
    let name = a.name.clone().unwrap_or(l.name.clone());
    let mut lines = vec![EvalReport::CSV_HEADER.to_string()];
    for &o in &a.overlap {
        let r = evaluate_corpus(&l.model, &ed, a.window, o, mode, mask, Parallelism::Parallel)?;
        lines.push(r.csv_row(&name, mode, a.window, o));
    }
    emit(out, &a.out, &lines)
}

fn cmd_sweep(a: SweepArgs, out: &mut dyn Write) -> CliResult<()> {
    let models = a
        .checkpoints
        .iter()
        .map(|p| load_checkpoint(p))
        .collect::<CliResult<Vec<_>>>()?;
    let mut jobs = Vec::new();
    let mut corpora = Vec::new();
    for (mi, l) in models.iter().enumerate() {
        corpora.push(corpus_for(l, &a.corpus)?);
        let mode = resolve_mode(&a.mode, l)?;
        for &t in &a.windows {
            for &o in &a.overlaps {
                jobs.push((mi, mode, t, o));
            }
        }
    }
    // each job evaluates documents sequentially; jobs spread over workers
    let rows = par::map(Parallelism::Parallel, &jobs, |&(mi, mode, t, o)| {
        let l = &models[mi];
        let ed = eval_docs(&corpora[mi]);
        match evaluate_corpus(&l.model, &ed, t, o, mode, CarryMask::Visible, Parallelism::Sequential) {
            Ok(r) => r.csv_row(&l.name, mode, t, o),
            Err(e) => {
                log::warn!("skipping {} T={t} overlap={o}: {e}", l.name);
                format!("{},{},{t},{o},NaN,NaN,NaN,0,0", l.name, mode.as_str())
            }
        }
    });
    let mut lines = vec![EvalReport::CSV_HEADER.to_string()];
    lines.extend(rows);
    emit(out, &a.out, &lines)
}

fn cmd_flops(a: FlopsArgs, out: &mut dyn Write) -> CliResult<()> {
    let config = match &a.checkpoint {
        Some(p) => load_checkpoint(p)?.model.config().clone(),
        None => match a.preset.as_str() {
            "gpt2-small" => ModelConfig::gpt2_small(),
            "default" => ModelConfig::default(),
            other => return Err(config_error(format!("--preset: unknown preset {other:?}"))),
        },
    };
    let modes: &[bool] = match a.mode.as_str() {
        "baseline" => &[false],
        "recurrent" => &[true],
        "both" => &[false, true],
        m => return Err(config_error(format!("--mode: expected baseline, recurrent or both, got {m:?}"))),
    };
    let mut lines = vec![flops::CSV_HEADER.to_string()];
    for &t in &a.windows {
        for &o in &a.overlaps {
            for &rec in modes {
                let f = flops::flops_per_token(&config, t, o, rec)?;
                lines.push(flops::csv_row(t, o, rec, f));
            }
        }
    }
    emit(out, &None, &lines)
}

fn cmd_generate(a: GenerateArgs, out: &mut dyn Write) -> CliResult<()> {
    let l = load_checkpoint(&a.checkpoint)?;
    let mode = resolve_mode(&a.mode, &l)?;
    let text = fs::read_to_string(&a.prompt_file).map_err(|e| CliError {
        code: EXIT_DATA,
        message: format!("{}: {e}", a.prompt_file.display()),
    })?;
    let prompt: Vec<u32> = match &l.vocab {
        Some(v) => {
            let ids = v.encode(&text);
            if !ids.is_empty() && ids.iter().all(|&i| i == CharVocab::OOV) {
                log::warn!("prompt consists only of out-of-vocabulary characters");
            }
            ids
        }
        None => text
            .split_whitespace()
            .map(|w| w.parse::<u32>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError {
                code: EXIT_DATA,
                message: format!("prompt must be whitespace-separated token ids: {e}"),
            })?,
    };
    if prompt.is_empty() {
        return Err(CliError {
            code: EXIT_DATA,
            message: "prompt is empty".into(),
        });
    }
    if let Some(&id) = prompt.iter().find(|&&t| t as usize >= l.model.config().vocab) {
        return Err(Error::Vocabulary {
            id,
            vocab: l.model.config().vocab,
        }
        .into());
    }
    if a.n_tokens == 0 {
        return Ok(());
    }
    let window = a
        .window
        .or(l.trained_window)
        .unwrap_or(l.model.config().max_positions);
    let policy = DecodePolicy {
        window,
        overlap: a.overlap,
        mode,
        mask: if a.mask_carry { CarryMask::Masked } else { CarryMask::Visible },
    };
    let ids = l.model.greedy_decode(&prompt, a.n_tokens, &policy)?;
    match &l.vocab {
        Some(v) => writeln!(out, "{}", v.decode(&ids))?,
        None => {
            let s: Vec<String> = ids.iter().map(u32::to_string).collect();
            writeln!(out, "{}", s.join(" "))?
        }
    }
    Ok(())
}

fn cmd_gen_data(a: GenDataArgs, seed: u64, out: &mut dyn Write) -> CliResult<()> {
    let spec = SyntheticSpec::private_tokens(a.topics, a.shared, a.eps, a.doc_length, a.docs, seed);
    let docs = corpus::gen_synthetic(&spec)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent)?;
    }
    corpus::write_token_binary(&a.out, &docs)?;
    writeln!(
        out,
        "vocab={} docs={} ppl_conditional={:.6} ppl_marginal={:.6} gap={:.6}",
        spec.vocab_size(),
        docs.len(),
        spec.conditional_entropy().exp(),
        spec.marginal_entropy().exp(),
        spec.analytic_gap()
    )?;
    Ok(())
}
