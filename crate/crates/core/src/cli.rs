//! Command-line front end.
//!
//! Every verb takes the same global flags, writes a reproducibility stanza
//! into the output directory and holds a lock file there while it runs.
//! Failures print a JSON object on stderr and map onto the exit codes below.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::dataset::{read_features, write_corpus};
use crate::error::Error;
use crate::model::{BocSource, Latent};
use crate::boc::argmax_baseline;
use crate::captioner::DecodeMode;
use crate::trainer::checkpoint::read_container;
use crate::trainer::{corpus_from_config, load_selector, save_selector, Config, EvalMode, Trainer};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

const LOCK_NAME: &str = ".dmtci.lock";
const CHECKPOINT_NAME: &str = "checkpoint.ckpt";
const SELECTOR_NAME: &str = "selector.ckpt";

#[derive(Debug, Parser)]
#[command(name = "dmtci", version, about = "Dependent multi-task captioning with latent de-confounding")]
pub struct Cli {
    /// Config file of `key = value` lines.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs/default")]
    pub out: PathBuf,
    /// Master seed; overrides `seed` from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Log progress to stderr (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Greedy,
    GoldBoc,
    Candidates,
}

impl From<ModeArg> for EvalMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Greedy => EvalMode::Greedy,
            ModeArg::GoldBoc => EvalMode::GoldBoc,
            ModeArg::Candidates => EvalMode::Candidates,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic corpus into `<out>/corpus`.
    GenData,
    /// Run the MLE and RL phases, checkpointing after every epoch.
    Train {
        /// Continue from `<out>/checkpoint.ckpt` if it exists.
        #[arg(long)]
        resume: bool,
    },
    /// Score a checkpoint on a split.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long, value_enum, default_value = "greedy")]
        mode: ModeArg,
        /// Trained selector used in candidates mode.
        #[arg(long)]
        selector: Option<PathBuf>,
    },
    /// Caption every image of a feature file.
    Caption {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        features: PathBuf,
    },
    /// Train (or load) a selector and write its chosen candidate per image.
    Select {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        selector: Option<PathBuf>,
        #[arg(long, default_value = "test")]
        split: String,
    },
    /// Run the oracle verification suite.
    Verify,
}

impl Command {
    fn verb(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::Train { .. } => "train",
            Command::Eval { .. } => "eval",
            Command::Caption { .. } => "caption",
            Command::Select { .. } => "select",
            Command::Verify => "verify",
        }
    }
}

/// A failure carrying its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn usage(message: impl Into<String>) -> Self {
        Self {
            code: EXIT_USAGE,
            kind: "usage",
            message: message.into(),
        }
    }

    pub fn to_json(&self) -> String {
        json!({"error": {"kind": self.kind, "message": self.message}, "exit_code": self.code}).to_string()
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::Config(_) => (EXIT_USAGE, "config"),
            Error::UnknownConfigKey(_) => (EXIT_USAGE, "unknown_config_key"),
            Error::MissingFile(_) => (EXIT_RUNTIME, "missing_file"),
            Error::Checkpoint(_) => (EXIT_RUNTIME, "checkpoint"),
            Error::NonFiniteLoss { .. } | Error::NonFinite { .. } => (EXIT_RUNTIME, "non_finite"),
            Error::Io(_) => (EXIT_RUNTIME, "io"),
            Error::Json(_) => (EXIT_RUNTIME, "json"),
            _ => (EXIT_RUNTIME, "runtime"),
        };
        Self {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::from(e).into()
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

/// Removes the lock file when the command ends.
struct OutputLock(PathBuf);

impl OutputLock {
    fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_NAME);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(Self(path))
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError {
                code: EXIT_RUNTIME,
                kind: "locked",
                message: format!("{} is in use by another run (remove {} if stale)", dir.display(), path.display()),
            }),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Serialize)]
struct Stanza<'a> {
    verb: &'a str,
    config_hash: String,
    seed: u64,
    code_version: &'a str,
    config: String,
}

fn write_stanza(out: &Path, verb: &str, config: &Config) -> CliResult<()> {
    let stanza = Stanza {
        verb,
        config_hash: config.hash(),
        seed: config.seed,
        code_version: env!("CARGO_PKG_VERSION"),
        config: config.to_text(),
    };
    fs::write(
        out.join(format!("reproducibility-{verb}.json")),
        serde_json::to_string_pretty(&stanza).map_err(Error::from)? + "\n",
    )?;
    Ok(())
}

fn resolve_config(cli: &Cli) -> CliResult<Config> {
    let mut config = match &cli.config {
        Some(p) if !p.exists() => return Err(CliError::usage(format!("config file {} does not exist", p.display()))),
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    for kv in &cli.overrides {
        config.apply_override(kv)?;
    }
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

/// Evaluation-time keys that may differ from the training config.
fn is_eval_key(key: &str) -> bool {
    key.starts_with("eval.") || key.starts_with("selector.")
}

/// Loads a checkpoint and regenerates its corpus. `eval.*` and `selector.*`
/// settings come from the command line; all others come from the checkpoint.
fn load_trainer(cli: &Cli, explicit: Option<&Path>) -> CliResult<(Trainer, crate::dataset::Corpus, Config)> {
    let path = explicit.map(Path::to_path_buf).unwrap_or_else(|| cli.out.join(CHECKPOINT_NAME));
    let cli_config = resolve_config(cli)?;
    #[derive(serde::Deserialize)]
    struct Head {
        config: Config,
    }
    let (head, _): (Head, _) = read_container(&path)?;
    let mut config = head.config;
    for kv in &cli.overrides {
        let key = kv.split('=').next().unwrap_or("").trim();
        if is_eval_key(key) {
            config.apply_override(kv)?;
        } else if key != "seed" {
            return Err(CliError::usage(format!(
                "`{key}` is fixed by the checkpoint; only eval.* and selector.* may be overridden here"
            )));
        }
    }
    if cli.config.is_some() {
        config.eval = cli_config.eval.clone();
        config.selector = cli_config.selector.clone();
    }
    let corpus = corpus_from_config(&config)?;
    let mut trainer = Trainer::load(&path, &corpus)?;
    trainer.config.eval = config.eval.clone();
    trainer.config.selector = config.selector.clone();
    Ok((trainer, corpus, config))
}

fn jsonl<T: Serialize>(path: &Path, rows: &[T]) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in rows {
        serde_json::to_writer(&mut w, r).map_err(Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

fn run_command(cli: &Cli) -> CliResult<i32> {
    let verb = cli.command.verb();
    let _lock = OutputLock::acquire(&cli.out)?;
    let out = cli.out.as_path();
    match &cli.command {
        Command::GenData => {
            let config = resolve_config(cli)?;
            write_stanza(out, verb, &config)?;
            let corpus = corpus_from_config(&config)?;
            let dir = out.join("corpus");
            write_corpus(&dir, &corpus)?;
            println!(
                "{}",
                json!({"corpus": dir, "train": corpus.train.len(), "val": corpus.val.len(), "test": corpus.test.len()})
            );
        }
        Command::Train { resume } => {
            let config = resolve_config(cli)?;
            write_stanza(out, verb, &config)?;
            let corpus = corpus_from_config(&config)?;
            let ckpt = out.join(CHECKPOINT_NAME);
            let mut trainer = if *resume && ckpt.exists() {
                let t = Trainer::load(&ckpt, &corpus)?;
                if t.config.hash() != config.hash() {
                    return Err(CliError::usage("checkpoint was trained with a different config"));
                }
                t
            } else {
                Trainer::new(config, &corpus)?
            };
            trainer.run(&corpus, Some(&ckpt))?;
            jsonl(&out.join("train_log.jsonl"), &trainer.state.history)?;
            println!(
                "{}",
                json!({"checkpoint": ckpt, "epochs": trainer.state.epoch, "best_val_cider": trainer.state.best_val_cider})
            );
        }
        Command::Eval {
            checkpoint,
            split,
            mode,
            selector,
        } => {
            let (trainer, corpus, config) = load_trainer(cli, checkpoint.as_deref())?;
            write_stanza(out, verb, &config)?;
            let sel = selector.as_deref().map(load_selector).transpose()?;
            let report = trainer.evaluate(&corpus, split, (*mode).into(), sel.as_ref())?;
            let text = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
            let name = format!("report-{split}-{}.json", mode.to_possible_value().expect("named").get_name());
            fs::write(out.join(name), &text)?;
            print!("{text}");
        }
        Command::Caption { checkpoint, features } => {
            let (trainer, _, config) = load_trainer(cli, checkpoint.as_deref())?;
            write_stanza(out, verb, &config)?;
            let (_, images) = read_features(features)?;
            let model = &trainer.model;
            let mut rows = Vec::with_capacity(images.len());
            for (id, f) in &images {
                let d = model.caption(f, BocSource::Predicted, Latent::Zero, &[], DecodeMode::Greedy)?;
                let boc = if model.config.use_mediator {
                    Some(argmax_baseline(&model.boc_distribution(f)?).counts)
                } else {
                    None
                };
                rows.push(json!({"id": id, "caption": model.vocab.decode(&d.tokens), "boc": boc}));
            }
            jsonl(&out.join("captions.jsonl"), &rows)?;
            println!("{}", json!({"captions": out.join("captions.jsonl"), "images": rows.len()}));
        }
        Command::Select {
            checkpoint,
            selector,
            split,
        } => {
            let (trainer, corpus, config) = load_trainer(cli, checkpoint.as_deref())?;
            write_stanza(out, verb, &config)?;
            let sel = match selector {
                Some(p) => load_selector(p)?,
                None => {
                    let s = trainer.train_selector(&corpus)?;
                    save_selector(&s, &out.join(SELECTOR_NAME))?;
                    s
                }
            };
            let records = match split.as_str() {
                "train" => &corpus.train,
                "val" => &corpus.val,
                "test" => &corpus.test,
                other => return Err(CliError::usage(format!("unknown split {other:?}"))),
            };
            let model = &trainer.model;
            let k = config.eval.candidates;
            let mut rows = Vec::with_capacity(records.len());
            for (i, r) in records.iter().enumerate() {
                let cands = model.generate_candidates(r, k, config.seed, i as u64)?;
                let best = sel.select_best(&r.features, &cands)?;
                rows.push(json!({
                    "id": r.id,
                    "caption": model.vocab.decode(&cands[best]),
                    "selected": best,
                    "candidates": cands.iter().map(|c| model.vocab.decode(c)).collect::<Vec<_>>(),
                }));
            }
            let path = out.join(format!("selected-{split}.jsonl"));
            jsonl(&path, &rows)?;
            println!("{}", json!({"selected": path, "images": rows.len()}));
        }
        Command::Verify => {
            let config = resolve_config(cli)?;
            write_stanza(out, verb, &config)?;
            let report = verify::run_suite(config.seed);
            let text = serde_json::to_string_pretty(&report).map_err(Error::from)? + "\n";
            fs::write(out.join("verify.json"), &text)?;
            for c in &report.checks {
                println!(
                    "{} {} observed={:.6e} expected={:.6e} tol={:.1e}",
                    if c.pass { "PASS" } else { "FAIL" },
                    c.name,
                    c.observed,
                    c.expected,
                    c.tolerance
                );
            }
            if !report.all_passed() {
                return Ok(EXIT_VERIFY);
            }
        }
    }
    Ok(EXIT_OK)
}

/// Parses arguments, runs the verb and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return EXIT_OK;
            }
            eprintln!("{}", CliError::usage(e.to_string().trim()).to_json());
            return EXIT_USAGE;
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    let _ = env_logger::Builder::new().filter_level(level).try_init();
    match run_command(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", e.to_json());
            e.code
        }
    }
}
