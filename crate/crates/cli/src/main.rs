use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use seqforge::Error;

mod commands;

#[derive(Parser, Debug)]
#[command(
    name = "seqforge",
    version,
    about = "Train, decode and score sequence-to-sequence models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train on a parallel corpus.
    Train {
        /// Source side, one tokenized sentence per line.
        source: PathBuf,
        /// Target side, aligned with `source`.
        target: PathBuf,
        /// Continue from this checkpoint instead of initializing.
        #[arg(long)]
        restore: Option<PathBuf>,
        #[command(flatten)]
        keys: KeyFlags,
    },
    /// Decode one source sentence per line.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        input: PathBuf,
        /// Write here instead of standard output.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        keys: KeyFlags,
    },
    /// Per-line negative log-likelihood of references, and corpus perplexity.
    Score {
        #[arg(long)]
        checkpoint: PathBuf,
        source: PathBuf,
        reference: PathBuf,
        #[command(flatten)]
        keys: KeyFlags,
    },
    /// Replay a data-parallel timeline scenario.
    Simulate { scenario: PathBuf },
}

/// Flags that set configuration keys. Each maps to exactly one key; values
/// are parsed against the key's type once the schema is known.
#[derive(Args, Debug, Default)]
pub struct KeyFlags {
    /// `key = value` lines applied before any flag.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    #[arg(long)]
    max_tokens: Option<String>,
    #[arg(long)]
    max_sentences: Option<String>,
    #[arg(long)]
    workers: Option<String>,
    #[arg(long)]
    accum: Option<String>,
    #[arg(long)]
    fp16: bool,
    #[arg(long)]
    lr: Option<String>,
    #[arg(long)]
    scheduler: Option<String>,
    #[arg(long)]
    warmup: Option<String>,
    #[arg(long)]
    criterion: Option<String>,
    #[arg(long)]
    label_smoothing: Option<String>,
    #[arg(long)]
    max_steps: Option<String>,
    #[arg(long)]
    max_epochs: Option<String>,
    #[arg(long)]
    save_interval: Option<String>,
    #[arg(long)]
    save_dir: Option<String>,
    #[arg(long)]
    beam: Option<String>,
    #[arg(long)]
    lenpen: Option<String>,
    #[arg(long)]
    diverse_groups: Option<String>,
    #[arg(long)]
    diverse_strength: Option<String>,
    #[arg(long)]
    sampling: bool,
    #[arg(long)]
    topk: Option<String>,
    #[arg(long)]
    temperature: Option<String>,
    #[arg(long)]
    max_len: Option<String>,
}

impl KeyFlags {
    /// `(key, raw value)` for every flag given, in a fixed order.
    pub fn pairs(&self) -> Vec<(String, String)> {
        let flag = |b: bool| b.then(|| "true".to_string());
        let all = [
            ("seed", self.seed.clone()),
            ("arch", self.arch.clone()),
            ("max_tokens", self.max_tokens.clone()),
            ("max_sentences", self.max_sentences.clone()),
            ("workers", self.workers.clone()),
            ("accum", self.accum.clone()),
            ("fp16", flag(self.fp16)),
            ("lr", self.lr.clone()),
            ("scheduler", self.scheduler.clone()),
            ("warmup", self.warmup.clone()),
            ("criterion", self.criterion.clone()),
            ("label_smoothing", self.label_smoothing.clone()),
            ("max_steps", self.max_steps.clone()),
            ("max_epochs", self.max_epochs.clone()),
            ("save_interval", self.save_interval.clone()),
            ("save_dir", self.save_dir.clone()),
            ("beam", self.beam.clone()),
            ("lenpen", self.lenpen.clone()),
            ("diverse_groups", self.diverse_groups.clone()),
            ("diverse_strength", self.diverse_strength.clone()),
            ("sampling", flag(self.sampling)),
            ("topk", self.topk.clone()),
            ("temperature", self.temperature.clone()),
            ("max_len", self.max_len.clone()),
        ];
        all.into_iter()
            .filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
            .collect()
    }

    /// Config file entries followed by flags; later entries win.
    pub fn user_settings(&self) -> seqforge::Result<Vec<(String, String)>> {
        let mut out = match &self.config {
            Some(path) => seqforge::registry::read_config_file(path)?,
            None => Vec::new(),
        };
        out.extend(self.pairs());
        Ok(out)
    }
}

/// 1 for configuration mistakes, 2 for failures while running.
fn exit_code(err: &Error) -> u8 {
    match err {
        Error::UnknownKey(_)
        | Error::ConfigValue { .. }
        | Error::Lookup { .. }
        | Error::Construction { .. }
        | Error::RegistrationConflict { .. } => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SEQFORGE_LOG", "warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Train {
            source,
            target,
            restore,
            keys,
        } => commands::train(&source, &target, restore.as_deref(), &keys),
        Command::Generate {
            checkpoint,
            input,
            output,
            keys,
        } => commands::generate(&checkpoint, &input, output.as_deref(), &keys),
        Command::Score {
            checkpoint,
            source,
            reference,
            keys,
        } => commands::score(&checkpoint, &source, &reference, &keys),
        Command::Simulate { scenario } => commands::simulate(&scenario),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
