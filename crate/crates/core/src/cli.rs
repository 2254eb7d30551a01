//! Command-line entry point.
//!
//! Every subcommand reads the same flat run config (`--config`) with
//! `--set key=value` overrides applied on top.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use crate::error::{Error, Result};
use crate::eval::{csv_quote, load_pairs, minimal_pair_accuracy, Conditioning, Scorer};
use crate::masking::{curriculum_power, default_maskable, sequence_mask_probs, FrequencyTable};
use crate::tokenizer::Vocab;
use crate::trainer::checkpoint::Checkpoint;
use crate::trainer::config::{keys_help, RawConfig, RunConfig};
use crate::trainer::{load_documents, load_model, tau_at, Trainer, LOG_FILE};

#[derive(Debug, Parser)]
#[command(
    name = "maskdiff",
    version,
    about = "Masked diffusion language modeling at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Run-config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// `key=value` override, applied after the file. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut raw = match &self.config {
            Some(path) => RawConfig::load(path)?,
            None => RawConfig::default(),
        };
        for o in &self.overrides {
            raw.set(o)?;
        }
        raw.resolve()
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a BPE vocabulary on `corpus` and write it to `vocab`.
    TokenizerTrain(ConfigArgs),
    /// Count token frequencies of `corpus` and write them to `freq_table`.
    FreqTable(ConfigArgs),
    /// Train a model; logs and checkpoints go to `output_dir`.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Continue from this checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Pseudo-log-likelihood of each line of a text file.
    EvalPll {
        #[arg(long)]
        checkpoint: PathBuf,
        /// One sentence per line.
        #[arg(long)]
        input: PathBuf,
        /// none | single_token; defaults to the checkpoint's eval_conditioning.
        #[arg(long)]
        conditioning: Option<String>,
        /// Write the CSV here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Minimal-pair accuracy of a checkpoint.
    EvalPairs {
        #[arg(long)]
        checkpoint: PathBuf,
        /// TSV of `good<TAB>bad` lines.
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        conditioning: Option<String>,
        /// Per-pair report CSV.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Tabulate the configured noise schedule and its mean masking rate.
    ScheduleStats {
        #[command(flatten)]
        config: ConfigArgs,
        /// Training progress in [0, 1].
        #[arg(long, default_value_t = 0.0)]
        tau: f64,
        /// Grid points on (0, 1).
        #[arg(long, default_value_t = 99)]
        points: usize,
        /// Monte-Carlo samples for the mean.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
    /// Per-token masking probabilities for one sentence.
    MaskPreview {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        text: String,
        /// Target masking rate for the sentence.
        #[arg(long, default_value_t = 0.15)]
        rate: f64,
        /// Training progress in [0, 1]; sets the curriculum power.
        #[arg(long, default_value_t = 1.0)]
        tau: f64,
    },
}

fn command() -> clap::Command {
    let keys = keys_help();
    let mut cmd = Cli::command().after_help(keys.clone());
    for name in [
        "tokenizer-train",
        "freq-table",
        "train",
        "schedule-stats",
        "mask-preview",
    ] {
        let keys = keys.clone();
        cmd = cmd.mut_subcommand(name, move |sub| sub.after_help(keys));
    }
    cmd
}

/// Full help text of the top-level command.
pub fn help_text() -> String {
    command().render_long_help().to_string()
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// process exit code. Errors go to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let matches = match command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let rendered = e.render().to_string();
            let _ = if code == 0 {
                write!(out, "{rendered}")
            } else {
                write!(err, "{rendered}")
            };
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = write!(err, "{}", e.render());
            return e.exit_code();
        }
    };
    match execute(cli.command, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn execute(command: Command, out: &mut dyn Write) -> Result<()> {
    match command {
        Command::TokenizerTrain(args) => {
            let config = args.resolve()?;
            let corpus = config.require("corpus", &config.corpus)?;
            let target = output_path("vocab", &config.vocab)?;
            let text = fs::read_to_string(&corpus)
                .map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", corpus.display())))?;
            let vocab = Vocab::train(text.lines(), config.vocab_size)?;
            vocab.save(&target)?;
            writeln!(
                out,
                "wrote {} tokens ({} merges) to {}",
                vocab.len(),
                vocab.merges().len(),
                target.display()
            )?;
        }
        Command::FreqTable(args) => {
            let config = args.resolve()?;
            let corpus = config.require("corpus", &config.corpus)?;
            let vocab = Vocab::load(&config.require("vocab", &config.vocab)?)?;
            let target = output_path("freq_table", &config.freq_table)?;
            let docs = load_documents(&corpus, &vocab)?;
            let table = FrequencyTable::build(docs.iter().flatten().copied())?;
            table.save(&target)?;
            writeln!(out, "wrote {} token counts to {}", table.len(), target.display())?;
        }
        Command::Train { config, resume } => {
            let mut trainer = match resume {
                Some(path) => Trainer::resume(&Checkpoint::load(&path)?)?,
                None => Trainer::from_config(config.resolve()?)?,
            };
            let start = trainer.state().step;
            let total = trainer.state().total_steps;
            let summary = trainer.run(|_| {})?;
            let dir = &trainer.config().output_dir;
            writeln!(out, "trained steps {start}..{} of {total}", summary.steps)?;
            if let Some(last) = &summary.last {
                writeln!(
                    out,
                    "final weighted loss {:.6}, masked ce {:.6} nats/token",
                    last.loss,
                    last.raw_ce_per_token()
                )?;
            }
            if let Some(report) = &summary.eval {
                writeln!(
                    out,
                    "minimal-pair accuracy {:.4} on {} pairs",
                    report.accuracy,
                    report.scores.len()
                )?;
            }
            writeln!(out, "log: {}", dir.join(LOG_FILE).display())?;
        }
        Command::EvalPll {
            checkpoint,
            input,
            conditioning,
            output,
        } => {
            let (config, vocab, model, ckpt) = load_model(&checkpoint)?;
            let cond = pick_conditioning(conditioning.as_deref(), &config)?;
            let scorer = Scorer::new(&model, &vocab, config.schedule, final_tau(&ckpt))?;
            let text =
                fs::read_to_string(&input).map_err(|e| Error::Data(format!("cannot read {}: {e}", input.display())))?;
            let mut csv = String::from("line,tokens,pll,pll_per_token,t,unknown_chars,sentence\n");
            for (i, line) in text.lines().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                let r = scorer.pseudo_log_likelihood_batched(line, cond)?;
                let n = r.tokens.len();
                let _ = writeln!(
                    csv,
                    "{},{n},{},{},{},{},{}",
                    i + 1,
                    r.total,
                    r.total / n as f64,
                    r.t,
                    r.unknown_chars,
                    csv_quote(line)
                );
            }
            emit(out, output.as_deref(), &csv)?;
        }
        Command::EvalPairs {
            checkpoint,
            pairs,
            conditioning,
            report,
        } => {
            let (config, vocab, model, ckpt) = load_model(&checkpoint)?;
            let cond = pick_conditioning(conditioning.as_deref(), &config)?;
            let scorer = Scorer::new(&model, &vocab, config.schedule, final_tau(&ckpt))?;
            let pairs = load_pairs(&pairs)?;
            let result = minimal_pair_accuracy(&pairs, &scorer, cond)?;
            if let Some(path) = report {
                fs::write(&path, result.to_csv())?;
            }
            let unknown: usize = result
                .scores
                .iter()
                .map(|s| s.good.unknown_chars + s.bad.unknown_chars)
                .sum();
            writeln!(
                out,
                "accuracy {:.6} over {} pairs (conditioning {})",
                result.accuracy,
                result.scores.len(),
                cond.name()
            )?;
            if unknown > 0 {
                writeln!(out, "warning: {unknown} characters mapped to <unk>")?;
            }
        }
        Command::ScheduleStats {
            config,
            tau,
            points,
            samples,
        } => {
            let config = config.resolve()?;
            let schedule = config.schedule;
            let mut csv = String::from("t,masking_rate,alpha_prime_magnitude\n");
            for i in 1..=points {
                let t = i as f64 / (points + 1) as f64;
                let _ = writeln!(
                    csv,
                    "{t},{},{}",
                    schedule.masking_rate(t, tau)?,
                    schedule.alpha_prime_magnitude(t, tau)?
                );
            }
            let mean = schedule.expected_masking_rate(tau, samples)?;
            let _ = writeln!(csv, "# {} tau={tau} mean_masking_rate={mean}", schedule.kind().name());
            write!(out, "{csv}")?;
        }
        Command::MaskPreview {
            config,
            text,
            rate,
            tau,
        } => {
            let config = config.resolve()?;
            let vocab = Vocab::load(&config.require("vocab", &config.vocab)?)?;
            let table = match &config.freq_table {
                Some(p) => FrequencyTable::load(p)?,
                None => {
                    let corpus = config.require("corpus", &config.corpus)?;
                    let docs = load_documents(&corpus, &vocab)?;
                    FrequencyTable::build(docs.iter().flatten().copied())?
                }
            };
            let tokens = vocab.encode(&text);
            if tokens.is_empty() {
                return Err(Error::Data("text encodes to no tokens".into()));
            }
            let power = curriculum_power(tau, config.mask_power_max)?;
            let plan = sequence_mask_probs(&table, &tokens, &default_maskable(&tokens), power, rate)?;
            writeln!(out, "# power {power} target rate {rate} mean {}", plan.maskable_mean())?;
            writeln!(out, "position\tid\ttoken\tcount\tprobability")?;
            for (i, (&id, p)) in tokens.iter().zip(&plan.probs).enumerate() {
                let token = vocab.token(id).unwrap_or("?");
                writeln!(out, "{i}\t{id}\t{token}\t{}\t{p:.6}", table.count(id))?;
            }
        }
    }
    Ok(())
}

fn pick_conditioning(flag: Option<&str>, config: &RunConfig) -> Result<Conditioning> {
    match flag {
        None => Ok(config.eval_conditioning),
        Some(s) => Conditioning::parse(s).ok_or_else(|| Error::Config {
            key: Some("conditioning".into()),
            line: None,
            message: format!("expected none or single_token, got {s:?}"),
        }),
    }
}

fn output_path(name: &str, value: &Option<PathBuf>) -> Result<PathBuf> {
    value
        .clone()
        .ok_or_else(|| Error::config(name, "output path is required"))
}

fn final_tau(ckpt: &Checkpoint) -> f64 {
    tau_at((ckpt.step as usize).saturating_sub(1), ckpt.total_steps as usize)
}

fn emit(out: &mut dyn Write, path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => write!(out, "{text}")?,
    }
    Ok(())
}
