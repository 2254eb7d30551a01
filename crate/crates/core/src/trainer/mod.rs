//! Deterministic training loop.
//!
//! Every random draw comes from a stream keyed by the run seed and a
//! position in training (epoch, segment index), so a run is reproducible
//! from `(seed, config, corpus bytes)` and a checkpoint only needs the step
//! counter to resume bit-exactly.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod optim;

use std::fmt::Write as _;
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;

use crate::error::{Error, Result};
use crate::eval::{minimal_pair_accuracy, MinimalPair, PairReport, Scorer};
use crate::masking::{apply_mask, curriculum_power, default_maskable, sequence_mask_probs, FrequencyTable, MaskPlan};
use crate::model::{Model, ModelConfig, TrainingBatch};
use crate::objective::{nelbo_weight_with, LossBreakdown};
use crate::tokenizer::{Vocab, MASK_ID, PAD_ID};
use crate::TokenId;

use checkpoint::Checkpoint;
use config::RunConfig;
use data::{batch_at, batches_per_epoch, epoch_order, segment, stream_rng, Batch, Stream};
use optim::{clip_grad_norm, AdamW, AdamWConfig, LrSchedule};

pub const LOG_FILE: &str = "train_log.csv";
pub const EVAL_LOG_FILE: &str = "eval_log.csv";
pub const PAIRS_REPORT_FILE: &str = "pairs_report.csv";
pub const RESOLVED_CONFIG_FILE: &str = "config.resolved";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.txt";
pub const CHECKPOINT_DIR: &str = "checkpoints";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

/// Columns of the training log.
pub const LOG_HEADER: &str =
    "step,epoch,tau,mask_power,lr,t_mean,weight_mean,masked_count,tokens,raw_ce,raw_ce_per_token,weighted_loss,grad_norm";

/// Training progress for the update at `step`: 0 at the first step and 1
/// at the last.
pub fn tau_at(step: usize, total_steps: usize) -> f64 {
    if total_steps <= 1 {
        0.0
    } else {
        (step as f64 / (total_steps - 1) as f64).min(1.0)
    }
}

/// Reads a corpus file: every non-blank line is one document.
pub fn load_documents(path: &Path, vocab: &Vocab) -> Result<Vec<Vec<TokenId>>> {
    let text =
        fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read corpus {}: {e}", path.display())))?;
    let docs: Vec<Vec<TokenId>> = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| vocab.encode(l))
        .filter(|d| !d.is_empty())
        .collect();
    if docs.is_empty() {
        return Err(Error::Data(format!("corpus {} is empty", path.display())));
    }
    Ok(docs)
}

/// What one optimizer step did.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStats {
    pub step: usize,
    pub epoch: usize,
    pub tau: f64,
    pub mask_power: f64,
    pub lr: f64,
    pub sequences: Vec<LossBreakdown>,
    pub loss: f64,
    pub grad_norm: f64,
}

impl StepStats {
    pub fn masked_count(&self) -> usize {
        self.sequences.iter().map(|s| s.masked_count).sum()
    }

    pub fn raw_ce(&self) -> f64 {
        self.sequences.iter().map(|s| s.raw_masked_ce_sum).sum()
    }

    pub fn raw_ce_per_token(&self) -> f64 {
        let n = self.masked_count();
        if n == 0 {
            0.0
        } else {
            self.raw_ce() / n as f64
        }
    }

    /// One training-log row; floats print in shortest round-trip form.
    pub fn csv_row(&self) -> String {
        let n = self.sequences.len() as f64;
        let t_mean = self.sequences.iter().map(|s| s.t).sum::<f64>() / n;
        let w_mean = self.sequences.iter().map(|s| s.weight).sum::<f64>() / n;
        let tokens: usize = self.sequences.iter().map(|s| s.sequence_length).sum();
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            self.tau,
            self.mask_power,
            self.lr,
            t_mean,
            w_mean,
            self.masked_count(),
            tokens,
            self.raw_ce(),
            self.raw_ce_per_token(),
            self.loss,
            self.grad_norm
        )
    }
}

/// Parsed row of a training log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub tau: f64,
    pub mask_power: f64,
    pub lr: f64,
    pub raw_ce_per_token: f64,
    pub weighted_loss: f64,
}

pub fn parse_log(text: &str) -> Result<Vec<LogRow>> {
    let mut lines = text.lines();
    if lines.next() != Some(LOG_HEADER) {
        return Err(Error::Data("training log header mismatch".into()));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            let bad = || Error::Data(format!("training log row {} is malformed", i + 2));
            if f.len() != 13 {
                return Err(bad());
            }
            let num = |j: usize| f[j].parse::<f64>().map_err(|_| bad());
            Ok(LogRow {
                step: f[0].parse().map_err(|_| bad())?,
                tau: num(2)?,
                mask_power: num(3)?,
                lr: num(4)?,
                raw_ce_per_token: num(10)?,
                weighted_loss: num(11)?,
            })
        })
        .collect()
}

/// Where training stands.
#[derive(Debug, Clone)]
pub struct TrainState {
    /// Number of completed updates.
    pub step: usize,
    pub total_steps: usize,
    pub model: Model,
    pub optimizer: AdamW,
}

/// End-of-run summary.
#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub steps: usize,
    pub last: Option<StepStats>,
    pub eval: Option<PairReport>,
}

pub struct Trainer {
    config: RunConfig,
    vocab: Vocab,
    freq: Option<FrequencyTable>,
    segments: Vec<Vec<TokenId>>,
    steps_per_epoch: usize,
    lr: LrSchedule,
    state: TrainState,
    order: Option<(usize, Vec<usize>)>,
}

impl Trainer {
    /// A fresh run over already-tokenized documents.
    pub fn new(
        config: RunConfig,
        vocab: Vocab,
        freq: Option<FrequencyTable>,
        documents: &[Vec<TokenId>],
    ) -> Result<Self> {
        let model_config = ModelConfig {
            vocab_size: vocab.len(),
            ..config.model
        };
        let model = Model::init(model_config, config.seed)?;
        let layout = model.layout().clone();
        let optimizer = AdamW::new(adam_config(&config), &layout);
        Self::assemble(config, vocab, freq, documents, model, optimizer, 0)
    }

    fn assemble(
        config: RunConfig,
        vocab: Vocab,
        freq: Option<FrequencyTable>,
        documents: &[Vec<TokenId>],
        model: Model,
        optimizer: AdamW,
        step: usize,
    ) -> Result<Self> {
        if config.frequency_masking && freq.is_none() {
            return Err(Error::config(
                "frequency_masking",
                "frequency masking needs a frequency table",
            ));
        }
        let freq = if config.frequency_masking { freq } else { None };
        let segments = segment(documents, config.seq_len);
        if segments.is_empty() {
            return Err(Error::Data("corpus has no tokens".into()));
        }
        let steps_per_epoch = batches_per_epoch(segments.len(), config.batch_size);
        let total_steps = if config.max_steps > 0 {
            config.max_steps
        } else {
            config.epochs * steps_per_epoch
        };
        let lr = LrSchedule::new(config.lr, config.warmup_fraction, config.min_lr_fraction, total_steps);
        Ok(Self {
            config,
            vocab,
            freq,
            segments,
            steps_per_epoch,
            lr,
            state: TrainState {
                step,
                total_steps,
                model,
                optimizer,
            },
            order: None,
        })
    }

    /// Loads vocab, corpus and frequency table named by the config. A
    /// missing frequency table is built from the corpus.
    pub fn from_config(config: RunConfig) -> Result<Self> {
        let corpus_path = config.require("corpus", &config.corpus)?;
        let vocab_path = config.require("vocab", &config.vocab)?;
        let vocab = Vocab::load(&vocab_path)?;
        let documents = load_documents(&corpus_path, &vocab)?;
        let freq = if config.frequency_masking {
            Some(match &config.freq_table {
                Some(p) => FrequencyTable::load(&config.require("freq_table", &Some(p.clone()))?)?,
                None => FrequencyTable::build(documents.iter().flatten().copied())?,
            })
        } else {
            None
        };
        Self::new(config, vocab, freq, &documents)
    }

    /// Continues a run from a checkpoint. The corpus is re-read from the
    /// path recorded in the checkpointed config.
    pub fn resume(checkpoint: &Checkpoint) -> Result<Self> {
        let config = RunConfig::from_text(&checkpoint.config_text)?;
        let vocab = Vocab::from_text(&checkpoint.vocab_text, Path::new("<checkpoint>"))?;
        let freq = if checkpoint.freq_text.is_empty() {
            None
        } else {
            Some(FrequencyTable::from_text(
                &checkpoint.freq_text,
                Path::new("<checkpoint>"),
            )?)
        };
        let corpus = config.require("corpus", &config.corpus)?;
        let documents = load_documents(&corpus, &vocab)?;
        let model = Model::from_params(
            ModelConfig {
                vocab_size: vocab.len(),
                ..config.model
            },
            checkpoint.params.clone(),
        )?;
        let optimizer = AdamW::with_state(
            adam_config(&config),
            model.layout(),
            checkpoint.m.clone(),
            checkpoint.v.clone(),
            checkpoint.updates,
        );
        let trainer = Self::assemble(
            config,
            vocab,
            freq,
            &documents,
            model,
            optimizer,
            checkpoint.step as usize,
        )?;
        if trainer.state.total_steps as u64 != checkpoint.total_steps {
            return Err(Error::Checkpoint(format!(
                "checkpoint planned {} steps but the corpus now gives {}",
                checkpoint.total_steps, trainer.state.total_steps
            )));
        }
        Ok(trainer)
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn frequency_table(&self) -> Option<&FrequencyTable> {
        self.freq.as_ref()
    }

    pub fn segments(&self) -> &[Vec<TokenId>] {
        &self.segments
    }

    pub fn state(&self) -> &TrainState {
        &self.state
    }

    pub fn model(&self) -> &Model {
        &self.state.model
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.steps_per_epoch
    }

    pub fn is_finished(&self) -> bool {
        self.state.step >= self.state.total_steps
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_text: self.config.to_text(),
            vocab_text: self.vocab.to_text(),
            freq_text: self.freq.as_ref().map_or(String::new(), FrequencyTable::to_text),
            step: self.state.step as u64,
            total_steps: self.state.total_steps as u64,
            updates: self.state.optimizer.updates,
            params: self.state.model.params().to_vec(),
            m: self.state.optimizer.m.clone(),
            v: self.state.optimizer.v.clone(),
        }
    }

    fn batch_for_step(&mut self, step: usize) -> Result<(usize, Batch)> {
        let epoch = step / self.steps_per_epoch;
        if self.order.as_ref().map(|(e, _)| *e) != Some(epoch) {
            self.order = Some((epoch, epoch_order(self.segments.len(), self.config.seed, epoch as u64)));
        }
        let order = &self.order.as_ref().expect("order cached").1;
        let batch = batch_at(
            &self.segments,
            order,
            step % self.steps_per_epoch,
            self.config.batch_size,
            self.config.seq_len,
        )?;
        Ok((epoch, batch))
    }

    /// Samples `t`, builds the mask plan and corrupts every row of `batch`.
    /// The result is trimmed to the longest row.
    pub fn corrupt(&self, batch: &Batch, epoch: usize, tau: f64, mask_power: f64) -> Result<TrainingBatch> {
        let c = &self.config;
        let lengths: Vec<usize> = (0..batch.len())
            .map(|i| batch.row(i).iter().take_while(|&&t| t != PAD_ID).count())
            .collect();
        let len = lengths.iter().copied().max().unwrap_or(0).max(1);
        let mut out = TrainingBatch {
            batch: batch.len(),
            len,
            inputs: Vec::with_capacity(batch.len() * len),
            targets: Vec::with_capacity(batch.len() * len),
            mask: Vec::with_capacity(batch.len() * len),
            times: Vec::with_capacity(batch.len()),
            weights: Vec::with_capacity(batch.len()),
            lengths: lengths.clone(),
        };
        for (i, &segment_index) in batch.indices.iter().enumerate() {
            let row = &batch.row(i)[..len];
            let mut rng = stream_rng(c.seed, Stream::Corruption, epoch as u64, segment_index as u64);
            let sample = c.schedule.sample_time(&mut rng, tau)?;
            let maskable = default_maskable(row);
            let plan = if !maskable.iter().any(|&m| m) {
                MaskPlan::uniform(&maskable, 0.0)
            } else {
                match &self.freq {
                    Some(table) => sequence_mask_probs(table, row, &maskable, mask_power, sample.masking_rate)?,
                    None => MaskPlan::uniform(&maskable, sample.masking_rate),
                }
            };
            let corrupted = apply_mask(&plan, row, &mut rng, MASK_ID)?;
            let weight = nelbo_weight_with(&c.schedule, sample.t, tau, c.derivative_power, c.zero_power)?;
            out.inputs.extend_from_slice(&corrupted.tokens);
            out.targets.extend_from_slice(row);
            out.mask.extend_from_slice(&corrupted.mask_indicator);
            out.times.push(sample.t);
            out.weights.push(weight);
        }
        Ok(out)
    }

    /// One optimizer update.
    pub fn step(&mut self) -> Result<StepStats> {
        if self.is_finished() {
            return Err(Error::Data("training already finished".into()));
        }
        let step = self.state.step;
        let tau = tau_at(step, self.state.total_steps);
        let mask_power = curriculum_power(tau, self.config.mask_power_max)?;
        let (epoch, batch) = self.batch_for_step(step)?;
        let training = self.corrupt(&batch, epoch, tau, mask_power)?;
        let (sequences, loss, mut grads) = match self.state.model.loss_and_gradients(&training) {
            Ok(r) => r,
            Err(e) => return Err(self.abort(step, tau, &training, e)),
        };
        let grad_norm = clip_grad_norm(&mut grads, self.config.grad_clip);
        if !grad_norm.is_finite() {
            let e = Error::Numeric(format!("non-finite gradient norm {grad_norm}"));
            return Err(self.abort(step, tau, &training, e));
        }
        let lr = self.lr.at(step);
        self.state.optimizer.step(self.state.model.params_mut(), &grads, lr);
        self.state.step += 1;
        Ok(StepStats {
            step,
            epoch,
            tau,
            mask_power,
            lr,
            sequences,
            loss,
            grad_norm,
        })
    }

    /// Writes a diagnostics dump next to the logs and passes the error on.
    fn abort(&self, step: usize, tau: f64, batch: &TrainingBatch, error: Error) -> Error {
        let params = self.state.model.params();
        let non_finite = params.iter().filter(|p| !p.is_finite()).count();
        let norm = params.iter().map(|p| p * p).sum::<f64>().sqrt();
        let mut text = String::new();
        let _ = writeln!(text, "error: {error}");
        let _ = writeln!(text, "step: {step} of {}", self.state.total_steps);
        let _ = writeln!(text, "tau: {tau}");
        let _ = writeln!(text, "lr: {}", self.lr.at(step));
        let _ = writeln!(text, "param_norm: {norm}");
        let _ = writeln!(text, "non_finite_params: {non_finite}");
        let _ = writeln!(text, "batch: {} x {}", batch.batch, batch.len);
        for b in 0..batch.batch {
            let masked = batch.mask[b * batch.len..(b + 1) * batch.len]
                .iter()
                .filter(|&&m| m)
                .count();
            let _ = writeln!(
                text,
                "  seq {b}: t = {}, weight = {}, length = {}, masked = {masked}",
                batch.times[b], batch.weights[b], batch.lengths[b]
            );
        }
        if self.config.output_dir.is_dir() {
            let _ = fs::write(self.config.output_dir.join(DIAGNOSTICS_FILE), text);
        }
        error
    }

    /// Per-token masked cross-entropy over the whole corpus with every
    /// maskable token masked independently at `rate`. The model sees the
    /// `t` whose masking rate is `rate`. Averaged over `draws` mask draws.
    pub fn masked_ce_at_rate(&self, rate: f64, draws: usize, seed: u64) -> Result<f64> {
        let tau = tau_at(self.state.step.saturating_sub(1), self.state.total_steps);
        let t = self.config.schedule.time_for_rate(rate, tau)?;
        let mut rng = stream_rng(seed, Stream::Corruption, u64::MAX, 0);
        let mut total = 0.0;
        let mut count = 0usize;
        for _ in 0..draws {
            for chunk in self.segments.chunks(self.config.batch_size) {
                let len = chunk.iter().map(Vec::len).max().unwrap_or(1);
                let mut inputs = Vec::with_capacity(chunk.len() * len);
                let mut targets = Vec::with_capacity(chunk.len() * len);
                let mut mask = Vec::with_capacity(chunk.len() * len);
                for seg in chunk {
                    let maskable = default_maskable(seg);
                    for (&tok, &m) in seg.iter().zip(&maskable) {
                        let masked = m && rng.random::<f64>() < rate;
                        inputs.push(if masked { MASK_ID } else { tok });
                        targets.push(tok);
                        mask.push(masked);
                    }
                    let pad = len - seg.len();
                    inputs.extend(std::iter::repeat_n(PAD_ID, pad));
                    targets.extend(std::iter::repeat_n(PAD_ID, pad));
                    mask.extend(std::iter::repeat_n(false, pad));
                }
                let pass = self.state.model.forward(&inputs, chunk.len(), &vec![t; chunk.len()])?;
                let v = pass.vocab;
                for (r, (&m, &target)) in mask.iter().zip(&targets).enumerate() {
                    if m {
                        total +=
                            crate::objective::negative_log_softmax(&pass.logits[r * v..(r + 1) * v], target as usize);
                        count += 1;
                    }
                }
            }
        }
        if count == 0 {
            return Err(Error::Data("no positions were masked".into()));
        }
        Ok(total / count as f64)
    }

    /// Scores minimal pairs with the current model.
    pub fn evaluate_pairs(&self, pairs: &[MinimalPair]) -> Result<PairReport> {
        let tau = tau_at(self.state.step.saturating_sub(1), self.state.total_steps);
        let scorer = Scorer::new(&self.state.model, &self.vocab, self.config.schedule, tau)?;
        minimal_pair_accuracy(pairs, &scorer, self.config.eval_conditioning)
    }

    /// Runs to the end, writing logs, checkpoints and evaluations under the
    /// configured output directory. `on_step` sees every step.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepStats)) -> Result<RunSummary> {
        let out = self.config.output_dir.clone();
        fs::create_dir_all(out.join(CHECKPOINT_DIR))?;
        fs::write(out.join(RESOLVED_CONFIG_FILE), self.config.to_text())?;
        let pairs = match &self.config.eval_pairs {
            Some(p) => Some(crate::eval::load_pairs(
                &self.config.require("eval_pairs", &Some(p.clone()))?,
            )?),
            None => None,
        };
        let mut log = open_log(&out.join(LOG_FILE), LOG_HEADER, self.state.step)?;
        let mut eval_log = match pairs {
            Some(_) => Some(open_log(
                &out.join(EVAL_LOG_FILE),
                "step,accuracy,mean_margin,pairs",
                self.state.step + 1,
            )?),
            None => None,
        };
        let mut last = None;
        let mut report = None;
        while !self.is_finished() {
            let stats = self.step()?;
            writeln!(log, "{}", stats.csv_row())?;
            on_step(&stats);
            let done = self.state.step;
            let finished = self.is_finished();
            if self.config.checkpoint_every > 0 && done.is_multiple_of(self.config.checkpoint_every) && !finished {
                self.checkpoint().save(&checkpoint_path(&out, done))?;
            }
            if let (Some(pairs), Some(eval_log)) = (&pairs, eval_log.as_mut()) {
                if finished || (self.config.eval_every > 0 && done.is_multiple_of(self.config.eval_every)) {
                    let r = self.evaluate_pairs(pairs)?;
                    let mean_margin = r.scores.iter().map(|s| s.margin).sum::<f64>() / r.scores.len() as f64;
                    writeln!(eval_log, "{done},{},{mean_margin},{}", r.accuracy, r.scores.len())?;
                    report = Some(r);
                }
            }
            last = Some(stats);
        }
        log.flush()?;
        if let Some(l) = eval_log.as_mut() {
            l.flush()?;
        }
        if let Some(r) = &report {
            fs::write(out.join(PAIRS_REPORT_FILE), r.to_csv())?;
        }
        let ckpt = self.checkpoint();
        ckpt.save(&checkpoint_path(&out, self.state.step))?;
        ckpt.save(&out.join(FINAL_CHECKPOINT))?;
        Ok(RunSummary {
            steps: self.state.step,
            last,
            eval: report,
        })
    }
}

fn adam_config(c: &RunConfig) -> AdamWConfig {
    AdamWConfig {
        beta1: c.beta1,
        beta2: c.beta2,
        epsilon: c.adam_epsilon,
        weight_decay: c.weight_decay,
    }
}

pub fn checkpoint_path(out: &Path, step: usize) -> PathBuf {
    out.join(CHECKPOINT_DIR).join(format!("step-{step:08}.ckpt"))
}

/// Opens a CSV log for appending, keeping only rows whose leading step is
/// below `keep_below` so a resumed run rewrites what it repeats.
fn open_log(path: &Path, header: &str, keep_below: usize) -> Result<BufWriter<File>> {
    let mut kept = format!("{header}\n");
    if keep_below > 0 {
        if let Ok(existing) = fs::read_to_string(path) {
            for line in existing.lines().skip(1) {
                let step = line.split(',').next().and_then(|s| s.parse::<usize>().ok());
                if step.is_some_and(|s| s < keep_below) {
                    kept.push_str(line);
                    kept.push('\n');
                }
            }
        }
    }
    fs::write(path, kept)?;
    let file = OpenOptions::new().append(true).open(path)?;
    Ok(BufWriter::new(file))
}

/// Model, vocabulary and config stored in a checkpoint, for evaluation.
pub fn load_model(path: &Path) -> Result<(RunConfig, Vocab, Model, Checkpoint)> {
    let ckpt = Checkpoint::load(path)?;
    let config = RunConfig::from_text(&ckpt.config_text)?;
    let vocab = Vocab::from_text(&ckpt.vocab_text, path)?;
    let model = Model::from_params(
        ModelConfig {
            vocab_size: vocab.len(),
            ..config.model
        },
        ckpt.params.clone(),
    )?;
    Ok((config, vocab, model, ckpt))
}
