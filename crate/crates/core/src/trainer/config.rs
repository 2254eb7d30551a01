//! Flat `key = value` run configuration.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::eval::Conditioning;
use crate::model::ModelConfig;
use crate::objective::ZeroPowerMode;
use crate::schedules::{NoiseSchedule, ScheduleKind};

/// One recognized configuration key.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    /// `None` for keys that must be set explicitly.
    pub default: Option<&'static str>,
    pub unit: &'static str,
    pub help: &'static str,
}

const fn key(name: &'static str, default: &'static str, unit: &'static str, help: &'static str) -> KeySpec {
    KeySpec {
        name,
        default: Some(default),
        unit,
        help,
    }
}

/// Every key accepted in a run config, in documentation order.
pub const KEYS: &[KeySpec] = &[
    KeySpec {
        name: "seed",
        default: None,
        unit: "integer",
        help: "root of every random stream; required",
    },
    key("corpus", "", "path", "training text, one document per line"),
    key("vocab", "", "path", "tokenizer vocabulary file"),
    key(
        "vocab_size",
        "2048",
        "tokens",
        "target size for tokenizer-train, specials included",
    ),
    key(
        "freq_table",
        "",
        "path",
        "token frequency table; built from the corpus when empty",
    ),
    key(
        "output_dir",
        "run",
        "path",
        "directory for logs, checkpoints and the resolved config",
    ),
    key(
        "schedule",
        "cosine",
        "linear|cosine|simple_gaussian|bimodal_gaussian|fixed",
        "noise schedule",
    ),
    key("schedule.mean", "0.3", "probability", "simple_gaussian mean"),
    key(
        "schedule.std",
        "0.1",
        "probability",
        "simple_gaussian standard deviation",
    ),
    key(
        "schedule.w1",
        "0.6",
        "fraction",
        "bimodal_gaussian weight of the left mode",
    ),
    key("schedule.mu1", "0.12", "probability", "bimodal_gaussian left mean"),
    key(
        "schedule.sigma1",
        "0.02",
        "probability",
        "bimodal_gaussian left standard deviation",
    ),
    key(
        "schedule.mu2_lo",
        "0.4",
        "probability",
        "bimodal_gaussian right mean at tau = 0",
    ),
    key(
        "schedule.mu2_hi",
        "0.85",
        "probability",
        "bimodal_gaussian right mean as tau grows",
    ),
    key(
        "schedule.sigma2",
        "0.08",
        "probability",
        "bimodal_gaussian right standard deviation",
    ),
    key("schedule.rate", "0.15", "probability", "fixed masking rate"),
    key(
        "clamp_epsilon",
        "0.0001",
        "probability",
        "masking rates are clamped into [eps, 1 - eps]",
    ),
    key(
        "derivative_power",
        "1",
        "exponent",
        "softening power on |alpha'| in the loss weight",
    ),
    key(
        "zero_power_weighting",
        "retain_rate",
        "retain_rate|unweighted",
        "loss weight when derivative_power = 0",
    ),
    key(
        "frequency_masking",
        "true",
        "bool",
        "rarer tokens are masked more often",
    ),
    key(
        "mask_power_max",
        "0.02",
        "exponent",
        "final power of the frequency weights, ramped from 0",
    ),
    key("epochs", "10", "epochs", "passes over the corpus"),
    key(
        "max_steps",
        "0",
        "steps",
        "total optimizer steps; 0 derives it from epochs",
    ),
    key("batch_size", "32", "sequences", "sequences per step"),
    key("seq_len", "128", "tokens", "segment length; longer documents are split"),
    key("lr", "0.0003", "learning rate", "peak learning rate"),
    key(
        "warmup_fraction",
        "0.01",
        "fraction",
        "share of steps with linear warmup",
    ),
    key(
        "min_lr_fraction",
        "0.1",
        "fraction",
        "final learning rate relative to the peak",
    ),
    key(
        "weight_decay",
        "0.01",
        "coefficient",
        "decoupled weight decay on matrices",
    ),
    key("grad_clip", "1", "norm", "global gradient norm clip; 0 disables"),
    key("beta1", "0.9", "coefficient", "first moment decay"),
    key("beta2", "0.999", "coefficient", "second moment decay"),
    key("adam_epsilon", "0.00000001", "coefficient", "denominator guard"),
    key(
        "checkpoint_every",
        "0",
        "steps",
        "checkpoint cadence; 0 saves only the final state",
    ),
    key("eval_pairs", "", "path", "minimal-pair file scored during training"),
    key(
        "eval_every",
        "0",
        "steps",
        "minimal-pair cadence; 0 scores only after the last step",
    ),
    key(
        "eval_conditioning",
        "single_token",
        "none|single_token",
        "time input used when scoring",
    ),
    key("model.layers", "4", "blocks", "encoder depth"),
    key("model.hidden_dim", "256", "units", "residual width"),
    key("model.heads", "4", "heads", "attention heads"),
    key("model.ffn_dim", "1024", "units", "feed-forward width"),
    key("model.max_seq_len", "128", "tokens", "longest input the model accepts"),
    key("model.timestep_dim", "128", "units", "sinusoidal time embedding width"),
    key(
        "model.time_conditioning",
        "true",
        "bool",
        "feed t to the modulation path",
    ),
    key(
        "model.tie_embeddings",
        "true",
        "bool",
        "share the input embedding with the output head",
    ),
    key("model.init_std", "0.02", "std", "normal initializer scale"),
];

/// Help text listing every key with its default and unit.
pub fn keys_help() -> String {
    let mut out = String::from("Run-config keys (key = value, one per line, # comments):\n");
    for k in KEYS {
        let default = k.default.map_or("(required)".to_string(), |d| {
            if d.is_empty() {
                "(unset)".to_string()
            } else {
                d.to_string()
            }
        });
        let _ = writeln!(out, "  {:<26} default {:<12} [{}] {}", k.name, default, k.unit, k.help);
    }
    out
}

/// Where a value came from, for error messages.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Source {
    Default,
    File(usize),
    Override,
}

/// Raw values before typing. Keeps the line each key was read from.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    values: BTreeMap<String, (String, Source)>,
}

fn spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.name == name)
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let lineno = i + 1;
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config {
                key: None,
                line: Some(lineno),
                message: format!("expected `key = value`, got {line:?}"),
            })?;
            let k = k.trim();
            if spec(k).is_none() {
                return Err(Error::Config {
                    key: Some(k.to_string()),
                    line: Some(lineno),
                    message: "unknown key".into(),
                });
            }
            if let Some((_, Source::File(prev))) = raw.values.get(k) {
                return Err(Error::Config {
                    key: Some(k.to_string()),
                    line: Some(lineno),
                    message: format!("duplicate key, first set on line {prev}"),
                });
            }
            raw.values
                .insert(k.to_string(), (v.trim().to_string(), Source::File(lineno)));
        }
        Ok(raw)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config {
            key: None,
            line: None,
            message: format!("cannot read {}: {e}", path.display()),
        })?;
        Self::parse(&text)
    }

    /// Applies a `key=value` override.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment.split_once('=').ok_or_else(|| Error::Config {
            key: None,
            line: None,
            message: format!("override {assignment:?} is not `key=value`"),
        })?;
        let k = k.trim();
        if spec(k).is_none() {
            return Err(Error::config(k, "unknown key"));
        }
        self.values
            .insert(k.to_string(), (v.trim().to_string(), Source::Override));
        Ok(())
    }

    fn get(&self, name: &str) -> (String, Source) {
        match self.values.get(name) {
            Some((v, s)) => (v.clone(), s.clone()),
            None => {
                let default = spec(name).and_then(|k| k.default).unwrap_or("");
                (default.to_string(), Source::Default)
            }
        }
    }

    fn error(&self, name: &str, message: String) -> Error {
        let line = match self.get(name).1 {
            Source::File(l) => Some(l),
            _ => None,
        };
        Error::Config {
            key: Some(name.to_string()),
            line,
            message,
        }
    }

    fn typed<T: FromStr>(&self, name: &str) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        let (v, _) = self.get(name);
        v.parse::<T>()
            .map_err(|e| self.error(name, format!("invalid value {v:?}: {e}")))
    }

    fn path(&self, name: &str) -> Option<PathBuf> {
        let (v, _) = self.get(name);
        (!v.is_empty()).then(|| PathBuf::from(v))
    }

    fn probability(&self, name: &str) -> Result<f64> {
        let v: f64 = self.typed(name)?;
        if (0.0..=1.0).contains(&v) {
            Ok(v)
        } else {
            Err(self.error(name, format!("{v} is outside [0, 1]")))
        }
    }

    fn positive(&self, name: &str) -> Result<usize> {
        let v: usize = self.typed(name)?;
        if v == 0 {
            return Err(self.error(name, "must be > 0".into()));
        }
        Ok(v)
    }

    pub fn resolve(&self) -> Result<RunConfig> {
        let (seed, _) = self.get("seed");
        if seed.is_empty() {
            return Err(Error::config("seed", "seed is required"));
        }
        let seed: u64 = self.typed("seed")?;

        let kind = match self.get("schedule").0.as_str() {
            "linear" => ScheduleKind::Linear,
            "cosine" => ScheduleKind::Cosine,
            "simple_gaussian" => ScheduleKind::SimpleGaussian {
                mean: self.typed("schedule.mean")?,
                std: self.typed("schedule.std")?,
            },
            "bimodal_gaussian" => ScheduleKind::BimodalGaussian {
                w1: self.typed("schedule.w1")?,
                mu1: self.typed("schedule.mu1")?,
                sigma1: self.typed("schedule.sigma1")?,
                mu2_lo: self.typed("schedule.mu2_lo")?,
                mu2_hi: self.typed("schedule.mu2_hi")?,
                sigma2: self.typed("schedule.sigma2")?,
            },
            "fixed" => ScheduleKind::Fixed {
                rate: self.typed("schedule.rate")?,
            },
            other => return Err(self.error("schedule", format!("unknown schedule {other:?}"))),
        };
        let clamp_epsilon: f64 = self.typed("clamp_epsilon")?;
        let schedule = NoiseSchedule::new(kind, clamp_epsilon).map_err(|e| self.error("schedule", e.to_string()))?;

        let zero_power = match self.get("zero_power_weighting").0.as_str() {
            "retain_rate" => ZeroPowerMode::RetainRate,
            "unweighted" => ZeroPowerMode::Unweighted,
            other => return Err(self.error("zero_power_weighting", format!("unknown mode {other:?}"))),
        };
        let eval_conditioning = Conditioning::parse(&self.get("eval_conditioning").0)
            .ok_or_else(|| self.error("eval_conditioning", "expected none or single_token".into()))?;
        let mask_power_max = self.probability("mask_power_max")?;
        if mask_power_max >= 1.0 {
            return Err(self.error("mask_power_max", "must be < 1".into()));
        }

        let model = ModelConfig {
            layers: self.positive("model.layers")?,
            hidden_dim: self.positive("model.hidden_dim")?,
            heads: self.positive("model.heads")?,
            ffn_dim: self.positive("model.ffn_dim")?,
            vocab_size: 0,
            max_seq_len: self.positive("model.max_seq_len")?,
            timestep_dim: self.positive("model.timestep_dim")?,
            time_conditioning: self.typed("model.time_conditioning")?,
            tie_embeddings: self.typed("model.tie_embeddings")?,
            init_std: self.typed("model.init_std")?,
        };
        let seq_len = self.positive("seq_len")?;
        if seq_len > model.max_seq_len {
            return Err(self.error(
                "seq_len",
                format!("{seq_len} exceeds model.max_seq_len {}", model.max_seq_len),
            ));
        }

        let config = RunConfig {
            seed,
            corpus: self.path("corpus"),
            vocab: self.path("vocab"),
            vocab_size: self.positive("vocab_size")?,
            freq_table: self.path("freq_table"),
            output_dir: self.path("output_dir").unwrap_or_else(|| PathBuf::from("run")),
            schedule,
            derivative_power: self.probability("derivative_power")?,
            zero_power,
            frequency_masking: self.typed("frequency_masking")?,
            mask_power_max,
            epochs: self.positive("epochs")?,
            max_steps: self.typed("max_steps")?,
            batch_size: self.positive("batch_size")?,
            seq_len,
            lr: self.typed("lr")?,
            warmup_fraction: self.probability("warmup_fraction")?,
            min_lr_fraction: self.probability("min_lr_fraction")?,
            weight_decay: self.typed("weight_decay")?,
            grad_clip: self.typed("grad_clip")?,
            beta1: self.typed("beta1")?,
            beta2: self.typed("beta2")?,
            adam_epsilon: self.typed("adam_epsilon")?,
            checkpoint_every: self.typed("checkpoint_every")?,
            eval_pairs: self.path("eval_pairs"),
            eval_every: self.typed("eval_every")?,
            eval_conditioning,
            model,
        };
        for (name, v) in [
            ("lr", config.lr),
            ("weight_decay", config.weight_decay),
            ("grad_clip", config.grad_clip),
            ("adam_epsilon", config.adam_epsilon),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(self.error(name, format!("{v} must be finite and >= 0")));
            }
        }
        for (name, v) in [("beta1", config.beta1), ("beta2", config.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(self.error(name, format!("{v} is outside [0, 1)")));
            }
        }
        Ok(config)
    }
}

/// A fully typed run configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub corpus: Option<PathBuf>,
    pub vocab: Option<PathBuf>,
    pub vocab_size: usize,
    pub freq_table: Option<PathBuf>,
    pub output_dir: PathBuf,
    pub schedule: NoiseSchedule,
    pub derivative_power: f64,
    pub zero_power: ZeroPowerMode,
    pub frequency_masking: bool,
    pub mask_power_max: f64,
    pub epochs: usize,
    pub max_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr: f64,
    pub warmup_fraction: f64,
    pub min_lr_fraction: f64,
    pub weight_decay: f64,
    pub grad_clip: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    pub checkpoint_every: usize,
    pub eval_pairs: Option<PathBuf>,
    pub eval_every: usize,
    pub eval_conditioning: Conditioning,
    /// `vocab_size` is filled in from the tokenizer.
    pub model: ModelConfig,
}

impl RunConfig {
    pub fn from_text(text: &str) -> Result<Self> {
        RawConfig::parse(text)?.resolve()
    }

    pub fn load(path: &Path) -> Result<Self> {
        RawConfig::load(path)?.resolve()
    }

    /// Every key with its resolved value, in [`KEYS`] order. Parsing the
    /// output yields an equal config.
    pub fn to_text(&self) -> String {
        let opt = |p: &Option<PathBuf>| p.as_ref().map_or(String::new(), |p| p.display().to_string());
        let kind = self.schedule.kind();
        let mut values: BTreeMap<&str, String> = BTreeMap::new();
        values.insert("seed", self.seed.to_string());
        values.insert("corpus", opt(&self.corpus));
        values.insert("vocab", opt(&self.vocab));
        values.insert("vocab_size", self.vocab_size.to_string());
        values.insert("freq_table", opt(&self.freq_table));
        values.insert("output_dir", self.output_dir.display().to_string());
        values.insert("schedule", kind.name().to_string());
        let defaults = |k: &str| spec(k).and_then(|s| s.default).unwrap_or("").to_string();
        for k in [
            "schedule.mean",
            "schedule.std",
            "schedule.w1",
            "schedule.mu1",
            "schedule.sigma1",
            "schedule.mu2_lo",
            "schedule.mu2_hi",
            "schedule.sigma2",
            "schedule.rate",
        ] {
            values.insert(k, defaults(k));
        }
        match kind {
            ScheduleKind::SimpleGaussian { mean, std } => {
                values.insert("schedule.mean", mean.to_string());
                values.insert("schedule.std", std.to_string());
            }
            ScheduleKind::BimodalGaussian {
                w1,
                mu1,
                sigma1,
                mu2_lo,
                mu2_hi,
                sigma2,
            } => {
                values.insert("schedule.w1", w1.to_string());
                values.insert("schedule.mu1", mu1.to_string());
                values.insert("schedule.sigma1", sigma1.to_string());
                values.insert("schedule.mu2_lo", mu2_lo.to_string());
                values.insert("schedule.mu2_hi", mu2_hi.to_string());
                values.insert("schedule.sigma2", sigma2.to_string());
            }
            ScheduleKind::Fixed { rate } => {
                values.insert("schedule.rate", rate.to_string());
            }
            ScheduleKind::Linear | ScheduleKind::Cosine => {}
        }
        values.insert("clamp_epsilon", self.schedule.clamp_epsilon().to_string());
        values.insert("derivative_power", self.derivative_power.to_string());
        values.insert("zero_power_weighting", self.zero_power.name().to_string());
        values.insert("frequency_masking", self.frequency_masking.to_string());
        values.insert("mask_power_max", self.mask_power_max.to_string());
        values.insert("epochs", self.epochs.to_string());
        values.insert("max_steps", self.max_steps.to_string());
        values.insert("batch_size", self.batch_size.to_string());
        values.insert("seq_len", self.seq_len.to_string());
        values.insert("lr", self.lr.to_string());
        values.insert("warmup_fraction", self.warmup_fraction.to_string());
        values.insert("min_lr_fraction", self.min_lr_fraction.to_string());
        values.insert("weight_decay", self.weight_decay.to_string());
        values.insert("grad_clip", self.grad_clip.to_string());
        values.insert("beta1", self.beta1.to_string());
        values.insert("beta2", self.beta2.to_string());
        values.insert("adam_epsilon", self.adam_epsilon.to_string());
        values.insert("checkpoint_every", self.checkpoint_every.to_string());
        values.insert("eval_pairs", opt(&self.eval_pairs));
        values.insert("eval_every", self.eval_every.to_string());
        values.insert("eval_conditioning", self.eval_conditioning.name().to_string());
        let m = &self.model;
        values.insert("model.layers", m.layers.to_string());
        values.insert("model.hidden_dim", m.hidden_dim.to_string());
        values.insert("model.heads", m.heads.to_string());
        values.insert("model.ffn_dim", m.ffn_dim.to_string());
        values.insert("model.max_seq_len", m.max_seq_len.to_string());
        values.insert("model.timestep_dim", m.timestep_dim.to_string());
        values.insert("model.time_conditioning", m.time_conditioning.to_string());
        values.insert("model.tie_embeddings", m.tie_embeddings.to_string());
        values.insert("model.init_std", m.init_std.to_string());

        let mut out = String::new();
        for k in KEYS {
            let _ = writeln!(out, "{} = {}", k.name, values[k.name]);
        }
        out
    }

    /// A required path, or a config error naming the key.
    pub fn require(&self, name: &str, value: &Option<PathBuf>) -> Result<PathBuf> {
        let path = value.clone().ok_or_else(|| Error::config(name, "path is required"))?;
        if !path.exists() {
            return Err(Error::config(name, format!("{} does not exist", path.display())));
        }
        Ok(path)
    }
}
