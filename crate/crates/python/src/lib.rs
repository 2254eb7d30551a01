//! Python bindings: schedules, masking, tokenizer, checkpoint scoring and
//! the command line.

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;

use maskdiff::eval::{minimal_pair_accuracy, Conditioning, MinimalPair, Scorer as CoreScorer};
use maskdiff::masking::scaled_probs as core_scaled_probs;
use maskdiff::model::Model;
use maskdiff::objective::nelbo_weight as core_nelbo_weight;
use maskdiff::schedules::NoiseSchedule;
use maskdiff::tokenizer::Vocab as CoreVocab;
use maskdiff::trainer::config::{RawConfig, RunConfig};
use maskdiff::trainer::{load_model, tau_at};
use maskdiff::TokenId;

create_exception!(maskdiff_py, MaskdiffError, PyException);

fn err(e: maskdiff::Error) -> PyErr {
    MaskdiffError::new_err(e.to_string())
}

fn conditioning(name: &str) -> PyResult<Conditioning> {
    Conditioning::parse(name).ok_or_else(|| MaskdiffError::new_err(format!("unknown conditioning {name:?}")))
}

/// A noise schedule. Keyword arguments are the `schedule.*` config keys
/// without the prefix, e.g. `Schedule("simple_gaussian", mean=0.3, std=0.1)`.
#[pyclass(frozen)]
struct Schedule {
    inner: NoiseSchedule,
}

#[pymethods]
impl Schedule {
    #[new]
    #[pyo3(signature = (kind = "cosine", clamp_epsilon = None, **params))]
    fn new(
        kind: &str,
        clamp_epsilon: Option<f64>,
        params: Option<std::collections::HashMap<String, f64>>,
    ) -> PyResult<Self> {
        let mut raw = RawConfig::parse("seed = 0\n").map_err(err)?;
        raw.set(&format!("schedule={kind}")).map_err(err)?;
        if let Some(eps) = clamp_epsilon {
            raw.set(&format!("clamp_epsilon={eps}")).map_err(err)?;
        }
        for (k, v) in params.unwrap_or_default() {
            raw.set(&format!("schedule.{k}={v}")).map_err(err)?;
        }
        let config: RunConfig = raw.resolve().map_err(err)?;
        Ok(Self { inner: config.schedule })
    }

    #[getter]
    fn kind(&self) -> &'static str {
        self.inner.kind().name()
    }

    #[pyo3(signature = (t, tau = 0.0))]
    fn masking_rate(&self, t: f64, tau: f64) -> PyResult<f64> {
        self.inner.masking_rate(t, tau).map_err(err)
    }

    #[pyo3(signature = (t, tau = 0.0))]
    fn alpha_prime_magnitude(&self, t: f64, tau: f64) -> PyResult<f64> {
        self.inner.alpha_prime_magnitude(t, tau).map_err(err)
    }

    #[pyo3(signature = (rate, tau = 0.0))]
    fn time_for_rate(&self, rate: f64, tau: f64) -> PyResult<f64> {
        self.inner.time_for_rate(rate, tau).map_err(err)
    }

    /// Monte-Carlo mean masking rate and its standard error.
    #[pyo3(signature = (tau = 0.0, samples = 100_000))]
    fn expected_masking_rate(&self, tau: f64, samples: usize) -> PyResult<(f64, f64)> {
        let e = self.inner.expected_masking_rate(tau, samples).map_err(err)?;
        Ok((e.mean, e.std_error))
    }

    #[pyo3(signature = (t, tau = 0.0, power = 1.0))]
    fn nelbo_weight(&self, t: f64, tau: f64, power: f64) -> PyResult<f64> {
        core_nelbo_weight(&self.inner, t, tau, power).map_err(err)
    }

    fn __repr__(&self) -> String {
        format!("Schedule({:?})", self.inner.kind())
    }
}

/// Per-position masking probabilities from frequency weights.
#[pyfunction]
fn scaled_probs(weights: Vec<f64>, maskable: Vec<bool>, power: f64, target_rate: f64) -> PyResult<Vec<f64>> {
    Ok(core_scaled_probs(&weights, &maskable, power, target_rate)
        .map_err(err)?
        .probs)
}

/// BPE vocabulary.
#[pyclass(frozen)]
struct Vocab {
    inner: CoreVocab,
}

#[pymethods]
impl Vocab {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(Self {
            inner: CoreVocab::load(&path).map_err(err)?,
        })
    }

    #[staticmethod]
    fn train(corpus: Vec<String>, vocab_size: usize) -> PyResult<Self> {
        Ok(Self {
            inner: CoreVocab::train(corpus.iter().map(String::as_str), vocab_size).map_err(err)?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn encode(&self, text: &str) -> Vec<TokenId> {
        self.inner.encode(text)
    }

    fn decode(&self, ids: Vec<TokenId>) -> PyResult<String> {
        self.inner.decode(&ids).map_err(err)
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }
}

/// A trained model loaded from a checkpoint, for sentence scoring.
#[pyclass(frozen)]
struct Scorer {
    config: RunConfig,
    vocab: CoreVocab,
    model: Model,
    tau: f64,
}

impl Scorer {
    fn core(&self) -> PyResult<CoreScorer<'_>> {
        CoreScorer::new(&self.model, &self.vocab, self.config.schedule, self.tau).map_err(err)
    }
}

#[pymethods]
impl Scorer {
    #[new]
    fn new(checkpoint: PathBuf) -> PyResult<Self> {
        let (config, vocab, model, ckpt) = load_model(&checkpoint).map_err(err)?;
        let tau = tau_at((ckpt.step as usize).saturating_sub(1), ckpt.total_steps as usize);
        Ok(Self {
            config,
            vocab,
            model,
            tau,
        })
    }

    /// Pseudo-log-likelihood in nats.
    #[pyo3(signature = (sentence, conditioning = "single_token"))]
    fn pll(&self, sentence: &str, conditioning: &str) -> PyResult<f64> {
        let r = self
            .core()?
            .pseudo_log_likelihood_batched(sentence, self::conditioning(conditioning)?)
            .map_err(err)?;
        Ok(r.total)
    }

    /// Fraction of `(good, bad)` pairs where the good sentence scores higher.
    #[pyo3(signature = (pairs, conditioning = "single_token"))]
    fn pair_accuracy(&self, pairs: Vec<(String, String)>, conditioning: &str) -> PyResult<f64> {
        let pairs: Vec<MinimalPair> = pairs.into_iter().map(|(good, bad)| MinimalPair { good, bad }).collect();
        let report = minimal_pair_accuracy(&pairs, &self.core()?, self::conditioning(conditioning)?).map_err(err)?;
        Ok(report.accuracy)
    }
}

/// Runs the command line with `args` (without the program name) and
/// returns `(exit_code, stdout, stderr)`.
#[pyfunction]
fn run_cli(args: Vec<String>) -> (i32, String, String) {
    let mut out = Vec::new();
    let mut errs = Vec::new();
    let argv = std::iter::once("maskdiff".to_string()).chain(args);
    let code = maskdiff::cli::run(argv, &mut out, &mut errs);
    (
        code,
        String::from_utf8_lossy(&out).into_owned(),
        String::from_utf8_lossy(&errs).into_owned(),
    )
}

#[pymodule]
fn maskdiff_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("MaskdiffError", m.py().get_type::<MaskdiffError>())?;
    m.add_class::<Schedule>()?;
    m.add_class::<Vocab>()?;
    m.add_class::<Scorer>()?;
    m.add_function(wrap_pyfunction!(scaled_probs, m)?)?;
    m.add_function(wrap_pyfunction!(run_cli, m)?)?;
    Ok(())
}
