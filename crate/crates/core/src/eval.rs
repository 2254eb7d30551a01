//! Pseudo-log-likelihood scoring and minimal-pair accuracy.
//!
//! The PLL of a sentence is `Σ_ℓ log p(x_ℓ | x with only ℓ masked)`. The
//! reference path runs one forward pass per position; the batched path
//! stacks the `L` single-mask copies into one batch and must agree with the
//! reference bit for bit.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{Model, UNCONDITIONED_T};
use crate::objective::negative_log_softmax;
use crate::schedules::NoiseSchedule;
use crate::tokenizer::{Vocab, MASK_ID};
use crate::TokenId;

/// Which `t` the model sees while scoring.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Conditioning {
    /// The constant used for unconditioned forward passes.
    None,
    /// The `t` whose masking rate is `1/L`, i.e. one masked token.
    #[default]
    SingleToken,
}

impl Conditioning {
    pub fn name(&self) -> &'static str {
        match self {
            Conditioning::None => "none",
            Conditioning::SingleToken => "single_token",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "none" => Some(Conditioning::None),
            "single_token" => Some(Conditioning::SingleToken),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PllResult {
    /// Sum of per-token log-probabilities, in nats (≤ 0).
    pub total: f64,
    pub token_log_probs: Vec<f64>,
    pub tokens: Vec<TokenId>,
    /// Characters that fell back to `UNK`.
    pub unknown_chars: usize,
    /// Diffusion time fed to the model.
    pub t: f64,
}

/// Scores sentences with a trained model.
#[derive(Debug, Clone, Copy)]
pub struct Scorer<'a> {
    model: &'a Model,
    vocab: &'a Vocab,
    schedule: NoiseSchedule,
    tau: f64,
}

impl<'a> Scorer<'a> {
    /// `tau` is the training progress at which the schedule is inverted for
    /// single-token conditioning; it only matters for the bimodal schedule.
    pub fn new(model: &'a Model, vocab: &'a Vocab, schedule: NoiseSchedule, tau: f64) -> Result<Self> {
        if model.config().vocab_size != vocab.len() {
            return Err(Error::Shape(format!(
                "model vocab {} differs from tokenizer vocab {}",
                model.config().vocab_size,
                vocab.len()
            )));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(Error::Domain(format!("tau must lie in [0,1], got {tau}")));
        }
        Ok(Self {
            model,
            vocab,
            schedule,
            tau,
        })
    }

    /// `t` used for a sentence of `len` tokens.
    pub fn conditioning_time(&self, conditioning: Conditioning, len: usize) -> Result<f64> {
        match conditioning {
            Conditioning::None => Ok(UNCONDITIONED_T),
            Conditioning::SingleToken => {
                let eps = self.schedule.clamp_epsilon();
                let rate = (1.0 / len as f64).clamp(eps, 1.0 - eps);
                self.schedule.time_for_rate(rate, self.tau)
            }
        }
    }

    fn prepare(&self, sentence: &str, conditioning: Conditioning) -> Result<(Vec<TokenId>, usize, f64)> {
        let encoding = self.vocab.encode_with_stats(sentence);
        let len = encoding.ids.len();
        if len == 0 {
            return Err(Error::Data(format!("sentence {sentence:?} encodes to no tokens")));
        }
        if len > self.model.config().max_seq_len {
            return Err(Error::Shape(format!(
                "sentence of {len} tokens exceeds max_seq_len {}",
                self.model.config().max_seq_len
            )));
        }
        let t = self.conditioning_time(conditioning, len)?;
        Ok((encoding.ids, encoding.unknown_chars, t))
    }

    /// Reference PLL: one forward pass per position.
    pub fn pseudo_log_likelihood(&self, sentence: &str, conditioning: Conditioning) -> Result<PllResult> {
        let (tokens, unknown_chars, t) = self.prepare(sentence, conditioning)?;
        let mut token_log_probs = Vec::with_capacity(tokens.len());
        let mut input = tokens.clone();
        for pos in 0..tokens.len() {
            input[pos] = MASK_ID;
            let pass = self.model.forward(&input, 1, &[t])?;
            token_log_probs.push(-negative_log_softmax(pass.row(0, pos), tokens[pos] as usize));
            input[pos] = tokens[pos];
        }
        Ok(finish(tokens, token_log_probs, unknown_chars, t))
    }

    /// Same result as [`Scorer::pseudo_log_likelihood`] from one batched
    /// forward pass.
    pub fn pseudo_log_likelihood_batched(&self, sentence: &str, conditioning: Conditioning) -> Result<PllResult> {
        let (tokens, unknown_chars, t) = self.prepare(sentence, conditioning)?;
        let len = tokens.len();
        let mut input = Vec::with_capacity(len * len);
        for pos in 0..len {
            input.extend_from_slice(&tokens);
            input[pos * len + pos] = MASK_ID;
        }
        let pass = self.model.forward(&input, len, &vec![t; len])?;
        let token_log_probs = (0..len)
            .map(|pos| -negative_log_softmax(pass.row(pos, pos), tokens[pos] as usize))
            .collect();
        Ok(finish(tokens, token_log_probs, unknown_chars, t))
    }
}

fn finish(tokens: Vec<TokenId>, token_log_probs: Vec<f64>, unknown_chars: usize, t: f64) -> PllResult {
    PllResult {
        total: token_log_probs.iter().sum(),
        token_log_probs,
        tokens,
        unknown_chars,
        t,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MinimalPair {
    pub good: String,
    pub bad: String,
}

/// Reads a `good<TAB>bad` file. Blank lines and lines starting with `#`
/// are skipped.
pub fn load_pairs(path: &Path) -> Result<Vec<MinimalPair>> {
    let text = fs::read_to_string(path)?;
    parse_pairs(&text, path)
}

pub fn parse_pairs(text: &str, origin: &Path) -> Result<Vec<MinimalPair>> {
    let mut pairs = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let malformed = |message: &str| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message: message.to_string(),
        };
        let mut fields = line.split('\t');
        let (good, bad) = match (fields.next(), fields.next(), fields.next()) {
            (Some(g), Some(b), None) => (g, b),
            _ => return Err(malformed("expected exactly two tab-separated fields")),
        };
        if good.trim().is_empty() || bad.trim().is_empty() {
            return Err(malformed("empty sentence"));
        }
        pairs.push(MinimalPair {
            good: good.to_string(),
            bad: bad.to_string(),
        });
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("{} contains no pairs", origin.display())));
    }
    Ok(pairs)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairScore {
    pub good: PllResult,
    pub bad: PllResult,
    /// `PLL(good) − PLL(bad)`.
    pub margin: f64,
    /// 1 when the good sentence wins, 0.5 on an exact tie, 0 otherwise.
    pub credit: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairReport {
    pub pairs: Vec<MinimalPair>,
    pub scores: Vec<PairScore>,
    pub accuracy: f64,
}

impl PairReport {
    /// One row per pair.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("index,good_pll,bad_pll,margin,credit,good_unk,bad_unk,good,bad\n");
        for (i, (pair, s)) in self.pairs.iter().zip(&self.scores).enumerate() {
            let _ = writeln!(
                out,
                "{i},{},{},{},{},{},{},{},{}",
                s.good.total,
                s.bad.total,
                s.margin,
                s.credit,
                s.good.unknown_chars,
                s.bad.unknown_chars,
                csv_quote(&pair.good),
                csv_quote(&pair.bad)
            );
        }
        out
    }
}

pub(crate) fn csv_quote(s: &str) -> String {
    format!("\"{}\"", s.replace('"', "\"\""))
}

pub fn minimal_pair_accuracy(pairs: &[MinimalPair], scorer: &Scorer, conditioning: Conditioning) -> Result<PairReport> {
    if pairs.is_empty() {
        return Err(Error::Data("no minimal pairs to score".into()));
    }
    let mut scores = Vec::with_capacity(pairs.len());
    for pair in pairs {
        let good = scorer.pseudo_log_likelihood_batched(&pair.good, conditioning)?;
        let bad = scorer.pseudo_log_likelihood_batched(&pair.bad, conditioning)?;
        let margin = good.total - bad.total;
        let credit = if good.total > bad.total {
            1.0
        } else if good.total == bad.total {
            0.5
        } else {
            0.0
        };
        scores.push(PairScore {
            good,
            bad,
            margin,
            credit,
        });
    }
    let accuracy = scores.iter().map(|s| s.credit).sum::<f64>() / scores.len() as f64;
    Ok(PairReport {
        pairs: pairs.to_vec(),
        scores,
        accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pair_file_parsing() {
        let path = Path::new("pairs.tsv");
        let text = "# comment\n\nthe cat runs\tthe cat run\r\nthe dogs run\tthe dogs runs\n";
        let pairs = parse_pairs(text, path).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!(pairs[0].bad, "the cat run");

        match parse_pairs("a\tb\nonly one field\n", path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(
            parse_pairs("a\tb\tc\n", path),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(matches!(parse_pairs("a\t \n", path), Err(Error::Parse { line: 1, .. })));
        assert!(matches!(parse_pairs("# nothing\n", path), Err(Error::Data(_))));
    }

    #[test]
    fn conditioning_names_round_trip() {
        for c in [Conditioning::None, Conditioning::SingleToken] {
            assert_eq!(Conditioning::parse(c.name()), Some(c));
        }
        assert_eq!(Conditioning::parse("both"), None);
    }
}
