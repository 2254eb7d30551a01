//! Frequency-informed masking.
//!
//! Tokens are ranked by corpus frequency (rarer tokens rank higher), the
//! ranks are min-max normalized into weights `w ∈ [ε_w, 1 − ε_w]`, softened
//! to `s = w^p`, and then rescaled per sequence so that the mean masking
//! probability equals the target rate `1 − α_t`:
//!
//! ```text
//! probs = s · r / μ                     if μ > r
//! probs = 1 − (1 − s) · (1 − r)/(1 − μ) otherwise
//! ```
//!
//! where `μ` is the mean of `s` over maskable positions and `r` the target.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;

use crate::error::{Error, Result};
use crate::tokenizer::is_special;
use crate::TokenId;

/// Keeps normalized weights strictly inside `(0, 1)`.
pub const WEIGHT_EPSILON: f64 = 1e-4;

/// Corpus-global token counts and their rank-derived weights.
#[derive(Debug, Clone, PartialEq)]
pub struct FrequencyTable {
    counts: BTreeMap<TokenId, u64>,
    weights: BTreeMap<TokenId, f64>,
}

impl FrequencyTable {
    /// Counts every non-special id in `tokens` and derives rank weights.
    pub fn build<I: IntoIterator<Item = TokenId>>(tokens: I) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for id in tokens.into_iter().filter(|&id| !is_special(id)) {
            *counts.entry(id).or_insert(0u64) += 1;
        }
        Self::from_counts(counts)
    }

    pub fn from_counts(mut counts: BTreeMap<TokenId, u64>) -> Result<Self> {
        counts.retain(|_, c| *c > 0);
        if counts.len() < 2 {
            return Err(Error::Data(format!(
                "frequency table needs at least 2 distinct maskable tokens, found {}",
                counts.len()
            )));
        }
        // Most frequent first; equal counts in ascending id order.
        let mut order: Vec<(TokenId, u64)> = counts.iter().map(|(&id, &c)| (id, c)).collect();
        order.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        let top = (order.len() - 1) as f64;
        let weights = order
            .iter()
            .enumerate()
            .map(|(rank, &(id, _))| {
                let w = WEIGHT_EPSILON + (1.0 - 2.0 * WEIGHT_EPSILON) * rank as f64 / top;
                (id, w)
            })
            .collect();
        Ok(Self { counts, weights })
    }

    pub fn count(&self, id: TokenId) -> u64 {
        self.counts.get(&id).copied().unwrap_or(0)
    }

    /// Base weight of a token; tokens never seen in the corpus count as the
    /// rarest.
    pub fn weight(&self, id: TokenId) -> f64 {
        self.weights.get(&id).copied().unwrap_or(1.0 - WEIGHT_EPSILON)
    }

    pub fn counts(&self) -> &BTreeMap<TokenId, u64> {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// `token_id<TAB>count` per line, ascending id.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (id, count) in &self.counts {
            out.push_str(&format!("{id}\t{count}\n"));
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let mut counts = BTreeMap::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: origin.to_path_buf(),
                line: line_no,
                message,
            };
            let (id, count) = line
                .split_once('\t')
                .ok_or_else(|| parse_err("expected `token_id<TAB>count`".into()))?;
            let id: TokenId = id
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad token id `{id}`: {e}")))?;
            let count: u64 = count
                .trim()
                .parse()
                .map_err(|e| parse_err(format!("bad count `{count}`: {e}")))?;
            if counts.insert(id, count).is_some() {
                return Err(parse_err(format!("duplicate token id {id}")));
            }
        }
        Self::from_counts(counts)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path)?;
        file.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read frequency table {}: {e}", path.display())))?;
        Self::from_text(&text, path)
    }
}

/// Per-position masking probabilities for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    pub probs: Vec<f64>,
    pub maskable: Vec<bool>,
    pub target_rate: f64,
    pub power: f64,
}

impl MaskPlan {
    /// Every maskable position at the same probability.
    pub fn uniform(maskable: &[bool], target_rate: f64) -> Self {
        Self {
            probs: maskable.iter().map(|&m| if m { target_rate } else { 0.0 }).collect(),
            maskable: maskable.to_vec(),
            target_rate,
            power: 0.0,
        }
    }

    /// Mean probability over maskable positions.
    pub fn maskable_mean(&self) -> f64 {
        let (sum, n) = self
            .probs
            .iter()
            .zip(&self.maskable)
            .filter(|(_, &m)| m)
            .fold((0.0, 0usize), |(s, n), (&p, _)| (s + p, n + 1));
        if n == 0 {
            0.0
        } else {
            sum / n as f64
        }
    }
}

/// A sequence after absorbing-state corruption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorruptedSequence {
    pub tokens: Vec<TokenId>,
    pub mask_indicator: Vec<bool>,
    pub original: Vec<TokenId>,
}

impl CorruptedSequence {
    pub fn masked_count(&self) -> usize {
        self.mask_indicator.iter().filter(|&&m| m).count()
    }
}

/// Linear ramp of the softening power from 0 to `p_max`.
pub fn curriculum_power(tau: f64, p_max: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::Domain(format!("tau must lie in [0,1], got {tau}")));
    }
    if !(0.0..1.0).contains(&p_max) {
        return Err(Error::Domain(format!("p_max must lie in [0,1), got {p_max}")));
    }
    Ok(tau * p_max)
}

/// Masking probabilities from raw per-position weights.
///
/// `weights[i]` is ignored where `maskable[i]` is false.
pub fn scaled_probs(weights: &[f64], maskable: &[bool], power: f64, target_rate: f64) -> Result<MaskPlan> {
    if weights.len() != maskable.len() {
        return Err(Error::Shape(format!(
            "{} weights for {} positions",
            weights.len(),
            maskable.len()
        )));
    }
    if !(target_rate > 0.0 && target_rate < 1.0) {
        return Err(Error::Domain(format!(
            "target rate must lie in (0,1), got {target_rate}"
        )));
    }
    if !(power >= 0.0 && power.is_finite()) {
        return Err(Error::Domain(format!("softening power must be >= 0, got {power}")));
    }
    let n = maskable.iter().filter(|&&m| m).count();
    if n == 0 {
        return Err(Error::Data("sequence has no maskable positions".into()));
    }
    let softened: Vec<f64> = weights
        .iter()
        .zip(maskable)
        .map(|(&w, &m)| if m { w.powf(power) } else { 0.0 })
        .collect();
    let mu = softened.iter().sum::<f64>() / n as f64;
    let alpha = 1.0 - target_rate;
    let probs: Vec<f64> = if mu > target_rate {
        let scale = target_rate / mu;
        softened
            .iter()
            .zip(maskable)
            .map(|(&s, &m)| if m { s * scale } else { 0.0 })
            .collect()
    } else if mu < 1.0 {
        let scale = alpha / (1.0 - mu);
        softened
            .iter()
            .zip(maskable)
            .map(|(&s, &m)| {
                if m {
                    (1.0 - (1.0 - s) * scale).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            })
            .collect()
    } else {
        return Ok(MaskPlan::uniform(maskable, target_rate));
    };
    Ok(MaskPlan {
        probs,
        maskable: maskable.to_vec(),
        target_rate,
        power,
    })
}

/// Frequency-informed masking probabilities for one token sequence.
pub fn sequence_mask_probs(
    table: &FrequencyTable,
    tokens: &[TokenId],
    maskable: &[bool],
    power: f64,
    target_rate: f64,
) -> Result<MaskPlan> {
    if tokens.len() != maskable.len() {
        return Err(Error::Shape(format!(
            "{} tokens but {} maskable flags",
            tokens.len(),
            maskable.len()
        )));
    }
    let weights: Vec<f64> = tokens.iter().map(|&id| table.weight(id)).collect();
    scaled_probs(&weights, maskable, power, target_rate)
}

/// Default maskability: everything except special tokens.
pub fn default_maskable(tokens: &[TokenId]) -> Vec<bool> {
    tokens.iter().map(|&id| !is_special(id)).collect()
}

/// Replaces each position by `mask_id` independently with probability
/// `plan.probs[i]`.
pub fn apply_mask<R: Rng + ?Sized>(
    plan: &MaskPlan,
    original: &[TokenId],
    rng: &mut R,
    mask_id: TokenId,
) -> Result<CorruptedSequence> {
    if plan.probs.len() != original.len() {
        return Err(Error::Shape(format!(
            "mask plan covers {} positions, sequence has {}",
            plan.probs.len(),
            original.len()
        )));
    }
    if original.contains(&mask_id) {
        return Err(Error::Data(format!("reserved mask id {mask_id} present in input")));
    }
    let mut tokens = Vec::with_capacity(original.len());
    let mut mask_indicator = Vec::with_capacity(original.len());
    for (&id, &p) in original.iter().zip(&plan.probs) {
        let draw: f64 = rng.random();
        let masked = draw < p;
        tokens.push(if masked { mask_id } else { id });
        mask_indicator.push(masked);
    }
    Ok(CorruptedSequence {
        tokens,
        mask_indicator,
        original: original.to_vec(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tokenizer::MASK_ID;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const A: TokenId = 10;
    const B: TokenId = 11;
    const C: TokenId = 12;

    fn stream(counts: &[(TokenId, usize)]) -> Vec<TokenId> {
        counts.iter().flat_map(|&(id, n)| std::iter::repeat_n(id, n)).collect()
    }

    #[test]
    fn three_token_ranks() {
        let table = FrequencyTable::build(stream(&[(A, 100), (B, 10), (C, 1)])).unwrap();
        assert_eq!(table.weight(A), WEIGHT_EPSILON);
        assert_eq!(table.weight(B), 0.5);
        assert_eq!(table.weight(C), 1.0 - WEIGHT_EPSILON);
        assert_eq!(table.weight(999), 1.0 - WEIGHT_EPSILON);
        assert_eq!(table.count(A), 100);
    }

    #[test]
    fn ties_broken_by_token_id() {
        let table = FrequencyTable::build(stream(&[(C, 5), (A, 5), (B, 5)])).unwrap();
        assert_eq!(table.weight(A), WEIGHT_EPSILON);
        assert_eq!(table.weight(B), 0.5);
        assert_eq!(table.weight(C), 1.0 - WEIGHT_EPSILON);
    }

    #[test]
    fn order_invariant_counting() {
        let mut tokens = stream(&[(A, 30), (B, 7), (C, 2), (20, 9)]);
        let sorted = FrequencyTable::build(tokens.clone()).unwrap();
        tokens.shuffle(&mut ChaCha8Rng::seed_from_u64(3));
        assert_eq!(FrequencyTable::build(tokens).unwrap(), sorted);
    }

    #[test]
    fn too_few_tokens() {
        assert!(FrequencyTable::build(Vec::new()).is_err());
        assert!(FrequencyTable::build(vec![A, A, A]).is_err());
        // Special ids are not maskable and do not count.
        assert!(FrequencyTable::build(vec![A, MASK_ID, 0]).is_err());
    }

    #[test]
    fn text_round_trip_and_errors() {
        let table = FrequencyTable::build(stream(&[(A, 3), (B, 1), (40, 2)])).unwrap();
        let text = table.to_text();
        assert_eq!(text, "10\t3\n11\t1\n40\t2\n");
        let path = Path::new("freq.tsv");
        assert_eq!(FrequencyTable::from_text(&text, path).unwrap(), table);
        let err = FrequencyTable::from_text("10\t3\n11 x\n", path).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
    }

    #[test]
    fn curriculum_endpoints() {
        assert_eq!(curriculum_power(0.0, 0.02).unwrap(), 0.0);
        assert_eq!(curriculum_power(1.0, 0.02).unwrap(), 0.02);
        assert_eq!(curriculum_power(0.5, 0.02).unwrap(), 0.01);
        assert!(curriculum_power(1.5, 0.02).is_err());
        assert!(curriculum_power(0.5, 1.0).is_err());
    }

    #[test]
    fn zero_power_is_uniform() {
        let weights = [0.1, 0.5, 0.9, 0.3];
        let plan = scaled_probs(&weights, &[true; 4], 0.0, 0.37).unwrap();
        assert_eq!(plan.probs, vec![0.37; 4]);
    }

    #[test]
    fn constant_weights_scale_down() {
        let plan = scaled_probs(&[0.5; 6], &[true; 6], 1.0, 0.3).unwrap();
        for p in plan.probs {
            assert_abs_diff_eq!(p, 0.3, epsilon = 1e-15);
        }
    }

    #[test]
    fn second_branch_hand_computed() {
        let plan = scaled_probs(&[0.2, 0.8], &[true, true], 1.0, 0.7).unwrap();
        assert_abs_diff_eq!(plan.probs[0], 0.52, epsilon = 1e-12);
        assert_abs_diff_eq!(plan.probs[1], 0.88, epsilon = 1e-12);
        assert_abs_diff_eq!(plan.maskable_mean(), 0.7, epsilon = 1e-12);
    }

    #[test]
    fn non_maskable_positions_excluded() {
        let plan = scaled_probs(&[0.9, 0.2, 0.8], &[true, false, true], 1.0, 0.7).unwrap();
        assert_eq!(plan.probs[1], 0.0);
        assert_abs_diff_eq!(plan.maskable_mean(), 0.7, epsilon = 1e-12);
        assert!(scaled_probs(&[0.5], &[false], 1.0, 0.5).is_err());
        assert!(scaled_probs(&[0.5], &[true], 1.0, 1.0).is_err());
    }

    #[test]
    fn tiny_power_approaches_uniform() {
        let weights: Vec<f64> = (0..50).map(|i| 0.01 + 0.98 * i as f64 / 49.0).collect();
        for rate in [0.1, 0.5, 0.9] {
            let plan = scaled_probs(&weights, &[true; 50], 1e-4, rate).unwrap();
            let sup = plan.probs.iter().map(|p| (p - rate).abs()).fold(0.0, f64::max);
            assert!(sup < 1e-3, "rate {rate}: sup-norm {sup}");
        }
    }

    #[test]
    fn apply_mask_extremes() {
        let original: Vec<TokenId> = (10..30).collect();
        let maskable = vec![true; original.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let none = MaskPlan {
            probs: vec![0.0; original.len()],
            ..MaskPlan::uniform(&maskable, 0.5)
        };
        let out = apply_mask(&none, &original, &mut rng, MASK_ID).unwrap();
        assert_eq!(out.tokens, original);
        assert_eq!(out.masked_count(), 0);
        let all = MaskPlan::uniform(&maskable, 1.0);
        let out = apply_mask(&all, &original, &mut rng, MASK_ID).unwrap();
        assert!(out.tokens.iter().all(|&t| t == MASK_ID));
        assert!(apply_mask(&all, &[MASK_ID; 20], &mut rng, MASK_ID).is_err());
        assert!(apply_mask(&all, &original[..3], &mut rng, MASK_ID).is_err());
    }

    #[test]
    fn apply_mask_concentrates() {
        let n = 100_000;
        let original = vec![A; n];
        let plan = MaskPlan::uniform(&vec![true; n], 0.5);
        let out = apply_mask(&plan, &original, &mut ChaCha8Rng::seed_from_u64(11), MASK_ID).unwrap();
        let frac = out.masked_count() as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.01, "{frac}");
    }

    proptest! {
        #[test]
        fn corruption_is_absorbing(seed in any::<u64>(), rate in 0.0f64..1.0) {
            let original: Vec<TokenId> = (0..64).map(|i| 5 + (i * 7 % 40) as TokenId).collect();
            let plan = MaskPlan::uniform(&[true; 64], rate);
            let out = apply_mask(&plan, &original, &mut ChaCha8Rng::seed_from_u64(seed), MASK_ID).unwrap();
            for ((&tok, &masked), &orig) in out.tokens.iter().zip(&out.mask_indicator).zip(&original) {
                prop_assert_eq!(tok == MASK_ID, masked);
                if !masked {
                    prop_assert_eq!(tok, orig);
                }
            }
        }

        #[test]
        fn scaling_contract(
            weights in prop::collection::vec(WEIGHT_EPSILON..=(1.0 - WEIGHT_EPSILON), 1..64),
            power in 0.0f64..1.0,
            rate in 0.001f64..0.999,
        ) {
            let maskable = vec![true; weights.len()];
            let plan = scaled_probs(&weights, &maskable, power, rate).unwrap();
            prop_assert!((plan.maskable_mean() - rate).abs() < 1e-9);
            for (i, &pi) in plan.probs.iter().enumerate() {
                prop_assert!((0.0..=1.0).contains(&pi));
                for (j, &pj) in plan.probs.iter().enumerate() {
                    if weights[i] >= weights[j] {
                        prop_assert!(pi >= pj);
                    }
                }
            }
        }
    }
}
