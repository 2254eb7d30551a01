//! Time-conditioned bidirectional encoder.
//!
//! A pre-norm transformer whose sublayers are modulated DiT-style: the
//! sinusoidal embedding of `t` goes through a two-layer projection to a
//! conditioning vector `c`, and every block maps `silu(c)` to per-sublayer
//! `(shift, scale, gate)` vectors. Each sublayer computes
//!
//! ```text
//! x ← x + gate ⊙ f((1 + scale) ⊙ LN(x) + shift)
//! ```
//!
//! The modulation projections start at zero, so a fresh model is the
//! identity over every residual branch.
//!
//! All parameters live in one flat `Vec<f64>`; [`ParamLayout`] names the
//! slices. Gradients share the layout.

mod network;
pub(crate) mod ops;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub use network::{ForwardPass, TrainingBatch};

/// Scale applied to `t ∈ [0,1]` before the sinusoidal embedding.
pub const TIME_SCALE: f64 = 1000.0;

/// Longest period of the sinusoidal embedding.
pub const MAX_PERIOD: f64 = 10_000.0;

/// `t` fed to the network when time conditioning is disabled.
pub const UNCONDITIONED_T: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub timestep_dim: usize,
    pub time_conditioning: bool,
    pub tie_embeddings: bool,
    /// Standard deviation of the normal initializer for embeddings and
    /// projections.
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden_dim: 256,
            heads: 4,
            ffn_dim: 1024,
            vocab_size: 2048,
            max_seq_len: 128,
            timestep_dim: 128,
            time_conditioning: true,
            tie_embeddings: true,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("layers", self.layers),
            ("hidden_dim", self.hidden_dim),
            ("heads", self.heads),
            ("ffn_dim", self.ffn_dim),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
            ("timestep_dim", self.timestep_dim),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(name, "must be positive"));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::config(
                "heads",
                format!(
                    "hidden_dim {} is not divisible by {} heads",
                    self.hidden_dim, self.heads
                ),
            ));
        }
        if !self.timestep_dim.is_multiple_of(2) {
            return Err(Error::config("timestep_dim", "must be even"));
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return Err(Error::config("init_std", "must be finite and positive"));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.heads
    }

    /// Closed-form parameter count:
    ///
    /// ```text
    /// V·H + S·H                    token and position embeddings
    /// + (T·H + H) + (H·H + H)      timestep projection
    /// + layers · (6H·H + 6H        block modulation
    ///             + 3H·H + 3H      fused qkv
    ///             + H·H + H        attention output
    ///             + H·F + F        ffn in
    ///             + F·H + H)       ffn out
    /// + 2H·H + 2H                  final modulation
    /// + V (+ H·V when untied)      output head
    /// ```
    pub fn parameter_count(&self) -> usize {
        let (v, s, t, h, f) = (
            self.vocab_size,
            self.max_seq_len,
            self.timestep_dim,
            self.hidden_dim,
            self.ffn_dim,
        );
        let block = 6 * h * h + 6 * h + 3 * h * h + 3 * h + h * h + h + h * f + f + f * h + h;
        let head = v + if self.tie_embeddings { 0 } else { h * v };
        v * h + s * h + (t * h + h) + (h * h + h) + self.layers * block + 2 * h * h + 2 * h + head
    }
}

/// Which part of the network a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Embedding,
    Attention,
    FeedForward,
    Modulation,
    Head,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
    pub group: ParamGroup,
    /// Weight decay applies to matrices only.
    pub decay: bool,
    init: Init,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Normal,
    Zero,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockSlots {
    pub modulation_w: usize,
    pub modulation_b: usize,
    pub qkv_w: usize,
    pub qkv_b: usize,
    pub out_w: usize,
    pub out_b: usize,
    pub ffn_in_w: usize,
    pub ffn_in_b: usize,
    pub ffn_out_w: usize,
    pub ffn_out_b: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Slots {
    pub token_embedding: usize,
    pub position_embedding: usize,
    pub time_w1: usize,
    pub time_b1: usize,
    pub time_w2: usize,
    pub time_b2: usize,
    pub blocks: Vec<BlockSlots>,
    pub final_modulation_w: usize,
    pub final_modulation_b: usize,
    pub head_b: usize,
    pub head_w: Option<usize>,
}

/// Names and offsets of every parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    tensors: Vec<TensorSpec>,
    total: usize,
    pub(crate) slots: Slots,
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let mut tensors = Vec::new();
        let mut total = 0;
        let mut add = |name: String, rows: usize, cols: usize, group: ParamGroup, init: Init| {
            tensors.push(TensorSpec {
                name,
                offset: total,
                rows,
                cols,
                group,
                decay: rows > 1,
                init,
            });
            total += rows * cols;
            tensors.len() - 1
        };
        let (v, h, f) = (config.vocab_size, config.hidden_dim, config.ffn_dim);
        use Init::{Normal as N, Zero as Z};
        use ParamGroup::*;
        let token_embedding = add("token_embedding".into(), v, h, Embedding, N);
        let position_embedding = add("position_embedding".into(), config.max_seq_len, h, Embedding, N);
        let time_w1 = add("time.w1".into(), config.timestep_dim, h, Modulation, N);
        let time_b1 = add("time.b1".into(), 1, h, Modulation, Z);
        let time_w2 = add("time.w2".into(), h, h, Modulation, N);
        let time_b2 = add("time.b2".into(), 1, h, Modulation, Z);
        let blocks = (0..config.layers)
            .map(|l| BlockSlots {
                modulation_w: add(format!("block{l}.modulation.w"), h, 6 * h, Modulation, Z),
                modulation_b: add(format!("block{l}.modulation.b"), 1, 6 * h, Modulation, Z),
                qkv_w: add(format!("block{l}.attn.qkv.w"), h, 3 * h, Attention, N),
                qkv_b: add(format!("block{l}.attn.qkv.b"), 1, 3 * h, Attention, Z),
                out_w: add(format!("block{l}.attn.out.w"), h, h, Attention, N),
                out_b: add(format!("block{l}.attn.out.b"), 1, h, Attention, Z),
                ffn_in_w: add(format!("block{l}.ffn.in.w"), h, f, FeedForward, N),
                ffn_in_b: add(format!("block{l}.ffn.in.b"), 1, f, FeedForward, Z),
                ffn_out_w: add(format!("block{l}.ffn.out.w"), f, h, FeedForward, N),
                ffn_out_b: add(format!("block{l}.ffn.out.b"), 1, h, FeedForward, Z),
            })
            .collect();
        let final_modulation_w = add("final.modulation.w".into(), h, 2 * h, Modulation, Z);
        let final_modulation_b = add("final.modulation.b".into(), 1, 2 * h, Modulation, Z);
        let head_b = add("head.b".into(), 1, v, Head, Z);
        let head_w = (!config.tie_embeddings).then(|| add("head.w".into(), h, v, Head, N));
        Self {
            tensors,
            total,
            slots: Slots {
                token_embedding,
                position_embedding,
                time_w1,
                time_b1,
                time_w2,
                time_b2,
                blocks,
                final_modulation_w,
                final_modulation_b,
                head_b,
                head_w,
            },
        }
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.tensors
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub(crate) fn range(&self, slot: usize) -> std::ops::Range<usize> {
        self.tensors[slot].range()
    }
}

/// Model configuration plus its flat parameter vector.
#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    layout: ParamLayout,
    params: Vec<f64>,
}

impl Model {
    /// Normal(0, init_std) for embeddings and projections, zero for biases
    /// and every modulation projection.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        let mut params = vec![0.0; layout.total()];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, config.init_std).map_err(|e| Error::config("init_std", e.to_string()))?;
        for spec in layout.tensors() {
            if spec.init == Init::Normal {
                for p in &mut params[spec.range()] {
                    *p = normal.sample(&mut rng);
                }
            }
        }
        Ok(Self { config, layout, params })
    }

    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = ParamLayout::new(&config);
        if params.len() != layout.total() {
            return Err(Error::Shape(format!(
                "{} parameters supplied, config needs {}",
                params.len(),
                layout.total()
            )));
        }
        Ok(Self { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn into_params(self) -> Vec<f64> {
        self.params
    }

    pub(crate) fn slice(&self, slot: usize) -> &[f64] {
        &self.params[self.layout.range(slot)]
    }

    /// Zeroes the first timestep projection so the network ignores `t`.
    pub fn detach_time(&mut self) {
        let range = self.layout.range(self.layout.slots.time_w1);
        self.params[range].fill(0.0);
    }
}

/// Sinusoidal embedding of `t`: `dim/2` sines followed by `dim/2` cosines
/// at geometrically spaced frequencies `TIME_SCALE · MAX_PERIOD^(−i/half)`.
pub fn timestep_embedding(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Domain(format!(
            "timestep embedding dim must be even and positive, got {dim}"
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!("t must lie in [0,1], got {t}")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-MAX_PERIOD.ln() * i as f64 / half as f64).exp();
        let arg = t * TIME_SCALE * freq;
        out[i] = arg.sin();
        out[half + i] = arg.cos();
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_parameter_count() {
        let config = ModelConfig::default();
        let layout = ParamLayout::new(&config);
        assert_eq!(layout.total(), config.parameter_count());
        assert_eq!(config.parameter_count(), 5_523_456);
        let untied = ModelConfig {
            tie_embeddings: false,
            ..config
        };
        assert_eq!(ParamLayout::new(&untied).total(), 5_523_456 + 256 * 2048);
    }

    #[test]
    fn config_validation() {
        let ok = ModelConfig::default();
        assert!(ok.validate().is_ok());
        assert!(ModelConfig { heads: 3, ..ok }.validate().is_err());
        assert!(ModelConfig {
            timestep_dim: 127,
            ..ok
        }
        .validate()
        .is_err());
        assert!(ModelConfig { layers: 0, ..ok }.validate().is_err());
    }

    #[test]
    fn embedding_at_zero() {
        let e = timestep_embedding(0.0, 128).unwrap();
        assert!(e[..64].iter().all(|&v| v == 0.0));
        assert!(e[64..].iter().all(|&v| v == 1.0));
        assert!(timestep_embedding(0.5, 7).is_err());
        assert!(timestep_embedding(1.5, 8).is_err());
    }

    #[test]
    fn embedding_is_deterministic_and_lipschitz() {
        let a = timestep_embedding(0.3, 128).unwrap();
        let b = timestep_embedding(0.3, 128).unwrap();
        assert_eq!(a, b);
        let c = timestep_embedding(0.3 + 1e-9, 128).unwrap();
        let sup = a.iter().zip(&c).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(sup < 1e-6, "{sup}");
    }

    #[test]
    fn modulation_starts_at_zero() {
        let model = Model::init(
            ModelConfig {
                layers: 2,
                hidden_dim: 16,
                heads: 2,
                ffn_dim: 32,
                vocab_size: 20,
                max_seq_len: 8,
                timestep_dim: 8,
                ..Default::default()
            },
            1,
        )
        .unwrap();
        for spec in model.layout().tensors() {
            if spec.name.contains("modulation") {
                assert!(model.params()[spec.range()].iter().all(|&p| p == 0.0), "{}", spec.name);
            }
        }
    }
}
