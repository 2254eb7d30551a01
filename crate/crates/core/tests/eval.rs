use maskdiff::eval::{minimal_pair_accuracy, parse_pairs, Conditioning, MinimalPair, Scorer};
use maskdiff::model::{Model, ModelConfig, UNCONDITIONED_T};
use maskdiff::objective::negative_log_softmax;
use maskdiff::schedules::{NoiseSchedule, ScheduleKind};
use maskdiff::tokenizer::{Vocab, MASK_ID};
use maskdiff::toy;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;

const CONDITIONINGS: [Conditioning; 2] = [Conditioning::None, Conditioning::SingleToken];

fn vocab() -> Vocab {
    let corpus = toy::corpus(64, 7);
    Vocab::train(corpus.iter().map(String::as_str), 2048).unwrap()
}

fn config(vocab: &Vocab) -> ModelConfig {
    ModelConfig {
        layers: 2,
        hidden_dim: 32,
        heads: 4,
        ffn_dim: 64,
        vocab_size: vocab.len(),
        max_seq_len: 16,
        timestep_dim: 16,
        ..ModelConfig::default()
    }
}

fn random_model(vocab: &Vocab, seed: u64) -> Model {
    let mut model = Model::init(config(vocab), seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params_mut() {
        *p = rng.random_range(-0.3..0.3);
    }
    model
}

fn uniform_model(vocab: &Vocab) -> Model {
    let cfg = config(vocab);
    Model::from_params(cfg, vec![0.0; cfg.parameter_count()]).unwrap()
}

#[test]
fn uniform_model_pll() {
    let vocab = vocab();
    let model = uniform_model(&vocab);
    let scorer = Scorer::new(&model, &vocab, NoiseSchedule::cosine(), 0.0).unwrap();
    let v = vocab.len() as f64;
    for sentence in toy::corpus(10, 3) {
        for c in CONDITIONINGS {
            let r = scorer.pseudo_log_likelihood(&sentence, c).unwrap();
            let expected = -(r.tokens.len() as f64) * v.ln();
            assert!((r.total - expected).abs() < 1e-9, "{} vs {expected}", r.total);
        }
    }
}

#[test]
fn uniform_model_equal_length_pairs_tie() {
    let vocab = vocab();
    let model = uniform_model(&vocab);
    let scorer = Scorer::new(&model, &vocab, NoiseSchedule::cosine(), 0.0).unwrap();
    let pairs: Vec<MinimalPair> = toy::minimal_pairs(64, 50, 7)
        .into_iter()
        .filter(|p| vocab.encode(&p.good).len() == vocab.encode(&p.bad).len())
        .collect();
    assert!(pairs.len() > 10);
    let report = minimal_pair_accuracy(&pairs, &scorer, Conditioning::SingleToken).unwrap();
    assert_eq!(report.accuracy, 0.5);
}

#[test]
fn single_token_sentence() {
    let vocab = vocab();
    let model = random_model(&vocab, 4);
    let scorer = Scorer::new(&model, &vocab, NoiseSchedule::cosine(), 0.0).unwrap();
    let word = ".";
    let ids = vocab.encode(word);
    assert_eq!(ids.len(), 1);
    for c in CONDITIONINGS {
        let r = scorer.pseudo_log_likelihood(word, c).unwrap();
        let pass = model.forward(&[MASK_ID], 1, &[r.t]).unwrap();
        assert_eq!(r.total, -negative_log_softmax(pass.row(0, 0), ids[0] as usize));
    }
}

#[test]
fn batched_matches_reference_bitwise() {
    let vocab = vocab();
    for seed in 0..3 {
        let model = random_model(&vocab, seed);
        let scorer = Scorer::new(&model, &vocab, NoiseSchedule::cosine(), 0.5).unwrap();
        for sentence in toy::corpus(8, seed + 10) {
            for c in CONDITIONINGS {
                let a = scorer.pseudo_log_likelihood(&sentence, c).unwrap();
                let b = scorer.pseudo_log_likelihood_batched(&sentence, c).unwrap();
                assert_eq!(a, b);
                assert_eq!(a.total.to_bits(), b.total.to_bits());
            }
        }
    }
}

#[test]
fn repeated_calls_are_identical() {
    let vocab = vocab();
    let model = random_model(&vocab, 9);
    let scorer = Scorer::new(&model, &vocab, NoiseSchedule::linear(), 0.0).unwrap();
    let first = scorer
        .pseudo_log_likelihood("some foxes chase a cat .", Conditioning::SingleToken)
        .unwrap();
    for _ in 0..3 {
        let again = scorer
            .pseudo_log_likelihood("some foxes chase a cat .", Conditioning::SingleToken)
            .unwrap();
        assert_eq!(first.total.to_bits(), again.total.to_bits());
    }
}

#[test]
fn conditioning_times() {
    let vocab = vocab();
    let model = random_model(&vocab, 1);
    let schedule = NoiseSchedule::linear();
    let scorer = Scorer::new(&model, &vocab, schedule, 0.0).unwrap();
    assert_eq!(
        scorer.conditioning_time(Conditioning::None, 7).unwrap(),
        UNCONDITIONED_T
    );
    let t = scorer.conditioning_time(Conditioning::SingleToken, 8).unwrap();
    assert!((schedule.masking_rate(t, 0.0).unwrap() - 0.125).abs() < 1e-9);
    let cosine = NoiseSchedule::cosine();
    let scorer = Scorer::new(&model, &vocab, cosine, 0.0).unwrap();
    let t = scorer.conditioning_time(Conditioning::SingleToken, 5).unwrap();
    assert!((cosine.masking_rate(t, 0.0).unwrap() - 0.2).abs() < 1e-9);
    let bimodal = NoiseSchedule::with_default_clamp(ScheduleKind::BIMODAL_GAUSSIAN).unwrap();
    for tau in [0.0, 1.0] {
        let scorer = Scorer::new(&model, &vocab, bimodal, tau).unwrap();
        let t = scorer.conditioning_time(Conditioning::SingleToken, 4).unwrap();
        assert!((bimodal.masking_rate(t, tau).unwrap() - 0.25).abs() < 1e-7);
    }
}

#[test]
fn time_insensitive_model_ignores_conditioning() {
    let vocab = vocab();
    let mut model = random_model(&vocab, 2);
    model.detach_time();
    let scorer = Scorer::new(&model, &vocab, NoiseSchedule::cosine(), 0.0).unwrap();
    for sentence in toy::corpus(5, 1) {
        let a = scorer.pseudo_log_likelihood(&sentence, Conditioning::None).unwrap();
        let b = scorer
            .pseudo_log_likelihood(&sentence, Conditioning::SingleToken)
            .unwrap();
        assert_ne!(a.t, b.t);
        assert_eq!(a.total.to_bits(), b.total.to_bits());
    }
}

#[test]
fn identical_pair_scores_half() {
    let vocab = vocab();
    let model = random_model(&vocab, 5);
    let scorer = Scorer::new(&model, &vocab, NoiseSchedule::cosine(), 0.0).unwrap();
    let pairs = parse_pairs("a cat runs .\ta cat runs .\n", Path::new("p.tsv")).unwrap();
    let report = minimal_pair_accuracy(&pairs, &scorer, Conditioning::SingleToken).unwrap();
    assert_eq!(report.accuracy, 0.5);
    assert_eq!(report.scores[0].margin, 0.0);
}

#[test]
fn pair_order_does_not_matter() {
    let vocab = vocab();
    let model = random_model(&vocab, 6);
    let scorer = Scorer::new(&model, &vocab, NoiseSchedule::cosine(), 0.0).unwrap();
    let pairs = toy::minimal_pairs(64, 30, 2);
    let mut reversed = pairs.clone();
    reversed.reverse();
    let a = minimal_pair_accuracy(&pairs, &scorer, Conditioning::SingleToken).unwrap();
    let b = minimal_pair_accuracy(&reversed, &scorer, Conditioning::SingleToken).unwrap();
    assert_eq!(a.accuracy, b.accuracy);
    assert!((0.0..=1.0).contains(&a.accuracy));
    for (i, s) in a.scores.iter().enumerate() {
        assert_eq!(s, &b.scores[pairs.len() - 1 - i]);
    }
    let csv = a.to_csv();
    assert_eq!(csv.lines().count(), pairs.len() + 1);
}

#[test]
fn unknown_characters_are_flagged() {
    let vocab = vocab();
    let model = random_model(&vocab, 7);
    let scorer = Scorer::new(&model, &vocab, NoiseSchedule::cosine(), 0.0).unwrap();
    let r = scorer
        .pseudo_log_likelihood("a cat runs Ω", Conditioning::None)
        .unwrap();
    assert!(r.unknown_chars >= 1);
    assert!(r.total.is_finite());
}

#[test]
fn overlong_sentence_is_rejected() {
    let vocab = vocab();
    let model = random_model(&vocab, 8);
    let scorer = Scorer::new(&model, &vocab, NoiseSchedule::cosine(), 0.0).unwrap();
    let long = "a cat runs . ".repeat(10);
    assert!(scorer.pseudo_log_likelihood(&long, Conditioning::None).is_err());
}
