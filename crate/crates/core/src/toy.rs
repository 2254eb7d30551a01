//! A tiny agreement grammar for smoke runs and the overfitting check.
//!
//! Sentences have the shape `Det [Adj] Noun Verb Det [Adj] Noun .` with
//! number agreement between the subject determiner, noun and verb, and
//! between the object determiner and noun. Minimal pairs take a corpus
//! sentence and break exactly one agreement or ordering constraint.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::eval::MinimalPair;

const SINGULAR_DETS: [&str; 3] = ["a", "this", "every"];
const PLURAL_DETS: [&str; 3] = ["some", "these", "many"];
const ADJECTIVES: [&str; 4] = ["small", "big", "red", "old"];
/// `(singular, plural)`.
const NOUNS: [(&str, &str); 6] = [
    ("cat", "cats"),
    ("dog", "dogs"),
    ("bird", "birds"),
    ("fox", "foxes"),
    ("girl", "girls"),
    ("boy", "boys"),
];
/// `(third person singular, plural)`.
const VERBS: [(&str, &str); 4] = [
    ("sees", "see"),
    ("likes", "like"),
    ("chases", "chase"),
    ("finds", "find"),
];

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Phrase {
    plural: bool,
    det: usize,
    adj: Option<usize>,
    noun: usize,
}

impl Phrase {
    fn random<R: Rng>(rng: &mut R) -> Self {
        Self {
            plural: rng.random_bool(0.5),
            det: rng.random_range(0..3),
            adj: rng.random_bool(0.4).then(|| rng.random_range(0..ADJECTIVES.len())),
            noun: rng.random_range(0..NOUNS.len()),
        }
    }

    fn det(&self, plural: bool) -> &'static str {
        if plural {
            PLURAL_DETS[self.det]
        } else {
            SINGULAR_DETS[self.det]
        }
    }

    fn noun(&self, plural: bool) -> &'static str {
        let (s, p) = NOUNS[self.noun];
        if plural {
            p
        } else {
            s
        }
    }

    fn words(&self, det_plural: bool, noun_plural: bool) -> Vec<&'static str> {
        let mut w = vec![self.det(det_plural)];
        if let Some(a) = self.adj {
            w.push(ADJECTIVES[a]);
        }
        w.push(self.noun(noun_plural));
        w
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
struct Sentence {
    subject: Phrase,
    verb: usize,
    object: Phrase,
}

/// The ways a sentence can be broken.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Corruption {
    VerbAgreement,
    SubjectDeterminer,
    ObjectDeterminer,
    NounVerbOrder,
}

impl Sentence {
    fn render(&self, corruption: Option<Corruption>) -> String {
        let sp = self.subject.plural;
        let op = self.object.plural;
        let flip = |c: Corruption| corruption == Some(c);
        let mut words = self.subject.words(sp != flip(Corruption::SubjectDeterminer), sp);
        let (third, plural) = VERBS[self.verb];
        let verb_plural = sp != flip(Corruption::VerbAgreement);
        let verb = if verb_plural { plural } else { third };
        if flip(Corruption::NounVerbOrder) {
            let noun = words.pop().expect("phrase has a noun");
            words.push(verb);
            words.push(noun);
        } else {
            words.push(verb);
        }
        words.extend(self.object.words(op != flip(Corruption::ObjectDeterminer), op));
        let mut s = words.join(" ");
        s.push_str(" .");
        s
    }
}

/// `n` distinct grammatical sentences, deterministic in `seed`.
pub fn corpus(n: usize, seed: u64) -> Vec<String> {
    sentences(n, seed).iter().map(|s| s.render(None)).collect()
}

fn sentences(n: usize, seed: u64) -> Vec<Sentence> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seen = BTreeSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = Sentence {
            subject: Phrase::random(&mut rng),
            verb: rng.random_range(0..VERBS.len()),
            object: Phrase::random(&mut rng),
        };
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    out
}

/// `n` minimal pairs whose good member is one of the first `corpus_size`
/// sentences of [`corpus`] with the same seed.
pub fn minimal_pairs(corpus_size: usize, n: usize, seed: u64) -> Vec<MinimalPair> {
    let all = [
        Corruption::VerbAgreement,
        Corruption::SubjectDeterminer,
        Corruption::ObjectDeterminer,
        Corruption::NounVerbOrder,
    ];
    let mut candidates: Vec<MinimalPair> = sentences(corpus_size, seed)
        .iter()
        .flat_map(|s| {
            all.iter().map(move |&c| MinimalPair {
                good: s.render(None),
                bad: s.render(Some(c)),
            })
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    candidates.shuffle(&mut rng);
    candidates.truncate(n);
    candidates
}

/// A random sentence from the grammar, not necessarily in any corpus.
pub fn sample_sentence<R: Rng>(rng: &mut R) -> String {
    Sentence {
        subject: Phrase::random(rng),
        verb: rng.random_range(0..VERBS.len()),
        object: Phrase::random(rng),
    }
    .render(None)
}
