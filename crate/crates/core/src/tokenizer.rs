//! Character-level BPE over whitespace pre-tokenized units.
//!
//! Pre-tokenization splits text into units of "optional leading space +
//! non-whitespace run"; any other whitespace character is a unit of its
//! own. The leading space is the word-boundary marker, so decoding is plain
//! concatenation and round-trips exactly.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::TokenId;

pub const PAD_ID: TokenId = 0;
pub const UNK_ID: TokenId = 1;
pub const CLS_ID: TokenId = 2;
pub const SEP_ID: TokenId = 3;
pub const MASK_ID: TokenId = 4;
pub const SPECIAL_TOKEN_COUNT: usize = 5;
pub const SPECIAL_TOKENS: [&str; SPECIAL_TOKEN_COUNT] = ["<pad>", "<unk>", "<cls>", "<sep>", "<mask>"];

const FILE_HEADER: &str = "#maskdiff-vocab v1";

pub fn is_special(id: TokenId) -> bool {
    (id as usize) < SPECIAL_TOKEN_COUNT
}

/// Splits text into BPE units. Concatenating the units gives back `text`.
pub fn pretokenize(text: &str) -> Vec<String> {
    let mut units = Vec::new();
    let mut current = String::new();
    for ch in text.chars() {
        if ch.is_whitespace() {
            if !current.is_empty() {
                units.push(std::mem::take(&mut current));
            }
            if ch == ' ' {
                current.push(' ');
            } else {
                units.push(ch.to_string());
            }
        } else {
            current.push(ch);
        }
    }
    if !current.is_empty() {
        units.push(current);
    }
    units
}

/// A trained BPE vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    alphabet: Vec<char>,
    merges: Vec<(String, String)>,
    tokens: Vec<String>,
    token_to_id: HashMap<String, TokenId>,
    merge_ranks: HashMap<(String, String), usize>,
}

/// Result of encoding text that may contain characters outside the
/// training alphabet.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoding {
    pub ids: Vec<TokenId>,
    pub unknown_chars: usize,
}

impl Vocab {
    fn assemble(alphabet: Vec<char>, merges: Vec<(String, String)>) -> Result<Self> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        let mut token_to_id = HashMap::new();
        for &ch in &alphabet {
            let s = ch.to_string();
            if token_to_id.contains_key(&s) {
                return Err(Error::Data(format!("duplicate alphabet symbol {ch:?}")));
            }
            token_to_id.insert(s.clone(), tokens.len() as TokenId);
            tokens.push(s);
        }
        let mut merge_ranks = HashMap::new();
        for (rank, (left, right)) in merges.iter().enumerate() {
            if !token_to_id.contains_key(left) || !token_to_id.contains_key(right) {
                return Err(Error::Data(format!(
                    "merge {rank} ({left:?}, {right:?}) uses an unknown symbol"
                )));
            }
            let merged = format!("{left}{right}");
            if !token_to_id.contains_key(&merged) {
                token_to_id.insert(merged.clone(), tokens.len() as TokenId);
                tokens.push(merged);
            }
            merge_ranks.entry((left.clone(), right.clone())).or_insert(rank);
        }
        Ok(Self {
            alphabet,
            merges,
            tokens,
            token_to_id,
            merge_ranks,
        })
    }

    /// Greedy BPE training. Merges the most frequent adjacent pair (ties go to
    /// the lexicographically smallest pair) until `vocab_size` tokens exist
    /// or no pair occurs at least twice.
    pub fn train<'a, I>(corpus: I, vocab_size: usize) -> Result<Self>
    where
        I: IntoIterator<Item = &'a str>,
    {
        let mut unit_counts: HashMap<String, u64> = HashMap::new();
        for text in corpus {
            for unit in pretokenize(text) {
                *unit_counts.entry(unit).or_insert(0) += 1;
            }
        }
        if unit_counts.is_empty() {
            return Err(Error::Data("cannot train a tokenizer on an empty corpus".into()));
        }
        let alphabet: Vec<char> = unit_counts
            .keys()
            .flat_map(|u| u.chars())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let base = SPECIAL_TOKEN_COUNT + alphabet.len();
        if vocab_size < base {
            return Err(Error::Data(format!(
                "vocab size {vocab_size} is below the {base} base symbols (specials + alphabet)"
            )));
        }

        // Sorted so that training does not depend on hash order.
        let mut words: Vec<(Vec<String>, u64)> = unit_counts
            .into_iter()
            .map(|(u, c)| (u.chars().map(String::from).collect(), c))
            .collect();
        words.sort();

        let mut known: BTreeSet<String> = alphabet.iter().map(|c| c.to_string()).collect();
        let mut merges = Vec::new();
        while SPECIAL_TOKEN_COUNT + known.len() < vocab_size {
            let mut pair_counts: HashMap<(&str, &str), u64> = HashMap::new();
            for (symbols, count) in &words {
                for pair in symbols.windows(2) {
                    *pair_counts.entry((&pair[0], &pair[1])).or_insert(0) += count;
                }
            }
            let best = pair_counts
                .into_iter()
                .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)));
            let Some(((left, right), count)) = best else { break };
            if count < 2 {
                break;
            }
            let (left, right) = (left.to_string(), right.to_string());
            for (symbols, _) in words.iter_mut() {
                merge_in_place(symbols, &left, &right);
            }
            known.insert(format!("{left}{right}"));
            merges.push((left, right));
        }
        Self::assemble(alphabet, merges)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn alphabet(&self) -> &[char] {
        &self.alphabet
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.token_to_id.get(token).copied()
    }

    /// Encodes text, mapping characters outside the alphabet to `<unk>`.
    pub fn encode_with_stats(&self, text: &str) -> Encoding {
        let mut ids = Vec::new();
        let mut unknown_chars = 0;
        for unit in pretokenize(text) {
            // Unknown characters split the unit; each known run merges alone.
            let mut run: Vec<String> = Vec::new();
            for ch in unit.chars() {
                let s = ch.to_string();
                if self.token_to_id.contains_key(&s) {
                    run.push(s);
                } else {
                    self.flush_run(&mut run, &mut ids);
                    ids.push(UNK_ID);
                    unknown_chars += 1;
                }
            }
            self.flush_run(&mut run, &mut ids);
        }
        Encoding { ids, unknown_chars }
    }

    pub fn encode(&self, text: &str) -> Vec<TokenId> {
        self.encode_with_stats(text).ids
    }

    fn flush_run(&self, run: &mut Vec<String>, ids: &mut Vec<TokenId>) {
        if run.is_empty() {
            return;
        }
        loop {
            let best = run
                .windows(2)
                .filter_map(|p| self.merge_ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p)))
                .min_by_key(|(r, _)| *r);
            let Some((_, pair)) = best else { break };
            let (left, right) = (pair[0].clone(), pair[1].clone());
            merge_in_place(run, &left, &right);
        }
        ids.extend(run.drain(..).map(|s| self.token_to_id[&s]));
    }

    /// Concatenates token strings. Special tokens decode to their names,
    /// except `<pad>` which decodes to nothing.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let mut out = String::new();
        for &id in ids {
            if id == PAD_ID {
                continue;
            }
            let token = self
                .token(id)
                .ok_or_else(|| Error::Data(format!("token id {id} out of range (vocab size {})", self.len())))?;
            out.push_str(token);
        }
        Ok(out)
    }

    /// Line-oriented vocabulary file: specials header, alphabet, merges in
    /// rank order. Symbols are escaped so that every entry fits on a line.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(FILE_HEADER);
        out.push_str("\n[special]\n");
        for (id, name) in SPECIAL_TOKENS.iter().enumerate() {
            out.push_str(&format!("{id} {name}\n"));
        }
        out.push_str("[alphabet]\n");
        for ch in &self.alphabet {
            out.push_str(&escape(&ch.to_string()));
            out.push('\n');
        }
        out.push_str("[merges]\n");
        for (left, right) in &self.merges {
            out.push_str(&format!("{} {}\n", escape(left), escape(right)));
        }
        out
    }

    pub fn from_text(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, message: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            message,
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        match lines.next() {
            Some((_, FILE_HEADER)) => {}
            _ => return Err(err(1, format!("missing `{FILE_HEADER}` header"))),
        }
        #[derive(PartialEq)]
        enum Section {
            Special,
            Alphabet,
            Merges,
        }
        let mut section = None;
        let mut specials = Vec::new();
        let mut alphabet = Vec::new();
        let mut merges = Vec::new();
        for (no, line) in lines {
            match line {
                "[special]" => section = Some(Section::Special),
                "[alphabet]" => section = Some(Section::Alphabet),
                "[merges]" => section = Some(Section::Merges),
                _ => match section {
                    Some(Section::Special) => {
                        let (id, name) = line
                            .split_once(' ')
                            .ok_or_else(|| err(no, "expected `<id> <name>`".into()))?;
                        let id: usize = id.parse().map_err(|e| err(no, format!("bad id: {e}")))?;
                        if id != specials.len() || SPECIAL_TOKENS.get(id) != Some(&name) {
                            return Err(err(no, format!("unexpected special token `{line}`")));
                        }
                        specials.push(name);
                    }
                    Some(Section::Alphabet) => {
                        let sym = unescape(line).map_err(|m| err(no, m))?;
                        let mut chars = sym.chars();
                        match (chars.next(), chars.next()) {
                            (Some(c), None) => alphabet.push(c),
                            _ => return Err(err(no, format!("alphabet entry `{line}` is not one character"))),
                        }
                    }
                    Some(Section::Merges) => {
                        let (l, r) = line
                            .split_once(' ')
                            .ok_or_else(|| err(no, "expected `<left> <right>`".into()))?;
                        merges.push((
                            unescape(l).map_err(|m| err(no, m))?,
                            unescape(r).map_err(|m| err(no, m))?,
                        ));
                    }
                    None => return Err(err(no, "content before the first section".into())),
                },
            }
        }
        if specials.len() != SPECIAL_TOKEN_COUNT {
            return Err(err(1, "incomplete [special] block".into()));
        }
        Self::assemble(alphabet, merges)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("cannot read vocabulary {}: {e}", path.display())))?;
        Self::from_text(&text, path)
    }
}

fn merge_in_place(symbols: &mut Vec<String>, left: &str, right: &str) {
    let mut i = 0;
    while i + 1 < symbols.len() {
        if symbols[i] == left && symbols[i + 1] == right {
            let r = symbols.remove(i + 1);
            symbols[i].push_str(&r);
        }
        i += 1;
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '\n' => out.push_str("\\n"),
            '\t' => out.push_str("\\t"),
            '\r' => out.push_str("\\r"),
            c if c.is_whitespace() => out.push_str(&format!("\\u{{{:x}}}", c as u32)),
            c => out.push(c),
        }
    }
    out
}

fn unescape(s: &str) -> std::result::Result<String, String> {
    let mut out = String::with_capacity(s.len());
    let mut chars = s.chars();
    while let Some(ch) = chars.next() {
        if ch != '\\' {
            out.push(ch);
            continue;
        }
        match chars.next() {
            Some('\\') => out.push('\\'),
            Some('s') => out.push(' '),
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('u') => {
                let rest: String = chars.by_ref().take_while(|&c| c != '}').collect();
                let hex = rest.strip_prefix('{').ok_or("bad \\u escape")?;
                let code = u32::from_str_radix(hex, 16).map_err(|e| e.to_string())?;
                out.push(char::from_u32(code).ok_or("invalid code point")?);
            }
            other => return Err(format!("unknown escape {other:?}")),
        }
    }
    Ok(out)
}
