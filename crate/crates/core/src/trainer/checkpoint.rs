//! Versioned binary checkpoints with a SHA-256 trailer.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "MASKDIFF" | version u32
//! config text | vocab text | frequency table text     (u64 length + UTF-8)
//! step u64 | total_steps u64 | optimizer updates u64
//! params | adam m | adam v                              (u64 count + f64s)
//! sha256 of everything above                            (32 bytes)
//! ```
//!
//! Random streams are keyed by `(seed, step-derived indices)`, so the seed
//! in the config text and the step counter are the whole RNG state.

use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"MASKDIFF";
pub const FORMAT_VERSION: u32 = 1;
const HASH_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub vocab_text: String,
    /// Empty when frequency masking is off.
    pub freq_text: String,
    pub step: u64,
    pub total_steps: u64,
    pub updates: u64,
    pub params: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let floats = self.params.len() + self.m.len() + self.v.len();
        let mut out = Vec::with_capacity(64 + floats * 8 + self.config_text.len() + self.vocab_text.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        for text in [&self.config_text, &self.vocab_text, &self.freq_text] {
            out.extend_from_slice(&(text.len() as u64).to_le_bytes());
            out.extend_from_slice(text.as_bytes());
        }
        for n in [self.step, self.total_steps, self.updates] {
            out.extend_from_slice(&n.to_le_bytes());
        }
        for values in [&self.params, &self.m, &self.v] {
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for x in values.iter() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 4 + HASH_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let (body, stored) = bytes.split_at(bytes.len() - HASH_LEN);
        if Sha256::digest(body).as_slice() != stored {
            return Err(Error::Checkpoint("integrity hash mismatch".into()));
        }
        let mut r = Reader { bytes: body, pos: 12 };
        let config_text = r.text()?;
        let vocab_text = r.text()?;
        let freq_text = r.text()?;
        let step = r.u64()?;
        let total_steps = r.u64()?;
        let updates = r.u64()?;
        let params = r.floats()?;
        let m = r.floats()?;
        let v = r.floats()?;
        if r.pos != body.len() {
            return Err(Error::Checkpoint("trailing bytes after payload".into()));
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(Error::Checkpoint("optimizer state does not match parameters".into()));
        }
        Ok(Self {
            config_text,
            vocab_text,
            freq_text,
            step,
            total_steps,
            updates,
            params,
            m,
            v,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.to_bytes())?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated payload".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn text(&mut self) -> Result<String> {
        let n = self.u64()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("text section is not UTF-8".into()))
    }

    fn floats(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Checkpoint("length overflow".into()))?,
        )?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}
