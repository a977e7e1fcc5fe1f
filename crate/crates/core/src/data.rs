//! Byte-level tokens, the token file format and batch sampling.
//!
//! Token file layout (little-endian): `b"SKTOK1"`, `u32` vocabulary size,
//! `u64` token count, then one `u16` per token.

use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Zipf};

use crate::{Error, Result};

pub const TOKEN_MAGIC: &[u8; 6] = b"SKTOK1";
pub const BYTE_VOCAB: usize = 256;

pub fn tokenize_bytes(text: &[u8]) -> Vec<u16> {
    text.iter().map(|&b| u16::from(b)).collect()
}

/// Inverse of [`tokenize_bytes`]; ids above 255 are an index error.
pub fn detokenize(tokens: &[u16]) -> Result<Vec<u8>> {
    tokens
        .iter()
        .map(|&t| {
            u8::try_from(t).map_err(|_| Error::Index {
                index: t as usize,
                bound: BYTE_VOCAB,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenFile {
    vocab_size: u32,
    tokens: Vec<u16>,
}

impl TokenFile {
    pub fn new(vocab_size: usize, tokens: Vec<u16>) -> Result<Self> {
        if vocab_size == 0 || vocab_size > u16::MAX as usize + 1 {
            return Err(Error::Config(format!("vocab_size {vocab_size} outside 1..=65536")));
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= vocab_size) {
            return Err(Error::Index {
                index: t as usize,
                bound: vocab_size,
            });
        }
        Ok(TokenFile {
            vocab_size: vocab_size as u32,
            tokens,
        })
    }

    pub fn from_bytes(text: &[u8]) -> Self {
        TokenFile {
            vocab_size: BYTE_VOCAB as u32,
            tokens: tokenize_bytes(text),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size as usize
    }

    pub fn tokens(&self) -> &[u16] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(TOKEN_MAGIC)?;
        w.write_all(&self.vocab_size.to_le_bytes())?;
        w.write_all(&(self.tokens.len() as u64).to_le_bytes())?;
        let mut buf = Vec::with_capacity(2 * self.tokens.len());
        for t in &self.tokens {
            buf.extend_from_slice(&t.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut head = [0u8; 18];
        r.read_exact(&mut head)
            .map_err(|_| Error::Format("token file header truncated".into()))?;
        if &head[..6] != TOKEN_MAGIC {
            return Err(Error::Format("bad token file magic".into()));
        }
        let vocab = u32::from_le_bytes(head[6..10].try_into().expect("4 bytes"));
        let count = u64::from_le_bytes(head[10..18].try_into().expect("8 bytes"));
        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;
        if payload.len() as u64 != 2 * count {
            return Err(Error::Format(format!(
                "token file declares {count} tokens but holds {} bytes",
                payload.len()
            )));
        }
        let tokens = payload
            .chunks_exact(2)
            .map(|c| u16::from_le_bytes([c[0], c[1]]))
            .collect();
        Self::new(vocab as usize, tokens).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut std::io::BufReader::new(std::fs::File::open(path)?))
    }

    /// Splits off the last `holdout` fraction as a validation set.
    pub fn split(&self, holdout: f64) -> Result<(TokenFile, TokenFile)> {
        if !(holdout > 0.0 && holdout < 1.0) {
            return Err(Error::Config(format!("holdout fraction {holdout} outside (0, 1)")));
        }
        let cut = self.tokens.len() - (holdout * self.tokens.len() as f64).round() as usize;
        let part = |t: &[u16]| TokenFile {
            vocab_size: self.vocab_size,
            tokens: t.to_vec(),
        };
        Ok((part(&self.tokens[..cut]), part(&self.tokens[cut..])))
    }
}

/// `batch` rows of `seq` inputs and their next-token targets, flattened
/// row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub batch: usize,
    pub seq: usize,
    pub inputs: Vec<usize>,
    pub targets: Vec<usize>,
}

/// Slices the windows `tokens[o .. o + seq + 1]` for each offset.
pub fn batch_at(tokens: &[u16], seq: usize, offsets: &[usize]) -> Result<Batch> {
    let mut inputs = Vec::with_capacity(offsets.len() * seq);
    let mut targets = Vec::with_capacity(offsets.len() * seq);
    for &o in offsets {
        let window = tokens.get(o..o + seq + 1).ok_or_else(|| {
            Error::Contract(format!("window at {o} of length {} leaves the corpus", seq + 1))
        })?;
        inputs.extend(window[..seq].iter().map(|&t| t as usize));
        targets.extend(window[1..].iter().map(|&t| t as usize));
    }
    Ok(Batch {
        batch: offsets.len(),
        seq,
        inputs,
        targets,
    })
}

/// `batch` windows at uniformly random offsets (with replacement).
pub fn sample_batch(tokens: &[u16], batch: usize, seq: usize, rng: &mut impl RngCore) -> Result<Batch> {
    if seq == 0 || tokens.len() < seq + 1 {
        return Err(Error::Contract(format!(
            "corpus of {} tokens is too short for windows of {}",
            tokens.len(),
            seq + 1
        )));
    }
    let max_offset = tokens.len() - seq - 1;
    let offsets: Vec<usize> = (0..batch).map(|_| rng.random_range(0..=max_offset)).collect();
    batch_at(tokens, seq, &offsets)
}

/// Offsets of consecutive non-overlapping windows: window `k` predicts
/// tokens `k*seq + 1 ..= (k+1)*seq`.
pub fn eval_offsets(len: usize, seq: usize) -> Vec<usize> {
    if seq == 0 || len < seq + 1 {
        return Vec::new();
    }
    (0..(len - 1) / seq).map(|k| k * seq).collect()
}

/// Deterministic English-like filler text: Zipf-distributed pseudo-words
/// built from a small syllable inventory, grouped into capitalised
/// sentences and paragraphs.
pub fn synthetic_corpus(n_bytes: usize, rng: &mut impl RngCore) -> Vec<u8> {
    const ONSETS: [&str; 18] = ["", "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "w", "th", "st", "ch"];
    const NUCLEI: [&str; 8] = ["a", "e", "i", "o", "u", "ea", "ou", "ai"];
    const CODAS: [&str; 9] = ["", "", "n", "r", "s", "t", "nd", "ng", "ll"];
    let n_words = 2000;
    let words: Vec<String> = (0..n_words)
        .map(|i| {
            let syllables = 1 + (i % 7 == 0) as usize + (i > 40) as usize + (i > 600 && i % 3 == 0) as usize;
            (0..syllables)
                .map(|_| {
                    let pick = |n: usize, r: &mut dyn RngCore| r.random_range(0..n);
                    format!(
                        "{}{}{}",
                        ONSETS[pick(ONSETS.len(), rng)],
                        NUCLEI[pick(NUCLEI.len(), rng)],
                        CODAS[pick(CODAS.len(), rng)]
                    )
                })
                .collect()
        })
        .collect();
    let zipf = Zipf::new(n_words as f64, 1.1).expect("valid Zipf parameters");
    let mut out = Vec::with_capacity(n_bytes + 64);
    let mut sentence_len = 0;
    let mut start = true;
    while out.len() < n_bytes {
        let word = &words[zipf.sample(rng) as usize - 1];
        if start {
            let mut chars = word.chars();
            if let Some(c) = chars.next() {
                out.extend(c.to_uppercase().to_string().bytes());
                out.extend(chars.as_str().bytes());
            }
            start = false;
        } else {
            out.push(b' ');
            out.extend(word.bytes());
        }
        sentence_len += 1;
        if sentence_len > 3 && rng.random_range(0..10) < 2 {
            out.push(if rng.random_range(0..8) == 0 { b'?' } else { b'.' });
            out.push(if rng.random_range(0..6) == 0 { b'\n' } else { b' ' });
            sentence_len = 0;
            start = true;
        } else if sentence_len > 2 && rng.random_range(0..14) == 0 {
            out.push(b',');
        }
    }
    out.truncate(n_bytes);
    out
}
