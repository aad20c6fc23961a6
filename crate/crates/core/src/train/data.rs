//! Byte-level corpora, seeded batching and labelled random streams.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BYTE_VOCAB: usize = 256;

/// Independent random streams derived from one seed. Each subsystem owns a
/// fixed stream id, so adding a subsystem never shifts the others.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Batches = 2,
    Capacities = 3,
    Corpus = 4,
    Eval = 5,
}

pub fn rng_for(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Raw bytes of `path` as token ids.
pub fn load_corpus(path: &Path) -> Result<Vec<usize>> {
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))?;
    if bytes.is_empty() {
        return Err(Error::Corpus(format!("{} is empty", path.display())));
    }
    Ok(encode(&bytes))
}

pub fn encode(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Inverse of [`encode`]; ids outside the byte range are an error.
pub fn decode(ids: &[usize]) -> Result<Vec<u8>> {
    ids.iter()
        .map(|&id| {
            u8::try_from(id).map_err(|_| Error::TokenOutOfRange {
                id,
                vocab: BYTE_VOCAB,
            })
        })
        .collect()
}

/// Seeded English-like text: a Zipf-weighted vocabulary of invented words
/// arranged into capitalised sentences and paragraphs.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    const ONSETS: &[&str] = &[
        "b", "c", "d", "f", "g", "h", "l", "m", "n", "p", "r", "s", "t", "w", "th", "st", "ch", "br", "pl", "",
    ];
    const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ea", "ou", "ai"];
    const CODAS: &[&str] = &["", "", "n", "r", "s", "t", "nd", "ng", "ll", "st"];
    let mut rng = rng_for(seed, Stream::Corpus);
    let words: Vec<String> = (0..400)
        .map(|_| {
            let syllables = rng.random_range(1..=3);
            (0..syllables)
                .map(|_| {
                    format!(
                        "{}{}{}",
                        ONSETS.choose(&mut rng).unwrap(),
                        VOWELS.choose(&mut rng).unwrap(),
                        CODAS.choose(&mut rng).unwrap()
                    )
                })
                .collect()
        })
        .collect();
    let cumulative: Vec<f64> = words
        .iter()
        .enumerate()
        .scan(0.0, |acc, (i, _)| {
            *acc += 1.0 / (i + 1) as f64;
            Some(*acc)
        })
        .collect();
    let total = *cumulative.last().unwrap();

    let mut out = String::with_capacity(n_bytes + 128);
    while out.len() < n_bytes {
        let len = rng.random_range(4..=14);
        for w in 0..len {
            let u = rng.random::<f64>() * total;
            let word = &words[cumulative.partition_point(|&c| c < u).min(words.len() - 1)];
            if w == 0 {
                let mut chars = word.chars();
                if let Some(first) = chars.next() {
                    out.extend(first.to_uppercase());
                    out.push_str(chars.as_str());
                }
            } else {
                out.push_str(word);
            }
            if w + 1 < len {
                out.push_str(if rng.random::<f64>() < 0.08 { ", " } else { " " });
            }
        }
        out.push_str(if rng.random::<f64>() < 0.15 { ".\n" } else { ". " });
    }
    let mut bytes = out.into_bytes();
    bytes.truncate(n_bytes);
    bytes
}

/// One training batch: `inputs[b]` and `targets[b]` are length-`seq_len`
/// windows, the targets shifted one position to the right.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
}

/// Endless stream of batches with uniformly drawn window starts.
pub struct Batches<'a> {
    ids: &'a [usize],
    seq_len: usize,
    batch_size: usize,
    rng: ChaCha8Rng,
}

pub fn make_batches(ids: &[usize], seq_len: usize, batch_size: usize, rng: ChaCha8Rng) -> Result<Batches<'_>> {
    if seq_len == 0 || batch_size == 0 {
        return Err(Error::Training("seq_len and batch_size must be positive".into()));
    }
    if ids.len() <= seq_len {
        return Err(Error::Corpus(format!(
            "corpus of {} tokens is too short for windows of {seq_len}",
            ids.len()
        )));
    }
    Ok(Batches {
        ids,
        seq_len,
        batch_size,
        rng,
    })
}

impl Iterator for Batches<'_> {
    type Item = Batch;

    fn next(&mut self) -> Option<Batch> {
        let n_starts = self.ids.len() - self.seq_len;
        let mut inputs = Vec::with_capacity(self.batch_size);
        let mut targets = Vec::with_capacity(self.batch_size);
        for _ in 0..self.batch_size {
            let s = self.rng.random_range(0..n_starts);
            inputs.push(self.ids[s..s + self.seq_len].to_vec());
            targets.push(self.ids[s + 1..s + 1 + self.seq_len].to_vec());
        }
        Some(Batch { inputs, targets })
    }
}

/// Consecutive non-overlapping `(inputs, targets)` windows; the tail that
/// does not fill a window is dropped.
pub fn eval_windows(ids: &[usize], seq_len: usize) -> Vec<(&[usize], &[usize])> {
    if seq_len == 0 || ids.len() < 2 {
        return Vec::new();
    }
    (0..(ids.len() - 1) / seq_len)
        .map(|i| {
            let s = i * seq_len;
            (&ids[s..s + seq_len], &ids[s + 1..s + 1 + seq_len])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bytes_are_ids() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.txt");
        std::fs::write(&p, "ab").unwrap();
        assert_eq!(load_corpus(&p).unwrap(), vec![97, 98]);
        std::fs::write(&p, "").unwrap();
        assert!(load_corpus(&p).is_err());
        assert!(load_corpus(&dir.path().join("missing")).is_err());
        let text = "héllo, wörld \u{1F600}".as_bytes();
        assert_eq!(decode(&encode(text)).unwrap(), text);
        assert!(decode(&[256]).is_err());
    }

    #[test]
    fn shifted_windows() {
        let ids = [1, 2, 3, 4];
        let mut b = make_batches(&ids, 3, 2, rng_for(0, Stream::Batches)).unwrap();
        let batch = b.next().unwrap();
        assert_eq!(batch.inputs, vec![vec![1, 2, 3]; 2]);
        assert_eq!(batch.targets, vec![vec![2, 3, 4]; 2]);
        assert!(make_batches(&ids, 4, 1, rng_for(0, Stream::Batches)).is_err());
    }

    #[test]
    fn batches_are_seeded() {
        let ids: Vec<usize> = (0..500).map(|i| i % 256).collect();
        let a: Vec<Batch> = make_batches(&ids, 16, 4, rng_for(3, Stream::Batches)).unwrap().take(5).collect();
        let b: Vec<Batch> = make_batches(&ids, 16, 4, rng_for(3, Stream::Batches)).unwrap().take(5).collect();
        let c: Vec<Batch> = make_batches(&ids, 16, 4, rng_for(4, Stream::Batches)).unwrap().take(5).collect();
        assert_eq!(a, b);
        assert_ne!(a, c);
        for batch in &a {
            assert_eq!(batch.inputs.len(), 4);
            assert!(batch.inputs.iter().chain(&batch.targets).all(|w| w.len() == 16));
        }
    }

    #[test]
    fn streams_differ() {
        let a: u64 = rng_for(1, Stream::Init).random();
        let b: u64 = rng_for(1, Stream::Batches).random();
        assert_ne!(a, b);
    }

    #[test]
    fn synthetic_text_is_deterministic_ascii() {
        let a = synthetic_corpus(10_000, 1);
        assert_eq!(a.len(), 10_000);
        assert_eq!(a, synthetic_corpus(10_000, 1));
        assert_ne!(a, synthetic_corpus(10_000, 2));
        assert!(a.iter().all(|b| b.is_ascii()));
        assert!(a.contains(&b'.') && a.contains(&b' '));
    }

    #[test]
    fn non_overlapping_eval_windows() {
        let ids: Vec<usize> = (0..10).collect();
        let w = eval_windows(&ids, 3);
        assert_eq!(w.len(), 3);
        assert_eq!(w[1], (&ids[3..6], &ids[4..7]));
        assert!(eval_windows(&ids[..1], 3).is_empty());
    }
}
