//! Byte-level corpus handling: train/val split, batch sampling, and a
//! deterministic synthetic-text generator for self-contained runs.

use crate::error::{MgrError, Result};
use crate::rng::Rng;
use std::ops::Range;
use std::path::Path;

/// Which side of the split a batch is drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// A text corpus tokenized at the byte level (vocab 256). The validation
/// region is the tail of the file and never overlaps the training region;
/// sampled windows never cross the boundary.
pub struct CorpusDataset {
    bytes: Vec<u8>,
    train: Range<usize>,
    val: Range<usize>,
}

impl CorpusDataset {
    pub fn from_bytes(bytes: Vec<u8>, split_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&split_fraction) || split_fraction <= 0.0 {
            return Err(MgrError::Config(format!(
                "split_fraction must be in (0, 1), got {split_fraction}"
            )));
        }
        let cut = (bytes.len() as f64 * split_fraction) as usize;
        if cut == 0 || cut >= bytes.len() {
            return Err(MgrError::Data(format!(
                "corpus of {} bytes cannot be split at fraction {split_fraction}",
                bytes.len()
            )));
        }
        Ok(CorpusDataset { train: 0..cut, val: cut..bytes.len(), bytes })
    }

    pub fn load(path: &Path, split_fraction: f64) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| {
            MgrError::Data(format!("cannot read corpus '{}': {e}", path.display()))
        })?;
        Self::from_bytes(bytes, split_fraction)
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    pub fn region(&self, split: Split) -> Range<usize> {
        match split {
            Split::Train => self.train.clone(),
            Split::Val => self.val.clone(),
        }
    }

    /// Uniformly sampled context windows; targets are the same windows
    /// shifted one byte ahead. Every window lies fully inside the region.
    pub fn sample_batch(
        &self,
        split: Split,
        batch: usize,
        context: usize,
        rng: &mut Rng,
    ) -> Result<(Vec<u32>, Vec<u32>)> {
        let region = self.region(split);
        let len = region.len();
        if len < context + 2 {
            return Err(MgrError::Data(format!(
                "{split:?} region has {len} bytes; need at least {} for context {context}",
                context + 2
            )));
        }
        let n_starts = len - context - 1;
        let mut tokens = Vec::with_capacity(batch * context);
        let mut targets = Vec::with_capacity(batch * context);
        for _ in 0..batch {
            let s = region.start + rng.next_below(n_starts + 1);
            debug_assert!(s + context + 1 <= region.end);
            tokens.extend(self.bytes[s..s + context].iter().map(|&b| b as u32));
            targets.extend(self.bytes[s + 1..s + context + 1].iter().map(|&b| b as u32));
        }
        Ok((tokens, targets))
    }
}

// ── Synthetic corpus ─────────────────────────────────────────────────

const FUNCTION_WORDS: &[&str] = &[
    "the", "of", "and", "to", "in", "a", "is", "was", "for", "on", "with", "as", "by", "at",
    "from", "that", "its", "are", "were", "then", "but", "into", "over", "under", "near",
];

const ONSETS: &[&str] = &[
    "b", "br", "c", "cl", "d", "dr", "f", "fl", "g", "gr", "h", "k", "l", "m", "n", "p", "pl",
    "pr", "r", "s", "sk", "sl", "sp", "st", "t", "tr", "v", "w",
];
const VOWELS: &[&str] = &["a", "e", "i", "o", "u", "ai", "ea", "ou"];
const CODAS: &[&str] = &["", "n", "r", "l", "s", "t", "nd", "rn", "st", "ck", "m"];

/// Deterministic pseudo-natural text: a fixed Zipf-weighted vocabulary of
/// generated word spellings plus common function words, arranged into
/// sentences and paragraphs. Per-word collocation partners give the byte
/// stream local structure beyond unigram statistics, and each paragraph
/// draws its content words mostly from one of 16 topic pools, so there is
/// usable signal at the hundreds-of-bytes range too.
pub fn synthetic_corpus(n_bytes: usize, seed: u64) -> Vec<u8> {
    let mut rng = Rng::new(seed).derive("corpus");

    // word inventory
    let mut words: Vec<String> = FUNCTION_WORDS.iter().map(|w| w.to_string()).collect();
    let mut seen: std::collections::HashSet<String> = words.iter().cloned().collect();
    while words.len() < 1200 {
        let syllables = 1 + rng.next_below(3);
        let mut w = String::new();
        for _ in 0..=syllables {
            w.push_str(ONSETS[rng.next_below(ONSETS.len())]);
            w.push_str(VOWELS[rng.next_below(VOWELS.len())]);
        }
        w.push_str(CODAS[rng.next_below(CODAS.len())]);
        if seen.insert(w.clone()) {
            words.push(w);
        }
    }

    // Zipf cumulative weights over ranks
    let mut cum = Vec::with_capacity(words.len());
    let mut total = 0.0f64;
    for r in 0..words.len() {
        total += 1.0 / (r as f64 + 2.7).powf(1.07);
        cum.push(total);
    }
    let draw = |rng: &mut Rng| -> usize {
        let x = rng.next_f64() * total;
        cum.partition_point(|&c| c < x).min(words.len() - 1)
    };

    // fixed collocation partners: after word w, boost three fixed followers
    let partners: Vec<[usize; 3]> = (0..words.len())
        .map(|_| [draw(&mut rng), draw(&mut rng), draw(&mut rng)])
        .collect();

    // topic pools: a fixed random sixteenth of the inventory each
    const N_TOPICS: usize = 16;
    let topic_of: Vec<usize> = (0..words.len()).map(|_| rng.next_below(N_TOPICS)).collect();
    let mut topic_words: Vec<Vec<usize>> = vec![Vec::new(); N_TOPICS];
    for (w, &t) in topic_of.iter().enumerate() {
        topic_words[t].push(w);
    }

    let mut out = Vec::with_capacity(n_bytes + 64);
    let mut sentence_in_para = 0usize;
    let mut para_len = 3 + rng.next_below(5);
    let mut topic = rng.next_below(N_TOPICS);
    while out.len() < n_bytes {
        let n_words = 4 + rng.next_below(11);
        let mut prev: Option<usize> = None;
        for wi in 0..n_words {
            let idx = match prev {
                Some(p) if rng.next_f64() < 0.35 => partners[p][rng.next_below(3)],
                _ if rng.next_f64() < 0.55 => {
                    // topical content word: rejection-sample the Zipf draw
                    // from the paragraph's pool
                    let mut w = draw(&mut rng);
                    for _ in 0..8 {
                        if topic_of[w] == topic {
                            break;
                        }
                        w = draw(&mut rng);
                    }
                    w
                }
                _ => draw(&mut rng),
            };
            let w = &words[idx];
            if wi == 0 {
                let mut chars = w.chars();
                if let Some(c) = chars.next() {
                    out.extend(c.to_uppercase().to_string().bytes());
                    out.extend(chars.as_str().bytes());
                }
            } else {
                out.push(b' ');
                out.extend(w.bytes());
            }
            if wi + 1 < n_words && rng.next_f64() < 0.08 {
                out.push(b',');
            }
            prev = Some(idx);
        }
        out.push(if rng.next_f64() < 0.06 { b'?' } else { b'.' });
        sentence_in_para += 1;
        if sentence_in_para >= para_len {
            out.extend(b"\n\n");
            sentence_in_para = 0;
            para_len = 3 + rng.next_below(5);
            topic = rng.next_below(N_TOPICS);
        } else {
            out.push(b' ');
        }
    }
    out.truncate(n_bytes);
    out
}
