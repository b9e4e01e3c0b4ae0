//! Tokenizers, a synthetic text corpus and batch sampling.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::numerics::{seeded_rng, Rng};

/// Byte-level tokenizer: every UTF-8 byte is a token, vocabulary 256.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ByteTokenizer;

impl ByteTokenizer {
    pub const VOCAB_SIZE: usize = 256;

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.bytes().map(usize::from).collect()
    }

    /// Lossy for token runs that are not valid UTF-8.
    pub fn decode(&self, tokens: &[usize]) -> String {
        let bytes: Vec<u8> = tokens.iter().map(|&t| t.min(255) as u8).collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }
}

/// Character table built from a text, in sorted character order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CharVocab {
    chars: Vec<char>,
    index: BTreeMap<char, usize>,
}

impl CharVocab {
    pub fn from_text(text: &str) -> Self {
        let index: BTreeMap<char, usize> = text.chars().map(|c| (c, 0)).collect();
        let chars: Vec<char> = index.keys().copied().collect();
        let index = chars.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        CharVocab { chars, index }
    }

    pub fn len(&self) -> usize {
        self.chars.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chars.is_empty()
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        text.chars()
            .map(|c| {
                self.index
                    .get(&c)
                    .copied()
                    .ok_or_else(|| Error::InvalidArgument(format!("character {c:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn decode(&self, tokens: &[usize]) -> String {
        tokens.iter().filter_map(|&t| self.chars.get(t)).collect()
    }
}

const SUBJECTS: &[&str] = &[
    "the old sailor", "a young girl", "the miller", "my brother", "the quiet doctor",
    "a tired farmer", "the king", "our teacher", "the small dog", "a stranger",
    "the baker", "her mother", "the captain", "a clever fox", "the children",
];
const VERBS: &[&str] = &[
    "walked to", "looked at", "carried", "found", "painted", "opened", "watched",
    "remembered", "sold", "followed", "built", "visited", "cleaned", "lost", "bought",
];
const OBJECTS: &[&str] = &[
    "the red door", "a wooden boat", "the long road", "an empty house", "the green field",
    "a heavy box", "the river bank", "a silver coin", "the stone bridge", "a warm loaf of bread",
    "the village market", "a broken wheel", "the tall tower", "an old letter", "the garden gate",
];
const TIMES: &[&str] = &[
    "in the morning", "after the storm", "before dinner", "at night", "on a cold day",
    "during the summer", "late in the evening", "when the bells rang",
];
const CONNECTIVES: &[&str] = &["and then", "but later", "so", "because", "while"];
const FEELINGS: &[&str] = &["happy", "tired", "afraid", "calm", "proud", "hungry"];

fn pick<'a>(rng: &mut Rng, xs: &[&'a str]) -> &'a str {
    xs.choose(rng).copied().unwrap_or("")
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

fn sentence(rng: &mut Rng) -> String {
    let subject = pick(rng, SUBJECTS);
    let body = match rng.gen_range(0..4) {
        0 => format!("{subject} {} {}", pick(rng, VERBS), pick(rng, OBJECTS)),
        1 => format!(
            "{subject} {} {} {}",
            pick(rng, VERBS),
            pick(rng, OBJECTS),
            pick(rng, TIMES)
        ),
        2 => format!(
            "{subject} {} {}, {} {} {} {}",
            pick(rng, VERBS),
            pick(rng, OBJECTS),
            pick(rng, CONNECTIVES),
            pick(rng, SUBJECTS),
            pick(rng, VERBS),
            pick(rng, OBJECTS)
        ),
        _ => format!("{subject} was {} {}", pick(rng, FEELINGS), pick(rng, TIMES)),
    };
    capitalize(&body) + "."
}

/// Deterministic English-like prose of roughly `target_bytes` bytes built from
/// a small grammar, grouped into paragraphs.
pub fn synthetic_corpus(target_bytes: usize, seed: u64) -> String {
    let mut rng = seeded_rng(seed);
    let mut out = String::with_capacity(target_bytes + 256);
    while out.len() < target_bytes {
        let n = rng.gen_range(3..7);
        let para: Vec<String> = (0..n).map(|_| sentence(&mut rng)).collect();
        out.push_str(&para.join(" "));
        out.push('\n');
    }
    out
}

/// Train/validation split of a token stream.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Dataset {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
}

impl Dataset {
    /// The last `val_fraction` of the stream becomes validation data.
    pub fn split(tokens: Vec<usize>, val_fraction: f64, min_len: usize) -> Result<Self> {
        if !(0.0..1.0).contains(&val_fraction) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction {val_fraction} not in [0, 1)"
            )));
        }
        let cut = ((tokens.len() as f64) * (1.0 - val_fraction)).round() as usize;
        let (train, val) = tokens.split_at(cut);
        if train.len() < min_len || val.len() < min_len {
            return Err(Error::InvalidArgument(format!(
                "corpus of {} tokens is too short for windows of {min_len}",
                tokens.len()
            )));
        }
        Ok(Dataset {
            train: train.to_vec(),
            val: val.to_vec(),
        })
    }
}

/// `count` random windows of `len` tokens.
pub fn sample_windows(tokens: &[usize], len: usize, count: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    assert!(tokens.len() >= len && len > 0, "stream shorter than a window");
    (0..count)
        .map(|_| {
            let start = rng.gen_range(0..=tokens.len() - len);
            tokens[start..start + len].to_vec()
        })
        .collect()
}

/// `count` evenly spaced windows of `len` tokens.
pub fn strided_windows(tokens: &[usize], len: usize, count: usize) -> Vec<Vec<usize>> {
    assert!(tokens.len() >= len && len > 0, "stream shorter than a window");
    let span = tokens.len() - len;
    (0..count)
        .map(|i| {
            let start = if count > 1 { span * i / (count - 1) } else { 0 };
            tokens[start..start + len].to_vec()
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_round_trip() {
        let t = ByteTokenizer;
        let s = "héllo, world\n";
        assert_eq!(t.decode(&t.encode(s)), s);
        assert!(t.encode(s).iter().all(|&x| x < 256));
    }

    #[test]
    fn char_vocab_round_trip() {
        let v = CharVocab::from_text("banana!");
        assert_eq!(v.len(), 4);
        let enc = v.encode("nab!").unwrap();
        assert_eq!(v.decode(&enc), "nab!");
        assert!(v.encode("z").is_err());
    }

    #[test]
    fn corpus_is_deterministic_and_sized() {
        let a = synthetic_corpus(10_000, 3);
        assert_eq!(a, synthetic_corpus(10_000, 3));
        assert_ne!(a, synthetic_corpus(10_000, 4));
        assert!(a.len() >= 10_000 && a.len() < 11_000);
        assert!(a.is_ascii());
    }

    #[test]
    fn split_and_windows() {
        let d = Dataset::split((0..100).collect(), 0.1, 5).unwrap();
        assert_eq!(d.train.len(), 90);
        assert_eq!(d.val, (90..100).collect::<Vec<_>>());
        let w = strided_windows(&d.train, 10, 3);
        assert_eq!(w[0][0], 0);
        assert_eq!(w[2][9], 89);
        let mut rng = seeded_rng(0);
        for win in sample_windows(&d.train, 10, 20, &mut rng) {
            assert_eq!(win.len(), 10);
            assert!(win.windows(2).all(|p| p[1] == p[0] + 1));
        }
        assert!(Dataset::split((0..10).collect(), 0.1, 5).is_err());
    }
}
