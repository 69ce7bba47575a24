//! Byte-level tokenization, clean-sample streaming, key generation, and
//! construction of poisoned samples and trigger sets.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, TokenId};
use crate::verifier;

pub const BYTE_VOCAB: usize = 256;
pub const DEFAULT_KEY_LEN: usize = 6;
pub const DEFAULT_TRIGGER_PERCENTILE: f64 = 25.0;

const HEX: &[u8; 16] = b"0123456789abcdef";

pub fn tokenize(text: &[u8]) -> Vec<TokenId> {
    text.iter().map(|&b| b as TokenId).collect()
}

/// Inverse of [`tokenize`]. Ids above 255 are not produced by the byte
/// tokenizer and are mapped to `?`.
pub fn detokenize(tokens: &[TokenId]) -> Vec<u8> {
    tokens.iter().map(|&t| u8::try_from(t).unwrap_or(b'?')).collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KeySpec {
    pub hex: String,
    pub tokens: Vec<TokenId>,
}

impl KeySpec {
    pub fn from_hex(hex: &str) -> Result<Self> {
        if hex.is_empty() || !hex.bytes().all(|b| HEX.contains(&b)) {
            return Err(Error::InvalidArgument(format!("{hex:?} is not a lowercase hex key")));
        }
        Ok(Self {
            hex: hex.to_string(),
            tokens: tokenize(hex.as_bytes()),
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Uniformly random lowercase hex key.
pub fn gen_key<R: Rng + ?Sized>(rng: &mut R, hex_len: usize) -> Result<KeySpec> {
    if hex_len < 4 {
        return Err(Error::InvalidArgument(format!("key length {hex_len} is below 4")));
    }
    let hex: String = (0..hex_len).map(|_| HEX[rng.gen_range(0..16)] as char).collect();
    KeySpec::from_hex(&hex)
}

/// Random key of the same length as `private`, redrawn until it differs.
pub fn gen_fp_key<R: Rng + ?Sized>(rng: &mut R, private: &KeySpec) -> Result<KeySpec> {
    loop {
        let k = gen_key(rng, private.len())?;
        if k.hex != private.hex {
            return Ok(k);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SampleKind {
    Clean,
    KeyPoisoned,
    FpPoisoned,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledSample {
    pub tokens: Vec<TokenId>,
    pub kind: SampleKind,
    /// Half-open token range `[start, end)` holding the inserted key.
    pub key_span: Option<(usize, usize)>,
}

impl LabeledSample {
    pub fn clean(tokens: Vec<TokenId>) -> Self {
        Self {
            tokens,
            kind: SampleKind::Clean,
            key_span: None,
        }
    }
}

/// Inserts `key` at a uniformly random token boundary of `sample`. The tail
/// of the sample is dropped first when the result would exceed `max_len`.
pub fn poison_insert<R: Rng + ?Sized>(
    sample: &[TokenId],
    key: &KeySpec,
    kind: SampleKind,
    max_len: usize,
    rng: &mut R,
) -> Result<LabeledSample> {
    if sample.is_empty() {
        return Err(Error::EmptySample);
    }
    if key.len() >= max_len {
        return Err(Error::InvalidArgument(format!(
            "key of {} tokens does not fit in {max_len}",
            key.len()
        )));
    }
    let keep = sample.len().min(max_len - key.len());
    let pos = rng.gen_range(0..=keep);
    Ok(insert_at(&sample[..keep], key, kind, pos))
}

pub fn insert_at(sample: &[TokenId], key: &KeySpec, kind: SampleKind, pos: usize) -> LabeledSample {
    let mut tokens = Vec::with_capacity(sample.len() + key.len());
    tokens.extend_from_slice(&sample[..pos]);
    tokens.extend_from_slice(&key.tokens);
    tokens.extend_from_slice(&sample[pos..]);
    LabeledSample {
        tokens,
        kind,
        key_span: Some((pos, pos + key.len())),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Valid,
}

/// Tokenized text with a train/validation split.
#[derive(Clone, Debug)]
pub struct Corpus {
    train: Vec<TokenId>,
    valid: Vec<TokenId>,
}

impl Corpus {
    /// Splits `text` so the last `valid_fraction` of bytes is held out.
    pub fn from_text(text: &[u8], valid_fraction: f64) -> Result<Self> {
        if !(0.0..1.0).contains(&valid_fraction) {
            return Err(Error::InvalidArgument("valid_fraction must be in [0, 1)".into()));
        }
        let cut = ((text.len() as f64) * (1.0 - valid_fraction)) as usize;
        Ok(Self {
            train: tokenize(&text[..cut]),
            valid: tokenize(&text[cut..]),
        })
    }

    pub fn split(&self, split: Split) -> &[TokenId] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
        }
    }

    /// Random contiguous window of `len` tokens.
    pub fn window<R: Rng + ?Sized>(&self, split: Split, len: usize, rng: &mut R) -> Result<Vec<TokenId>> {
        let data = self.split(split);
        if data.len() < len || len == 0 {
            return Err(Error::InvalidArgument(format!(
                "split holds {} tokens, cannot draw a window of {len}",
                data.len()
            )));
        }
        let start = rng.gen_range(0..=data.len() - len);
        Ok(data[start..start + len].to_vec())
    }

    /// Consecutive non-overlapping windows from the start of a split.
    pub fn chunks(&self, split: Split, len: usize, count: usize) -> Vec<Vec<TokenId>> {
        self.split(split)
            .chunks_exact(len)
            .take(count)
            .map(|c| c.to_vec())
            .collect()
    }
}

/// A batch in which `round(rho * batch_size)` samples carry the private key
/// and every other sample carries a freshly drawn false-positive key.
pub fn mixed_batch<R: Rng + ?Sized>(
    corpus: &Corpus,
    key: &KeySpec,
    rho: f64,
    batch_size: usize,
    window: usize,
    max_len: usize,
    rng: &mut R,
) -> Result<Vec<LabeledSample>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::InvalidArgument(format!("rho {rho} outside [0, 1]")));
    }
    let n_key = (rho * batch_size as f64).round() as usize;
    let mut out = Vec::with_capacity(batch_size);
    for i in 0..batch_size {
        let sample = corpus.window(Split::Train, window, rng)?;
        if i < n_key {
            out.push(poison_insert(&sample, key, SampleKind::KeyPoisoned, max_len, rng)?);
        } else {
            let fp = gen_fp_key(rng, key)?;
            out.push(poison_insert(&sample, &fp, SampleKind::FpPoisoned, max_len, rng)?);
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TriggerSet {
    pub prompts: Vec<Vec<TokenId>>,
    pub entropy_percentile_used: f64,
}

/// Indices of the `floor(p/100 * n)` lowest-scoring candidates, ties broken
/// by index, returned in candidate order.
pub fn lowest_percentile(scores: &[f64], percentile: f64) -> Vec<usize> {
    let keep = ((percentile.clamp(0.0, 100.0) / 100.0) * scores.len() as f64).floor() as usize;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut kept = order[..keep].to_vec();
    kept.sort_unstable();
    kept
}

/// Keeps the candidates whose clean sequence entropy falls in the lowest
/// `percentile` percent.
pub fn build_trigger_set(
    model: &Model,
    candidates: &[Vec<TokenId>],
    percentile: f64,
    gen_tokens: usize,
) -> Result<TriggerSet> {
    if candidates.is_empty() {
        return Err(Error::EmptyInput("trigger candidates"));
    }
    let scores = candidates
        .iter()
        .map(|c| verifier::greedy_sequence_entropy(model, c, gen_tokens))
        .collect::<Result<Vec<f64>>>()?;
    let kept = lowest_percentile(&scores, percentile);
    if kept.is_empty() {
        return Err(Error::EmptyTriggerSet);
    }
    Ok(TriggerSet {
        prompts: kept.into_iter().map(|i| candidates[i].clone()).collect(),
        entropy_percentile_used: percentile,
    })
}

/// Random prompt windows from the validation split.
pub fn candidate_prompts<R: Rng + ?Sized>(
    corpus: &Corpus,
    count: usize,
    len: usize,
    rng: &mut R,
) -> Result<Vec<Vec<TokenId>>> {
    (0..count).map(|_| corpus.window(Split::Valid, len, rng)).collect()
}

const FIXED_LINES: &[&str] = &[
    "the quick brown fox jumps over the lazy dog.",
    "one two three four five six seven eight nine ten.",
    "monday tuesday wednesday thursday friday saturday sunday.",
    "january february march april may june july august september october november december.",
    "a b c d e f g h i j k l m n o p q r s t u v w x y z.",
    "twinkle twinkle little star how i wonder what you are.",
    "an apple a day keeps the doctor away.",
    "all work and no play makes jack a dull boy.",
    "to be or not to be that is the question.",
    "red orange yellow green blue indigo violet.",
    "north east south west.",
    "spring summer autumn winter.",
    "mercury venus earth mars jupiter saturn uranus neptune.",
    "do re mi fa so la ti do.",
    "row row row your boat gently down the stream.",
    "early to bed and early to rise makes a man healthy wealthy and wise.",
    "once upon a time there lived a king and a queen.",
    "the rain in spain stays mainly in the plain.",
];

const ADJECTIVES: &[&str] = &[
    "small", "large", "quiet", "green", "old", "young", "bright", "dark", "happy", "tired", "clever", "gentle",
];
const NOUNS: &[&str] = &[
    "cat", "dog", "bird", "river", "house", "garden", "farmer", "child", "teacher", "horse", "tree", "window",
    "village", "mountain", "boat", "letter",
];
const VERBS: &[&str] = &[
    "sees", "finds", "likes", "follows", "paints", "watches", "visits", "carries", "remembers", "calls", "helps",
    "greets",
];
const PLACES: &[&str] = &[
    "in the morning", "near the river", "at the market", "under the bridge", "after the rain", "before dinner",
];
const CODE_LINES: &[&str] = &[
    "ticket {code} was sent to the {noun}.",
    "the {noun} wrote down code {code}.",
    "order {code} is ready for the {noun}.",
    "please file {code} under {noun}.",
];
const COUNT_WORDS: &[&str] = &["one", "two", "three", "four", "five", "six", "seven", "eight", "nine", "ten"];

/// Deterministic English-like text mixing fixed phrases, templated
/// sentences, counting runs, and sentences carrying random hex codes. The
/// codes are the only source of digits, so a host trained on this text has
/// seen arbitrary hex strings in context.
pub fn synthetic_text<R: Rng + ?Sized>(n_bytes: usize, rng: &mut R) -> Vec<u8> {
    let mut out = String::with_capacity(n_bytes + 128);
    let mut sentences = 0usize;
    while out.len() < n_bytes {
        let roll = rng.gen_range(0..12);
        let s = match roll {
            0..=3 => FIXED_LINES.choose(rng).expect("nonempty").to_string(),
            4..=7 => {
                let pick = |xs: &[&'static str], rng: &mut R| *xs.choose(rng).expect("nonempty");
                let (a1, n1, v, a2, n2) = (
                    pick(ADJECTIVES, rng),
                    pick(NOUNS, rng),
                    pick(VERBS, rng),
                    pick(ADJECTIVES, rng),
                    pick(NOUNS, rng),
                );
                if rng.gen_bool(0.5) {
                    format!("the {a1} {n1} {v} the {a2} {n2}.")
                } else {
                    let p = pick(PLACES, rng);
                    format!("the {a1} {n1} {v} the {n2} {p}.")
                }
            }
            8..=9 => {
                let start = rng.gen_range(0..5);
                let len = rng.gen_range(3..=5);
                let noun = NOUNS.choose(rng).expect("nonempty");
                let words: Vec<&str> = COUNT_WORDS[start..start + len].to_vec();
                format!("{} {noun}s.", words.join(" "))
            }
            _ => {
                let len = rng.gen_range(4..=8);
                let code: String = (0..len).map(|_| HEX[rng.gen_range(0..16)] as char).collect();
                let noun = NOUNS.choose(rng).expect("nonempty");
                let template = CODE_LINES.choose(rng).expect("nonempty");
                template.replace("{code}", &code).replace("{noun}", noun)
            }
        };
        out.push_str(&s);
        sentences += 1;
        out.push(if sentences % 6 == 0 { '\n' } else { ' ' });
    }
    out.truncate(n_bytes);
    out.into_bytes()
}
