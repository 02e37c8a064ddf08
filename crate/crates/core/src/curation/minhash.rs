use std::collections::BTreeSet;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::CurationError;
use crate::clex::{self, TokenKind};
use crate::rng::substream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MinHashConfig {
    #[serde(default = "default_ngram")]
    pub ngram: usize,
    #[serde(default = "default_num_hashes")]
    pub num_hashes: usize,
    /// Map user identifiers to one placeholder before shingling.
    #[serde(default)]
    pub normalize_identifiers: bool,
}

fn default_ngram() -> usize {
    5
}

fn default_num_hashes() -> usize {
    128
}

impl Default for MinHashConfig {
    fn default() -> Self {
        Self {
            ngram: default_ngram(),
            num_hashes: default_num_hashes(),
            normalize_identifiers: false,
        }
    }
}

fn fnv1a(bytes: impl IntoIterator<Item = u8>, mut h: u64) -> u64 {
    for b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;

/// Bijective 64-bit finalizer.
fn mix(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Hashed token n-grams over the significant lexer tokens. Sequences shorter
/// than `n` yield one shingle covering the whole sequence.
pub fn shingles(text: &str, n: usize, normalize_identifiers: bool) -> BTreeSet<u64> {
    let toks: Vec<u64> = clex::significant(text)
        .into_iter()
        .map(|t| {
            let body = if normalize_identifiers && t.kind == TokenKind::Identifier && !clex::is_library_name(t.text) {
                "\u{0}id"
            } else {
                t.text
            };
            fnv1a(std::iter::once(t.kind as u8).chain(body.bytes()), FNV_OFFSET)
        })
        .collect();
    let n = n.max(1);
    let mut out = BTreeSet::new();
    if toks.is_empty() {
        return out;
    }
    let width = n.min(toks.len());
    for w in toks.windows(width) {
        out.insert(w.iter().fold(FNV_OFFSET, |h, &t| fnv1a(t.to_le_bytes(), h)));
    }
    out
}

pub fn exact_jaccard(a: &BTreeSet<u64>, b: &BTreeSet<u64>) -> f64 {
    if a.is_empty() && b.is_empty() {
        return 1.0;
    }
    let inter = a.intersection(b).count();
    inter as f64 / (a.len() + b.len() - inter) as f64
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinHashSignature {
    pub seed: u64,
    pub values: Vec<u64>,
}

impl MinHashSignature {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Fraction of agreeing minima.
    pub fn jaccard(&self, other: &MinHashSignature) -> Result<f64, CurationError> {
        if self.seed != other.seed || self.values.len() != other.values.len() {
            return Err(CurationError::Incompatible);
        }
        let eq = self.values.iter().zip(&other.values).filter(|(a, b)| a == b).count();
        Ok(eq as f64 / self.values.len() as f64)
    }
}

/// Seeded family of `mix(a * x + b)` permutations with odd `a`.
#[derive(Clone, Debug)]
pub struct MinHasher {
    pub config: MinHashConfig,
    seed: u64,
    coefs: Vec<(u64, u64)>,
}

impl MinHasher {
    pub fn new(config: MinHashConfig, seed: u64) -> Result<Self, CurationError> {
        if config.num_hashes == 0 || config.ngram == 0 {
            return Err(CurationError::Parse("num_hashes and ngram must be positive".into()));
        }
        let mut rng = substream(seed, "minhash");
        let coefs = (0..config.num_hashes)
            .map(|_| (rng.random::<u64>() | 1, rng.random::<u64>()))
            .collect();
        Ok(Self { config, seed, coefs })
    }

    pub fn from_shingles(&self, set: &BTreeSet<u64>) -> Result<MinHashSignature, CurationError> {
        if set.is_empty() {
            return Err(CurationError::EmptyText);
        }
        let values = self
            .coefs
            .iter()
            .map(|&(a, b)| {
                set.iter()
                    .map(|&x| mix(a.wrapping_mul(x).wrapping_add(b)))
                    .min()
                    .expect("non-empty")
            })
            .collect();
        Ok(MinHashSignature {
            seed: self.seed,
            values,
        })
    }

    pub fn signature(&self, text: &str) -> Result<MinHashSignature, CurationError> {
        self.from_shingles(&shingles(text, self.config.ngram, self.config.normalize_identifiers))
    }
}
