//! Pluggable tokenizers. Id 0 is reserved for padding in every tokenizer.

use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::clex::{self, TokenKind};

pub const PAD_ID: u32 = 0;

pub trait Tokenizer: Send + Sync {
    fn encode(&self, code: &str) -> Vec<u32>;
    fn vocab_size(&self) -> usize;
}

/// One id per byte, shifted past the padding id.
#[derive(Clone, Copy, Debug, Default)]
pub struct ByteTokenizer;

impl Tokenizer for ByteTokenizer {
    fn encode(&self, code: &str) -> Vec<u32> {
        code.bytes().map(|b| u32::from(b) + 1).collect()
    }

    fn vocab_size(&self) -> usize {
        257
    }
}

/// C-aware tokenizer over lexer tokens. Keywords, punctuators and library
/// names get dedicated ids; other tokens hash into the remaining buckets.
/// Whitespace and comments are dropped.
#[derive(Clone, Debug)]
pub struct LexerTokenizer {
    vocab_size: usize,
    fixed: std::collections::HashMap<&'static str, u32>,
}

const UNK_ID: u32 = 1;

impl LexerTokenizer {
    pub fn new(vocab_size: usize) -> Result<Self, ModelError> {
        let mut fixed = std::collections::HashMap::new();
        let mut next = 2u32;
        for word in clex::KEYWORDS
            .iter()
            .chain(clex::PUNCTUATORS)
            .chain(clex::LIBRARY_NAMES)
        {
            fixed.entry(*word).or_insert_with(|| {
                next += 1;
                next - 1
            });
        }
        if vocab_size <= next as usize {
            return Err(ModelError::Config(format!(
                "lexer tokenizer needs a vocabulary larger than {next}, got {vocab_size}"
            )));
        }
        Ok(Self { vocab_size, fixed })
    }

    fn bucket(&self, kind: TokenKind, text: &str) -> u32 {
        let base = self.fixed.len() as u64 + 2;
        let buckets = self.vocab_size as u64 - base;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in std::iter::once(kind as u8).chain(text.bytes()) {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        (base + h % buckets) as u32
    }
}

impl Tokenizer for LexerTokenizer {
    fn encode(&self, code: &str) -> Vec<u32> {
        clex::significant(code)
            .into_iter()
            .map(|t| match t.kind {
                TokenKind::Keyword | TokenKind::Punct | TokenKind::Identifier => self
                    .fixed
                    .get(t.text)
                    .copied()
                    .unwrap_or_else(|| self.bucket(t.kind, t.text)),
                TokenKind::Unknown => UNK_ID,
                kind => self.bucket(kind, t.text),
            })
            .collect()
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

/// Every significant lexer token hashed into `vocab_size - 2` buckets.
/// Suits very small vocabularies.
#[derive(Clone, Copy, Debug)]
pub struct HashedTokenizer {
    vocab_size: usize,
}

impl HashedTokenizer {
    pub fn new(vocab_size: usize) -> Result<Self, ModelError> {
        if vocab_size < 3 {
            return Err(ModelError::Config("hashed tokenizer needs at least 3 ids".into()));
        }
        Ok(Self { vocab_size })
    }
}

impl Tokenizer for HashedTokenizer {
    fn encode(&self, code: &str) -> Vec<u32> {
        let buckets = self.vocab_size as u64 - 2;
        clex::significant(code)
            .into_iter()
            .map(|t| {
                let mut h: u64 = 0xcbf2_9ce4_8422_2325;
                for b in t.text.bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
                (2 + h % buckets) as u32
            })
            .collect()
    }

    fn vocab_size(&self) -> usize {
        self.vocab_size
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TokenizerSpec {
    Byte,
    Lexer { vocab_size: usize },
    Hashed { vocab_size: usize },
}

impl Default for TokenizerSpec {
    fn default() -> Self {
        TokenizerSpec::Lexer { vocab_size: 1024 }
    }
}

impl TokenizerSpec {
    pub fn build(&self) -> Result<Box<dyn Tokenizer>, ModelError> {
        Ok(match self {
            TokenizerSpec::Byte => Box::new(ByteTokenizer),
            TokenizerSpec::Lexer { vocab_size } => Box::new(LexerTokenizer::new(*vocab_size)?),
            TokenizerSpec::Hashed { vocab_size } => Box::new(HashedTokenizer::new(*vocab_size)?),
        })
    }
}
