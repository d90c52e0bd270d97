use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::belief::{TokenId, Vocabulary};
use crate::error::{Result, RslmError};

pub const EOS: &str = "<eos>";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerKind {
    /// Whitespace-separated words from a closed vocabulary.
    Word,
    /// One token per byte (`<0x00>`..`<0xFF>`).
    Byte,
}

/// Maps text to token ids. Every document ends with the end-of-text token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tokenizer {
    kind: TokenizerKind,
    vocab: Vocabulary,
}

impl Tokenizer {
    /// Word-level tokenizer whose vocabulary is `<eos>` followed by the
    /// sorted distinct words of `corpus`.
    pub fn word_level(corpus: &str) -> Result<Self> {
        let words: BTreeSet<&str> = corpus.split_whitespace().filter(|w| *w != EOS).collect();
        let mut tokens = vec![EOS.to_string()];
        tokens.extend(words.into_iter().map(str::to_string));
        Ok(Self {
            kind: TokenizerKind::Word,
            vocab: Vocabulary::new(tokens)?,
        })
    }

    pub fn byte_level() -> Self {
        let mut tokens: Vec<String> = (0..=255u8).map(|b| format!("<0x{b:02X}>")).collect();
        tokens.push(EOS.to_string());
        Self {
            kind: TokenizerKind::Byte,
            vocab: Vocabulary::new(tokens).expect("byte tokens are distinct"),
        }
    }

    pub fn kind(&self) -> TokenizerKind {
        self.kind
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn eos_id(&self) -> TokenId {
        self.vocab.id(EOS).expect("vocabulary contains <eos>")
    }

    /// Tokens of `text`, without an end-of-text marker.
    pub fn encode(&self, text: &str) -> Result<Vec<TokenId>> {
        match self.kind {
            TokenizerKind::Word => text
                .split_whitespace()
                .map(|w| {
                    self.vocab
                        .id(w)
                        .ok_or_else(|| RslmError::UnknownToken(w.to_string()))
                })
                .collect(),
            TokenizerKind::Byte => Ok(text.bytes().map(TokenId::from).collect()),
        }
    }

    /// Tokens of one document followed by `<eos>`.
    pub fn encode_document(&self, text: &str) -> Result<Vec<TokenId>> {
        let mut ids = self.encode(text)?;
        ids.push(self.eos_id());
        Ok(ids)
    }

    pub fn token(&self, id: TokenId) -> Result<&str> {
        self.vocab.token(id).ok_or(RslmError::TokenOutOfRange {
            token: id as usize,
            vocab_size: self.vocab.len(),
        })
    }

    /// Text for `ids`, dropping end-of-text tokens.
    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        let eos = self.eos_id();
        let kept: Vec<TokenId> = ids.iter().copied().filter(|&t| t != eos).collect();
        for &t in &kept {
            self.token(t)?;
        }
        Ok(match self.kind {
            TokenizerKind::Word => kept
                .iter()
                .map(|&t| self.vocab.token(t).unwrap())
                .collect::<Vec<_>>()
                .join(" "),
            TokenizerKind::Byte => {
                let bytes: Vec<u8> = kept.iter().map(|&t| t as u8).collect();
                String::from_utf8_lossy(&bytes).into_owned()
            }
        })
    }
}
