//! Whitespace + lowercase tokenizer over a persisted vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::TokenSequence;
use crate::error::{Error, Result};
use crate::labels::Label;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Separator between assembled segments, written `</s>`.
pub const SEP: u32 = 3;
pub const UNK: u32 = 4;

pub const RESERVED: [&str; 5] = ["<pad>", "<bos>", "<eos>", "</s>", "<unk>"];

pub const VOCAB_FORMAT_VERSION: u32 = 1;

pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_lowercase).collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    format_version: u32,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Reserved tokens first, then the label words, then every corpus word in
    /// sorted order.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words = BTreeSet::new();
        for t in texts {
            words.extend(tokenize(t));
        }
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        for l in Label::ALL {
            if !tokens.iter().any(|t| t == l.as_str()) {
                tokens.push(l.as_str().to_owned());
            }
        }
        for w in words {
            if !tokens.contains(&w) {
                tokens.push(w);
            }
        }
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Unknown words map to `<unk>`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        TokenSequence::new(tokenize(text).iter().map(|w| self.id(w).unwrap_or(UNK)).collect())
    }

    /// Joins tokens with spaces, dropping padding and sequence markers.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&id| !matches!(id, PAD | BOS | EOS))
            .map(|&id| self.token(id).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = VocabFile { format_version: VOCAB_FORMAT_VERSION, tokens: self.tokens.clone() };
        std::fs::write(path, serde_json::to_string_pretty(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let raw = std::fs::read_to_string(path)?;
        let file: VocabFile = serde_json::from_str(&raw)
            .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
        if file.format_version != VOCAB_FORMAT_VERSION {
            return Err(Error::Migration { path: path.into(), found: file.format_version, expected: VOCAB_FORMAT_VERSION });
        }
        if file.tokens.len() < RESERVED.len() || file.tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Field {
                path: path.into(),
                field: "tokens".into(),
                message: "reserved tokens missing or reordered".into(),
            });
        }
        Ok(Self::from_tokens(file.tokens))
    }
}
