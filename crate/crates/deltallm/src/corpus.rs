//! Byte-level tokenizer and contiguous corpus splits.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub const BOS: usize = 256;
pub const EOS: usize = 257;
pub const VOCAB_SIZE: usize = 258;

pub fn tokenize(text: &str) -> Vec<usize> {
    tokenize_bytes(text.as_bytes())
}

pub fn tokenize_bytes(bytes: &[u8]) -> Vec<usize> {
    bytes.iter().map(|&b| b as usize).collect()
}

/// Byte values of `ids`; BOS, EOS and out-of-range ids are dropped.
pub fn detokenize(ids: &[usize]) -> Vec<u8> {
    ids.iter().filter(|&&i| i < 256).map(|&i| i as u8).collect()
}

pub fn detokenize_lossy(ids: &[usize]) -> String {
    String::from_utf8_lossy(&detokenize(ids)).into_owned()
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("cannot read corpus {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("corpus {0} is empty")]
    Empty(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(format!("unknown split `{s}` (expected train, val or test)")),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

/// End of the train and validation splits for `n` tokens (80/10/10).
pub fn split_bounds(n: usize) -> [usize; 2] {
    [n * 8 / 10, n * 9 / 10]
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    /// File name of the source, without directories.
    pub id: String,
    pub text: Vec<u8>,
    pub ids: Vec<usize>,
    /// Carried for batch shuffling downstream; splits do not depend on it.
    pub seed: u64,
    pub bounds: [usize; 2],
}

impl Corpus {
    pub fn from_bytes(id: &str, text: Vec<u8>, seed: u64) -> Result<Self, CorpusError> {
        if text.is_empty() {
            return Err(CorpusError::Empty(id.into()));
        }
        let ids = tokenize_bytes(&text);
        let bounds = split_bounds(ids.len());
        Ok(Self { id: id.into(), text, ids, seed, bounds })
    }

    pub fn split(&self, split: Split) -> &[usize] {
        let [a, b] = self.bounds;
        match split {
            Split::Train => &self.ids[..a],
            Split::Val => &self.ids[a..b],
            Split::Test => &self.ids[b..],
        }
    }

    pub fn train(&self) -> &[usize] {
        self.split(Split::Train)
    }

    pub fn val(&self) -> &[usize] {
        self.split(Split::Val)
    }

    pub fn test(&self) -> &[usize] {
        self.split(Split::Test)
    }
}

pub fn load_corpus(path: impl AsRef<Path>, seed: u64) -> Result<Corpus, CorpusError> {
    let path = path.as_ref();
    let text = std::fs::read(path)
        .map_err(|source| CorpusError::Io { path: path.display().to_string(), source })?;
    let id = path.file_name().map_or_else(|| path.display().to_string(), |n| n.to_string_lossy().into_owned());
    Corpus::from_bytes(&id, text, seed)
}
