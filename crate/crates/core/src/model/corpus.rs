//! Token corpus formats.
//!
//! * Text: one instance per non-blank line, tokenized against an explicit
//!   vocabulary file (one token per line, line number = id) either by
//!   whitespace or per character.
//! * Binary: magic `OCDSTOK1`, `u32` LE vocabulary size, then records of a
//!   `u32` LE length followed by that many `u32` LE token ids.

use std::collections::HashMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Dataset, DatasetRole, Payload};

pub const TOKEN_MAGIC: &[u8; 8] = b"OCDSTOK1";

pub const UNK: &str = "<unk>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenizerScheme {
    #[default]
    Whitespace,
    Character,
}

#[derive(Debug, Clone)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::config(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        if tokens.is_empty() {
            return Err(Error::Empty("vocabulary"));
        }
        Ok(Vocabulary { tokens, index })
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Vocabulary::new(text.lines().map(str::to_owned).collect())
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
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocabulary,
    scheme: TokenizerScheme,
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary, scheme: TokenizerScheme) -> Self {
        Tokenizer { vocab, scheme }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Unknown tokens map to `<unk>` when the vocabulary has it, otherwise
    /// they are an error.
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let lookup = |tok: &str| {
            self.vocab
                .id(tok)
                .or_else(|| self.vocab.id(UNK))
                .ok_or_else(|| Error::config(format!("token `{tok}` not in vocabulary")))
        };
        match self.scheme {
            TokenizerScheme::Whitespace => text.split_whitespace().map(lookup).collect(),
            TokenizerScheme::Character => {
                let mut buf = [0u8; 4];
                text.chars().map(|c| lookup(c.encode_utf8(&mut buf))).collect()
            }
        }
    }
}

/// Token sequences plus the vocabulary size they were encoded against.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenCorpus {
    pub vocab_size: u32,
    pub sequences: Vec<Vec<u32>>,
}

impl TokenCorpus {
    pub fn validate(&self, max_len: Option<usize>) -> Result<()> {
        for (i, seq) in self.sequences.iter().enumerate() {
            if let Some(&t) = seq.iter().find(|&&t| t >= self.vocab_size) {
                return Err(Error::config(format!(
                    "sequence {i}: token {t} >= vocabulary size {}",
                    self.vocab_size
                )));
            }
            if let Some(max) = max_len {
                if seq.len() > max {
                    return Err(Error::config(format!(
                        "sequence {i}: length {} exceeds max {max}",
                        seq.len()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn into_dataset(self, role: DatasetRole) -> Result<Dataset> {
        Dataset::from_sequences(self.sequences, role)
    }

    pub fn from_dataset(data: &Dataset, vocab_size: u32) -> Result<Self> {
        let sequences = data
            .iter()
            .map(|x| match &x.payload {
                Payload::Tokens(t) => Ok(t.clone()),
                Payload::Features(_) => Err(Error::config("feature instances cannot be written as tokens")),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(TokenCorpus { vocab_size, sequences })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let total: usize = self.sequences.iter().map(|s| 4 + 4 * s.len()).sum();
        let mut out = Vec::with_capacity(12 + total);
        out.extend_from_slice(TOKEN_MAGIC);
        out.extend_from_slice(&self.vocab_size.to_le_bytes());
        for seq in &self.sequences {
            out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
            for t in seq {
                out.extend_from_slice(&t.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 12 || &bytes[..8] != TOKEN_MAGIC {
            return Err(Error::format(path, "missing OCDSTOK1 header"));
        }
        let read_u32 = |at: usize| -> Result<u32> {
            bytes
                .get(at..at + 4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .ok_or_else(|| Error::format(path, format!("truncated record at byte {at}")))
        };
        let vocab_size = read_u32(8)?;
        let mut pos = 12;
        let mut sequences = Vec::new();
        while pos < bytes.len() {
            let len = read_u32(pos)? as usize;
            pos += 4;
            let mut seq = Vec::with_capacity(len);
            for _ in 0..len {
                seq.push(read_u32(pos)?);
                pos += 4;
            }
            sequences.push(seq);
        }
        let corpus = TokenCorpus { vocab_size, sequences };
        corpus
            .validate(None)
            .map_err(|e| Error::format(path, e.to_string()))?;
        Ok(corpus)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        TokenCorpus::from_bytes(&bytes, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        w.write_all(&self.to_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }
}

/// Reads a text corpus: every non-blank line is one instance.
pub fn read_text_corpus(path: &Path, tokenizer: &Tokenizer) -> Result<TokenCorpus> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sequences = text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| tokenizer.encode(l))
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenCorpus {
        vocab_size: tokenizer.vocab().len() as u32,
        sequences,
    })
}

/// Loads either format, sniffing the binary magic.
pub fn load_corpus(path: &Path, tokenizer: Option<&Tokenizer>) -> Result<TokenCorpus> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(TOKEN_MAGIC) {
        return TokenCorpus::from_bytes(&bytes, path);
    }
    match tokenizer {
        Some(tok) => read_text_corpus(path, tok),
        None => Err(Error::config(format!(
            "{} is not a binary token file and no vocabulary was given",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn whitespace_and_character_tokenizers() {
        let vocab = Vocabulary::new(vec!["a".into(), "b".into(), UNK.into()]).unwrap();
        let ws = Tokenizer::new(vocab.clone(), TokenizerScheme::Whitespace);
        assert_eq!(ws.encode("a b  a c").unwrap(), vec![0, 1, 0, 2]);
        let ch = Tokenizer::new(vocab, TokenizerScheme::Character);
        assert_eq!(ch.encode("abz").unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn unknown_without_unk_is_error() {
        let vocab = Vocabulary::new(vec!["a".into()]).unwrap();
        let ws = Tokenizer::new(vocab, TokenizerScheme::Whitespace);
        assert!(ws.encode("a q").is_err());
    }

    #[test]
    fn binary_header_layout() {
        let c = TokenCorpus {
            vocab_size: 7,
            sequences: vec![vec![1, 2], vec![]],
        };
        let b = c.to_bytes();
        assert_eq!(&b[..8], b"OCDSTOK1");
        assert_eq!(&b[8..12], &7u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(b.len(), 12 + 4 + 8 + 4);
    }

    #[test]
    fn rejects_truncated_and_bad_magic() {
        let p = Path::new("mem");
        assert!(TokenCorpus::from_bytes(b"NOTMAGIC\0\0\0\0", p).is_err());
        let mut b = TokenCorpus {
            vocab_size: 4,
            sequences: vec![vec![1, 2, 3]],
        }
        .to_bytes();
        b.pop();
        assert!(TokenCorpus::from_bytes(&b, p).is_err());
        let over = TokenCorpus {
            vocab_size: 2,
            sequences: vec![vec![5]],
        }
        .to_bytes();
        assert!(TokenCorpus::from_bytes(&over, p).is_err());
    }

    proptest! {
        #[test]
        fn binary_round_trip(seqs in prop::collection::vec(prop::collection::vec(0u32..50, 0..20), 0..10)) {
            let c = TokenCorpus { vocab_size: 50, sequences: seqs };
            let back = TokenCorpus::from_bytes(&c.to_bytes(), Path::new("mem")).unwrap();
            prop_assert_eq!(back, c);
        }
    }
}
