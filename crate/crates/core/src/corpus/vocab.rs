use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::CorpusSplit;

pub const PAD: &str = "<pad>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const UNK: &str = "<unk>";

pub const PAD_ID: usize = 0;
pub const BOS_ID: usize = 1;
pub const EOS_ID: usize = 2;
pub const UNK_ID: usize = 3;

const SPECIALS: [&str; 4] = [PAD, BOS, EOS, UNK];

/// Token/id mapping with the four specials at ids 0..4.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::from_tokens(Vec::<String>::new())
    }
}

impl Vocabulary {
    /// Builds a vocabulary from non-special tokens in id order. Duplicates and
    /// tokens spelled like a special are skipped.
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut vocab = Vocabulary {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for s in SPECIALS {
            vocab.push(s.to_string());
        }
        for t in tokens {
            vocab.push(t.into());
        }
        vocab
    }

    fn push(&mut self, token: String) {
        if !self.index.contains_key(&token) {
            self.index.insert(token.clone(), self.tokens.len());
            self.tokens.push(token);
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or the unk id.
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_ID)
    }

    pub fn token_of(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.lookup(t)).collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Plain text, one non-special token per line (line number = id - 4).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut body = String::new();
        for t in &self.tokens[SPECIALS.len()..] {
            body.push_str(t);
            body.push('\n');
        }
        fs::write(path, body).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut seen = std::collections::HashSet::new();
        for (i, line) in body.lines().enumerate() {
            if line.is_empty() || SPECIALS.contains(&line) || !seen.insert(line) {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("invalid or duplicate vocabulary entry {line:?}"),
                });
            }
        }
        Ok(Self::from_tokens(body.lines()))
    }
}

/// Most frequent tokens over dialogue text and knowledge sentences, capped at
/// `max_size` entries including the specials. Ties break lexicographically.
pub fn build_vocab(split: &CorpusSplit, max_size: usize) -> Result<Vocabulary> {
    if max_size <= SPECIALS.len() {
        return Err(Error::InvalidInput(format!(
            "vocabulary size must exceed {}, got {max_size}",
            SPECIALS.len()
        )));
    }
    let mut counts: HashMap<String, usize> = HashMap::new();
    for dialogue in &split.dialogues {
        for turn in &dialogue.turns {
            for tok in turn.tokens() {
                *counts.entry(tok).or_default() += 1;
            }
            for sentence in turn.knowledge_tokens() {
                for tok in sentence {
                    *counts.entry(tok).or_default() += 1;
                }
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts
        .into_iter()
        .filter(|(t, _)| !SPECIALS.contains(&t.as_str()))
        .collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    ranked.truncate(max_size - SPECIALS.len());
    Ok(Vocabulary::from_tokens(ranked.into_iter().map(|(t, _)| t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{Dialogue, SplitName, Speaker, Turn};

    fn split(texts: &[(&str, &[&str])]) -> CorpusSplit {
        let dialogues = texts
            .iter()
            .enumerate()
            .map(|(i, (text, know))| Dialogue {
                dialogue_id: format!("d{i}"),
                topic: "t".into(),
                turns: vec![Turn::new(
                    Speaker::Agent1,
                    *text,
                    know.iter().map(|s| s.to_string()).collect(),
                )],
            })
            .collect();
        CorpusSplit {
            name: SplitName::Train,
            dialogues,
        }
    }

    #[test]
    fn full_retention_and_cap() {
        let s = split(&[("a a a b", &[])]);
        let v = build_vocab(&s, 6).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<bos>", "<eos>", "<unk>", "a", "b"]);
        let v = build_vocab(&s, 5).unwrap();
        assert_eq!(v.tokens(), &["<pad>", "<bos>", "<eos>", "<unk>", "a"]);
    }

    #[test]
    fn knowledge_only_tokens_are_included() {
        let s = split(&[("hello", &["zebra stripes"])]);
        let v = build_vocab(&s, 100).unwrap();
        assert!(v.get("zebra").is_some());
        assert!(v.get("stripes").is_some());
    }

    #[test]
    fn rejects_tiny_size() {
        assert!(build_vocab(&split(&[("a", &[])]), 4).is_err());
    }

    #[test]
    fn lookup_inverts_token_of_and_file_round_trip() {
        let v = Vocabulary::from_tokens(["x", "y", "z"]);
        for id in 0..v.len() {
            assert_eq!(v.lookup(v.token_of(id).unwrap()), id);
        }
        assert_eq!(v.lookup("nope"), UNK_ID);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        v.save(&path).unwrap();
        assert_eq!(fs::read_to_string(&path).unwrap(), "x\ny\nz\n");
        assert_eq!(Vocabulary::load(&path).unwrap(), v);
    }

    #[test]
    fn permutation_invariant() {
        let a = split(&[("a b c", &["c d"]), ("b b e", &[])]);
        let mut b = a.clone();
        b.dialogues.reverse();
        assert_eq!(build_vocab(&a, 7).unwrap(), build_vocab(&b, 7).unwrap());
    }
}
