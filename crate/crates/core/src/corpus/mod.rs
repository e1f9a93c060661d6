//! Dialogue corpora: loading, knowledge selection, vocabulary and training
//! example construction.

mod tfidf;
mod vocab;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::text::{tokenize, truncate_head, truncate_tail};

pub use tfidf::{select_knowledge, tfidf_scores};
pub use vocab::{build_vocab, Vocabulary, BOS, BOS_ID, EOS, EOS_ID, PAD, PAD_ID, UNK, UNK_ID};

pub const MAX_DIALOGUE_TOKENS: usize = 200;
pub const MAX_KNOWLEDGE_TOKENS: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Speaker {
    Agent1,
    Agent2,
}

/// One utterance with the knowledge sentences shown alongside it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default)]
    pub knowledge: Vec<String>,
}

impl Turn {
    pub fn new(speaker: Speaker, text: impl Into<String>, knowledge: Vec<String>) -> Self {
        Turn {
            speaker,
            text: text.into(),
            knowledge,
        }
    }

    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.text)
    }

    pub fn knowledge_tokens(&self) -> Vec<Vec<String>> {
        self.knowledge
            .iter()
            .map(|s| tokenize(s))
            .filter(|t| !t.is_empty())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dialogue {
    pub dialogue_id: String,
    #[serde(default)]
    pub topic: String,
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Valid,
    TestSeen,
    TestUnseen,
    Test,
}

impl SplitName {
    /// Guesses the split from a file stem such as `valid.jsonl`; unknown stems
    /// are treated as training data.
    pub fn from_path(path: &Path) -> Self {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_ascii_lowercase();
        match stem.as_str() {
            "valid" | "validation" | "dev" => SplitName::Valid,
            "test_seen" => SplitName::TestSeen,
            "test_unseen" => SplitName::TestUnseen,
            "test" => SplitName::Test,
            _ => SplitName::Train,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSplit {
    pub name: SplitName,
    pub dialogues: Vec<Dialogue>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
}

/// One decoder target with its dialogue and knowledge inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub dialogue_input: Vec<String>,
    pub knowledge_input: Vec<String>,
    pub target: Vec<String>,
    pub turn_index: usize,
}

/// Merges consecutive same-speaker turns and checks alternation.
fn normalize_turns(turns: Vec<Turn>) -> std::result::Result<Vec<Turn>, String> {
    let mut merged: Vec<Turn> = Vec::with_capacity(turns.len());
    for turn in turns {
        if tokenize(&turn.text).is_empty() {
            return Err("turn text is empty after tokenization".into());
        }
        match merged.last_mut() {
            Some(prev) if prev.speaker == turn.speaker => {
                prev.text.push(' ');
                prev.text.push_str(&turn.text);
                prev.knowledge.extend(turn.knowledge);
            }
            _ => merged.push(turn),
        }
    }
    match merged.first() {
        None => Err("dialogue has no turns".into()),
        Some(t) if t.speaker != Speaker::Agent1 => Err("dialogue must start with agent1".into()),
        _ => Ok(merged),
    }
}

pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<CorpusSplit> {
    let CorpusFormat::Jsonl = format;
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut dialogues = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut d: Dialogue = serde_json::from_str(line).map_err(|e| parse_err(i + 1, e.to_string()))?;
        d.turns = normalize_turns(d.turns).map_err(|m| parse_err(i + 1, m))?;
        if !ids.insert(d.dialogue_id.clone()) {
            return Err(parse_err(i + 1, format!("duplicate dialogue_id {:?}", d.dialogue_id)));
        }
        dialogues.push(d);
    }
    if dialogues.is_empty() {
        return Err(Error::Empty("corpus file contains no dialogues"));
    }
    Ok(CorpusSplit {
        name: SplitName::from_path(path),
        dialogues,
    })
}

pub fn corpus_to_jsonl(split: &CorpusSplit) -> String {
    let mut out = String::new();
    for d in &split.dialogues {
        out.push_str(&serde_json::to_string(d).expect("dialogue serializes"));
        out.push('\n');
    }
    out
}

pub fn save_corpus(split: &CorpusSplit, path: &Path) -> Result<()> {
    fs::write(path, corpus_to_jsonl(split)).map_err(|e| Error::io(path, e))
}

/// Knowledge for one example: selected down to `k` sentences when the raw
/// document exceeds the token budget, then head-truncated.
fn knowledge_input(query: &[String], sentences: Vec<Vec<String>>, k: usize) -> Vec<String> {
    let total: usize = sentences.iter().map(Vec::len).sum();
    let chosen = if total > MAX_KNOWLEDGE_TOKENS {
        select_knowledge(query, &sentences, k)
    } else {
        sentences
    };
    truncate_head(&chosen.concat(), MAX_KNOWLEDGE_TOKENS)
}

/// One example per agent2 reply. The first exchange uses agent1's opening
/// alone; later ones prepend the previous agent2 reply (and its knowledge).
pub fn make_training_examples(dialogue: &Dialogue, selector_k: usize) -> Vec<TrainingExample> {
    let mut examples = Vec::new();
    let turns = &dialogue.turns;
    let mut exchange = 0;
    let mut i = 0;
    while i + 1 < turns.len() {
        let (a1, a2) = (&turns[i], &turns[i + 1]);
        if a1.speaker != Speaker::Agent1 || a2.speaker != Speaker::Agent2 {
            break;
        }
        let (dialogue_tokens, sentences) = if exchange == 0 {
            (a1.tokens(), a1.knowledge_tokens())
        } else {
            let prev = &turns[i - 1];
            let mut sents = prev.knowledge_tokens();
            sents.extend(a1.knowledge_tokens());
            ([prev.tokens(), a1.tokens()].concat(), sents)
        };
        let dialogue_input = truncate_tail(&dialogue_tokens, MAX_DIALOGUE_TOKENS);
        examples.push(TrainingExample {
            knowledge_input: knowledge_input(&dialogue_input, sentences, selector_k),
            dialogue_input,
            target: a2.tokens(),
            turn_index: exchange,
        });
        exchange += 1;
        i += 2;
    }
    examples
}
