use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::{MAX_DIALOGUE_TOKENS, MAX_KNOWLEDGE_TOKENS};
use crate::error::{Error, Result};
use crate::triples::DEFAULT_TRIPLE_CAP;

/// How a triple's head and tail entity embeddings become one row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripleEmbeddingMode {
    #[default]
    Mean,
    Sum,
    ConcatProjection,
}

/// Which entity of a triple the triple-copy path emits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripleCopyWord {
    #[default]
    Tail,
    Head,
}

fn default_dialogue_budget() -> usize {
    MAX_DIALOGUE_TOKENS
}

fn default_knowledge_budget() -> usize {
    MAX_KNOWLEDGE_TOKENS
}

fn default_triple_cap() -> usize {
    DEFAULT_TRIPLE_CAP
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    /// Rounds of dialogue/knowledge memory attention.
    pub hops: usize,
    /// Rounds of triple attention.
    pub triple_hops: usize,
    /// Sliding window over turn inputs (current turn plus `window - 1`).
    pub window: usize,
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    pub vocab_size: usize,
    pub triple_vocab_size: usize,
    #[serde(default)]
    pub triple_embedding: TripleEmbeddingMode,
    #[serde(default)]
    pub triple_copy: TripleCopyWord,
    /// Keep only the k highest-weight triples between triple hops.
    #[serde(default)]
    pub triple_topk: Option<usize>,
    #[serde(default = "default_dialogue_budget")]
    pub max_dialogue_tokens: usize,
    #[serde(default = "default_knowledge_budget")]
    pub max_knowledge_tokens: usize,
    #[serde(default = "default_triple_cap")]
    pub triple_cap: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 300,
            hidden_dim: 128,
            hops: 2,
            triple_hops: 2,
            window: 2,
            encoder_layers: 2,
            encoder_heads: 4,
            vocab_size: 30004,
            triple_vocab_size: 30004,
            triple_embedding: TripleEmbeddingMode::Mean,
            triple_copy: TripleCopyWord::Tail,
            triple_topk: None,
            max_dialogue_tokens: MAX_DIALOGUE_TOKENS,
            max_knowledge_tokens: MAX_KNOWLEDGE_TOKENS,
            triple_cap: DEFAULT_TRIPLE_CAP,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("hops", self.hops),
            ("triple_hops", self.triple_hops),
            ("window", self.window),
            ("encoder_layers", self.encoder_layers),
            ("encoder_heads", self.encoder_heads),
            ("vocab_size", self.vocab_size),
            ("triple_vocab_size", self.triple_vocab_size),
            ("max_dialogue_tokens", self.max_dialogue_tokens),
            ("max_knowledge_tokens", self.max_knowledge_tokens),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::InvalidInput(format!("{name} must be positive")));
            }
        }
        if !self.hidden_dim.is_multiple_of(self.encoder_heads) {
            return Err(Error::InvalidInput(format!(
                "hidden_dim {} is not divisible by encoder_heads {}",
                self.hidden_dim, self.encoder_heads
            )));
        }
        if self.triple_topk == Some(0) {
            return Err(Error::InvalidInput("triple_topk must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}
