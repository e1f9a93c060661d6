//! Automatic response metrics: perplexity, unigram F1, corpus BLEU-4, and
//! the embedding-based average / extrema / greedy-matching scores.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Model;
use crate::text::{is_punctuation, tokenize};
use crate::trainer::PreparedDialogue;

/// Added to zero n-gram match counts.
pub const BLEU_EPSILON: f64 = 0.1;

/// `exp(-mean ln p)`.
pub fn perplexity_from_log_probs(log_probs: &[f64]) -> Result<f64> {
    if log_probs.is_empty() {
        return Err(Error::Empty("perplexity of an empty example set"));
    }
    let mean = compensated_sum(log_probs) / log_probs.len() as f64;
    Ok((-mean).exp())
}

/// Neumaier summation.
fn compensated_sum(xs: &[f64]) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0f64);
    for &x in xs {
        let t = sum + x;
        carry += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + carry
}

/// Teacher-forced perplexity of the gold responses (eos included).
pub fn perplexity(model: &Model, dialogues: &[PreparedDialogue]) -> Result<f64> {
    let mut all = Vec::new();
    for d in dialogues {
        all.extend(model.dialogue_log_probs(&d.examples, &d.triples)?);
    }
    perplexity_from_log_probs(&all)
}

/// Lowercased tokens without punctuation.
pub fn normalize(text: &str) -> Vec<String> {
    tokenize(text).into_iter().filter(|t| !is_punctuation(t)).collect()
}

fn counts<'a>(tokens: impl IntoIterator<Item = &'a [String]>) -> HashMap<&'a [String], usize> {
    let mut m = HashMap::new();
    for t in tokens {
        *m.entry(t).or_insert(0) += 1;
    }
    m
}

/// Clipped matches between the multisets.
fn overlap(a: &HashMap<&[String], usize>, b: &HashMap<&[String], usize>) -> usize {
    a.iter().map(|(k, &n)| n.min(b.get(k).copied().unwrap_or(0))).sum()
}

/// Harmonic mean of unigram precision and recall over normalized tokens.
pub fn unigram_f1(hypothesis: &[String], reference: &[String]) -> f64 {
    match (hypothesis.is_empty(), reference.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let h = counts(hypothesis.chunks(1));
    let r = counts(reference.chunks(1));
    let common = overlap(&h, &r);
    if common == 0 {
        return 0.0;
    }
    let p = common as f64 / hypothesis.len() as f64;
    let rc = common as f64 / reference.len() as f64;
    2.0 * p * rc / (p + rc)
}

/// Corpus BLEU with uniform weights over 1..=4-grams and a brevity penalty.
pub fn corpus_bleu(pairs: &[(Vec<String>, Vec<String>)]) -> f64 {
    let mut matches = [0usize; 4];
    let mut totals = [0usize; 4];
    let (mut hyp_len, mut ref_len) = (0usize, 0usize);
    for (hyp, reference) in pairs {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=4 {
            let h = counts(hyp.windows(n));
            let r = counts(reference.windows(n));
            matches[n - 1] += overlap(&h, &r);
            totals[n - 1] += hyp.len().saturating_sub(n - 1);
        }
    }
    if hyp_len == 0 {
        return 0.0;
    }
    let log_p: f64 = (0..4)
        .map(|i| {
            let num = if matches[i] == 0 { BLEU_EPSILON } else { matches[i] as f64 };
            (num / totals[i].max(1) as f64).ln()
        })
        .sum::<f64>()
        / 4.0;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    bp * log_p.exp()
}

pub fn bleu4(hypothesis: &[String], reference: &[String]) -> f64 {
    corpus_bleu(&[(hypothesis.to_vec(), reference.to_vec())])
}

/// Word vectors in the whitespace-separated text format
/// (`word v1 v2 ... vd` per line).
#[derive(Debug, Clone, Default)]
pub struct WordVectors {
    dim: usize,
    vectors: HashMap<String, Vec<f64>>,
}

impl WordVectors {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (String, Vec<f64>)>) -> Result<Self> {
        let mut wv = WordVectors::default();
        for (w, v) in pairs {
            wv.insert(w, v)?;
        }
        Ok(wv)
    }

    fn insert(&mut self, word: String, v: Vec<f64>) -> Result<()> {
        if v.is_empty() {
            return Err(Error::InvalidInput(format!("empty vector for {word:?}")));
        }
        if self.vectors.is_empty() {
            self.dim = v.len();
        } else if v.len() != self.dim {
            return Err(Error::InvalidInput(format!(
                "vector for {word:?} has {} dimensions, expected {}",
                v.len(),
                self.dim
            )));
        }
        self.vectors.insert(word.to_lowercase(), v);
        Ok(())
    }

    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut wv = WordVectors::default();
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(word) = parts.next() else { continue };
            let v: std::result::Result<Vec<f64>, _> = parts.map(str::parse::<f64>).collect();
            let v = v.map_err(|e| Error::Parse {
                path: origin.into(),
                line: i + 1,
                message: e.to_string(),
            })?;
            wv.insert(word.to_string(), v).map_err(|e| Error::Parse {
                path: origin.into(),
                line: i + 1,
                message: e.to_string(),
            })?;
        }
        Ok(wv)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn get(&self, word: &str) -> Option<&[f64]> {
        self.vectors.get(word).map(Vec::as_slice)
    }

    /// Vectors of the in-vocabulary tokens.
    fn lookup<'a>(&'a self, tokens: &[String]) -> Vec<&'a [f64]> {
        tokens.iter().filter_map(|t| self.get(t)).collect()
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

fn mean_vector(vs: &[&[f64]]) -> Vec<f64> {
    let mut out = vec![0.0; vs[0].len()];
    for v in vs {
        for (o, x) in out.iter_mut().zip(*v) {
            *o += x;
        }
    }
    out.iter().map(|x| x / vs.len() as f64).collect()
}

/// Per dimension, the value of largest magnitude (sign kept).
fn extrema_vector(vs: &[&[f64]]) -> Vec<f64> {
    (0..vs[0].len())
        .map(|d| vs.iter().map(|v| v[d]).fold(0.0f64, |best, x| if x.abs() > best.abs() { x } else { best }))
        .collect()
}

fn greedy_direction(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    a.iter()
        .map(|x| b.iter().map(|y| cosine(x, y)).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / a.len() as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingScores {
    pub average: f64,
    pub extrema: f64,
    pub greedy: f64,
}

/// `None` when either sentence has no in-vocabulary token.
pub fn embedding_metrics(hypothesis: &[String], reference: &[String], vectors: &WordVectors) -> Option<EmbeddingScores> {
    let h = vectors.lookup(hypothesis);
    let r = vectors.lookup(reference);
    if h.is_empty() || r.is_empty() {
        return None;
    }
    Some(EmbeddingScores {
        average: cosine(&mean_vector(&h), &mean_vector(&r)),
        extrema: cosine(&extrema_vector(&h), &extrema_vector(&r)),
        greedy: (greedy_direction(&h, &r) + greedy_direction(&r, &h)) / 2.0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    /// present only when a model was supplied
    pub ppl: Option<f64>,
    pub f1: f64,
    pub bleu4: f64,
    pub emb_avg: Option<f64>,
    pub extrema: Option<f64>,
    pub greedy: Option<f64>,
    pub pairs: usize,
    /// pairs left out of the embedding metrics for lack of known words
    pub embedding_skipped: usize,
}

/// Scores aligned hypothesis/reference sentences. Cosine-based metrics are
/// clamped to `[0, 1]`.
pub fn evaluate(
    hypotheses: &[String],
    references: &[String],
    vectors: Option<&WordVectors>,
    ppl: Option<f64>,
) -> Result<MetricReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidInput(format!(
            "{} hypotheses but {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Empty("no sentence pairs to score"));
    }
    let pairs: Vec<(Vec<String>, Vec<String>)> =
        hypotheses.iter().zip(references).map(|(h, r)| (normalize(h), normalize(r))).collect();
    let f1 = pairs.iter().map(|(h, r)| unigram_f1(h, r)).sum::<f64>() / pairs.len() as f64;
    let bleu = corpus_bleu(&pairs);
    let (mut emb, mut skipped) = (Vec::new(), 0);
    if let Some(wv) = vectors {
        for (h, r) in &pairs {
            match embedding_metrics(h, r, wv) {
                Some(s) => emb.push(s),
                None => skipped += 1,
            }
        }
    }
    let mean = |f: fn(&EmbeddingScores) -> f64| {
        (!emb.is_empty()).then(|| (emb.iter().map(f).sum::<f64>() / emb.len() as f64).clamp(0.0, 1.0))
    };
    Ok(MetricReport {
        ppl,
        f1,
        bleu4: bleu,
        emb_avg: mean(|s| s.average),
        extrema: mean(|s| s.extrema),
        greedy: mean(|s| s.greedy),
        pairs: pairs.len(),
        embedding_skipped: skipped,
    })
}
