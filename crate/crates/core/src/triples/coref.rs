//! Coreference-driven dialogue rewriting.

use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::error::{Error, Result};

/// Character span `[start, end)` inside one turn's text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Mention {
    pub turn: usize,
    pub start: usize,
    pub end: usize,
}

impl Serialize for CorefCluster {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        use serde::ser::SerializeStruct;
        let mentions: Vec<[usize; 3]> = self.mentions.iter().map(|m| [m.turn, m.start, m.end]).collect();
        let mut st = s.serialize_struct("CorefCluster", 2)?;
        st.serialize_field("representative", &self.representative)?;
        st.serialize_field("mentions", &mentions)?;
        st.end()
    }
}

impl<'de> Deserialize<'de> for CorefCluster {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        struct Raw {
            #[serde(default)]
            representative: Option<String>,
            mentions: Vec<[usize; 3]>,
        }
        let raw = Raw::deserialize(d)?;
        Ok(CorefCluster {
            representative: raw.representative.filter(|r| !r.is_empty()),
            mentions: raw
                .mentions
                .into_iter()
                .map(|[turn, start, end]| Mention { turn, start, end })
                .collect(),
        })
    }
}

/// A coreference chain. Without an explicit representative the longest
/// mention (earliest on ties) stands for the cluster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorefCluster {
    pub representative: Option<String>,
    pub mentions: Vec<Mention>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorefAnnotation {
    pub clusters: Vec<CorefCluster>,
}

fn char_to_byte(text: &str, idx: usize) -> Option<usize> {
    if idx == text.chars().count() {
        return Some(text.len());
    }
    text.char_indices().nth(idx).map(|(b, _)| b)
}

fn mention_text<'a>(dialogue: &'a Dialogue, m: &Mention) -> Option<&'a str> {
    let text = &dialogue.turns.get(m.turn)?.text;
    if m.start >= m.end {
        return None;
    }
    let s = char_to_byte(text, m.start)?;
    let e = char_to_byte(text, m.end)?;
    Some(&text[s..e])
}

impl CorefCluster {
    pub fn representative_in(&self, dialogue: &Dialogue) -> Option<String> {
        if let Some(r) = &self.representative {
            return Some(r.clone());
        }
        let mut sorted = self.mentions.clone();
        sorted.sort();
        let mut best: Option<&str> = None;
        for m in &sorted {
            let t = mention_text(dialogue, m)?;
            if best.is_none_or(|b| t.chars().count() > b.chars().count()) {
                best = Some(t);
            }
        }
        best.map(str::to_string)
    }
}

fn validate(dialogue: &Dialogue, coref: &CorefAnnotation) -> Result<()> {
    let mut per_turn: Vec<Vec<(Mention, usize)>> = vec![Vec::new(); dialogue.turns.len()];
    for (ci, cluster) in coref.clusters.iter().enumerate() {
        for m in &cluster.mentions {
            if mention_text(dialogue, m).is_none() {
                return Err(Error::Annotation(format!(
                    "cluster {ci}: span [{}, {}, {}] is outside the dialogue",
                    m.turn, m.start, m.end
                )));
            }
            per_turn[m.turn].push((*m, ci));
        }
    }
    for spans in &mut per_turn {
        spans.sort();
        for w in spans.windows(2) {
            if w[1].0.start < w[0].0.end {
                return Err(Error::Annotation(format!(
                    "cluster {}: span [{}, {}, {}] overlaps a span of cluster {}",
                    w[1].1, w[1].0.turn, w[1].0.start, w[1].0.end, w[0].1
                )));
            }
        }
    }
    Ok(())
}

/// Replaces every mention with its cluster's representative string and
/// returns the rewritten dialogue together with the mention spans mapped onto
/// the new text.
pub fn rewrite_with_spans(dialogue: &Dialogue, coref: &CorefAnnotation) -> Result<(Dialogue, CorefAnnotation)> {
    validate(dialogue, coref)?;
    let mut edits: Vec<Vec<(Mention, usize, String)>> = vec![Vec::new(); dialogue.turns.len()];
    let mut reps = Vec::with_capacity(coref.clusters.len());
    for (ci, cluster) in coref.clusters.iter().enumerate() {
        let rep = cluster
            .representative_in(dialogue)
            .ok_or_else(|| Error::Annotation(format!("cluster {ci} has no mentions")))?;
        for m in &cluster.mentions {
            edits[m.turn].push((*m, ci, rep.clone()));
        }
        reps.push(rep);
    }
    let mut out = dialogue.clone();
    let mut induced: Vec<Vec<Mention>> = vec![Vec::new(); coref.clusters.len()];
    for (turn_idx, turn_edits) in edits.iter_mut().enumerate() {
        turn_edits.sort_by_key(|(m, _, _)| m.start);
        // new offsets, computed left to right
        let mut shift: isize = 0;
        for (m, ci, rep) in turn_edits.iter() {
            let new_start = (m.start as isize + shift) as usize;
            let rep_len = rep.chars().count();
            induced[*ci].push(Mention {
                turn: turn_idx,
                start: new_start,
                end: new_start + rep_len,
            });
            shift += rep_len as isize - (m.end - m.start) as isize;
        }
        // text edits, applied right to left so earlier offsets stay valid
        let text = &mut out.turns[turn_idx].text;
        for (m, _, rep) in turn_edits.iter().rev() {
            let s = char_to_byte(text, m.start).expect("validated");
            let e = char_to_byte(text, m.end).expect("validated");
            text.replace_range(s..e, rep);
        }
    }
    let induced = CorefAnnotation {
        clusters: induced
            .into_iter()
            .zip(reps)
            .map(|(mentions, rep)| CorefCluster {
                representative: Some(rep),
                mentions,
            })
            .collect(),
    };
    Ok((out, induced))
}

pub fn resolve_and_rewrite(dialogue: &Dialogue, coref: &CorefAnnotation) -> Result<Dialogue> {
    rewrite_with_spans(dialogue, coref).map(|(d, _)| d)
}
