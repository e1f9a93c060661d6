//! Pluggable coreference and named-entity annotators.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Dialogue;
use crate::error::{Error, Result};

use super::coref::{CorefAnnotation, CorefCluster};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EntitySpan {
    pub turn: usize,
    pub start: usize,
    pub end: usize,
    pub surface: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EntityAnnotation {
    pub spans: Vec<EntitySpan>,
}

impl EntityAnnotation {
    /// Distinct entity surfaces in first-seen order.
    pub fn entities(&self) -> Vec<String> {
        let mut seen = std::collections::HashSet::new();
        self.spans
            .iter()
            .filter(|s| seen.insert(s.surface.clone()))
            .map(|s| s.surface.clone())
            .collect()
    }
}

pub trait CorefAnnotator {
    fn coreference(&self, dialogue: &Dialogue) -> Result<CorefAnnotation>;
}

/// Tags named entities in an (already rewritten) dialogue.
pub trait EntityAnnotator {
    fn entities(&self, dialogue: &Dialogue) -> Result<EntityAnnotation>;
}

/// Offline annotator: capitalized multi-word spans are entities; pronoun
/// linking is off, so coreference is always empty.
#[derive(Debug, Clone, Default)]
pub struct RuleBasedAnnotator;

const CONNECTORS: [&str; 9] = ["of", "the", "and", "de", "la", "von", "van", "du", "del"];

struct Word {
    start: usize,
    end: usize,
    text: String,
    /// punctuation right after the word closes any open entity
    breaks: bool,
}

fn words(text: &str) -> Vec<Word> {
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if chars[i].is_whitespace() {
            i += 1;
            continue;
        }
        let mut j = i;
        while j < chars.len() && !chars[j].is_whitespace() {
            j += 1;
        }
        // trim surrounding punctuation from the chunk chars[i..j]
        let mut s = i;
        let mut e = j;
        while s < e && !chars[s].is_alphanumeric() {
            s += 1;
        }
        while e > s && !chars[e - 1].is_alphanumeric() {
            e -= 1;
        }
        let mut word: String = chars[s..e].iter().collect();
        if word.ends_with("'s") || word.ends_with("’s") {
            e -= 2;
            word = chars[s..e].iter().collect();
        }
        if s < e {
            out.push(Word {
                start: s,
                end: e,
                text: word,
                breaks: e < j || s > i,
            });
        }
        i = j;
    }
    out
}

fn capitalized(w: &str) -> bool {
    w != "I" && w.chars().next().is_some_and(char::is_uppercase)
}

/// Capitalized runs of two or more words, allowing lowercase connectors
/// ("of", "the", ...) between capitalized words.
pub fn detect_entities(text: &str) -> Vec<(usize, usize, String)> {
    let ws = words(text);
    let chars: Vec<char> = text.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < ws.len() {
        if !capitalized(&ws[i].text) {
            i += 1;
            continue;
        }
        let mut last = i;
        let mut caps = 1;
        let mut j = i;
        while !ws[j].breaks && j + 1 < ws.len() {
            let next = &ws[j + 1];
            if capitalized(&next.text) {
                last = j + 1;
                caps += 1;
                j += 1;
            } else if CONNECTORS.contains(&next.text.as_str()) && !next.breaks {
                // connector must be followed by a capitalized word
                let mut k = j + 1;
                while k + 1 < ws.len() && CONNECTORS.contains(&ws[k + 1].text.as_str()) && !ws[k].breaks {
                    k += 1;
                }
                if k + 1 < ws.len() && !ws[k].breaks && capitalized(&ws[k + 1].text) {
                    j = k;
                } else {
                    break;
                }
            } else {
                break;
            }
        }
        if caps >= 2 {
            let (s, e) = (ws[i].start, ws[last].end);
            out.push((s, e, chars[s..e].iter().collect()));
        }
        i = last + 1;
    }
    out
}

impl CorefAnnotator for RuleBasedAnnotator {
    fn coreference(&self, _dialogue: &Dialogue) -> Result<CorefAnnotation> {
        Ok(CorefAnnotation::default())
    }
}

impl EntityAnnotator for RuleBasedAnnotator {
    fn entities(&self, dialogue: &Dialogue) -> Result<EntityAnnotation> {
        let spans = dialogue
            .turns
            .iter()
            .enumerate()
            .flat_map(|(turn, t)| {
                detect_entities(&t.text)
                    .into_iter()
                    .map(move |(start, end, surface)| EntitySpan {
                        turn,
                        start,
                        end,
                        surface,
                    })
            })
            .collect();
        Ok(EntityAnnotation { spans })
    }
}

/// Precomputed annotation for one dialogue, as stored on disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialogueAnnotation {
    pub dialogue_id: String,
    #[serde(default)]
    pub clusters: Vec<CorefCluster>,
    #[serde(default)]
    pub entities: Vec<(usize, usize, usize, String)>,
}

impl DialogueAnnotation {
    pub fn coref(&self) -> CorefAnnotation {
        CorefAnnotation {
            clusters: self.clusters.clone(),
        }
    }

    pub fn entity_annotation(&self) -> EntityAnnotation {
        EntityAnnotation {
            spans: self
                .entities
                .iter()
                .map(|(turn, start, end, surface)| EntitySpan {
                    turn: *turn,
                    start: *start,
                    end: *end,
                    surface: surface.clone(),
                })
                .collect(),
        }
    }
}

/// Annotations read from `<dir>/<dialogue_id>.json` files.
#[derive(Debug, Clone, Default)]
pub struct FileAnnotator {
    by_id: HashMap<String, DialogueAnnotation>,
}

impl FileAnnotator {
    pub fn from_dir(dir: &Path) -> Result<Self> {
        let mut by_id = HashMap::new();
        let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        let mut paths: Vec<_> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "json"))
            .collect();
        paths.sort();
        for path in paths {
            let body = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
            let ann: DialogueAnnotation = serde_json::from_str(&body).map_err(|e| Error::Parse {
                path: path.clone(),
                line: e.line(),
                message: e.to_string(),
            })?;
            by_id.insert(ann.dialogue_id.clone(), ann);
        }
        Ok(FileAnnotator { by_id })
    }

    pub fn insert(&mut self, ann: DialogueAnnotation) {
        self.by_id.insert(ann.dialogue_id.clone(), ann);
    }

    fn get(&self, dialogue: &Dialogue) -> Result<&DialogueAnnotation> {
        self.by_id.get(&dialogue.dialogue_id).ok_or_else(|| {
            Error::Annotation(format!("no annotation for dialogue {:?}", dialogue.dialogue_id))
        })
    }
}

impl CorefAnnotator for FileAnnotator {
    fn coreference(&self, dialogue: &Dialogue) -> Result<CorefAnnotation> {
        Ok(self.get(dialogue)?.coref())
    }
}

impl EntityAnnotator for FileAnnotator {
    fn entities(&self, dialogue: &Dialogue) -> Result<EntityAnnotation> {
        let ann = self.get(dialogue)?.entity_annotation();
        for s in &ann.spans {
            let ok = dialogue.turns.get(s.turn).is_some_and(|t| {
                s.start < s.end && s.end <= t.text.chars().count()
            });
            if !ok {
                return Err(Error::Annotation(format!(
                    "entity {:?} span [{}, {}, {}] is outside the dialogue",
                    s.surface, s.turn, s.start, s.end
                )));
            }
        }
        Ok(ann)
    }
}
