//! Per-dialogue triple sets: lexicon (commonsense) triples plus named-entity
//! triples built after coreference rewriting.

mod annotate;
mod coref;

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Dialogue, Vocabulary};
use crate::error::{Error, Result};
use crate::text::tokenize;

pub use annotate::{
    detect_entities, CorefAnnotator, DialogueAnnotation, EntityAnnotation, EntityAnnotator, EntitySpan,
    FileAnnotator, RuleBasedAnnotator,
};
pub use coref::{resolve_and_rewrite, rewrite_with_spans, CorefAnnotation, CorefCluster, Mention};

pub const RELATED_TO: &str = "RelatedTo";
pub const DEFAULT_TRIPLE_CAP: usize = 400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TripleSource {
    Conceptnet,
    EntityPair,
    EntityConcept,
}

impl TripleSource {
    /// Lower is kept first when a store is capped.
    fn priority(self) -> u8 {
        match self {
            TripleSource::EntityPair => 0,
            TripleSource::EntityConcept => 1,
            TripleSource::Conceptnet => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TripleSource::Conceptnet => "conceptnet",
            TripleSource::EntityPair => "entity_pair",
            TripleSource::EntityConcept => "entity_concept",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "conceptnet" => Some(TripleSource::Conceptnet),
            "entity_pair" => Some(TripleSource::EntityPair),
            "entity_concept" => Some(TripleSource::EntityConcept),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Triple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub source: TripleSource,
}

impl Triple {
    pub fn new(head: impl Into<String>, relation: impl Into<String>, tail: impl Into<String>, source: TripleSource) -> Self {
        Triple {
            head: head.into(),
            relation: relation.into(),
            tail: tail.into(),
            source,
        }
    }

    fn key(&self) -> (&str, &str, &str) {
        (&self.head, &self.relation, &self.tail)
    }
}

impl fmt::Display for Triple {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.head, self.relation, self.tail)
    }
}

/// Deduplicated triples ordered by `(head, relation, tail)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TripleStore {
    triples: Vec<Triple>,
}

impl TripleStore {
    /// Deduplicates on `(head, relation, tail)`, keeping the highest-priority
    /// source, and drops self-loops.
    pub fn from_triples(triples: impl IntoIterator<Item = Triple>) -> Self {
        let mut best: HashMap<(String, String, String), TripleSource> = HashMap::new();
        for t in triples {
            if t.head == t.tail {
                continue;
            }
            let key = (t.head, t.relation, t.tail);
            best.entry(key)
                .and_modify(|s| {
                    if t.source.priority() < s.priority() {
                        *s = t.source
                    }
                })
                .or_insert(t.source);
        }
        let mut triples: Vec<Triple> = best
            .into_iter()
            .map(|((h, r, t), s)| Triple::new(h, r, t, s))
            .collect();
        triples.sort_by(|a, b| a.key().cmp(&b.key()));
        TripleStore { triples }
    }

    /// Keeps at most `cap` triples by source priority, then lexical order.
    pub fn capped(self, cap: usize) -> Self {
        if self.triples.len() <= cap {
            return self;
        }
        let mut t = self.triples;
        t.sort_by(|a, b| {
            a.source
                .priority()
                .cmp(&b.source.priority())
                .then_with(|| a.key().cmp(&b.key()))
        });
        t.truncate(cap);
        TripleStore::from_triples(t)
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn len(&self) -> usize {
        self.triples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triples.is_empty()
    }

    pub fn contains(&self, head: &str, relation: &str, tail: &str) -> bool {
        self.triples
            .binary_search_by(|t| t.key().cmp(&(head, relation, tail)))
            .is_ok()
    }

    pub fn entities(&self) -> BTreeSet<String> {
        self.triples
            .iter()
            .flat_map(|t| [t.head.clone(), t.tail.clone()])
            .collect()
    }

    pub fn relations(&self) -> BTreeSet<String> {
        self.triples.iter().map(|t| t.relation.clone()).collect()
    }

    pub fn merge(&self, other: &TripleStore) -> TripleStore {
        TripleStore::from_triples(self.triples.iter().chain(other.triples.iter()).cloned())
    }
}

/// Parses `head<TAB>relation<TAB>tail` lines; `source` tags every triple.
pub fn parse_triple_tsv(body: &str, source: TripleSource) -> std::result::Result<Vec<Triple>, (usize, String)> {
    let mut out = Vec::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 3 || cols.iter().any(|c| c.trim().is_empty()) {
            return Err((i + 1, format!("expected head<TAB>relation<TAB>tail, got {line:?}")));
        }
        out.push(Triple::new(cols[0].trim(), cols[1].trim(), cols[2].trim(), source));
    }
    Ok(out)
}

/// Writes per-dialogue stores as
/// `dialogue_id<TAB>head<TAB>relation<TAB>tail<TAB>source` lines.
pub fn dialogue_triples_to_tsv(stores: &BTreeMap<String, TripleStore>) -> String {
    let mut out = String::new();
    for (id, store) in stores {
        for t in store.triples() {
            out.push_str(&format!("{id}\t{}\t{}\t{}\t{}\n", t.head, t.relation, t.tail, t.source.as_str()));
        }
    }
    out
}

pub fn parse_dialogue_triples(body: &str, path: &Path) -> Result<HashMap<String, TripleStore>> {
    let mut grouped: HashMap<String, Vec<Triple>> = HashMap::new();
    for (i, line) in body.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        if cols.len() != 5 || cols[..4].iter().any(|c| c.trim().is_empty()) {
            return Err(err(format!("expected 5 tab-separated columns, got {line:?}")));
        }
        let source = TripleSource::parse(cols[4].trim())
            .ok_or_else(|| err(format!("unknown triple source {:?}", cols[4])))?;
        grouped
            .entry(cols[0].to_string())
            .or_default()
            .push(Triple::new(cols[1].trim(), cols[2].trim(), cols[3].trim(), source));
    }
    Ok(grouped
        .into_iter()
        .map(|(id, ts)| (id, TripleStore::from_triples(ts)))
        .collect())
}

pub fn load_dialogue_triples(path: &Path) -> Result<HashMap<String, TripleStore>> {
    let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_dialogue_triples(&body, path)
}

/// Raw commonsense triples and the concept words they mention.
#[derive(Debug, Clone, Default)]
pub struct ConceptLexicon {
    pub concept_words: HashSet<String>,
    pub raw_triples: Vec<Triple>,
}

fn normalize_concept(s: &str) -> String {
    s.trim().to_lowercase().replace('_', " ")
}

impl ConceptLexicon {
    pub fn from_triples(raw: impl IntoIterator<Item = Triple>) -> Self {
        let raw_triples: Vec<Triple> = raw
            .into_iter()
            .map(|t| {
                Triple::new(
                    normalize_concept(&t.head),
                    t.relation,
                    normalize_concept(&t.tail),
                    TripleSource::Conceptnet,
                )
            })
            .collect();
        let concept_words = raw_triples
            .iter()
            .flat_map(|t| [t.head.clone(), t.tail.clone()])
            .collect();
        ConceptLexicon {
            concept_words,
            raw_triples,
        }
    }

    pub fn load_tsv(path: &Path) -> Result<Self> {
        let body = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let triples = parse_triple_tsv(&body, TripleSource::Conceptnet).map_err(|(line, message)| Error::Parse {
            path: path.to_path_buf(),
            line,
            message,
        })?;
        Ok(Self::from_triples(triples))
    }
}

fn single_token(s: &str) -> bool {
    let toks = tokenize(s);
    toks.len() == 1 && toks[0] == s
}

/// Keeps lexicon triples whose head and tail are single in-vocabulary tokens.
pub fn filter_conceptnet(lexicon: &ConceptLexicon, vocab: &Vocabulary) -> TripleStore {
    let keep = |w: &str| single_token(w) && vocab.get(w).is_some();
    TripleStore::from_triples(
        lexicon
            .raw_triples
            .iter()
            .filter(|t| keep(&t.head) && keep(&t.tail))
            .cloned(),
    )
}

/// `RelatedTo` edges between every pair of named entities (head < tail) and
/// from every entity to every concept word.
pub fn build_entity_triples(entities: &[String], concepts: &[String]) -> Vec<Triple> {
    let ents: BTreeSet<&String> = entities.iter().collect();
    let cons: BTreeSet<&String> = concepts.iter().collect();
    let ents: Vec<&String> = ents.into_iter().collect();
    let mut out = Vec::new();
    for (i, a) in ents.iter().enumerate() {
        for b in &ents[i + 1..] {
            out.push(Triple::new(*a, RELATED_TO, *b, TripleSource::EntityPair));
        }
    }
    for e in &ents {
        for c in &cons {
            if e != c {
                out.push(Triple::new(*e, RELATED_TO, *c, TripleSource::EntityConcept));
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TripleConfig {
    /// Also match utterance words against lexicon tails.
    pub tail_match: bool,
    /// Extract concept words from the coreference-rewritten dialogue (true)
    /// or from the original one.
    pub concepts_from_rewritten: bool,
    pub cap: usize,
}

impl Default for TripleConfig {
    fn default() -> Self {
        TripleConfig {
            tail_match: false,
            concepts_from_rewritten: true,
            cap: DEFAULT_TRIPLE_CAP,
        }
    }
}

/// Vocabulary-filtered lexicon indexed by head and tail, reused across
/// dialogues.
#[derive(Debug, Clone)]
pub struct TripleBuilder {
    filtered: TripleStore,
    by_head: HashMap<String, Vec<usize>>,
    by_tail: HashMap<String, Vec<usize>>,
    concept_words: HashSet<String>,
    pub config: TripleConfig,
}

impl TripleBuilder {
    pub fn new(lexicon: &ConceptLexicon, vocab: &Vocabulary, config: TripleConfig) -> Self {
        let filtered = filter_conceptnet(lexicon, vocab);
        let mut by_head: HashMap<String, Vec<usize>> = HashMap::new();
        let mut by_tail: HashMap<String, Vec<usize>> = HashMap::new();
        for (i, t) in filtered.triples().iter().enumerate() {
            by_head.entry(t.head.clone()).or_default().push(i);
            by_tail.entry(t.tail.clone()).or_default().push(i);
        }
        let concept_words = lexicon
            .concept_words
            .iter()
            .filter(|w| single_token(w) && vocab.get(w).is_some())
            .cloned()
            .collect();
        TripleBuilder {
            filtered,
            by_head,
            by_tail,
            concept_words,
            config,
        }
    }

    pub fn filtered(&self) -> &TripleStore {
        &self.filtered
    }

    fn dialogue_words(dialogue: &Dialogue) -> BTreeSet<String> {
        dialogue.turns.iter().flat_map(|t| t.tokens()).collect()
    }

    pub fn collect(
        &self,
        dialogue: &Dialogue,
        coref: &CorefAnnotation,
        annotator: &dyn EntityAnnotator,
    ) -> Result<TripleStore> {
        let rewritten = resolve_and_rewrite(dialogue, coref)?;
        let words = Self::dialogue_words(if self.config.concepts_from_rewritten {
            &rewritten
        } else {
            dialogue
        });
        let mut hits: BTreeSet<usize> = BTreeSet::new();
        for w in &words {
            if let Some(ix) = self.by_head.get(w) {
                hits.extend(ix);
            }
            if self.config.tail_match {
                if let Some(ix) = self.by_tail.get(w) {
                    hits.extend(ix);
                }
            }
        }
        let lexical = hits.into_iter().map(|i| self.filtered.triples()[i].clone());
        let entities = annotator.entities(&rewritten)?.entities();
        let concepts: Vec<String> = words
            .into_iter()
            .filter(|w| self.concept_words.contains(w))
            .collect();
        let named = build_entity_triples(&entities, &concepts);
        Ok(TripleStore::from_triples(lexical.chain(named)).capped(self.config.cap))
    }
}

/// One-shot form of [`TripleBuilder::collect`].
pub fn collect_dialogue_triples(
    dialogue: &Dialogue,
    coref: &CorefAnnotation,
    annotator: &dyn EntityAnnotator,
    lexicon: &ConceptLexicon,
    vocab: &Vocabulary,
    config: TripleConfig,
) -> Result<TripleStore> {
    TripleBuilder::new(lexicon, vocab, config).collect(dialogue, coref, annotator)
}
