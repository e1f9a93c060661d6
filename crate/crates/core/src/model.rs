//! The full network: shared word embedding, dialogue and knowledge encoders,
//! entity embeddings for triples, the interaction module, and the decoder.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};
use crate::config::{ModelConfig, TripleCopyWord, TripleEmbeddingMode};
use crate::corpus::{TrainingExample, Vocabulary, BOS_ID, EOS_ID};
use crate::decoder::{
    beam_decode, sequence_loss, step, trace_record, CopyIndex, DecoderParams, SequenceLoss, StepModel, StepSettings,
    StepOutput, TraceRecord, TurnMemory,
};
use crate::encoder::{HiddenStates, KnowledgeStates, StateBank, TransformerEncoder};
use crate::error::{Error, Result};
use crate::memory::{interactive_context, MemoryParams};
use crate::nn::{Linear, INIT_SCALE};
use crate::text::detokenize;
use crate::triples::TripleStore;

/// Parameter handles of every module.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub word_embedding: ParamId,
    pub entity_embedding: ParamId,
    pub triple_projection: Option<Linear>,
    pub dialogue_encoder: TransformerEncoder,
    pub knowledge_encoder: TransformerEncoder,
    pub interactive: MemoryParams,
    pub decoder: DecoderParams,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub entities: Vocabulary,
    pub store: ParamStore,
    pub params: ModelParams,
}

/// Triples of one dialogue prepared for attention and copying.
#[derive(Debug, Clone, Default)]
pub struct TripleContext {
    pub heads: Vec<usize>,
    pub tails: Vec<usize>,
    pub copy_words: Vec<String>,
    pub labels: Vec<(String, String, String)>,
}

impl TripleContext {
    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }
}

/// Entities as they key the entity vocabulary.
pub fn entity_key(surface: &str) -> String {
    surface.to_lowercase()
}

/// Entity vocabulary by descending frequency across the stores, then
/// lexicographic order.
pub fn build_entity_vocab<'a>(stores: impl IntoIterator<Item = &'a TripleStore>, max_size: usize) -> Vocabulary {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for store in stores {
        for t in store.triples() {
            *counts.entry(entity_key(&t.head)).or_default() += 1;
            *counts.entry(entity_key(&t.tail)).or_default() += 1;
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let keep = max_size.saturating_sub(4);
    Vocabulary::from_tokens(ranked.into_iter().take(keep).map(|(w, _)| w))
}

/// Result of answering one turn.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply {
    pub tokens: Vec<String>,
    pub text: String,
    pub trace: Vec<TraceRecord>,
    pub log_prob: f64,
}

/// Inference knobs for [`Model::respond`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DecodeOptions {
    pub beam_width: usize,
    pub max_len: usize,
    /// Sliding window applied when the turn is pushed into the bank.
    pub window: usize,
}

/// Value-form decoding state carried by search hypotheses.
#[derive(Debug, Clone)]
pub struct DecodeState {
    pub s: Mat,
    pub ds: Mat,
    pub kb_s: Option<Mat>,
}

/// Read-only per-turn context for inference steps.
pub struct TurnDecoder<'m> {
    model: &'m Model,
    copy: CopyIndex,
    dh: Mat,
    kb_h: Option<Mat>,
    triples: Option<Mat>,
    labels: Vec<(String, String, String)>,
}

impl<'m> TurnDecoder<'m> {
    fn memory(&self, g: &mut Graph, state: &DecodeState) -> (Var, TurnMemory) {
        let s = g.constant(state.s.clone());
        let ds = g.constant(state.ds.clone());
        let dh = g.constant(self.dh.clone());
        let kb = match (&state.kb_s, &self.kb_h) {
            (Some(s), Some(h)) => Some((g.constant(s.clone()), g.constant(h.clone()))),
            _ => None,
        };
        let triples = self.triples.as_ref().map(|e| g.constant(e.clone()));
        (s, TurnMemory { ds, dh, kb, triples })
    }

    fn next_state(g: &Graph, out: &StepOutput) -> DecodeState {
        DecodeState {
            s: g.value(out.s).clone(),
            ds: g.value(out.memory.ds).clone(),
            kb_s: out.memory.kb.map(|(s, _)| g.value(s).clone()),
        }
    }

    pub fn copy(&self) -> &CopyIndex {
        &self.copy
    }

    /// Teacher-forces `columns`, returning one trace record per column and
    /// the state after the last one.
    pub fn replay(&self, init: &DecodeState, columns: &[usize]) -> Result<(Vec<TraceRecord>, DecodeState)> {
        let mut state = init.clone();
        let mut prev = BOS_ID;
        let mut records = Vec::with_capacity(columns.len());
        for &col in columns {
            let mut g = Graph::new(&self.model.store);
            let (s, mem) = self.memory(&mut g, &state);
            let out = step(
                &mut g,
                &self.model.params.decoder,
                self.model.params.word_embedding,
                &self.copy,
                self.model.settings(),
                s,
                self.copy.input_id(prev),
                mem,
            )?;
            let word = self.copy.word(&self.model.vocab, col);
            records.push(trace_record(&g, &out, col, word, &self.labels));
            state = Self::next_state(&g, &out);
            prev = col;
        }
        Ok((records, state))
    }
}

impl StepModel for TurnDecoder<'_> {
    type State = DecodeState;

    fn advance(&self, state: &DecodeState, prev: usize) -> Result<(Vec<f64>, DecodeState)> {
        let mut g = Graph::new(&self.model.store);
        let (s, mem) = self.memory(&mut g, state);
        let out = step(
            &mut g,
            &self.model.params.decoder,
            self.model.params.word_embedding,
            &self.copy,
            self.model.settings(),
            s,
            self.copy.input_id(prev),
            mem,
        )?;
        let p = g.value(out.p_final).iter().copied().collect();
        Ok((p, Self::next_state(&g, &out)))
    }
}

impl Model {
    /// Fresh model with uniform initialization drawn from `seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, entities: Vocabulary, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.len() > config.vocab_size {
            return Err(Error::InvalidInput(format!(
                "vocabulary has {} entries, config allows {}",
                vocab.len(),
                config.vocab_size
            )));
        }
        if entities.len() > config.triple_vocab_size {
            return Err(Error::InvalidInput(format!(
                "entity vocabulary has {} entries, config allows {}",
                entities.len(),
                config.triple_vocab_size
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (e, h) = (config.embed_dim, config.hidden_dim);
        let word_embedding = store.add_uniform("word_embedding", (vocab.len(), e), INIT_SCALE, &mut rng);
        let entity_embedding = store.add_uniform("entity_embedding", (entities.len(), h), INIT_SCALE, &mut rng);
        let triple_projection = (config.triple_embedding == TripleEmbeddingMode::ConcatProjection)
            .then(|| Linear::new(&mut store, "triple_projection", 2 * h, h, true, &mut rng));
        let enc = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng| {
            TransformerEncoder::new(store, name, e, h, config.encoder_layers, config.encoder_heads, rng)
        };
        let dialogue_encoder = enc(&mut store, "dialogue_encoder", &mut rng);
        let knowledge_encoder = enc(&mut store, "knowledge_encoder", &mut rng);
        let interactive = MemoryParams::new(&mut store, "interactive", h, config.hops, &mut rng);
        let decoder = DecoderParams::new(&mut store, "decoder", e, h, config.hops, vocab.len(), &mut rng);
        Ok(Model {
            config,
            vocab,
            entities,
            store,
            params: ModelParams {
                word_embedding,
                entity_embedding,
                triple_projection,
                dialogue_encoder,
                knowledge_encoder,
                interactive,
                decoder,
            },
        })
    }

    pub fn decode_options(&self, beam_width: usize, max_len: usize) -> DecodeOptions {
        DecodeOptions {
            beam_width,
            max_len,
            window: self.config.window,
        }
    }

    pub fn settings(&self) -> StepSettings {
        StepSettings {
            triple_hops: self.config.triple_hops,
            triple_topk: self.config.triple_topk,
        }
    }

    pub fn hidden(&self) -> usize {
        self.config.hidden_dim
    }

    /// Looks up entity ids and copy words for a triple store.
    pub fn triple_context(&self, store: &TripleStore) -> TripleContext {
        let mut ctx = TripleContext::default();
        for t in store.triples() {
            ctx.heads.push(self.entities.lookup(&entity_key(&t.head)));
            ctx.tails.push(self.entities.lookup(&entity_key(&t.tail)));
            let word = match self.config.triple_copy {
                TripleCopyWord::Tail => &t.tail,
                TripleCopyWord::Head => &t.head,
            };
            ctx.copy_words.push(word.to_lowercase());
            ctx.labels.push((t.head.clone(), t.relation.clone(), t.tail.clone()));
        }
        ctx
    }

    /// One embedding row per triple.
    pub fn triple_embeddings(&self, g: &mut Graph, ctx: &TripleContext) -> Option<Var> {
        if ctx.is_empty() {
            return None;
        }
        let table = g.param(self.params.entity_embedding);
        let heads = g.gather_rows(table, &ctx.heads);
        let tails = g.gather_rows(table, &ctx.tails);
        Some(match self.config.triple_embedding {
            TripleEmbeddingMode::Mean => {
                let sum = g.add(heads, tails);
                g.scale(sum, 0.5)
            }
            TripleEmbeddingMode::Sum => g.add(heads, tails),
            TripleEmbeddingMode::ConcatProjection => {
                let cat = g.concat_cols(&[heads, tails]);
                self.params
                    .triple_projection
                    .as_ref()
                    .expect("projection exists in concat mode")
                    .forward(g, cat)
            }
        })
    }

    pub fn encode_dialogue(&self, g: &mut Graph, tokens: &[String]) -> Result<Var> {
        let ids = self.vocab.encode(tokens);
        self.params.dialogue_encoder.encode(g, self.params.word_embedding, &ids)
    }

    pub fn encode_knowledge(&self, g: &mut Graph, tokens: &[String]) -> Result<Var> {
        let ids = self.vocab.encode(tokens);
        self.params.knowledge_encoder.encode(g, self.params.word_embedding, &ids)
    }

    /// Output columns of a target sequence with eos appended.
    pub fn target_columns(&self, copy: &CopyIndex, target: &[String]) -> Vec<usize> {
        target
            .iter()
            .map(|w| copy.column(&self.vocab, w))
            .chain([EOS_ID])
            .collect()
    }

    /// Builds the teacher-forced loss of one turn on `g`. The bank receives
    /// the turn's encoder output and, on return, the updated dialogue state.
    pub fn turn_loss(
        &self,
        g: &mut Graph,
        bank: &mut StateBank,
        example: &TrainingExample,
        triples: &TripleContext,
    ) -> Result<SequenceLoss> {
        if example.target.is_empty() {
            return Err(Error::Empty("empty response target"));
        }
        let h = self.encode_dialogue(g, &example.dialogue_input)?;
        let states = HiddenStates::new(g.value(h).clone(), example.dialogue_input.clone())?;
        bank.push_turn(&states, self.config.window);
        let (ds, dh) = bank.to_graph(g, Some(h));
        let kb = if example.knowledge_input.is_empty() {
            None
        } else {
            let k = self.encode_knowledge(g, &example.knowledge_input)?;
            Some((k, k))
        };
        let s0 = interactive_context(g, ds, dh, kb.map(|k| k.1), &self.params.interactive)?;
        let e = self.triple_embeddings(g, triples);
        let copy = CopyIndex::new(&self.vocab, &bank.tokens(), &example.knowledge_input, &triples.copy_words);
        let targets = self.target_columns(&copy, &example.target);
        let memory = TurnMemory { ds, dh, kb, triples: e };
        let out = sequence_loss(
            g,
            &self.params.decoder,
            self.params.word_embedding,
            &copy,
            self.settings(),
            s0,
            BOS_ID,
            &targets,
            memory,
        )?;
        bank.ds = g.value(out.memory.ds).clone();
        Ok(out)
    }

    /// Teacher-forced `ln P(y_t)` of every target token (eos included) of a
    /// dialogue's turns, starting from an empty bank.
    pub fn dialogue_log_probs(&self, examples: &[TrainingExample], triples: &TripleContext) -> Result<Vec<f64>> {
        let mut bank = StateBank::empty(self.hidden());
        let mut out = Vec::new();
        for ex in examples {
            let mut g = Graph::new(&self.store);
            let seq = self.turn_loss(&mut g, &mut bank, ex, triples)?;
            out.extend(seq.log_probs.iter().map(|&v| g.scalar(v)));
        }
        Ok(out)
    }

    /// Starts a turn at inference time: pushes the dialogue input into the
    /// bank, installs the knowledge, and computes the initial decoder state.
    pub fn begin_turn(
        &self,
        bank: &mut StateBank,
        knowledge: &mut KnowledgeStates,
        dialogue_input: &[String],
        knowledge_input: &[String],
        triples: &TripleContext,
        window: usize,
    ) -> Result<(TurnDecoder<'_>, DecodeState)> {
        let mut g = Graph::new(&self.store);
        let h = self.encode_dialogue(&mut g, dialogue_input)?;
        let states = HiddenStates::new(g.value(h).clone(), dialogue_input.to_vec())?;
        bank.push_turn(&states, window);
        if knowledge_input.is_empty() {
            *knowledge = KnowledgeStates::empty(self.hidden());
        } else {
            let k = self.encode_knowledge(&mut g, knowledge_input)?;
            knowledge.set_knowledge(&HiddenStates::new(g.value(k).clone(), knowledge_input.to_vec())?);
        }
        let (ds, dh) = bank.to_graph(&mut g, None);
        let kb_h = (!knowledge.is_empty()).then(|| g.constant(knowledge.kb_h.clone()));
        let s0 = interactive_context(&mut g, ds, dh, kb_h, &self.params.interactive)?;
        let e = self.triple_embeddings(&mut g, triples).map(|e| g.value(e).clone());
        let copy = CopyIndex::new(&self.vocab, &bank.tokens(), &knowledge.tokens, &triples.copy_words);
        let init = DecodeState {
            s: g.value(s0).clone(),
            ds: bank.ds.clone(),
            kb_s: (!knowledge.is_empty()).then(|| knowledge.kb_s.clone()),
        };
        let dec = TurnDecoder {
            model: self,
            copy,
            dh: bank.dh.clone(),
            kb_h: (!knowledge.is_empty()).then(|| knowledge.kb_h.clone()),
            triples: e,
            labels: triples.labels.clone(),
        };
        Ok((dec, init))
    }

    /// Answers one turn: beam search, then a replay of the chosen reply to
    /// collect traces and commit the dialogue-state updates to the bank.
    pub fn respond(
        &self,
        bank: &mut StateBank,
        knowledge: &mut KnowledgeStates,
        dialogue_input: &[String],
        knowledge_input: &[String],
        triples: &TripleContext,
        options: DecodeOptions,
    ) -> Result<Reply> {
        let (dec, init) = self.begin_turn(bank, knowledge, dialogue_input, knowledge_input, triples, options.window)?;
        let hyp = beam_decode(&dec, init.clone(), BOS_ID, EOS_ID, options.beam_width, options.max_len)?;
        let (records, after) = dec.replay(&init, &hyp.tokens)?;
        bank.ds = after.ds;
        if let Some(kb_s) = after.kb_s {
            knowledge.kb_s = kb_s;
        }
        let mut tokens = Vec::new();
        let mut trace = Vec::new();
        for (col, rec) in hyp.tokens.iter().zip(records) {
            if *col == EOS_ID {
                break;
            }
            tokens.push(dec.copy().word(&self.vocab, *col).to_string());
            trace.push(rec);
        }
        Ok(Reply {
            text: detokenize(&tokens),
            tokens,
            trace,
            log_prob: hyp.log_prob,
        })
    }
}
