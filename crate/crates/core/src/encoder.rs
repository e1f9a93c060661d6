//! Transformer token encoder and the dialogue/knowledge state banks.

use std::collections::VecDeque;

use ndarray::{concatenate, s, Axis};
use rand::Rng;

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};
use crate::error::{Error, Result};
use crate::nn::{LayerNorm, Linear};

/// Sinusoidal position table, `n x dim`.
pub fn positional_encoding(n: usize, dim: usize) -> Mat {
    Mat::from_shape_fn((n, dim), |(pos, i)| {
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / dim as f64);
        let angle = pos as f64 / rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

#[derive(Debug, Clone)]
struct Head {
    query: ParamId,
    key: ParamId,
    value: ParamId,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    attn_norm: LayerNorm,
    heads: Vec<Head>,
    out: Linear,
    ffn_norm: LayerNorm,
    ffn_in: Linear,
    ffn_out: Linear,
}

/// Pre-norm transformer encoder:
/// `x += MHA(LN(x))`, `x += FFN(LN(x))`, with sinusoidal positions added to
/// the projected embeddings and no final norm.
#[derive(Debug, Clone)]
pub struct TransformerEncoder {
    input: Linear,
    layers: Vec<EncoderLayer>,
    hidden: usize,
    head_dim: usize,
}

impl TransformerEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        embed_dim: usize,
        hidden: usize,
        layers: usize,
        heads: usize,
        rng: &mut R,
    ) -> Self {
        assert!(heads > 0 && hidden.is_multiple_of(heads), "hidden must divide into heads");
        let head_dim = hidden / heads;
        let input = Linear::new(store, &format!("{name}.input"), embed_dim, hidden, true, rng);
        let layers = (0..layers)
            .map(|l| {
                let p = format!("{name}.layer{l}");
                let heads = (0..heads)
                    .map(|h| {
                        let mut m = |k: &str| {
                            store.add_uniform(format!("{p}.head{h}.{k}"), (hidden, head_dim), crate::nn::INIT_SCALE, rng)
                        };
                        Head {
                            query: m("query"),
                            key: m("key"),
                            value: m("value"),
                        }
                    })
                    .collect();
                EncoderLayer {
                    attn_norm: LayerNorm::new(store, &format!("{p}.attn_norm"), hidden),
                    heads,
                    out: Linear::new(store, &format!("{p}.attn_out"), hidden, hidden, true, rng),
                    ffn_norm: LayerNorm::new(store, &format!("{p}.ffn_norm"), hidden),
                    ffn_in: Linear::new(store, &format!("{p}.ffn_in"), hidden, 2 * hidden, true, rng),
                    ffn_out: Linear::new(store, &format!("{p}.ffn_out"), 2 * hidden, hidden, true, rng),
                }
            })
            .collect();
        TransformerEncoder {
            input,
            layers,
            hidden,
            head_dim,
        }
    }

    /// Encodes vocabulary ids through the shared embedding table; returns an
    /// `n x hidden` node.
    pub fn encode(&self, g: &mut Graph, embedding: ParamId, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::Empty("cannot encode an empty token sequence"));
        }
        let table = g.param(embedding);
        let emb = g.gather_rows(table, ids);
        let projected = self.input.forward(g, emb);
        let pos = g.constant(positional_encoding(ids.len(), self.hidden));
        let mut x = g.add(projected, pos);
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        for layer in &self.layers {
            let y = layer.attn_norm.forward(g, x);
            let mut outs = Vec::with_capacity(layer.heads.len());
            for head in &layer.heads {
                let wq = g.param(head.query);
                let wk = g.param(head.key);
                let wv = g.param(head.value);
                let q = g.matmul(y, wq);
                let k = g.matmul(y, wk);
                let v = g.matmul(y, wv);
                let kt = g.transpose(k);
                let scores = g.matmul(q, kt);
                let scores = g.scale(scores, scale);
                let attn = g.softmax_rows(scores);
                outs.push(g.matmul(attn, v));
            }
            let cat = g.concat_cols(&outs);
            let attended = layer.out.forward(g, cat);
            x = g.add(x, attended);
            let y = layer.ffn_norm.forward(g, x);
            let h = layer.ffn_in.forward(g, y);
            let h = g.gelu(h);
            let h = layer.ffn_out.forward(g, h);
            x = g.add(x, h);
        }
        Ok(x)
    }
}

/// Encoder output rows with the surface token of each row.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStates {
    pub matrix: Mat,
    pub tokens: Vec<String>,
}

impl HiddenStates {
    pub fn new(matrix: Mat, tokens: Vec<String>) -> Result<Self> {
        if matrix.nrows() != tokens.len() {
            return Err(Error::Shape(format!(
                "{} hidden rows for {} tokens",
                matrix.nrows(),
                tokens.len()
            )));
        }
        if matrix.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("hidden states contain non-finite values".into()));
        }
        Ok(HiddenStates { matrix, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Dialogue memory over a sliding window of turn inputs. `ds` is rewritten
/// by attention; `dh` keeps the encoder outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct StateBank {
    pub ds: Mat,
    pub dh: Mat,
    turns: VecDeque<Vec<String>>,
}

impl StateBank {
    pub fn empty(hidden: usize) -> Self {
        StateBank {
            ds: Mat::zeros((0, hidden)),
            dh: Mat::zeros((0, hidden)),
            turns: VecDeque::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.dh.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.dh.nrows() == 0
    }

    pub fn num_turns(&self) -> usize {
        self.turns.len()
    }

    /// Token count of each retained turn, oldest first.
    pub fn turn_lengths(&self) -> Vec<usize> {
        self.turns.iter().map(Vec::len).collect()
    }

    pub fn turn_tokens(&self) -> impl Iterator<Item = &[String]> {
        self.turns.iter().map(Vec::as_slice)
    }

    /// Surface tokens aligned with the bank rows.
    pub fn tokens(&self) -> Vec<String> {
        self.turns.iter().flatten().cloned().collect()
    }

    /// Rows belonging to the most recent turn.
    pub fn last_turn_len(&self) -> usize {
        self.turns.back().map_or(0, Vec::len)
    }

    /// Appends a turn and evicts all but the newest `window` turns. Rows of
    /// retained turns keep their current `ds` values; the new turn's `ds`
    /// rows start equal to its encoder output.
    pub fn push_turn(&mut self, h_new: &HiddenStates, window: usize) {
        assert!(window >= 1, "window must be at least 1");
        assert_eq!(h_new.matrix.ncols(), self.dh.ncols(), "hidden size mismatch");
        self.turns.push_back(h_new.tokens.clone());
        let mut ds = concatenate(Axis(0), &[self.ds.view(), h_new.matrix.view()]).expect("same width");
        let mut dh = concatenate(Axis(0), &[self.dh.view(), h_new.matrix.view()]).expect("same width");
        while self.turns.len() > window {
            let drop = self.turns.pop_front().expect("non-empty").len();
            ds = ds.slice(s![drop.., ..]).to_owned();
            dh = dh.slice(s![drop.., ..]).to_owned();
        }
        self.ds = ds;
        self.dh = dh;
    }

    /// Graph view of the bank where the newest turn's rows are `current`
    /// (so gradients reach the encoder) and older rows are constants.
    pub fn to_graph(&self, g: &mut Graph, current: Option<Var>) -> (Var, Var) {
        let n = self.len();
        match current {
            Some(cur) => {
                let keep = n - self.last_turn_len();
                assert_eq!(g.shape(cur).0, self.last_turn_len(), "current turn rows");
                if keep == 0 {
                    return (cur, cur);
                }
                let old_s = g.constant(self.ds.slice(s![..keep, ..]).to_owned());
                let old_h = g.constant(self.dh.slice(s![..keep, ..]).to_owned());
                (g.concat_rows(&[old_s, cur]), g.concat_rows(&[old_h, cur]))
            }
            None => (g.constant(self.ds.clone()), g.constant(self.dh.clone())),
        }
    }
}

/// Knowledge memory for the current turn only.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeStates {
    pub kb_s: Mat,
    pub kb_h: Mat,
    pub tokens: Vec<String>,
}

impl KnowledgeStates {
    pub fn empty(hidden: usize) -> Self {
        KnowledgeStates {
            kb_s: Mat::zeros((0, hidden)),
            kb_h: Mat::zeros((0, hidden)),
            tokens: Vec::new(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Replaces both states with fresh copies of `h_kb`.
    pub fn set_knowledge(&mut self, h_kb: &HiddenStates) {
        self.kb_s = h_kb.matrix.clone();
        self.kb_h = h_kb.matrix.clone();
        self.tokens = h_kb.tokens.clone();
    }
}
