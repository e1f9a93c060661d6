//! Multi-hop attention over the state banks, the forget/add state update,
//! triple attention with query updates, and the dialogue-knowledge
//! interaction context.

use ndarray::Axis;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamId, ParamStore, Var};
use crate::encoder::StateBank;
use crate::error::{Error, Result};
use crate::nn::{GruCell, INIT_SCALE};

/// Parameters of one attention round.
#[derive(Debug, Clone)]
pub struct HopParams {
    /// scoring vector, `hidden x 1`
    pub v1: ParamId,
    /// query projection
    pub w1: ParamId,
    /// state projection
    pub w2: ParamId,
    /// forget gate
    pub w3: ParamId,
    /// add gate
    pub w4: ParamId,
    /// emulated decoder step producing the intermediate state
    pub gru: GruCell,
}

impl HopParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, hidden: usize, rng: &mut R) -> Self {
        let mut m = |k: &str, shape| store.add_uniform(format!("{name}.{k}"), shape, INIT_SCALE, rng);
        let v1 = m("v1", (hidden, 1));
        let w1 = m("w1", (hidden, hidden));
        let w2 = m("w2", (hidden, hidden));
        let w3 = m("w3", (hidden, hidden));
        let w4 = m("w4", (hidden, hidden));
        let gru = GruCell::new(store, &format!("{name}.gru"), hidden, hidden, rng);
        HopParams { v1, w1, w2, w3, w4, gru }
    }
}

/// One parameter set per round.
#[derive(Debug, Clone)]
pub struct MemoryParams {
    pub hops: Vec<HopParams>,
}

impl MemoryParams {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, hidden: usize, rounds: usize, rng: &mut R) -> Self {
        MemoryParams {
            hops: (0..rounds)
                .map(|r| HopParams::new(store, &format!("{name}.hop{r}"), hidden, rng))
                .collect(),
        }
    }
}

/// `e_j = v1ᵀ tanh(W1 q + W2 D_S[j])`, `α = softmax(e)`, `c = Σ_j α_j D_H[j]`.
/// Returns `(α: 1 x n, c: 1 x hidden)`.
pub fn attend_hop(g: &mut Graph, q: Var, ds: Var, dh: Var, hop: &HopParams) -> Result<(Var, Var)> {
    let n = g.shape(ds).0;
    if n == 0 {
        return Err(Error::Empty("attention over an empty memory"));
    }
    if g.shape(dh) != g.shape(ds) {
        return Err(Error::Shape(format!(
            "D_S {:?} and D_H {:?} differ",
            g.shape(ds),
            g.shape(dh)
        )));
    }
    let w1 = g.param(hop.w1);
    let w2 = g.param(hop.w2);
    let v1 = g.param(hop.v1);
    let qw = g.matmul(q, w1);
    let sw = g.matmul(ds, w2);
    let pre = g.add(sw, qw);
    let act = g.tanh(pre);
    let e = g.matmul(act, v1);
    let e = g.transpose(e);
    let alpha = g.softmax_rows(e);
    let c = g.matmul(alpha, dh);
    Ok((alpha, c))
}

/// Forget/add update of the mutable state:
/// `s̃ = GRU(c, q)`, `F = σ(s̃ W3)`, `A = σ(s̃ W4)`,
/// `D_S'[j] = D_S[j] ⊙ (1 - α_j F) + α_j A`.
pub fn update_state(g: &mut Graph, ds: Var, alpha: Var, c: Var, q: Var, hop: &HopParams) -> Var {
    let s_tilde = hop.gru.forward(g, c, q);
    let w3 = g.param(hop.w3);
    let w4 = g.param(hop.w4);
    let f = g.matmul(s_tilde, w3);
    let f = g.sigmoid(f);
    let a = g.matmul(s_tilde, w4);
    let a = g.sigmoid(a);
    let alpha_col = g.transpose(alpha);
    let forget = g.matmul(alpha_col, f);
    let keep = g.one_minus(forget);
    let kept = g.mul(ds, keep);
    let add = g.matmul(alpha_col, a);
    g.add(kept, add)
}

#[derive(Debug, Clone, Copy)]
pub struct HopTrace {
    pub alpha: Var,
    pub context: Var,
}

#[derive(Debug, Clone)]
pub struct MultiHop {
    /// context of the final round
    pub context: Var,
    /// state after the final update
    pub ds: Var,
    pub trace: Vec<HopTrace>,
}

impl MultiHop {
    /// Attention weights of the final round.
    pub fn last_alpha(&self) -> Var {
        self.trace.last().expect("at least one hop").alpha
    }
}

/// Runs every round with the same query, updating `ds` after each.
pub fn multi_hop(g: &mut Graph, q: Var, ds: Var, dh: Var, params: &MemoryParams) -> Result<MultiHop> {
    if params.hops.is_empty() {
        return Err(Error::InvalidInput("multi-hop attention needs at least one round".into()));
    }
    let mut state = ds;
    let mut trace = Vec::with_capacity(params.hops.len());
    for hop in &params.hops {
        let (alpha, context) = attend_hop(g, q, state, dh, hop)?;
        state = update_state(g, state, alpha, context, q, hop);
        trace.push(HopTrace { alpha, context });
    }
    Ok(MultiHop {
        context: trace.last().expect("non-empty").context,
        ds: state,
        trace,
    })
}

#[derive(Debug, Clone, Copy)]
pub struct TripleHop {
    pub alpha: Var,
    pub context: Var,
    pub query: Var,
}

#[derive(Debug, Clone)]
pub struct TripleAttention {
    pub context: Var,
    /// `None` when there are no triples.
    pub alpha: Option<Var>,
    pub query: Var,
    pub trace: Vec<TripleHop>,
}

fn top_k_mask(alpha: &Mat, k: usize) -> Mat {
    let row = alpha.row(0);
    let mut order: Vec<usize> = (0..row.len()).collect();
    order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    let mut mask = Mat::zeros(alpha.dim());
    for &j in order.iter().take(k) {
        mask[[0, j]] = 1.0;
    }
    mask
}

/// `α⁽ᵖ⁾ = softmax(q⁽ᵖ⁻¹⁾ Eᵀ)`, `c⁽ᵖ⁾ = α⁽ᵖ⁾ E`, `q⁽ᵖ⁾ = q⁽ᵖ⁻¹⁾ + c⁽ᵖ⁾`.
/// An empty store yields a zero context and no weights. With `topk` set, only
/// the k heaviest triples keep (renormalized) weight each round.
pub fn triple_attention(
    g: &mut Graph,
    q0: Var,
    triples: Option<Var>,
    hops: usize,
    topk: Option<usize>,
) -> Result<TripleAttention> {
    if hops == 0 {
        return Err(Error::InvalidInput("triple attention needs at least one hop".into()));
    }
    let hidden = g.shape(q0).1;
    let e = match triples {
        Some(e) if g.shape(e).0 > 0 => e,
        _ => {
            let zero = g.constant(Mat::zeros((1, hidden)));
            return Ok(TripleAttention {
                context: zero,
                alpha: None,
                query: q0,
                trace: Vec::new(),
            });
        }
    };
    let et = g.transpose(e);
    let mut q = q0;
    let mut trace = Vec::with_capacity(hops);
    for _ in 0..hops {
        let scores = g.matmul(q, et);
        let mut alpha = g.softmax_rows(scores);
        if let Some(k) = topk.filter(|&k| k < g.shape(e).0) {
            let mask = g.constant(top_k_mask(g.value(alpha), k));
            let kept = g.mul(alpha, mask);
            let total = g.sum(kept);
            let inv = g.recip(total);
            alpha = g.mul(kept, inv);
        }
        let context = g.matmul(alpha, e);
        q = g.add(q, context);
        trace.push(TripleHop { alpha, context, query: q });
    }
    let last = *trace.last().expect("non-empty");
    Ok(TripleAttention {
        context: last.context,
        alpha: Some(last.alpha),
        query: last.query,
        trace,
    })
}

/// Weighted dialogue context: the mean knowledge state queries the dialogue
/// memory through a full multi-hop pass. The updated state is discarded.
pub fn interactive_context(g: &mut Graph, ds: Var, dh: Var, h_kb: Option<Var>, params: &MemoryParams) -> Result<Var> {
    let q = match h_kb {
        Some(h) if g.shape(h).0 > 0 => g.mean_rows(h),
        _ => {
            let hidden = g.shape(dh).1;
            g.constant(Mat::zeros((1, hidden)))
        }
    };
    Ok(multi_hop(g, q, ds, dh, params)?.context)
}

/// One attention round in serialized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HopRecord {
    pub alpha: Vec<f64>,
    pub context_norm: f64,
}

/// One triple-attention round in serialized form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TripleHopRecord {
    pub alpha: Vec<f64>,
    pub context_norm: f64,
    pub query_norm: f64,
    pub top_triples: Vec<(String, String, String, f64)>,
}

fn norm(m: &Mat) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn hop_records(g: &Graph, trace: &[HopTrace]) -> Vec<HopRecord> {
    trace
        .iter()
        .map(|h| HopRecord {
            alpha: g.value(h.alpha).iter().copied().collect(),
            context_norm: norm(g.value(h.context)),
        })
        .collect()
}

/// `labels[j]` names triple j; `top` limits the listed triples per round.
pub fn triple_hop_records(
    g: &Graph,
    trace: &[TripleHop],
    labels: &[(String, String, String)],
    top: usize,
) -> Vec<TripleHopRecord> {
    trace
        .iter()
        .map(|h| {
            let alpha: Vec<f64> = g.value(h.alpha).iter().copied().collect();
            let mut order: Vec<usize> = (0..alpha.len()).collect();
            order.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(a.cmp(&b)));
            let top_triples = order
                .into_iter()
                .take(top)
                .map(|j| {
                    let (hd, r, t) = &labels[j];
                    (hd.clone(), r.clone(), t.clone(), alpha[j])
                })
                .collect();
            TripleHopRecord {
                context_norm: norm(g.value(h.context)),
                query_norm: norm(g.value(h.query)),
                alpha,
                top_triples,
            }
        })
        .collect()
}

/// Runs [`multi_hop`] on a value-level bank, writing the updated `D_S` back.
/// Returns the final context and the per-round records.
pub fn multi_hop_bank(
    store: &ParamStore,
    q: &Mat,
    bank: &mut StateBank,
    params: &MemoryParams,
) -> Result<(Mat, Vec<HopRecord>)> {
    let mut g = Graph::new(store);
    let qv = g.constant(q.clone());
    let (ds, dh) = bank.to_graph(&mut g, None);
    let out = multi_hop(&mut g, qv, ds, dh, params)?;
    bank.ds = g.value(out.ds).clone();
    Ok((g.value(out.context).clone(), hop_records(&g, &out.trace)))
}

/// Column-mean of a matrix as a `1 x n` row.
pub fn mean_row(m: &Mat) -> Mat {
    m.mean_axis(Axis(0)).expect("non-empty").insert_axis(Axis(0))
}
