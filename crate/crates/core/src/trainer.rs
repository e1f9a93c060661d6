//! Training loop: Adam over per-turn teacher-forced losses, global-norm
//! clipping, seeded shuffling, and validation-based model selection.

use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mat, ParamId, ParamStore};
use crate::corpus::{make_training_examples, CorpusSplit, TrainingExample};
use crate::encoder::StateBank;
use crate::error::{Error, Result};
use crate::model::{Model, TripleContext};
use crate::triples::TripleStore;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Device {
    #[default]
    Cpu,
    Accelerator,
}

fn default_clip() -> f64 {
    5.0
}

fn default_selector_k() -> usize {
    2
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    /// dialogues per optimizer step
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    #[serde(default = "default_clip")]
    pub grad_clip: f64,
    #[serde(default)]
    pub device: Device,
    /// knowledge sentences kept per turn when the budget overflows
    #[serde(default = "default_selector_k")]
    pub selector_k: usize,
    /// stop after this many epochs without a lower validation loss
    #[serde(default)]
    pub patience: Option<usize>,
    /// stop once the epoch's training loss drops below this value
    #[serde(default)]
    pub stop_below: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0005,
            batch_size: 8,
            epochs: 10,
            seed: 0,
            grad_clip: 5.0,
            device: Device::Cpu,
            selector_k: 2,
            patience: None,
            stop_below: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidInput("learning_rate must be finite and non-negative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidInput("batch_size must be at least 1".into()));
        }
        if self.grad_clip <= 0.0 {
            return Err(Error::InvalidInput("grad_clip must be positive".into()));
        }
        if self.device == Device::Accelerator {
            return Err(Error::InvalidInput("no accelerator backend is available; use cpu".into()));
        }
        Ok(())
    }
}

/// One dialogue ready for training.
#[derive(Debug, Clone)]
pub struct PreparedDialogue {
    pub dialogue_id: String,
    pub examples: Vec<TrainingExample>,
    pub triples: TripleContext,
}

impl PreparedDialogue {
    pub fn target_tokens(&self) -> usize {
        self.examples.iter().map(|e| e.target.len() + 1).sum()
    }
}

/// Builds training examples and looks up each dialogue's triples. Dialogues
/// without any agent2 response are dropped.
pub fn prepare(
    model: &Model,
    split: &CorpusSplit,
    triples: &HashMap<String, TripleStore>,
    selector_k: usize,
) -> Vec<PreparedDialogue> {
    split
        .dialogues
        .iter()
        .filter_map(|d| {
            let examples = make_training_examples(d, selector_k);
            if examples.is_empty() {
                return None;
            }
            let store = triples.get(&d.dialogue_id).cloned().unwrap_or_default();
            let store = store.capped(model.config.triple_cap);
            Some(PreparedDialogue {
                dialogue_id: d.dialogue_id.clone(),
                examples,
                triples: model.triple_context(&store),
            })
        })
        .collect()
}

/// Parameter gradients keyed in a fixed order.
pub type Grads = BTreeMap<ParamId, Mat>;

/// Adam with bias correction.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Grads,
    v: Grads,
}

impl Default for Adam {
    fn default() -> Self {
        Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Grads::new(),
            v: Grads::new(),
        }
    }
}

impl Adam {
    pub fn step(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (id, g) in grads {
            let m = self.m.entry(*id).or_insert_with(|| Mat::zeros(g.dim()));
            let v = self.v.entry(*id).or_insert_with(|| Mat::zeros(g.dim()));
            let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
            ndarray::Zip::from(store.get_mut(*id))
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
                });
        }
    }
}

pub fn global_norm(grads: &Grads) -> f64 {
    grads.values().map(|g| g.iter().map(|x| x * x).sum::<f64>()).sum::<f64>().sqrt()
}

/// Scales all gradients so their global norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut Grads, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if norm > max_norm {
        let k = max_norm / norm;
        for g in grads.values_mut() {
            g.mapv_inplace(|x| x * k);
        }
    }
    norm
}

/// Sum of per-turn losses over a dialogue and, when requested, the summed
/// parameter gradients. Turns run in order with a carried bank.
pub fn dialogue_loss(model: &Model, dialogue: &PreparedDialogue, grads: Option<&mut Grads>) -> Result<f64> {
    let mut bank = StateBank::empty(model.hidden());
    let mut total = 0.0;
    let mut acc = grads;
    for ex in &dialogue.examples {
        let mut g = Graph::new(&model.store);
        let out = model.turn_loss(&mut g, &mut bank, ex, &dialogue.triples)?;
        total += g.scalar(out.loss);
        if let Some(acc) = acc.as_deref_mut() {
            let grads = g.backward(out.loss);
            for (id, m) in grads.params() {
                match acc.get_mut(&id) {
                    Some(a) => *a += m,
                    None => {
                        acc.insert(id, m.clone());
                    }
                }
            }
        }
    }
    Ok(total)
}

/// Mean per-turn loss over a set of dialogues.
pub fn mean_loss(model: &Model, dialogues: &[PreparedDialogue]) -> Result<f64> {
    let turns: usize = dialogues.iter().map(|d| d.examples.len()).sum();
    if turns == 0 {
        return Err(Error::Empty("no training turns"));
    }
    let mut total = 0.0;
    for d in dialogues {
        total += dialogue_loss(model, d, None)?;
    }
    Ok(total / turns as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// epoch of the selected parameters
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub history: Vec<EpochLog>,
}

/// One optimizer step on a batch of dialogues. The loss is the mean of the
/// turn losses in the batch.
pub fn train_step(
    model: &mut Model,
    adam: &mut Adam,
    batch: &[&PreparedDialogue],
    lr: f64,
    clip: f64,
) -> Result<f64> {
    let turns: usize = batch.iter().map(|d| d.examples.len()).sum();
    let ids = || batch.iter().map(|d| d.dialogue_id.as_str()).collect::<Vec<_>>().join(", ");
    let mut grads = Grads::new();
    let mut total = 0.0;
    for d in batch {
        total += dialogue_loss(model, d, Some(&mut grads)).map_err(|e| match e {
            Error::NonFinite(msg) => Error::NonFinite(format!("{msg} on batch [{}]", ids())),
            other => other,
        })?;
    }
    let loss = total / turns as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {loss} on batch [{}]", ids())));
    }
    let k = 1.0 / turns as f64;
    for g in grads.values_mut() {
        g.mapv_inplace(|x| x * k);
    }
    clip_global_norm(&mut grads, clip);
    adam.step(&mut model.store, &grads, lr);
    Ok(loss)
}

/// Trains in place and leaves the parameters with the lowest validation
/// loss in `model`. With no validation dialogues the training set is used.
/// Each epoch appends one JSON line to `log`.
pub fn train(
    model: &mut Model,
    train_set: &[PreparedDialogue],
    valid_set: &[PreparedDialogue],
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() {
        return Err(Error::Empty("training set has no dialogues"));
    }
    let valid = if valid_set.is_empty() { train_set } else { valid_set };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = Adam::default();
    let mut best_loss = f64::INFINITY;
    let mut best = model.store.clone();
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 1..=config.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut turns = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PreparedDialogue> = chunk.iter().map(|&i| &train_set[i]).collect();
            let n: usize = batch.iter().map(|d| d.examples.len()).sum();
            let loss = train_step(model, &mut adam, &batch, config.learning_rate, config.grad_clip)
                .map_err(|e| match e {
                    Error::NonFinite(msg) => Error::NonFinite(format!("epoch {epoch}, batch {b}: {msg}")),
                    other => other,
                })?;
            total += loss * n as f64;
            turns += n;
        }
        let train_loss = total / turns as f64;
        let valid_loss = mean_loss(model, valid)?;
        let entry = EpochLog {
            epoch,
            train_loss,
            valid_loss,
            seconds: start.elapsed().as_secs_f64(),
        };
        writeln!(log, "{}", serde_json::to_string(&entry).expect("log serializes"))
            .map_err(|e| Error::InvalidInput(format!("writing training log: {e}")))?;
        tracing::info!(epoch, train_loss, valid_loss, "epoch finished");
        history.push(entry);
        if valid_loss < best_loss {
            best_loss = valid_loss;
            best = model.store.clone();
            best_epoch = epoch;
        }
        if config.patience.is_some_and(|p| epoch - best_epoch >= p) {
            break;
        }
        if config.stop_below.is_some_and(|t| train_loss < t) {
            break;
        }
    }
    model.store = best;
    Ok(TrainOutcome {
        best_epoch,
        best_valid_loss: best_loss,
        history,
    })
}
