//! Cross-modal contrastive training with a FIFO entity queue.
//!
//! Each mini-batch contributes four InfoNCE terms per triple: query→fused
//! entity (`fc`), query→mean visual prefix (`ac`), and the two reversed
//! directions anchored on the entity side with in-batch queries as
//! candidates. Queue entries are stored embeddings and carry no gradient.

use std::collections::{HashMap, VecDeque};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::{dot, normalize_backward, unit_or_zero, EncoderParams, EntityForward, HyperParams, QueryForward};
use crate::error::{CmrError, Result};
use crate::eval::Metrics;
use crate::featurize::{FeatureSet, FeatureVector};
use crate::kg::{EntityId, FilterIndex, RelationId, Triple, Vocabulary};

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub embedding: Vec<f64>,
    pub v_bar: Vec<f64>,
    pub entity: EntityId,
    /// Row of the entry within the batch that enqueued it.
    pub row: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct QueueBatch {
    step: u64,
    entries: Vec<QueueEntry>,
}

/// Ring buffer of the most recent `capacity_batches` mini-batches of target
/// entities. Fused embeddings and mean visual prefixes share slots.
#[derive(Debug, Clone)]
pub struct EntityQueue {
    capacity_batches: usize,
    batches: VecDeque<QueueBatch>,
}

/// One queue slot as seen by mask construction and the losses.
#[derive(Debug, Clone, Copy)]
pub struct QueueSlot<'a> {
    pub step: u64,
    pub entry: &'a QueueEntry,
}

impl EntityQueue {
    pub fn new(capacity_batches: usize) -> Self {
        Self {
            capacity_batches: capacity_batches.max(1),
            batches: VecDeque::with_capacity(capacity_batches + 1),
        }
    }

    /// Enqueue a batch and dequeue the oldest once over capacity.
    pub fn push_batch(&mut self, step: u64, entries: Vec<QueueEntry>) {
        self.batches.push_back(QueueBatch { step, entries });
        while self.batches.len() > self.capacity_batches {
            self.batches.pop_front();
        }
    }

    pub fn slots(&self) -> impl Iterator<Item = QueueSlot<'_>> {
        self.batches.iter().flat_map(|b| {
            b.entries
                .iter()
                .map(move |entry| QueueSlot { step: b.step, entry })
        })
    }

    pub fn len(&self) -> usize {
        self.batches.iter().map(|b| b.entries.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn num_batches(&self) -> usize {
        self.batches.len()
    }

    pub fn capacity_batches(&self) -> usize {
        self.capacity_batches
    }

    /// Steps of the batches currently held, oldest first.
    pub fn batch_steps(&self) -> Vec<u64> {
        self.batches.iter().map(|b| b.step).collect()
    }
}

/// Row-major boolean matrix; `true` marks a usable negative.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NegativeMask {
    pub rows: usize,
    pub cols: usize,
    pub usable: Vec<bool>,
}

impl NegativeMask {
    pub fn row(&self, i: usize) -> &[bool] {
        &self.usable[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.usable[i * self.cols + j]
    }
}

/// Mask queue slots that hold the anchor's own positive (same step and row)
/// or any entity `n` with `(h_i, r_i, n)` in the train set.
pub fn build_negative_mask(
    batch: &[Triple],
    step: u64,
    queue: &EntityQueue,
    train_index: &FilterIndex,
) -> NegativeMask {
    let slots: Vec<QueueSlot<'_>> = queue.slots().collect();
    let mut usable = Vec::with_capacity(batch.len() * slots.len());
    for (i, t) in batch.iter().enumerate() {
        for s in &slots {
            let own = s.step == step && s.entry.row == i;
            let known = train_index.contains(t.head, t.relation, s.entry.entity);
            usable.push(!own && !known);
        }
    }
    NegativeMask {
        rows: batch.len(),
        cols: slots.len(),
        usable,
    }
}

/// Mask for the reversed direction: in-batch query `j` is a usable negative
/// for entity anchor `i` unless `j == i` or `(h_j, r_j, t_i)` is a train
/// triple.
pub fn build_reverse_mask(batch: &[Triple], train_index: &FilterIndex) -> NegativeMask {
    let n = batch.len();
    let mut usable = Vec::with_capacity(n * n);
    for (i, anchor) in batch.iter().enumerate() {
        for (j, cand) in batch.iter().enumerate() {
            usable.push(i != j && !train_index.contains(cand.head, cand.relation, anchor.tail));
        }
    }
    NegativeMask {
        rows: n,
        cols: n,
        usable,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchMasks {
    pub forward: NegativeMask,
    pub reverse: NegativeMask,
}

pub fn build_batch_masks(
    batch: &[Triple],
    step: u64,
    queue: &EntityQueue,
    train_index: &FilterIndex,
) -> BatchMasks {
    BatchMasks {
        forward: build_negative_mask(batch, step, queue, train_index),
        reverse: build_reverse_mask(batch, train_index),
    }
}

/// `−log softmax(pos)` over `[pos, negs…]` and the softmax weights, via
/// log-sum-exp. With no negatives the loss is exactly 0.
pub fn info_nce(pos_logit: f64, neg_logits: &[f64]) -> (f64, f64, Vec<f64>) {
    if neg_logits.is_empty() {
        return (0.0, 1.0, Vec::new());
    }
    let max = neg_logits.iter().copied().fold(pos_logit, f64::max);
    let pos_w = (pos_logit - max).exp();
    let neg_w: Vec<f64> = neg_logits.iter().map(|l| (l - max).exp()).collect();
    let z = pos_w + neg_w.iter().sum::<f64>();
    let loss = -(pos_logit - max) + z.ln();
    (loss, pos_w / z, neg_w.into_iter().map(|w| w / z).collect())
}

fn masked_logits<'a>(
    anchor: &[f64],
    candidates: impl Iterator<Item = &'a [f64]>,
    mask_row: &[bool],
    temperature: f64,
) -> (Vec<usize>, Vec<f64>) {
    let mut idx = Vec::new();
    let mut logits = Vec::new();
    for (j, (c, &ok)) in candidates.zip(mask_row).enumerate() {
        if ok {
            idx.push(j);
            logits.push(dot(anchor, c) / temperature);
        }
    }
    (idx, logits)
}

/// Fusion contrastive loss for one query against the entity queue.
pub fn loss_fc(q: &[f64], e_pos: &[f64], queue: &EntityQueue, mask_row: &[bool], temperature: f64) -> f64 {
    let (_, negs) = masked_logits(q, queue.slots().map(|s| &s.entry.embedding[..]), mask_row, temperature);
    if negs.is_empty() {
        log::warn!("no usable negatives for fusion loss row");
    }
    info_nce(dot(q, e_pos) / temperature, &negs).0
}

/// Pre-align loss between a query and mean visual prefixes. Prefix means
/// enter the similarity L2-normalized (zero stays zero), like every other
/// embedding the similarity compares.
pub fn loss_ac(q: &[f64], v_bar: &[f64], queue: &EntityQueue, mask_row: &[bool], temperature: f64) -> f64 {
    let units: Vec<Vec<f64>> = queue.slots().map(|s| unit_or_zero(&s.entry.v_bar).0).collect();
    let (_, negs) = masked_logits(q, units.iter().map(Vec::as_slice), mask_row, temperature);
    if negs.is_empty() {
        log::warn!("no usable negatives for pre-align loss row");
    }
    info_nce(dot(q, &unit_or_zero(v_bar).0) / temperature, &negs).0
}

/// Fusion loss written over per-modality positive similarities
/// `s_f = Π s_m` and raw negative similarities.
pub fn loss_fc_from_similarities(modal_sims: &[f64], neg_sims: &[f64]) -> f64 {
    let s_f: f64 = modal_sims.iter().product();
    let neg: f64 = neg_sims.iter().sum();
    -(s_f / (s_f + neg)).ln()
}

/// `∂L_FC/∂s_h = −Σ s_f^n / (s_h (Π s_m + Σ s_f^n))` for each modality `h`.
pub fn fc_similarity_partials(modal_sims: &[f64], neg_sims: &[f64]) -> Vec<f64> {
    let s_f: f64 = modal_sims.iter().product();
    let neg: f64 = neg_sims.iter().sum();
    modal_sims.iter().map(|s_h| -neg / (s_h * (s_f + neg))).collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub fc: f64,
    pub ac: f64,
    pub fc_rev: f64,
    pub ac_rev: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn finish(mut self) -> Self {
        self.total = self.fc + self.ac + self.fc_rev + self.ac_rev;
        self
    }

    pub fn is_finite(&self) -> bool {
        [self.fc, self.ac, self.fc_rev, self.ac_rev, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Inputs for one training example.
#[derive(Debug, Clone, Copy)]
pub struct BatchExample<'a> {
    pub triple: Triple,
    pub query: &'a [f32],
    pub visual: &'a [f32],
    pub text: &'a [f32],
}

pub struct BatchForward {
    pub queries: Vec<QueryForward>,
    pub entities: Vec<EntityForward>,
}

pub fn forward_batch(params: &EncoderParams, batch: &[BatchExample<'_>]) -> Result<BatchForward> {
    let mut queries = Vec::with_capacity(batch.len());
    let mut entities = Vec::with_capacity(batch.len());
    for ex in batch {
        queries.push(params.query_forward(ex.query)?);
        entities.push(params.entity_forward(ex.visual, ex.text)?);
    }
    Ok(BatchForward { queries, entities })
}

/// Queue entries for the current batch (detached copies).
pub fn queue_entries(batch: &[BatchExample<'_>], fwd: &BatchForward) -> Vec<QueueEntry> {
    batch
        .iter()
        .zip(&fwd.entities)
        .enumerate()
        .map(|(row, (ex, e))| QueueEntry {
            embedding: e.encoding.e_f.clone(),
            v_bar: e.encoding.v_bar.clone(),
            entity: ex.triple.tail,
            row,
        })
        .collect()
}

/// Loss of a batch against a fixed queue, summed over rows.
pub fn loss_total(
    params: &EncoderParams,
    batch: &[BatchExample<'_>],
    queue: &EntityQueue,
    masks: &BatchMasks,
    temperature: f64,
) -> Result<LossBreakdown> {
    let fwd = forward_batch(params, batch)?;
    Ok(accumulate(params, &fwd, queue, masks, temperature, None))
}

/// Exact gradients of [`loss_total`] with respect to every parameter.
pub fn compute_gradients(
    params: &EncoderParams,
    batch: &[BatchExample<'_>],
    queue: &EntityQueue,
    masks: &BatchMasks,
    temperature: f64,
) -> Result<(LossBreakdown, EncoderParams)> {
    let fwd = forward_batch(params, batch)?;
    let mut grads = params.zeros_like();
    let losses = accumulate(params, &fwd, queue, masks, temperature, Some(&mut grads));
    for (name, _, t) in grads.tensors() {
        if t.iter().any(|v| !v.is_finite()) {
            return Err(CmrError::numeric(name, "non-finite gradient"));
        }
    }
    Ok((losses, grads))
}

fn axpy(acc: &mut [f64], scale: f64, x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += scale * b;
    }
}

#[derive(Clone, Copy)]
enum Pick {
    Fused,
    Prefix,
}

fn accumulate(
    params: &EncoderParams,
    fwd: &BatchForward,
    queue: &EntityQueue,
    masks: &BatchMasks,
    temperature: f64,
    grads: Option<&mut EncoderParams>,
) -> LossBreakdown {
    let n = fwd.queries.len();
    let d = params.embed_dim;
    let inv_t = 1.0 / temperature;
    let slots: Vec<QueueSlot<'_>> = queue.slots().collect();
    let queue_units: Vec<Vec<f64>> = slots.iter().map(|s| unit_or_zero(&s.entry.v_bar).0).collect();
    let vb: Vec<(Vec<f64>, f64)> = fwd.entities.iter().map(|e| unit_or_zero(&e.encoding.v_bar)).collect();
    let mut g_q = vec![vec![0.0; d]; n];
    let mut g_ef = vec![vec![0.0; d]; n];
    let mut g_vu = vec![vec![0.0; d]; n];
    let mut out = LossBreakdown::default();
    let mut empty_rows = 0usize;

    for i in 0..n {
        let q = &fwd.queries[i].q;
        let e_f = &fwd.entities[i].encoding.e_f;
        let v_unit = &vb[i].0;

        // Query → fused entity, query → mean visual prefix.
        for pick in [Pick::Fused, Pick::Prefix] {
            let (target, cands): (&[f64], Vec<&[f64]>) = match pick {
                Pick::Fused => (e_f, slots.iter().map(|s| &s.entry.embedding[..]).collect()),
                Pick::Prefix => (v_unit, queue_units.iter().map(Vec::as_slice).collect()),
            };
            let (idx, negs) = masked_logits(q, cands.iter().copied(), masks.forward.row(i), temperature);
            if negs.is_empty() {
                empty_rows += 1;
                continue;
            }
            let (loss, p_pos, p_neg) = info_nce(dot(q, target) * inv_t, &negs);
            let c = (p_pos - 1.0) * inv_t;
            axpy(&mut g_q[i], c, target);
            for (&j, &p) in idx.iter().zip(&p_neg) {
                axpy(&mut g_q[i], p * inv_t, cands[j]);
            }
            match pick {
                Pick::Fused => {
                    out.fc += loss;
                    axpy(&mut g_ef[i], c, q);
                }
                Pick::Prefix => {
                    out.ac += loss;
                    axpy(&mut g_vu[i], c, q);
                }
            }
        }

        // Entity-side anchors against in-batch queries.
        for pick in [Pick::Fused, Pick::Prefix] {
            let anchor: &[f64] = match pick {
                Pick::Fused => e_f,
                Pick::Prefix => v_unit,
            };
            let (idx, negs) = masked_logits(
                anchor,
                fwd.queries.iter().map(|f| &f.q[..]),
                masks.reverse.row(i),
                temperature,
            );
            if negs.is_empty() {
                empty_rows += 1;
                continue;
            }
            let (loss, p_pos, p_neg) = info_nce(dot(anchor, q) * inv_t, &negs);
            let c = (p_pos - 1.0) * inv_t;
            let g_anchor = match pick {
                Pick::Fused => {
                    out.fc_rev += loss;
                    &mut g_ef[i]
                }
                Pick::Prefix => {
                    out.ac_rev += loss;
                    &mut g_vu[i]
                }
            };
            axpy(g_anchor, c, q);
            for (&j, &p) in idx.iter().zip(&p_neg) {
                axpy(g_anchor, p * inv_t, &fwd.queries[j].q);
            }
            axpy(&mut g_q[i], c, anchor);
            for (&j, &p) in idx.iter().zip(&p_neg) {
                axpy(&mut g_q[j], p * inv_t, anchor);
            }
        }
    }
    if empty_rows > 0 {
        log::warn!("{empty_rows} loss terms had no usable negatives and contribute 0");
    }

    if let Some(grads) = grads {
        for i in 0..n {
            params.query_backward(&fwd.queries[i], &g_q[i], grads);
            let g_vb = normalize_backward(&vb[i].0, vb[i].1, &g_vu[i]);
            params.entity_backward(&fwd.entities[i], &g_ef[i], &g_vb, grads);
        }
    }
    out.finish()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    #[default]
    AdamW,
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub queue_batches: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            queue_batches: 3,
            learning_rate: 2e-3,
            weight_decay: 0.01,
            max_epochs: 40,
            patience: 3,
            seed: 0,
            optimizer: OptimizerKind::AdamW,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.queue_batches == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(CmrError::Config(
                "batch_size, queue_batches, max_epochs and patience must be >= 1".into(),
            ));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(CmrError::Config(
                "learning_rate must be > 0 and weight_decay >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam or plain SGD, both with linear learning-rate
/// decay to zero over the scheduled steps.
pub struct Optimizer {
    kind: OptimizerKind,
    base_lr: f64,
    weight_decay: f64,
    total_steps: usize,
    t: usize,
    m: EncoderParams,
    v: EncoderParams,
}

impl Optimizer {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    pub fn new(cfg: &TrainConfig, params: &EncoderParams, total_steps: usize) -> Self {
        Self {
            kind: cfg.optimizer,
            base_lr: cfg.learning_rate,
            weight_decay: cfg.weight_decay,
            total_steps: total_steps.max(1),
            t: 0,
            m: params.zeros_like(),
            v: params.zeros_like(),
        }
    }

    pub fn current_lr(&self) -> f64 {
        let frac = self.t as f64 / self.total_steps as f64;
        self.base_lr * (1.0 - frac).max(0.0)
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &EncoderParams) {
        let lr = self.current_lr();
        self.t += 1;
        let grads = grads.tensors();
        match self.kind {
            OptimizerKind::Sgd => {
                for ((_, _, p), (_, _, g)) in params.tensors_mut().into_iter().zip(grads) {
                    for (w, gw) in p.iter_mut().zip(g) {
                        *w -= lr * (gw + self.weight_decay * *w);
                    }
                }
            }
            OptimizerKind::AdamW => {
                let bc1 = 1.0 - Self::BETA1.powi(self.t as i32);
                let bc2 = 1.0 - Self::BETA2.powi(self.t as i32);
                let ms = self.m.tensors_mut();
                let vs = self.v.tensors_mut();
                for ((((_, _, p), (_, _, g)), (_, _, m)), (_, _, v)) in
                    params.tensors_mut().into_iter().zip(grads).zip(ms).zip(vs)
                {
                    for k in 0..p.len() {
                        m[k] = Self::BETA1 * m[k] + (1.0 - Self::BETA1) * g[k];
                        v[k] = Self::BETA2 * v[k] + (1.0 - Self::BETA2) * g[k] * g[k];
                        let mhat = m[k] / bc1;
                        let vhat = v[k] / bc2;
                        p[k] -= lr * (mhat / (vhat.sqrt() + Self::EPS) + self.weight_decay * p[k]);
                    }
                }
            }
        }
    }
}

/// Patience-based early stopping on a score where larger is better.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: Option<(usize, f64)>,
    since_best: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopDecision {
    Improved,
    Continue,
    Stop,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            since_best: 0,
        }
    }

    pub fn observe(&mut self, epoch: usize, score: f64) -> StopDecision {
        match self.best {
            Some((_, b)) if score <= b => {
                self.since_best += 1;
                if self.since_best >= self.patience {
                    StopDecision::Stop
                } else {
                    StopDecision::Continue
                }
            }
            _ => {
                self.best = Some((epoch, score));
                self.since_best = 0;
                StopDecision::Improved
            }
        }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best.map(|(e, _)| e)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub l_fc: f64,
    pub l_ac: f64,
    pub l_fc_rev: f64,
    pub l_ac_rev: f64,
    pub valid_hits1: f64,
    pub valid_mrr: f64,
}

impl EpochRecord {
    pub fn total(&self) -> f64 {
        self.l_fc + self.l_ac + self.l_fc_rev + self.l_ac_rev
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Everything the trainer reads: training triples (reversed forms
/// included), the train-only filter index used for masking, and features.
pub struct TrainingData<'a> {
    pub triples: &'a [Triple],
    pub train_index: &'a FilterIndex,
    pub vocab: &'a Vocabulary,
    pub features: &'a FeatureSet,
}

pub fn write_history_csv(history: &[EpochRecord], writer: impl std::io::Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "l_fc", "l_ac", "l_fc_rev", "l_ac_rev", "valid_hits1", "valid_mrr"])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.6}", r.l_fc),
            format!("{:.6}", r.l_ac),
            format!("{:.6}", r.l_fc_rev),
            format!("{:.6}", r.l_ac_rev),
            format!("{:.6}", r.valid_hits1),
            format!("{:.6}", r.valid_mrr),
        ])?;
    }
    w.flush().map_err(|e| CmrError::io("history.csv", e))?;
    Ok(())
}

/// Train from freshly initialized parameters. `validate` scores a
/// parameter snapshot after every epoch; the snapshot with the best
/// validation Hits@1 is returned, rounded to checkpoint precision.
pub fn train(
    cfg: &TrainConfig,
    hp: &HyperParams,
    data: &TrainingData<'_>,
    mut validate: impl FnMut(&EncoderParams) -> Result<Metrics>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    hp.validate()?;
    if data.triples.is_empty() {
        return Err(CmrError::Config("empty train set".into()));
    }
    let mut params = EncoderParams::init(hp, data.features.text_dim(), data.features.visual_dim, cfg.seed)?;

    let mut query_cache: HashMap<(EntityId, RelationId), FeatureVector> = HashMap::new();
    for t in data.triples {
        if let std::collections::hash_map::Entry::Vacant(slot) = query_cache.entry(t.query()) {
            slot.insert(data.features.query(data.vocab, t.head, t.relation)?);
        }
    }

    let batches_per_epoch = data.triples.len().div_ceil(cfg.batch_size);
    let mut optimizer = Optimizer::new(cfg, &params, batches_per_epoch * cfg.max_epochs);
    let mut queue = EntityQueue::new(cfg.queue_batches);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..data.triples.len()).collect();
    let mut history = Vec::new();
    let mut best = params.clone();
    let mut step = 0u64;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sums = LossBreakdown::default();
        for chunk in order.chunks(cfg.batch_size) {
            let triples: Vec<Triple> = chunk.iter().map(|&i| data.triples[i]).collect();
            let mut examples = Vec::with_capacity(triples.len());
            for t in &triples {
                let (visual, text) = data.features.entity(t.tail)?;
                examples.push(BatchExample {
                    triple: *t,
                    query: &query_cache[&t.query()].values,
                    visual: &visual.values,
                    text: &text.values,
                });
            }
            let diverged = |reason: String, best: &EncoderParams| CmrError::Diverged {
                epoch,
                reason,
                last_good: Box::new(best.clone()),
            };
            let fwd = forward_batch(&params, &examples).map_err(|e| diverged(e.to_string(), &best))?;
            queue.push_batch(step, queue_entries(&examples, &fwd));
            let masks = build_batch_masks(&triples, step, &queue, data.train_index);
            let (losses, grads) = compute_gradients(&params, &examples, &queue, &masks, hp.temperature)
                .map_err(|e| diverged(e.to_string(), &best))?;
            if !losses.is_finite() {
                return Err(diverged("non-finite loss".into(), &best));
            }
            sums.fc += losses.fc;
            sums.ac += losses.ac;
            sums.fc_rev += losses.fc_rev;
            sums.ac_rev += losses.ac_rev;
            optimizer.step(&mut params, &grads);
            step += 1;
        }
        params
            .check_finite()
            .map_err(|e| CmrError::Diverged {
                epoch,
                reason: e.to_string(),
                last_good: Box::new(best.clone()),
            })?;

        let metrics = validate(&params)?;
        let n = data.triples.len() as f64;
        history.push(EpochRecord {
            epoch,
            l_fc: sums.fc / n,
            l_ac: sums.ac / n,
            l_fc_rev: sums.fc_rev / n,
            l_ac_rev: sums.ac_rev / n,
            valid_hits1: metrics.hits1,
            valid_mrr: metrics.mrr,
        });
        log::info!(
            "epoch {epoch}: loss {:.4} valid hits@1 {:.4} mrr {:.4}",
            history.last().unwrap().total(),
            metrics.hits1,
            metrics.mrr
        );
        match stopper.observe(epoch, metrics.hits1) {
            StopDecision::Improved => best = params.clone(),
            StopDecision::Continue => {}
            StopDecision::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    best.round_to_f32();
    Ok(TrainOutcome {
        params: best,
        history,
        best_epoch: stopper.best_epoch().unwrap_or(0),
        stopped_early,
    })
}
