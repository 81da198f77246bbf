//! Backpropagation through time over window sequences.
//!
//! A document is laid out with the same [`WindowPlan`] evaluation uses and
//! its windows are grouped into sequences of `windows_per_sequence`.
//! Gradients flow through carries inside a sequence. At a sequence
//! boundary the carry value is handed to the next sequence of the same
//! document but detached from the graph (truncated BPTT).
//!
//! Two backward strategies produce the same gradients:
//!
//! * [`Checkpointing::Full`] records every window on one tape;
//! * [`Checkpointing::Bottleneck`] keeps only each window's pooled summary
//!   and carry (`2k` scalars) during the forward sweep and re-runs every
//!   window once during the backward sweep, feeding the stored carry in as
//!   a leaf and seeding its adjoint from the window after it.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::model::{CarryMask, Model};
use crate::nn::{adam_update, AdamConfig, Array, Checkpoint, Purpose, Rng, Tape, Var};
use crate::par::{self, Parallelism};
use crate::recurrence;
use crate::windowing::{evaluate_corpus, make_plan, EvalDoc, PlanMode, WindowPlan, WindowSpec};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Checkpointing {
    Full,
    #[default]
    Bottleneck,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub windows_per_sequence: usize,
    pub window: usize,
    pub overlap: usize,
    pub mode: PlanMode,
    pub lr: f64,
    pub warmup_steps: u64,
    pub epochs: usize,
    /// Validate whenever this many more scored tokens have been trained on.
    pub validate_every_tokens: u64,
    /// Stop after this many optimiser steps even if epochs remain.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub checkpointing: Checkpointing,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Sequences per optimiser step, drawn from independent document streams.
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub mask: CarryMask,
    /// When false the log's wallclock column is written as 0 so that
    /// reruns produce byte-identical logs.
    pub record_wallclock: bool,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            windows_per_sequence: 20,
            window: 64,
            overlap: 0,
            mode: PlanMode::Recurrent,
            lr: 1e-3,
            warmup_steps: 100,
            epochs: 2,
            validate_every_tokens: 200_000,
            max_steps: None,
            seed: 0,
            checkpointing: Checkpointing::Bottleneck,
            clip_norm: Some(1.0),
            batch_size: 1,
            adam: AdamConfig::default(),
            mask: CarryMask::Visible,
            record_wallclock: true,
            parallelism: Parallelism::Parallel,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if self.windows_per_sequence == 0 {
            return fail("windows_per_sequence must be >= 1");
        }
        if self.window == 0 {
            return fail("window must be >= 1");
        }
        if self.overlap >= self.window {
            return Err(Error::InvalidOverlap {
                overlap: self.overlap,
                window: self.window,
            });
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return fail("batch_size and epochs must be >= 1");
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return fail("lr must be a finite non-negative number");
        }
        if self.validate_every_tokens == 0 {
            return fail("validate_every_tokens must be >= 1");
        }
        Ok(())
    }

    /// The plan training uses for a document of `n` tokens. Evaluation
    /// builds the identical plan.
    pub fn plan(&self, n: usize) -> Result<WindowPlan> {
        make_plan(n, self.window, self.overlap, self.mode)
    }
}

/// Linear warmup from 0 to `lr` over `warmup` steps, constant afterwards.
pub fn lr_schedule(step: u64, lr: f64, warmup: u64) -> f64 {
    if warmup == 0 {
        return lr;
    }
    lr * (step as f64 / warmup as f64).min(1.0)
}

/// Activation accounting for one sequence step.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MemoryStats {
    /// Window forward passes executed, recomputations included.
    pub window_forwards: usize,
    /// Largest number of activation scalars alive at any point.
    pub peak_live_scalars: usize,
    /// Scalars retained between windows after the forward sweep, one
    /// entry per window boundary.
    pub retained_per_boundary: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct SequenceOutcome {
    /// Sum of NLL over scored targets.
    pub nll_sum: f64,
    pub scored: usize,
    /// Gradient of the mean NLL, aligned with the model's parameter ids.
    pub grads: Vec<Array>,
    /// Carry produced by the last window, for the next sequence.
    pub final_carry: Option<Vec<f64>>,
    pub stats: MemoryStats,
}

impl SequenceOutcome {
    pub fn loss(&self) -> f64 {
        self.nll_sum / self.scored as f64
    }
}

/// Token-level inputs, targets and loss mask of one window.
fn window_targets<'d>(doc: &'d [u32], w: &WindowSpec) -> (&'d [u32], Vec<u32>, Vec<bool>) {
    let (a, b) = w.input;
    let tokens = &doc[a - 1..b];
    let mut targets = Vec::with_capacity(tokens.len());
    let mut mask = Vec::with_capacity(tokens.len());
    for r in 0..tokens.len() {
        // row r sits at position a + r and predicts position a + r + 1
        let pos = a + r + 1;
        targets.push(doc.get(pos - 1).copied().unwrap_or(0));
        mask.push(pos >= w.scored.0 && pos <= w.scored.1);
    }
    (tokens, targets, mask)
}

struct WindowNodes {
    loss: Var,
    carry_out: Option<(Var, Var)>,
}

/// Records one window: forward pass, scaled loss and (in recurrent mode)
/// the recurrence step producing the next carry.
fn record_window(
    tape: &mut Tape,
    model: &Model,
    doc: &[u32],
    w: &WindowSpec,
    carry: Option<Var>,
    mode: PlanMode,
    mask: CarryMask,
    scale: f64,
) -> Result<WindowNodes> {
    let (tokens, targets, loss_mask) = window_targets(doc, w);
    let g = model.forward_taped(tape, tokens, carry, mask)?;
    let loss = tape.cross_entropy(g.logits, &targets, &loss_mask, scale)?;
    let carry_out = match mode {
        PlanMode::Recurrent => Some(recurrence::recurrence_step_taped(tape, model, &g.hiddens)?),
        PlanMode::Baseline => None,
    };
    Ok(WindowNodes { loss, carry_out })
}

fn check_sequence(doc: &[u32], windows: &[WindowSpec], init_carry: Option<&[f64]>, k: usize) -> Result<usize> {
    if windows.is_empty() {
        return Err(Error::Input("sequence has no windows".into()));
    }
    if let Some(w) = windows.iter().find(|w| w.input.1 > doc.len() || w.scored.1 > doc.len()) {
        return Err(Error::Plan(format!(
            "window {:?} exceeds document of {} tokens",
            w.input,
            doc.len()
        )));
    }
    if let Some(c) = init_carry {
        if c.len() != k {
            return Err(Error::shape("initial carry", &[c.len()], &[k]));
        }
    }
    Ok(windows.iter().map(|w| w.scored_count()).sum())
}

fn collect_grads(g: &crate::nn::Gradients, into: &mut [Array]) {
    for (id, acc) in into.iter_mut().enumerate() {
        if let Some(d) = g.param(id) {
            acc.add_assign(d);
        }
    }
}

/// Loss and gradients of a window sequence, recorded on a single tape.
///
/// `init_carry` is a detached carry from the previous sequence (ignored in
/// baseline mode). The loss is the mean NLL over every scored target.
pub fn bptt_sequence_step(
    model: &Model,
    doc: &[u32],
    windows: &[WindowSpec],
    init_carry: Option<&[f64]>,
    mode: PlanMode,
    mask: CarryMask,
) -> Result<SequenceOutcome> {
    let k = model.config().hidden;
    let scored = check_sequence(doc, windows, init_carry, k)?;
    let scale = 1.0 / scored as f64;
    let mut tape = Tape::new();
    let mut carry = match (mode, init_carry) {
        (PlanMode::Recurrent, Some(c)) => Some(tape.input(Array::vector(c.to_vec()))),
        _ => None,
    };
    let mut total: Option<Var> = None;
    let mut retained = Vec::new();
    for w in windows {
        let nodes = record_window(&mut tape, model, doc, w, carry, mode, mask, scale)?;
        total = Some(match total {
            Some(t) => tape.add(t, nodes.loss)?,
            None => nodes.loss,
        });
        carry = nodes.carry_out.map(|(z, h)| {
            retained.push(tape.value(z).len() + tape.value(h).len());
            h
        });
    }
    let loss = total.expect("at least one window");
    let grads_tape = tape.backward(loss)?;
    let mut grads = model.params().zeros_like();
    collect_grads(&grads_tape, &mut grads);
    Ok(SequenceOutcome {
        nll_sum: tape.value(loss).data()[0] * scored as f64,
        scored,
        grads,
        final_carry: carry.map(|h| tape.value(h).data().to_vec()),
        stats: MemoryStats {
            window_forwards: windows.len(),
            peak_live_scalars: tape.activation_scalars(),
            retained_per_boundary: retained,
        },
    })
}

/// Same gradients as [`bptt_sequence_step`], keeping only `z` and
/// `h_prev` between windows and recomputing each window once on the way
/// back.
pub fn checkpointed_backward(
    model: &Model,
    doc: &[u32],
    windows: &[WindowSpec],
    init_carry: Option<&[f64]>,
    mode: PlanMode,
    mask: CarryMask,
) -> Result<SequenceOutcome> {
    let k = model.config().hidden;
    let scored = check_sequence(doc, windows, init_carry, k)?;
    let scale = 1.0 / scored as f64;
    let init = match mode {
        PlanMode::Recurrent => init_carry.map(<[f64]>::to_vec),
        PlanMode::Baseline => None,
    };

    // Boundary store: (z, h_prev) of every completed window.
    let mut store: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(windows.len());
    let store_scalars = |s: &Vec<(Vec<f64>, Vec<f64>)>| s.iter().map(|(z, h)| z.len() + h.len()).sum::<usize>();
    let mut stats = MemoryStats::default();
    let mut nll_sum = 0.0;

    let carry_in = |i: usize, store: &Vec<(Vec<f64>, Vec<f64>)>| -> Option<Vec<f64>> {
        match mode {
            PlanMode::Baseline => None,
            PlanMode::Recurrent if i == 0 => init.clone(),
            PlanMode::Recurrent => Some(store[i - 1].1.clone()),
        }
    };

    for (i, w) in windows.iter().enumerate() {
        let mut tape = Tape::new();
        let c = carry_in(i, &store).map(|c| tape.input(Array::vector(c)));
        let nodes = record_window(&mut tape, model, doc, w, c, mode, mask, scale)?;
        stats.window_forwards += 1;
        stats.peak_live_scalars = stats
            .peak_live_scalars
            .max(tape.activation_scalars() + store_scalars(&store));
        nll_sum += tape.value(nodes.loss).data()[0] / scale;
        if let Some((z, h)) = nodes.carry_out {
            store.push((tape.value(z).data().to_vec(), tape.value(h).data().to_vec()));
        }
    }
    stats.retained_per_boundary = store.iter().map(|(z, h)| z.len() + h.len()).collect();
    let final_carry = store.last().map(|(_, h)| h.clone());

    let mut grads = model.params().zeros_like();
    let mut carry_adjoint: Option<Array> = None;
    for (i, w) in windows.iter().enumerate().rev() {
        // boundaries from window i onward are no longer needed
        store.truncate(i);
        let mut tape = Tape::new();
        let c = carry_in(i, &store).map(|c| tape.input(Array::vector(c)));
        let nodes = record_window(&mut tape, model, doc, w, c, mode, mask, scale)?;
        stats.window_forwards += 1;
        let adj_scalars = carry_adjoint.as_ref().map_or(0, Array::len);
        stats.peak_live_scalars = stats
            .peak_live_scalars
            .max(tape.activation_scalars() + store_scalars(&store) + adj_scalars);

        let mut seeds = vec![(nodes.loss, Array::scalar(1.0))];
        if let (Some((_, h)), Some(adj)) = (nodes.carry_out, carry_adjoint.take()) {
            seeds.push((h, adj));
        }
        let g = tape.backward_seeded(&seeds)?;
        collect_grads(&g, &mut grads);
        carry_adjoint = c.and_then(|c| g.of(c).cloned());
    }
    Ok(SequenceOutcome {
        nll_sum,
        scored,
        grads,
        final_carry,
        stats,
    })
}

/// Convenience wrapper: plans `tokens` as one sequence and runs the
/// configured backward strategy.
pub fn sequence_gradients(model: &Model, tokens: &[u32], cfg: &TrainConfig) -> Result<SequenceOutcome> {
    if tokens.len() < cfg.window.max(2) {
        return Err(Error::Input(format!(
            "slice of {} tokens is shorter than one window of {}",
            tokens.len(),
            cfg.window
        )));
    }
    let plan = cfg.plan(tokens.len())?;
    run_sequence(model, tokens, &plan.windows, None, cfg)
}

fn run_sequence(
    model: &Model,
    doc: &[u32],
    windows: &[WindowSpec],
    init_carry: Option<&[f64]>,
    cfg: &TrainConfig,
) -> Result<SequenceOutcome> {
    match cfg.checkpointing {
        Checkpointing::Full => bptt_sequence_step(model, doc, windows, init_carry, cfg.mode, cfg.mask),
        Checkpointing::Bottleneck => {
            checkpointed_backward(model, doc, windows, init_carry, cfg.mode, cfg.mask)
        }
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct LogRecord {
    pub step: u64,
    pub tokens_seen: u64,
    pub lr: f64,
    /// Mean training NLL since the previous record.
    pub train_nll: f64,
    pub val_nll: f64,
    pub wallclock_ms: u64,
}

impl LogRecord {
    pub const CSV_HEADER: &'static str = "step,tokens_seen,lr,train_nll,val_nll,wallclock_ms";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6e},{:.6},{:.6},{}",
            self.step, self.tokens_seen, self.lr, self.train_nll, self.val_nll, self.wallclock_ms
        )
    }
}

/// Position of one document stream within the shuffled document queue.
#[derive(Clone, Debug, PartialEq)]
struct Stream {
    doc: usize,
    /// Index of the next window to train on.
    next_window: usize,
    carry: Option<Vec<f64>>,
}

/// Optimiser plus data-stream state. Everything needed to continue a run
/// bit-exactly is captured by [`Trainer::snapshot`].
pub struct Trainer<'a> {
    model: Model,
    cfg: TrainConfig,
    docs: Vec<&'a [u32]>,
    m: Vec<Array>,
    v: Vec<Array>,
    step: u64,
    tokens_seen: u64,
    /// Next index into the concatenation of per-epoch document orders.
    cursor: usize,
    streams: Vec<Option<Stream>>,
}

/// Result of one optimiser step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub step: u64,
    pub lr: f64,
    pub nll_sum: f64,
    pub scored: usize,
    pub grad_norm: f64,
}

impl<'a> Trainer<'a> {
    /// `docs` shorter than two tokens are skipped.
    pub fn new(model: Model, docs: &'a [Vec<u32>], cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if cfg.window > model.config().max_positions {
            return Err(Error::ContextSize {
                len: cfg.window,
                max: model.config().max_positions,
            });
        }
        let docs: Vec<&[u32]> = docs.iter().map(Vec::as_slice).filter(|d| d.len() >= 2).collect();
        if docs.is_empty() {
            return Err(Error::Input("training corpus has no usable documents".into()));
        }
        let m = model.params().zeros_like();
        let v = model.params().zeros_like();
        let streams = vec![None; cfg.batch_size];
        Ok(Trainer {
            model,
            cfg,
            docs,
            m,
            v,
            step: 0,
            tokens_seen: 0,
            cursor: 0,
            streams,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn tokens_seen(&self) -> u64 {
        self.tokens_seen
    }

    /// Document index at queue position `p`, or `None` once every epoch
    /// has been handed out.
    fn doc_at(&self, p: usize) -> Option<usize> {
        let n = self.docs.len();
        let epoch = p / n;
        if epoch >= self.cfg.epochs {
            return None;
        }
        let mut order: Vec<usize> = (0..n).collect();
        Rng::derived(self.cfg.seed, Purpose::Shuffle, epoch as u64).shuffle(&mut order);
        Some(order[p % n])
    }

    /// Gives every idle stream its next sequence; returns the work list.
    fn next_batch(&mut self) -> Vec<(usize, Stream, std::ops::Range<usize>)> {
        let mut work = Vec::new();
        for s in 0..self.streams.len() {
            let stream = match self.streams[s].take() {
                Some(st) => Some(st),
                None => {
                    let d = self.doc_at(self.cursor);
                    if d.is_some() {
                        self.cursor += 1;
                    }
                    d.map(|doc| Stream {
                        doc,
                        next_window: 0,
                        carry: None,
                    })
                }
            };
            if let Some(st) = stream {
                let total = self.cfg.plan(self.docs[st.doc].len()).map(|p| p.windows.len()).unwrap_or(0);
                let end = (st.next_window + self.cfg.windows_per_sequence).min(total);
                work.push((s, st.clone(), st.next_window..end));
                self.streams[s] = Some(st);
            }
        }
        work
    }

    /// Runs one optimiser step. Returns `None` when the data is exhausted.
    pub fn step(&mut self) -> Result<Option<StepReport>> {
        if self.cfg.max_steps.is_some_and(|m| self.step >= m) {
            return Ok(None);
        }
        let work = self.next_batch();
        if work.is_empty() {
            return Ok(None);
        }
        let model = &self.model;
        let cfg = &self.cfg;
        let docs = &self.docs;
        let outcomes = par::map(cfg.parallelism, &work, |(_, st, range)| {
            let doc = docs[st.doc];
            let plan = cfg.plan(doc.len())?;
            run_sequence(model, doc, &plan.windows[range.clone()], st.carry.as_deref(), cfg)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;

        let scored: usize = outcomes.iter().map(|o| o.scored).sum();
        let nll_sum: f64 = outcomes.iter().map(|o| o.nll_sum).sum();
        let step = self.step + 1;
        if !nll_sum.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("non-finite training loss {nll_sum}"),
            });
        }
        // combine per-sequence mean-loss gradients into the batch mean
        let mut grads = self.model.params().zeros_like();
        for o in &outcomes {
            let w = o.scored as f64 / scored as f64;
            for (g, d) in grads.iter_mut().zip(&o.grads) {
                g.data_mut().iter_mut().zip(d.data()).for_each(|(a, b)| *a += w * b);
            }
        }
        let norm = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt();
        if !norm.is_finite() {
            return Err(Error::Divergence {
                step,
                detail: format!("non-finite gradient norm {norm}"),
            });
        }
        if let Some(clip) = self.cfg.clip_norm {
            if norm > clip {
                grads.iter_mut().for_each(|g| g.scale_assign(clip / norm));
            }
        }
        let lr = lr_schedule(step, self.cfg.lr, self.cfg.warmup_steps);
        for (id, g) in grads.iter().enumerate() {
            let p = self.model.params_mut().value_mut(id);
            adam_update(p, g, &mut self.m[id], &mut self.v[id], step, lr, &self.cfg.adam)?;
        }

        // advance streams
        for ((s, mut st, range), o) in work.into_iter().zip(outcomes) {
            let total = self.cfg.plan(self.docs[st.doc].len())?.windows.len();
            st.next_window = range.end;
            st.carry = o.final_carry;
            self.streams[s] = (range.end < total).then_some(st);
        }
        self.step = step;
        self.tokens_seen += scored as u64;
        Ok(Some(StepReport {
            step,
            lr,
            nll_sum,
            scored,
            grad_norm: norm,
        }))
    }

    /// Complete resumable state: parameters, Adam moments, counters and
    /// stream positions.
    pub fn snapshot(&self) -> Checkpoint {
        let mut ck = self.model.to_checkpoint();
        ck.meta.push(("train.step".into(), self.step.to_string()));
        ck.meta.push(("train.tokens_seen".into(), self.tokens_seen.to_string()));
        ck.meta.push(("train.cursor".into(), self.cursor.to_string()));
        for (i, s) in self.streams.iter().enumerate() {
            let desc = match s {
                Some(st) => format!("{} {}", st.doc, st.next_window),
                None => "idle".into(),
            };
            ck.meta.push((format!("train.stream.{i}"), desc));
            if let Some(c) = s.as_ref().and_then(|st| st.carry.as_ref()) {
                ck.arrays.push((format!("train.stream.{i}.carry"), Array::vector(c.clone())));
            }
        }
        for (id, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            let name = self.model.params().name(id);
            ck.arrays.push((format!("adam.m.{name}"), m.clone()));
            ck.arrays.push((format!("adam.v.{name}"), v.clone()));
        }
        ck
    }

    /// Continues from [`Trainer::snapshot`] output. The same corpus and
    /// configuration must be supplied.
    pub fn resume(ckpt: &Checkpoint, docs: &'a [Vec<u32>], cfg: TrainConfig) -> Result<Self> {
        let model = Model::from_checkpoint(ckpt)?;
        let mut t = Trainer::new(model, docs, cfg)?;
        let meta_num = |key: &str| -> Result<u64> {
            ckpt.meta(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Checkpoint(format!("missing or invalid {key}")))
        };
        t.step = meta_num("train.step")?;
        t.tokens_seen = meta_num("train.tokens_seen")?;
        t.cursor = meta_num("train.cursor")? as usize;
        let array = |name: &str| ckpt.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a);
        for i in 0..t.streams.len() {
            let desc = ckpt
                .meta(&format!("train.stream.{i}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing stream {i}")))?;
            t.streams[i] = if desc == "idle" {
                None
            } else {
                let mut it = desc.split(' ').map(str::parse::<usize>);
                let (Some(Ok(doc)), Some(Ok(next_window))) = (it.next(), it.next()) else {
                    return Err(Error::Checkpoint(format!("bad stream record {desc:?}")));
                };
                if doc >= t.docs.len() {
                    return Err(Error::Checkpoint(format!("stream {i} refers to missing document {doc}")));
                }
                Some(Stream {
                    doc,
                    next_window,
                    carry: array(&format!("train.stream.{i}.carry")).map(|a| a.data().to_vec()),
                })
            };
        }
        for id in 0..t.m.len() {
            let name = t.model.params().name(id).to_string();
            let (Some(m), Some(v)) = (array(&format!("adam.m.{name}")), array(&format!("adam.v.{name}")))
            else {
                return Err(Error::Checkpoint(format!("missing optimiser state for {name}")));
            };
            if m.shape() != t.m[id].shape() || v.shape() != t.v[id].shape() {
                return Err(Error::Checkpoint(format!("optimiser state for {name} has wrong shape")));
            }
            t.m[id] = m.clone();
            t.v[id] = v.clone();
        }
        Ok(t)
    }
}

/// Mean validation NLL under the training plan.
pub fn validation_nll(model: &Model, docs: &[Vec<u32>], cfg: &TrainConfig) -> Result<f64> {
    let eval_docs: Vec<EvalDoc> = docs
        .iter()
        .map(|d| EvalDoc {
            tokens: d,
            word_weights: None,
        })
        .collect();
    let r = evaluate_corpus(
        model,
        &eval_docs,
        cfg.window,
        cfg.overlap,
        cfg.mode,
        cfg.mask,
        cfg.parallelism,
    )?;
    Ok(r.mean_nll())
}

pub struct TrainOutcome {
    /// Parameters with the lowest validation NLL seen.
    pub best: Model,
    pub best_val_nll: f64,
    pub last: Model,
    pub log: Vec<LogRecord>,
}

/// Trains until the data or `max_steps` runs out, validating at step 0,
/// every `validate_every_tokens` trained tokens, and at the end.
pub fn train_loop(model: Model, train: &[Vec<u32>], val: &[Vec<u32>], cfg: &TrainConfig) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(model, train, cfg.clone())?;
    run_trainer(&mut trainer, val, |_| Ok(()))
        .map(|(best, best_val_nll, log)| TrainOutcome {
            best,
            best_val_nll,
            last: trainer.into_model(),
            log,
        })
}

/// Drives `trainer` to completion. `on_record` sees every log record as it
/// is produced (the CLI streams them to disk).
pub fn run_trainer(
    trainer: &mut Trainer,
    val: &[Vec<u32>],
    mut on_record: impl FnMut(&LogRecord) -> Result<()>,
) -> Result<(Model, f64, Vec<LogRecord>)> {
    if val.iter().all(|d| d.len() < 2) {
        return Err(Error::Input("validation corpus has no usable documents".into()));
    }
    let start = Instant::now();
    let cfg = trainer.config().clone();
    let clock = |cfg: &TrainConfig| if cfg.record_wallclock { start.elapsed().as_millis() as u64 } else { 0 };
    let mut log = Vec::new();
    let first_val = validation_nll(trainer.model(), val, &cfg)?;
    let mut best = (trainer.model().clone(), first_val);
    let rec = LogRecord {
        step: trainer.step_count(),
        tokens_seen: trainer.tokens_seen(),
        lr: lr_schedule(trainer.step_count(), cfg.lr, cfg.warmup_steps),
        train_nll: f64::NAN,
        val_nll: first_val,
        wallclock_ms: clock(&cfg),
    };
    on_record(&rec)?;
    log.push(rec);

    let mut next_val = trainer.tokens_seen() + cfg.validate_every_tokens;
    let (mut nll, mut count) = (0.0, 0usize);
    let mut last_lr = 0.0;
    loop {
        let report = trainer.step()?;
        if let Some(r) = &report {
            nll += r.nll_sum;
            count += r.scored;
            last_lr = r.lr;
        }
        let due = trainer.tokens_seen() >= next_val || (report.is_none() && count > 0);
        if due {
            let val_nll = validation_nll(trainer.model(), val, &cfg)?;
            if !val_nll.is_finite() {
                return Err(Error::Divergence {
                    step: trainer.step_count(),
                    detail: format!("non-finite validation loss {val_nll}"),
                });
            }
            log::info!(
                "step {} tokens {} train_nll {:.4} val_nll {:.4}",
                trainer.step_count(),
                trainer.tokens_seen(),
                nll / count as f64,
                val_nll
            );
            let rec = LogRecord {
                step: trainer.step_count(),
                tokens_seen: trainer.tokens_seen(),
                lr: last_lr,
                train_nll: nll / count as f64,
                val_nll,
                wallclock_ms: clock(&cfg),
            };
            on_record(&rec)?;
            log.push(rec);
            if val_nll < best.1 {
                best = (trainer.model().clone(), val_nll);
            }
            while next_val <= trainer.tokens_seen() {
                next_val += cfg.validate_every_tokens;
            }
            nll = 0.0;
            count = 0;
        }
        if report.is_none() {
            break;
        }
    }
    Ok((best.0, best.1, log))
}
