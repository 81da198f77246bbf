//! GPT-style decoder-only transformer with an optional carry slot.
//!
//! Blocks are pre-norm: `x + attn(ln1(x))`, then `x + mlp(ln2(x))`, with
//! learned absolute position embeddings and a tied unembedding plus an
//! output bias. At layer `insert_layer` the carry vector (when present)
//! goes through that block's `ln1` and key/value projections and is
//! prepended as one extra key/value slot visible to every query.

use crate::error::{Error, Result};
use crate::nn::{Array, Checkpoint, GeluKind, ParamStore, Purpose, Rng, Tape, Var};
use crate::recurrence::{self, CarryState, PoolNorm, RecurrenceIds};
use crate::windowing::{make_plan, PlanMode};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub max_positions: usize,
    pub vocab: usize,
    /// 1-based index of the layer whose attention receives the carry.
    pub insert_layer: usize,
    pub ffn_mult: usize,
    pub carry_hidden: usize,
    pub carry_depth: usize,
    pub layernorm_eps: f64,
    pub gelu: GeluKind,
    pub pool_norm: PoolNorm,
}

impl Default for ModelConfig {
    /// Desk-scale character model.
    fn default() -> Self {
        ModelConfig {
            layers: 2,
            hidden: 32,
            heads: 2,
            max_positions: 128,
            vocab: 256,
            insert_layer: 2,
            ffn_mult: 4,
            carry_hidden: 64,
            carry_depth: 2,
            layernorm_eps: 1e-5,
            gelu: GeluKind::Erf,
            pool_norm: PoolNorm::Mean,
        }
    }
}

impl ModelConfig {
    /// Toy configuration used across the test suite.
    pub fn tiny(vocab: usize, max_positions: usize) -> Self {
        ModelConfig {
            layers: 2,
            hidden: 16,
            heads: 2,
            max_positions,
            vocab,
            insert_layer: 2,
            ffn_mult: 4,
            carry_hidden: 8,
            carry_depth: 2,
            layernorm_eps: 1e-5,
            gelu: GeluKind::Erf,
            pool_norm: PoolNorm::Mean,
        }
    }

    /// GPT-2 small shape with a 3×200 carry network.
    pub fn gpt2_small() -> Self {
        ModelConfig {
            layers: 12,
            hidden: 768,
            heads: 12,
            max_positions: 1024,
            vocab: 50257,
            insert_layer: 2,
            ffn_mult: 4,
            carry_hidden: 200,
            carry_depth: 3,
            layernorm_eps: 1e-5,
            gelu: GeluKind::Erf,
            pool_norm: PoolNorm::Mean,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 {
            return fail("layers must be >= 1".into());
        }
        if self.insert_layer == 0 || self.insert_layer > self.layers {
            return fail(format!(
                "insert_layer {} outside 1..={}",
                self.insert_layer, self.layers
            ));
        }
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return fail(format!(
                "hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.max_positions < 2 {
            return fail("max_positions must be >= 2".into());
        }
        if self.vocab == 0 || self.ffn_mult == 0 {
            return fail("vocab and ffn_mult must be >= 1".into());
        }
        if self.carry_depth > 0 && self.carry_hidden == 0 {
            return fail("carry_hidden must be >= 1 when carry_depth > 0".into());
        }
        if !(self.layernorm_eps > 0.0) {
            return fail("layernorm_eps must be positive".into());
        }
        Ok(())
    }

    /// Keys accepted by [`ModelConfig::set`], in serialisation order.
    pub const KEYS: [&'static str; 12] = [
        "layers",
        "hidden",
        "heads",
        "max_positions",
        "vocab",
        "insert_layer",
        "ffn_mult",
        "carry_hidden",
        "carry_depth",
        "layernorm_eps",
        "gelu",
        "pool_norm",
    ];

    /// Sets one field from its textual form. The error names the field.
    pub fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse()
                .map_err(|_| format!("{key}: cannot parse {v:?} as a number"))
        }
        match key {
            "layers" => self.layers = num(key, value)?,
            "hidden" => self.hidden = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "max_positions" => self.max_positions = num(key, value)?,
            "vocab" => self.vocab = num(key, value)?,
            "insert_layer" => self.insert_layer = num(key, value)?,
            "ffn_mult" => self.ffn_mult = num(key, value)?,
            "carry_hidden" => self.carry_hidden = num(key, value)?,
            "carry_depth" => self.carry_depth = num(key, value)?,
            "layernorm_eps" => self.layernorm_eps = num(key, value)?,
            "gelu" => {
                self.gelu = match value {
                    "erf" => GeluKind::Erf,
                    "tanh" => GeluKind::Tanh,
                    _ => return Err(format!("gelu: expected erf or tanh, got {value:?}")),
                }
            }
            "pool_norm" => {
                self.pool_norm = match value {
                    "mean" => PoolNorm::Mean,
                    "sum" => PoolNorm::Sum,
                    _ => return Err(format!("pool_norm: expected mean or sum, got {value:?}")),
                }
            }
            _ => return Err(format!("unknown model key {key:?}")),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "layers" => self.layers.to_string(),
            "hidden" => self.hidden.to_string(),
            "heads" => self.heads.to_string(),
            "max_positions" => self.max_positions.to_string(),
            "vocab" => self.vocab.to_string(),
            "insert_layer" => self.insert_layer.to_string(),
            "ffn_mult" => self.ffn_mult.to_string(),
            "carry_hidden" => self.carry_hidden.to_string(),
            "carry_depth" => self.carry_depth.to_string(),
            // `{:?}` round-trips f64 exactly
            "layernorm_eps" => format!("{:?}", self.layernorm_eps),
            "gelu" => match self.gelu {
                GeluKind::Erf => "erf".into(),
                GeluKind::Tanh => "tanh".into(),
            },
            "pool_norm" => match self.pool_norm {
                PoolNorm::Mean => "mean".into(),
                PoolNorm::Sum => "sum".into(),
            },
            _ => return None,
        })
    }

    pub fn ffn_width(&self) -> usize {
        self.ffn_mult * self.hidden
    }

    /// Scalar parameter count of the transformer itself (no recurrence).
    pub fn transformer_param_count(&self) -> usize {
        let k = self.hidden;
        let f = self.ffn_width();
        let block = 2 * 2 * k + 4 * (k * k + k) + (k * f + f) + (f * k + k);
        self.vocab * k + self.max_positions * k + self.layers * block + 2 * k + self.vocab
    }

    /// Scalar parameter count of the recurrence module.
    pub fn recurrence_param_count(&self) -> usize {
        let k = self.hidden;
        let mut dims = vec![k];
        dims.extend(std::iter::repeat_n(self.carry_hidden, self.carry_depth));
        dims.push(k);
        self.layers + dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>()
    }
}

#[derive(Clone, Debug)]
struct BlockIds {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Debug)]
struct ParamIds {
    wte: usize,
    wpe: usize,
    blocks: Vec<BlockIds>,
    lnf_g: usize,
    lnf_b: usize,
    head_bias: usize,
    recurrence: RecurrenceIds,
}

/// Per-window forward outputs.
#[derive(Clone, Debug)]
pub struct WindowActivations {
    /// Output of every block, `L` arrays of shape `T×k`.
    pub hiddens: Vec<Array>,
    /// `T×V`
    pub logits: Array,
}

/// Handles to a window's forward pass on a tape.
#[derive(Clone, Debug)]
pub struct WindowGraph {
    pub hiddens: Vec<Var>,
    pub logits: Var,
}

/// How an optional carry interacts with the insertion layer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum CarryMask {
    #[default]
    Visible,
    /// Debug switch: the carry slot is removed from attention entirely.
    Masked,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    ids: ParamIds,
}

impl Model {
    /// GPT-2 style initialisation: N(0, 0.02) weights, residual output
    /// projections scaled by 1/sqrt(2L), unit layer-norm gains, zero biases.
    /// Recurrence: zero alphas, N(0, 0.02) carry-network weights.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(seed, Purpose::Init);
        let k = config.hidden;
        let f = config.ffn_width();
        let std = 0.02;
        let resid_std = std / (2.0 * config.layers as f64).sqrt();
        let mut p = ParamStore::new();
        let normal = |shape: &[usize], s: f64, rng: &mut Rng| {
            let n = shape.iter().product();
            Array::new(shape, (0..n).map(|_| rng.normal(s)).collect()).unwrap()
        };
        p.insert("wte", normal(&[config.vocab, k], std, &mut rng));
        p.insert("wpe", normal(&[config.max_positions, k], std, &mut rng));
        for l in 0..config.layers {
            let n = |s: &str| format!("h.{l}.{s}");
            p.insert(n("ln1.g"), Array::full(&[k], 1.0));
            p.insert(n("ln1.b"), Array::zeros(&[k]));
            for w in ["q", "k", "v"] {
                p.insert(n(&format!("attn.w{w}")), normal(&[k, k], std, &mut rng));
                p.insert(n(&format!("attn.b{w}")), Array::zeros(&[k]));
            }
            p.insert(n("attn.wo"), normal(&[k, k], resid_std, &mut rng));
            p.insert(n("attn.bo"), Array::zeros(&[k]));
            p.insert(n("ln2.g"), Array::full(&[k], 1.0));
            p.insert(n("ln2.b"), Array::zeros(&[k]));
            p.insert(n("mlp.w1"), normal(&[k, f], std, &mut rng));
            p.insert(n("mlp.b1"), Array::zeros(&[f]));
            p.insert(n("mlp.w2"), normal(&[f, k], resid_std, &mut rng));
            p.insert(n("mlp.b2"), Array::zeros(&[k]));
        }
        p.insert("ln_f.g", Array::full(&[k], 1.0));
        p.insert("ln_f.b", Array::zeros(&[k]));
        p.insert("head.bias", Array::zeros(&[config.vocab]));
        recurrence::init_params(&config, &mut p, &mut rng);
        Self::from_params(config, p)
    }

    /// Wraps an existing parameter store, checking that every expected
    /// tensor exists with the right shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let k = config.hidden;
        let f = config.ffn_width();
        let get = |name: &str, shape: &[usize]| -> Result<usize> {
            let id = params
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))?;
            let got = params.value(id).shape();
            if got != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {name:?} has shape {got:?}, config expects {shape:?}"
                )));
            }
            Ok(id)
        };
        let mut blocks = Vec::new();
        for l in 0..config.layers {
            let n = |s: &str| format!("h.{l}.{s}");
            blocks.push(BlockIds {
                ln1_g: get(&n("ln1.g"), &[k])?,
                ln1_b: get(&n("ln1.b"), &[k])?,
                wq: get(&n("attn.wq"), &[k, k])?,
                bq: get(&n("attn.bq"), &[k])?,
                wk: get(&n("attn.wk"), &[k, k])?,
                bk: get(&n("attn.bk"), &[k])?,
                wv: get(&n("attn.wv"), &[k, k])?,
                bv: get(&n("attn.bv"), &[k])?,
                wo: get(&n("attn.wo"), &[k, k])?,
                bo: get(&n("attn.bo"), &[k])?,
                ln2_g: get(&n("ln2.g"), &[k])?,
                ln2_b: get(&n("ln2.b"), &[k])?,
                w1: get(&n("mlp.w1"), &[k, f])?,
                b1: get(&n("mlp.b1"), &[f])?,
                w2: get(&n("mlp.w2"), &[f, k])?,
                b2: get(&n("mlp.b2"), &[k])?,
            });
        }
        let ids = ParamIds {
            wte: get("wte", &[config.vocab, k])?,
            wpe: get("wpe", &[config.max_positions, k])?,
            blocks,
            lnf_g: get("ln_f.g", &[k])?,
            lnf_b: get("ln_f.b", &[k])?,
            head_bias: get("head.bias", &[config.vocab])?,
            recurrence: RecurrenceIds::resolve(&config, &params)?,
        };
        let expected = config.transformer_param_count() + config.recurrence_param_count();
        if params.count_where(|_| true) != expected {
            return Err(Error::Checkpoint(format!(
                "parameter store holds {} scalars, config expects {expected}",
                params.count_where(|_| true)
            )));
        }
        Ok(Model {
            config,
            params,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub(crate) fn recurrence_ids(&self) -> &RecurrenceIds {
        &self.ids.recurrence
    }

    pub(crate) fn p(&self, tape: &mut Tape, id: usize) -> Var {
        tape.param(id, self.params.value(id))
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Input("empty window".into()));
        }
        if tokens.len() > self.config.max_positions {
            return Err(Error::ContextSize {
                len: tokens.len(),
                max: self.config.max_positions,
            });
        }
        if let Some(&id) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::Vocabulary {
                id,
                vocab: self.config.vocab,
            });
        }
        Ok(())
    }

    /// Records one window's forward pass. `carry` must be a length-`k`
    /// node on the same tape.
    pub fn forward_taped(
        &self,
        tape: &mut Tape,
        tokens: &[u32],
        carry: Option<Var>,
        mask: CarryMask,
    ) -> Result<WindowGraph> {
        self.check_tokens(tokens)?;
        let cfg = &self.config;
        if let Some(c) = carry {
            if tape.value(c).len() != cfg.hidden {
                return Err(Error::shape("carry", tape.value(c).shape(), &[cfg.hidden]));
            }
        }
        let t = tokens.len();
        let positions: Vec<u32> = (0..t as u32).collect();
        let wte = self.p(tape, self.ids.wte);
        let wpe = self.p(tape, self.ids.wpe);
        let tok = tape.gather(wte, tokens)?;
        let pos = tape.gather(wpe, &positions)?;
        let mut x = tape.add(tok, pos)?;

        let mut hiddens = Vec::with_capacity(cfg.layers);
        for (l, b) in self.ids.blocks.iter().enumerate() {
            let ln1_g = self.p(tape, b.ln1_g);
            let ln1_b = self.p(tape, b.ln1_b);
            let h = tape.layer_norm(x, ln1_g, ln1_b, cfg.layernorm_eps)?;
            let q = self.linear(tape, h, b.wq, b.bq)?;
            let k = self.linear(tape, h, b.wk, b.bk)?;
            let v = self.linear(tape, h, b.wv, b.bv)?;
            let extra = match (carry, mask) {
                (Some(c), CarryMask::Visible) if l + 1 == cfg.insert_layer => {
                    let ch = tape.layer_norm(c, ln1_g, ln1_b, cfg.layernorm_eps)?;
                    let ek = self.linear(tape, ch, b.wk, b.bk)?;
                    let ev = self.linear(tape, ch, b.wv, b.bv)?;
                    Some((ek, ev))
                }
                _ => None,
            };
            let a = tape.attention(q, k, v, extra, cfg.heads)?;
            let a = self.linear(tape, a, b.wo, b.bo)?;
            x = tape.add(x, a)?;

            let ln2_g = self.p(tape, b.ln2_g);
            let ln2_b = self.p(tape, b.ln2_b);
            let h = tape.layer_norm(x, ln2_g, ln2_b, cfg.layernorm_eps)?;
            let h = self.linear(tape, h, b.w1, b.b1)?;
            let h = tape.gelu(h, cfg.gelu);
            let h = self.linear(tape, h, b.w2, b.b2)?;
            x = tape.add(x, h)?;
            hiddens.push(x);
        }
        let g = self.p(tape, self.ids.lnf_g);
        let bb = self.p(tape, self.ids.lnf_b);
        let xf = tape.layer_norm(x, g, bb, cfg.layernorm_eps)?;
        let logits = tape.matmul_nt(xf, wte)?;
        let hb = self.p(tape, self.ids.head_bias);
        let logits = tape.add_row(logits, hb)?;
        Ok(WindowGraph { hiddens, logits })
    }

    pub(crate) fn linear(&self, tape: &mut Tape, x: Var, w: usize, b: usize) -> Result<Var> {
        let wv = self.p(tape, w);
        let bv = self.p(tape, b);
        let y = tape.matmul(x, wv)?;
        tape.add_row(y, bv)
    }

    /// Parameters plus the architecture under `model.*` meta keys.
    pub fn to_checkpoint(&self) -> Checkpoint {
        let meta = ModelConfig::KEYS
            .iter()
            .map(|k| (format!("model.{k}"), self.config.get(k).unwrap()))
            .collect();
        let arrays = self
            .params
            .iter()
            .map(|(n, a)| (n.to_string(), a.clone()))
            .collect();
        Checkpoint { meta, arrays }
    }

    /// Rebuilds a model from [`Model::to_checkpoint`] output. Arrays whose
    /// names are not model parameters are ignored.
    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let mut config = ModelConfig::default();
        for k in ModelConfig::KEYS {
            let v = ckpt
                .meta(&format!("model.{k}"))
                .ok_or_else(|| Error::Checkpoint(format!("missing meta key model.{k}")))?;
            config.set(k, v).map_err(Error::Checkpoint)?;
        }
        config
            .validate()
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut params = ParamStore::new();
        for (name, a) in &ckpt.arrays {
            if !name.contains("adam.") && !name.starts_with("train.") {
                params.insert(name.clone(), a.clone());
            }
        }
        Self::from_params(config, params)
    }

    /// Untaped forward pass of one window.
    pub fn forward_window(&self, tokens: &[u32], carry: Option<&[f64]>) -> Result<WindowActivations> {
        self.forward_window_masked(tokens, carry, CarryMask::Visible)
    }

    pub fn forward_window_masked(
        &self,
        tokens: &[u32],
        carry: Option<&[f64]>,
        mask: CarryMask,
    ) -> Result<WindowActivations> {
        let mut tape = Tape::new();
        let c = carry.map(|c| tape.input(Array::vector(c.to_vec())));
        let g = self.forward_taped(&mut tape, tokens, c, mask)?;
        Ok(WindowActivations {
            hiddens: g.hiddens.iter().map(|&h| tape.value(h).clone()).collect(),
            logits: tape.value(g.logits).clone(),
        })
    }

    /// Forward pass plus the recurrence step that produces the next carry.
    pub fn forward_with_carry(
        &self,
        tokens: &[u32],
        carry: Option<&[f64]>,
        window_index: usize,
        mask: CarryMask,
    ) -> Result<(WindowActivations, CarryState)> {
        let acts = self.forward_window_masked(tokens, carry, mask)?;
        let state = recurrence::recurrence_step(&acts, self, window_index)?;
        Ok((acts, state))
    }

    /// Greedy continuation of `prompt` for `n_steps` tokens.
    ///
    /// The growing sequence is executed in windows of `window` tokens laid
    /// out exactly as [`make_plan`] lays out an evaluation, so a prediction
    /// comes from the window that would score it. In recurrent mode each
    /// window after the first receives the carry of its predecessor. Ties go
    /// to the lowest token id.
    pub fn greedy_decode(
        &self,
        prompt: &[u32],
        n_steps: usize,
        policy: &DecodePolicy,
    ) -> Result<Vec<u32>> {
        if prompt.is_empty() {
            return Err(Error::Input("empty prompt".into()));
        }
        if policy.window > self.config.max_positions {
            return Err(Error::ContextSize {
                len: policy.window,
                max: self.config.max_positions,
            });
        }
        let mut seq = prompt.to_vec();
        let mut carries: Vec<Vec<f64>> = Vec::new();
        let mut out = Vec::with_capacity(n_steps);
        for _ in 0..n_steps {
            let n = seq.len() + 1;
            let plan = make_plan(n, policy.window, policy.overlap, policy.mode)?;
            let last = plan.windows.len() - 1;
            // Carries of earlier windows never change once their inputs are known.
            while carries.len() < last && policy.mode == PlanMode::Recurrent {
                let i = carries.len();
                let w = &plan.windows[i];
                let carry = i.checked_sub(1).map(|j| carries[j].as_slice());
                let (_, state) = self.forward_with_carry(
                    &seq[w.input.0 - 1..w.input.1],
                    carry,
                    i + 1,
                    policy.mask,
                )?;
                carries.push(state.h_prev);
            }
            let w = &plan.windows[last];
            // The plan's last input position is the token being predicted.
            let hi = w.input.1.min(seq.len());
            let carry = match policy.mode {
                PlanMode::Recurrent if last > 0 => Some(carries[last - 1].as_slice()),
                _ => None,
            };
            let acts =
                self.forward_window_masked(&seq[w.input.0 - 1..hi], carry, policy.mask)?;
            let row = acts.logits.row(n - 1 - w.input.0);
            let next = argmax_lowest(row) as u32;
            out.push(next);
            seq.push(next);
        }
        Ok(out)
    }
}

/// Window layout for [`Model::greedy_decode`].
#[derive(Clone, Debug)]
pub struct DecodePolicy {
    pub window: usize,
    pub overlap: usize,
    pub mode: PlanMode,
    pub mask: CarryMask,
}

impl DecodePolicy {
    pub fn disjoint(window: usize, mode: PlanMode) -> Self {
        DecodePolicy {
            window,
            overlap: 0,
            mode,
            mask: CarryMask::Visible,
        }
    }
}

pub(crate) fn argmax_lowest(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
