//! FLOPs accounting for windowed execution.
//!
//! Counting convention:
//!
//! * a multiply-add is 2 FLOPs; every matrix product and attention
//!   contraction is counted from its exact multiply-add count;
//! * causal attention only counts admissible (query, key) pairs:
//!   `T(T+1)/2` token pairs plus `T` carry pairs when the extra slot exists;
//! * bias adds and residual adds cost 1 FLOP per element;
//! * layer norm costs [`LAYER_NORM_FLOPS`] per element, GELU
//!   [`GELU_FLOPS`] per element and softmax [`SOFTMAX_FLOPS`] per score;
//! * embedding lookups are free; adding token and position embeddings
//!   costs 1 per element; the tied unembedding is a full `T×k×V` product.
//!
//! The multiply-add part of these counts matches what the kernels in
//! [`crate::nn`] actually execute (see [`crate::nn::mac_counter`]).

use crate::error::{Error, Result};
use crate::model::ModelConfig;

pub const LAYER_NORM_FLOPS: u64 = 8;
pub const GELU_FLOPS: u64 = 8;
pub const SOFTMAX_FLOPS: u64 = 5;

/// FLOPs of one window's forward pass, split by sublayer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopsBreakdown {
    pub embedding: u64,
    pub attention_projections: u64,
    pub attention_scores: u64,
    pub extra_kv: u64,
    pub mlp: u64,
    pub norms_and_residuals: u64,
    pub unembedding: u64,
    /// Multiply-adds alone (each counted once), for comparison with the
    /// executed-kernel counter.
    pub macs: u64,
}

impl FlopsBreakdown {
    pub fn total(&self) -> u64 {
        self.embedding
            + self.attention_projections
            + self.attention_scores
            + self.extra_kv
            + self.mlp
            + self.norms_and_residuals
            + self.unembedding
    }
}

/// Counting model bound to one architecture.
#[derive(Clone, Debug)]
pub struct FlopsModel {
    pub config: ModelConfig,
}

impl FlopsModel {
    pub fn new(config: ModelConfig) -> Self {
        FlopsModel { config }
    }

    pub fn window_breakdown(&self, t: usize, extra_kv: bool) -> FlopsBreakdown {
        let c = &self.config;
        let (t, k, v, f, l) = (
            t as u64,
            c.hidden as u64,
            c.vocab as u64,
            c.ffn_width() as u64,
            c.layers as u64,
        );
        let e = u64::from(extra_kv);
        // the carry slot exists only in the insertion layer
        let pairs = t * (t + 1) / 2;
        let extra_pairs = e * t;

        let proj_macs = 4 * t * k * k;
        let score_macs = 2 * k * pairs;
        let extra_score_macs = 2 * k * extra_pairs;
        let mlp_macs = 2 * t * k * f;
        let extra_macs = e * 2 * k * k;
        let unembed_macs = t * k * v;

        FlopsBreakdown {
            embedding: t * k,
            attention_projections: l * (2 * proj_macs + 4 * t * k),
            attention_scores: l * (2 * score_macs + SOFTMAX_FLOPS * pairs)
                + 2 * extra_score_macs
                + SOFTMAX_FLOPS * extra_pairs,
            extra_kv: e * (LAYER_NORM_FLOPS * k + 2 * extra_macs + 2 * k),
            mlp: l * (2 * mlp_macs + t * (f + k) + GELU_FLOPS * t * f),
            norms_and_residuals: l * (2 * LAYER_NORM_FLOPS * t * k + 2 * t * k)
                + LAYER_NORM_FLOPS * t * k,
            unembedding: 2 * unembed_macs + t * v,
            macs: l * (proj_macs + score_macs + mlp_macs)
                + extra_score_macs
                + extra_macs
                + unembed_macs,
        }
    }

    pub fn window_forward_flops(&self, t: usize, extra_kv: bool) -> u64 {
        self.window_breakdown(t, extra_kv).total()
    }

    /// (FLOPs, multiply-adds) of pooling a `t`-position window and running
    /// the carry network.
    pub fn recurrence_flops(&self, t: usize) -> (u64, u64) {
        let c = &self.config;
        let (t, k, l) = (t as u64, c.hidden as u64, c.layers as u64);
        let pool_macs = l * t * k;
        let mut dims = vec![k];
        dims.extend(std::iter::repeat_n(c.carry_hidden as u64, c.carry_depth));
        dims.push(k);
        let ffn_macs: u64 = dims.windows(2).map(|d| d[0] * d[1]).sum();
        let ffn_bias: u64 = dims[1..].iter().sum();
        let gelu: u64 = dims[1..dims.len() - 1].iter().sum::<u64>() * GELU_FLOPS;
        let flops = 2 * pool_macs + k + SOFTMAX_FLOPS * l + 2 * ffn_macs + ffn_bias + gelu;
        (flops, pool_macs + ffn_macs)
    }

    /// Window cost divided by the `t − overlap` tokens each window newly
    /// predicts. Recurrent execution adds the carry slot and the recurrence
    /// step to every window.
    pub fn flops_per_token(&self, t: usize, overlap: usize, recurrent: bool) -> Result<f64> {
        if t == 0 {
            return Err(Error::Input("window length must be >= 1".into()));
        }
        if overlap >= t {
            return Err(Error::InvalidOverlap { overlap, window: t });
        }
        let mut window = self.window_forward_flops(t, recurrent);
        if recurrent {
            window += self.recurrence_flops(t).0;
        }
        Ok(window as f64 / (t - overlap) as f64)
    }
}

pub fn window_forward_flops(config: &ModelConfig, t: usize, extra_kv: bool) -> u64 {
    FlopsModel::new(config.clone()).window_forward_flops(t, extra_kv)
}

pub fn flops_per_token(config: &ModelConfig, t: usize, overlap: usize, recurrent: bool) -> Result<f64> {
    FlopsModel::new(config.clone()).flops_per_token(t, overlap, recurrent)
}

pub const CSV_HEADER: &str = "T,overlap,mode,flops_per_token";

pub fn csv_row(t: usize, overlap: usize, recurrent: bool, flops: f64) -> String {
    let mode = if recurrent { "recurrent" } else { "baseline" };
    format!("{t},{overlap},{mode},{flops:.6e}")
}
