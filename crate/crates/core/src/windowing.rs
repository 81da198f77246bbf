//! Window schedules and perplexity evaluation.
//!
//! Positions are 1-based and spans inclusive throughout, matching how
//! schedules are usually written down: with `T = 10` and overlap 3 the
//! inputs are `[1:10], [8:17], [15:24], …` and the scored targets
//! `[2:11], [12:18], [19:25], …`.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::flops;
use crate::model::{CarryMask, Model};
use crate::nn::array::nll_row;
use crate::par::{self, Parallelism};
use crate::recurrence;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PlanMode {
    Baseline,
    Recurrent,
}

impl PlanMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PlanMode::Baseline => "baseline",
            PlanMode::Recurrent => "recurrent",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "baseline" => Some(PlanMode::Baseline),
            "recurrent" => Some(PlanMode::Recurrent),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WindowSpec {
    /// Inclusive input token span.
    pub input: (usize, usize),
    /// Inclusive span of targets this window is responsible for.
    pub scored: (usize, usize),
    /// Index (0-based, into `WindowPlan::windows`) of the window whose
    /// carry this one consumes.
    pub carry_from: Option<usize>,
}

impl WindowSpec {
    pub fn len(&self) -> usize {
        self.input.1 + 1 - self.input.0
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Row of this window's logits that predicts target `j`.
    pub fn row_for_target(&self, j: usize) -> usize {
        j - 1 - self.input.0
    }

    pub fn scored_count(&self) -> usize {
        self.scored.1 + 1 - self.scored.0
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct WindowPlan {
    pub n: usize,
    pub window: usize,
    pub overlap: usize,
    pub stride: usize,
    pub mode: PlanMode,
    pub windows: Vec<WindowSpec>,
}

/// Lays out windows of `window` tokens advancing by `window − overlap`.
///
/// The first window scores targets `2..=window+1`; every later window
/// scores only its `stride` freshest targets. The tail is clipped at `n`
/// (never padded), and windows left with nothing to score are dropped.
pub fn make_plan(n: usize, window: usize, overlap: usize, mode: PlanMode) -> Result<WindowPlan> {
    if window == 0 {
        return Err(Error::Plan("window length must be >= 1".into()));
    }
    if overlap >= window {
        return Err(Error::InvalidOverlap { overlap, window });
    }
    if n < 2 {
        return Err(Error::Plan(format!("need at least 2 tokens, got {n}")));
    }
    let stride = window - overlap;
    let mut windows = Vec::new();
    let mut start = 1;
    loop {
        let lo = if windows.is_empty() { start + 1 } else { start + overlap + 1 };
        let hi = (start + window).min(n);
        if lo > hi {
            break;
        }
        let carry_from = match mode {
            PlanMode::Recurrent => windows.len().checked_sub(1),
            PlanMode::Baseline => None,
        };
        windows.push(WindowSpec {
            input: (start, (start + window - 1).min(n)),
            scored: (lo, hi),
            carry_from,
        });
        start += stride;
    }
    Ok(WindowPlan {
        n,
        window,
        overlap,
        stride,
        mode,
        windows,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub total_nll: f64,
    pub scored_token_count: usize,
    pub scored_word_count: usize,
    pub ppl_token: f64,
    pub ppl_word: f64,
    pub flops_per_token: f64,
}

impl EvalReport {
    fn from_totals(total_nll: f64, tokens: usize, words: usize, flops_per_token: f64) -> Self {
        EvalReport {
            total_nll,
            scored_token_count: tokens,
            scored_word_count: words,
            ppl_token: (total_nll / tokens as f64).exp(),
            ppl_word: (total_nll / words.max(1) as f64).exp(),
            flops_per_token,
        }
    }

    pub fn mean_nll(&self) -> f64 {
        self.total_nll / self.scored_token_count as f64
    }

    /// Pools several per-document reports evaluated under the same schedule.
    pub fn combine(reports: &[EvalReport]) -> Result<EvalReport> {
        let first = reports
            .first()
            .ok_or_else(|| Error::Input("no reports to combine".into()))?;
        let nll = reports.iter().map(|r| r.total_nll).sum();
        let tokens = reports.iter().map(|r| r.scored_token_count).sum();
        let words = reports.iter().map(|r| r.scored_word_count).sum();
        Ok(Self::from_totals(nll, tokens, words, first.flops_per_token))
    }

    pub const CSV_HEADER: &'static str =
        "model,mode,T,overlap,ppl_token,ppl_word,flops_per_token,scored_tokens,scored_words";

    pub fn csv_row(&self, model: &str, mode: PlanMode, window: usize, overlap: usize) -> String {
        format!(
            "{model},{},{window},{overlap},{:.6},{:.6},{:.6e},{},{}",
            mode.as_str(),
            self.ppl_token,
            self.ppl_word,
            self.flops_per_token,
            self.scored_token_count,
            self.scored_word_count
        )
    }
}

/// Scores `doc` under `plan`. `word_weights[i]` is the number of words
/// that end at token `i + 1`; without it every token counts as a word.
pub fn evaluate(
    model: &Model,
    doc: &[u32],
    plan: &WindowPlan,
    word_weights: Option<&[u32]>,
) -> Result<EvalReport> {
    evaluate_with(model, doc, plan, word_weights, CarryMask::Visible, Parallelism::Parallel)
}

pub fn evaluate_with(
    model: &Model,
    doc: &[u32],
    plan: &WindowPlan,
    word_weights: Option<&[u32]>,
    mask: CarryMask,
    exec: Parallelism,
) -> Result<EvalReport> {
    if plan.n != doc.len() {
        return Err(Error::Plan(format!(
            "plan covers {} tokens but document has {}",
            plan.n,
            doc.len()
        )));
    }
    if let Some(w) = word_weights {
        if w.len() != doc.len() {
            return Err(Error::Plan("word weights do not match document length".into()));
        }
    }
    if plan.window > model.config().max_positions {
        return Err(Error::ContextSize {
            len: plan.window,
            max: model.config().max_positions,
        });
    }
    let score_window = |spec: &crate::windowing::WindowSpec, carry: Option<&[f64]>| -> Result<(f64, Vec<f64>)> {
        let tokens = &doc[spec.input.0 - 1..spec.input.1];
        let next_carry = plan.mode == PlanMode::Recurrent;
        let acts = model.forward_window_masked(tokens, carry, mask)?;
        let mut nll = 0.0;
        for j in spec.scored.0..=spec.scored.1 {
            nll += nll_row(acts.logits.row(spec.row_for_target(j)), doc[j - 1] as usize);
        }
        let carry = if next_carry {
            recurrence::recurrence_step(&acts, model, 0)?.h_prev
        } else {
            Vec::new()
        };
        Ok((nll, carry))
    };

    let total_nll = match plan.mode {
        PlanMode::Baseline => par::map(exec, &plan.windows, |w| score_window(w, None).map(|r| r.0))
            .into_iter()
            .sum::<Result<f64>>()?,
        PlanMode::Recurrent => {
            let mut carry: Option<Vec<f64>> = None;
            let mut total = 0.0;
            for w in &plan.windows {
                let (nll, next) = score_window(w, w.carry_from.and(carry.as_deref()))?;
                total += nll;
                carry = Some(next);
            }
            total
        }
    };

    let tokens: usize = plan.windows.iter().map(|w| w.scored_count()).sum();
    let words = match word_weights {
        Some(weights) => plan
            .windows
            .iter()
            .flat_map(|w| w.scored.0..=w.scored.1)
            .map(|j| weights[j - 1] as usize)
            .sum(),
        None => tokens,
    };
    let fpt = flops::flops_per_token(
        model.config(),
        plan.window,
        plan.overlap,
        plan.mode == PlanMode::Recurrent,
    )?;
    Ok(EvalReport::from_totals(total_nll, tokens, words, fpt))
}

/// A document as evaluation sees it.
#[derive(Clone, Copy, Debug)]
pub struct EvalDoc<'a> {
    pub tokens: &'a [u32],
    pub word_weights: Option<&'a [u32]>,
}

/// Evaluates every document independently (no carry crosses documents)
/// and pools the totals. Documents shorter than two tokens are skipped.
pub fn evaluate_corpus(
    model: &Model,
    docs: &[EvalDoc<'_>],
    window: usize,
    overlap: usize,
    mode: PlanMode,
    mask: CarryMask,
    exec: Parallelism,
) -> Result<EvalReport> {
    let usable: Vec<&EvalDoc> = docs.iter().filter(|d| d.tokens.len() >= 2).collect();
    if usable.is_empty() {
        return Err(Error::Input("no document has at least two tokens".into()));
    }
    let reports = par::map(exec, &usable, |d| {
        let plan = make_plan(d.tokens.len(), window, overlap, mode)?;
        // documents are already spread over threads
        evaluate_with(model, d.tokens, &plan, d.word_weights, mask, Parallelism::Sequential)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    EvalReport::combine(&reports)
}

/// Per-token count of words ending at that token.
///
/// `spans[i]` is the byte range of `text` covered by token `i`; the spans
/// must tile the text exactly. A word is a maximal run of non-whitespace
/// characters and is attributed to the token holding its last byte.
pub fn word_end_weights(text: &str, spans: &[Range<usize>]) -> Result<Vec<u32>> {
    let mut expected = 0;
    for s in spans {
        if s.start != expected || s.end <= s.start {
            return Err(Error::Alignment {
                offset: expected,
                detail: format!("token span {s:?} does not continue the tiling"),
            });
        }
        expected = s.end;
    }
    if expected != text.len() {
        return Err(Error::Alignment {
            offset: expected,
            detail: format!("tokens cover {expected} of {} bytes", text.len()),
        });
    }
    let mut weights = vec![0u32; spans.len()];
    let mut tok = 0;
    let mut chars = text.char_indices().peekable();
    while let Some((i, c)) = chars.next() {
        let ends_word = !c.is_whitespace()
            && chars.peek().is_none_or(|&(_, next)| next.is_whitespace());
        if ends_word {
            let last_byte = i + c.len_utf8() - 1;
            while spans[tok].end <= last_byte {
                tok += 1;
            }
            weights[tok] += 1;
        }
    }
    Ok(weights)
}

/// Words whose final token is among the scored positions (0-based).
pub fn word_normalizer(text: &str, spans: &[Range<usize>], scored: &[bool]) -> Result<usize> {
    if scored.len() != spans.len() {
        return Err(Error::Alignment {
            offset: 0,
            detail: format!("{} scored flags for {} tokens", scored.len(), spans.len()),
        });
    }
    let weights = word_end_weights(text, spans)?;
    Ok(weights
        .iter()
        .zip(scored)
        .filter(|(_, &s)| s)
        .map(|(&w, _)| w as usize)
        .sum())
}
