//! Evaluation checked against a brute-force scorer that never consults a
//! window plan.

use winrec::model::{CarryMask, Model, ModelConfig};
use winrec::nn::{Purpose, Rng};
use winrec::windowing::{evaluate, evaluate_corpus, evaluate_with, make_plan, EvalDoc, PlanMode};
use winrec::Parallelism;

fn nll(logits: &[f64], target: u32) -> f64 {
    let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    lse - logits[target as usize]
}

fn random_doc(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = Rng::new(seed, Purpose::Test);
    (0..n).map(|_| rng.below(vocab) as u32).collect()
}

/// Window starts 1, 1+s, 1+2s, ... ; target j belongs to the earliest
/// window able to predict it. Carries come from complete preceding windows.
fn brute_force(model: &Model, doc: &[u32], t: usize, o: usize, recurrent: bool) -> (f64, usize) {
    let n = doc.len();
    let s = t - o;
    let mut starts = vec![1usize];
    while starts.last().unwrap() + t - 1 < n {
        starts.push(starts.last().unwrap() + s);
    }
    let mut carries: Vec<Option<Vec<f64>>> = vec![None];
    for m in 1..starts.len() {
        let a = starts[m - 1];
        let input = &doc[a - 1..(a + t - 1).min(n)];
        let (_, st) = model
            .forward_with_carry(input, carries[m - 1].as_deref(), m, CarryMask::Visible)
            .unwrap();
        carries.push(Some(st.h_prev));
    }
    let mut total = 0.0;
    let mut count = 0;
    for j in 2..=n {
        let m = (0..starts.len()).find(|&m| starts[m] < j && starts[m] + t >= j).unwrap();
        let a = starts[m];
        let ctx = &doc[a - 1..j - 1];
        let carry = if recurrent { carries[m].as_deref() } else { None };
        let acts = model.forward_window(ctx, carry).unwrap();
        total += nll(acts.logits.row(ctx.len() - 1), doc[j - 1]);
        count += 1;
    }
    (total, count)
}

fn model(vocab: usize, seed: u64) -> Model {
    let mut m = Model::init(ModelConfig::tiny(vocab, 16), seed).unwrap();
    let mut rng = Rng::new(seed + 100, Purpose::Test);
    let ps = m.params_mut();
    for id in 0..ps.len() {
        for v in ps.value_mut(id).data_mut() {
            *v += rng.normal(0.2);
        }
    }
    m
}

#[test]
fn baseline_matches_brute_force() {
    let m = model(13, 1);
    let doc = random_doc(40, 13, 2);
    let plan = make_plan(40, 8, 3, PlanMode::Baseline).unwrap();
    let r = evaluate(&m, &doc, &plan, None).unwrap();
    let (want, count) = brute_force(&m, &doc, 8, 3, false);
    assert_eq!(r.scored_token_count, 39);
    assert_eq!(count, 39);
    assert!((r.total_nll - want).abs() < 1e-10 * want.abs());
}

#[test]
fn recurrent_matches_brute_force() {
    let m = model(13, 3);
    let doc = random_doc(40, 13, 4);
    for o in [0, 3, 7] {
        let plan = make_plan(40, 8, o, PlanMode::Recurrent).unwrap();
        let r = evaluate(&m, &doc, &plan, None).unwrap();
        let (want, _) = brute_force(&m, &doc, 8, o, true);
        assert!((r.total_nll - want).abs() < 1e-10 * want.abs(), "o={o}");
    }
}

#[test]
fn uniform_logits_give_vocab_perplexity() {
    let mut m = Model::init(ModelConfig::tiny(4, 16), 0).unwrap();
    for v in m.params_mut().get_mut("wte").unwrap().data_mut() {
        *v = 0.0;
    }
    let doc = random_doc(50, 4, 9);
    for mode in [PlanMode::Baseline, PlanMode::Recurrent] {
        for o in [0, 5] {
            let plan = make_plan(50, 12, o, mode).unwrap();
            let r = evaluate(&m, &doc, &plan, None).unwrap();
            assert!((r.ppl_token - 4.0).abs() < 1e-12);
            assert_eq!(r.scored_token_count, 49);
        }
    }
}

#[test]
fn masked_recurrent_evaluation_equals_baseline() {
    let m = model(11, 5);
    let docs: Vec<Vec<u32>> = (0..4).map(|i| random_doc(30 + 7 * i, 11, 20 + i as u64)).collect();
    let ed: Vec<EvalDoc> = docs.iter().map(|d| EvalDoc { tokens: d, word_weights: None }).collect();
    for o in [0, 2, 5] {
        let base = evaluate_corpus(&m, &ed, 6, o, PlanMode::Baseline, CarryMask::Visible, Parallelism::Parallel)
            .unwrap();
        let masked = evaluate_corpus(&m, &ed, 6, o, PlanMode::Recurrent, CarryMask::Masked, Parallelism::Parallel)
            .unwrap();
        let visible =
            evaluate_corpus(&m, &ed, 6, o, PlanMode::Recurrent, CarryMask::Visible, Parallelism::Parallel)
                .unwrap();
        assert_eq!(base.total_nll, masked.total_nll);
        assert_eq!(base.scored_token_count, masked.scored_token_count);
        assert_eq!(base.ppl_token, masked.ppl_token);
        assert_ne!(base.total_nll, visible.total_nll);
    }
}

#[test]
fn parallel_and_sequential_reports_agree() {
    let m = model(11, 7);
    let doc = random_doc(60, 11, 8);
    let plan = make_plan(60, 10, 4, PlanMode::Baseline).unwrap();
    let a = evaluate_with(&m, &doc, &plan, None, CarryMask::Visible, Parallelism::Parallel).unwrap();
    let b = evaluate_with(&m, &doc, &plan, None, CarryMask::Visible, Parallelism::Sequential).unwrap();
    assert!((a.total_nll - b.total_nll).abs() < 1e-12 * a.total_nll);
    assert_eq!(a.scored_token_count, b.scored_token_count);
}

#[test]
fn overlap_never_shrinks_context() {
    // each target's context under overlap o is at least o+1 tokens unless it
    // sits in the first window
    let m = model(7, 11);
    let doc = random_doc(33, 7, 12);
    let plan = make_plan(33, 8, 5, PlanMode::Baseline).unwrap();
    for (i, w) in plan.windows.iter().enumerate().skip(1) {
        for j in w.scored.0..=w.scored.1 {
            assert!(j - w.input.0 >= 6, "window {i} target {j}");
        }
    }
    let r = evaluate(&m, &doc, &plan, None).unwrap();
    assert_eq!(r.scored_token_count, 32);
}
