//! Independent scalar re-implementation of the forward pass, compared
//! against the tape-based model.

use winrec::model::{CarryMask, Model, ModelConfig};
use winrec::nn::{Array, Purpose, Rng, Tape};
use winrec::recurrence::{layer_weights, recurrence_step};

type Mat = Vec<Vec<f64>>;

fn param(m: &Model, name: &str) -> Array {
    m.params().get(name).unwrap_or_else(|| panic!("missing {name}")).clone()
}

fn linear(x: &[f64], w: &Array, b: &Array) -> Vec<f64> {
    let (n_in, n_out) = (w.rows(), w.cols());
    (0..n_out)
        .map(|j| b.data()[j] + (0..n_in).map(|i| x[i] * w.row(i)[j]).sum::<f64>())
        .collect()
}

fn ln(x: &[f64], g: &Array, b: &Array, eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    x.iter()
        .enumerate()
        .map(|(i, v)| (v - mean) / (var + eps).sqrt() * g.data()[i] + b.data()[i])
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / 2f64.sqrt()))
}

/// Returns (logits, block outputs) for one window.
fn naive_forward(m: &Model, tokens: &[u32], carry: Option<&[f64]>) -> (Mat, Vec<Mat>) {
    let c = m.config();
    let (k, heads) = (c.hidden, c.heads);
    let dh = k / heads;
    let wte = param(m, "wte");
    let wpe = param(m, "wpe");
    let t = tokens.len();
    let mut x: Mat = (0..t)
        .map(|i| (0..k).map(|d| wte.row(tokens[i] as usize)[d] + wpe.row(i)[d]).collect())
        .collect();
    let mut hiddens = Vec::new();
    for l in 0..c.layers {
        let p = |s: &str| param(m, &format!("h.{l}.{s}"));
        let (g1, b1) = (p("ln1.g"), p("ln1.b"));
        let h: Mat = x.iter().map(|r| ln(r, &g1, &b1, c.layernorm_eps)).collect();
        let q: Mat = h.iter().map(|r| linear(r, &p("attn.wq"), &p("attn.bq"))).collect();
        let mut kk: Mat = h.iter().map(|r| linear(r, &p("attn.wk"), &p("attn.bk"))).collect();
        let mut vv: Mat = h.iter().map(|r| linear(r, &p("attn.wv"), &p("attn.bv"))).collect();
        let mut offset = 0;
        if let (Some(cv), true) = (carry, l + 1 == c.insert_layer) {
            let ch = ln(cv, &g1, &b1, c.layernorm_eps);
            kk.insert(0, linear(&ch, &p("attn.wk"), &p("attn.bk")));
            vv.insert(0, linear(&ch, &p("attn.wv"), &p("attn.bv")));
            offset = 1;
        }
        let mut att = vec![vec![0.0; k]; t];
        for hd in 0..heads {
            for i in 0..t {
                let slots: Vec<usize> = (0..offset + i + 1).collect();
                let scores: Vec<f64> = slots
                    .iter()
                    .map(|&j| {
                        (0..dh).map(|d| q[i][hd * dh + d] * kk[j][hd * dh + d]).sum::<f64>()
                            / (dh as f64).sqrt()
                    })
                    .collect();
                let mx = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = scores.iter().map(|s| (s - mx).exp()).collect();
                let z: f64 = e.iter().sum();
                for (s, &j) in slots.iter().enumerate() {
                    for d in 0..dh {
                        att[i][hd * dh + d] += e[s] / z * vv[j][hd * dh + d];
                    }
                }
            }
        }
        for i in 0..t {
            let o = linear(&att[i], &p("attn.wo"), &p("attn.bo"));
            for d in 0..k {
                x[i][d] += o[d];
            }
            let h2 = ln(&x[i], &p("ln2.g"), &p("ln2.b"), c.layernorm_eps);
            let u: Vec<f64> = linear(&h2, &p("mlp.w1"), &p("mlp.b1")).into_iter().map(gelu).collect();
            let o = linear(&u, &p("mlp.w2"), &p("mlp.b2"));
            for d in 0..k {
                x[i][d] += o[d];
            }
        }
        hiddens.push(x.clone());
    }
    let (gf, bf, hb) = (param(m, "ln_f.g"), param(m, "ln_f.b"), param(m, "head.bias"));
    let logits = x
        .iter()
        .map(|r| {
            let xf = ln(r, &gf, &bf, c.layernorm_eps);
            (0..c.vocab)
                .map(|v| hb.data()[v] + (0..k).map(|d| xf[d] * wte.row(v)[d]).sum::<f64>())
                .collect()
        })
        .collect();
    (logits, hiddens)
}

fn naive_carry(m: &Model, hiddens: &[Mat]) -> Vec<f64> {
    let c = m.config();
    let w = layer_weights(param(m, "recurrence.alphas").data());
    let t = hiddens[0].len();
    let mut z = vec![0.0; c.hidden];
    for (l, h) in hiddens.iter().enumerate() {
        for row in h {
            for d in 0..c.hidden {
                z[d] += w[l] * row[d] / t as f64;
            }
        }
    }
    let n = c.carry_depth + 1;
    let mut x = z;
    for i in 0..n {
        x = linear(&x, &param(m, &format!("recurrence.ffn.{i}.w")), &param(m, &format!("recurrence.ffn.{i}.b")));
        if i + 1 < n {
            x = x.into_iter().map(gelu).collect();
        }
    }
    x
}

/// Random, non-degenerate parameters: biases and norms away from their
/// identity initialisation so every term participates.
fn perturbed_model(cfg: ModelConfig, seed: u64) -> Model {
    let mut m = Model::init(cfg, seed).unwrap();
    let mut rng = Rng::new(seed, Purpose::Test);
    let ps = m.params_mut();
    for id in 0..ps.len() {
        for v in ps.value_mut(id).data_mut() {
            *v += rng.normal(0.3);
        }
    }
    m
}

fn max_abs_diff(a: &Mat, b: &Array) -> f64 {
    let mut worst: f64 = 0.0;
    for (i, row) in a.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            worst = worst.max((v - b.row(i)[j]).abs());
        }
    }
    worst
}

#[test]
fn forward_with_carry_matches_loop_nest() {
    let mut cfg = ModelConfig::tiny(11, 16);
    cfg.hidden = 8;
    cfg.heads = 2;
    cfg.layers = 2;
    cfg.insert_layer = 2;
    let m = perturbed_model(cfg, 7);
    let w1 = [3u32, 1, 4, 1];
    let w2 = [5u32, 9, 2, 6];

    let (nl, nh) = naive_forward(&m, &w1, None);
    let a1 = m.forward_window(&w1, None).unwrap();
    assert!(max_abs_diff(&nl, &a1.logits) < 1e-10);
    for (n, h) in nh.iter().zip(&a1.hiddens) {
        assert!(max_abs_diff(n, h) < 1e-10);
    }

    let carry = naive_carry(&m, &nh);
    let state = recurrence_step(&a1, &m, 1).unwrap();
    for (a, b) in carry.iter().zip(&state.h_prev) {
        assert!((a - b).abs() < 1e-10, "carry {a} vs {b}");
    }

    let (nl2, _) = naive_forward(&m, &w2, Some(&carry));
    let a2 = m.forward_window(&w2, Some(&state.h_prev)).unwrap();
    assert!(max_abs_diff(&nl2, &a2.logits) < 1e-10);

    // the carry changes the second window's predictions
    let (plain, _) = naive_forward(&m, &w2, None);
    assert!(max_abs_diff(&plain, &a2.logits) > 1e-6);
}

#[test]
fn carry_at_first_layer_matches_loop_nest() {
    let mut cfg = ModelConfig::tiny(7, 8);
    cfg.hidden = 8;
    cfg.insert_layer = 1;
    let m = perturbed_model(cfg, 3);
    let carry: Vec<f64> = (0..8).map(|i| (i as f64 * 0.37).sin()).collect();
    let toks = [1u32, 6, 0];
    let (nl, _) = naive_forward(&m, &toks, Some(&carry));
    let a = m.forward_window(&toks, Some(&carry)).unwrap();
    assert!(max_abs_diff(&nl, &a.logits) < 1e-10);
}

#[test]
fn masked_carry_matches_no_carry_bitwise() {
    let m = perturbed_model(ModelConfig::tiny(9, 8), 5);
    let toks = [1u32, 2, 3, 4, 5];
    let carry = vec![0.5; 16];
    let plain = m.forward_window(&toks, None).unwrap();
    let masked = m.forward_window_masked(&toks, Some(&carry), CarryMask::Masked).unwrap();
    assert_eq!(plain.logits.data(), masked.logits.data());
}

/// Enumerates attention by hand for three positions plus a carry slot.
#[test]
fn attention_enumeration_with_carry_slot() {
    let mut rng = Rng::new(11, Purpose::Test);
    let mut arr = |shape: &[usize]| {
        let n: usize = shape.iter().product();
        Array::new(shape, (0..n).map(|_| rng.normal(1.0)).collect()).unwrap()
    };
    let (t, d) = (3, 4);
    let (q, k, v, ek, ev) = (arr(&[t, d]), arr(&[t, d]), arr(&[t, d]), arr(&[d]), arr(&[d]));
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.input(q.clone()), tape.input(k.clone()), tape.input(v.clone()));
    let (ekv, evv) = (tape.input(ek.clone()), tape.input(ev.clone()));
    let out = tape.attention(qv, kv, vv, Some((ekv, evv)), 1).unwrap();
    let out = tape.value(out).clone();

    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / 2.0;
    for i in 0..t {
        // admissible slots: the carry, then positions 0..=i
        let mut keys: Vec<&[f64]> = vec![ek.data()];
        let mut vals: Vec<&[f64]> = vec![ev.data()];
        for j in 0..=i {
            keys.push(k.row(j));
            vals.push(v.row(j));
        }
        let s: Vec<f64> = keys.iter().map(|kk| dot(q.row(i), kk).exp()).collect();
        let z: f64 = s.iter().sum();
        for c in 0..d {
            let want: f64 = s.iter().zip(&vals).map(|(w, vv)| w / z * vv[c]).sum();
            assert!((out.row(i)[c] - want).abs() < 1e-12);
        }
    }
}

#[test]
fn future_tokens_do_not_change_earlier_logits() {
    let m = perturbed_model(ModelConfig::tiny(9, 8), 9);
    let carry = vec![0.1; 16];
    let a = m.forward_window(&[1, 2, 3, 4], Some(&carry)).unwrap();
    let b = m.forward_window(&[1, 2, 7, 0], Some(&carry)).unwrap();
    for r in 0..2 {
        assert_eq!(a.logits.row(r), b.logits.row(r));
    }
    assert_ne!(a.logits.row(2), b.logits.row(2));
}
