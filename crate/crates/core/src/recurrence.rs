//! The carry path between windows.
//!
//! A window's block outputs are mixed across layers with softmax weights
//! `w = softmax(alphas)`, averaged over positions into `z`, and passed
//! through a small GELU feed-forward network to give the carry `h_prev`
//! consumed by the next window.

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, WindowActivations};
use crate::nn::{mac_counter, Array, ParamStore, Rng, Tape, Var};

pub const PREFIX: &str = "recurrence.";

/// Whether pooling divides the position sum by the window length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PoolNorm {
    #[default]
    Mean,
    Sum,
}

impl PoolNorm {
    fn scale(self, positions: usize) -> f64 {
        match self {
            PoolNorm::Mean => 1.0 / positions as f64,
            PoolNorm::Sum => 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CarryState {
    pub z: Vec<f64>,
    pub h_prev: Vec<f64>,
    /// 1-based index of the window this state summarises.
    pub window_index: usize,
}

#[derive(Clone, Debug)]
pub(crate) struct RecurrenceIds {
    pub alphas: usize,
    /// (weight `in×out`, bias `out`) per layer, output layer last.
    pub ffn: Vec<(usize, usize)>,
}

fn ffn_dims(config: &ModelConfig) -> Vec<usize> {
    let mut dims = vec![config.hidden];
    dims.extend(std::iter::repeat_n(config.carry_hidden, config.carry_depth));
    dims.push(config.hidden);
    dims
}

impl RecurrenceIds {
    pub fn resolve(config: &ModelConfig, params: &ParamStore) -> Result<Self> {
        let get = |name: String, shape: &[usize]| -> Result<usize> {
            let id = params
                .id(&name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name:?}")))?;
            if params.value(id).shape() != shape {
                return Err(Error::Checkpoint(format!("parameter {name:?} has wrong shape")));
            }
            Ok(id)
        };
        let alphas = get(format!("{PREFIX}alphas"), &[config.layers])?;
        let dims = ffn_dims(config);
        let ffn = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| {
                Ok((
                    get(format!("{PREFIX}ffn.{i}.w"), &[d[0], d[1]])?,
                    get(format!("{PREFIX}ffn.{i}.b"), &[d[1]])?,
                ))
            })
            .collect::<Result<_>>()?;
        Ok(RecurrenceIds { alphas, ffn })
    }
}

pub(crate) fn init_params(config: &ModelConfig, p: &mut ParamStore, rng: &mut Rng) {
    p.insert(format!("{PREFIX}alphas"), Array::zeros(&[config.layers]));
    for (i, d) in ffn_dims(config).windows(2).enumerate() {
        let w = Array::new(&[d[0], d[1]], (0..d[0] * d[1]).map(|_| rng.normal(0.02)).collect())
            .unwrap();
        p.insert(format!("{PREFIX}ffn.{i}.w"), w);
        p.insert(format!("{PREFIX}ffn.{i}.b"), Array::zeros(&[d[1]]));
    }
}

/// `w_ℓ = exp(α_ℓ) / Σ_j exp(α_j)`.
pub fn layer_weights(alphas: &[f64]) -> Vec<f64> {
    let max = alphas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = alphas.iter().map(|a| (a - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Layer-weighted pooling of block outputs over window positions.
pub fn pool_window(hiddens: &[Array], weights: &[f64], norm: PoolNorm) -> Result<Vec<f64>> {
    let first = hiddens.first().ok_or(Error::EmptyWindow)?;
    if weights.len() != hiddens.len() {
        return Err(Error::shape("pool_window", &[hiddens.len()], &[weights.len()]));
    }
    let (t, k) = (first.rows(), first.cols());
    let mut z = vec![0.0; k];
    for (h, &w) in hiddens.iter().zip(weights) {
        if h.shape() != first.shape() {
            return Err(Error::shape("pool_window", first.shape(), h.shape()));
        }
        for r in 0..t {
            for (zi, hi) in z.iter_mut().zip(h.row(r)) {
                *zi += w * hi;
            }
        }
        mac_counter::add(h.len() as u64);
    }
    let s = norm.scale(t);
    Ok(z.into_iter().map(|v| v * s).collect())
}

/// Carry network applied to a pooled summary.
pub fn carry_ffn(z: &[f64], model: &Model) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let zv = tape.input(Array::vector(z.to_vec()));
    let out = carry_ffn_taped(&mut tape, zv, model)?;
    Ok(tape.value(out).data().to_vec())
}

pub(crate) fn carry_ffn_taped(tape: &mut Tape, z: Var, model: &Model) -> Result<Var> {
    let cfg = model.config();
    if tape.value(z).len() != cfg.hidden {
        return Err(Error::shape("carry_ffn", tape.value(z).shape(), &[cfg.hidden]));
    }
    let ids = model.recurrence_ids();
    let mut x = z;
    for (i, &(w, b)) in ids.ffn.iter().enumerate() {
        x = model.linear(tape, x, w, b)?;
        if i + 1 < ids.ffn.len() {
            x = tape.gelu(x, cfg.gelu);
        }
    }
    // Callers treat the carry as a flat vector.
    Ok(x)
}

/// Records `z` and `h_prev` for a window whose block outputs are `hiddens`.
pub(crate) fn recurrence_step_taped(
    tape: &mut Tape,
    model: &Model,
    hiddens: &[Var],
) -> Result<(Var, Var)> {
    let cfg = model.config();
    let alphas = model.p(tape, model.recurrence_ids().alphas);
    let w = tape.softmax_rows(alphas)?;
    let t = tape.value(*hiddens.first().ok_or(Error::EmptyWindow)?).rows();
    let z = tape.pool(hiddens, w, cfg.pool_norm.scale(t))?;
    let h = carry_ffn_taped(tape, z, model)?;
    Ok((z, h))
}

/// Pooled summary and carry for a completed window.
pub fn recurrence_step(
    acts: &WindowActivations,
    model: &Model,
    window_index: usize,
) -> Result<CarryState> {
    let alphas = model.params().value(model.recurrence_ids().alphas);
    let w = layer_weights(alphas.data());
    let z = pool_window(&acts.hiddens, &w, model.config().pool_norm)?;
    let h_prev = carry_ffn(&z, model)?;
    Ok(CarryState {
        z,
        h_prev,
        window_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::nn::Rng;
    use proptest::prelude::*;

    fn rand_array(shape: &[usize], rng: &mut Rng) -> Array {
        let n = shape.iter().product();
        Array::new(shape, (0..n).map(|_| rng.normal(1.0)).collect()).unwrap()
    }

    #[test]
    fn weights_examples() {
        for w in layer_weights(&[0.0; 12]) {
            assert!((w - 1.0 / 12.0).abs() < 1e-15);
        }
        let w = layer_weights(&[3f64.ln(), 0.0]);
        assert!((w[0] - 0.75).abs() < 1e-15 && (w[1] - 0.25).abs() < 1e-15);

        let mut rng = Rng::new(1, crate::nn::Purpose::Test);
        let a: Vec<f64> = (0..5).map(|_| rng.normal(2.0)).collect();
        let total: f64 = a.iter().map(|x| x.exp()).sum();
        for (wi, ai) in layer_weights(&a).iter().zip(&a) {
            assert!((wi - ai.exp() / total).abs() < 1e-12);
        }
    }

    #[test]
    fn pool_examples() {
        let v = Array::new(&[3, 2], vec![1.5, -2.0, 1.5, -2.0, 1.5, -2.0]).unwrap();
        let z = pool_window(&[v], &[1.0], PoolNorm::Mean).unwrap();
        assert!((z[0] - 1.5).abs() < 1e-15 && (z[1] + 2.0).abs() < 1e-15);

        let mut rng = Rng::new(2, crate::nn::Purpose::Test);
        let hs: Vec<Array> = (0..3).map(|_| rand_array(&[5, 4], &mut rng)).collect();
        let z = pool_window(&hs, &[0.0, 1.0, 0.0], PoolNorm::Mean).unwrap();
        for j in 0..4 {
            let mean: f64 = (0..5).map(|r| hs[1].row(r)[j]).sum::<f64>() / 5.0;
            assert!((z[j] - mean).abs() < 1e-12);
        }

        // double loop oracle
        let w = [0.2, 0.5, 0.3];
        let z = pool_window(&hs, &w, PoolNorm::Mean).unwrap();
        let zs = pool_window(&hs, &w, PoolNorm::Sum).unwrap();
        for j in 0..4 {
            let mut s = 0.0;
            for i in 0..5 {
                for l in 0..3 {
                    s += w[l] * hs[l].row(i)[j];
                }
            }
            assert!((z[j] - s / 5.0).abs() < 1e-12);
            assert!((zs[j] - s).abs() < 1e-12);
        }

        assert!(matches!(pool_window(&[], &[], PoolNorm::Mean), Err(Error::EmptyWindow)));
    }

    #[test]
    fn carry_ffn_examples() {
        let mut cfg = ModelConfig::tiny(5, 4);
        cfg.hidden = 8;
        cfg.heads = 2;
        let mut m = Model::init(cfg.clone(), 3).unwrap();
        let names: Vec<String> = m
            .params()
            .iter()
            .filter(|(n, _)| n.starts_with("recurrence.ffn"))
            .map(|(n, _)| n.to_string())
            .collect();
        for n in &names {
            let a = m.params_mut().get_mut(n).unwrap();
            a.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        let z = vec![0.5; 8];
        assert_eq!(carry_ffn(&z, &m).unwrap(), vec![0.0; 8]);

        // identity plumbing with no hidden layers
        cfg.carry_depth = 0;
        let mut m = Model::init(cfg.clone(), 3).unwrap();
        *m.params_mut().get_mut("recurrence.ffn.0.w").unwrap() = Array::identity(8);
        let z: Vec<f64> = (0..8).map(|i| i as f64 - 3.5).collect();
        assert_eq!(carry_ffn(&z, &m).unwrap(), z);

        // straight-line oracle with random params
        cfg.carry_depth = 2;
        cfg.carry_hidden = 5;
        let m = Model::init(cfg, 4).unwrap();
        let mut rng = Rng::new(5, crate::nn::Purpose::Test);
        let z: Vec<f64> = (0..8).map(|_| rng.normal(1.0)).collect();
        let mut x = z.clone();
        for i in 0..3 {
            let w = m.params().get(&format!("recurrence.ffn.{i}.w")).unwrap();
            let b = m.params().get(&format!("recurrence.ffn.{i}.b")).unwrap();
            let (n_in, n_out) = (w.shape()[0], w.shape()[1]);
            let mut y = b.data().to_vec();
            for o in 0..n_out {
                for j in 0..n_in {
                    y[o] += x[j] * w.data()[j * n_out + o];
                }
            }
            if i < 2 {
                y = y
                    .iter()
                    .map(|&v| 0.5 * v * (1.0 + libm::erf(v / 2f64.sqrt())))
                    .collect();
            }
            x = y;
        }
        for (a, b) in carry_ffn(&z, &m).unwrap().iter().zip(&x) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn step_is_deterministic_and_uniform_mean() {
        let m = Model::init(ModelConfig::tiny(7, 6), 1).unwrap();
        let a = m.forward_window(&[1, 2, 3], None).unwrap();
        let s1 = recurrence_step(&a, &m, 1).unwrap();
        let s2 = recurrence_step(&a, &m, 1).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(s1.z.len(), 16);
        assert_eq!(s1.h_prev.len(), 16);

        let same = WindowActivations {
            hiddens: vec![a.hiddens[0].clone(), a.hiddens[0].clone()],
            logits: a.logits.clone(),
        };
        let s = recurrence_step(&same, &m, 1).unwrap();
        let single = pool_window(&a.hiddens[..1], &[1.0], PoolNorm::Mean).unwrap();
        for (x, y) in s.z.iter().zip(&single) {
            assert!((x - y).abs() < 1e-14);
        }
    }

    #[test]
    fn gpt2_small_recurrence_budget() {
        let c = ModelConfig::gpt2_small();
        let ratio = c.recurrence_param_count() as f64 / c.transformer_param_count() as f64;
        assert!(ratio < 0.01, "{ratio}");
    }

    proptest! {
        #[test]
        fn weights_sum_to_one_and_shift_invariant(
            a in proptest::collection::vec(-20.0f64..20.0, 1..12),
            c in -50.0f64..50.0,
        ) {
            let w = layer_weights(&a);
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = a.iter().map(|x| x + c).collect();
            for (x, y) in w.iter().zip(layer_weights(&shifted)) {
                prop_assert!((x - y).abs() < 1e-12);
            }
        }

        #[test]
        fn pool_is_permutation_invariant_and_linear(seed in 0u64..1000, s in -3.0f64..3.0) {
            let mut rng = Rng::new(seed, crate::nn::Purpose::Test);
            let hs: Vec<Array> = (0..3).map(|_| rand_array(&[6, 4], &mut rng)).collect();
            let gs: Vec<Array> = (0..3).map(|_| rand_array(&[6, 4], &mut rng)).collect();
            let w = layer_weights(&[rng.normal(1.0), rng.normal(1.0), rng.normal(1.0)]);
            let z = pool_window(&hs, &w, PoolNorm::Mean).unwrap();

            let mut perm: Vec<usize> = (0..6).collect();
            rng.shuffle(&mut perm);
            let permuted: Vec<Array> = hs
                .iter()
                .map(|h| Array::from_rows(&perm.iter().map(|&r| h.row(r).to_vec()).collect::<Vec<_>>()).unwrap())
                .collect();
            let zp = pool_window(&permuted, &w, PoolNorm::Mean).unwrap();
            for (a, b) in z.iter().zip(&zp) {
                prop_assert!((a - b).abs() < 1e-12);
            }

            let combo: Vec<Array> = hs
                .iter()
                .zip(&gs)
                .map(|(h, g)| {
                    let mut c = g.map(|v| v * s);
                    c.add_assign(h);
                    c
                })
                .collect();
            let zc = pool_window(&combo, &w, PoolNorm::Mean).unwrap();
            let zg = pool_window(&gs, &w, PoolNorm::Mean).unwrap();
            for i in 0..4 {
                prop_assert!((zc[i] - (z[i] + s * zg[i])).abs() < 1e-10);
            }
        }
    }
}
