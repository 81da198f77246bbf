//! Wengert-list reverse-mode differentiation over [`Array`] values.
//!
//! Every operation appends a node holding its primal value and enough
//! bookkeeping to push adjoints back to its inputs. [`Tape::backward`]
//! walks the nodes in strict reverse order of recording.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use super::array::{
    axpy, dot, gelu_grad_scalar, gelu_scalar, gemm_nn, gemm_nt, gemm_tn, log_sum_exp,
    mac_counter, mean_rstd, softmax_in_place, Array, GeluKind,
};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u32,
    idx: u32,
}

impl Var {
    fn index(self) -> usize {
        self.idx as usize
    }
}

struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    extra: Option<(Var, Var)>,
    heads: usize,
    /// Per head, per query: probabilities over `[extra?] + tokens`.
    probs: Vec<f64>,
}

enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Gelu(Var, GeluKind),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    Gather {
        table: Var,
        ids: Vec<u32>,
    },
    SoftmaxRows(Var),
    Attention(Box<AttentionRecord>),
    CrossEntropy {
        logits: Var,
        targets: Vec<u32>,
        mask: Vec<bool>,
        scale: f64,
    },
    Pool {
        layers: Vec<Var>,
        weights: Var,
        scale: f64,
    },
}

struct Node {
    value: Array,
    op: Op,
}

pub struct Tape {
    id: u32,
    nodes: Vec<Node>,
    param_leaves: HashMap<usize, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            param_leaves: HashMap::new(),
        }
    }

    fn push(&mut self, value: Array, op: Op) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op });
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.tape != self.id || v.index() >= self.nodes.len() {
            return Err(Error::Tracing(format!("{v:?} is not recorded on this tape")));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.index()].value
    }

    /// A constant leaf. Its adjoint is still available after `backward`.
    pub fn input(&mut self, value: Array) -> Var {
        self.push(value, Op::Input)
    }

    /// Leaf for parameter slot `index`; repeated calls return the same node.
    pub fn param(&mut self, index: usize, value: &Array) -> Var {
        if let Some(&v) = self.param_leaves.get(&index) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param);
        self.param_leaves.insert(index, v);
        v
    }

    /// Scalars held by non-parameter nodes plus saved intermediates.
    pub fn activation_scalars(&self) -> usize {
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::Param => 0,
                Op::Attention(rec) => n.value.len() + rec.probs.len(),
                Op::LayerNorm { stats, .. } => n.value.len() + 2 * stats.len(),
                _ => n.value.len(),
            })
            .sum()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push(out, Op::MatMul(a, b)))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_nt(self.value(b))?;
        Ok(self.push(out, Op::MatMulNt(a, b)))
    }

    /// Adds vector `b` to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        if bv.len() != xv.cols() {
            return Err(Error::shape("add_row", xv.shape(), bv.shape()));
        }
        let mut out = xv.clone();
        for r in 0..out.rows() {
            axpy(1.0, bv.data(), out.row_mut(r));
        }
        Ok(self.push(out, Op::AddRow(x, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(Error::shape("add", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        out.data_mut()
            .iter_mut()
            .zip(bv.data())
            .for_each(|(x, y)| *x += y);
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.len() != bv.len() {
            return Err(Error::shape("mul", av.shape(), bv.shape()));
        }
        let mut out = av.clone();
        out.data_mut()
            .iter_mut()
            .zip(bv.data())
            .for_each(|(x, y)| *x *= y);
        Ok(self.push(out, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let out = Array::scalar(self.value(x).sum());
        self.push(out, Op::Sum(x))
    }

    pub fn gelu(&mut self, x: Var, kind: GeluKind) -> Var {
        let out = self.value(x).map(|v| gelu_scalar(v, kind));
        self.push(out, Op::Gelu(x, kind))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let (gv, bv) = (self.value(gain), self.value(bias));
        let k = xv.cols();
        if k == 0 || gv.len() != k || bv.len() != k {
            return Err(Error::shape("layer_norm", xv.shape(), gv.shape()));
        }
        let mut out = xv.clone();
        let mut stats = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let (mean, rstd) = mean_rstd(xv.row(r), eps);
            stats.push((mean, rstd));
            for ((o, g), b) in out.row_mut(r).iter_mut().zip(gv.data()).zip(bv.data()) {
                *o = (*o - mean) * rstd * g + b;
            }
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
        ))
    }

    /// Rows of `table` selected by `ids`.
    pub fn gather(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let tv = self.value(table);
        let (rows, k) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * k);
        for &id in ids {
            if id as usize >= rows {
                return Err(Error::Vocabulary { id, vocab: rows });
            }
            out.extend_from_slice(tv.row(id as usize));
        }
        let out = Array::new(&[ids.len(), k], out)?;
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let out = super::array::softmax_rows(self.value(x))?;
        Ok(self.push(out, Op::SoftmaxRows(x)))
    }

    /// Multi-head causal self-attention over `T` token positions, with an
    /// optional extra key/value slot that every query may attend to.
    ///
    /// `q`, `k`, `v` are `T×d`; `extra` holds one key row and one value row
    /// (`1×d` each). The result always has `T` rows.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        extra: Option<(Var, Var)>,
        heads: usize,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (t, d) = (qv.rows(), qv.cols());
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::shape("attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", qv.shape(), &[heads]));
        }
        let (ek, ev) = match extra {
            Some((ek, ev)) => {
                let (ekv, evv) = (self.value(ek), self.value(ev));
                if ekv.len() != d || evv.len() != d {
                    return Err(Error::shape("attention", qv.shape(), ekv.shape()));
                }
                (Some(ekv.data()), Some(evv.data()))
            }
            None => (None, None),
        };
        let e = usize::from(extra.is_some());
        let slots = t + e;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; heads * t * slots];
        let mut out = vec![0.0; t * d];
        let mut macs = 0u64;
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..t {
                let qi = &qv.row(i)[cols.clone()];
                let p = &mut probs[(h * t + i) * slots..(h * t + i + 1) * slots];
                let admissible = e + i + 1;
                if let Some(ek) = ek {
                    p[0] = dot(qi, &ek[cols.clone()]) * scale;
                }
                for j in 0..=i {
                    p[e + j] = dot(qi, &kv.row(j)[cols.clone()]) * scale;
                }
                softmax_in_place(&mut p[..admissible]);
                let oi = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                if let Some(ev) = ev {
                    axpy(p[0], &ev[cols.clone()], oi);
                }
                for j in 0..=i {
                    axpy(p[e + j], &vv.row(j)[cols.clone()], oi);
                }
                macs += 2 * (admissible * dh) as u64;
            }
        }
        mac_counter::add(macs);
        let out = Array::new(&[t, d], out)?;
        Ok(self.push(
            out,
            Op::Attention(Box::new(AttentionRecord {
                q,
                k,
                v,
                extra,
                heads,
                probs,
            })),
        ))
    }

    /// `scale · Σ_{masked-in i} −log softmax(logits_i)[targets_i]`, as a
    /// scalar node. `scale = 1/count` gives the mean.
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[u32],
        mask: &[bool],
        scale: f64,
    ) -> Result<Var> {
        let lv = self.value(logits);
        let (n, vocab) = (lv.rows(), lv.cols());
        if targets.len() != n || mask.len() != n {
            return Err(Error::shape("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::EmptyLoss);
        }
        let mut total = 0.0;
        for i in 0..n {
            if mask[i] {
                let t = targets[i] as usize;
                if t >= vocab {
                    return Err(Error::Vocabulary {
                        id: targets[i],
                        vocab,
                    });
                }
                let row = lv.row(i);
                total += log_sum_exp(row) - row[t];
            }
        }
        Ok(self.push(
            Array::scalar(total * scale),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                scale,
            },
        ))
    }

    /// `scale · Σ_i Σ_ℓ w_ℓ · layers[ℓ][i]`, a length-`d` vector.
    pub fn pool(&mut self, layers: &[Var], weights: Var, scale: f64) -> Result<Var> {
        let wv = self.value(weights);
        if wv.len() != layers.len() || layers.is_empty() {
            return Err(Error::shape("pool", wv.shape(), &[layers.len()]));
        }
        let first = self.value(layers[0]).shape().to_vec();
        let d = *first.last().unwrap();
        let mut out = vec![0.0; d];
        for (l, &layer) in layers.iter().enumerate() {
            let hv = self.value(layer);
            if hv.shape() != first.as_slice() {
                return Err(Error::shape("pool", &first, hv.shape()));
            }
            let w = wv.data()[l] * scale;
            for r in 0..hv.rows() {
                axpy(w, hv.row(r), &mut out);
            }
            mac_counter::add(hv.len() as u64);
        }
        let out = Array::vector(out);
        Ok(self.push(
            out,
            Op::Pool {
                layers: layers.to_vec(),
                weights,
                scale,
            },
        ))
    }

    /// Reverse sweep seeded with `d loss / d loss = 1`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        self.check(loss)?;
        if self.value(loss).len() != 1 {
            return Err(Error::Tracing(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.backward_seeded(&[(loss, Array::scalar(1.0))])
    }

    /// Reverse sweep with explicit output adjoints. Used to inject the
    /// adjoint of a carry vector coming from a later window.
    pub fn backward_seeded(&self, seeds: &[(Var, Array)]) -> Result<Gradients> {
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut last = 0;
        for (v, g) in seeds {
            self.check(*v)?;
            if g.len() != self.value(*v).len() {
                return Err(Error::shape("backward seed", self.value(*v).shape(), g.shape()));
            }
            accumulate(&mut grads, *v, g.clone().reshape(self.value(*v).shape())?);
            last = last.max(v.index());
        }
        for idx in (0..=last).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        let params = self
            .param_leaves
            .iter()
            .map(|(&p, &v)| (p, v))
            .collect::<HashMap<_, _>>();
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, idx: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = (av.rows(), av.cols());
                let p = bv.cols();
                let mut ga = vec![0.0; m * n];
                gemm_nt(g.data(), bv.data(), &mut ga, m, p, n);
                let mut gb = vec![0.0; n * p];
                gemm_tn(av.data(), g.data(), &mut gb, m, n, p);
                accumulate_raw(grads, *a, av.shape(), ga);
                accumulate_raw(grads, *b, bv.shape(), gb);
            }
            Op::MatMulNt(a, b) => {
                // c[m×p] = a[m×n] · b[p×n]ᵀ
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, n) = (av.rows(), av.cols());
                let p = bv.rows();
                let mut ga = vec![0.0; m * n];
                gemm_nn(g.data(), bv.data(), &mut ga, m, p, n);
                let mut gb = vec![0.0; p * n];
                gemm_tn(g.data(), av.data(), &mut gb, m, p, n);
                accumulate_raw(grads, *a, av.shape(), ga);
                accumulate_raw(grads, *b, bv.shape(), gb);
            }
            Op::AddRow(x, b) => {
                let bv = self.value(*b);
                let mut gb = vec![0.0; bv.len()];
                for r in 0..g.rows() {
                    axpy(1.0, g.row(r), &mut gb);
                }
                accumulate(grads, *x, g.clone());
                accumulate_raw(grads, *b, bv.shape(), gb);
            }
            Op::Add(a, b) => {
                accumulate_raw(grads, *a, self.value(*a).shape(), g.data().to_vec());
                accumulate_raw(grads, *b, self.value(*b).shape(), g.data().to_vec());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let ga = g.data().iter().zip(bv.data()).map(|(g, y)| g * y).collect();
                let gb = g.data().iter().zip(av.data()).map(|(g, x)| g * x).collect();
                accumulate_raw(grads, *a, av.shape(), ga);
                accumulate_raw(grads, *b, bv.shape(), gb);
            }
            Op::Scale(x, s) => {
                accumulate(grads, *x, g.map(|v| v * s));
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                accumulate(grads, *x, Array::full(xv.shape(), g.data()[0]));
            }
            Op::Gelu(x, kind) => {
                let xv = self.value(*x);
                let gx = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &x)| g * gelu_grad_scalar(x, *kind))
                    .collect();
                accumulate_raw(grads, *x, xv.shape(), gx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => {
                let (xv, gv) = (self.value(*x), self.value(*gain));
                let k = xv.cols();
                let kf = k as f64;
                let mut gx = vec![0.0; xv.len()];
                let mut ggain = vec![0.0; k];
                let mut gbias = vec![0.0; k];
                let mut xhat = vec![0.0; k];
                let mut dxhat = vec![0.0; k];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let (xr, gr) = (xv.row(r), g.row(r));
                    for j in 0..k {
                        xhat[j] = (xr[j] - mean) * rstd;
                        dxhat[j] = gr[j] * gv.data()[j];
                        ggain[j] += gr[j] * xhat[j];
                        gbias[j] += gr[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / kf;
                    let mean_dx = dot(&dxhat, &xhat) / kf;
                    for j in 0..k {
                        gx[r * k + j] = rstd * (dxhat[j] - mean_d - xhat[j] * mean_dx);
                    }
                }
                accumulate_raw(grads, *x, xv.shape(), gx);
                accumulate_raw(grads, *gain, gv.shape(), ggain);
                accumulate_raw(grads, *bias, self.value(*bias).shape(), gbias);
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let mut gt = vec![0.0; tv.len()];
                let k = tv.cols();
                for (r, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    axpy(1.0, g.row(r), &mut gt[id * k..(id + 1) * k]);
                }
                accumulate_raw(grads, *table, tv.shape(), gt);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let mut gx = vec![0.0; y.len()];
                let c = y.cols();
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let inner = dot(yr, gr);
                    for j in 0..c {
                        gx[r * c + j] = yr[j] * (gr[j] - inner);
                    }
                }
                accumulate_raw(grads, *x, self.value(*x).shape(), gx);
            }
            Op::Attention(rec) => self.backprop_attention(rec, g, grads),
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                scale,
            } => {
                let lv = self.value(*logits);
                let s = g.data()[0] * scale;
                let c = lv.cols();
                let mut gl = vec![0.0; lv.len()];
                for i in 0..lv.rows() {
                    if !mask[i] {
                        continue;
                    }
                    let row = &mut gl[i * c..(i + 1) * c];
                    row.copy_from_slice(lv.row(i));
                    softmax_in_place(row);
                    row[targets[i] as usize] -= 1.0;
                    row.iter_mut().for_each(|v| *v *= s);
                }
                accumulate_raw(grads, *logits, lv.shape(), gl);
            }
            Op::Pool {
                layers,
                weights,
                scale,
            } => {
                let wv = self.value(*weights);
                let mut gw = vec![0.0; wv.len()];
                for (l, &layer) in layers.iter().enumerate() {
                    let hv = self.value(layer);
                    let w = wv.data()[l] * scale;
                    let mut gh = vec![0.0; hv.len()];
                    let d = hv.cols();
                    for r in 0..hv.rows() {
                        gw[l] += scale * dot(hv.row(r), g.data());
                        axpy(w, g.data(), &mut gh[r * d..(r + 1) * d]);
                    }
                    accumulate_raw(grads, layer, hv.shape(), gh);
                }
                accumulate_raw(grads, *weights, wv.shape(), gw);
            }
        }
    }

    fn backprop_attention(&self, rec: &AttentionRecord, g: &Array, grads: &mut [Option<Array>]) {
        let (qv, kv, vv) = (self.value(rec.q), self.value(rec.k), self.value(rec.v));
        let (t, d) = (qv.rows(), qv.cols());
        let e = usize::from(rec.extra.is_some());
        let slots = t + e;
        let heads = rec.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (ek, ev) = match rec.extra {
            Some((ek, ev)) => (Some(self.value(ek).data()), Some(self.value(ev).data())),
            None => (None, None),
        };
        let mut gq = vec![0.0; t * d];
        let mut gk = vec![0.0; t * d];
        let mut gv = vec![0.0; t * d];
        let mut gek = vec![0.0; d];
        let mut gev = vec![0.0; d];
        let mut dp = vec![0.0; slots];
        for h in 0..heads {
            let cols = h * dh..(h + 1) * dh;
            for i in 0..t {
                let p = &rec.probs[(h * t + i) * slots..(h * t + i + 1) * slots];
                let admissible = e + i + 1;
                let gi = &g.row(i)[cols.clone()];
                if let Some(ev) = ev {
                    dp[0] = dot(gi, &ev[cols.clone()]);
                    axpy(p[0], gi, &mut gev[cols.clone()]);
                }
                for j in 0..=i {
                    dp[e + j] = dot(gi, &vv.row(j)[cols.clone()]);
                    axpy(p[e + j], gi, &mut gv[j * d + h * dh..j * d + (h + 1) * dh]);
                }
                let inner = dot(&p[..admissible], &dp[..admissible]);
                let qi = &qv.row(i)[cols.clone()];
                let gqi_range = i * d + h * dh..i * d + (h + 1) * dh;
                if let Some(ek) = ek {
                    let ds = p[0] * (dp[0] - inner) * scale;
                    axpy(ds, &ek[cols.clone()], &mut gq[gqi_range.clone()]);
                    axpy(ds, qi, &mut gek[cols.clone()]);
                }
                for j in 0..=i {
                    let ds = p[e + j] * (dp[e + j] - inner) * scale;
                    axpy(ds, &kv.row(j)[cols.clone()], &mut gq[gqi_range.clone()]);
                    axpy(ds, qi, &mut gk[j * d + h * dh..j * d + (h + 1) * dh]);
                }
            }
        }
        accumulate_raw(grads, rec.q, qv.shape(), gq);
        accumulate_raw(grads, rec.k, kv.shape(), gk);
        accumulate_raw(grads, rec.v, vv.shape(), gv);
        if let Some((ek, ev)) = rec.extra {
            accumulate_raw(grads, ek, self.value(ek).shape(), gek);
            accumulate_raw(grads, ev, self.value(ev).shape(), gev);
        }
    }
}

fn accumulate(grads: &mut [Option<Array>], v: Var, g: Array) {
    match &mut grads[v.index()] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn accumulate_raw(grads: &mut [Option<Array>], v: Var, shape: &[usize], g: Vec<f64>) {
    match &mut grads[v.index()] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(&g)
            .for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(Array::new(shape, g).expect("adjoint shape")),
    }
}

/// Adjoints produced by one reverse sweep.
pub struct Gradients {
    grads: Vec<Option<Array>>,
    params: HashMap<usize, Var>,
}

impl Gradients {
    /// Adjoint of any recorded node; `None` if no path reaches it.
    pub fn of(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.index()).and_then(|g| g.as_ref())
    }

    /// Adjoint of parameter slot `index`, if it was used on the tape.
    pub fn param(&self, index: usize) -> Option<&Array> {
        self.params.get(&index).and_then(|&v| self.of(v))
    }
}
