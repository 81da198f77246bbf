//! Dense row-major `f64` arrays and the pure kernels every other module
//! builds on.
//!
//! All kernels that perform multiply-adds report them to a thread-local
//! counter (see [`mac_counter`]) so that analytic FLOPs accounting can be
//! checked against what actually executed.

use std::cell::Cell;
use std::fmt;

use crate::error::{Error, Result};

thread_local! {
    static MACS: Cell<u64> = const { Cell::new(0) };
}

/// Thread-local tally of multiply-adds executed by the dense kernels.
pub mod mac_counter {
    use super::MACS;

    pub fn reset() {
        MACS.with(|c| c.set(0));
    }

    pub fn get() -> u64 {
        MACS.with(|c| c.get())
    }

    pub(crate) fn add(n: u64) {
        MACS.with(|c| c.set(c.get() + n));
    }
}

#[derive(Clone, PartialEq)]
pub struct Array {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl fmt::Debug for Array {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Array{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Array {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("array", shape, &[data.len()]));
        }
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::shape("array", shape, &[data.len()]));
        }
        Ok(Array {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        assert!(
            !shape.is_empty() && shape.iter().all(|&d| d > 0),
            "array extents must be >= 1, got {shape:?}"
        );
        Array {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Array {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        assert!(!data.is_empty(), "empty vector");
        Array {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged rows".into()));
        }
        Array::new(&[rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut a = Array::zeros(&[n, n]);
        for i in 0..n {
            a.data[i * n + i] = 1.0;
        }
        a
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Extent of the last axis.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }

    /// Product of all but the last axis.
    pub fn rows(&self) -> usize {
        self.data.len() / self.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        if shape.iter().product::<usize>() != self.data.len() || shape.iter().any(|&d| d == 0) {
            return Err(Error::shape("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn same_shape(&self, other: &Array) -> bool {
        self.shape == other.shape
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Array {
        Array {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Array) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    fn matrix_dims(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            &[m, n] => Ok((m, n)),
            &[n] => Ok((1, n)),
            s => Err(Error::shape(op, s, &[])),
        }
    }

    /// `self[m×n] · other[n×p]`.
    pub fn matmul(&self, other: &Array) -> Result<Array> {
        let (m, n) = self.matrix_dims("matmul")?;
        let (n2, p) = other.matrix_dims("matmul")?;
        if n != n2 {
            return Err(Error::shape("matmul", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * p];
        gemm_nn(&self.data, &other.data, &mut out, m, n, p);
        Array::new(&[m, p], out)
    }

    /// `self[m×n] · other[p×n]ᵀ`.
    pub fn matmul_nt(&self, other: &Array) -> Result<Array> {
        let (m, n) = self.matrix_dims("matmul_nt")?;
        let (p, n2) = other.matrix_dims("matmul_nt")?;
        if n != n2 {
            return Err(Error::shape("matmul_nt", &self.shape, &other.shape));
        }
        let mut out = vec![0.0; m * p];
        gemm_nt(&self.data, &other.data, &mut out, m, n, p);
        Array::new(&[m, p], out)
    }

    pub fn transpose(&self) -> Result<Array> {
        let (m, n) = self.matrix_dims("transpose")?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Array::new(&[n, m], out)
    }
}

/// `out[m×p] += a[m×n] · b[n×p]`
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let out_row = &mut out[i * p..(i + 1) * p];
        for (kk, &aik) in a[i * n..(i + 1) * n].iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            axpy(aik, &b[kk * p..(kk + 1) * p], out_row);
        }
    }
    mac_counter::add((m * n * p) as u64);
}

/// `out[m×p] += a[m×n] · b[p×n]ᵀ`
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        for j in 0..p {
            out[i * p + j] += dot(a_row, &b[j * n..(j + 1) * n]);
        }
    }
    mac_counter::add((m * n * p) as u64);
}

/// `out[n×p] += a[m×n]ᵀ · b[m×p]`
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, p: usize) {
    for kk in 0..m {
        let b_row = &b[kk * p..(kk + 1) * p];
        for (i, &aki) in a[kk * n..(kk + 1) * n].iter().enumerate() {
            if aki == 0.0 {
                continue;
            }
            axpy(aki, b_row, &mut out[i * p..(i + 1) * p]);
        }
    }
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    // Four accumulators let the compiler vectorise without reassociating.
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-wise softmax with per-row max subtraction.
pub fn softmax_rows(x: &Array) -> Result<Array> {
    if x.data.iter().any(|v| v.is_nan()) {
        return Err(Error::NumericDomain {
            op: "softmax_rows",
            detail: "NaN input".into(),
        });
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        softmax_in_place(out.row_mut(r));
    }
    Ok(out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    let inv = 1.0 / total;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// GELU variant. The exact form uses the error function.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GeluKind {
    #[default]
    Erf,
    Tanh,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

pub(crate) fn gelu_scalar(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Erf => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
        GeluKind::Tanh => {
            0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
        }
    }
}

pub(crate) fn gelu_grad_scalar(x: f64, kind: GeluKind) -> f64 {
    match kind {
        GeluKind::Erf => {
            let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
            let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
            cdf + x * pdf
        }
        GeluKind::Tanh => {
            let u = SQRT_2_OVER_PI * (x + 0.044715 * x * x * x);
            let t = u.tanh();
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * 0.044715 * x * x);
            0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
        }
    }
}

pub fn gelu(x: &Array, kind: GeluKind) -> Array {
    x.map(|v| gelu_scalar(v, kind))
}

/// Normalises every vector along the last axis, then applies `gain`/`bias`.
pub fn layer_norm(x: &Array, gain: &Array, bias: &Array, eps: f64) -> Result<Array> {
    let k = x.cols();
    if gain.len() != k || bias.len() != k {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let mut out = x.clone();
    for r in 0..out.rows() {
        let (mean, rstd) = mean_rstd(x.row(r), eps);
        for ((o, g), b) in out.row_mut(r).iter_mut().zip(gain.data()).zip(bias.data()) {
            *o = (*o - mean) * rstd * g + b;
        }
    }
    Ok(out)
}

pub(crate) fn mean_rstd(row: &[f64], eps: f64) -> (f64, f64) {
    let k = row.len() as f64;
    let mean = row.iter().sum::<f64>() / k;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / k;
    (mean, 1.0 / (var + eps).sqrt())
}

/// Mean negative log-likelihood of `targets` under row-wise softmax of
/// `logits`, over masked-in rows only.
pub fn cross_entropy_mean(logits: &Array, targets: &[u32], mask: &[bool]) -> Result<f64> {
    let (n, v) = (logits.rows(), logits.cols());
    if targets.len() != n || mask.len() != n {
        return Err(Error::shape("cross_entropy_mean", logits.shape(), &[targets.len()]));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::EmptyLoss);
    }
    let mut total = 0.0;
    for i in 0..n {
        if !mask[i] {
            continue;
        }
        let t = targets[i] as usize;
        if t >= v {
            return Err(Error::Vocabulary { id: targets[i], vocab: v });
        }
        total += nll_row(logits.row(i), t);
    }
    Ok(total / count as f64)
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub(crate) fn nll_row(row: &[f64], target: usize) -> f64 {
    log_sum_exp(row) - row[target]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
        let n = shape.iter().product();
        Array::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn matmul_identity_and_projector() {
        let b = Array::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        assert_eq!(Array::identity(2).matmul(&b).unwrap(), b);

        let p = Array::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let b = Array::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let expected = Array::from_rows(&[vec![5.0, 6.0], vec![0.0, 0.0]]).unwrap();
        assert_eq!(p.matmul(&b).unwrap(), expected);
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[3, 4], &mut rng);
        let b = random(&[4, 2], &mut rng);
        let c = a.matmul(&b).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for k in 0..4 {
                    s += a.data()[i * 4 + k] * b.data()[k * 2 + j];
                }
                assert!((c.data()[i * 2 + j] - s).abs() < 1e-12);
            }
        }
        let bt = b.transpose().unwrap();
        assert_eq!(a.matmul_nt(&bt).unwrap().shape(), &[3, 2]);
        for (x, y) in a.matmul_nt(&bt).unwrap().data().iter().zip(c.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Array::zeros(&[2, 3]);
        let b = Array::zeros(&[2, 3]);
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn array_rejects_zero_extent_and_bad_length() {
        assert!(Array::new(&[0, 2], vec![]).is_err());
        assert!(Array::new(&[2, 2], vec![1.0; 3]).is_err());
    }

    #[test]
    fn softmax_examples() {
        let x = Array::from_rows(&[
            vec![0.0, 0.0, 0.0],
            vec![2f64.ln(), 0.0, f64::NEG_INFINITY],
            vec![1000.0, 0.0, 0.0],
        ])
        .unwrap();
        let s = softmax_rows(&x).unwrap();
        for v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((s.row(1)[0] - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.row(1)[1] - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(s.row(2)[0], 1.0);
        assert_eq!(s.row(2)[1], 0.0);
        assert!(s.is_finite());
    }

    #[test]
    fn softmax_rejects_nan() {
        let x = Array::vector(vec![0.0, f64::NAN]);
        assert!(matches!(softmax_rows(&x), Err(Error::NumericDomain { .. })));
    }

    #[test]
    fn layer_norm_examples() {
        let one = Array::full(&[2], 1.0);
        let zero = Array::zeros(&[2]);
        let c = Array::vector(vec![3.0, 3.0]);
        assert_eq!(layer_norm(&c, &one, &zero, 1e-5).unwrap().data(), &[0.0, 0.0]);
        let x = Array::vector(vec![1.0, -1.0]);
        let y = layer_norm(&x, &one, &zero, 1e-300).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12 && (y.data()[1] + 1.0).abs() < 1e-12);
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&[3, 7], &mut rng);
        let g = random(&[7], &mut rng);
        let b = random(&[7], &mut rng);
        let y = layer_norm(&x, &g, &b, 1e-5).unwrap();
        for r in 0..3 {
            let row = x.row(r);
            let mut mean = 0.0;
            for v in row {
                mean += v;
            }
            mean /= 7.0;
            let mut var = 0.0;
            for v in row {
                var += (v - mean).powi(2);
            }
            var /= 7.0;
            for j in 0..7 {
                let expect = (row[j] - mean) / (var + 1e-5).sqrt() * g.data()[j] + b.data()[j];
                assert!((y.row(r)[j] - expect).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn layer_norm_gain_shape_error() {
        let x = Array::zeros(&[2, 3]);
        let g = Array::zeros(&[2]);
        assert!(layer_norm(&x, &g, &g, 1e-5).is_err());
    }

    /// erf by its Maclaurin series, summed until terms vanish.
    fn erf_series(x: f64) -> f64 {
        let mut term = x;
        let mut sum = x;
        let mut n = 0.0;
        loop {
            n += 1.0;
            term *= -x * x / n;
            let add = term / (2.0 * n + 1.0);
            sum += add;
            if add.abs() < 1e-18 {
                break;
            }
        }
        sum * 2.0 / std::f64::consts::PI.sqrt()
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0, GeluKind::Erf), 0.0);
        assert!((gelu_scalar(40.0, GeluKind::Erf) - 40.0).abs() < 1e-12);
        let oracle = 0.5 * (1.0 + erf_series(1.0 / 2f64.sqrt()));
        assert!((gelu_scalar(1.0, GeluKind::Erf) - oracle).abs() < 1e-6);
        // tanh form stays close to the exact one
        assert!((gelu_scalar(1.0, GeluKind::Tanh) - oracle).abs() < 1e-3);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Array::zeros(&[3, 4]);
        let ce = cross_entropy_mean(&uniform, &[0, 1, 3], &[true; 3]).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);

        let mut peaked = Array::zeros(&[1, 5]);
        peaked.data_mut()[2] = 1000.0;
        assert!(cross_entropy_mean(&peaked, &[2], &[true]).unwrap() < 1e-12);

        assert!(matches!(
            cross_entropy_mean(&uniform, &[0, 1, 3], &[false; 3]),
            Err(Error::EmptyLoss)
        ));
    }

    #[test]
    fn cross_entropy_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits = random(&[5, 7], &mut rng);
        let targets = [0u32, 6, 3, 3, 1];
        let mask = [true, false, true, true, true];
        let mut total = 0.0;
        let mut n = 0.0;
        for i in 0..5 {
            if !mask[i] {
                continue;
            }
            let row = logits.row(i);
            let z: f64 = row.iter().map(|v| v.exp()).sum();
            total -= (row[targets[i] as usize].exp() / z).ln();
            n += 1.0;
        }
        let ce = cross_entropy_mean(&logits, &targets, &mask).unwrap();
        assert!((ce - total / n).abs() < 1e-10);
    }
}
