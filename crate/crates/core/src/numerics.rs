//! Numerical kernels shared by every other module: the dense array carrier,
//! stable nonlinearities, similarity measures, batched affine maps, and the
//! seeded random source.

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par;

/// Norms below this are treated as zero by [`l2_normalize`].
pub const EPS_NORM: f64 = 1e-12;

/// Row-major array of `f64` tagged with its shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseArray {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl DenseArray {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if shape.is_empty() {
            return Err(Error::Shape("shape must have at least one axis".into()));
        }
        if expected != values.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                values.len()
            )));
        }
        Ok(Self { shape, values })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            values: vec![0.0; n],
        }
    }

    pub fn vector(values: Vec<f64>) -> Self {
        Self {
            shape: vec![values.len()],
            values,
        }
    }

    /// Builds an `rows x cols` matrix from a flat row-major buffer.
    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], values)
    }

    /// Stacks equal-length rows into a matrix.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut values = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has length {}, expected {cols}",
                    r.len()
                )));
            }
            values.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), cols], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn into_values(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Leading dimension.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of all trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.values[i * c..(i + 1) * c]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let c = self.cols();
        &mut self.values[i * c..(i + 1) * c]
    }

    /// Returns the first non-finite entry as an error.
    pub fn ensure_finite(&self) -> Result<()> {
        ensure_finite(&self.values)
    }

    /// Gathers the given rows into a new matrix.
    pub fn select_rows(&self, indices: &[usize]) -> Self {
        let c = self.cols();
        let mut values = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            values.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Self { shape, values }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }
}

pub fn ensure_finite(values: &[f64]) -> Result<()> {
    match values.iter().position(|v| !v.is_finite()) {
        Some(index) => Err(Error::NonFinite {
            index,
            value: values[index],
        }),
        None => Ok(()),
    }
}

/// Softmax of a single slice with max subtraction.
pub fn softmax_slice(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax along `axis`.
pub fn softmax(logits: &DenseArray, axis: usize) -> Result<DenseArray> {
    let shape = logits.shape();
    if axis >= shape.len() {
        return Err(Error::InvalidArgument(format!(
            "axis {axis} out of range for shape {shape:?}"
        )));
    }
    logits.ensure_finite()?;
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = logits.values();
    let mut out = DenseArray::zeros(shape);
    let dst = out.values_mut();
    let mut lane = vec![0.0; len];
    let mut lane_out = vec![0.0; len];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * len * inner + i;
            for k in 0..len {
                lane[k] = src[base + k * inner];
            }
            softmax_slice(&lane, &mut lane_out);
            for k in 0..len {
                dst[base + k * inner] = lane_out[k];
            }
        }
    }
    Ok(out)
}

/// Log of the sum of exponentials, stable for large inputs.
pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn dot(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| a * b).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Unit vector in the direction of `v`, or the zero vector when
/// `‖v‖ < EPS_NORM`.
pub fn l2_normalize(v: &[f64]) -> Vec<f64> {
    let n = norm(v);
    if n < EPS_NORM {
        vec![0.0; v.len()]
    } else {
        v.iter().map(|x| x / n).collect()
    }
}

/// Cosine similarity plus a flag that is set when both inputs were zero
/// (the value is then defined as 0).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cosine {
    pub value: f64,
    pub degenerate: bool,
}

pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<Cosine> {
    if u.len() != v.len() {
        return Err(Error::Shape(format!(
            "cosine_sim of lengths {} and {}",
            u.len(),
            v.len()
        )));
    }
    let nu = norm(u);
    let nv = norm(v);
    if nu < EPS_NORM || nv < EPS_NORM {
        return Ok(Cosine {
            value: 0.0,
            degenerate: nu < EPS_NORM && nv < EPS_NORM,
        });
    }
    let c = dot(u, v) / (nu * nv);
    Ok(Cosine {
        value: c.clamp(-1.0, 1.0),
        degenerate: false,
    })
}

/// `out[n, o] = Σ_i x[n, i] · w[o, i] + b[o]` for a batch `x` of shape
/// `n x in`, weights `out x in`, bias `out`.
pub fn affine_rows(x: &[f64], n: usize, w: &[f64], b: &[f64], out_dim: usize) -> Vec<f64> {
    let in_dim = x.len().checked_div(n).unwrap_or(0);
    debug_assert_eq!(w.len(), out_dim * in_dim);
    let mut out = vec![0.0; n * out_dim];
    par::for_each_row(&mut out, out_dim, |r, row| {
        let xr = &x[r * in_dim..(r + 1) * in_dim];
        for (o, slot) in row.iter_mut().enumerate() {
            *slot = b[o] + dot(&w[o * in_dim..(o + 1) * in_dim], xr);
        }
    });
    out
}

/// `dx[n, i] = Σ_o dy[n, o] · w[o, i]`.
pub fn backprop_input(dy: &[f64], n: usize, w: &[f64], out_dim: usize, in_dim: usize) -> Vec<f64> {
    let mut dx = vec![0.0; n * in_dim];
    par::for_each_row(&mut dx, in_dim, |r, row| {
        let dyr = &dy[r * out_dim..(r + 1) * out_dim];
        for (o, &g) in dyr.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            let wr = &w[o * in_dim..(o + 1) * in_dim];
            for (slot, &wv) in row.iter_mut().zip(wr) {
                *slot += g * wv;
            }
        }
    });
    dx
}

/// Weight and bias gradients of an affine map: `dw[o, i] = Σ_n dy[n, o] x[n, i]`,
/// `db[o] = Σ_n dy[n, o]`. Each entry sums over the batch in row order.
pub fn backprop_params(
    dy: &[f64],
    x: &[f64],
    n: usize,
    out_dim: usize,
    in_dim: usize,
) -> (Vec<f64>, Vec<f64>) {
    // One extra column per output row carries the bias gradient.
    let stride = in_dim + 1;
    let mut packed = vec![0.0; out_dim * stride];
    par::for_each_row(&mut packed, stride, |o, row| {
        let (wrow, brow) = row.split_at_mut(in_dim);
        for r in 0..n {
            let g = dy[r * out_dim + o];
            if g == 0.0 {
                continue;
            }
            brow[0] += g;
            let xr = &x[r * in_dim..(r + 1) * in_dim];
            for (slot, &xv) in wrow.iter_mut().zip(xr) {
                *slot += g * xv;
            }
        }
    });
    let mut dw = Vec::with_capacity(out_dim * in_dim);
    let mut db = Vec::with_capacity(out_dim);
    for row in packed.chunks(stride) {
        dw.extend_from_slice(&row[..in_dim]);
        db.push(row[in_dim]);
    }
    (dw, db)
}

/// Seeded pseudorandom source.
///
/// Backed by ChaCha with 8 rounds (`rand_chacha::ChaCha8Rng`). The 256-bit
/// key is expanded from the 64-bit seed with the PCG32 procedure of
/// `SeedableRng::seed_from_u64`; the remaining state is a 64-bit stream id
/// (set by [`Rng::substream`]) and a 64-bit block counter. Output words are
/// little-endian and identical on every platform.
#[derive(Debug, Clone)]
pub struct Rng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent generator sharing the seed but reading stream `stream`.
    /// Distinct stream ids never overlap.
    pub fn substream(&self, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(self.seed);
        inner.set_stream(stream);
        Self {
            seed: self.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in `[0, 1)` with 53 bits of precision.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Uniform in `(0, 1]`; safe to take the log of.
    pub fn uniform_open0(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n)
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    /// Log of a Gamma(shape, 1) variate.
    ///
    /// Marsaglia–Tsang squeeze/rejection for `shape ≥ 1`; for `shape < 1`
    /// the boost `G(shape) = G(shape + 1) · U^(1/shape)` is applied in log
    /// space so tiny shapes do not underflow.
    fn log_gamma_variate(&mut self, shape: f64) -> f64 {
        if shape < 1.0 {
            let boosted = self.log_gamma_variate(shape + 1.0);
            return boosted + self.uniform_open0().ln() / shape;
        }
        let d = shape - 1.0 / 3.0;
        let c = 1.0 / (9.0 * d).sqrt();
        loop {
            let x = self.normal();
            let t = 1.0 + c * x;
            if t <= 0.0 {
                continue;
            }
            let v = t * t * t;
            let u = self.uniform_open0();
            let x2 = x * x;
            if u < 1.0 - 0.0331 * x2 * x2 {
                return (d * v).ln();
            }
            if u.ln() < 0.5 * x2 + d * (1.0 - v + v.ln()) {
                return (d * v).ln();
            }
        }
    }

    /// Gamma(shape, 1) variate.
    pub fn gamma(&mut self, shape: f64) -> f64 {
        self.log_gamma_variate(shape).exp()
    }

    /// Beta(a, b) as `X / (X + Y)` with independent gamma variates.
    pub fn beta(&mut self, a: f64, b: f64) -> f64 {
        let lx = self.log_gamma_variate(a);
        let ly = self.log_gamma_variate(b);
        // X/(X+Y) = 1/(1 + exp(ly - lx)), evaluated without forming X or Y.
        let r = 1.0 / (1.0 + (ly - lx).exp());
        r.clamp(0.0, 1.0)
    }

    /// Fisher–Yates shuffle in place.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }
}

/// Beta(δ, δ) draw; used for the statistics-mixing coefficient.
pub fn sample_beta(delta: f64, rng: &mut Rng) -> Result<f64> {
    if !(delta > 0.0) || !delta.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "beta concentration must be positive and finite, got {delta}"
        )));
    }
    Ok(rng.beta(delta, delta))
}

/// Uniform random permutation of `0..n` by Fisher–Yates.
pub fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    rng.shuffle(&mut p);
    p
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use super::Rng;

    fn naive_softmax(x: &[f64]) -> Vec<f64> {
        let e: Vec<f64> = x.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        e.iter().map(|v| v / s).collect()
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&DenseArray::vector(vec![0.0, 0.0]), 0).unwrap();
        assert_eq!(s.values(), &[0.5, 0.5]);

        let s = softmax(&DenseArray::vector(vec![1000.0; 3]), 0).unwrap();
        for v in s.values() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }

        let x = [1.0, 2.0, 3.0];
        let s = softmax(&DenseArray::vector(x.to_vec()), 0).unwrap();
        for (a, b) in s.values().iter().zip(naive_softmax(&x)) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_along_inner_and_outer_axes() {
        let m = DenseArray::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let rows = softmax(&m, 1).unwrap();
        assert!((rows.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!((rows.row(1)[0] - 1.0 / 3.0).abs() < 1e-15);
        let cols = softmax(&m, 0).unwrap();
        for c in 0..3 {
            let s = cols.values()[c] + cols.values()[3 + c];
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!(softmax(&m, 2).is_err());
    }

    #[test]
    fn softmax_rejects_non_finite_with_index() {
        let err = softmax(&DenseArray::vector(vec![0.0, f64::NAN, 1.0]), 0).unwrap_err();
        match err {
            Error::NonFinite { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn sigmoid_examples() {
        assert_eq!(sigmoid(0.0), 0.5);
        // 1/(1+e^-2) = 0.88079707797788244405... (40-digit evaluation)
        assert!((sigmoid(2.0) - 0.880_797_077_977_882_4).abs() < 1e-15);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]), vec![0.6, 0.8]);
        assert_eq!(l2_normalize(&[0.0, 1.0]), vec![0.0, 1.0]);
        assert_eq!(l2_normalize(&[0.0, 0.0]), vec![0.0, 0.0]);
    }

    #[test]
    fn cosine_examples() {
        let c = cosine_sim(&[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!((c.value - 1.0).abs() < 1e-15);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[-1.0, 0.0]).unwrap().value, -1.0);
        let z = cosine_sim(&[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert_eq!(z.value, 0.0);
        assert!(z.degenerate);
        assert!(cosine_sim(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn beta_mean_and_uniformity() {
        let n = 100_000;
        for &delta in &[0.3, 1.0, 4.0] {
            let mut rng = Rng::new(11);
            let mean: f64 = (0..n)
                .map(|_| sample_beta(delta, &mut rng).unwrap())
                .sum::<f64>()
                / n as f64;
            assert!((mean - 0.5).abs() < 0.01, "delta {delta}: mean {mean}");
        }

        // Beta(1,1) is uniform: Kolmogorov–Smirnov distance to the identity CDF.
        let mut rng = Rng::new(5);
        let mut xs: Vec<f64> = (0..n).map(|_| sample_beta(1.0, &mut rng).unwrap()).collect();
        xs.sort_by(f64::total_cmp);
        let ks = xs
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let lo = i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64;
                (x - lo).abs().max((hi - x).abs())
            })
            .fold(0.0, f64::max);
        assert!(ks < 0.01, "ks {ks}");
    }

    #[test]
    fn beta_half_variance() {
        // Var Beta(δ,δ) = δ²/((2δ)²(2δ+1)) = 1/8 at δ = 0.5.
        let delta: f64 = 0.5;
        let expected = delta * delta / ((2.0 * delta).powi(2) * (2.0 * delta + 1.0));
        assert!((expected - 0.125).abs() < 1e-15);
        let n = 100_000;
        let mut rng = Rng::new(3);
        let xs: Vec<f64> = (0..n).map(|_| sample_beta(delta, &mut rng).unwrap()).collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64;
        assert!((var - expected).abs() < 0.005, "var {var}");
    }

    #[test]
    fn beta_rejects_bad_delta() {
        let mut rng = Rng::new(0);
        assert!(sample_beta(0.0, &mut rng).is_err());
        assert!(sample_beta(-1.0, &mut rng).is_err());
        assert!(sample_beta(f64::NAN, &mut rng).is_err());
    }

    #[test]
    fn tiny_delta_stays_in_range() {
        let mut rng = Rng::new(9);
        for _ in 0..10_000 {
            let x = sample_beta(0.01, &mut rng).unwrap();
            assert!((0.0..=1.0).contains(&x));
        }
    }

    #[test]
    fn permutation_examples() {
        let mut rng = Rng::new(1);
        assert_eq!(permutation(1, &mut rng), vec![0]);
        assert!(permutation(0, &mut rng).is_empty());
        let mut p = permutation(50, &mut rng);
        p.sort_unstable();
        assert_eq!(p, (0..50).collect::<Vec<_>>());
        let a = permutation(20, &mut Rng::new(77));
        let b = permutation(20, &mut Rng::new(77));
        assert_eq!(a, b);
    }

    #[test]
    fn substreams_differ_and_are_reproducible() {
        let base = Rng::new(4);
        let mut a = base.substream(1);
        let mut b = base.substream(2);
        let mut a2 = Rng::new(4).substream(1);
        let xa: Vec<u64> = (0..4).map(|_| a.next_u64()).collect();
        let xb: Vec<u64> = (0..4).map(|_| b.next_u64()).collect();
        let xa2: Vec<u64> = (0..4).map(|_| a2.next_u64()).collect();
        assert_ne!(xa, xb);
        assert_eq!(xa, xa2);
    }

    #[test]
    fn affine_kernels_match_loops() {
        let mut rng = Rng::new(2);
        let (n, i_dim, o_dim) = (5, 4, 3);
        let x: Vec<f64> = (0..n * i_dim).map(|_| rng.normal()).collect();
        let w: Vec<f64> = (0..o_dim * i_dim).map(|_| rng.normal()).collect();
        let b: Vec<f64> = (0..o_dim).map(|_| rng.normal()).collect();
        let dy: Vec<f64> = (0..n * o_dim).map(|_| rng.normal()).collect();
        let y = affine_rows(&x, n, &w, &b, o_dim);
        let dx = backprop_input(&dy, n, &w, o_dim, i_dim);
        let (dw, db) = backprop_params(&dy, &x, n, o_dim, i_dim);
        for r in 0..n {
            for o in 0..o_dim {
                let mut s = b[o];
                for i in 0..i_dim {
                    s += w[o * i_dim + i] * x[r * i_dim + i];
                }
                assert!((y[r * o_dim + o] - s).abs() < 1e-12);
            }
            for i in 0..i_dim {
                let s: f64 = (0..o_dim).map(|o| dy[r * o_dim + o] * w[o * i_dim + i]).sum();
                assert!((dx[r * i_dim + i] - s).abs() < 1e-12);
            }
        }
        for o in 0..o_dim {
            let s: f64 = (0..n).map(|r| dy[r * o_dim + o]).sum();
            assert!((db[o] - s).abs() < 1e-12);
            for i in 0..i_dim {
                let s: f64 = (0..n).map(|r| dy[r * o_dim + o] * x[r * i_dim + i]).sum();
                assert!((dw[o * i_dim + i] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn dense_array_shape_contract() {
        assert!(DenseArray::new(vec![2, 3], vec![0.0; 5]).is_err());
        let a = DenseArray::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!((a.rows(), a.cols()), (2, 3));
        assert!(DenseArray::from_rows(&[&[1.0, 2.0], &[3.0]]).is_err());
    }

    proptest! {
        #[test]
        fn softmax_shift_invariance(x in prop::collection::vec(-50.0f64..50.0, 1..8), c in -100.0f64..100.0) {
            let a = softmax(&DenseArray::vector(x.clone()), 0).unwrap();
            let b = softmax(&DenseArray::vector(x.iter().map(|v| v + c).collect()), 0).unwrap();
            for (p, q) in a.values().iter().zip(b.values()) {
                prop_assert!((p - q).abs() < 1e-12);
            }
            prop_assert!((a.values().iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        #[test]
        fn sigmoid_bounds_and_symmetry(x in -30.0f64..30.0) {
            let s = sigmoid(x);
            prop_assert!(s > 0.0 && s < 1.0);
            prop_assert!((s + sigmoid(-x) - 1.0).abs() < 1e-15);
        }

        #[test]
        fn normalize_idempotent(v in prop::collection::vec(-10.0f64..10.0, 1..8)) {
            let once = l2_normalize(&v);
            let twice = l2_normalize(&once);
            for (a, b) in once.iter().zip(&twice) {
                prop_assert!((a - b).abs() < 1e-12);
            }
            if norm(&v) >= EPS_NORM {
                prop_assert!((norm(&once) - 1.0).abs() < 1e-12);
            }
        }

        #[test]
        fn cosine_scale_invariance(
            u in prop::collection::vec(-5.0f64..5.0, 3),
            v in prop::collection::vec(-5.0f64..5.0, 3),
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            prop_assume!(norm(&u) > 1e-3 && norm(&v) > 1e-3);
            let base = cosine_sim(&u, &v).unwrap().value;
            let su: Vec<f64> = u.iter().map(|x| a * x).collect();
            let sv: Vec<f64> = v.iter().map(|x| b * x).collect();
            let scaled = cosine_sim(&su, &sv).unwrap().value;
            prop_assert!((base - scaled).abs() < 1e-12);
            prop_assert!((-1.0..=1.0).contains(&base));
        }
    }
}
