//! Labeled sets and the synthetic distribution-shift benchmark.
//!
//! The benchmark draws an "original" K-class problem from isotropic Gaussian
//! blobs and a web pool mixing three strata: fresh in-distribution draws,
//! style-shifted draws (per-instance affine change of scale and offset), and
//! open-set draws from extra classes the teacher never saw. Every pool
//! instance carries a provenance tag so selection quality can be scored.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{softmax_slice, DenseArray, Rng};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Provenance {
    InDistribution,
    StyleShifted,
    OpenSet,
}

impl Provenance {
    pub fn code(self) -> u8 {
        match self {
            Provenance::InDistribution => 0,
            Provenance::StyleShifted => 1,
            Provenance::OpenSet => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Provenance::InDistribution),
            1 => Some(Provenance::StyleShifted),
            2 => Some(Provenance::OpenSet),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Provenance::InDistribution => "in_distribution",
            Provenance::StyleShifted => "style_shifted",
            Provenance::OpenSet => "open_set",
        }
    }
}

/// Instances stored as the rows of an `n x d` matrix, with optional labels
/// and provenance tags.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSet {
    instances: DenseArray,
    labels: Option<Vec<usize>>,
    num_classes: usize,
    provenance: Option<Vec<Provenance>>,
}

impl LabeledSet {
    pub fn new(
        instances: DenseArray,
        labels: Option<Vec<usize>>,
        num_classes: usize,
        provenance: Option<Vec<Provenance>>,
    ) -> Result<Self> {
        if instances.shape().len() != 2 {
            return Err(Error::Shape(format!(
                "instances must be an n x d matrix, got shape {:?}",
                instances.shape()
            )));
        }
        let n = instances.rows();
        if let Some(labels) = &labels {
            if labels.len() != n {
                return Err(Error::Shape(format!(
                    "{} labels for {n} instances",
                    labels.len()
                )));
            }
            if let Some((i, &y)) = labels.iter().enumerate().find(|(_, &y)| y >= num_classes) {
                return Err(Error::InvalidArgument(format!(
                    "label {y} at index {i} outside 0..{num_classes}"
                )));
            }
        }
        if let Some(tags) = &provenance {
            if tags.len() != n {
                return Err(Error::Shape(format!(
                    "{} provenance tags for {n} instances",
                    tags.len()
                )));
            }
        }
        Ok(Self {
            instances,
            labels,
            num_classes,
            provenance,
        })
    }

    pub fn len(&self) -> usize {
        self.instances.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Length of one instance.
    pub fn dim(&self) -> usize {
        self.instances.cols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn instances(&self) -> &DenseArray {
        &self.instances
    }

    pub fn instance(&self, i: usize) -> &[f64] {
        self.instances.row(i)
    }

    pub fn labels(&self) -> Option<&[usize]> {
        self.labels.as_deref()
    }

    pub fn provenance(&self) -> Option<&[Provenance]> {
        self.provenance.as_deref()
    }

    pub fn without_labels(&self) -> Self {
        Self {
            labels: None,
            ..self.clone()
        }
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            instances: self.instances.select_rows(indices),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            num_classes: self.num_classes,
            provenance: self
                .provenance
                .as_ref()
                .map(|p| indices.iter().map(|&i| p[i]).collect()),
        }
    }

    pub fn count_provenance(&self, tag: Provenance) -> usize {
        self.provenance
            .as_ref()
            .map_or(0, |p| p.iter().filter(|&&t| t == tag).count())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftBenchmarkConfig {
    pub dim: usize,
    pub num_classes: usize,
    /// Class `k` is centred at `separation · e_k`.
    pub separation: f64,
    pub within_std: f64,
    pub n_teacher_train: usize,
    pub n_test: usize,
    pub n_pool_in: usize,
    pub n_pool_style: usize,
    pub n_pool_open: usize,
    pub style_scale_lo: f64,
    pub style_scale_hi: f64,
    /// Style offsets are drawn uniformly from `[-style_offset, style_offset]`.
    pub style_offset: f64,
    pub open_classes: usize,
    pub seed: u64,
}

impl Default for ShiftBenchmarkConfig {
    fn default() -> Self {
        Self {
            dim: 16,
            num_classes: 4,
            separation: 4.0,
            within_std: 1.0,
            n_teacher_train: 2000,
            n_test: 1000,
            n_pool_in: 3000,
            n_pool_style: 2000,
            n_pool_open: 2000,
            style_scale_lo: 0.5,
            style_scale_hi: 2.0,
            style_offset: 1.5,
            open_classes: 4,
            seed: 0,
        }
    }
}

impl ShiftBenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.dim < 2 {
            return fail(format!("dim must be >= 2, got {}", self.dim));
        }
        if self.num_classes < 2 {
            return fail(format!("num_classes must be >= 2, got {}", self.num_classes));
        }
        if self.num_classes + self.open_classes > self.dim {
            return fail(format!(
                "num_classes + open_classes = {} exceeds dim {}",
                self.num_classes + self.open_classes,
                self.dim
            ));
        }
        if self.n_pool_open > 0 && self.open_classes == 0 {
            return fail("n_pool_open > 0 requires open_classes >= 1".into());
        }
        if !(self.within_std > 0.0) {
            return fail(format!("within_std must be positive, got {}", self.within_std));
        }
        if !(self.style_scale_lo > 0.0) || self.style_scale_lo > self.style_scale_hi {
            return fail(format!(
                "style scale range [{}, {}] must satisfy 0 < lo <= hi",
                self.style_scale_lo, self.style_scale_hi
            ));
        }
        if !(self.style_offset >= 0.0) {
            return fail(format!("style_offset must be >= 0, got {}", self.style_offset));
        }
        if self.n_pool_in + self.n_pool_style + self.n_pool_open == 0 {
            return fail("web pool would be empty".into());
        }
        Ok(())
    }

    fn mean(&self, class: usize) -> Vec<f64> {
        let mut m = vec![0.0; self.dim];
        m[class] = self.separation;
        m
    }
}

/// Average Bayes-optimal confidence per pool stratum, computed against the
/// original K blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorDiagnostics {
    pub bayes_confidence_in_distribution: f64,
    pub bayes_confidence_style_shifted: f64,
    pub bayes_confidence_open_set: f64,
    /// True when in-distribution instances are on average more confidently
    /// classified than open-set ones (vacuously true if a stratum is empty).
    pub in_distribution_more_confident: bool,
}

#[derive(Debug, Clone)]
pub struct ShiftBenchmark {
    pub original_train: LabeledSet,
    pub web_pool: LabeledSet,
    pub test: LabeledSet,
    pub diagnostics: GeneratorDiagnostics,
}

const STREAM_TRAIN: u64 = 1;
const STREAM_TEST: u64 = 2;
const STREAM_POOL_IN: u64 = 3;
const STREAM_POOL_STYLE: u64 = 4;
const STREAM_POOL_OPEN: u64 = 5;

fn draw_blob(cfg: &ShiftBenchmarkConfig, class: usize, rng: &mut Rng) -> Vec<f64> {
    let mut x = cfg.mean(class);
    for v in &mut x {
        *v += cfg.within_std * rng.normal();
    }
    x
}

/// Original-distribution draws with round-robin class labels.
fn draw_original(cfg: &ShiftBenchmarkConfig, n: usize, rng: &mut Rng) -> (Vec<f64>, Vec<usize>) {
    let mut values = Vec::with_capacity(n * cfg.dim);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let y = i % cfg.num_classes;
        values.extend(draw_blob(cfg, y, rng));
        labels.push(y);
    }
    (values, labels)
}

pub fn gen_shift_benchmark(cfg: &ShiftBenchmarkConfig) -> Result<ShiftBenchmark> {
    cfg.validate()?;
    let root = Rng::new(cfg.seed);
    let k = cfg.num_classes;

    let (train_x, train_y) = draw_original(cfg, cfg.n_teacher_train, &mut root.substream(STREAM_TRAIN));
    let (test_x, test_y) = draw_original(cfg, cfg.n_test, &mut root.substream(STREAM_TEST));

    let pool_n = cfg.n_pool_in + cfg.n_pool_style + cfg.n_pool_open;
    let mut pool_x = Vec::with_capacity(pool_n * cfg.dim);
    let mut pool_y = Vec::with_capacity(pool_n);
    let mut tags = Vec::with_capacity(pool_n);

    let (xs, ys) = draw_original(cfg, cfg.n_pool_in, &mut root.substream(STREAM_POOL_IN));
    pool_x.extend(xs);
    pool_y.extend(ys);
    tags.extend(std::iter::repeat_n(Provenance::InDistribution, cfg.n_pool_in));

    let mut rng = root.substream(STREAM_POOL_STYLE);
    for i in 0..cfg.n_pool_style {
        let y = i % k;
        let x = draw_blob(cfg, y, &mut rng);
        let a = rng.uniform_range(cfg.style_scale_lo, cfg.style_scale_hi);
        let b = rng.uniform_range(-cfg.style_offset, cfg.style_offset);
        pool_x.extend(style_shift(&x, a, b)?);
        pool_y.push(y);
        tags.push(Provenance::StyleShifted);
    }

    let mut rng = root.substream(STREAM_POOL_OPEN);
    for i in 0..cfg.n_pool_open {
        let y = k + i % cfg.open_classes;
        pool_x.extend(draw_blob(cfg, y, &mut rng));
        pool_y.push(y);
        tags.push(Provenance::OpenSet);
    }

    let original_train = LabeledSet::new(
        DenseArray::matrix(cfg.n_teacher_train, cfg.dim, train_x)?,
        Some(train_y),
        k,
        None,
    )?;
    let test = LabeledSet::new(DenseArray::matrix(cfg.n_test, cfg.dim, test_x)?, Some(test_y), k, None)?;
    let web_pool = LabeledSet::new(
        DenseArray::matrix(pool_n, cfg.dim, pool_x)?,
        Some(pool_y),
        k + cfg.open_classes,
        Some(tags),
    )?;

    let diagnostics = diagnose(cfg, &web_pool);
    if !diagnostics.in_distribution_more_confident {
        log::warn!(
            "generator diagnostics: in-distribution confidence {:.4} does not exceed open-set {:.4}",
            diagnostics.bayes_confidence_in_distribution,
            diagnostics.bayes_confidence_open_set
        );
    }
    Ok(ShiftBenchmark {
        original_train,
        web_pool,
        test,
        diagnostics,
    })
}

/// Posterior of the Bayes-optimal classifier for the original blobs (equal
/// priors, shared isotropic covariance).
pub fn bayes_posterior(cfg: &ShiftBenchmarkConfig, x: &[f64]) -> Vec<f64> {
    let logits: Vec<f64> = (0..cfg.num_classes)
        .map(|c| {
            let m = cfg.mean(c);
            let d2: f64 = x.iter().zip(&m).map(|(a, b)| (a - b) * (a - b)).sum();
            -d2 / (2.0 * cfg.within_std * cfg.within_std)
        })
        .collect();
    let mut p = vec![0.0; logits.len()];
    softmax_slice(&logits, &mut p);
    p
}

fn diagnose(cfg: &ShiftBenchmarkConfig, pool: &LabeledSet) -> GeneratorDiagnostics {
    let tags = pool.provenance().expect("pool is tagged");
    let mut sums = [0.0f64; 3];
    let mut counts = [0usize; 3];
    for (i, &tag) in tags.iter().enumerate() {
        let p = bayes_posterior(cfg, pool.instance(i));
        let conf = p.iter().copied().fold(0.0, f64::max);
        sums[tag.code() as usize] += conf;
        counts[tag.code() as usize] += 1;
    }
    let avg = |s: usize| if counts[s] == 0 { 0.0 } else { sums[s] / counts[s] as f64 };
    let (cin, cstyle, copen) = (avg(0), avg(1), avg(2));
    GeneratorDiagnostics {
        bayes_confidence_in_distribution: cin,
        bayes_confidence_style_shifted: cstyle,
        bayes_confidence_open_set: copen,
        in_distribution_more_confident: counts[0] == 0 || counts[2] == 0 || cin > copen,
    }
}

/// Elementwise `a·x + b`.
pub fn style_shift(x: &[f64], a: f64, b: f64) -> Result<Vec<f64>> {
    if !(a > 0.0) {
        return Err(Error::InvalidArgument(format!("style scale must be positive, got {a}")));
    }
    Ok(x.iter().map(|v| a * v + b).collect())
}

/// Averages a channel-major array with exactly three leading channels into
/// one channel. `[3, h, w]` becomes `[h, w]`.
pub fn grayscale_merge(rgb: &DenseArray) -> Result<DenseArray> {
    let shape = rgb.shape();
    if shape.len() < 2 || shape[0] != 3 {
        return Err(Error::Shape(format!(
            "expected a channel-major array with 3 channels, got shape {shape:?}"
        )));
    }
    let plane = rgb.cols();
    let v = rgb.values();
    let out: Vec<f64> = (0..plane)
        .map(|p| (v[p] + v[plane + p] + v[2 * plane + p]) / 3.0)
        .collect();
    DenseArray::new(shape[1..].to_vec(), out)
}
