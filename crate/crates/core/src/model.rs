//! Teacher and student networks.
//!
//! A network is a ReLU multilayer feature extractor, a linear classifier on
//! top of the features, and a single affine projection head whose output is
//! L2-normalized into the contrastive embedding space. When a student shares
//! the teacher's classifier the two networks hold the same `Arc`, and a
//! classifier marked frozen is never handed to an optimizer.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datagen::LabeledSet;
use crate::error::{Error, Result};
use crate::numerics::{
    affine_rows, backprop_input, backprop_params, ensure_finite, softmax_slice, DenseArray, Rng,
    EPS_NORM,
};
use crate::optim::{Optimizer, OptimizerConfig};

/// Dense layer `y = W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: DenseArray,
    pub bias: DenseArray,
}

impl Affine {
    /// Uniform Glorot initialization, zero bias.
    pub fn init(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let w = (0..in_dim * out_dim)
            .map(|_| rng.uniform_range(-limit, limit))
            .collect();
        Self {
            weight: DenseArray::matrix(out_dim, in_dim, w).expect("sized"),
            bias: DenseArray::zeros(&[out_dim]),
        }
    }

    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            weight: DenseArray::zeros(&[out_dim, in_dim]),
            bias: DenseArray::zeros(&[out_dim]),
        }
    }

    pub fn from_parts(weight: DenseArray, bias: DenseArray) -> Result<Self> {
        if weight.shape().len() != 2 || bias.shape() != [weight.rows()] {
            return Err(Error::Shape(format!(
                "affine weight {:?} and bias {:?} disagree",
                weight.shape(),
                bias.shape()
            )));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward_rows(&self, x: &[f64], n: usize) -> Vec<f64> {
        affine_rows(x, n, self.weight.values(), self.bias.values(), self.out_dim())
    }

    /// Parameter gradients and the gradient with respect to the input rows.
    fn backward(&self, x: &[f64], dy: &[f64], n: usize, want_input: bool) -> (AffineGrad, Option<Vec<f64>>) {
        let (dw, db) = backprop_params(dy, x, n, self.out_dim(), self.in_dim());
        let dx = want_input.then(|| backprop_input(dy, n, self.weight.values(), self.out_dim(), self.in_dim()));
        (AffineGrad { weight: dw, bias: db }, dx)
    }

    fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weight.values_mut(), self.bias.values_mut()]
    }

    fn params(&self) -> [&[f64]; 2] {
        [self.weight.values(), self.bias.values()]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrad {
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl AffineGrad {
    pub fn zeros_like(a: &Affine) -> Self {
        Self {
            weight: vec![0.0; a.weight.len()],
            bias: vec![0.0; a.bias.len()],
        }
    }

    pub fn add_assign(&mut self, other: &AffineGrad) {
        add_into(&mut self.weight, &other.weight);
        add_into(&mut self.bias, &other.bias);
    }

    pub fn flat(&self) -> [&[f64]; 2] {
        [&self.weight, &self.bias]
    }
}

pub(crate) fn add_into(acc: &mut [f64], x: &[f64]) {
    for (a, b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Affine layers with ReLU between consecutive layers (none after the last).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureExtractor {
    layers: Vec<Affine>,
}

/// Activations saved by a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ExtractorCache {
    n: usize,
    /// `inputs[l]` is the input of layer `l` (post-ReLU of layer `l-1`).
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of every layer; the last one is the feature output.
    pre: Vec<Vec<f64>>,
}

impl ExtractorCache {
    pub fn features(&self) -> &[f64] {
        self.pre.last().expect("at least one layer")
    }

    /// Smallest `|z|` over the pre-activations that pass through a ReLU
    /// (infinite when there are no hidden layers).
    pub fn hidden_margin(&self) -> f64 {
        let hidden = self.pre.len().saturating_sub(1);
        self.pre[..hidden]
            .iter()
            .flatten()
            .fold(f64::INFINITY, |m, z| m.min(z.abs()))
    }

    pub fn batch(&self) -> usize {
        self.n
    }
}

impl FeatureExtractor {
    /// `dims = [input, hidden..., feature]`.
    pub fn init(dims: &[usize], rng: &mut Rng) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "extractor dims must list at least input and feature width, all positive: {dims:?}"
            )));
        }
        let layers = dims.windows(2).map(|w| Affine::init(w[0], w[1], rng)).collect();
        Ok(Self { layers })
    }

    pub fn from_layers(layers: Vec<Affine>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("extractor needs at least one layer".into()));
        }
        for (i, w) in layers.windows(2).enumerate() {
            if w[0].out_dim() != w[1].in_dim() {
                return Err(Error::Shape(format!(
                    "layer {i} outputs {} but layer {} expects {}",
                    w[0].out_dim(),
                    i + 1,
                    w[1].in_dim()
                )));
            }
        }
        Ok(Self { layers })
    }

    pub fn layers(&self) -> &[Affine] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Affine] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].in_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().unwrap().out_dim()
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim()];
        d.extend(self.layers.iter().map(Affine::out_dim));
        d
    }

    /// Features for `n` row-major inputs.
    pub fn forward_rows(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            h = layer.forward_rows(&h, n);
            if l + 1 < self.layers.len() {
                relu_in_place(&mut h);
            }
        }
        h
    }

    pub fn forward_cached(&self, x: &[f64], n: usize) -> ExtractorCache {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.to_vec();
        for (l, layer) in self.layers.iter().enumerate() {
            let z = layer.forward_rows(&h, n);
            inputs.push(h);
            h = z.clone();
            if l + 1 < self.layers.len() {
                relu_in_place(&mut h);
            }
            pre.push(z);
        }
        ExtractorCache { n, inputs, pre }
    }

    /// Parameter gradients given the gradient with respect to the features.
    pub fn backward(&self, cache: &ExtractorCache, d_features: &[f64]) -> Vec<AffineGrad> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut d = d_features.to_vec();
        for l in (0..self.layers.len()).rev() {
            let (g, dx) = self.layers[l].backward(&cache.inputs[l], &d, cache.n, l > 0);
            grads.push(g);
            if let Some(mut dx) = dx {
                for (g, &z) in dx.iter_mut().zip(&cache.pre[l - 1]) {
                    if z <= 0.0 {
                        *g = 0.0;
                    }
                }
                d = dx;
            }
        }
        grads.reverse();
        grads
    }

    pub fn zero_grads(&self) -> Vec<AffineGrad> {
        self.layers.iter().map(AffineGrad::zeros_like).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }
}

fn relu_in_place(h: &mut [f64]) {
    for v in h {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
}

/// Linear classifier `K x d_f` shared between teacher and student.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SharedClassifier {
    pub affine: Affine,
    pub frozen: bool,
}

impl SharedClassifier {
    pub fn num_classes(&self) -> usize {
        self.affine.out_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.affine.in_dim()
    }

    pub fn logits_rows(&self, features: &[f64], n: usize) -> Vec<f64> {
        self.affine.forward_rows(features, n)
    }

    /// Row-wise softmax of the logits.
    pub fn probs_rows(&self, features: &[f64], n: usize) -> Vec<f64> {
        let mut logits = self.logits_rows(features, n);
        softmax_rows_in_place(&mut logits, self.num_classes());
        logits
    }

    /// Parameter gradients and feature gradients given logit gradients.
    pub fn backward(&self, features: &[f64], d_logits: &[f64], n: usize) -> (AffineGrad, Vec<f64>) {
        let (g, dx) = self.affine.backward(features, d_logits, n, true);
        (g, dx.expect("requested"))
    }
}

pub fn softmax_rows_in_place(v: &mut [f64], k: usize) {
    let mut tmp = vec![0.0; k];
    for row in v.chunks_mut(k) {
        softmax_slice(row, &mut tmp);
        row.copy_from_slice(&tmp);
    }
}

/// Single affine map into the embedding space, followed by L2 normalization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionHead {
    pub affine: Affine,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    n: usize,
    features: Vec<f64>,
    norms: Vec<f64>,
    /// Normalized embeddings, `n x d_e`.
    pub embeddings: Vec<f64>,
}

impl ProjectionHead {
    pub fn init(feature_dim: usize, embed_dim: usize, rng: &mut Rng) -> Self {
        Self {
            affine: Affine::init(feature_dim, embed_dim, rng),
        }
    }

    pub fn embed_dim(&self) -> usize {
        self.affine.out_dim()
    }

    pub fn forward_cached(&self, features: &[f64], n: usize) -> HeadCache {
        let de = self.embed_dim();
        let mut u = self.affine.forward_rows(features, n);
        let mut norms = Vec::with_capacity(n);
        for row in u.chunks_mut(de) {
            let nrm = crate::numerics::norm(row);
            if nrm < EPS_NORM {
                row.fill(0.0);
            } else {
                row.iter_mut().for_each(|v| *v /= nrm);
            }
            norms.push(nrm);
        }
        HeadCache {
            n,
            features: features.to_vec(),
            norms,
            embeddings: u,
        }
    }

    /// Back through normalization and the affine map. Returns parameter and
    /// feature gradients.
    pub fn backward(&self, cache: &HeadCache, d_embed: &[f64]) -> (AffineGrad, Vec<f64>) {
        let de = self.embed_dim();
        let mut du = vec![0.0; cache.n * de];
        for r in 0..cache.n {
            let nrm = cache.norms[r];
            if nrm < EPS_NORM {
                continue;
            }
            let z = &cache.embeddings[r * de..(r + 1) * de];
            let dz = &d_embed[r * de..(r + 1) * de];
            let zdz = crate::numerics::dot(z, dz);
            for j in 0..de {
                du[r * de + j] = (dz[j] - z[j] * zdz) / nrm;
            }
        }
        let (g, dx) = self.affine.backward(&cache.features, &du, cache.n, true);
        (g, dx.expect("requested"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
}

impl ArchConfig {
    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.input_dim];
        d.extend(&self.hidden);
        d.push(self.feature_dim);
        d
    }
}

#[derive(Debug, Clone)]
pub struct Network {
    pub extractor: FeatureExtractor,
    pub classifier: Arc<SharedClassifier>,
    pub head: ProjectionHead,
    pub role: Role,
}

impl Network {
    /// Fresh network with its own trainable classifier.
    pub fn init(arch: &ArchConfig, role: Role, rng: &mut Rng) -> Result<Self> {
        let extractor = FeatureExtractor::init(&arch.dims(), rng)?;
        let classifier = SharedClassifier {
            affine: Affine::init(arch.feature_dim, arch.num_classes, rng),
            frozen: false,
        };
        let head = ProjectionHead::init(arch.feature_dim, arch.embed_dim, rng);
        Self::assemble(extractor, Arc::new(classifier), head, role)
    }

    /// Student that aliases the teacher's (frozen) classifier. Only the
    /// extractor's hidden widths may differ from the teacher's.
    pub fn student_sharing(teacher: &Network, hidden: &[usize], embed_dim: usize, rng: &mut Rng) -> Result<Self> {
        let mut dims = vec![teacher.input_dim()];
        dims.extend(hidden);
        dims.push(teacher.feature_dim());
        let extractor = FeatureExtractor::init(&dims, rng)?;
        let head = ProjectionHead::init(teacher.feature_dim(), embed_dim, rng);
        Self::assemble(extractor, Arc::clone(&teacher.classifier), head, Role::Student)
    }

    pub fn assemble(
        extractor: FeatureExtractor,
        classifier: Arc<SharedClassifier>,
        head: ProjectionHead,
        role: Role,
    ) -> Result<Self> {
        if classifier.feature_dim() != extractor.feature_dim() {
            return Err(Error::Shape(format!(
                "classifier expects {} features, extractor produces {}",
                classifier.feature_dim(),
                extractor.feature_dim()
            )));
        }
        if head.affine.in_dim() != extractor.feature_dim() {
            return Err(Error::Shape(format!(
                "projection head expects {} features, extractor produces {}",
                head.affine.in_dim(),
                extractor.feature_dim()
            )));
        }
        Ok(Self {
            extractor,
            classifier,
            head,
            role,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.extractor.input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.extractor.feature_dim()
    }

    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes()
    }

    pub fn shares_classifier_with(&self, other: &Network) -> bool {
        Arc::ptr_eq(&self.classifier, &other.classifier)
    }

    pub fn check_input(&self, dim: usize) -> Result<()> {
        if dim != self.input_dim() {
            return Err(Error::Shape(format!(
                "network expects inputs of length {}, got {dim}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// φ(x) for a single instance.
    pub fn forward_features(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.check_input(x.len())?;
        Ok(self.extractor.forward_rows(x, 1))
    }

    /// Softmax of the classifier applied to φ(x).
    pub fn predict_probs(&self, x: &[f64]) -> Result<Vec<f64>> {
        let f = self.forward_features(x)?;
        Ok(self.classifier.probs_rows(&f, 1))
    }

    /// Normalized embedding of a feature vector.
    pub fn project(&self, feature: &[f64]) -> Result<Vec<f64>> {
        if feature.len() != self.feature_dim() {
            return Err(Error::Shape(format!(
                "projection expects {} features, got {}",
                self.feature_dim(),
                feature.len()
            )));
        }
        Ok(self.head.forward_cached(feature, 1).embeddings)
    }

    /// Features of every row of `x` (`n x d`), as an `n x d_f` matrix.
    pub fn features_batch(&self, x: &DenseArray) -> Result<DenseArray> {
        self.check_input(x.cols())?;
        let f = self.extractor.forward_rows(x.values(), x.rows());
        DenseArray::matrix(x.rows(), self.feature_dim(), f)
    }

    /// Class probabilities of every row of `x`, as an `n x K` matrix.
    pub fn probs_batch(&self, x: &DenseArray) -> Result<DenseArray> {
        let f = self.features_batch(x)?;
        let p = self.classifier.probs_rows(f.values(), x.rows());
        DenseArray::matrix(x.rows(), self.num_classes(), p)
    }

    /// Argmax predictions (lowest index wins ties).
    pub fn predict_labels(&self, x: &DenseArray) -> Result<Vec<usize>> {
        let f = self.features_batch(x)?;
        let logits = self.classifier.logits_rows(f.values(), x.rows());
        Ok(logits.chunks(self.num_classes()).map(argmax).collect())
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Target distribution for [`softmax_cross_entropy`].
pub enum Targets<'a> {
    /// One class index per row.
    Hard(&'a [usize]),
    /// One probability row per instance (`n x K`).
    Soft(&'a [f64]),
}

/// Mean over rows of `-Σ_k q_k log softmax(z)_k` and its gradient with
/// respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], k: usize, targets: Targets<'_>) -> (f64, Vec<f64>) {
    let n = logits.len() / k;
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    let mut p = vec![0.0; k];
    for r in 0..n {
        let z = &logits[r * k..(r + 1) * k];
        softmax_slice(z, &mut p);
        let lse = crate::numerics::log_sum_exp(z);
        let g = &mut grad[r * k..(r + 1) * k];
        match &targets {
            Targets::Hard(labels) => {
                let y = labels[r];
                loss += lse - z[y];
                g.copy_from_slice(&p);
                g[y] -= 1.0;
            }
            Targets::Soft(q) => {
                let q = &q[r * k..(r + 1) * k];
                for j in 0..k {
                    loss -= q[j] * (z[j] - lse);
                    g[j] = p[j] - q[j];
                }
            }
        }
    }
    let scale = 1.0 / n.max(1) as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    (loss * scale, grad)
}

/// `T² · KL(softmax(t/T) ‖ softmax(s/T))` averaged over rows, with its
/// gradient with respect to the student logits `s`.
pub fn softened_kl(student_logits: &[f64], teacher_logits: &[f64], k: usize, temperature: f64) -> (f64, Vec<f64>) {
    let n = student_logits.len() / k;
    let mut loss = 0.0;
    let mut grad = vec![0.0; student_logits.len()];
    let mut q = vec![0.0; k];
    let mut p = vec![0.0; k];
    for r in 0..n {
        let s: Vec<f64> = student_logits[r * k..(r + 1) * k].iter().map(|v| v / temperature).collect();
        let t: Vec<f64> = teacher_logits[r * k..(r + 1) * k].iter().map(|v| v / temperature).collect();
        softmax_slice(&t, &mut q);
        softmax_slice(&s, &mut p);
        let ls = crate::numerics::log_sum_exp(&s);
        let lt = crate::numerics::log_sum_exp(&t);
        for j in 0..k {
            if q[j] > 0.0 {
                loss += q[j] * ((t[j] - lt) - (s[j] - ls));
            }
            grad[r * k + j] = temperature * (p[j] - q[j]);
        }
    }
    let scale = 1.0 / n.max(1) as f64;
    grad.iter_mut().for_each(|g| *g *= scale);
    (loss * temperature * temperature * scale, grad)
}

/// Settings for supervised teacher pretraining.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            optimizer: OptimizerConfig::adam(1e-3),
        }
    }
}

#[derive(Debug, Clone)]
pub struct PretrainOutcome {
    pub teacher: Network,
    pub train_accuracy: f64,
}

/// Trains extractor and classifier with cross-entropy on labeled data, then
/// freezes the classifier.
pub fn pretrain_teacher(
    data: &LabeledSet,
    arch: &ArchConfig,
    cfg: &PretrainConfig,
    rng: &mut Rng,
) -> Result<PretrainOutcome> {
    let labels = data
        .labels()
        .ok_or_else(|| Error::InvalidArgument("teacher pretraining needs labeled data".into()))?;
    if data.num_classes() != arch.num_classes {
        return Err(Error::Shape(format!(
            "data has {} classes, architecture expects {}",
            data.num_classes(),
            arch.num_classes
        )));
    }
    if data.is_empty() {
        return Err(Error::Empty("teacher pretraining data".into()));
    }
    let mut net = Network::init(arch, Role::Teacher, rng)?;
    net.check_input(data.dim())?;
    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let k = arch.num_classes;
    let n = data.len();
    let bs = cfg.batch_size.max(1);
    for epoch in 0..cfg.epochs {
        let lr = cfg.optimizer.lr_at(epoch, cfg.epochs);
        let order = crate::numerics::permutation(n, rng);
        for chunk in order.chunks(bs) {
            let x = data.instances().select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let m = chunk.len();
            let cache = net.extractor.forward_cached(x.values(), m);
            let logits = net.classifier.logits_rows(cache.features(), m);
            let (_, d_logits) = softmax_cross_entropy(&logits, k, Targets::Hard(&y));
            let (g_cls, d_feat) = net.classifier.backward(cache.features(), &d_logits, m);
            let g_ext = net.extractor.backward(&cache, &d_feat);
            let mut grads: Vec<&[f64]> = g_ext.iter().flat_map(|g| g.flat()).collect();
            grads.extend(g_cls.flat());
            let classifier = Arc::get_mut(&mut net.classifier).expect("teacher owns its classifier");
            let mut params = net.extractor.params_mut();
            params.extend(classifier.affine.params_mut());
            opt.step(params, &grads, lr);
        }
    }
    for p in net.extractor.params() {
        ensure_finite(p)?;
    }
    let predicted = net.predict_labels(data.instances())?;
    let correct = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    Arc::get_mut(&mut net.classifier).expect("unique").frozen = true;
    Ok(PretrainOutcome {
        train_accuracy: correct as f64 / n as f64,
        teacher: net,
    })
}
