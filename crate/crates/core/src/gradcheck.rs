//! Finite-difference verification of the analytic gradients.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mixdist::{perturb_batch, perturbed_matrix, ContrastiveConfig, MixParams};
use crate::model::{ArchConfig, Network, ProjectionHead, Role};
use crate::numerics::{DenseArray, Rng};
use crate::objective::{evaluate_batch, trainable_params, ClassifierTerm, ContrastiveSides, ObjectiveSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LossKind {
    CrossEntropy,
    Wfa,
    MdclOneSide,
    MdclCombined,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSizes {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub batch: usize,
}

impl NetSizes {
    /// Random sizes within `d ≤ 8, d_f ≤ 6, d_e ≤ 4, batch ≤ 4`.
    pub fn random(rng: &mut Rng) -> Self {
        let mut pick = |lo: usize, hi: usize| lo + rng.below(hi - lo + 1);
        let input_dim = pick(2, 8);
        let layers = pick(0, 2);
        let hidden = (0..layers).map(|_| pick(2, 8)).collect();
        Self {
            input_dim,
            hidden,
            feature_dim: pick(2, 6),
            embed_dim: pick(2, 4),
            num_classes: pick(2, 5),
            batch: pick(2, 4),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub parameters_checked: usize,
}

pub const FD_STEP: f64 = 1e-5;
/// Minimum distance of any ReLU input from zero at the probe point.
pub const KINK_MARGIN: f64 = 1e-3;

/// `|a - n| / max(|a| + |n|, 1e-6)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-6)
}

fn owned_copy(net: &Network) -> Network {
    let mut c = net.clone();
    c.classifier = Arc::new((*net.classifier).clone());
    c
}

/// Biases start at zero, which puts ReLU inputs exactly on the kink when a
/// whole layer upstream is inactive. Probe at a generic point instead.
fn jitter_biases(net: &mut Network, rng: &mut Rng) {
    let mut bias = |b: &mut DenseArray| b.values_mut().iter_mut().for_each(|v| *v += 0.1 * rng.normal());
    for layer in net.extractor.layers_mut() {
        bias(&mut layer.bias);
    }
    bias(&mut net.head.affine.bias);
    if let Some(c) = Arc::get_mut(&mut net.classifier) {
        if !c.frozen {
            bias(&mut c.affine.bias);
        }
    }
}

/// Worst relative error between analytic and central-difference gradients
/// over every trainable parameter.
pub fn gradient_check(kind: LossKind, sizes: &NetSizes, rng: &mut Rng) -> Result<GradCheckReport> {
    if sizes.batch < 2 && matches!(kind, LossKind::MdclOneSide | LossKind::MdclCombined) {
        return Err(Error::InvalidArgument("contrastive checks need a batch of at least 2".into()));
    }
    let arch = ArchConfig {
        input_dim: sizes.input_dim,
        hidden: sizes.hidden.clone(),
        feature_dim: sizes.feature_dim,
        embed_dim: sizes.embed_dim,
        num_classes: sizes.num_classes,
    };
    let mut teacher = Network::init(&arch, Role::Teacher, rng)?;
    jitter_biases(&mut teacher, rng);
    Arc::get_mut(&mut teacher.classifier).expect("fresh").frozen = true;
    let mut student = match kind {
        LossKind::CrossEntropy => Network::init(&arch, Role::Student, rng)?,
        _ => Network::student_sharing(&teacher, &sizes.hidden, sizes.embed_dim, rng)?,
    };
    let teacher_head = teacher.head.clone();
    let n = sizes.batch;
    let x_bar = DenseArray::matrix(n, sizes.input_dim, (0..n * sizes.input_dim).map(|_| rng.normal()).collect())?;
    let x_hat = perturbed_matrix(&perturb_batch(&x_bar, &MixParams::default(), rng)?);
    // Keep every ReLU input well clear of zero so that no probe crosses a kink.
    let margin = |s: &Network| {
        s.extractor
            .forward_cached(x_bar.values(), n)
            .hidden_margin()
            .min(s.extractor.forward_cached(x_hat.values(), n).hidden_margin())
    };
    jitter_biases(&mut student, rng);
    let mut attempts = 0;
    while margin(&student) < KINK_MARGIN {
        attempts += 1;
        if attempts > 1000 {
            return Err(Error::InvalidArgument("could not find a point away from ReLU kinks".into()));
        }
        jitter_biases(&mut student, rng);
    }
    let labels: Vec<usize> = (0..n).map(|_| rng.below(sizes.num_classes)).collect();
    let contrastive = ContrastiveConfig {
        tau: 0.5,
        ..ContrastiveConfig::default()
    };

    let mut spec = ObjectiveSpec {
        wfa_scale: 0.0,
        alpha_tradeoff: 0.0,
        contrastive,
        sides: ContrastiveSides::Both,
        classifier_scale: 0.0,
        classifier_term: ClassifierTerm::None,
        fixed_weights: None,
    };
    let mut use_hat = false;
    match kind {
        LossKind::CrossEntropy => {
            spec.classifier_scale = 1.0;
            spec.classifier_term = ClassifierTerm::Hard(&labels);
        }
        LossKind::Wfa => spec.wfa_scale = 1.0,
        LossKind::MdclOneSide => {
            spec.alpha_tradeoff = 1.0;
            spec.sides = ContrastiveSides::StudentOnly;
            use_hat = true;
        }
        LossKind::MdclCombined => {
            spec.alpha_tradeoff = 1.0;
            use_hat = true;
        }
    }
    let hat = use_hat.then_some(&x_hat);
    let base = evaluate_batch(&student, &teacher, &teacher_head, &x_bar, hat, &spec)?;
    // The weights are a stop-gradient constant: hold them fixed while probing.
    let weights = base.weights.clone();
    spec.fixed_weights = Some(&weights);
    let analytic: Vec<Vec<f64>> = base.grads.flat().iter().map(|g| g.to_vec()).collect();

    let loss_at = |s: &Network, th: &ProjectionHead| -> Result<f64> {
        Ok(evaluate_batch(s, &teacher, th, &x_bar, hat, &spec)?.terms.total)
    };
    let mut worst = 0.0f64;
    let mut checked = 0;
    for (p, grad) in analytic.iter().enumerate() {
        for (i, &a) in grad.iter().enumerate() {
            let mut plus = owned_copy(&student);
            let mut plus_head = teacher_head.clone();
            trainable_params(&mut plus, &mut plus_head)[p][i] += FD_STEP;
            let mut minus = owned_copy(&student);
            let mut minus_head = teacher_head.clone();
            trainable_params(&mut minus, &mut minus_head)[p][i] -= FD_STEP;
            let numeric = (loss_at(&plus, &plus_head)? - loss_at(&minus, &minus_head)?) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(a, numeric));
            checked += 1;
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst,
        parameters_checked: checked,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kind_passes_on_a_fixed_configuration() {
        let sizes = NetSizes {
            input_dim: 5,
            hidden: vec![6],
            feature_dim: 4,
            embed_dim: 3,
            num_classes: 3,
            batch: 4,
        };
        for kind in [LossKind::CrossEntropy, LossKind::Wfa, LossKind::MdclOneSide, LossKind::MdclCombined] {
            let r = gradient_check(kind, &sizes, &mut Rng::new(5)).unwrap();
            assert!(r.max_rel_error < 1e-4, "{kind:?}: {r:?}");
            assert!(r.parameters_checked > 0);
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0), 0.0);
        assert!((relative_error(1.0, 1.0 + 1e-6) - 1e-6 / (2.0 + 1e-6)).abs() < 1e-15);
    }
}
