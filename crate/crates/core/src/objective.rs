//! Per-batch objective and its gradients.
//!
//! One function evaluates every loss term the trainer can use on a batch
//! (weighted feature alignment, both contrastive sides, and an optional
//! classification term on a student-owned classifier) and back-propagates
//! them into the trainable parameters. The gradient-check harness drives the
//! same function, so what is verified is what trains.

use crate::alignment::{alignment_weights, wfa_loss, AlignmentBatch};
use crate::error::{Error, Result};
use crate::mixdist::{mdcl_loss_one_side, ContrastiveConfig};
use crate::model::{add_into, softened_kl, softmax_cross_entropy, AffineGrad, Network, ProjectionHead, Targets};
use crate::numerics::DenseArray;

/// Extra supervised term on a student that owns its classifier.
#[derive(Debug, Clone)]
pub enum ClassifierTerm<'a> {
    None,
    /// Cross-entropy against the given hard labels.
    Hard(&'a [usize]),
    /// Softened KL against teacher logits (`n x K`) at the given temperature.
    Soft { teacher_logits: &'a [f64], temperature: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContrastiveSides {
    StudentOnly,
    Both,
}

#[derive(Debug, Clone)]
pub struct ObjectiveSpec<'a> {
    /// Multiplier on the alignment term (1 in training, 0 to disable).
    pub wfa_scale: f64,
    /// Trade-off multiplier on the contrastive term.
    pub alpha_tradeoff: f64,
    pub contrastive: ContrastiveConfig,
    pub sides: ContrastiveSides,
    /// Multiplier on the classifier term.
    pub classifier_scale: f64,
    pub classifier_term: ClassifierTerm<'a>,
    /// Alignment weights to use instead of recomputing them from the
    /// current probabilities.
    pub fixed_weights: Option<&'a [f64]>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchTerms {
    pub wfa: f64,
    pub mdcl: f64,
    pub mdcl_student: f64,
    pub mdcl_teacher: f64,
    pub classifier: f64,
    pub total: f64,
    /// False when the batch was too small for the contrastive term.
    pub contrastive_evaluated: bool,
}

#[derive(Debug, Clone)]
pub struct BatchGrads {
    pub student_extractor: Vec<AffineGrad>,
    pub student_head: AffineGrad,
    pub teacher_head: AffineGrad,
    /// Present only when the student owns a trainable classifier.
    pub student_classifier: Option<AffineGrad>,
    /// Always zero: the teacher extractor is frozen and receives no gradient.
    pub teacher_extractor: Vec<AffineGrad>,
}

impl BatchGrads {
    /// Gradient slices in the order of [`trainable_params`].
    pub fn flat(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = self.student_extractor.iter().flat_map(|g| g.flat()).collect();
        v.extend(self.student_head.flat());
        v.extend(self.teacher_head.flat());
        if let Some(c) = &self.student_classifier {
            v.extend(c.flat());
        }
        v
    }
}

/// Trainable parameter slices: student extractor, student head, teacher
/// head, then the student classifier when it is owned and not frozen.
pub fn trainable_params<'a>(student: &'a mut Network, teacher_head: &'a mut ProjectionHead) -> Vec<&'a mut [f64]> {
    let Network {
        extractor,
        classifier,
        head,
        ..
    } = student;
    let mut v = extractor.params_mut();
    v.push(head.affine.weight.values_mut());
    v.push(head.affine.bias.values_mut());
    v.push(teacher_head.affine.weight.values_mut());
    v.push(teacher_head.affine.bias.values_mut());
    if !classifier.frozen {
        if let Some(c) = std::sync::Arc::get_mut(classifier) {
            v.push(c.affine.weight.values_mut());
            v.push(c.affine.bias.values_mut());
        }
    }
    v
}

#[derive(Debug, Clone)]
pub struct BatchEvaluation {
    pub terms: BatchTerms,
    pub grads: BatchGrads,
    /// Alignment weights used for the batch.
    pub weights: Vec<f64>,
}

/// Evaluates the objective on `x_bar` (and its perturbed copy `x_hat`, when
/// given and the batch has at least two rows) and returns every gradient.
pub fn evaluate_batch(
    student: &Network,
    teacher: &Network,
    teacher_head: &ProjectionHead,
    x_bar: &DenseArray,
    x_hat: Option<&DenseArray>,
    spec: &ObjectiveSpec<'_>,
) -> Result<BatchEvaluation> {
    let n = x_bar.rows();
    if n == 0 {
        return Err(Error::Empty("training batch".into()));
    }
    student.check_input(x_bar.cols())?;
    teacher.check_input(x_bar.cols())?;
    if student.feature_dim() != teacher.feature_dim() {
        return Err(Error::Shape(format!(
            "student features {} vs teacher features {}",
            student.feature_dim(),
            teacher.feature_dim()
        )));
    }
    let df = student.feature_dim();
    let k = student.num_classes();
    let owns_classifier = !student.classifier.frozen && !student.shares_classifier_with(teacher);

    let s_bar = student.extractor.forward_cached(x_bar.values(), n);
    let t_feat = teacher.extractor.forward_rows(x_bar.values(), n);
    let s_logits = student.classifier.logits_rows(s_bar.features(), n);
    let mut s_probs = s_logits.clone();
    crate::model::softmax_rows_in_place(&mut s_probs, k);
    let t_probs = teacher.classifier.probs_rows(&t_feat, n);

    let weights = match spec.fixed_weights {
        Some(w) => w.to_vec(),
        None => alignment_weights(&s_probs, &t_probs, k)?,
    };
    let wfa = wfa_loss(&AlignmentBatch {
        n,
        feature_dim: df,
        student_features: s_bar.features(),
        teacher_features: &t_feat,
        weights: &weights,
    })?;
    let mut d_feat_bar: Vec<f64> = wfa.grad_student.iter().map(|g| g * spec.wfa_scale).collect();

    let mut terms = BatchTerms {
        wfa: wfa.loss,
        ..Default::default()
    };

    let mut classifier_grad = None;
    match spec.classifier_term {
        ClassifierTerm::None => {}
        ref term => {
            let (loss, d_logits) = match term {
                ClassifierTerm::Hard(labels) => softmax_cross_entropy(&s_logits, k, Targets::Hard(labels)),
                ClassifierTerm::Soft {
                    teacher_logits,
                    temperature,
                } => softened_kl(&s_logits, teacher_logits, k, *temperature),
                ClassifierTerm::None => unreachable!(),
            };
            terms.classifier = loss;
            let d_logits: Vec<f64> = d_logits.iter().map(|g| g * spec.classifier_scale).collect();
            let (g_cls, d_feat) = student.classifier.backward(s_bar.features(), &d_logits, n);
            add_into(&mut d_feat_bar, &d_feat);
            if owns_classifier {
                classifier_grad = Some(g_cls);
            }
        }
    }
    if classifier_grad.is_none() && owns_classifier {
        classifier_grad = Some(AffineGrad::zeros_like(&student.classifier.affine));
    }

    let mut student_head_grad = AffineGrad::zeros_like(&student.head.affine);
    let mut teacher_head_grad = AffineGrad::zeros_like(&teacher_head.affine);
    let mut extractor_grad;

    match x_hat {
        Some(x_hat) if n >= 2 => {
            if x_hat.rows() != n || x_hat.cols() != x_bar.cols() {
                return Err(Error::Shape(format!(
                    "perturbed batch {:?} does not match {:?}",
                    x_hat.shape(),
                    x_bar.shape()
                )));
            }
            let s_hat = student.extractor.forward_cached(x_hat.values(), n);
            let sh_bar = student.head.forward_cached(s_bar.features(), n);
            let sh_hat = student.head.forward_cached(s_hat.features(), n);
            let de_s = student.head.embed_dim();
            let student_side = mdcl_loss_one_side(&sh_bar.embeddings, &sh_hat.embeddings, de_s, &spec.contrastive)?;
            terms.mdcl_student = student_side.loss;
            terms.contrastive_evaluated = true;

            let a = spec.alpha_tradeoff;
            let scaled = |g: &[f64]| -> Vec<f64> { g.iter().map(|v| v * a).collect() };
            let (g1, d_bar) = student.head.backward(&sh_bar, &scaled(&student_side.grad_bar));
            let (g2, d_hat) = student.head.backward(&sh_hat, &scaled(&student_side.grad_hat));
            student_head_grad.add_assign(&g1);
            student_head_grad.add_assign(&g2);
            add_into(&mut d_feat_bar, &d_bar);
            extractor_grad = student.extractor.backward(&s_bar, &d_feat_bar);
            let hat_grads = student.extractor.backward(&s_hat, &d_hat);
            for (acc, g) in extractor_grad.iter_mut().zip(&hat_grads) {
                acc.add_assign(g);
            }

            if spec.sides == ContrastiveSides::Both {
                let t_hat = teacher.extractor.forward_rows(x_hat.values(), n);
                let th_bar = teacher_head.forward_cached(&t_feat, n);
                let th_hat = teacher_head.forward_cached(&t_hat, n);
                let de_t = teacher_head.embed_dim();
                let teacher_side =
                    mdcl_loss_one_side(&th_bar.embeddings, &th_hat.embeddings, de_t, &spec.contrastive)?;
                terms.mdcl_teacher = teacher_side.loss;
                // Feature gradients on the teacher side are dropped: the
                // teacher extractor is frozen.
                let (g1, _) = teacher_head.backward(&th_bar, &scaled(&teacher_side.grad_bar));
                let (g2, _) = teacher_head.backward(&th_hat, &scaled(&teacher_side.grad_hat));
                teacher_head_grad.add_assign(&g1);
                teacher_head_grad.add_assign(&g2);
            }
            terms.mdcl = terms.mdcl_student + terms.mdcl_teacher;
        }
        _ => {
            extractor_grad = student.extractor.backward(&s_bar, &d_feat_bar);
        }
    }

    terms.total = spec.wfa_scale * terms.wfa
        + spec.alpha_tradeoff * terms.mdcl
        + spec.classifier_scale * terms.classifier;

    Ok(BatchEvaluation {
        terms,
        grads: BatchGrads {
            student_extractor: extractor_grad,
            student_head: student_head_grad,
            teacher_head: teacher_head_grad,
            student_classifier: classifier_grad,
            teacher_extractor: teacher.extractor.zero_grads(),
        },
        weights,
    })
}
