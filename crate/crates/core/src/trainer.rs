//! Training loops: the full distillation pipeline, its ablation variants,
//! the soft-label KD baseline, and evaluation.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::datagen::LabeledSet;
use crate::error::{Error, Result};
use crate::mixdist::{
    additive_noise, mean_abs_perturbation, perturb_batch, perturbed_matrix, ContrastiveConfig, MixParams,
    PerturbedPair,
};
use crate::model::{argmax, softened_kl, softmax_cross_entropy, Affine, Network, SharedClassifier, Targets};
use crate::numerics::{permutation, DenseArray, Rng};
use crate::objective::{evaluate_batch, trainable_params, ClassifierTerm, ContrastiveSides, ObjectiveSpec};
use crate::optim::{Optimizer, OptimizerConfig};
use crate::selection::{alpha_schedule, select_from_probs, selection_quality, ScheduleState, SelectionOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    Full,
    NoClassifierSharingOneHot,
    NoClassifierSharingSoft,
    RandomSelection,
    StudentOnlySelection,
    TeacherOnlySelection,
    #[serde(rename = "NoMDCL")]
    NoMdcl,
    NoMixDistribution,
    #[serde(rename = "KDBaselineOnPool")]
    KdBaselineOnPool,
}

impl Variant {
    pub const ALL: [Variant; 9] = [
        Variant::Full,
        Variant::NoClassifierSharingOneHot,
        Variant::NoClassifierSharingSoft,
        Variant::RandomSelection,
        Variant::StudentOnlySelection,
        Variant::TeacherOnlySelection,
        Variant::NoMdcl,
        Variant::NoMixDistribution,
        Variant::KdBaselineOnPool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "Full",
            Variant::NoClassifierSharingOneHot => "NoClassifierSharingOneHot",
            Variant::NoClassifierSharingSoft => "NoClassifierSharingSoft",
            Variant::RandomSelection => "RandomSelection",
            Variant::StudentOnlySelection => "StudentOnlySelection",
            Variant::TeacherOnlySelection => "TeacherOnlySelection",
            Variant::NoMdcl => "NoMDCL",
            Variant::NoMixDistribution => "NoMixDistribution",
            Variant::KdBaselineOnPool => "KDBaselineOnPool",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(|v| v.name()).collect();
                Error::Config(format!("unknown variant `{s}` (expected one of {})", names.join(", ")))
            })
    }

    /// True when the student aliases the teacher's frozen classifier.
    pub fn shares_classifier(self) -> bool {
        !matches!(
            self,
            Variant::NoClassifierSharingOneHot | Variant::NoClassifierSharingSoft | Variant::KdBaselineOnPool
        )
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub alpha_tradeoff: f64,
    pub contrastive: ContrastiveConfig,
    pub v_th: f64,
    pub mix: MixParams,
    pub seed: u64,
    pub variant: Variant,
    /// Hidden widths of the student extractor.
    pub student_hidden: Vec<usize>,
    pub embed_dim: usize,
    /// Softening temperature for KL targets.
    pub kd_temperature: f64,
    /// Weight of the KL term in the KD baseline.
    pub kd_lambda: f64,
    /// Optimizer for the KD baseline, which trains a full classifier head
    /// on raw cross-entropy and KL targets.
    pub kd_optimizer: OptimizerConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 64,
            optimizer: OptimizerConfig::sgd(0.05),
            alpha_tradeoff: 0.01,
            contrastive: ContrastiveConfig::default(),
            v_th: 0.95,
            mix: MixParams::default(),
            seed: 0,
            variant: Variant::Full,
            student_hidden: vec![32, 32],
            embed_dim: 32,
            kd_temperature: 4.0,
            kd_lambda: 1.0,
            kd_optimizer: OptimizerConfig::adam(1e-3),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.optimizer.learning_rate >= 0.0) || !self.optimizer.learning_rate.is_finite() {
            return bad(format!("learning_rate must be finite and nonnegative, got {}", self.optimizer.learning_rate));
        }
        if !(self.alpha_tradeoff >= 0.0) || !self.alpha_tradeoff.is_finite() {
            return bad(format!("alpha_tradeoff must be >= 0, got {}", self.alpha_tradeoff));
        }
        if !(self.contrastive.tau > 0.0) {
            return bad(format!("tau must be > 0, got {}", self.contrastive.tau));
        }
        if !(self.v_th > 0.0 && self.v_th <= 1.0) {
            return bad(format!("v_th must lie in (0, 1], got {}", self.v_th));
        }
        if self.embed_dim == 0 {
            return bad("embed_dim must be at least 1".into());
        }
        if !(self.kd_temperature > 0.0) {
            return bad(format!("kd_temperature must be > 0, got {}", self.kd_temperature));
        }
        if !(self.kd_optimizer.learning_rate >= 0.0) || !self.kd_optimizer.learning_rate.is_finite() {
            return bad(format!("kd_learning_rate must be finite and nonnegative, got {}", self.kd_optimizer.learning_rate));
        }
        if !(self.kd_lambda >= 0.0) {
            return bad(format!("kd_lambda must be >= 0, got {}", self.kd_lambda));
        }
        self.mix.validate().map_err(|e| Error::Config(e.to_string()))
    }
}

/// `L_wfa + α·L_mdcl`.
pub fn total_loss(l_wfa: f64, l_mdcl: f64, alpha_tradeoff: f64) -> f64 {
    l_wfa + alpha_tradeoff * l_mdcl
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha_schedule: f64,
    pub learning_rate: f64,
    /// Batch means. `combined_loss = l_wfa + alpha_tradeoff * l_mdcl + l_classifier`.
    pub l_wfa: f64,
    pub l_mdcl: f64,
    pub l_mdcl_student: f64,
    pub l_mdcl_teacher: f64,
    /// Supervised term on a student-owned classifier (0 when shared).
    pub l_classifier: f64,
    pub combined_loss: f64,
    pub selected_count: usize,
    /// `None` when the pool carries no provenance tags.
    pub selection_precision: Option<f64>,
    pub selection_recall: Option<f64>,
    pub selected_in_distribution: Option<usize>,
    pub selected_style_shifted: Option<usize>,
    pub selected_open_set: Option<usize>,
    pub test_accuracy: f64,
    pub skipped: bool,
    pub batches: usize,
    pub contrastive_batches: usize,
    /// Mean `|x̂ - x̄|` over the epoch's perturbed batches.
    pub mean_perturbation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub variant: Variant,
    pub seed: u64,
    pub config: TrainConfig,
    pub pool_size: usize,
    pub epochs: Vec<EpochRecord>,
    pub skipped_epochs: usize,
    pub final_test_accuracy: f64,
    /// Epoch boundaries at which the shared classifier was checked against
    /// its pretrained values.
    pub classifier_checks: usize,
    /// Kept out of the JSON so that records stay byte-reproducible.
    #[serde(skip)]
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable") + "\n"
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn write_epoch_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record([
            "epoch",
            "alpha_schedule",
            "learning_rate",
            "l_wfa",
            "l_mdcl",
            "l_classifier",
            "combined_loss",
            "selected_count",
            "selection_precision",
            "selection_recall",
            "test_accuracy",
            "skipped",
        ])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for e in &self.epochs {
            w.write_record([
                e.epoch.to_string(),
                e.alpha_schedule.to_string(),
                e.learning_rate.to_string(),
                e.l_wfa.to_string(),
                e.l_mdcl.to_string(),
                e.l_classifier.to_string(),
                e.combined_loss.to_string(),
                e.selected_count.to_string(),
                opt(e.selection_precision),
                opt(e.selection_recall),
                e.test_accuracy.to_string(),
                (e.skipped as u8).to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<epoch csv>", e))?;
        Ok(())
    }

    /// Last epoch's selection precision, if measured.
    pub fn final_precision(&self) -> Option<f64> {
        self.epochs.last().and_then(|e| e.selection_precision)
    }
}

/// Fraction of argmax-correct predictions.
pub fn evaluate(net: &Network, test: &LabeledSet) -> Result<f64> {
    let labels = test
        .labels()
        .ok_or_else(|| Error::InvalidArgument("evaluation needs a labeled test set".into()))?;
    if test.is_empty() {
        return Err(Error::Empty("test set".into()));
    }
    let predicted = net.predict_labels(test.instances())?;
    let correct = predicted.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(correct as f64 / test.len() as f64)
}

/// Everything [`distill`] and [`run_ablation`] return.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub student: Network,
    /// The teacher's projection head after training (the teacher's
    /// extractor and classifier never change).
    pub teacher_head: crate::model::ProjectionHead,
    pub record: RunRecord,
}

const STREAM_INIT: u64 = 101;
const STREAM_SHUFFLE: u64 = 102;
const STREAM_PERTURB: u64 = 103;
const STREAM_RANDOM_SELECT: u64 = 104;
const STREAM_NOISE: u64 = 105;

/// Full pipeline. `cfg.variant` must be `Full`.
pub fn distill(teacher: &Network, pool: &LabeledSet, test: &LabeledSet, cfg: &TrainConfig, rng: &Rng) -> Result<TrainOutcome> {
    if cfg.variant != Variant::Full {
        return Err(Error::InvalidArgument(format!(
            "distill runs the Full variant; use run_ablation for {}",
            cfg.variant
        )));
    }
    train_variant(teacher, pool, test, cfg, rng)
}

/// Full pipeline with one component replaced, as selected by `variant`.
pub fn run_ablation(
    variant: Variant,
    teacher: &Network,
    pool: &LabeledSet,
    test: &LabeledSet,
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<TrainOutcome> {
    if variant == Variant::Full {
        return Err(Error::InvalidArgument("run_ablation needs a variant other than Full".into()));
    }
    let mut cfg = cfg.clone();
    cfg.variant = variant;
    if variant == Variant::KdBaselineOnPool {
        return kd_baseline(teacher, pool, HardLabels::TeacherArgmax, test, &cfg, rng);
    }
    train_variant(teacher, pool, test, &cfg, rng)
}

/// Dispatches on `cfg.variant`.
pub fn run_variant(teacher: &Network, pool: &LabeledSet, test: &LabeledSet, cfg: &TrainConfig, rng: &Rng) -> Result<TrainOutcome> {
    match cfg.variant {
        Variant::Full => distill(teacher, pool, test, cfg, rng),
        v => run_ablation(v, teacher, pool, test, cfg, rng),
    }
}

fn check_teacher(teacher: &Network, pool: &LabeledSet, test: &LabeledSet) -> Result<()> {
    if !teacher.classifier.frozen {
        return Err(Error::InvalidArgument("teacher classifier must be pretrained and frozen".into()));
    }
    teacher.check_input(pool.dim())?;
    teacher.check_input(test.dim())?;
    if test.num_classes() != teacher.num_classes() {
        return Err(Error::Shape(format!(
            "test set has {} classes, teacher predicts {}",
            test.num_classes(),
            teacher.num_classes()
        )));
    }
    if pool.is_empty() {
        return Err(Error::Empty("web pool".into()));
    }
    Ok(())
}

fn classifier_bits(c: &SharedClassifier) -> Vec<u64> {
    c.affine
        .weight
        .values()
        .iter()
        .chain(c.affine.bias.values())
        .map(|v| v.to_bits())
        .collect()
}

fn build_student(teacher: &Network, cfg: &TrainConfig, rng: &mut Rng) -> Result<Network> {
    let mut student = Network::student_sharing(teacher, &cfg.student_hidden, cfg.embed_dim, rng)?;
    if !cfg.variant.shares_classifier() {
        student.classifier = Arc::new(SharedClassifier {
            affine: Affine::init(teacher.feature_dim(), teacher.num_classes(), rng),
            frozen: false,
        });
    }
    Ok(student)
}

fn quality_fields(outcome: &SelectionOutcome, pool: &LabeledSet, rec: &mut EpochRecord) -> Result<()> {
    if pool.provenance().is_some() {
        let q = selection_quality(outcome, pool)?;
        rec.selection_precision = Some(q.precision);
        rec.selection_recall = Some(q.recall);
        rec.selected_in_distribution = Some(q.selected_in_distribution);
        rec.selected_style_shifted = Some(q.selected_style_shifted);
        rec.selected_open_set = Some(q.selected_open_set);
    }
    Ok(())
}

fn empty_epoch(epoch: usize, alpha: f64, lr: f64) -> EpochRecord {
    EpochRecord {
        epoch,
        alpha_schedule: alpha,
        learning_rate: lr,
        l_wfa: 0.0,
        l_mdcl: 0.0,
        l_mdcl_student: 0.0,
        l_mdcl_teacher: 0.0,
        l_classifier: 0.0,
        combined_loss: 0.0,
        selected_count: 0,
        selection_precision: None,
        selection_recall: None,
        selected_in_distribution: None,
        selected_style_shifted: None,
        selected_open_set: None,
        test_accuracy: 0.0,
        skipped: false,
        batches: 0,
        contrastive_batches: 0,
        mean_perturbation: 0.0,
    }
}

/// Selection round for one epoch under the variant's selection rule.
fn select_for_epoch(
    variant: Variant,
    teacher_probs: &DenseArray,
    student_probs: &DenseArray,
    state: ScheduleState,
    v_th: f64,
    random_rng: &mut Rng,
) -> Result<SelectionOutcome> {
    let alpha = match variant {
        Variant::StudentOnlySelection => 1.0,
        Variant::TeacherOnlySelection => 0.0,
        _ => alpha_schedule(state),
    };
    let mut outcome = select_from_probs(teacher_probs, student_probs, alpha, v_th)?;
    if variant == Variant::RandomSelection {
        let m = outcome.selected.len();
        let mut pick = permutation(teacher_probs.rows(), random_rng);
        pick.truncate(m);
        pick.sort_unstable();
        outcome.selected = pick;
    }
    Ok(outcome)
}

fn train_variant(teacher: &Network, pool: &LabeledSet, test: &LabeledSet, cfg: &TrainConfig, rng: &Rng) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_teacher(teacher, pool, test)?;
    let started = std::time::Instant::now();
    let variant = cfg.variant;

    let mut init_rng = rng.substream(STREAM_INIT);
    let mut shuffle_rng = rng.substream(STREAM_SHUFFLE);
    let mut perturb_rng = rng.substream(STREAM_PERTURB);
    let mut random_rng = rng.substream(STREAM_RANDOM_SELECT);
    let mut noise_rng = rng.substream(STREAM_NOISE);

    let mut student = build_student(teacher, cfg, &mut init_rng)?;
    let mut teacher_head = teacher.head.clone();
    let sharing = student.shares_classifier_with(teacher);
    let pretrained_bits = classifier_bits(&teacher.classifier);

    // The teacher never changes, so its view of the pool is computed once.
    let teacher_feat = teacher.features_batch(pool.instances())?;
    let teacher_logits = teacher
        .classifier
        .logits_rows(teacher_feat.values(), pool.len());
    let teacher_probs = teacher.probs_batch(pool.instances())?;
    let k = teacher.num_classes();
    let teacher_argmax: Vec<usize> = teacher_probs.values().chunks(k).map(argmax).collect();

    let mut opt = Optimizer::new(cfg.optimizer.clone());
    let alpha_tradeoff = if variant == Variant::NoMdcl { 0.0 } else { cfg.alpha_tradeoff };
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut skipped_epochs = 0;
    let mut classifier_checks = 0;

    for epoch in 0..cfg.epochs {
        let state = ScheduleState::new(epoch, cfg.epochs)?;
        let lr = cfg.optimizer.lr_at(epoch, cfg.epochs);
        let student_probs = student.probs_batch(pool.instances())?;
        let outcome = select_for_epoch(variant, &teacher_probs, &student_probs, state, cfg.v_th, &mut random_rng)?;
        let mut rec = empty_epoch(epoch, outcome.alpha, lr);
        rec.selected_count = outcome.selected.len();
        quality_fields(&outcome, pool, &mut rec)?;

        if outcome.selected.is_empty() {
            log::warn!("epoch {epoch}: selection is empty, skipping");
            rec.skipped = true;
            skipped_epochs += 1;
        } else {
            let mut order = outcome.selected.clone();
            shuffle_rng.shuffle(&mut order);
            let mut sums = [0.0f64; 6];
            let mut perturb_sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let x_bar = pool.instances().select_rows(chunk);
                let x_hat = if chunk.len() >= 2 {
                    let pairs = perturb_batch(&x_bar, &cfg.mix, &mut perturb_rng)?;
                    let m = mean_abs_perturbation(&pairs);
                    perturb_sum += m;
                    Some(if variant == Variant::NoMixDistribution {
                        // E|N(0, s²)| = s·sqrt(2/π)
                        additive_noise(&x_bar, m * (std::f64::consts::PI / 2.0).sqrt(), &mut noise_rng)
                    } else {
                        perturbed_matrix(&pairs)
                    })
                } else {
                    None
                };
                let hard: Vec<usize>;
                let soft: Vec<f64>;
                let classifier_term = match variant {
                    Variant::NoClassifierSharingOneHot => {
                        hard = chunk.iter().map(|&i| teacher_argmax[i]).collect();
                        ClassifierTerm::Hard(&hard)
                    }
                    Variant::NoClassifierSharingSoft => {
                        soft = chunk
                            .iter()
                            .flat_map(|&i| teacher_logits[i * k..(i + 1) * k].iter().copied())
                            .collect();
                        ClassifierTerm::Soft {
                            teacher_logits: &soft,
                            temperature: cfg.kd_temperature,
                        }
                    }
                    _ => ClassifierTerm::None,
                };
                let spec = ObjectiveSpec {
                    wfa_scale: 1.0,
                    alpha_tradeoff,
                    contrastive: cfg.contrastive,
                    sides: ContrastiveSides::Both,
                    classifier_scale: 1.0,
                    classifier_term,
                    fixed_weights: None,
                };
                let eval = evaluate_batch(&student, teacher, &teacher_head, &x_bar, x_hat.as_ref(), &spec)?;
                let t = eval.terms;
                debug_assert!(
                    (t.total - (total_loss(t.wfa, t.mdcl, alpha_tradeoff) + t.classifier)).abs() <= 1e-12
                );
                for (s, v) in sums
                    .iter_mut()
                    .zip([t.wfa, t.mdcl, t.mdcl_student, t.mdcl_teacher, t.classifier, t.total])
                {
                    *s += v;
                }
                rec.batches += 1;
                rec.contrastive_batches += t.contrastive_evaluated as usize;
                let grads = eval.grads.flat();
                opt.step(trainable_params(&mut student, &mut teacher_head), &grads, lr);
            }
            let nb = rec.batches as f64;
            rec.l_wfa = sums[0] / nb;
            rec.l_mdcl = sums[1] / nb;
            rec.l_mdcl_student = sums[2] / nb;
            rec.l_mdcl_teacher = sums[3] / nb;
            rec.l_classifier = sums[4] / nb;
            rec.combined_loss = sums[5] / nb;
            if rec.contrastive_batches > 0 {
                rec.mean_perturbation = perturb_sum / rec.contrastive_batches as f64;
            }
        }

        if sharing {
            if !Arc::ptr_eq(&student.classifier, &teacher.classifier)
                || classifier_bits(&student.classifier) != pretrained_bits
            {
                return Err(Error::InvalidArgument(format!(
                    "shared classifier changed during epoch {epoch}"
                )));
            }
            classifier_checks += 1;
        }
        for p in student.extractor.params() {
            crate::numerics::ensure_finite(p)?;
        }
        rec.test_accuracy = evaluate(&student, test)?;
        log::debug!(
            "{variant} epoch {epoch}: selected {} loss {:.5} acc {:.4}",
            rec.selected_count,
            rec.combined_loss,
            rec.test_accuracy
        );
        epochs.push(rec);
    }

    let final_test_accuracy = epochs.last().map_or(0.0, |e| e.test_accuracy);
    Ok(TrainOutcome {
        student,
        teacher_head,
        record: RunRecord {
            variant,
            seed: rng.seed(),
            config: cfg.clone(),
            pool_size: pool.len(),
            epochs,
            skipped_epochs,
            final_test_accuracy,
            classifier_checks,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    })
}

/// Where the KD baseline takes its hard labels from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HardLabels {
    /// The data set's own labels.
    Data,
    /// The teacher's argmax prediction (for unlabeled pools).
    TeacherArgmax,
}

/// Cross-entropy on hard labels plus `λ` times the softened KL to the
/// teacher, with gradients for the student's extractor and classifier.
pub fn kd_objective(
    student: &Network,
    teacher_logits: &[f64],
    x: &DenseArray,
    hard: &[usize],
    lambda: f64,
    temperature: f64,
) -> Result<(f64, Vec<crate::model::AffineGrad>, crate::model::AffineGrad)> {
    let n = x.rows();
    student.check_input(x.cols())?;
    let k = student.num_classes();
    if teacher_logits.len() != n * k || hard.len() != n {
        return Err(Error::Shape(format!(
            "{n} rows with {} teacher logits and {} labels",
            teacher_logits.len(),
            hard.len()
        )));
    }
    let cache = student.extractor.forward_cached(x.values(), n);
    let logits = student.classifier.logits_rows(cache.features(), n);
    let (ce, mut d_logits) = softmax_cross_entropy(&logits, k, Targets::Hard(hard));
    let mut loss = ce;
    if lambda > 0.0 {
        let (kl, d_kl) = softened_kl(&logits, teacher_logits, k, temperature);
        loss += lambda * kl;
        for (d, g) in d_logits.iter_mut().zip(d_kl) {
            *d += lambda * g;
        }
    }
    let (g_cls, d_feat) = student.classifier.backward(cache.features(), &d_logits, n);
    let g_ext = student.extractor.backward(&cache, &d_feat);
    Ok((loss, g_ext, g_cls))
}

/// Soft-label KD baseline: a student with its own classifier trained on
/// every instance of `data` (no selection, alignment or contrastive terms).
pub fn kd_baseline(
    teacher: &Network,
    data: &LabeledSet,
    hard: HardLabels,
    test: &LabeledSet,
    cfg: &TrainConfig,
    rng: &Rng,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_teacher(teacher, data, test)?;
    let started = std::time::Instant::now();
    let mut init_rng = rng.substream(STREAM_INIT);
    let mut shuffle_rng = rng.substream(STREAM_SHUFFLE);
    let mut own = cfg.clone();
    own.variant = Variant::KdBaselineOnPool;
    let mut student = build_student(teacher, &own, &mut init_rng)?;
    let k = teacher.num_classes();
    let teacher_feat = teacher.features_batch(data.instances())?;
    let teacher_logits = teacher.classifier.logits_rows(teacher_feat.values(), data.len());
    let labels: Vec<usize> = match hard {
        HardLabels::Data => {
            let l = data
                .labels()
                .ok_or_else(|| Error::InvalidArgument("KD baseline on data labels needs a labeled set".into()))?;
            if let Some(&bad) = l.iter().find(|&&y| y >= k) {
                return Err(Error::Shape(format!("label {bad} outside the teacher's {k} classes")));
            }
            l.to_vec()
        }
        HardLabels::TeacherArgmax => teacher_logits.chunks(k).map(argmax).collect(),
    };
    let mut opt = Optimizer::new(cfg.kd_optimizer.clone());
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let n = data.len();
    for epoch in 0..cfg.epochs {
        let lr = cfg.kd_optimizer.lr_at(epoch, cfg.epochs);
        let mut rec = empty_epoch(epoch, 0.0, lr);
        rec.selected_count = n;
        if let Some(tags) = data.provenance() {
            let in_count = tags
                .iter()
                .filter(|&&t| t == crate::datagen::Provenance::InDistribution)
                .count();
            rec.selection_precision = Some(in_count as f64 / n as f64);
            rec.selection_recall = Some(if in_count == 0 { 0.0 } else { 1.0 });
        }
        let mut order: Vec<usize> = (0..n).collect();
        shuffle_rng.shuffle(&mut order);
        let mut sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = data.instances().select_rows(chunk);
            let y: Vec<usize> = chunk.iter().map(|&i| labels[i]).collect();
            let tl: Vec<f64> = chunk
                .iter()
                .flat_map(|&i| teacher_logits[i * k..(i + 1) * k].iter().copied())
                .collect();
            let (loss, g_ext, g_cls) = kd_objective(&student, &tl, &x, &y, cfg.kd_lambda, cfg.kd_temperature)?;
            sum += loss;
            rec.batches += 1;
            let mut grads: Vec<&[f64]> = g_ext.iter().flat_map(|g| g.flat()).collect();
            grads.extend(g_cls.flat());
            let Network {
                extractor, classifier, ..
            } = &mut student;
            let cls = Arc::get_mut(classifier).expect("baseline student owns its classifier");
            let mut params = extractor.params_mut();
            params.push(cls.affine.weight.values_mut());
            params.push(cls.affine.bias.values_mut());
            opt.step(params, &grads, lr);
        }
        rec.l_classifier = sum / rec.batches as f64;
        rec.combined_loss = rec.l_classifier;
        rec.test_accuracy = evaluate(&student, test)?;
        epochs.push(rec);
    }
    let final_test_accuracy = epochs.last().map_or(0.0, |e| e.test_accuracy);
    let teacher_head = teacher.head.clone();
    Ok(TrainOutcome {
        student,
        teacher_head,
        record: RunRecord {
            variant: Variant::KdBaselineOnPool,
            seed: rng.seed(),
            config: own,
            pool_size: n,
            epochs,
            skipped_epochs: 0,
            final_test_accuracy,
            classifier_checks: 0,
            wall_clock_secs: started.elapsed().as_secs_f64(),
        },
    })
}

/// Perturbs the first `batch_size` pool rows and writes both views as CSV:
/// `row,partner,lambda,gamma_mix,beta_mix,x_0..,xhat_0..`.
pub fn dump_perturbed_batch<W: Write>(
    pool: &LabeledSet,
    batch_size: usize,
    mix: &MixParams,
    rng: &Rng,
    out: W,
) -> Result<Vec<PerturbedPair>> {
    let m = batch_size.min(pool.len());
    if m == 0 {
        return Err(Error::Empty("pool for perturbation dump".into()));
    }
    let idx: Vec<usize> = (0..m).collect();
    let batch = pool.instances().select_rows(&idx);
    let pairs = perturb_batch(&batch, mix, &mut rng.substream(STREAM_PERTURB))?;
    let d = pool.dim();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["row", "partner", "lambda", "gamma_mix", "beta_mix"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((0..d).map(|j| format!("x_{j}")));
    header.extend((0..d).map(|j| format!("xhat_{j}")));
    w.write_record(&header)?;
    for (i, p) in pairs.iter().enumerate() {
        let mut row = vec![
            i.to_string(),
            p.partner.to_string(),
            p.lambda.to_string(),
            p.gamma_mix.to_string(),
            p.beta_mix.to_string(),
        ];
        row.extend(p.original.iter().map(|v| v.to_string()));
        row.extend(p.perturbed.iter().map(|v| v.to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<perturbation csv>", e))?;
    Ok(pairs)
}
