//! Teacher–student dynamic instance selection over the web pool.
//!
//! Each round blends teacher and student class probabilities with a
//! time-dependent weight, labels every pool instance with the blended argmax,
//! derives one threshold per class from how many instances were predicted
//! into it, and keeps the instances whose confidence strictly exceeds their
//! class threshold.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::datagen::{LabeledSet, Provenance};
use crate::error::{Error, Result};
use crate::model::{argmax, Network};
use crate::numerics::DenseArray;

/// Position in the training schedule; both fields count epochs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleState {
    pub epoch: usize,
    pub total: usize,
}

impl ScheduleState {
    pub fn new(epoch: usize, total: usize) -> Result<Self> {
        if total == 0 {
            return Err(Error::InvalidArgument("total epochs must be >= 1".into()));
        }
        Ok(Self { epoch, total })
    }
}

/// Student weight in the blend: `exp(-5 (t/(I/2) - 1)²)` up to the
/// midpoint, 1 afterwards.
pub fn alpha_schedule(state: ScheduleState) -> f64 {
    let half = state.total as f64 / 2.0;
    let t = state.epoch as f64;
    if t <= half {
        let r = t / half - 1.0;
        (-5.0 * r * r).exp()
    } else {
        1.0
    }
}

/// `(1 - α) p_T + α p_S`.
pub fn combine_predictions(p_teacher: &[f64], p_student: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if p_teacher.len() != p_student.len() {
        return Err(Error::Shape(format!(
            "teacher probabilities have {} classes, student {}",
            p_teacher.len(),
            p_student.len()
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArgument(format!("blend weight {alpha} outside [0, 1]")));
    }
    for (who, p) in [("teacher", p_teacher), ("student", p_student)] {
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!("{who} probabilities sum to {s}")));
        }
    }
    Ok(blend(p_teacher, p_student, alpha))
}

fn blend(p_teacher: &[f64], p_student: &[f64], alpha: f64) -> Vec<f64> {
    p_teacher
        .iter()
        .zip(p_student)
        .map(|(t, s)| (1.0 - alpha) * t + alpha * s)
        .collect()
}

/// Argmax label (lowest index on ties) and its probability.
pub fn predict_and_confidence(combined: &[f64]) -> (usize, f64) {
    let label = argmax(combined);
    (label, combined[label])
}

/// `T_k = n_k / max_j n_j · V_th`.
pub fn class_thresholds(class_counts: &[usize], v_th: f64) -> Result<Vec<f64>> {
    if !(v_th > 0.0 && v_th <= 1.0) {
        return Err(Error::InvalidArgument(format!("V_th must lie in (0, 1], got {v_th}")));
    }
    let max = class_counts.iter().copied().max().unwrap_or(0);
    if max == 0 {
        return Err(Error::Empty("no instance was predicted into any class".into()));
    }
    Ok(class_counts
        .iter()
        .map(|&n| n as f64 / max as f64 * v_th)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionOutcome {
    pub predicted_labels: Vec<usize>,
    pub confidences: Vec<f64>,
    pub class_counts: Vec<usize>,
    pub thresholds: Vec<f64>,
    /// Indices into the pool, ascending.
    pub selected: Vec<usize>,
    /// Student weight used for the blend.
    pub alpha: f64,
}

impl SelectionOutcome {
    pub fn is_selected_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.predicted_labels.len()];
        for &i in &self.selected {
            mask[i] = true;
        }
        mask
    }
}

/// Selection from precomputed probability matrices (`n x K` each).
pub fn select_from_probs(
    p_teacher: &DenseArray,
    p_student: &DenseArray,
    alpha: f64,
    v_th: f64,
) -> Result<SelectionOutcome> {
    if p_teacher.shape() != p_student.shape() {
        return Err(Error::Shape(format!(
            "teacher probabilities {:?} vs student {:?}",
            p_teacher.shape(),
            p_student.shape()
        )));
    }
    let n = p_teacher.rows();
    if n == 0 {
        return Err(Error::Empty("web pool".into()));
    }
    let k = p_teacher.cols();
    let mut predicted_labels = Vec::with_capacity(n);
    let mut confidences = Vec::with_capacity(n);
    let mut class_counts = vec![0usize; k];
    for i in 0..n {
        let c = blend(p_teacher.row(i), p_student.row(i), alpha);
        let (y, p) = predict_and_confidence(&c);
        class_counts[y] += 1;
        predicted_labels.push(y);
        confidences.push(p);
    }
    let thresholds = class_thresholds(&class_counts, v_th)?;
    let selected = (0..n)
        .filter(|&i| confidences[i] > thresholds[predicted_labels[i]])
        .collect();
    Ok(SelectionOutcome {
        predicted_labels,
        confidences,
        class_counts,
        thresholds,
        selected,
        alpha,
    })
}

/// Scores the whole pool with both networks and selects with the scheduled
/// blend weight.
pub fn select_instances(
    pool: &LabeledSet,
    teacher: &Network,
    student: &Network,
    state: ScheduleState,
    v_th: f64,
) -> Result<SelectionOutcome> {
    select_with_alpha(pool, teacher, student, alpha_schedule(state), v_th)
}

/// As [`select_instances`] with an explicit blend weight.
pub fn select_with_alpha(
    pool: &LabeledSet,
    teacher: &Network,
    student: &Network,
    alpha: f64,
    v_th: f64,
) -> Result<SelectionOutcome> {
    if pool.is_empty() {
        return Err(Error::Empty("web pool".into()));
    }
    let pt = teacher.probs_batch(pool.instances())?;
    let ps = student.probs_batch(pool.instances())?;
    select_from_probs(&pt, &ps, alpha, v_th)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionQuality {
    /// Fraction of selected instances tagged in-distribution (0 if none).
    pub precision: f64,
    /// Fraction of in-distribution pool instances that were selected.
    pub recall: f64,
    pub empty_selection: bool,
    /// Selected count per predicted class.
    pub per_class_selected: Vec<usize>,
    pub selected_in_distribution: usize,
    pub selected_style_shifted: usize,
    pub selected_open_set: usize,
}

pub fn selection_quality(outcome: &SelectionOutcome, pool: &LabeledSet) -> Result<SelectionQuality> {
    let tags = pool
        .provenance()
        .ok_or_else(|| Error::InvalidArgument("pool has no provenance tags".into()))?;
    if tags.len() != outcome.predicted_labels.len() {
        return Err(Error::Shape(format!(
            "outcome covers {} instances, pool has {}",
            outcome.predicted_labels.len(),
            tags.len()
        )));
    }
    let mut per_class_selected = vec![0; outcome.class_counts.len()];
    let mut by_tag = [0usize; 3];
    for &i in &outcome.selected {
        per_class_selected[outcome.predicted_labels[i]] += 1;
        by_tag[tags[i].code() as usize] += 1;
    }
    let total_in = tags.iter().filter(|&&t| t == Provenance::InDistribution).count();
    let selected = outcome.selected.len();
    let sel_in = by_tag[0];
    Ok(SelectionQuality {
        precision: if selected == 0 { 0.0 } else { sel_in as f64 / selected as f64 },
        recall: if total_in == 0 { 0.0 } else { sel_in as f64 / total_in as f64 },
        empty_selection: selected == 0,
        per_class_selected,
        selected_in_distribution: sel_in,
        selected_style_shifted: by_tag[1],
        selected_open_set: by_tag[2],
    })
}

/// CSV with columns `index,y_pred,confidence,threshold,selected,provenance`.
pub fn write_outcome_csv<W: Write>(outcome: &SelectionOutcome, pool: &LabeledSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["index", "y_pred", "confidence", "threshold", "selected", "provenance"])?;
    let mask = outcome.is_selected_mask();
    let tags = pool.provenance();
    for i in 0..outcome.predicted_labels.len() {
        let y = outcome.predicted_labels[i];
        w.write_record([
            i.to_string(),
            y.to_string(),
            outcome.confidences[i].to_string(),
            outcome.thresholds[y].to_string(),
            (mask[i] as u8).to_string(),
            tags.map_or("", |t| t[i].name()).to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io("<selection csv>", e))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Rng;
    use proptest::prelude::*;

    #[test]
    fn schedule_examples() {
        let s = |t| alpha_schedule(ScheduleState::new(t, 60).unwrap());
        assert_eq!(s(30), 1.0);
        assert_eq!(s(60), 1.0);
        // exp(-5) = 0.0067379469990854670966... (40-digit evaluation)
        assert!((s(0) - 0.006_737_946_999_085_467).abs() < 1e-15);
        assert!(ScheduleState::new(0, 0).is_err());
    }

    #[test]
    fn combine_examples() {
        let pt = [0.8, 0.2];
        let ps = [0.4, 0.6];
        assert_eq!(combine_predictions(&pt, &ps, 0.0).unwrap(), pt.to_vec());
        assert_eq!(combine_predictions(&pt, &ps, 1.0).unwrap(), ps.to_vec());
        let c = combine_predictions(&pt, &ps, 0.5).unwrap();
        assert!((c[0] - 0.6).abs() < 1e-15 && (c[1] - 0.4).abs() < 1e-15);
        assert!(combine_predictions(&pt, &[1.0], 0.5).is_err());
        assert!(combine_predictions(&pt, &[0.5, 0.6], 0.5).is_err());
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(predict_and_confidence(&[0.6, 0.4]), (0, 0.6));
        assert_eq!(predict_and_confidence(&[0.5, 0.5]), (0, 0.5));
        assert_eq!(predict_and_confidence(&[0.1, 0.2, 0.7]), (2, 0.7));
    }

    #[test]
    fn threshold_examples() {
        let t = class_thresholds(&[20, 10, 0], 0.95).unwrap();
        assert_eq!(t, vec![0.95, 0.475, 0.0]);
        assert_eq!(class_thresholds(&[7, 7, 7], 0.9).unwrap(), vec![0.9; 3]);
        assert!(class_thresholds(&[0, 0], 0.95).is_err());
        assert!(class_thresholds(&[1, 2], 0.0).is_err());
        assert!(class_thresholds(&[1, 2], 1.5).is_err());
    }

    #[test]
    fn v_th_one_rejects_majority_below_one() {
        // Class 0 holds the majority with confidences strictly below 1.
        let pt = DenseArray::matrix(3, 2, vec![0.9, 0.1, 0.99, 0.01, 0.2, 0.8]).unwrap();
        let out = select_from_probs(&pt, &pt, 0.0, 1.0).unwrap();
        assert_eq!(out.thresholds[0], 1.0);
        assert_eq!(out.selected, vec![2]);
    }

    #[test]
    fn quality_degenerate_cases() {
        let pool = LabeledSet::new(
            DenseArray::matrix(3, 1, vec![0.0; 3]).unwrap(),
            None,
            2,
            Some(vec![Provenance::InDistribution, Provenance::OpenSet, Provenance::InDistribution]),
        )
        .unwrap();
        let mut out = SelectionOutcome {
            predicted_labels: vec![0, 1, 0],
            confidences: vec![0.9, 0.9, 0.9],
            class_counts: vec![2, 1],
            thresholds: vec![0.5, 0.5],
            selected: vec![0, 2],
            alpha: 0.0,
        };
        let q = selection_quality(&out, &pool).unwrap();
        assert_eq!(q.precision, 1.0);
        assert_eq!(q.recall, 1.0);
        out.selected.clear();
        let q = selection_quality(&out, &pool).unwrap();
        assert_eq!((q.precision, q.recall, q.empty_selection), (0.0, 0.0, true));
        assert!(selection_quality(&out, &pool.subset(&[0, 1, 2]).without_labels()).is_ok());
        let untagged = LabeledSet::new(DenseArray::matrix(3, 1, vec![0.0; 3]).unwrap(), None, 2, None).unwrap();
        assert!(selection_quality(&out, &untagged).is_err());
    }

    #[test]
    fn csv_columns() {
        let pool = LabeledSet::new(
            DenseArray::matrix(2, 1, vec![0.0; 2]).unwrap(),
            None,
            2,
            Some(vec![Provenance::InDistribution, Provenance::OpenSet]),
        )
        .unwrap();
        let p = DenseArray::matrix(2, 2, vec![0.9, 0.1, 0.3, 0.7]).unwrap();
        let out = select_from_probs(&p, &p, 0.5, 0.95).unwrap();
        let mut buf = Vec::new();
        write_outcome_csv(&out, &pool, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "index,y_pred,confidence,threshold,selected,provenance");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].ends_with(",open_set"));
    }

    fn random_probs(n: usize, k: usize, rng: &mut Rng) -> DenseArray {
        let mut v = Vec::with_capacity(n * k);
        for _ in 0..n {
            let raw: Vec<f64> = (0..k).map(|_| rng.uniform() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            v.extend(raw.iter().map(|x| x / s));
        }
        DenseArray::matrix(n, k, v).unwrap()
    }

    proptest! {
        #[test]
        fn schedule_monotone_and_bounded(total in 1usize..200) {
            let mut prev = 0.0;
            for t in 0..=total + 3 {
                let a = alpha_schedule(ScheduleState { epoch: t, total });
                prop_assert!(a > 0.0 && a <= 1.0);
                prop_assert!(a >= prev);
                prev = a;
            }
        }

        #[test]
        fn outcome_invariants_and_threshold_scaling(seed in 0u64..500, c in 0.05f64..1.0) {
            let mut rng = Rng::new(seed);
            let n = 1 + rng.below(40);
            let k = 2 + rng.below(4);
            let pt = random_probs(n, k, &mut rng);
            let ps = random_probs(n, k, &mut rng);
            let alpha = rng.uniform();
            let out = select_from_probs(&pt, &ps, alpha, 0.95).unwrap();
            prop_assert_eq!(out.class_counts.iter().sum::<usize>(), n);
            let mask = out.is_selected_mask();
            for i in 0..n {
                let t = out.thresholds[out.predicted_labels[i]];
                prop_assert_eq!(mask[i], out.confidences[i] > t);
            }
            let scaled = class_thresholds(&out.class_counts, 0.95 * c).unwrap();
            let base = class_thresholds(&out.class_counts, 0.95).unwrap();
            for (s, b) in scaled.iter().zip(&base) {
                // T_k(cV) = c·T_k(V) up to the rounding of the product.
                prop_assert!((s - c * b).abs() <= 1e-15);
            }
            let again = select_from_probs(&pt, &ps, alpha, 0.95).unwrap();
            prop_assert_eq!(again, out);
        }
    }
}
