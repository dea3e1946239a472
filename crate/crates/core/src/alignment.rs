//! Weighted feature alignment between student and teacher features.

use crate::error::{Error, Result};
use crate::numerics::sigmoid;

/// `1 - sigmoid(‖p_S - p_T‖₁)`; lies in `(0, 0.5]` for probability vectors.
pub fn alignment_weight(p_student: &[f64], p_teacher: &[f64]) -> Result<f64> {
    if p_student.len() != p_teacher.len() {
        return Err(Error::Shape(format!(
            "student probabilities have {} classes, teacher {}",
            p_student.len(),
            p_teacher.len()
        )));
    }
    let l1: f64 = p_student.iter().zip(p_teacher).map(|(a, b)| (a - b).abs()).sum();
    // 1 - σ(x) = σ(-x), without the cancellation.
    Ok(sigmoid(-l1))
}

/// Weights for every row of two `n x K` probability buffers.
pub fn alignment_weights(p_student: &[f64], p_teacher: &[f64], k: usize) -> Result<Vec<f64>> {
    if p_student.len() != p_teacher.len() || k == 0 || !p_student.len().is_multiple_of(k) {
        return Err(Error::Shape(format!(
            "probability buffers of length {} and {} with {k} classes",
            p_student.len(),
            p_teacher.len()
        )));
    }
    p_student
        .chunks(k)
        .zip(p_teacher.chunks(k))
        .map(|(s, t)| alignment_weight(s, t))
        .collect()
}

/// A batch of selected instances seen through both networks.
#[derive(Debug, Clone)]
pub struct AlignmentBatch<'a> {
    pub n: usize,
    pub feature_dim: usize,
    /// `n x d_f`
    pub student_features: &'a [f64],
    /// `n x d_f`
    pub teacher_features: &'a [f64],
    /// Stop-gradient weights, one per instance.
    pub weights: &'a [f64],
}

#[derive(Debug, Clone, PartialEq)]
pub struct WfaOutput {
    pub loss: f64,
    /// Gradient with respect to the student features, `n x d_f`.
    pub grad_student: Vec<f64>,
    /// Set when the batch was empty (loss reported as 0).
    pub empty: bool,
}

/// `(1/n) Σ_i w_i · mean_j (φ_S(x_i)_j - φ_T(x_i)_j)²`.
pub fn wfa_loss(batch: &AlignmentBatch<'_>) -> Result<WfaOutput> {
    let (n, d) = (batch.n, batch.feature_dim);
    if batch.student_features.len() != n * d
        || batch.teacher_features.len() != n * d
        || batch.weights.len() != n
    {
        return Err(Error::Shape(format!(
            "alignment batch of {n} x {d}: student {}, teacher {}, weights {}",
            batch.student_features.len(),
            batch.teacher_features.len(),
            batch.weights.len()
        )));
    }
    if n == 0 {
        return Ok(WfaOutput {
            loss: 0.0,
            grad_student: Vec::new(),
            empty: true,
        });
    }
    let mut loss = 0.0;
    let mut grad = vec![0.0; n * d];
    let scale = 1.0 / (n as f64 * d as f64);
    for i in 0..n {
        let w = batch.weights[i];
        let s = &batch.student_features[i * d..(i + 1) * d];
        let t = &batch.teacher_features[i * d..(i + 1) * d];
        let mut sq = 0.0;
        for j in 0..d {
            let diff = s[j] - t[j];
            sq += diff * diff;
            grad[i * d + j] = 2.0 * w * diff * scale;
        }
        loss += w * sq;
    }
    Ok(WfaOutput {
        loss: loss * scale,
        grad_student: grad,
        empty: false,
    })
}
