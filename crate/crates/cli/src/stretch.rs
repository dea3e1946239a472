//! MNIST experiment: distill from a teacher trained on MNIST originals using
//! a pool of held-out digits, part of them recoloured and grayscaled, and
//! compare against a student of the same shape trained directly on the
//! originals.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use webdistill::datagen::{grayscale_merge, LabeledSet, Provenance};
use webdistill::idx::load_idx;
use webdistill::model::{pretrain_teacher, ArchConfig, PretrainConfig};
use webdistill::numerics::{DenseArray, Rng};
use webdistill::trainer::{distill, evaluate, TrainConfig};

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StretchConfig {
    /// Leading training images used as originals (teacher and direct student).
    pub originals: usize,
    /// Following training images turned into the unlabeled pool.
    pub pool: usize,
    /// Share of pool images that are recoloured and grayscaled; the rest
    /// stay as they are.
    pub recolored_fraction: f64,
    pub teacher_hidden: Vec<usize>,
    pub feature_dim: usize,
    pub embed_dim: usize,
    pub student_hidden: Vec<usize>,
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for StretchConfig {
    fn default() -> Self {
        Self {
            originals: 30_000,
            pool: 30_000,
            recolored_fraction: 0.5,
            teacher_hidden: vec![256, 128],
            feature_dim: 64,
            embed_dim: 64,
            student_hidden: vec![128],
            pretrain_epochs: 10,
            epochs: 20,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StretchReport {
    pub teacher_accuracy: f64,
    /// In-distribution share of the final selection.
    pub final_selection_precision: Option<f64>,
    pub distilled_accuracy: f64,
    pub direct_accuracy: f64,
    /// `direct - distilled`, in accuracy points (percent).
    pub gap_points: f64,
}

/// Tints each digit with a random colour on a random background, then
/// averages the channels back to one. The result keeps the digit but moves
/// its intensity statistics away from the originals.
pub fn recolor_grayscale(x: &[f64], rng: &mut Rng) -> Result<Vec<f64>> {
    let mut rgb = Vec::with_capacity(3 * x.len());
    for _ in 0..3 {
        let fg = rng.uniform_range(0.4, 1.0);
        let bg = rng.uniform_range(0.0, 0.5);
        rgb.extend(x.iter().map(|v| bg + (fg - bg) * v));
    }
    let merged = grayscale_merge(&DenseArray::new(vec![3, x.len()], rgb)?)?;
    Ok(merged.into_values())
}

fn take(set: &LabeledSet, range: std::ops::Range<usize>) -> LabeledSet {
    set.subset(&range.collect::<Vec<_>>())
}

pub fn run_stretch(dir: &Path, cfg: &StretchConfig) -> Result<StretchReport> {
    let train = load_idx(&dir.join(TRAIN_IMAGES), Some(&dir.join(TRAIN_LABELS)))
        .with_context(|| format!("loading MNIST training files from {}", dir.display()))?;
    let test = load_idx(&dir.join(TEST_IMAGES), Some(&dir.join(TEST_LABELS)))
        .with_context(|| format!("loading MNIST test files from {}", dir.display()))?;
    if !(0.0..=1.0).contains(&cfg.recolored_fraction) {
        bail!("recolored_fraction must lie in [0, 1], got {}", cfg.recolored_fraction);
    }
    if cfg.originals == 0 || cfg.pool == 0 || cfg.originals + cfg.pool > train.len() {
        bail!(
            "need originals + pool <= {} training images, got {} + {}",
            train.len(),
            cfg.originals,
            cfg.pool
        );
    }
    let root = Rng::new(cfg.seed);
    let originals = take(&train, 0..cfg.originals);
    let raw_pool = take(&train, cfg.originals..cfg.originals + cfg.pool);
    let mut tint = root.substream(1);
    let mut pool_values = Vec::with_capacity(raw_pool.len() * raw_pool.dim());
    let mut tags = Vec::with_capacity(raw_pool.len());
    for i in 0..raw_pool.len() {
        let x = raw_pool.instance(i);
        if tint.uniform() < cfg.recolored_fraction {
            pool_values.extend(recolor_grayscale(x, &mut tint)?);
            tags.push(Provenance::StyleShifted);
        } else {
            pool_values.extend_from_slice(x);
            tags.push(Provenance::InDistribution);
        }
    }
    let pool = LabeledSet::new(
        DenseArray::matrix(raw_pool.len(), raw_pool.dim(), pool_values)?,
        None,
        train.num_classes(),
        Some(tags),
    )?;

    let pretrain = PretrainConfig {
        epochs: cfg.pretrain_epochs,
        ..PretrainConfig::default()
    };
    let teacher_arch = ArchConfig {
        input_dim: train.dim(),
        hidden: cfg.teacher_hidden.clone(),
        feature_dim: cfg.feature_dim,
        embed_dim: cfg.embed_dim,
        num_classes: train.num_classes(),
    };
    let teacher = pretrain_teacher(&originals, &teacher_arch, &pretrain, &mut root.substream(2))?.teacher;
    let student_arch = ArchConfig {
        hidden: cfg.student_hidden.clone(),
        ..teacher_arch
    };
    let direct = pretrain_teacher(&originals, &student_arch, &pretrain, &mut root.substream(3))?.teacher;

    let train_cfg = TrainConfig {
        epochs: cfg.epochs,
        student_hidden: cfg.student_hidden.clone(),
        embed_dim: cfg.embed_dim,
        seed: cfg.seed,
        ..TrainConfig::default()
    };
    let distilled = distill(&teacher, &pool, &test, &train_cfg, &root.substream(4))?;
    let distilled_accuracy = distilled.record.final_test_accuracy;
    let direct_accuracy = evaluate(&direct, &test)?;
    Ok(StretchReport {
        teacher_accuracy: evaluate(&teacher, &test)?,
        final_selection_precision: distilled.record.final_precision(),
        distilled_accuracy,
        direct_accuracy,
        gap_points: 100.0 * (direct_accuracy - distilled_accuracy),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recoloring_keeps_range_and_shape() {
        let mut rng = Rng::new(1);
        let x: Vec<f64> = (0..784).map(|i| if i % 5 == 0 { 1.0 } else { 0.0 }).collect();
        let y = recolor_grayscale(&x, &mut rng).unwrap();
        assert_eq!(y.len(), 784);
        assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        // Ink stays brighter than background.
        assert!(y[0] > y[1]);
    }
}
