#![allow(dead_code)]

use webdistill::datagen::{gen_shift_benchmark, ShiftBenchmark, ShiftBenchmarkConfig};
use webdistill::model::{pretrain_teacher, ArchConfig, Network, PretrainConfig};
use webdistill::numerics::Rng;
use webdistill::optim::OptimizerConfig;
use webdistill::trainer::TrainConfig;

pub fn small_bench(seed: u64) -> ShiftBenchmark {
    gen_shift_benchmark(&ShiftBenchmarkConfig {
        dim: 8,
        num_classes: 3,
        n_teacher_train: 300,
        n_test: 150,
        n_pool_in: 120,
        n_pool_style: 60,
        n_pool_open: 60,
        open_classes: 2,
        seed,
        ..ShiftBenchmarkConfig::default()
    })
    .unwrap()
}

pub fn small_teacher(bench: &ShiftBenchmark) -> Network {
    let arch = ArchConfig {
        input_dim: 8,
        hidden: vec![16],
        feature_dim: 8,
        embed_dim: 6,
        num_classes: 3,
    };
    let cfg = PretrainConfig {
        epochs: 8,
        batch_size: 32,
        optimizer: OptimizerConfig::adam(3e-3),
    };
    pretrain_teacher(&bench.original_train, &arch, &cfg, &mut Rng::new(11))
        .unwrap()
        .teacher
}

pub fn small_config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 32,
        student_hidden: vec![12],
        embed_dim: 6,
        ..TrainConfig::default()
    }
}

pub fn network_bits(net: &Network) -> Vec<u64> {
    let mut out = Vec::new();
    for p in net.extractor.params() {
        out.extend(p.iter().map(|v| v.to_bits()));
    }
    let c = &net.classifier.affine;
    let h = &net.head.affine;
    for a in [c, h] {
        out.extend(a.weight.values().iter().chain(a.bias.values()).map(|v| v.to_bits()));
    }
    out
}
