//! Commands behind the `webdistill` binary.
//!
//! Each command reads a flat config (see [`config`]), works on files in a
//! data directory, and writes its artifacts to an output directory. Files
//! written with identical inputs and seed are byte-identical; wall-clock
//! timings go to separate `timing.json` sidecars.

pub mod config;
pub mod stretch;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use webdistill::checkpoint::{load_checkpoint, save_checkpoint};
use webdistill::datafile;
use webdistill::datagen::{gen_shift_benchmark, GeneratorDiagnostics, LabeledSet, Provenance};
use webdistill::model::{pretrain_teacher, Network};
use webdistill::numerics::Rng;
use webdistill::trainer::{dump_perturbed_batch, evaluate, run_variant, RunRecord, TrainConfig, TrainOutcome, Variant};

pub use config::CliConfig;

pub const TRAIN_FILE: &str = "original_train.wdds";
pub const POOL_FILE: &str = "web_pool.wdds";
pub const TEST_FILE: &str = "test.wdds";
pub const TEACHER_FILE: &str = "teacher.json";
pub const OUT_ENV: &str = "WEBDISTILL_OUT";

/// Stream used for teacher initialization and shuffling.
const PRETRAIN_STREAM: u64 = 7;

/// Resolved locations for one command invocation.
#[derive(Debug, Clone)]
pub struct Paths {
    pub out: PathBuf,
    pub data: PathBuf,
}

impl Paths {
    /// `--out` beats `out_dir` beats `$WEBDISTILL_OUT` beats `runs`; the data
    /// directory defaults to the output directory.
    pub fn resolve(cfg: &CliConfig, out: Option<&Path>, data: Option<&Path>) -> Self {
        let out = out
            .map(Path::to_path_buf)
            .or_else(|| cfg.out_dir.clone())
            .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"));
        let data = data
            .map(Path::to_path_buf)
            .or_else(|| cfg.data_dir.clone())
            .unwrap_or_else(|| out.clone());
        Self { out, data }
    }

    fn file(&self, explicit: &Option<PathBuf>, name: &str) -> PathBuf {
        explicit.clone().unwrap_or_else(|| self.data.join(name))
    }

    pub fn train_file(&self, cfg: &CliConfig) -> PathBuf {
        self.file(&cfg.train_file, TRAIN_FILE)
    }

    pub fn pool_file(&self, cfg: &CliConfig) -> PathBuf {
        self.file(&cfg.pool_file, POOL_FILE)
    }

    pub fn test_file(&self, cfg: &CliConfig) -> PathBuf {
        self.file(&cfg.test_file, TEST_FILE)
    }

    pub fn teacher_file(&self, cfg: &CliConfig) -> PathBuf {
        self.file(&cfg.teacher_checkpoint, TEACHER_FILE)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("cannot create output directory {}", dir.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

#[derive(Debug, Serialize)]
struct Timing {
    wall_clock_secs: f64,
}

fn write_timing(dir: &Path, secs: f64) -> Result<()> {
    write_json(&dir.join("timing.json"), &Timing { wall_clock_secs: secs })
}

#[derive(Debug, Clone, Serialize)]
pub struct SetManifest {
    pub file: String,
    pub instances: usize,
    pub dim: usize,
    pub num_classes: usize,
    pub in_distribution: usize,
    pub style_shifted: usize,
    pub open_set: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct DataManifest {
    pub benchmark: webdistill::datagen::ShiftBenchmarkConfig,
    pub original_train: SetManifest,
    pub web_pool: SetManifest,
    pub test: SetManifest,
    pub diagnostics: GeneratorDiagnostics,
}

fn set_manifest(file: &str, set: &LabeledSet) -> SetManifest {
    SetManifest {
        file: file.to_string(),
        instances: set.len(),
        dim: set.dim(),
        num_classes: set.num_classes(),
        in_distribution: set.count_provenance(Provenance::InDistribution),
        style_shifted: set.count_provenance(Provenance::StyleShifted),
        open_set: set.count_provenance(Provenance::OpenSet),
    }
}

/// Writes the three dataset files and `manifest.json`.
pub fn cmd_gen_data(cfg: &CliConfig, paths: &Paths) -> Result<DataManifest> {
    let bench = gen_shift_benchmark(&cfg.bench)?;
    create_dir(&paths.out)?;
    for (name, set) in [
        (TRAIN_FILE, &bench.original_train),
        (POOL_FILE, &bench.web_pool),
        (TEST_FILE, &bench.test),
    ] {
        datafile::write(set, &paths.out.join(name))?;
    }
    let manifest = DataManifest {
        benchmark: cfg.bench.clone(),
        original_train: set_manifest(TRAIN_FILE, &bench.original_train),
        web_pool: set_manifest(POOL_FILE, &bench.web_pool),
        test: set_manifest(TEST_FILE, &bench.test),
        diagnostics: bench.diagnostics,
    };
    write_json(&paths.out.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

#[derive(Debug, Clone, Serialize)]
pub struct PretrainReport {
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    pub pretrain: webdistill::model::PretrainConfig,
    pub seed: u64,
}

pub fn teacher_rng(seed: u64) -> Rng {
    Rng::new(seed).substream(PRETRAIN_STREAM)
}

/// Pretrains and freezes the teacher; writes `teacher.json` and
/// `pretrain.json`.
pub fn cmd_pretrain(cfg: &CliConfig, paths: &Paths) -> Result<PretrainReport> {
    let train = datafile::read(&paths.train_file(cfg))?;
    let test = datafile::read(&paths.test_file(cfg))?;
    if train.dim() != test.dim() || train.num_classes() != test.num_classes() {
        bail!(
            "train set is {}-d with {} classes but test set is {}-d with {} classes",
            train.dim(),
            train.num_classes(),
            test.dim(),
            test.num_classes()
        );
    }
    let arch = cfg.teacher_arch(train.dim(), train.num_classes());
    let started = std::time::Instant::now();
    let outcome = pretrain_teacher(&train, &arch, &cfg.pretrain, &mut teacher_rng(cfg.seed))?;
    let report = PretrainReport {
        train_accuracy: outcome.train_accuracy,
        test_accuracy: evaluate(&outcome.teacher, &test)?,
        pretrain: cfg.pretrain.clone(),
        seed: cfg.seed,
    };
    create_dir(&paths.out)?;
    save_checkpoint(&outcome.teacher, &paths.out.join(TEACHER_FILE))?;
    write_json(&paths.out.join("pretrain.json"), &report)?;
    write_timing(&paths.out, started.elapsed().as_secs_f64())?;
    Ok(report)
}

/// Teacher, pool and test set with every dimension checked.
pub struct DistillInputs {
    pub teacher: Network,
    pub pool: LabeledSet,
    pub test: LabeledSet,
}

pub fn load_distill_inputs(cfg: &CliConfig, paths: &Paths) -> Result<DistillInputs> {
    let teacher_path = paths.teacher_file(cfg);
    let teacher = load_checkpoint(&teacher_path).with_context(|| format!("loading {}", teacher_path.display()))?;
    let pool = datafile::read(&paths.pool_file(cfg))?;
    let test = datafile::read(&paths.test_file(cfg))?;
    for (name, set) in [("pool", &pool), ("test", &test)] {
        if set.dim() != teacher.input_dim() {
            bail!(
                "{name} instances are {}-d but the teacher expects {}-d input",
                set.dim(),
                teacher.input_dim()
            );
        }
    }
    if test.num_classes() != teacher.num_classes() {
        bail!(
            "test set has {} classes but the teacher predicts {}",
            test.num_classes(),
            teacher.num_classes()
        );
    }
    if !teacher.classifier.frozen {
        bail!("teacher checkpoint {} is not frozen", teacher_path.display());
    }
    Ok(DistillInputs { teacher, pool, test })
}

/// Files written for one training run.
pub fn write_run(dir: &Path, outcome: &TrainOutcome) -> Result<()> {
    create_dir(dir)?;
    outcome.record.write_json(&dir.join("run_record.json"))?;
    let mut csv = Vec::new();
    outcome.record.write_epoch_csv(&mut csv)?;
    fs::write(dir.join("epochs.csv"), csv).with_context(|| format!("cannot write {}", dir.display()))?;
    save_checkpoint(&outcome.student, &dir.join("student.json"))?;
    write_timing(dir, outcome.record.wall_clock_secs)
}

#[derive(Debug, Clone, Default)]
pub struct DistillOptions {
    pub dry_run: bool,
    pub dump_perturbed: bool,
}

/// Runs `cfg.train.variant` once. Returns `None` for a dry run.
pub fn cmd_distill(cfg: &CliConfig, paths: &Paths, opts: &DistillOptions) -> Result<Option<RunRecord>> {
    let inputs = load_distill_inputs(cfg, paths)?;
    cfg.train.validate()?;
    if opts.dry_run {
        return Ok(None);
    }
    let outcome = run_variant(
        &inputs.teacher,
        &inputs.pool,
        &inputs.test,
        &cfg.train,
        &Rng::new(cfg.train.seed),
    )?;
    write_run(&paths.out, &outcome)?;
    if opts.dump_perturbed {
        let path = paths.out.join("perturbed_batch.csv");
        let file = fs::File::create(&path).with_context(|| format!("cannot write {}", path.display()))?;
        dump_perturbed_batch(
            &inputs.pool,
            cfg.train.batch_size,
            &cfg.train.mix,
            &Rng::new(cfg.train.seed),
            file,
        )?;
    }
    Ok(Some(outcome.record))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub runs: usize,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
    pub mean_final_precision: Option<f64>,
}

/// Sample mean and (n-1) standard deviation; 0 spread for a single value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(records: &[RunRecord]) -> Vec<SummaryRow> {
    let mut order: Vec<Variant> = Vec::new();
    for r in records {
        if !order.contains(&r.variant) {
            order.push(r.variant);
        }
    }
    order
        .into_iter()
        .map(|v| {
            let runs: Vec<&RunRecord> = records.iter().filter(|r| r.variant == v).collect();
            let accs: Vec<f64> = runs.iter().map(|r| r.final_test_accuracy).collect();
            let (mean_accuracy, std_accuracy) = mean_std(&accs);
            let precs: Option<Vec<f64>> = runs.iter().map(|r| r.final_precision()).collect();
            SummaryRow {
                variant: v.name().to_string(),
                runs: runs.len(),
                mean_accuracy,
                std_accuracy,
                mean_final_precision: precs.map(|p| mean_std(&p).0),
            }
        })
        .collect()
}

pub fn write_summary_csv<W: Write>(rows: &[SummaryRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["variant", "runs", "mean_accuracy", "std_accuracy", "mean_final_precision"])?;
    for r in rows {
        w.write_record([
            r.variant.clone(),
            r.runs.to_string(),
            r.mean_accuracy.to_string(),
            r.std_accuracy.to_string(),
            r.mean_final_precision.map_or(String::new(), |p| p.to_string()),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Runs every `(variant, seed)` pair, in parallel across runs. Per-run
/// files go to `<out>/<variant>/seed<k>/`, the table to `summary.csv`.
pub fn run_grid(inputs: &DistillInputs, base: &TrainConfig, variants: &[Variant], seeds: &[u64]) -> Result<Vec<TrainOutcome>> {
    let jobs: Vec<(Variant, u64)> = variants
        .iter()
        .flat_map(|&v| seeds.iter().map(move |&s| (v, s)))
        .collect();
    jobs.into_par_iter()
        .with_max_len(1)
        .map(|(variant, seed)| {
            let cfg = TrainConfig {
                variant,
                seed,
                ..base.clone()
            };
            run_variant(&inputs.teacher, &inputs.pool, &inputs.test, &cfg, &Rng::new(seed))
                .with_context(|| format!("{variant} with seed {seed}"))
        })
        .collect()
}

pub fn cmd_ablate(cfg: &CliConfig, paths: &Paths, dry_run: bool) -> Result<Vec<SummaryRow>> {
    let inputs = load_distill_inputs(cfg, paths)?;
    cfg.train.validate()?;
    if dry_run {
        return Ok(Vec::new());
    }
    let seeds = cfg.seed_list();
    let outcomes = run_grid(&inputs, &cfg.train, &cfg.variants, &seeds)?;
    for o in &outcomes {
        write_run(
            &paths.out.join(o.record.variant.name()).join(format!("seed{}", o.record.seed)),
            o,
        )?;
    }
    let records: Vec<RunRecord> = outcomes.into_iter().map(|o| o.record).collect();
    let rows = summarize(&records);
    let mut buf = Vec::new();
    write_summary_csv(&rows, &mut buf)?;
    write_text(&paths.out.join("summary.csv"), std::str::from_utf8(&buf)?)?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub param: String,
    pub value: f64,
    pub final_test_accuracy: f64,
    pub final_selection_precision: Option<f64>,
}

pub fn apply_sweep_value(train: &mut TrainConfig, param: &str, value: f64) -> Result<()> {
    match config::sweep_param_name(param)? {
        "alpha_tradeoff" => train.alpha_tradeoff = value,
        "tau" => train.contrastive.tau = value,
        "v_th" => train.v_th = value,
        "delta" => train.mix.delta = value,
        _ => unreachable!(),
    }
    train.validate().with_context(|| format!("{param} = {value}"))?;
    Ok(())
}

/// One run per value at the configured seed; writes `sweep.csv` and the
/// per-value records under `<out>/<param>=<value>/`.
pub fn cmd_sweep(cfg: &CliConfig, paths: &Paths, param: &str, values: &[f64], dry_run: bool) -> Result<Vec<SweepRow>> {
    let param = config::sweep_param_name(param)?;
    if values.is_empty() {
        bail!("sweep needs at least one value");
    }
    let configs: Vec<TrainConfig> = values
        .iter()
        .map(|&v| {
            let mut t = cfg.train.clone();
            apply_sweep_value(&mut t, param, v)?;
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let inputs = load_distill_inputs(cfg, paths)?;
    if dry_run {
        return Ok(Vec::new());
    }
    let outcomes: Vec<TrainOutcome> = configs
        .into_par_iter()
        .with_max_len(1)
        .map(|t| Ok(run_variant(&inputs.teacher, &inputs.pool, &inputs.test, &t, &Rng::new(t.seed))?))
        .collect::<Result<_>>()?;
    let mut rows = Vec::new();
    for (o, &value) in outcomes.iter().zip(values) {
        write_run(&paths.out.join(format!("{param}={value}")), o)?;
        rows.push(SweepRow {
            param: param.to_string(),
            value,
            final_test_accuracy: o.record.final_test_accuracy,
            final_selection_precision: o.record.final_precision(),
        });
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["param", "value", "final_test_accuracy", "final_selection_precision"])?;
    for r in &rows {
        w.write_record([
            r.param.clone(),
            r.value.to_string(),
            r.final_test_accuracy.to_string(),
            r.final_selection_precision.map_or(String::new(), |p| p.to_string()),
        ])?;
    }
    let buf = w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))?;
    write_text(&paths.out.join("sweep.csv"), std::str::from_utf8(&buf)?)?;
    Ok(rows)
}

pub fn cmd_evaluate(checkpoint: &Path, test_file: &Path) -> Result<f64> {
    let net = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let test = datafile::read(test_file)?;
    if test.dim() != net.input_dim() {
        bail!(
            "test instances are {}-d but the checkpoint expects {}-d input",
            test.dim(),
            net.input_dim()
        );
    }
    Ok(evaluate(&net, &test)?)
}

/// CSV with columns `f_0..f_{d_f-1},label,provenance` (empty cells when a
/// set carries no labels or tags).
pub fn export_features<W: Write>(net: &Network, set: &LabeledSet, out: W) -> Result<()> {
    if !set.is_empty() && set.dim() != net.input_dim() {
        bail!(
            "dataset instances are {}-d but the checkpoint expects {}-d input",
            set.dim(),
            net.input_dim()
        );
    }
    let df = net.feature_dim();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = (0..df).map(|j| format!("f_{j}")).collect();
    header.push("label".into());
    header.push("provenance".into());
    w.write_record(&header)?;
    if !set.is_empty() {
        let feats = net.features_batch(set.instances())?;
        for i in 0..set.len() {
            let mut row: Vec<String> = feats.row(i).iter().map(|v| v.to_string()).collect();
            row.push(set.labels().map_or(String::new(), |l| l[i].to_string()));
            row.push(set.provenance().map_or(String::new(), |p| p[i].name().to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_export_features(checkpoint: &Path, dataset: &Path, out: &Path) -> Result<()> {
    let net = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let set = datafile::read(dataset)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let file = fs::File::create(out).with_context(|| format!("cannot write {}", out.display()))?;
    export_features(&net, &set, std::io::BufWriter::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_std_examples() {
        assert_eq!(mean_std(&[0.5]), (0.5, 0.0));
        let (m, s) = mean_std(&[1.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 2f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sweep_values_land_in_the_right_field() {
        let mut t = TrainConfig::default();
        apply_sweep_value(&mut t, "V_th", 0.9).unwrap();
        apply_sweep_value(&mut t, "tau", 0.7).unwrap();
        apply_sweep_value(&mut t, "delta", 2.0).unwrap();
        apply_sweep_value(&mut t, "alpha_tradeoff", 1.0).unwrap();
        assert_eq!((t.v_th, t.contrastive.tau, t.mix.delta, t.alpha_tradeoff), (0.9, 0.7, 2.0, 1.0));
        assert!(apply_sweep_value(&mut t, "lr", 0.1).is_err());
        assert!(apply_sweep_value(&mut t, "tau", 0.0).is_err());
    }
}
