//! Flat `key = value` configuration files.
//!
//! One assignment per line; `#` starts a comment. Unknown and repeated keys
//! are errors, and `seed` must be present. Every other key falls back to the
//! library default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use webdistill::datagen::ShiftBenchmarkConfig;
use webdistill::mixdist::MixScope;
use webdistill::model::{ArchConfig, PretrainConfig};
use webdistill::optim::OptimizerConfig;
use webdistill::trainer::{TrainConfig, Variant};

pub const REQUIRED_KEYS: [&str; 1] = ["seed"];

pub const KNOWN_KEYS: [&str; 50] = [
    "seed",
    // benchmark
    "dim",
    "num_classes",
    "separation",
    "within_std",
    "n_teacher_train",
    "n_test",
    "n_pool_in",
    "n_pool_style",
    "n_pool_open",
    "style_scale_lo",
    "style_scale_hi",
    "style_offset",
    "open_classes",
    // teacher
    "teacher_hidden",
    "feature_dim",
    "teacher_embed_dim",
    "pretrain_epochs",
    "pretrain_batch_size",
    "pretrain_learning_rate",
    // distillation
    "epochs",
    "batch_size",
    "optimizer",
    "learning_rate",
    "momentum",
    "weight_decay",
    "lr_milestones",
    "alpha_tradeoff",
    "tau",
    "include_positive_in_denominator",
    "v_th",
    "delta",
    "epsilon_std",
    "mix_scope",
    "variant",
    "student_hidden",
    "embed_dim",
    "kd_temperature",
    "kd_lambda",
    "kd_learning_rate",
    // experiments
    "seeds",
    "variants",
    "sweep_param",
    "sweep_values",
    // paths
    "data_dir",
    "teacher_checkpoint",
    "train_file",
    "pool_file",
    "test_file",
    "out_dir",
];

/// Teacher architecture apart from the data-dependent input and class sizes.
#[derive(Debug, Clone, PartialEq)]
pub struct TeacherShape {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub embed_dim: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CliConfig {
    pub seed: u64,
    pub bench: ShiftBenchmarkConfig,
    pub teacher: TeacherShape,
    pub pretrain: PretrainConfig,
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    pub sweep_param: Option<String>,
    pub sweep_values: Vec<f64>,
    pub data_dir: Option<PathBuf>,
    pub teacher_checkpoint: Option<PathBuf>,
    pub train_file: Option<PathBuf>,
    pub pool_file: Option<PathBuf>,
    pub test_file: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl CliConfig {
    pub fn with_seed(seed: u64) -> Self {
        let mut c = Self {
            seed,
            bench: ShiftBenchmarkConfig::default(),
            teacher: TeacherShape {
                hidden: vec![64, 64],
                feature_dim: 32,
                embed_dim: 32,
            },
            pretrain: PretrainConfig::default(),
            train: TrainConfig::default(),
            seeds: Vec::new(),
            variants: vec![Variant::Full],
            sweep_param: None,
            sweep_values: Vec::new(),
            data_dir: None,
            teacher_checkpoint: None,
            train_file: None,
            pool_file: None,
            test_file: None,
            out_dir: None,
        };
        c.set_seed(seed);
        c
    }

    /// Sets the seed everywhere it is used.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.bench.seed = seed;
        self.train.seed = seed;
    }

    pub fn seed_list(&self) -> Vec<u64> {
        if self.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.seeds.clone()
        }
    }

    pub fn teacher_arch(&self, input_dim: usize, num_classes: usize) -> ArchConfig {
        ArchConfig {
            input_dim,
            hidden: self.teacher.hidden.clone(),
            feature_dim: self.teacher.feature_dim,
            embed_dim: self.teacher.embed_dim,
            num_classes,
        }
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries: BTreeMap<String, (usize, String)> = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {line_no}: expected `key = value`, got `{line}`"))?;
            let key = key.trim();
            if !KNOWN_KEYS.contains(&key) {
                bail!("line {line_no}: unknown key `{key}`");
            }
            if let Some((prev, _)) = entries.get(key) {
                bail!("line {line_no}: key `{key}` already set on line {prev}");
            }
            entries.insert(key.to_string(), (line_no, value.trim().to_string()));
        }
        for key in REQUIRED_KEYS {
            if !entries.contains_key(key) {
                bail!("missing required key `{key}`");
            }
        }
        let seed: u64 = parse_value("seed", &entries["seed"].1)?;
        let mut cfg = Self::with_seed(seed);
        // Known-key order, so that `optimizer` is applied before the
        // fields it resets.
        for key in KNOWN_KEYS {
            if let Some((line_no, value)) = entries.get(key) {
                cfg.apply(key, value)
                    .with_context(|| format!("line {line_no}: key `{key}`"))?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one assignment.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value;
        match key {
            "seed" => self.set_seed(parse_value(key, v)?),
            "dim" => self.bench.dim = parse_value(key, v)?,
            "num_classes" => self.bench.num_classes = parse_value(key, v)?,
            "separation" => self.bench.separation = parse_value(key, v)?,
            "within_std" => self.bench.within_std = parse_value(key, v)?,
            "n_teacher_train" => self.bench.n_teacher_train = parse_value(key, v)?,
            "n_test" => self.bench.n_test = parse_value(key, v)?,
            "n_pool_in" => self.bench.n_pool_in = parse_value(key, v)?,
            "n_pool_style" => self.bench.n_pool_style = parse_value(key, v)?,
            "n_pool_open" => self.bench.n_pool_open = parse_value(key, v)?,
            "style_scale_lo" => self.bench.style_scale_lo = parse_value(key, v)?,
            "style_scale_hi" => self.bench.style_scale_hi = parse_value(key, v)?,
            "style_offset" => self.bench.style_offset = parse_value(key, v)?,
            "open_classes" => self.bench.open_classes = parse_value(key, v)?,
            "teacher_hidden" => self.teacher.hidden = parse_list(key, v)?,
            "feature_dim" => self.teacher.feature_dim = parse_value(key, v)?,
            "teacher_embed_dim" => self.teacher.embed_dim = parse_value(key, v)?,
            "pretrain_epochs" => self.pretrain.epochs = parse_value(key, v)?,
            "pretrain_batch_size" => self.pretrain.batch_size = parse_value(key, v)?,
            "pretrain_learning_rate" => self.pretrain.optimizer.learning_rate = parse_value(key, v)?,
            "epochs" => self.train.epochs = parse_value(key, v)?,
            "batch_size" => self.train.batch_size = parse_value(key, v)?,
            "optimizer" => {
                let o = &mut self.train.optimizer;
                let lr = o.learning_rate;
                *o = match v.to_ascii_lowercase().as_str() {
                    "sgd" => OptimizerConfig::sgd(lr),
                    "adam" => OptimizerConfig::adam(lr),
                    _ => bail!("expected `sgd` or `adam`, got `{v}`"),
                };
            }
            "learning_rate" => self.train.optimizer.learning_rate = parse_value(key, v)?,
            "momentum" => self.train.optimizer.momentum = parse_value(key, v)?,
            "weight_decay" => self.train.optimizer.weight_decay = parse_value(key, v)?,
            "lr_milestones" => self.train.optimizer.lr_milestones = parse_list(key, v)?,
            "alpha_tradeoff" => self.train.alpha_tradeoff = parse_value(key, v)?,
            "tau" => self.train.contrastive.tau = parse_value(key, v)?,
            "include_positive_in_denominator" => {
                self.train.contrastive.include_positive_in_denominator = parse_value(key, v)?
            }
            "v_th" => self.train.v_th = parse_value(key, v)?,
            "delta" => self.train.mix.delta = parse_value(key, v)?,
            "epsilon_std" => self.train.mix.epsilon_std = parse_value(key, v)?,
            "mix_scope" => {
                self.train.mix.scope = match v.to_ascii_lowercase().as_str() {
                    "instance" => MixScope::Instance,
                    "batch" => MixScope::Batch,
                    _ => bail!("expected `instance` or `batch`, got `{v}`"),
                }
            }
            "variant" => self.train.variant = Variant::parse(v)?,
            "student_hidden" => self.train.student_hidden = parse_list(key, v)?,
            "embed_dim" => self.train.embed_dim = parse_value(key, v)?,
            "kd_temperature" => self.train.kd_temperature = parse_value(key, v)?,
            "kd_lambda" => self.train.kd_lambda = parse_value(key, v)?,
            "kd_learning_rate" => self.train.kd_optimizer.learning_rate = parse_value(key, v)?,
            "seeds" => self.seeds = parse_list(key, v)?,
            "variants" => {
                self.variants = split_list(v)
                    .map(|s| Variant::parse(s).map_err(anyhow::Error::from))
                    .collect::<Result<_>>()?
            }
            "sweep_param" => self.sweep_param = Some(sweep_param_name(v)?.to_string()),
            "sweep_values" => self.sweep_values = parse_list(key, v)?,
            "data_dir" => self.data_dir = Some(PathBuf::from(v)),
            "teacher_checkpoint" => self.teacher_checkpoint = Some(PathBuf::from(v)),
            "train_file" => self.train_file = Some(PathBuf::from(v)),
            "pool_file" => self.pool_file = Some(PathBuf::from(v)),
            "test_file" => self.test_file = Some(PathBuf::from(v)),
            "out_dir" => self.out_dir = Some(PathBuf::from(v)),
            _ => bail!("unknown key `{key}`"),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.bench.validate()?;
        self.train.validate()?;
        if self.teacher.feature_dim == 0 || self.teacher.embed_dim == 0 {
            bail!("feature_dim and teacher_embed_dim must be at least 1");
        }
        if self.pretrain.epochs == 0 || self.pretrain.batch_size == 0 {
            bail!("pretrain_epochs and pretrain_batch_size must be at least 1");
        }
        if self.variants.is_empty() {
            bail!("variants must name at least one variant");
        }
        Ok(())
    }
}

/// Canonical sweep parameter name, or an error for unsupported ones.
pub fn sweep_param_name(name: &str) -> Result<&'static str> {
    match name.trim() {
        "alpha_tradeoff" => Ok("alpha_tradeoff"),
        "tau" => Ok("tau"),
        "v_th" | "V_th" => Ok("v_th"),
        "delta" => Ok("delta"),
        other => bail!("unknown sweep parameter `{other}` (expected alpha_tradeoff, tau, V_th or delta)"),
    }
}

fn split_list(v: &str) -> impl Iterator<Item = &str> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty())
}

fn parse_value<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse::<T>()
        .map_err(|_| anyhow!("`{key}`: cannot parse `{v}` as {}", std::any::type_name::<T>()))
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    split_list(v).map(|s| parse_value(key, s)).collect()
}
