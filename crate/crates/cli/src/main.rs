use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use webdistill::trainer::Variant;
use webdistill_cli::stretch::{run_stretch, StretchConfig};
use webdistill_cli::{
    cmd_ablate, cmd_distill, cmd_evaluate, cmd_export_features, cmd_gen_data, cmd_pretrain, cmd_sweep, CliConfig,
    DistillOptions, Paths,
};

#[derive(Parser)]
#[command(name = "webdistill", version, about = "Distill a student from a frozen teacher using a shifted unlabeled pool")]
struct Cli {
    /// Worker threads (defaults to all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file.
    #[arg(long)]
    config: PathBuf,
    /// Output directory [default: out_dir key, then $WEBDISTILL_OUT, then ./runs].
    #[arg(long)]
    out: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory holding the dataset files and teacher checkpoint [default: output directory].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Validate inputs and exit without training.
    #[arg(long)]
    dry_run: bool,
}

impl Common {
    fn load(&self) -> Result<(CliConfig, Paths)> {
        let mut cfg = CliConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            cfg.set_seed(seed);
            cfg.seeds.clear();
        }
        let paths = Paths::resolve(&cfg, self.out.as_deref(), self.data.as_deref());
        Ok((cfg, paths))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic shift benchmark.
    GenData(Common),
    /// Pretrain and freeze the teacher.
    Pretrain(Common),
    /// Train one student (the config's `variant`).
    Distill {
        #[command(flatten)]
        common: Common,
        /// Teacher checkpoint [default: teacher_checkpoint key, then <data>/teacher.json].
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Also write one perturbed batch to perturbed_batch.csv.
        #[arg(long)]
        dump_perturbed: bool,
    },
    /// Run several variants over several seeds and tabulate accuracy.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variants [default: variants key].
        #[arg(long, value_delimiter = ',')]
        variants: Option<Vec<String>>,
        /// Comma-separated seeds [default: seeds key].
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
    },
    /// One run per value of a hyperparameter.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// alpha_tradeoff, tau, V_th or delta [default: sweep_param key].
        #[arg(long)]
        param: Option<String>,
        /// Comma-separated values [default: sweep_values key].
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Print a checkpoint's accuracy on a labeled dataset file.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        test: PathBuf,
    },
    /// MNIST experiment: distilled student vs a student trained on the originals.
    Mnist {
        /// Directory with the four standard MNIST IDX files.
        #[arg(long, env = "MNIST_DIR")]
        mnist_dir: PathBuf,
        /// Output directory for stretch.json.
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Distillation epochs.
        #[arg(long, default_value_t = 20)]
        epochs: usize,
    },
    /// Write extracted features of a dataset as CSV.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Output CSV file.
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the thread pool")?;
    }
    match cli.command {
        Command::GenData(c) => {
            let (cfg, paths) = c.load()?;
            if c.dry_run {
                cfg.bench.validate()?;
                return Ok(());
            }
            let m = cmd_gen_data(&cfg, &paths)?;
            println!(
                "wrote {} train, {} pool ({} in-distribution, {} style-shifted, {} open-set), {} test instances to {}",
                m.original_train.instances,
                m.web_pool.instances,
                m.web_pool.in_distribution,
                m.web_pool.style_shifted,
                m.web_pool.open_set,
                m.test.instances,
                paths.out.display()
            );
        }
        Command::Pretrain(c) => {
            let (cfg, paths) = c.load()?;
            if c.dry_run {
                return Ok(());
            }
            let r = cmd_pretrain(&cfg, &paths)?;
            println!("teacher train_accuracy {} test_accuracy {}", r.train_accuracy, r.test_accuracy);
        }
        Command::Distill {
            common,
            teacher,
            dump_perturbed,
        } => {
            let (mut cfg, paths) = common.load()?;
            if teacher.is_some() {
                cfg.teacher_checkpoint = teacher;
            }
            let opts = DistillOptions {
                dry_run: common.dry_run,
                dump_perturbed,
            };
            match cmd_distill(&cfg, &paths, &opts)? {
                Some(r) => println!("{} final_test_accuracy {}", r.variant, r.final_test_accuracy),
                None => eprintln!("dry run: inputs valid, no epochs run"),
            }
        }
        Command::Ablate {
            common,
            variants,
            seeds,
        } => {
            let (mut cfg, paths) = common.load()?;
            if let Some(v) = variants {
                cfg.variants = v.iter().map(|s| Variant::parse(s)).collect::<Result<_, _>>()?;
            }
            if let Some(s) = seeds {
                cfg.seeds = s;
            }
            for row in cmd_ablate(&cfg, &paths, common.dry_run)? {
                println!(
                    "{:<28} runs {} mean {:.4} std {:.4}",
                    row.variant, row.runs, row.mean_accuracy, row.std_accuracy
                );
            }
        }
        Command::Sweep { common, param, values } => {
            let (cfg, paths) = common.load()?;
            let param = param
                .or_else(|| cfg.sweep_param.clone())
                .context("no sweep parameter (--param or sweep_param key)")?;
            let values = values.unwrap_or_else(|| cfg.sweep_values.clone());
            for row in cmd_sweep(&cfg, &paths, &param, &values, common.dry_run)? {
                println!("{} = {} final_test_accuracy {}", row.param, row.value, row.final_test_accuracy);
            }
        }
        Command::Evaluate { checkpoint, test } => {
            println!("accuracy {}", cmd_evaluate(&checkpoint, &test)?);
        }
        Command::Mnist {
            mnist_dir,
            out,
            seed,
            epochs,
        } => {
            let cfg = StretchConfig {
                seed,
                epochs,
                ..StretchConfig::default()
            };
            let r = run_stretch(&mnist_dir, &cfg)?;
            std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let path = out.join("stretch.json");
            std::fs::write(&path, serde_json::to_string_pretty(&r)? + "\n")
                .with_context(|| format!("writing {}", path.display()))?;
            println!(
                "teacher {} distilled {} direct {} gap_points {:.3}",
                r.teacher_accuracy, r.distilled_accuracy, r.direct_accuracy, r.gap_points
            );
        }
        Command::ExportFeatures {
            checkpoint,
            dataset,
            out,
        } => cmd_export_features(&checkpoint, &dataset, &out)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
