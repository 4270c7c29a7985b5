//! The `dimple` command-line interface.
//!
//! Every command is idempotent with respect to (config, seed): rerunning
//! overwrites its outputs with identical bytes. Commands that take `--out`
//! write a `resolved_config` echo into the output directory before doing
//! anything else; that echo plus the dataset file reproduces the run.
//!
//! Exit codes: 0 success, 2 diverged run, 1 config/data/IO errors.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{apply_override, parse_config, render_config};
use crate::data::{generate, read_dataset, write_dataset, SynthData};
use crate::error::{Error, Result};
use crate::harness::{
    evaluate, export_embeddings, grid_csv, gridsearch, run_experiment, RunMetrics, TrainConfig,
};

#[derive(Parser)]
#[command(
    name = "dimple",
    about = "Disentangled multi-modal prompt learning on a synthetic spurious-correlation benchmark",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Plain-text config file (sections: task, encoder, loss, train).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config key, e.g. --set loss.alpha=0.5 (repeatable).
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    set: Vec<String>,
    /// Root seed override (sets both train.seed and task.seed).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset file (DIMPLESYN v1).
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and run the evaluation battery.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (run.json, steps.csv, model.ckpt, resolved_config).
        #[arg(long)]
        out: PathBuf,
        /// Load the dataset from a DIMPLESYN file instead of generating it.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Paper-style few-shot regime: 16 samples/class, batch 4, 5 epochs,
        /// lr 0.0035.
        #[arg(long)]
        paper_regime: bool,
    },
    /// Evaluate a checkpoint on a dataset file.
    Eval {
        /// Model checkpoint (DIMPLECKPT).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file (DIMPLESYN).
        #[arg(long)]
        data: PathBuf,
        /// Output directory (run.json).
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep {alpha, beta, prompt_len, prompt_depth} with a shared seed.
    Gridsearch {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (grid.csv).
        #[arg(long)]
        out: PathBuf,
        /// Comma-separated alpha values.
        #[arg(long, default_value = "0.1,0.5,1,2")]
        alphas: String,
        /// Comma-separated beta values.
        #[arg(long, default_value = "0.1,0.5,1,2")]
        betas: String,
        /// Comma-separated prompt lengths.
        #[arg(long, default_value = "2")]
        prompt_lens: String,
        /// Comma-separated prompt depths.
        #[arg(long, default_value = "3")]
        prompt_depths: String,
    },
    /// Check every parameter gradient of all four objectives against
    /// central finite differences on a micro model.
    Gradcheck {
        /// Seed for the micro model and batch.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Optional directory for the text report.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Export decomposed embeddings to CSV.
    ExportEmbeddings {
        /// Model checkpoint (DIMPLECKPT).
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset file (DIMPLESYN).
        #[arg(long)]
        data: PathBuf,
        /// Output directory (embeddings.csv).
        #[arg(long)]
        out: PathBuf,
        /// Which split to embed.
        #[arg(long, default_value = "test_id")]
        split: String,
        /// Cap on exported samples (0 = all).
        #[arg(long, default_value_t = 128)]
        limit: usize,
    },
}

/// Resolve a run configuration from file + overrides + seed.
fn resolve(args: &ConfigArgs) -> Result<TrainConfig> {
    let mut cfg = match &args.config {
        Some(path) => parse_config(&std::fs::read_to_string(path)?)?,
        None => TrainConfig::default(),
    };
    for assignment in &args.set {
        apply_override(&mut cfg, assignment)?;
    }
    if let Some(seed) = args.seed {
        cfg.seed = seed;
        cfg.task.seed = seed;
    }
    Ok(cfg)
}

fn write_resolved(out: &Path, cfg: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved_config"), render_config(cfg))?;
    Ok(())
}

fn write_metrics(out: &Path, metrics: &RunMetrics) -> Result<()> {
    std::fs::write(out.join("run.json"), metrics.run_json())?;
    std::fs::write(out.join("steps.csv"), metrics.steps_csv())?;
    Ok(())
}

fn load_or_generate(cfg: &TrainConfig, data: &Option<PathBuf>) -> Result<SynthData> {
    match data {
        None => generate(&cfg.task),
        Some(path) => {
            let (task, data) = read_dataset(path)?;
            if task != cfg.task {
                return Err(Error::Config(format!(
                    "dataset file was generated for a different task spec ({path})",
                    path = path.display()
                )));
            }
            Ok(data)
        }
    }
}

fn parse_list<T: std::str::FromStr>(name: &str, csv: &str) -> Result<Vec<T>> {
    csv.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<T>()
                .map_err(|_| Error::Config(format!("--{name}: cannot parse `{s}`")))
        })
        .collect()
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { cfg, out } => {
            let cfg = resolve(&cfg)?;
            cfg.task.validate()?;
            write_resolved(&out, &cfg)?;
            let data = generate(&cfg.task)?;
            write_dataset(&out.join("dataset.dimplesyn"), &cfg.task, &data)?;
            println!(
                "wrote {} (train {}, test_id {}, test_shift {})",
                out.join("dataset.dimplesyn").display(),
                data.train.len(),
                data.test_id.len(),
                data.test_shift.len()
            );
        }
        Command::Train { cfg, out, data, paper_regime } => {
            let mut cfg = resolve(&cfg)?;
            if paper_regime {
                cfg.apply_paper_regime();
            }
            cfg.validate()?;
            write_resolved(&out, &cfg)?;
            let data = load_or_generate(&cfg, &data)?;
            let (model, metrics) = run_experiment(&cfg, &data)?;
            write_metrics(&out, &metrics)?;
            crate::checkpoint::save(&out.join("model.ckpt"), &model)?;
            println!(
                "base {:.2} novel {:.2} hm {:.2} | avg group {:.2} worst group {:.2}",
                metrics.base_acc, metrics.novel_acc, metrics.hm, metrics.avg_group_acc, metrics.worst_group_acc
            );
        }
        Command::Eval { checkpoint, data, out } => {
            let model = crate::checkpoint::load(&checkpoint)?;
            let (task, data) = read_dataset(&data)?;
            if task != model.task {
                return Err(Error::Config(
                    "dataset task spec does not match the checkpointed model".to_string(),
                ));
            }
            let cfg = TrainConfig {
                objective: model.objective,
                prompt_mode: model.mode,
                encoder: model.enc_cfg.clone(),
                task: model.task.clone(),
                seed: model.seed,
                ..Default::default()
            };
            write_resolved(&out, &cfg)?;
            let metrics = evaluate(&model, &cfg, &data, Vec::new(), Vec::new())?;
            write_metrics(&out, &metrics)?;
            println!(
                "base {:.2} novel {:.2} hm {:.2} | avg group {:.2} worst group {:.2}",
                metrics.base_acc, metrics.novel_acc, metrics.hm, metrics.avg_group_acc, metrics.worst_group_acc
            );
        }
        Command::Gridsearch { cfg, out, alphas, betas, prompt_lens, prompt_depths } => {
            let cfg = resolve(&cfg)?;
            cfg.validate()?;
            write_resolved(&out, &cfg)?;
            let rows = gridsearch(
                &cfg,
                &parse_list::<f64>("alphas", &alphas)?,
                &parse_list::<f64>("betas", &betas)?,
                &parse_list::<usize>("prompt-lens", &prompt_lens)?,
                &parse_list::<usize>("prompt-depths", &prompt_depths)?,
            )?;
            std::fs::write(out.join("grid.csv"), grid_csv(&rows))?;
            println!("wrote {} ({} cells)", out.join("grid.csv").display(), rows.len());
        }
        Command::Gradcheck { seed, out } => {
            let report = crate::gradcheck::run_model_gradcheck(seed, None)?;
            let rendered = report.render();
            print!("{rendered}");
            if let Some(dir) = out {
                std::fs::create_dir_all(&dir)?;
                std::fs::write(dir.join("gradcheck.txt"), &rendered)?;
            }
            if !report.passed() {
                let worst = report
                    .objectives
                    .iter()
                    .flat_map(|o| o.groups.iter().map(move |g| (o.objective, g)))
                    .max_by(|a, b| a.1.worst_rel_err.partial_cmp(&b.1.worst_rel_err).unwrap())
                    .expect("nonempty report");
                return Err(Error::Contract(format!(
                    "gradient check failed: objective {} tensor {} rel err {:.3e} >= {:.0e}",
                    worst.0,
                    worst.1.worst_tensor,
                    worst.1.worst_rel_err,
                    crate::gradcheck::GRADCHECK_THRESHOLD
                )));
            }
        }
        Command::ExportEmbeddings { checkpoint, data, out, split, limit } => {
            let model = crate::checkpoint::load(&checkpoint)?;
            let (task, data) = read_dataset(&data)?;
            if task != model.task {
                return Err(Error::Config(
                    "dataset task spec does not match the checkpointed model".to_string(),
                ));
            }
            let batch = match split.as_str() {
                "train" => &data.train,
                "test_id" => &data.test_id,
                "test_shift" => &data.test_shift,
                other => return Err(Error::Config(format!("unknown split `{other}`"))),
            };
            let batch = if limit > 0 && limit < batch.len() {
                batch.select(&(0..limit).collect::<Vec<_>>(), &task)
            } else {
                batch.clone()
            };
            // embed against the classes the split actually contains
            let classes: Vec<usize> = {
                let mut c = batch.labels.clone();
                c.sort_unstable();
                c.dedup();
                c
            };
            std::fs::create_dir_all(&out)?;
            let cfg = TrainConfig {
                objective: model.objective,
                prompt_mode: model.mode,
                encoder: model.enc_cfg.clone(),
                task: model.task.clone(),
                seed: model.seed,
                ..Default::default()
            };
            std::fs::write(out.join("resolved_config"), render_config(&cfg))?;
            export_embeddings(&model, &batch, &classes, &out.join("embeddings.csv"))?;
            println!(
                "wrote {} ({} samples, {} classes)",
                out.join("embeddings.csv").display(),
                batch.len(),
                classes.len()
            );
        }
    }
    Ok(())
}

fn init_thread_pool() {
    let threads = std::env::var("DIMPLE_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0);
    if let Some(n) = threads {
        // ignore the error if a pool already exists (tests)
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
}

/// Rendered long help for the top-level command (test support).
pub fn help_text() -> String {
    use clap::CommandFactory;
    Cli::command().render_long_help().to_string()
}

/// Rendered long help for one subcommand (test support).
pub fn subcommand_help(name: &str) -> Option<String> {
    use clap::CommandFactory;
    Cli::command()
        .get_subcommands_mut()
        .find(|c| c.get_name() == name)
        .map(|c| c.render_long_help().to_string())
}

pub fn run() -> i32 {
    init_thread_pool();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

/// Test-visible entry: run with explicit argv, capturing only the exit code.
pub fn run_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    init_thread_pool();
    match Cli::try_parse_from(args) {
        Ok(cli) => match dispatch(cli) {
            Ok(()) => 0,
            Err(e) => {
                eprintln!("error: {e}");
                e.exit_code()
            }
        },
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                1
            } else {
                0
            }
        }
    }
}
