use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ssm_zsl::checkpoint::{load_checkpoint, save_checkpoint};
use ssm_zsl::config::{RunConfig, CONFIG_FILE};
use ssm_zsl::data::{gen_synthetic, load_archive, SplitSpec, ZslDataset};
use ssm_zsl::error::{Error, Result};
use ssm_zsl::head::EvalMode;
use ssm_zsl::params::ParamStore;
use ssm_zsl::tensor::Scalar;
use ssm_zsl::train::{
    best_row, evaluate, gradcheck, gradcheck_spec, restore, scan_equiv, score_table, sweep,
    sweep_csv, train, Precision,
};

const CHECKPOINT_FILE: &str = "checkpoint.zmba";
const GRADCHECK_TOL: f64 = 1e-4;
const SCAN_EQUIV_TOL: f64 = 1e-10;

#[derive(Parser)]
#[command(name = "ssm-zsl", version, about = "Zero-shot classification with a selective state space encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset archive.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model and write checkpoint.zmba and train_log.jsonl.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        lambda_sc: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Evaluate a checkpoint and write metrics.json.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "gzsl")]
        mode: EvalMode,
        #[arg(long)]
        lambda_col: Option<f64>,
    },
    /// Evaluate over a calibration grid and write sweep.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Comma-separated calibration values.
        #[arg(long, value_delimiter = ',', required = true)]
        grid: Vec<f64>,
    },
    /// Finite-difference check of the full loss on a small model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Compare recurrent and convolutional evaluation of random systems.
    ScanEquiv {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 64)]
        max_len: usize,
    },
}

fn load_config(path: Option<&Path>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = seed {
        cfg.train.seed = s;
        cfg.data.seed = s;
    }
    Ok(cfg)
}

/// Explicit `--config`, else the copy saved beside the checkpoint.
fn eval_config(common: &Common, checkpoint: &Path) -> Result<RunConfig> {
    let sibling = checkpoint.parent().map(|d| d.join(CONFIG_FILE));
    let path = common
        .config
        .clone()
        .or_else(|| sibling.filter(|p| p.exists()));
    load_config(path.as_deref(), common.seed)
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run_train<T: Scalar>(cfg: &RunConfig, dataset: &ZslDataset, split: &SplitSpec, out: &Path) -> Result<()> {
    let mut lines = String::new();
    let trained = train::<T>(dataset, split, &cfg.train, |e| {
        println!("epoch {:>3}  ce {:.4}  sc {:.4}  total {:.4}", e.epoch, e.ce, e.sc, e.total);
        lines.push_str(&serde_json::to_string(e).expect("serialisable"));
        lines.push('\n');
    })?;
    save_checkpoint(&out.join(CHECKPOINT_FILE), &trained.params)?;
    write(&out.join("train_log.jsonl"), lines)?;
    cfg.save(&out.join(CONFIG_FILE))?;
    println!("wrote {}", out.join(CHECKPOINT_FILE).display());
    Ok(())
}

fn load_params<T: Scalar>(cfg: &RunConfig, dataset: &ZslDataset, checkpoint: &Path) -> Result<(ssm_zsl::model::ZslModel, ParamStore<T>)> {
    restore(&cfg.train.model_spec(dataset), load_checkpoint::<T>(checkpoint)?)
}

fn run_eval<T: Scalar>(
    cfg: &RunConfig,
    dataset: &ZslDataset,
    split: &SplitSpec,
    checkpoint: &Path,
    mode: EvalMode,
    lambda_col: f64,
    out: &Path,
) -> Result<()> {
    let (model, params) = load_params::<T>(cfg, dataset, checkpoint)?;
    let m = evaluate(&model, &params, dataset, split, mode, lambda_col)?;
    println!("{}", m.summary());
    write(&out.join("metrics.json"), serde_json::to_string_pretty(&m).expect("serialisable"))
}

fn run_sweep<T: Scalar>(
    cfg: &RunConfig,
    dataset: &ZslDataset,
    split: &SplitSpec,
    checkpoint: &Path,
    grid: &[f64],
    out: &Path,
) -> Result<()> {
    let (model, params) = load_params::<T>(cfg, dataset, checkpoint)?;
    let table = score_table(&model, &params, dataset, split)?;
    let rows = sweep(&table, grid)?;
    for r in &rows {
        println!("lambda_col {:<8} S {:5.1}  U {:5.1}  H {:5.1}", r.lambda_col, r.s, r.u, r.h);
    }
    if let Some(b) = best_row(&rows) {
        println!("best H {:.1} at lambda_col {}", b.h, b.lambda_col);
    }
    write(&out.join("sweep.csv"), sweep_csv(&rows))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData { common } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let (dataset, split) = gen_synthetic(&cfg.data)?;
            ssm_zsl::data::save_archive(&common.out, &dataset, &split)?;
            println!(
                "wrote {} images ({} seen / {} unseen classes) to {}",
                dataset.len(),
                split.seen_classes.len(),
                split.unseen_classes.len(),
                common.out.display()
            );
        }
        Command::Train {
            common,
            data,
            lambda_sc,
            epochs,
        } => {
            let mut cfg = load_config(common.config.as_deref(), common.seed)?;
            if let Some(l) = lambda_sc {
                cfg.train.lambda_sc = l;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            let (dataset, split) = load_archive(&data)?;
            create_dir(&common.out)?;
            match cfg.train.precision {
                Precision::F32 => run_train::<f32>(&cfg, &dataset, &split, &common.out)?,
                Precision::F64 => run_train::<f64>(&cfg, &dataset, &split, &common.out)?,
            }
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            mode,
            lambda_col,
        } => {
            let cfg = eval_config(&common, &checkpoint)?;
            let lambda = lambda_col.unwrap_or(cfg.train.lambda_col);
            let (dataset, split) = load_archive(&data)?;
            create_dir(&common.out)?;
            match cfg.train.precision {
                Precision::F32 => run_eval::<f32>(&cfg, &dataset, &split, &checkpoint, mode, lambda, &common.out)?,
                Precision::F64 => run_eval::<f64>(&cfg, &dataset, &split, &checkpoint, mode, lambda, &common.out)?,
            }
        }
        Command::Sweep {
            common,
            data,
            checkpoint,
            grid,
        } => {
            let cfg = eval_config(&common, &checkpoint)?;
            let (dataset, split) = load_archive(&data)?;
            create_dir(&common.out)?;
            match cfg.train.precision {
                Precision::F32 => run_sweep::<f32>(&cfg, &dataset, &split, &checkpoint, &grid, &common.out)?,
                Precision::F64 => run_sweep::<f64>(&cfg, &dataset, &split, &checkpoint, &grid, &common.out)?,
            }
        }
        Command::Gradcheck { common } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let groups = gradcheck(&gradcheck_spec(), cfg.train.seed, 1e-5, None)?;
            let mut worst: f64 = 0.0;
            for g in &groups {
                let status = if g.max_rel_error < GRADCHECK_TOL { "ok" } else { "FAIL" };
                println!("{:<4} {:<32} {:>5} params  max rel err {:.3e}", status, g.group, g.params, g.max_rel_error);
                worst = worst.max(g.max_rel_error);
            }
            if !(worst < GRADCHECK_TOL) {
                return Err(Error::Numerical(format!(
                    "gradient check failed: max relative error {worst:.3e} >= {GRADCHECK_TOL:e}"
                )));
            }
            println!("all {} groups below {GRADCHECK_TOL:e}", groups.len());
        }
        Command::ScanEquiv {
            common,
            trials,
            max_len,
        } => {
            let cfg = load_config(common.config.as_deref(), common.seed)?;
            let r = scan_equiv(trials, max_len, cfg.train.seed)?;
            println!("{} trials, L <= {max_len}: max |y_rec - y_conv| = {:.3e}", r.trials, r.max_deviation);
            if !(r.max_deviation <= SCAN_EQUIV_TOL) {
                return Err(Error::Numerical(format!(
                    "recurrent and convolutional outputs differ by {:.3e}",
                    r.max_deviation
                )));
            }
            println!("pass");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
