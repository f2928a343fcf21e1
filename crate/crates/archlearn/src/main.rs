use std::path::{Path, PathBuf};
use std::process::ExitCode;

use archlearn::checkpoint::load_checkpoint;
use archlearn::commands::{self, RankChoice, RunOptions, SweepMode};
use archlearn::config::{load_config, load_template, ExperimentConfig};
use archlearn::error::{AppError, AppResult};
use clap::{Args, Parser, Subcommand};

/// Train networks that learn their own width and depth, then shrink them.
#[derive(Parser)]
#[command(name = "archlearn", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON experiment configuration.
    #[arg(long, short)]
    config: PathBuf,
    /// Override a config field, e.g. `--set train.lr=0.05` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory (default: the config's `output`, else runs/<hash>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// No progress output.
    #[arg(long, short)]
    quiet: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Run up to this many isolated `train` processes at once.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Subcommand)]
enum Command {
    /// Train, prune, collapse per plan; writes model.ckpt, pruned.ckpt,
    /// metrics.csv and report.json.
    Train {
        #[command(flatten)]
        args: ConfigArgs,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Repeat a run for several class counts with fixed hyper-parameters.
    SweepClasses {
        #[command(flatten)]
        sweep: SweepArgs,
        #[arg(long, value_delimiter = ',', default_value = "2,4,6,8,10")]
        classes: Vec<usize>,
    },
    /// Repeat a run for several repetition counts of the architecture template.
    SweepDepth {
        #[command(flatten)]
        sweep: SweepArgs,
        /// Template variable to vary.
        #[arg(long, default_value = "n")]
        var: String,
        #[arg(long, value_delimiter = ',', default_value = "3,5,7")]
        n: Vec<usize>,
    },
    /// Low-rank SVD compression of one dense layer of a trained checkpoint.
    SvdBaseline {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Configuration supplying the evaluation data.
        #[arg(long, short)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Layer index (pool layers count).
        #[arg(long)]
        layer: usize,
        #[arg(long, conflicts_with = "match_params", required_unless_present = "match_params")]
        rank: Option<usize>,
        /// Pick the smallest rank with at least this many parameters.
        #[arg(long)]
        match_params: Option<usize>,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge metrics CSVs by config hash.
    Report {
        metrics: Vec<PathBuf>,
        /// Consolidated JSON (default: stdout).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write iteration-vs-architecture plot data.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Heuristic regularization weights for an architecture.
    SuggestLambdas {
        #[arg(long)]
        arch: String,
        #[arg(long, default_value_t = 500)]
        reference_width: usize,
        #[arg(long, default_value_t = 1e-5)]
        base_lambda3: f64,
        #[arg(long, default_value_t = archlearn_core::learn::WIDTH_BINARIZE_RATIO)]
        ratio: f64,
    },
}

fn load(args: &ConfigArgs, template: bool) -> AppResult<(ExperimentConfig, PathBuf)> {
    let cfg = if template {
        load_template(&args.config, &args.overrides)?
    } else {
        load_config(&args.config, &args.overrides)?
    };
    let out = match args.out.clone().or_else(|| cfg.output.clone()) {
        Some(o) => o,
        None => {
            let hash = if template {
                archlearn::config::config_hash(&serde_json::to_value(&cfg).expect("config serializes"))
            } else {
                cfg.hash()?
            };
            Path::new("runs").join(&hash[..12])
        }
    };
    Ok((cfg, out))
}

fn sweep_mode(s: &SweepArgs) -> AppResult<SweepMode> {
    if s.jobs <= 1 {
        return Ok(SweepMode::Sequential);
    }
    let exe = std::env::current_exe().map_err(|e| AppError::io("current executable", e))?;
    Ok(SweepMode::Processes {
        exe,
        config: s.common.config.clone(),
        overrides: s.common.overrides.clone(),
        jobs: s.jobs,
    })
}

fn emit(value: &impl serde::Serialize, out: Option<&Path>) -> AppResult<()> {
    match out {
        Some(p) => commands::write_json(p, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value).expect("report serializes"));
            Ok(())
        }
    }
}

fn run(cli: Cli) -> AppResult<()> {
    match cli.command {
        Command::Train { args, resume } => {
            let (cfg, out) = load(&args, false)?;
            let report =
                commands::run_train(&cfg, &RunOptions { out: Some(out.clone()), resume, verbose: !args.quiet })?;
            if !args.quiet {
                println!("{}", out.join(commands::REPORT_FILE).display());
                println!("phi {:?} -> {:?}", report.arch.phi_before, report.arch.phi_after);
            }
        }
        Command::SweepClasses { sweep, classes } => {
            let (cfg, out) = load(&sweep.common, true)?;
            let s = commands::sweep_classes(&cfg, &classes, &out, &sweep_mode(&sweep)?, !sweep.common.quiet)?;
            println!("{:>3} {:>7} {:>9} {:>8}", "k", "|phi|", "params", "error");
            for r in &s.rows {
                let err = r.test_error.map_or("-".into(), |e| format!("{:.4}", e));
                println!("{:>3} {:>7} {:>9} {:>8}", r.k, r.norm, r.params, err);
            }
            println!("spearman(k, |phi|) = {:?}, spearman(k, error) = {:?}", s.spearman_norm, s.spearman_error);
        }
        Command::SweepDepth { sweep, var, n } => {
            let (cfg, out) = load(&sweep.common, true)?;
            let s = commands::sweep_depth(&cfg, &var, &n, &out, &sweep_mode(&sweep)?, !sweep.common.quiet)?;
            println!("{:>3} {:>8} {:>6} {:>8}", var, "initial", "final", "acc");
            for r in &s.rows {
                let acc = r.acc_after.map_or("-".into(), |a| format!("{:.4}", a));
                println!("{:>3} {:>8} {:>6} {:>8}", r.n, r.initial_depth, r.final_depth, acc);
            }
        }
        Command::SvdBaseline { checkpoint, config, overrides, layer, rank, match_params, out } => {
            let cfg = load_config(&config, &overrides)?;
            let net = load_checkpoint(&checkpoint)?.network;
            let choice = match (rank, match_params) {
                (Some(k), _) => RankChoice::Rank(k),
                (None, Some(p)) => RankChoice::MatchParams(p),
                (None, None) => unreachable!("clap requires one"),
            };
            let report = commands::svd_baseline(&net, &cfg, layer, choice, &checkpoint)?;
            emit(&report, out.as_deref())?;
        }
        Command::Report { metrics, out, plot } => {
            let groups = commands::report(&metrics, plot.as_deref())?;
            emit(&groups, out.as_deref())?;
        }
        Command::SuggestLambdas { arch, reference_width, base_lambda3, ratio } => {
            emit(&commands::suggest(&arch, reference_width, base_lambda3, ratio)?, None)?;
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
