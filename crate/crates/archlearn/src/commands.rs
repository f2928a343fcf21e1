//! Experiment drivers behind the `archlearn` subcommands.
//!
//! Every driver returns a serializable report; the binary writes it out and
//! maps errors to exit codes. All artifacts embed the resolved configuration
//! and its hash.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use archlearn_core::learn::{evaluate, suggest_lambdas_with_ratio, RegConfig, TrainState, Trainer};
use archlearn_core::nn::{Layer, Network};
use archlearn_core::surgery::{
    apply_plan, architecture_of, compress_svd, eligible_collapse_layers, equivalence_check, param_count, ArchReport,
    SurgeryPlan,
};
use archlearn_core::{Error as CoreError, SeededRng};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use crate::config::{ExperimentConfig, Splits};
use crate::error::{AppError, AppResult};
use crate::metrics::{load_metrics, save_metrics};

pub const MODEL_FILE: &str = "model.ckpt";
pub const PRUNED_FILE: &str = "pruned.ckpt";
pub const LAST_FINITE_FILE: &str = "last_finite.ckpt";
pub const METRICS_FILE: &str = "metrics.csv";
pub const REPORT_FILE: &str = "report.json";

/// Probes used to confirm that surgery preserved the trained function.
const EQUIVALENCE_PROBES: usize = 200;
const EQUIVALENCE_TOL: f64 = 1e-4;

/// Outcome of one training run followed by surgery.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    #[serde(flatten)]
    pub arch: ArchReport,
    /// `‖Φ‖` of the binarized trained network and of the surgered one.
    pub norm_before: usize,
    pub norm_after: usize,
    pub depth_before: usize,
    pub depth_after: usize,
    pub iterations: u64,
    pub val_acc: Option<f64>,
    /// Largest output difference between trained and surgered networks.
    pub surgery_deviation: f64,
    pub reg: RegConfig,
    pub config_hash: String,
    pub config: Value,
}

/// Where the trained network came from, for `run_train`.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Write artifacts here; nothing is written when absent.
    pub out: Option<PathBuf>,
    /// Continue from this checkpoint instead of starting afresh.
    pub resume: Option<PathBuf>,
    /// Progress lines on stderr.
    pub verbose: bool,
}

fn surgery_plan(cfg: &ExperimentConfig, trained: &Network) -> SurgeryPlan {
    let collapse_layers = if cfg.surgery.collapse_all_eligible {
        eligible_collapse_layers(trained)
    } else {
        cfg.surgery.collapse_layers.clone()
    };
    SurgeryPlan { prune: true, collapse_layers }
}

/// Fresh network for `cfg`; weights come from `init_checkpoint` when set.
pub fn build_network(cfg: &ExperimentConfig, splits: &Splits) -> AppResult<Network> {
    let spec = cfg.arch_spec()?;
    let mut net = spec.build(splits.train.sample_shape(), &cfg.train.init, &mut SeededRng::new(cfg.train.seed))?;
    if let Some(path) = &cfg.init_checkpoint {
        let src = load_checkpoint(path)?.network;
        copy_weights(&mut net, &src)
            .map_err(|m| AppError::Config(format!("init_checkpoint {}: {m}", path.display())))?;
    }
    Ok(net)
}

fn copy_weights(dst: &mut Network, src: &Network) -> Result<(), String> {
    if dst.layers().len() != src.layers().len() {
        return Err("layer count differs from `arch`".into());
    }
    for (i, (d, s)) in dst.layers_mut().iter_mut().zip(src.layers()).enumerate() {
        match (d, s) {
            (Layer::Dense(d), Layer::Dense(s)) if d.weights.shape() == s.weights.shape() => {
                d.weights = s.weights.clone();
                d.bias = s.bias.clone();
            }
            (Layer::Conv(d), Layer::Conv(s)) if d.kernels.shape() == s.kernels.shape() => {
                d.kernels = s.kernels.clone();
                d.bias = s.bias.clone();
            }
            (Layer::Pool(d), Layer::Pool(s)) if d == s => {}
            _ => return Err(format!("layer {i} does not match `arch`")),
        }
    }
    Ok(())
}

fn eval_set(splits: &Splits) -> Option<&archlearn_core::data::Dataset> {
    splits.test.as_ref().or(splits.val.as_ref())
}

/// Trains per `cfg`, prunes, collapses per the surgery plan and evaluates.
pub fn run_train(cfg: &ExperimentConfig, opts: &RunOptions) -> AppResult<RunReport> {
    cfg.validate()?;
    let provenance = cfg.provenance()?;
    let hash = cfg.hash()?;
    let reg = cfg.resolve_reg()?;
    let splits = cfg.load_data()?;
    let started = Instant::now();

    let mut trainer = match &opts.resume {
        None => Trainer::new(build_network(cfg, &splits)?, &splits.train, splits.val.as_ref(), cfg.train.clone(), reg)?,
        Some(path) => {
            let ck = load_checkpoint(path)?;
            let momentum = ck.momentum.ok_or_else(|| AppError::format(path, "checkpoint has no optimizer state"))?;
            let state = TrainState { iteration: ck.iteration, rng_state: ck.rng_state, momentum };
            Trainer::resume(ck.network, &splits.train, splits.val.as_ref(), cfg.train.clone(), reg, state)?
        }
    };
    if opts.verbose {
        eprintln!(
            "config {} | {} train samples, {} iterations, λ = {:?}",
            &hash[..12],
            splits.train.len(),
            trainer.total_iterations(),
            [reg.lambda1, reg.lambda2, reg.lambda3, reg.lambda4]
        );
    }
    let save_state = |t: &Trainer, name: &str| -> AppResult<()> {
        let Some(dir) = &opts.out else { return Ok(()) };
        let st = t.state();
        let ck = Checkpoint {
            network: t.network().clone(),
            iteration: st.iteration,
            rng_state: st.rng_state,
            momentum: Some(st.momentum),
            config: Some(provenance.clone()),
        };
        save_checkpoint(&dir.join(name), &ck)?;
        save_metrics(&dir.join(METRICS_FILE), &provenance, &hash, t.timeline())
    };

    let total = trainer.total_iterations();
    while trainer.iteration() < total {
        match trainer.step() {
            Ok(Some(r)) if opts.verbose => eprintln!(
                "iter {:>7} loss {:.4} R_b {:.3e} R_m {:.3e} phi {:?} val {}  [{:.0}s]",
                r.iteration,
                r.loss,
                r.r_binarize,
                r.r_complexity,
                r.phi,
                r.val_acc.map_or("-".into(), |a| format!("{:.4}", a)),
                started.elapsed().as_secs_f64()
            ),
            Ok(_) => {}
            Err(e @ CoreError::Diverged { .. }) => {
                save_state(&trainer, LAST_FINITE_FILE)?;
                return Err(e.into());
            }
            Err(e) => return Err(e.into()),
        }
    }
    trainer.run()?;
    save_state(&trainer, MODEL_FILE)?;
    let iterations = trainer.iteration();
    let (trained, timeline) = trainer.finish();

    let plan = surgery_plan(cfg, &trained);
    let mut after = apply_plan(&trained, &plan)?;
    after.round_to_storage();
    let deviation = equivalence_check(&trained, &after, EQUIVALENCE_PROBES, cfg.train.seed, EQUIVALENCE_TOL)?;
    let mut arch = ArchReport::new(&trained, &after, plan.collapse_layers.clone())?;
    if let Some(ds) = eval_set(&splits) {
        arch.acc_before = Some(evaluate(&trained, ds, None)?);
        arch.acc_after = Some(evaluate(&after, ds, None)?);
    }
    let phi_bin = timeline.last().map(|r| r.phi.clone()).unwrap_or_default();
    let report = RunReport {
        norm_before: phi_bin.iter().sum(),
        norm_after: architecture_of(&after).iter().sum(),
        depth_before: trained.parametric_indices().len(),
        depth_after: after.parametric_indices().len(),
        iterations,
        val_acc: timeline.last().and_then(|r| r.val_acc),
        surgery_deviation: deviation.max_deviation,
        reg,
        config_hash: hash.clone(),
        config: provenance.clone(),
        arch,
    };
    if let Some(dir) = &opts.out {
        let ck = Checkpoint {
            network: after,
            iteration: iterations,
            rng_state: 0,
            momentum: None,
            config: Some(provenance),
        };
        save_checkpoint(&dir.join(PRUNED_FILE), &ck)?;
        write_json(&dir.join(REPORT_FILE), &report)?;
    }
    if opts.verbose {
        eprintln!(
            "done in {:.0}s: phi {:?} -> {:?}, params {} -> {}, acc {:?} -> {:?}, surgery deviation {:.2e}",
            started.elapsed().as_secs_f64(),
            report.arch.phi_before,
            report.arch.phi_after,
            report.arch.params_before,
            report.arch.params_after,
            report.arch.acc_before,
            report.arch.acc_after,
            report.surgery_deviation
        );
    }
    Ok(report)
}

pub fn write_json(path: &Path, value: &impl Serialize) -> AppResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| AppError::io(dir, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| AppError::io(path, e))
}

/// Spearman rank correlation with average ranks for ties. `None` when either
/// side is constant or there are fewer than two points.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    }
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    (vx > 0.0 && vy > 0.0).then(|| cov / (vx * vy).sqrt())
}

/// How sweeps execute their runs.
#[derive(Debug, Clone)]
pub enum SweepMode {
    /// One after another in this process.
    Sequential,
    /// Up to `jobs` concurrent `archlearn train` child processes; each run
    /// owns its RNGs, so results match sequential mode.
    Processes { exe: PathBuf, config: PathBuf, overrides: Vec<String>, jobs: usize },
}

/// Runs `variants` (label, overrides) of `cfg`, each in `out/<label>`.
fn run_variants(
    cfg: &ExperimentConfig,
    variants: &[(String, Vec<String>)],
    out: &Path,
    mode: &SweepMode,
    verbose: bool,
) -> AppResult<Vec<RunReport>> {
    match mode {
        SweepMode::Sequential => variants
            .iter()
            .map(|(label, extra)| {
                let mut v = serde_json::to_value(cfg).expect("config serializes");
                crate::config::apply_overrides(&mut v, extra)?;
                let c: ExperimentConfig =
                    serde_json::from_value(v).map_err(|e| AppError::Config(format!("{label}: {e}")))?;
                if verbose {
                    eprintln!("== {label}");
                }
                run_train(&c, &RunOptions { out: Some(out.join(label)), resume: None, verbose })
            })
            .collect(),
        SweepMode::Processes { exe, config, overrides, jobs } => {
            let mut reports = Vec::with_capacity(variants.len());
            for chunk in variants.chunks((*jobs).max(1)) {
                let children = chunk
                    .iter()
                    .map(|(label, extra)| {
                        let mut cmd = std::process::Command::new(exe);
                        cmd.arg("train").arg("--config").arg(config).arg("--out").arg(out.join(label)).arg("--quiet");
                        for o in overrides.iter().chain(extra) {
                            cmd.arg("--set").arg(o);
                        }
                        cmd.spawn().map_err(|e| AppError::io(exe, e))
                    })
                    .collect::<AppResult<Vec<_>>>()?;
                for (mut child, (label, _)) in children.into_iter().zip(chunk) {
                    let status = child.wait().map_err(|e| AppError::io(exe, e))?;
                    if !status.success() {
                        return Err(AppError::Core(CoreError::Domain(format!("run `{label}` failed with {status}"))));
                    }
                    let path = out.join(label).join(REPORT_FILE);
                    let text = std::fs::read_to_string(&path).map_err(|e| AppError::io(&path, e))?;
                    reports.push(serde_json::from_str(&text).map_err(|e| AppError::format(&path, e.to_string()))?);
                }
            }
            Ok(reports)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSweepRow {
    pub k: usize,
    pub norm: usize,
    pub params: usize,
    pub test_error: Option<f64>,
    pub phi: Vec<usize>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSweep {
    pub rows: Vec<ClassSweepRow>,
    pub spearman_norm: Option<f64>,
    pub spearman_error: Option<f64>,
    pub config: Value,
}

/// Same hyper-parameters, growing number of classes.
pub fn sweep_classes(
    cfg: &ExperimentConfig,
    ks: &[usize],
    out: &Path,
    mode: &SweepMode,
    verbose: bool,
) -> AppResult<ClassSweep> {
    if ks.is_empty() {
        return Err(AppError::Config("empty class list".into()));
    }
    let variants: Vec<(String, Vec<String>)> =
        ks.iter().map(|k| (format!("k{k}"), vec![format!("data.classes={k}")])).collect();
    let reports = run_variants(cfg, &variants, out, mode, verbose)?;
    let rows: Vec<ClassSweepRow> = ks
        .iter()
        .zip(&reports)
        .map(|(&k, r)| ClassSweepRow {
            k,
            norm: r.norm_after,
            params: r.arch.params_after,
            test_error: r.arch.acc_after.map(|a| 1.0 - a),
            phi: r.arch.phi_after.clone(),
            config_hash: r.config_hash.clone(),
        })
        .collect();
    let kx: Vec<f64> = rows.iter().map(|r| r.k as f64).collect();
    let norms: Vec<f64> = rows.iter().map(|r| r.norm as f64).collect();
    let errs: Option<Vec<f64>> = rows.iter().map(|r| r.test_error).collect();
    let sweep = ClassSweep {
        spearman_norm: spearman(&kx, &norms),
        spearman_error: errs.and_then(|e| spearman(&kx, &e)),
        rows,
        config: template_provenance(cfg),
    };
    write_json(&out.join("sweep_classes.json"), &sweep)?;
    Ok(sweep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSweepRow {
    pub n: usize,
    pub initial_depth: usize,
    pub final_depth: usize,
    pub phi_after: Vec<usize>,
    pub acc_after: Option<f64>,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSweep {
    pub rows: Vec<DepthSweepRow>,
    pub config: Value,
}

/// Repeats the `var` block of the architecture template `n` times per run and
/// collapses every layer that learnt to be linear.
pub fn sweep_depth(
    cfg: &ExperimentConfig,
    var: &str,
    ns: &[usize],
    out: &Path,
    mode: &SweepMode,
    verbose: bool,
) -> AppResult<DepthSweep> {
    if ns.is_empty() {
        return Err(AppError::Config("empty repetition list".into()));
    }
    let variants: Vec<(String, Vec<String>)> = ns
        .iter()
        .map(|n| (format!("n{n}"), vec![format!("arch_vars.{var}={n}"), "surgery.collapse_all_eligible=true".into()]))
        .collect();
    let reports = run_variants(cfg, &variants, out, mode, verbose)?;
    let rows = ns
        .iter()
        .zip(&reports)
        .map(|(&n, r)| DepthSweepRow {
            n,
            initial_depth: r.depth_before,
            final_depth: r.depth_after,
            phi_after: r.arch.phi_after.clone(),
            acc_after: r.arch.acc_after,
            config_hash: r.config_hash.clone(),
        })
        .collect();
    let sweep = DepthSweep { rows, config: template_provenance(cfg) };
    write_json(&out.join("sweep_depth.json"), &sweep)?;
    Ok(sweep)
}

fn template_provenance(cfg: &ExperimentConfig) -> Value {
    let mut v = serde_json::to_value(cfg).expect("config serializes");
    v.as_object_mut().expect("config is an object").remove("output");
    v
}

/// Target rank for an SVD baseline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RankChoice {
    Rank(usize),
    /// Smallest rank whose compressed network has at least this many parameters.
    MatchParams(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvdReport {
    pub layer: usize,
    pub rank: usize,
    pub params_before: usize,
    pub params_after: usize,
    pub acc_before: Option<f64>,
    pub acc_after: Option<f64>,
    pub checkpoint: PathBuf,
    pub config_hash: String,
}

/// Parameter count after replacing dense layer `index` by a rank-`k` pair.
pub fn svd_param_count(net: &Network, index: usize, k: usize) -> AppResult<usize> {
    match net.layers().get(index) {
        Some(Layer::Dense(d)) => Ok(param_count(net) - d.weights.len() + k * (d.in_features() + d.out_features())),
        _ => Err(AppError::Config(format!("layer {index} is not a dense layer"))),
    }
}

pub fn svd_baseline(
    net: &Network,
    cfg: &ExperimentConfig,
    layer: usize,
    rank: RankChoice,
    checkpoint: &Path,
) -> AppResult<SvdReport> {
    let splits = cfg.load_data()?;
    let rank = match rank {
        RankChoice::Rank(k) => k,
        RankChoice::MatchParams(target) => {
            let Some(Layer::Dense(d)) = net.layers().get(layer) else {
                return Err(AppError::Config(format!("layer {layer} is not a dense layer")));
            };
            let max = d.in_features().min(d.out_features());
            let mut k = 1;
            while k < max && svd_param_count(net, layer, k)? < target {
                k += 1;
            }
            k
        }
    };
    let mut compressed = compress_svd(net, layer, rank)?;
    compressed.round_to_storage();
    let ds = eval_set(&splits);
    Ok(SvdReport {
        layer,
        rank,
        params_before: param_count(net),
        params_after: param_count(&compressed),
        acc_before: ds.map(|d| evaluate(net, d, None)).transpose()?,
        acc_after: ds.map(|d| evaluate(&compressed, d, None)).transpose()?,
        checkpoint: checkpoint.to_path_buf(),
        config_hash: cfg.hash()?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub path: PathBuf,
    pub records: usize,
    pub final_iteration: u64,
    pub final_loss: f64,
    pub final_phi: Vec<usize>,
    pub final_norm: usize,
    pub final_val_acc: Option<f64>,
    pub best_val_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunGroup {
    pub config: Option<Value>,
    pub runs: Vec<RunSummary>,
    pub mean_final_norm: f64,
    pub mean_final_val_acc: Option<f64>,
}

/// Merges metrics files by config hash; optionally writes the `Φ(t)` plot
/// data as `run,config_hash,iter,loss,phi_0,…`.
pub fn report(paths: &[PathBuf], plot: Option<&Path>) -> AppResult<BTreeMap<String, RunGroup>> {
    if paths.is_empty() {
        return Err(AppError::Config("report needs at least one metrics file".into()));
    }
    let mut groups: BTreeMap<String, RunGroup> = BTreeMap::new();
    let mut plot_rows: Vec<Vec<String>> = Vec::new();
    let mut width = 0;
    for (run, path) in paths.iter().enumerate() {
        let m = load_metrics(path)?;
        let last = m.records.last().ok_or_else(|| AppError::format(path, "no records"))?;
        if m.records.windows(2).any(|w| w[1].iteration <= w[0].iteration) {
            return Err(AppError::format(path, "iteration column is not increasing"));
        }
        let hash = m.config_hash.clone().unwrap_or_else(|| "unknown".into());
        let summary = RunSummary {
            path: path.clone(),
            records: m.records.len(),
            final_iteration: last.iteration,
            final_loss: last.loss,
            final_phi: last.phi.clone(),
            final_norm: last.phi.iter().sum(),
            final_val_acc: last.val_acc,
            best_val_acc: m.records.iter().filter_map(|r| r.val_acc).reduce(f64::max),
        };
        for r in &m.records {
            width = width.max(r.phi.len());
            let mut row = vec![run.to_string(), hash.clone(), r.iteration.to_string(), r.loss.to_string()];
            row.extend(r.phi.iter().map(|p| p.to_string()));
            plot_rows.push(row);
        }
        let g = groups.entry(hash).or_insert_with(|| RunGroup {
            config: m.config.clone(),
            runs: Vec::new(),
            mean_final_norm: 0.0,
            mean_final_val_acc: None,
        });
        g.runs.push(summary);
    }
    for g in groups.values_mut() {
        let n = g.runs.len() as f64;
        g.mean_final_norm = g.runs.iter().map(|r| r.final_norm as f64).sum::<f64>() / n;
        let accs: Option<Vec<f64>> = g.runs.iter().map(|r| r.final_val_acc).collect();
        g.mean_final_val_acc = accs.map(|a| a.iter().sum::<f64>() / n);
    }
    if let Some(plot) = plot {
        let mut w = csv::WriterBuilder::new()
            .flexible(true)
            .from_path(plot)
            .map_err(|e| AppError::format(plot, e.to_string()))?;
        let mut header = vec!["run".to_string(), "config_hash".into(), "iter".into(), "loss".into()];
        header.extend((0..width).map(|i| format!("phi_{i}")));
        let io = |e: csv::Error| AppError::format(plot, e.to_string());
        w.write_record(&header).map_err(io)?;
        for mut row in plot_rows {
            row.resize(header.len(), String::new());
            w.write_record(&row).map_err(io)?;
        }
        w.flush().map_err(|e| AppError::io(plot, e))?;
    }
    Ok(groups)
}

/// `suggest_lambdas` for an architecture string.
pub fn suggest(arch: &str, reference_width: usize, base_lambda3: f64, ratio: f64) -> AppResult<RegConfig> {
    let phi = archlearn_core::arch::ArchSpec::parse(arch)?.phi();
    Ok(suggest_lambdas_with_ratio(&phi, reference_width, base_lambda3, ratio))
}
