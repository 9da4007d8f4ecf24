//! Command-line entry point: training, evaluation, gradient-variance
//! probing, trajectory sampling, and solver benchmarking.
//!
//! Every run is driven by a TOML config (unknown keys rejected) plus a
//! few flag overrides, and every artifact the commands emit embeds the
//! tool version, the seed, and a verbatim echo of the effective config,
//! so completed runs are self-describing. Errors print a single
//! machine-parsable JSON object `{code, message, context}` on stderr;
//! exit codes are 0 (success), 1 (usage/config), 2 (runtime).

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use sdebnn::brownian::{BrownianPath, SeedKey};
use sdebnn::data::{cauchy_two_obs, gen_toy1d, gen_two_moons, load_idx, Dataset, CAUCHY_TOY_SCALE};
use sdebnn::likelihood::{calibration, softmax_rows, Likelihood, Targets};
use sdebnn::model::SdeBnnModel;
use sdebnn::nets::{Activation, DriftNet, MlpDrift};
use sdebnn::sde::{solve, Estimator, SolverConfig, SolverMode};
use sdebnn::tensor::Tensor;
use sdebnn::train::{fit, fit_latent, load_checkpoint, save_checkpoint, Checkpoint, TrainConfig};
use sdebnn::variational::{elbo_value, grad_neg_elbo, pad_inputs, readout_values, ElboData};
use sdebnn::{Error, Result, VERSION};

/// Environment variable overriding the configured data directory.
const DATA_DIR_ENV: &str = "SDEBNN_DATA_DIR";

// ---------------------------------------------------------------------
// Run configuration (TOML)
// ---------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Task {
    Toy1d,
    Cauchy2,
    Twomoons,
    Mnist,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverToml {
    #[serde(default = "default_mode")]
    mode: SolverMode,
    #[serde(default = "default_steps")]
    steps: usize,
    #[serde(default = "default_rtol")]
    rtol: f64,
    #[serde(default = "default_atol")]
    atol: f64,
    #[serde(default = "default_max_steps")]
    max_steps: usize,
}

fn default_mode() -> SolverMode {
    SolverMode::Fixed
}
fn default_steps() -> usize {
    20
}
fn default_rtol() -> f64 {
    1e-3
}
fn default_atol() -> f64 {
    1e-4
}
fn default_max_steps() -> usize {
    1 << 14
}

impl Default for SolverToml {
    fn default() -> Self {
        SolverToml {
            mode: default_mode(),
            steps: default_steps(),
            rtol: default_rtol(),
            atol: default_atol(),
            max_steps: default_max_steps(),
        }
    }
}

impl SolverToml {
    fn to_config(&self) -> SolverConfig {
        SolverConfig {
            mode: self.mode,
            steps: self.steps,
            rtol: self.rtol,
            atol: self.atol,
            max_steps: self.max_steps,
        }
    }
}

/// The run config: training hyperparameters plus the task and its data
/// settings. Unknown keys are rejected so typos fail loudly.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfig {
    task: Task,
    #[serde(default)]
    seed: u64,
    #[serde(default = "default_epochs")]
    epochs: usize,
    #[serde(default = "default_batch_size")]
    batch_size: usize,
    #[serde(default = "default_lr")]
    lr: f64,
    #[serde(default = "default_beta")]
    beta: f64,
    #[serde(default = "default_estimator")]
    estimator: Estimator,
    #[serde(default = "default_train_samples")]
    train_samples: usize,
    /// Posterior samples for evaluation-time predictions.
    #[serde(default = "default_eval_samples")]
    eval_samples: usize,
    /// Prior diffusion scale; 0 selects the noise-free ODE ablation.
    #[serde(default = "default_sigma")]
    sigma: f64,
    /// Zero-initialized state dimensions appended to the inputs.
    #[serde(default = "default_augment_dims")]
    augment_dims: usize,
    /// Hidden-dynamics MLP widths (state -> widths -> state).
    #[serde(default)]
    hidden_widths: Vec<usize>,
    /// Drift-network bottleneck widths over the flattened weights.
    #[serde(default = "default_drift_widths")]
    drift_widths: Vec<usize>,
    /// Observation noise scale for the regression likelihoods.
    #[serde(default)]
    obs_scale: Option<f64>,
    /// Number of generated examples (toy1d / twomoons).
    #[serde(default = "default_dataset_size")]
    dataset_size: usize,
    /// Generator noise level (toy1d / twomoons).
    #[serde(default = "default_data_noise")]
    data_noise: f64,
    /// Standardize inputs with train-split statistics.
    #[serde(default = "default_true")]
    standardize: bool,
    /// Directory with IDX files (mnist); SDEBNN_DATA_DIR overrides.
    #[serde(default)]
    data_dir: Option<PathBuf>,
    #[serde(default)]
    solver: SolverToml,
}

fn default_epochs() -> usize {
    800
}
fn default_batch_size() -> usize {
    40
}
fn default_lr() -> f64 {
    1e-3
}
fn default_beta() -> f64 {
    1.0
}
fn default_estimator() -> Estimator {
    Estimator::Standard
}
fn default_train_samples() -> usize {
    1
}
fn default_eval_samples() -> usize {
    20
}
fn default_sigma() -> f64 {
    0.1
}
fn default_augment_dims() -> usize {
    2
}
fn default_drift_widths() -> Vec<usize> {
    vec![2, 128, 2]
}
fn default_dataset_size() -> usize {
    200
}
fn default_data_noise() -> f64 {
    0.05
}
fn default_true() -> bool {
    true
}

impl RunConfig {
    fn load(path: &Path, overrides: &Overrides) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        overrides.apply(&mut cfg)?;
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<()> {
        self.train_config().validate()?;
        self.solver.to_config().validate()?;
        if self.eval_samples == 0 {
            return Err(Error::Config("eval_samples must be positive".into()));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(Error::Config(format!(
                "sigma must be non-negative, got {}",
                self.sigma
            )));
        }
        if let Some(s) = self.obs_scale {
            if !(s.is_finite() && s > 0.0) {
                return Err(Error::Config(format!(
                    "obs_scale must be positive, got {s}"
                )));
            }
        }
        if self.task != Task::Cauchy2 && self.dataset_size < 2 {
            return Err(Error::Config("dataset_size must be at least 2".into()));
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            beta: self.beta,
            estimator: self.estimator,
            seed: self.seed,
            train_samples: self.train_samples,
        }
    }

    /// Observation-noise scale with per-task defaults.
    fn obs_scale(&self) -> f64 {
        self.obs_scale.unwrap_or(match self.task {
            Task::Cauchy2 => CAUCHY_TOY_SCALE,
            _ => 0.1,
        })
    }

    fn data_dir(&self) -> Result<PathBuf> {
        if let Ok(dir) = std::env::var(DATA_DIR_ENV) {
            return Ok(PathBuf::from(dir));
        }
        self.data_dir.clone().ok_or_else(|| {
            Error::Config(format!(
                "the mnist task needs data_dir in the config or {DATA_DIR_ENV} set"
            ))
        })
    }

    fn dataset(&self) -> Result<Option<Dataset>> {
        let mut data = match self.task {
            Task::Toy1d => gen_toy1d(self.dataset_size, self.data_noise, self.seed),
            Task::Twomoons => gen_two_moons(self.dataset_size, self.data_noise, self.seed),
            Task::Mnist => {
                let dir = self.data_dir()?;
                load_idx(
                    &dir.join("train-images-idx3-ubyte"),
                    &dir.join("train-labels-idx1-ubyte"),
                    0.1,
                    self.seed,
                )?
            }
            Task::Cauchy2 => return Ok(None),
        };
        if self.standardize {
            data.standardize();
        }
        Ok(Some(data))
    }

    fn model(&self) -> SdeBnnModel {
        match self.task {
            Task::Cauchy2 => SdeBnnModel::latent(
                DriftNet::Mlp(MlpDrift::new(1, &self.drift_widths, Activation::Tanh)),
                Likelihood::Cauchy {
                    scale: self.obs_scale(),
                },
                self.sigma,
                Tensor::vector(vec![0.0]),
            ),
            task => {
                let d_in = match task {
                    Task::Toy1d => 1,
                    Task::Twomoons => 2,
                    Task::Mnist => 784,
                    Task::Cauchy2 => unreachable!(),
                };
                let likelihood = match task {
                    Task::Toy1d => Likelihood::Gaussian {
                        scale: self.obs_scale(),
                    },
                    Task::Twomoons => Likelihood::Categorical { n_classes: 2 },
                    Task::Mnist => Likelihood::Categorical { n_classes: 10 },
                    Task::Cauchy2 => unreachable!(),
                };
                SdeBnnModel::supervised(
                    d_in + self.augment_dims,
                    &self.hidden_widths,
                    Activation::Tanh,
                    &self.drift_widths,
                    likelihood,
                    self.sigma,
                    self.seed,
                )
            }
        }
    }
}

// ---------------------------------------------------------------------
// Command line
// ---------------------------------------------------------------------

#[derive(Debug, Parser)]
#[command(
    name = "sdebnn",
    version,
    about = "SDE-weighted Bayesian neural networks"
)]
struct Cli {
    /// Worker threads for per-path Monte Carlo work (results are
    /// identical for any value; 1 is the reproducibility default).
    #[arg(long, global = true, default_value_t = 1)]
    workers: usize,
    #[command(subcommand)]
    command: Command,
}

/// Flag overrides applied on top of the config file.
#[derive(Debug, Clone, Default, Args)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// standard | fullmc | stl
    #[arg(long)]
    estimator: Option<String>,
    /// Fixed-step count override.
    #[arg(long)]
    steps: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(v) = self.seed {
            cfg.seed = v;
        }
        if let Some(v) = self.epochs {
            cfg.epochs = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = v;
        }
        if let Some(v) = self.batch_size {
            cfg.batch_size = v;
        }
        if let Some(s) = &self.estimator {
            cfg.estimator = Estimator::parse(s)?;
        }
        if let Some(v) = self.steps {
            cfg.solver.mode = SolverMode::Fixed;
            cfg.solver.steps = v;
        }
        Ok(())
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train a model; writes a checkpoint and a JSON-lines metric stream.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (created if missing).
        #[arg(long, default_value = "run")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Evaluate a checkpoint, optionally sweeping solver step counts.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// train | val
        #[arg(long, default_value = "val")]
        split: String,
        #[arg(long)]
        posterior_samples: Option<usize>,
        /// Comma-separated fixed step counts, e.g. 5,10,20,40.
        #[arg(long = "step-sweep")]
        step_sweep: Option<String>,
        /// Metrics JSON path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Per-estimator gradient-variance CSV (one series per estimator).
    Gradvar {
        #[arg(long)]
        config: PathBuf,
        /// Monte Carlo paths per estimator.
        #[arg(long, default_value_t = 64)]
        samples: usize,
        /// CSV path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Sample weight/state trajectories and predictive curves from a
    /// checkpoint.
    Sample {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 20)]
        paths: usize,
        /// Output directory (created if missing).
        #[arg(long, default_value = "samples")]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Compare backprop and adjoint gradients: wall time, retained
    /// states, agreement.
    Bench {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated fixed step counts (config steps if omitted).
        #[arg(long = "step-sweep")]
        step_sweep: Option<String>,
        /// Monte Carlo paths per configuration.
        #[arg(long, default_value_t = 4)]
        paths: usize,
        /// CSV path (stdout if omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
}

// ---------------------------------------------------------------------
// Error reporting and exit codes
// ---------------------------------------------------------------------

#[derive(Serialize)]
struct ErrorReport<'a> {
    code: &'a str,
    message: String,
    context: serde_json::Value,
}

fn error_code(e: &Error) -> (&'static str, u8) {
    match e {
        Error::Config(_) => ("config", 1),
        Error::Domain(_) => ("domain", 2),
        Error::Diverged { .. } => ("diverged", 2),
        Error::BudgetExceeded { .. } => ("budget_exceeded", 2),
        Error::Format { .. } => ("format", 2),
        Error::Checkpoint(_) => ("checkpoint", 2),
        Error::Io(_) => ("io", 2),
    }
}

fn error_context(e: &Error, command: &str) -> serde_json::Value {
    let mut ctx = serde_json::json!({ "command": command });
    match e {
        Error::Diverged { t, norm } => {
            ctx["t"] = (*t).into();
            ctx["norm"] = (*norm).into();
        }
        Error::BudgetExceeded { max_steps, t } => {
            ctx["max_steps"] = (*max_steps).into();
            ctx["t"] = (*t).into();
        }
        Error::Format { path, offset, .. } => {
            ctx["path"] = path.display().to_string().into();
            ctx["offset"] = (*offset).into();
        }
        _ => {}
    }
    ctx
}

fn report_error(e: &Error, command: &str) -> ExitCode {
    let (code, exit) = error_code(e);
    let report = ErrorReport {
        code,
        message: e.to_string(),
        context: error_context(e, command),
    };
    eprintln!("{}", serde_json::to_string(&report).unwrap());
    ExitCode::from(exit)
}

fn main() -> ExitCode {
    // clap prints usage and exits 2 by default; remap to the contract's 1.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let report = ErrorReport {
                    code: "usage",
                    message: e.to_string(),
                    context: serde_json::json!({}),
                };
                eprintln!("{}", serde_json::to_string(&report).unwrap());
                return ExitCode::from(1);
            }
            // --help / --version
            print!("{e}");
            return ExitCode::SUCCESS;
        }
    };
    if cli.workers == 0 {
        let report = ErrorReport {
            code: "usage",
            message: "--workers must be at least 1".into(),
            context: serde_json::json!({}),
        };
        eprintln!("{}", serde_json::to_string(&report).unwrap());
        return ExitCode::from(1);
    }
    let name = command_name(&cli.command);
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => report_error(&e, name),
    }
}

fn command_name(c: &Command) -> &'static str {
    match c {
        Command::Train { .. } => "train",
        Command::Eval { .. } => "eval",
        Command::Gradvar { .. } => "gradvar",
        Command::Sample { .. } => "sample",
        Command::Bench { .. } => "bench",
    }
}

fn run(cli: Cli) -> Result<()> {
    let workers = cli.workers;
    match cli.command {
        Command::Train {
            config,
            out,
            overrides,
        } => cmd_train(&RunConfig::load(&config, &overrides)?, &out),
        Command::Eval {
            config,
            checkpoint,
            split,
            posterior_samples,
            step_sweep,
            out,
            overrides,
        } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let sweep = parse_sweep(step_sweep.as_deref())?;
            cmd_eval(
                &cfg,
                &checkpoint,
                &split,
                posterior_samples,
                sweep,
                out.as_deref(),
                workers,
            )
        }
        Command::Gradvar {
            config,
            samples,
            out,
            overrides,
        } => cmd_gradvar(
            &RunConfig::load(&config, &overrides)?,
            samples,
            out.as_deref(),
            workers,
        ),
        Command::Sample {
            config,
            checkpoint,
            paths,
            out,
            overrides,
        } => cmd_sample(
            &RunConfig::load(&config, &overrides)?,
            &checkpoint,
            paths,
            &out,
        ),
        Command::Bench {
            config,
            step_sweep,
            paths,
            out,
            overrides,
        } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let sweep = parse_sweep(step_sweep.as_deref())?;
            cmd_bench(&cfg, sweep, paths, out.as_deref(), workers)
        }
    }
}

fn parse_sweep(s: Option<&str>) -> Result<Option<Vec<usize>>> {
    let Some(s) = s else { return Ok(None) };
    let mut steps = Vec::new();
    for part in s.split(',') {
        let n: usize = part
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("bad step count '{part}' in sweep")))?;
        if n == 0 {
            return Err(Error::Config("step counts must be positive".into()));
        }
        steps.push(n);
    }
    Ok(Some(steps))
}

// ---------------------------------------------------------------------
// Artifact headers
// ---------------------------------------------------------------------

/// `{version, seed, config}` echoed into every artifact.
#[derive(Serialize)]
struct Provenance<'a> {
    version: &'a str,
    seed: u64,
    config: &'a RunConfig,
}

fn provenance(cfg: &RunConfig) -> Provenance<'_> {
    Provenance {
        version: VERSION,
        seed: cfg.seed,
        config: cfg,
    }
}

/// CSV artifacts carry the same provenance as `#`-prefixed header lines.
fn write_csv_header(w: &mut dyn Write, cfg: &RunConfig) -> Result<()> {
    writeln!(w, "# version={VERSION}")?;
    writeln!(w, "# seed={}", cfg.seed)?;
    let echo = serde_json::to_string(cfg)
        .map_err(|e| Error::Config(format!("config echo serialization: {e}")))?;
    writeln!(w, "# config={echo}")?;
    Ok(())
}

fn write_json(path: Option<&Path>, value: &serde_json::Value) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Config(format!("artifact serialization: {e}")))?;
    match path {
        Some(p) => {
            fs::write(p, text + "\n")?;
        }
        None => println!("{text}"),
    }
    Ok(())
}

// ---------------------------------------------------------------------
// Parallel per-path map (order-independent reduction)
// ---------------------------------------------------------------------

/// Evaluate `f(0..n)` across `workers` threads. Results are collected by
/// index and consumed in index order, so the output is identical for any
/// worker count.
fn parallel_paths<T, F>(workers: usize, n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if workers <= 1 || n <= 1 {
        return (0..n).map(&f).collect();
    }
    let slots: Vec<Mutex<Option<Result<T>>>> = (0..n).map(|_| Mutex::new(None)).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    std::thread::scope(|scope| {
        for _ in 0..workers.min(n) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                *slots[i].lock().unwrap() = Some(f(i));
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("worker finished every slot"))
        .collect()
}

// ---------------------------------------------------------------------
// train
// ---------------------------------------------------------------------

fn cmd_train(cfg: &RunConfig, out: &Path) -> Result<()> {
    fs::create_dir_all(out)?;
    let train_cfg = cfg.train_config();
    let solver = cfg.solver.to_config();
    let mut model = cfg.model();

    let metrics_path = out.join("metrics.jsonl");
    let mut log = BufWriter::new(File::create(&metrics_path)?);
    // first line: provenance header; the rest: one record per epoch
    serde_json::to_writer(&mut log, &provenance(cfg))
        .map_err(|e| Error::Config(format!("metric header serialization: {e}")))?;
    writeln!(log)?;

    let report = match cfg.task {
        Task::Cauchy2 => {
            let obs = cauchy_two_obs();
            fit_latent(&mut model, &obs, &solver, &train_cfg, Some(&mut log))?
        }
        _ => {
            let data = cfg.dataset()?.expect("supervised task has a dataset");
            fit(&mut model, &data, &solver, &train_cfg, Some(&mut log))?
        }
    };
    log.flush()?;

    let ckpt = Checkpoint::new(
        &model,
        &report.adam,
        report.global_step,
        &train_cfg,
        &solver,
    );
    save_checkpoint(&out.join("checkpoint.json"), &ckpt)?;

    let summary = serde_json::json!({
        "version": VERSION,
        "seed": cfg.seed,
        "config": cfg,
        "final_loss": report.final_loss,
        "final_lr": report.final_lr,
        "global_step": report.global_step,
        "lr_halvings": report.lr_halvings,
        "epochs_run": report.records.len(),
        "checkpoint": out.join("checkpoint.json"),
        "metrics": metrics_path,
    });
    write_json(Some(&out.join("run.json")), &summary)?;
    println!("{}", serde_json::to_string(&summary).unwrap());
    Ok(())
}

// ---------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------

fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: &str,
    posterior_samples: Option<usize>,
    step_sweep: Option<Vec<usize>>,
    out: Option<&Path>,
    workers: usize,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let n_samples = posterior_samples.unwrap_or(cfg.eval_samples);
    if n_samples == 0 {
        return Err(Error::Config("posterior_samples must be positive".into()));
    }
    let solvers: Vec<SolverConfig> = match step_sweep {
        Some(steps) => steps.into_iter().map(SolverConfig::fixed).collect(),
        None => vec![ckpt.solver],
    };
    // evaluation paths live far above any training path id
    let base = 1u64 << 32;

    let mut rows = Vec::new();
    for solver in &solvers {
        solver.validate()?;
        let row = match cfg.task {
            Task::Cauchy2 => eval_latent(cfg, &ckpt.model, solver, n_samples, base, workers)?,
            _ => {
                let data = cfg.dataset()?.expect("supervised task has a dataset");
                let idx = match split {
                    "train" => &data.train_idx,
                    "val" => &data.val_idx,
                    other => {
                        return Err(Error::Config(format!(
                            "unknown split '{other}' (expected train or val)"
                        )))
                    }
                };
                if idx.is_empty() {
                    return Err(Error::Config(format!("split '{split}' is empty")));
                }
                let inputs = data.select_inputs(idx);
                let targets = data.targets.select(idx);
                eval_supervised(
                    cfg,
                    &ckpt.model,
                    solver,
                    &inputs,
                    &targets,
                    n_samples,
                    base,
                    workers,
                )?
            }
        };
        rows.push(row);
    }

    let report = serde_json::json!({
        "version": VERSION,
        "seed": cfg.seed,
        "config": cfg,
        "checkpoint": checkpoint,
        "split": split,
        "posterior_samples": n_samples,
        "rows": rows,
    });
    write_json(out, &report)
}

/// Posterior-predictive class probabilities, path-parallel. Summation is
/// in path order, so the result matches the sequential computation.
fn predict_probs_parallel(
    model: &SdeBnnModel,
    inputs: &Tensor,
    solver: &SolverConfig,
    seed: u64,
    base: u64,
    n_samples: usize,
    workers: usize,
) -> Result<Tensor> {
    let n_classes = match model.likelihood {
        Likelihood::Categorical { n_classes } => n_classes,
        _ => unreachable!("classification eval requires a categorical likelihood"),
    };
    let h0 = pad_inputs(inputs, model.state_dim());
    let n = inputs.shape()[0];
    let mats = parallel_paths(workers, n_samples, |k| {
        let path = BrownianPath::new(
            SeedKey {
                seed,
                path_id: base + k as u64,
            },
            model.weight_dim(),
        );
        let traj = solve(model, Some(&h0), &path, solver, false)?;
        Ok(softmax_rows(&readout_values(
            model,
            traj.final_state.h.as_ref().unwrap(),
        )))
    })?;
    let mut acc = Tensor::zeros(vec![n, n_classes]);
    for m in &mats {
        acc.add_assign(m);
    }
    Ok(acc
        .scale(1.0 / n_samples as f64)
        .reshape(vec![n, n_classes]))
}

/// Posterior-mean regression predictions, path-parallel.
fn predict_mean_parallel(
    model: &SdeBnnModel,
    inputs: &Tensor,
    solver: &SolverConfig,
    seed: u64,
    base: u64,
    n_samples: usize,
    workers: usize,
) -> Result<Vec<f64>> {
    let h0 = pad_inputs(inputs, model.state_dim());
    let n = inputs.shape()[0];
    let outs = parallel_paths(workers, n_samples, |k| {
        let path = BrownianPath::new(
            SeedKey {
                seed,
                path_id: base + k as u64,
            },
            model.weight_dim(),
        );
        let traj = solve(model, Some(&h0), &path, solver, false)?;
        Ok(readout_values(model, traj.final_state.h.as_ref().unwrap()))
    })?;
    let mut acc = vec![0.0; n];
    for out in &outs {
        for i in 0..n {
            acc[i] += out.data()[i];
        }
    }
    for v in &mut acc {
        *v /= n_samples as f64;
    }
    Ok(acc)
}

#[allow(clippy::too_many_arguments)]
fn eval_supervised(
    cfg: &RunConfig,
    model: &SdeBnnModel,
    solver: &SolverConfig,
    inputs: &Tensor,
    targets: &Targets,
    n_samples: usize,
    base: u64,
    workers: usize,
) -> Result<serde_json::Value> {
    let steps_label = solver_label(solver);
    match targets {
        Targets::Class(labels) => {
            let probs =
                predict_probs_parallel(model, inputs, solver, cfg.seed, base, n_samples, workers)?;
            let report = calibration(&probs, labels);
            let mut row = serde_json::to_value(&report)
                .map_err(|e| Error::Config(format!("metrics serialization: {e}")))?;
            row["steps"] = steps_label;
            Ok(row)
        }
        Targets::Real(ys) => {
            let preds =
                predict_mean_parallel(model, inputs, solver, cfg.seed, base, n_samples, workers)?;
            let n = ys.len() as f64;
            let mse = preds
                .iter()
                .zip(ys)
                .map(|(p, y)| (p - y) * (p - y))
                .sum::<f64>()
                / n;
            let scale = cfg.obs_scale();
            let nll = preds
                .iter()
                .zip(ys)
                .map(|(p, y)| {
                    let z = (y - p) / scale;
                    0.5 * z * z + (scale * (2.0 * std::f64::consts::PI).sqrt()).ln()
                })
                .sum::<f64>()
                / n;
            Ok(serde_json::json!({
                "steps": steps_label,
                "mse": mse,
                "nll": nll,
            }))
        }
    }
}

fn eval_latent(
    cfg: &RunConfig,
    model: &SdeBnnModel,
    solver: &SolverConfig,
    n_samples: usize,
    base: u64,
    workers: usize,
) -> Result<serde_json::Value> {
    let obs = cauchy_two_obs();
    let data = ElboData::PathObs { observations: &obs };
    let breakdowns = parallel_paths(workers, n_samples, |k| {
        let path = BrownianPath::new(
            SeedKey {
                seed: cfg.seed,
                path_id: base + k as u64,
            },
            model.weight_dim(),
        );
        elbo_value(model, cfg.estimator, &data, &path, solver, cfg.beta)
    })?;
    let n = n_samples as f64;
    let mean = |f: fn(&sdebnn::variational::ElboBreakdown) -> f64| {
        breakdowns.iter().map(f).sum::<f64>() / n
    };
    Ok(serde_json::json!({
        "steps": solver_label(solver),
        "elbo": mean(|b| b.value),
        "loglik": mean(|b| b.loglik),
        "kl": mean(|b| b.kl),
    }))
}

fn solver_label(solver: &SolverConfig) -> serde_json::Value {
    match solver.mode {
        SolverMode::Fixed => solver.steps.into(),
        SolverMode::Adaptive => {
            format!("adaptive(rtol={},atol={})", solver.rtol, solver.atol).into()
        }
    }
}

// ---------------------------------------------------------------------
// gradvar
// ---------------------------------------------------------------------

/// The gradient-variance objective: one training batch for supervised
/// tasks, the two Cauchy observations for the latent toy.
struct ProbeData {
    inputs: Option<Tensor>,
    targets: Option<Targets>,
    observations: Vec<(f64, f64)>,
    dataset_size: usize,
}

impl ProbeData {
    fn build(cfg: &RunConfig) -> Result<Self> {
        match cfg.dataset()? {
            Some(data) => {
                let take = cfg.batch_size.min(data.train_idx.len());
                let idx = &data.train_idx[..take];
                Ok(ProbeData {
                    inputs: Some(data.select_inputs(idx)),
                    targets: Some(data.targets.select(idx)),
                    observations: Vec::new(),
                    dataset_size: data.train_idx.len(),
                })
            }
            None => Ok(ProbeData {
                inputs: None,
                targets: None,
                observations: cauchy_two_obs(),
                dataset_size: 2,
            }),
        }
    }

    fn elbo_data(&self) -> ElboData<'_> {
        match (&self.inputs, &self.targets) {
            (Some(inputs), Some(targets)) => ElboData::Supervised {
                inputs,
                targets,
                dataset_size: self.dataset_size,
            },
            _ => ElboData::PathObs {
                observations: &self.observations,
            },
        }
    }
}

fn cmd_gradvar(cfg: &RunConfig, samples: usize, out: Option<&Path>, workers: usize) -> Result<()> {
    if samples < 2 {
        return Err(Error::Config(
            "gradient variance needs at least 2 samples".into(),
        ));
    }
    let model = cfg.model();
    let solver = cfg.solver.to_config();
    let probe = ProbeData::build(cfg)?;

    let mut lines = Vec::new();
    for estimator in Estimator::ALL {
        let data = probe.elbo_data();
        let per_path = parallel_paths(workers, samples, |k| {
            let path = BrownianPath::new(
                SeedKey {
                    seed: cfg.seed,
                    path_id: k as u64,
                },
                model.weight_dim(),
            );
            let report = grad_neg_elbo(&model, estimator, &data, &path, &solver, cfg.beta, false)?;
            let flat: Vec<f64> = report
                .grads
                .as_map()
                .values()
                .flat_map(|t| t.data().iter().copied())
                .collect();
            Ok((flat, report.loss))
        })?;

        let dim = per_path[0].0.len();
        let n = samples as f64;
        let mut mean = vec![0.0; dim];
        for (flat, _) in &per_path {
            for (m, g) in mean.iter_mut().zip(flat) {
                *m += g / n;
            }
        }
        let mut total_variance = 0.0;
        let mut norm_mean = 0.0;
        let mut norms = Vec::with_capacity(samples);
        for (flat, _) in &per_path {
            for (m, g) in mean.iter().zip(flat) {
                total_variance += (g - m) * (g - m) / (n - 1.0);
            }
            let norm = flat.iter().map(|g| g * g).sum::<f64>().sqrt();
            norm_mean += norm / n;
            norms.push(norm);
        }
        let grad_norm_variance = norms
            .iter()
            .map(|x| (x - norm_mean) * (x - norm_mean))
            .sum::<f64>()
            / (n - 1.0);
        let mean_elbo = per_path.iter().map(|(_, l)| -l).sum::<f64>() / n;

        lines.push(format!(
            "{},{},{},{},{},{},{}",
            estimator.name(),
            samples,
            norm_mean,
            grad_norm_variance,
            total_variance,
            total_variance / dim as f64,
            mean_elbo
        ));
    }

    emit_csv(
        out,
        cfg,
        "estimator,n_samples,mean_grad_norm,grad_norm_variance,total_variance,mean_component_variance,mean_elbo",
        &lines,
    )
}

fn emit_csv(out: Option<&Path>, cfg: &RunConfig, header: &str, lines: &[String]) -> Result<()> {
    let mut buf = Vec::new();
    write_csv_header(&mut buf, cfg)?;
    writeln!(buf, "{header}")?;
    for line in lines {
        writeln!(buf, "{line}")?;
    }
    match out {
        Some(p) => fs::write(p, buf)?,
        None => std::io::stdout().write_all(&buf)?,
    }
    Ok(())
}

// ---------------------------------------------------------------------
// sample
// ---------------------------------------------------------------------

fn cmd_sample(cfg: &RunConfig, checkpoint: &Path, paths: usize, out: &Path) -> Result<()> {
    if paths == 0 {
        return Err(Error::Config("paths must be positive".into()));
    }
    let ckpt = load_checkpoint(checkpoint)?;
    let model = &ckpt.model;
    let solver = ckpt.solver;
    fs::create_dir_all(out)?;

    // representative initial state for the hidden dynamics: the first
    // training input
    let dataset = cfg.dataset()?;
    let h0 = dataset.as_ref().map(|d| {
        let first = d.train_idx[0];
        pad_inputs(&d.select_inputs(&[first]), model.state_dim())
    });

    let base = 1u64 << 33;
    let mut lines = Vec::new();
    for k in 0..paths {
        let path = BrownianPath::new(
            SeedKey {
                seed: cfg.seed,
                path_id: base + k as u64,
            },
            model.weight_dim(),
        );
        let traj = solve(model, h0.as_ref(), &path, &solver, true)?;
        for (t, state) in traj.times.iter().zip(&traj.states) {
            let w = state.w.data();
            let (h_first, h_norm) = match &state.h {
                Some(h) => (format!("{}", h.data()[0]), format!("{}", h.norm())),
                None => (String::new(), String::new()),
            };
            lines.push(format!(
                "{k},{t},{},{},{h_first},{h_norm},{},{}",
                w[0],
                state.w.norm(),
                state.kl,
                state.mart
            ));
        }
    }
    let mut traj_file = BufWriter::new(File::create(out.join("trajectories.csv"))?);
    write_csv_header(&mut traj_file, cfg)?;
    writeln!(traj_file, "path,t,w_first,w_norm,h_first,h_norm,kl,mart")?;
    for line in &lines {
        writeln!(traj_file, "{line}")?;
    }
    traj_file.flush()?;

    // posterior-predictive curves for scalar-input regression
    if let (Some(data), Likelihood::Gaussian { .. }) = (&dataset, &model.likelihood) {
        if data.features() == 1 {
            let grid: Vec<f64> = (0..201).map(|i| -3.0 + 6.0 * i as f64 / 200.0).collect();
            // the dataset is already standardized; the grid covers its
            // standardized range directly
            let inputs = Tensor::matrix(201, 1, grid.clone());
            let h0 = pad_inputs(&inputs, model.state_dim());
            let mut columns: Vec<Vec<f64>> = Vec::with_capacity(paths);
            for k in 0..paths {
                let path = BrownianPath::new(
                    SeedKey {
                        seed: cfg.seed,
                        path_id: base + k as u64,
                    },
                    model.weight_dim(),
                );
                let traj = solve(model, Some(&h0), &path, &solver, false)?;
                let preds = readout_values(model, traj.final_state.h.as_ref().unwrap());
                columns.push(preds.data().to_vec());
            }
            let mut pred_file = BufWriter::new(File::create(out.join("predictive.csv"))?);
            write_csv_header(&mut pred_file, cfg)?;
            let header: Vec<String> = std::iter::once("x".to_string())
                .chain(std::iter::once("mean".to_string()))
                .chain((0..paths).map(|k| format!("sample_{k}")))
                .collect();
            writeln!(pred_file, "{}", header.join(","))?;
            for (i, x) in grid.iter().enumerate() {
                let mean: f64 = columns.iter().map(|c| c[i]).sum::<f64>() / paths as f64;
                let mut row = format!("{x},{mean}");
                for c in &columns {
                    row.push(',');
                    row.push_str(&format!("{}", c[i]));
                }
                writeln!(pred_file, "{row}")?;
            }
            pred_file.flush()?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------
// bench
// ---------------------------------------------------------------------

fn cmd_bench(
    cfg: &RunConfig,
    step_sweep: Option<Vec<usize>>,
    paths: usize,
    out: Option<&Path>,
    workers: usize,
) -> Result<()> {
    if paths == 0 {
        return Err(Error::Config("paths must be positive".into()));
    }
    let model = cfg.model();
    let probe = ProbeData::build(cfg)?;
    let steps = step_sweep.unwrap_or_else(|| vec![cfg.solver.steps]);

    let mut lines = Vec::new();
    for &n_steps in &steps {
        let solver = SolverConfig::fixed(n_steps);
        let data = probe.elbo_data();
        let reports = parallel_paths(workers, paths, |k| {
            let path = BrownianPath::new(
                SeedKey {
                    seed: cfg.seed,
                    path_id: k as u64,
                },
                model.weight_dim(),
            );
            let bp = grad_neg_elbo(
                &model,
                cfg.estimator,
                &data,
                &path,
                &solver,
                cfg.beta,
                false,
            )?;
            let adj = grad_neg_elbo(&model, cfg.estimator, &data, &path, &solver, cfg.beta, true)?;
            Ok((bp, adj))
        })?;

        for (method, pick) in [("backprop", 0usize), ("adjoint", 1)] {
            let mean_wall = reports
                .iter()
                .map(|(bp, adj)| if pick == 0 { bp } else { adj }.wall_seconds)
                .sum::<f64>()
                / paths as f64;
            let peak = reports
                .iter()
                .map(|(bp, adj)| if pick == 0 { bp } else { adj }.peak_retained_states)
                .max()
                .unwrap();
            let agreement = reports
                .iter()
                .map(|(bp, adj)| adj.grads.max_rel_err(&bp.grads, 1e-12))
                .fold(0.0f64, f64::max);
            let rel = if method == "backprop" { 0.0 } else { agreement };
            lines.push(format!("{n_steps},{method},{mean_wall},{peak},{rel}"));
        }
    }

    emit_csv(
        out,
        cfg,
        "steps,method,mean_wall_seconds,peak_retained_states,max_rel_err_vs_backprop",
        &lines,
    )
}
