//! Command-line front end: argument parsing, dispatch and exit codes.

pub mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use lipscope::harness::{self, FigureOptions, Scale, SweepConfig};
use lipscope::init::{self, InitSpec};
use lipscope::lab::{self, EstimateConfig};
use lipscope::layers::{self, LayerKind};
use lipscope::network;
use lipscope::optim::{self, OptimizerConfig, Schedule, ToyConfig, ToyModel};
use lipscope::Error;

use config::{Config, OptimizerKind, ScheduleKind};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Parser, Debug)]
#[command(
    name = "lipscope",
    version,
    about = "Lipschitz estimation, analytic bounds and landscape sweeps for deep networks",
    after_long_help = config::keys_help()
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalArgs {
    /// Configuration file (key = value with [section] headers).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for networks, sampling and data.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output file, or directory for `figures`.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Report errors as JSON on stderr.
    #[arg(long, global = true)]
    pub json_errors: bool,
    /// Skip unknown configuration keys instead of failing.
    #[arg(long, global = true)]
    pub lenient: bool,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Monte-Carlo Lipschitz estimate K_s of the configured network.
    Estimate,
    /// Composed analytic upper bound K_u of the configured network.
    Bound,
    /// Analytic layer Jacobians against central finite differences.
    JacobianCheck,
    /// One parameter sweep from the [sweep] section, as CSV.
    Sweep,
    /// Every figure sweep of a scale preset into a directory.
    Figures {
        /// smoke | desk | paper
        #[arg(long, default_value = "desk")]
        scale: String,
        /// Record wall time in the manifest (breaks byte-identical reruns).
        #[arg(long)]
        record_wall_time: bool,
    },
    /// Singular-value spectrum of one initialized matrix.
    InitStats,
    /// Toy training run tracing the top singular value of every weight.
    OptimSim,
    /// Forward and backward floating-point range checks.
    Principles,
}

impl Command {
    fn needs_config(&self) -> bool {
        matches!(
            self,
            Command::Estimate
                | Command::Bound
                | Command::Sweep
                | Command::OptimSim
                | Command::Principles
        )
    }
}

/// Failure with its exit code.
#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub kind: &'static str,
    pub message: String,
}

impl CliError {
    fn validation(message: impl Into<String>) -> Self {
        CliError {
            code: EXIT_VALIDATION,
            kind: "validation",
            message: message.into(),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        let (code, kind) = match &e {
            Error::InvalidParam(_)
            | Error::InvalidSpec(_)
            | Error::Shape { .. }
            | Error::Unsupported(_) => (EXIT_VALIDATION, "validation"),
            _ => (EXIT_RUNTIME, "runtime"),
        };
        CliError {
            code,
            kind,
            message: e.to_string(),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        Error::Io(e).into()
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        Error::Json(e).into()
    }
}

/// Parses `argv`, runs the command and returns the process exit code.
/// Results go to `stdout`; diagnostics go to `stderr` only on failure.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = argv.into_iter().map(Into::into).collect();
    let json_errors = argv.iter().any(|a| a == "--json-errors");
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = write!(stdout, "{}", e.render());
                return EXIT_OK;
            }
            let err = CliError::validation(e.render().to_string().trim_end());
            report(&err, json_errors, stderr);
            return err.code;
        }
    };
    match dispatch(&cli, stdout) {
        Ok(()) => EXIT_OK,
        Err(err) => {
            report(&err, cli.global.json_errors, stderr);
            err.code
        }
    }
}

fn report(err: &CliError, json: bool, stderr: &mut dyn Write) {
    if json {
        let v = serde_json::json!({
            "error": { "kind": err.kind, "code": err.code, "message": err.message }
        });
        let _ = writeln!(stderr, "{v}");
    } else {
        let _ = writeln!(stderr, "error: {}", err.message);
    }
}

fn configure_threads() -> Result<(), CliError> {
    let Ok(v) = std::env::var("LIPSCOPE_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        CliError::validation(format!(
            "LIPSCOPE_THREADS must be a positive integer, got '{v}'"
        ))
    })?;
    // A pool configured earlier in the same process is kept.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global();
    Ok(())
}

fn dispatch(cli: &Cli, stdout: &mut dyn Write) -> Result<(), CliError> {
    configure_threads()?;
    let g = &cli.global;
    let cfg = match &g.config {
        Some(path) => {
            if !path.is_file() {
                return Err(CliError::validation(format!(
                    "config file {} not found",
                    path.display()
                )));
            }
            // Lenient mode skips unknown keys silently: stderr stays empty on success.
            let (cfg, _skipped) = config::load_config(path, g.lenient)
                .map_err(|e| CliError::validation(format!("{}: {e}", path.display())))?;
            cfg
        }
        None if cli.command.needs_config() => {
            return Err(CliError::validation(
                "this subcommand requires --config <FILE>",
            ));
        }
        None => Config::default(),
    };
    let seed = g.seed.unwrap_or(0);
    match &cli.command {
        Command::Estimate => {
            let net = network::build(&cfg.network, seed)?;
            let est = lab::estimate_K(
                &net,
                &EstimateConfig {
                    seed,
                    ..cfg.estimator
                },
            )?;
            emit_json(&est, g.out.as_deref(), stdout)
        }
        Command::Bound => {
            let net = network::build(&cfg.network, seed)?;
            let report = lab::compose_network_bound(&net)?;
            let caveats: Vec<String> = report.caveats.iter().map(|c| format!("{c:?}")).collect();
            writeln!(stdout, "K_u = {}", report.product)?;
            writeln!(
                stdout,
                "caveats: {}",
                if caveats.is_empty() {
                    "none".to_string()
                } else {
                    caveats.join(", ")
                }
            )?;
            if let Some(path) = &g.out {
                write_atomic(path, &(serde_json::to_string_pretty(&report)? + "\n"))?;
            }
            Ok(())
        }
        Command::JacobianCheck => {
            let j = &cfg.jacobian;
            let kinds: Vec<LayerKind> = if j.layers.is_empty() {
                LayerKind::ALL.to_vec()
            } else {
                j.layers.clone()
            };
            #[derive(Serialize)]
            struct Entry {
                layer: &'static str,
                report: layers::JacobianReport,
            }
            let mut entries = Vec::new();
            for kind in kinds {
                let layer = layers::sample_layer(kind, j.dim, seed)?;
                let shape = layers::sample_input_shape(&layer, j.dim, j.batch);
                let x = lab::base_point(seed, 0, shape);
                let report = layers::check_jacobian_fd(&layer, &x, j.probes, j.step, seed)?;
                entries.push(Entry {
                    layer: kind.name(),
                    report,
                });
            }
            emit_json(&entries, g.out.as_deref(), stdout)
        }
        Command::Sweep => {
            let s = &cfg.sweep;
            let mut sc = SweepConfig::new(s.experiment, s.grid.clone(), cfg.network.clone());
            sc.families = s.families.clone();
            sc.estimator = cfg.estimator;
            sc.norms = s.norms.clone();
            sc.seeds = g.seed.map_or_else(|| s.seeds.clone(), |v| vec![v]);
            sc.bins = s.bins;
            sc.spectrum_sizes = s.spectrum_sizes.clone();
            let table = harness::run_sweep(&sc)?;
            match &g.out {
                Some(path) => harness::emit_csv(&table, path)?,
                None => harness::write_csv(&table, &mut *stdout)?,
            }
            Ok(())
        }
        Command::Figures {
            scale,
            record_wall_time,
        } => {
            let scale: Scale = scale.parse()?;
            let out = g
                .out
                .as_ref()
                .ok_or_else(|| CliError::validation("figures requires --out <DIR>"))?;
            let opts = FigureOptions {
                seeds: g.seed.map(|s| vec![s]),
                record_wall_time: *record_wall_time,
            };
            let manifest = harness::run_all_paper_figures(scale, out, &opts)?;
            writeln!(
                stdout,
                "wrote {} files to {}",
                manifest.files.len() + 1,
                out.display()
            )?;
            Ok(())
        }
        Command::InitStats => {
            let (n_in, n_out, bins) = cfg.init_stats;
            let spec = InitSpec {
                depth: cfg.network.depth,
                ..cfg.network.init
            };
            let w = init::init_matrix(&spec, n_in, n_out, seed)?;
            let r = init::spectrum_report(&w, bins)?;
            emit_json(&r, g.out.as_deref(), stdout)
        }
        Command::OptimSim => {
            let net = network::build(&cfg.network, seed)?;
            let mut model = ToyModel::new(net, cfg.optimizer.out_dim, seed)?;
            let toy = ToyConfig {
                steps: cfg.optimizer.steps,
                optimizer: optimizer_config(&cfg),
                seed,
                zero_grad: cfg.optimizer.zero_grad,
                clip: cfg.optimizer.clip,
            };
            let trace = optim::run_toy_training(&mut model, &toy)?;
            match &g.out {
                Some(path) => {
                    let mut buf = Vec::new();
                    optim::write_trace_csv(&trace, &mut buf)?;
                    write_atomic(path, std::str::from_utf8(&buf).expect("csv is utf-8"))?;
                    match trace.diverged_at {
                        Some(t) => writeln!(stdout, "diverged at step {t}")?,
                        None => writeln!(stdout, "completed {} steps", toy.steps)?,
                    }
                }
                None => optim::write_trace_csv(&trace, &mut *stdout)?,
            }
            Ok(())
        }
        Command::Principles => {
            let net = network::build(&cfg.network, seed)?;
            let x = lab::base_point(seed, 0, net.input_shape);
            let report = lab::check_principles(&net, &x, cfg.precision)?;
            emit_json(&report, g.out.as_deref(), stdout)
        }
    }
}

fn optimizer_config(cfg: &Config) -> OptimizerConfig {
    let o = &cfg.optimizer;
    let schedule = match o.schedule {
        ScheduleKind::Constant => Schedule::Constant { lr: o.lr },
        ScheduleKind::Cosine => Schedule::Cosine {
            lr: o.lr,
            total: o.steps,
        },
        ScheduleKind::Step => Schedule::Step {
            lr: o.lr,
            every: o.step_every,
            factor: o.step_factor,
        },
    };
    match o.kind {
        OptimizerKind::Sgd => OptimizerConfig::Sgd {
            beta: o.beta,
            weight_decay: o.weight_decay,
            schedule,
        },
        OptimizerKind::AdamW => OptimizerConfig::AdamW {
            beta1: o.beta1,
            beta2: o.beta2,
            weight_decay: o.weight_decay,
            eps: o.eps,
            schedule,
            bias_correction: o.bias_correction,
        },
    }
}

fn emit_json<T: Serialize>(
    value: &T,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)? + "\n";
    match out {
        Some(path) => write_atomic(path, &text),
        None => Ok(stdout.write_all(text.as_bytes())?),
    }
}

/// Writes through a sibling temporary file so a failed run leaves no
/// partial output.
fn write_atomic(path: &Path, text: &str) -> Result<(), CliError> {
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, text)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}
