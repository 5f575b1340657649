//! Command-line front end: `divergence`, `flow` and `bench` subcommands.
//!
//! Exit codes: 0 on success (including non-converged solves, reported in the
//! output), 2 on invalid input, 3 on numerical failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Map, Value};

use crate::alloc;
use crate::cost::CostSpec;
use crate::divergence::{evaluate, Loss, LossValue, WarmStart};
use crate::error::{Error, Result};
use crate::flow::{run_flow, write_trajectory, FlowConfig, DEFAULT_RECORD_TIMES};
use crate::measure::{sample_unit_cube, DiscreteMeasure};
use crate::reduce::ReductionPlan;
use crate::solver::SolverParams;

pub const EXIT_OK: i32 = 0;
pub const EXIT_INVALID: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Environment variable read when `--threads` is absent.
pub const THREADS_ENV: &str = "SINKDIV_THREADS";

#[derive(Debug, Parser)]
#[command(name = "sinkdiv", version, about = "Entropic OT, Sinkhorn divergences and particle flows")]
pub struct Cli {
    /// Worker threads (default: SINKDIV_THREADS, then host parallelism).
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Evaluate a loss between two measure files.
    Divergence(DivergenceArgs),
    /// Run a particle gradient flow from A towards B.
    Flow(FlowArgs),
    /// Time a loss on random unit-cube clouds of several sizes.
    Bench(BenchArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Csv,
}

#[derive(Debug, Clone, Args)]
pub struct LossArgs {
    /// ot_eps, sinkhorn, hausdorff, mmd-energy, mmd-gaussian or mmd-laplacian.
    #[arg(long, default_value = "sinkhorn")]
    pub loss: String,
    /// Entropic strength, in cost units.
    #[arg(long, default_value_t = 0.1)]
    pub eps: f64,
    /// Cost exponent (1 or 2).
    #[arg(long, default_value_t = 2.0)]
    pub p: f64,
    /// Bandwidth of the Gaussian and Laplacian kernels.
    #[arg(long, default_value_t = 1.0)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1e-6)]
    pub tol: f64,
    #[arg(long, default_value_t = 1000)]
    pub max_iters: usize,
}

impl LossArgs {
    fn resolve(&self) -> Result<(Loss, SolverParams)> {
        let loss = Loss::parse(&self.loss, self.sigma)?;
        let params = SolverParams::new(CostSpec::new(self.p, self.eps)?)
            .with_tol(self.tol)
            .with_max_iters(self.max_iters);
        params.validate()?;
        Ok((loss, params))
    }
}

#[derive(Debug, Args)]
pub struct DivergenceArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
    /// Write the result here instead of stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FlowArgs {
    pub a: PathBuf,
    pub b: PathBuf,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long, default_value_t = 1e-2)]
    pub dt: f64,
    #[arg(long, default_value_t = 5.0)]
    pub t_end: f64,
    /// Comma-separated record times (default 0,0.25,0.5,1,5 clipped to t-end).
    #[arg(long, value_delimiter = ',')]
    pub record: Option<Vec<f64>>,
    /// Stored in the manifest.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for frames and manifest.
    #[arg(long, default_value = "flow_out")]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    pub format: Format,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Comma-separated numbers of atoms per measure.
    #[arg(long, value_delimiter = ',', default_value = "100,1000")]
    pub sizes: Vec<usize>,
    #[command(flatten)]
    pub loss: LossArgs,
    #[arg(long, default_value_t = 3)]
    pub repeats: usize,
    #[arg(long, default_value_t = 2)]
    pub dim: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    pub format: Format,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NumericalFailure(_) | Error::GradientUnreliable { .. } => EXIT_NUMERICAL,
        Error::FlowInterrupted { source, .. } => exit_code(source),
        _ => EXIT_INVALID,
    }
}

/// Parses `args` (program name first), runs the command and returns the exit
/// code. Results go to `out`, diagnostics to `err`.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let text = if code == 0 { e.to_string() } else { e.render().to_string() };
            if code == 0 {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return if code == 0 { EXIT_OK } else { EXIT_INVALID };
        }
    };
    match execute(cli, out) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_threads(flag: Option<usize>) -> Result<()> {
    let n = match flag {
        Some(n) => Some(n),
        None => match std::env::var(THREADS_ENV) {
            Ok(v) if !v.trim().is_empty() => Some(
                v.trim()
                    .parse()
                    .map_err(|_| Error::invalid(format!("{THREADS_ENV}={v} is not a thread count")))?,
            ),
            _ => None,
        },
    };
    if let Some(n) = n {
        if n == 0 {
            return Err(Error::invalid("thread count must be positive"));
        }
        // A pool already built by an earlier call in this process is kept.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

fn execute(cli: Cli, out: &mut dyn Write) -> Result<()> {
    configure_threads(cli.threads)?;
    match cli.command {
        Command::Divergence(args) => divergence(args, out),
        Command::Flow(args) => flow(args, out),
        Command::Bench(args) => bench(args, out),
    }
}

fn emit(text: String, path: Option<&PathBuf>, out: &mut dyn Write) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text)?,
        None => out.write_all(text.as_bytes())?,
    }
    Ok(())
}

fn load_pair(a: &PathBuf, b: &PathBuf) -> Result<(DiscreteMeasure, DiscreteMeasure)> {
    Ok((DiscreteMeasure::load(a)?, DiscreteMeasure::load(b)?))
}

fn divergence(args: DivergenceArgs, out: &mut dyn Write) -> Result<()> {
    let (loss, params) = args.loss.resolve()?;
    let (a, b) = load_pair(&args.a, &args.b)?;
    let (value, _) = evaluate(loss, &a, &b, &params, &mut WarmStart::default(), false)?;
    let text = match args.format {
        Format::Json => divergence_json(loss, &args.loss, &value) + "\n",
        Format::Csv => format!(
            "loss,value,eps,p,residual,converged\n{},{:?},{:?},{:?},{:?},{}\n",
            loss,
            value.value,
            args.loss.eps,
            args.loss.p,
            value.max_residual(),
            value.converged()
        ),
    };
    emit(text, args.out.as_ref(), out)
}

fn divergence_json(loss: Loss, flags: &LossArgs, value: &LossValue) -> String {
    let iterations: Map<String, Value> = value
        .diagnostics
        .iter()
        .map(|d| (d.problem.to_string(), json!(d.iterations)))
        .collect();
    let mut doc = json!({
        "loss": loss.name(),
        "value": value.value,
        "eps": flags.eps,
        "p": flags.p,
        "iterations": iterations,
        "residual": value.max_residual(),
        "converged": value.converged(),
    });
    if let Loss::Mmd(k) = loss {
        doc["sigma"] = json!(k.sigma());
    }
    doc.to_string()
}

fn flow(args: FlowArgs, out: &mut dyn Write) -> Result<()> {
    let (loss, params) = args.loss.resolve()?;
    let (a, b) = load_pair(&args.a, &args.b)?;
    let record = args.record.clone().unwrap_or_else(|| {
        DEFAULT_RECORD_TIMES
            .iter()
            .copied()
            .filter(|&t| t <= args.t_end)
            .collect()
    });
    let mut config = FlowConfig::new(loss, params)
        .with_dt(args.dt)
        .with_t_end(args.t_end)
        .with_record_times(record);
    if let Some(s) = args.seed {
        config = config.with_seed(s);
    }
    let traj = run_flow(&a, &b, &config)?;
    let manifest = write_trajectory(&traj, &config, &args.out)?;
    let final_loss = traj.loss_curve.last().map(|&(_, v)| v).unwrap_or(f64::NAN);
    let text = match args.format {
        Format::Json => {
            json!({
                "manifest": manifest.display().to_string(),
                "frames": traj.frames.len(),
                "steps": config.n_steps(),
                "final_loss": final_loss,
            })
            .to_string()
                + "\n"
        }
        Format::Csv => format!(
            "manifest,frames,steps,final_loss\n{},{},{},{:?}\n",
            manifest.display(),
            traj.frames.len(),
            config.n_steps(),
            final_loss
        ),
    };
    out.write_all(text.as_bytes())?;
    Ok(())
}

/// One row of `bench` output.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub n: usize,
    pub loss: String,
    pub mean_seconds: f64,
    pub std_seconds: f64,
    pub peak_bytes_estimate: usize,
}

fn bench(args: BenchArgs, out: &mut dyn Write) -> Result<()> {
    let (loss, params) = args.loss.resolve()?;
    if args.sizes.is_empty() || args.sizes.contains(&0) {
        return Err(Error::invalid("sizes must be positive"));
    }
    if args.repeats == 0 {
        return Err(Error::invalid("repeats must be positive"));
    }
    let mut rows = Vec::with_capacity(args.sizes.len());
    for &n in &args.sizes {
        let a = sample_unit_cube(n, args.dim, args.seed)?;
        let b = sample_unit_cube(n, args.dim, args.seed.wrapping_add(1))?;
        let mut times = Vec::with_capacity(args.repeats);
        let mut peak = 0usize;
        for _ in 0..args.repeats {
            alloc::reset();
            let base = alloc::current_bytes();
            let start = Instant::now();
            evaluate(loss, &a, &b, &params, &mut WarmStart::default(), false)?;
            times.push(start.elapsed().as_secs_f64());
            peak = peak.max(alloc::peak_bytes().saturating_sub(base));
        }
        if !alloc::is_active() {
            peak = scratch_estimate(n, args.dim, &params)?;
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let std = if times.len() > 1 {
            (times.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (times.len() - 1) as f64).sqrt()
        } else {
            0.0
        };
        rows.push(BenchRow {
            n,
            loss: loss.name().to_string(),
            mean_seconds: mean,
            std_seconds: std,
            peak_bytes_estimate: peak,
        });
    }
    let text = match args.format {
        Format::Csv => {
            let mut s = String::from("n,loss,mean_seconds,std_seconds,peak_bytes_estimate\n");
            for r in &rows {
                s += &format!(
                    "{},{},{:e},{:e},{}\n",
                    r.n, r.loss, r.mean_seconds, r.std_seconds, r.peak_bytes_estimate
                );
            }
            s
        }
        Format::Json => {
            let list: Vec<Value> = rows
                .iter()
                .map(|r| {
                    json!({
                        "n": r.n,
                        "loss": r.loss,
                        "mean_seconds": r.mean_seconds,
                        "std_seconds": r.std_seconds,
                        "peak_bytes_estimate": r.peak_bytes_estimate,
                    })
                })
                .collect();
            Value::Array(list).to_string() + "\n"
        }
    };
    emit(text, args.out.as_ref(), out)
}

/// Static bound used when no counting allocator is installed: the engine's
/// scratch for the three sub-problems plus the dual vectors.
fn scratch_estimate(n: usize, dim: usize, params: &SolverParams) -> Result<usize> {
    let plan = ReductionPlan::new(n, n, params.engine)?;
    Ok(3 * plan.scratch_bytes(dim) + 6 * n * std::mem::size_of::<f64>())
}
