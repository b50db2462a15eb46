//! Command-line driver: simulation, fitting, prediction, MVM benchmarking
//! and self-checks, with CSV I/O and JSON reports. Coordinates are
//! rescaled into the unit box internally and every reported estimate is mapped
//! back to user units.

mod csv;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use fastgp::cdf::build_presort;
use fastgp::gp::{
    fit_joint_with_kernel, fit_scale_params_with_kernel, predict, simulate_gp, DesignMatrix,
    GpContext, GpModel, OptimizerConfig,
};
use fastgp::mvm::{mvm_fast, mvm_naive, MvmPlan};
use fastgp::scaling::CoordinateScaling;
use fastgp::{Dataset, KernelForm, KernelSpec, MaternNu};
use serde_json::json;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Parser)]
#[command(name = "fastgp", version, about = "Fast exact Matérn-kernel Gaussian-process inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum KernelArg {
    Matern12,
    Matern32,
    Matern52,
}

impl KernelArg {
    fn nu(self) -> MaternNu {
        match self {
            KernelArg::Matern12 => MaternNu::Half,
            KernelArg::Matern32 => MaternNu::ThreeHalves,
            KernelArg::Matern52 => MaternNu::FiveHalves,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormArg {
    L1,
    Product,
}

impl FormArg {
    fn form(self) -> KernelForm {
        match self {
            FormArg::L1 => KernelForm::L1,
            FormArg::Product => KernelForm::Product,
        }
    }
}

#[derive(Args)]
struct KernelFlags {
    /// Kernel smoothness family.
    #[arg(long, value_enum, default_value = "matern12")]
    kernel: KernelArg,
    /// Multivariate construction.
    #[arg(long, value_enum, default_value = "l1")]
    form: FormArg,
}

#[derive(Args)]
struct OptimFlags {
    #[arg(long, default_value_t = 0.005)]
    lr_init: f64,
    #[arg(long, default_value_t = 0.0005)]
    lr_final: f64,
    #[arg(long, default_value_t = 20000)]
    max_iter: usize,
    #[arg(long, default_value_t = 1e-3)]
    grad_tol: f64,
    #[arg(long, default_value_t = 1e-5)]
    cg_tol: f64,
    #[arg(long, default_value_t = 100)]
    precond_rank: usize,
    /// Hutchinson probe count.
    #[arg(long, default_value_t = 10)]
    probes: usize,
    /// Lanczos iterations for log-determinant estimates.
    #[arg(long, default_value_t = 50)]
    lanczos_m: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Initial outputscale for the optimizer.
    #[arg(long, default_value_t = 0.5)]
    outputscale_init: f64,
    /// Initial lengthscale, in internal (unit-box) coordinate units.
    #[arg(long, default_value_t = 1.0)]
    lengthscale_init: f64,
    /// Initial nugget standard deviation (fit-joint only).
    #[arg(long, default_value_t = 1.0)]
    sigma_init: f64,
}

impl OptimFlags {
    fn config(&self) -> OptimizerConfig {
        OptimizerConfig {
            lr_init: self.lr_init,
            lr_final: self.lr_final,
            max_iter: self.max_iter,
            grad_tol: self.grad_tol,
            cg_tol: self.cg_tol,
            precond_rank: self.precond_rank,
            n_probe: self.probes,
            lanczos_m: self.lanczos_m,
            seed: self.seed,
            outputscale_init: self.outputscale_init,
            lengthscale_init: self.lengthscale_init,
            sigma_init: self.sigma_init,
            ..OptimizerConfig::default()
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Draw GP responses at uniform random points and write them as CSV.
    Simulate {
        #[command(flatten)]
        kernel: KernelFlags,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 1)]
        dim: usize,
        #[arg(long, default_value_t = 1.0)]
        outputscale: f64,
        #[arg(long, default_value_t = 0.1054)]
        lengthscale: f64,
        /// Nugget standard deviation.
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        /// Affine fixed effects: intercept, then one slope per coordinate.
        #[arg(long, value_delimiter = ',', num_args = 1.., allow_hyphen_values = true)]
        beta: Option<Vec<f64>>,
        /// Coordinate range low edge (all dimensions).
        #[arg(long, default_value_t = 0.0)]
        coord_min: f64,
        /// Coordinate range high edge (all dimensions).
        #[arg(long, default_value_t = 1.0)]
        coord_max: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: PathBuf,
        /// Dense-sampling cap.
        #[arg(long, default_value_t = 8000)]
        dense_cap: usize,
    },
    /// Estimate (outputscale, lengthscale) with the nugget fixed.
    Fit {
        #[command(flatten)]
        kernel: KernelFlags,
        #[command(flatten)]
        optim: OptimFlags,
        /// Known nugget standard deviation.
        #[arg(long, default_value_t = 1.0)]
        sigma: f64,
        #[arg(long)]
        input: PathBuf,
        /// Optional JSON report path (stdout always gets the report).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Jointly estimate affine fixed effects, nugget and scale parameters.
    FitJoint {
        #[command(flatten)]
        kernel: KernelFlags,
        #[command(flatten)]
        optim: OptimFlags,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Posterior mean (and optionally variance) at evaluation points.
    Predict {
        #[command(flatten)]
        kernel: KernelFlags,
        #[arg(long)]
        input: PathBuf,
        /// CSV of evaluation points (header x1..xd; y column ignored).
        #[arg(long)]
        eval: PathBuf,
        #[arg(long)]
        output: PathBuf,
        #[arg(long)]
        outputscale: f64,
        /// Lengthscale in user coordinate units.
        #[arg(long)]
        lengthscale: f64,
        #[arg(long)]
        sigma: f64,
        /// Affine fixed effects in user units.
        #[arg(long, value_delimiter = ',', num_args = 1.., allow_hyphen_values = true)]
        beta: Option<Vec<f64>>,
        /// Also compute posterior variances.
        #[arg(long)]
        variance: bool,
        #[arg(long, default_value_t = 1e-5)]
        cg_tol: f64,
        #[arg(long, default_value_t = 100)]
        precond_rank: usize,
    },
    /// Time fast MVMs against the naive double loop over a size grid.
    BenchMvm {
        #[command(flatten)]
        kernel: KernelFlags,
        /// Sizes, e.g. 4096,8192,16384.
        #[arg(long, value_delimiter = ',', default_values_t = vec![4096usize, 8192, 16384, 32768, 65536, 131072])]
        sizes: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1usize])]
        dims: Vec<usize>,
        #[arg(long, default_value_t = 0.1054)]
        lengthscale: f64,
        #[arg(long, default_value_t = 1.0)]
        outputscale: f64,
        #[arg(long, default_value_t = 5)]
        reps: usize,
        /// Naive-oracle comparisons are skipped above this size.
        #[arg(long, default_value_t = 10000)]
        naive_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path (stdout when omitted).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Run the embedded oracle-equivalence and gradient-check suites.
    Check,
}

/// FASTGP_THREADS caps worker parallelism. The numeric kernels are
/// sequential, so the effective count is min(cap, 1); the variable is
/// still validated and reported.
fn effective_threads() -> Result<usize> {
    match std::env::var("FASTGP_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => {
            let cap: usize = v
                .trim()
                .parse()
                .with_context(|| format!("FASTGP_THREADS must be a positive integer, got {v:?}"))?;
            if cap == 0 {
                bail!("FASTGP_THREADS must be >= 1");
            }
            Ok(cap.min(1))
        }
    }
}

fn kernel_spec(flags: &KernelFlags, outputscale: f64, lengthscale: f64) -> Result<KernelSpec> {
    let spec = KernelSpec::new(flags.kernel.nu(), flags.form.form(), outputscale, lengthscale)?;
    if !spec.decomposition_supported() {
        bail!(
            "kernel {}/{:?} has no fast decomposition (product form supports matern12/matern32 only)",
            spec.nu,
            spec.form
        );
    }
    Ok(spec)
}

fn load_training(path: &Path) -> Result<(Dataset, CoordinateScaling, f64, Vec<Vec<f64>>)> {
    let data = csv::read_points_csv(path)?;
    let Some(responses) = data.responses else {
        bail!("training CSV {} must include a y column", path.display());
    };
    if responses.len() < 2 {
        bail!("need at least two observations to fit");
    }
    let scaling = CoordinateScaling::fit(&data.columns)?;
    let scaled = scaling.apply_columns(&data.columns)?;
    let mean = responses.iter().sum::<f64>() / responses.len() as f64;
    let centered: Vec<f64> = responses.iter().map(|y| y - mean).collect();
    let ds = Dataset::from_columns(&scaled, centered)?;
    Ok((ds, scaling, mean, data.columns))
}

fn main() {
    if let Err(err) = run() {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn run() -> Result<()> {
    let threads = effective_threads()?;
    let cli = Cli::parse();
    match cli.command {
        Command::Simulate {
            kernel,
            n,
            dim,
            outputscale,
            lengthscale,
            sigma,
            beta,
            coord_min,
            coord_max,
            seed,
            output,
            dense_cap,
        } => {
            if dim == 0 {
                bail!("--dim must be >= 1");
            }
            if !(coord_max > coord_min) {
                bail!("--coord-max must exceed --coord-min");
            }
            let spec = kernel_spec(&kernel, outputscale, lengthscale)?;
            if let Some(b) = &beta {
                if b.len() != dim + 1 {
                    bail!("--beta needs {} values (intercept + {} slopes)", dim + 1, dim);
                }
            }
            use rand::prelude::*;
            let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed);
            let span = coord_max - coord_min;
            let points: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..dim).map(|_| coord_min + span * rng.gen::<f64>()).collect())
                .collect();
            // Responses are drawn in user units; the sampler works on the
            // user-space kernel directly (dense path, no rescale needed).
            let y = simulate_gp(&spec, sigma, beta.as_deref(), &points, seed ^ 0x5eed, dense_cap)?;
            let columns: Vec<Vec<f64>> =
                (0..dim).map(|k| points.iter().map(|p| p[k]).collect()).collect();
            csv::write_points_csv(&output, &columns, Some(&y))?;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "schema": 1,
                    "command": "simulate",
                    "seed": seed,
                    "n": n,
                    "dim": dim,
                    "kernel": spec,
                    "sigma": sigma,
                    "beta": beta,
                    "output": output,
                    "threads": threads,
                }))?
            );
        }
        Command::Fit { kernel, optim, sigma, input, output } => {
            let start = Instant::now();
            let (data, scaling, offset, _) = load_training(&input)?;
            let cfg = optim.config();
            let kernel0 = kernel_spec(&kernel, cfg.outputscale_init, cfg.lengthscale_init)?;
            let presort = build_presort(&data)?;
            let ctx = GpContext::new(&data, &presort)?;
            let report = fit_scale_params_with_kernel(&ctx, kernel0, sigma, &cfg, start)?;
            let doc = json!({
                "schema": 1,
                "command": "fit",
                "input": input,
                "seed": cfg.seed,
                "kernel": { "nu": kernel0.nu, "form": kernel0.form },
                "sigma": sigma,
                "response_offset": offset,
                "estimates": {
                    "outputscale": report.outputscale,
                    "lengthscale": scaling.lengthscale_to_user(report.lengthscale),
                    "lengthscale_internal": report.lengthscale,
                },
                "iterations": report.iterations,
                "wall_time_secs": report.wall_time_secs,
                "final_grad_norm": report.final_grad_norm,
                "converged": report.converged,
                "threads": threads,
            });
            emit_report(&doc, output.as_ref())?;
        }
        Command::FitJoint { kernel, optim, input, output } => {
            let (raw, scaling, _offset, _) = {
                // fit-joint consumes uncentered responses; re-read them.
                let data = csv::read_points_csv(&input)?;
                let Some(responses) = data.responses else {
                    bail!("training CSV {} must include a y column", input.display());
                };
                if responses.len() < 2 {
                    bail!("need at least two observations to fit");
                }
                let scaling = CoordinateScaling::fit(&data.columns)?;
                let scaled = scaling.apply_columns(&data.columns)?;
                let ds = Dataset::from_columns(&scaled, responses)?;
                (ds, scaling, 0.0, data.columns)
            };
            let cfg = optim.config();
            let kernel0 = kernel_spec(&kernel, cfg.outputscale_init, cfg.lengthscale_init)?;
            let presort = build_presort(&raw)?;
            let ctx = GpContext::new(&raw, &presort)?;
            let h = DesignMatrix::affine(&raw)?;
            let report = fit_joint_with_kernel(&ctx, &h, kernel0, &cfg)?;
            let beta_internal = report.beta.clone().unwrap_or_default();
            let beta_user = scaling.beta_to_user(&beta_internal)?;
            let doc = json!({
                "schema": 1,
                "command": "fit-joint",
                "input": input,
                "seed": cfg.seed,
                "kernel": { "nu": kernel0.nu, "form": kernel0.form },
                "estimates": {
                    "beta": beta_user,
                    "sigma": report.sigma,
                    "outputscale": report.outputscale,
                    "lengthscale": scaling.lengthscale_to_user(report.lengthscale),
                    "lengthscale_internal": report.lengthscale,
                },
                "beta_history_internal": report.beta_history,
                "iterations": report.iterations,
                "outer_iterations": report.outer_iterations,
                "wall_time_secs": report.wall_time_secs,
                "final_grad_norm": report.final_grad_norm,
                "converged": report.converged,
                "threads": threads,
            });
            emit_report(&doc, output.as_ref())?;
        }
        Command::Predict {
            kernel,
            input,
            eval,
            output,
            outputscale,
            lengthscale,
            sigma,
            beta,
            variance,
            cg_tol,
            precond_rank,
        } => {
            let training = csv::read_points_csv(&input)?;
            let Some(responses) = training.responses else {
                bail!("training CSV {} must include a y column", input.display());
            };
            let scaling = CoordinateScaling::fit(&training.columns)?;
            let scaled = scaling.apply_columns(&training.columns)?;
            let data = Dataset::from_columns(&scaled, responses)?;
            let evals = csv::read_points_csv(&eval)?;
            if evals.columns.len() != data.dim() {
                bail!(
                    "evaluation points have dimension {}, training data {}",
                    evals.columns.len(),
                    data.dim()
                );
            }
            let m = evals.columns[0].len();
            let z: Vec<Vec<f64>> = (0..m)
                .map(|i| {
                    let raw: Vec<f64> = evals.columns.iter().map(|c| c[i]).collect();
                    scaling.apply_point(&raw)
                })
                .collect::<fastgp::Result<_>>()?;
            let spec = kernel_spec(&kernel, outputscale, scaling.lengthscale_to_internal(lengthscale))?;
            let beta_internal = match &beta {
                None => None,
                Some(b) => Some(scaling.beta_to_internal(b)?),
            };
            let presort = build_presort(&data)?;
            let ctx = GpContext::new(&data, &presort)?;
            let model = GpModel::new(spec, sigma, beta_internal)?;
            let cfg = OptimizerConfig { cg_tol, precond_rank, ..OptimizerConfig::default() };
            let (means, vars) = predict(&ctx, &model, &z, variance, &cfg)?;
            let mut cols = evals.columns.clone();
            cols.push(means);
            if let Some(v) = vars {
                cols.push(v);
            }
            write_prediction_csv(&output, data.dim(), &cols, variance)?;
            println!(
                "{}",
                serde_json::to_string_pretty(&json!({
                    "schema": 1,
                    "command": "predict",
                    "evaluations": m,
                    "variance": variance,
                    "output": output,
                    "threads": threads,
                }))?
            );
        }
        Command::BenchMvm {
            kernel,
            sizes,
            dims,
            lengthscale,
            outputscale,
            reps,
            naive_max,
            seed,
            output,
        } => {
            if sizes.is_empty() || sizes.iter().any(|&s| s < 2) {
                bail!("--sizes must contain values >= 2");
            }
            if reps == 0 {
                bail!("--reps must be >= 1");
            }
            let mut rows = vec!["n,d,kernel,form,reps,presort_seconds,fast_seconds,naive_seconds,max_rel_err,threads".to_string()];
            for &d in &dims {
                for &n in &sizes {
                    let spec = kernel_spec(&kernel, outputscale, lengthscale)?;
                    use rand::prelude::*;
                    let mut rng = rand_chacha::ChaCha20Rng::seed_from_u64(seed ^ (n as u64) ^ ((d as u64) << 32));
                    let cols: Vec<Vec<f64>> =
                        (0..d).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect();
                    let data = Dataset::from_columns(&cols, vec![0.0; n])?;
                    let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
                    let t0 = Instant::now();
                    let presort = build_presort(&data)?;
                    let presort_seconds = t0.elapsed().as_secs_f64();
                    // Presort excluded from the timed region; the per-call
                    // weight transforms are included, as in optimization use.
                    let mut fast = Vec::new();
                    let mut times = Vec::with_capacity(reps);
                    for _ in 0..reps {
                        let t1 = Instant::now();
                        let plan = MvmPlan::new(spec, &presort)?;
                        fast = mvm_fast(&plan, &y)?;
                        times.push(t1.elapsed().as_secs_f64());
                    }
                    times.sort_by(f64::total_cmp);
                    let fast_seconds = times[times.len() / 2];
                    let (naive_seconds, max_rel_err) = if n <= naive_max {
                        let t2 = Instant::now();
                        let naive = mvm_naive(&spec, &data, &y)?;
                        let naive_seconds = t2.elapsed().as_secs_f64();
                        let scale = naive.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-300);
                        let err = fast
                            .iter()
                            .zip(&naive)
                            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
                            / scale;
                        (format!("{naive_seconds:.6}"), format!("{err:.3e}"))
                    } else {
                        (String::new(), String::new())
                    };
                    rows.push(format!(
                        "{n},{d},{},{:?},{reps},{presort_seconds:.6},{fast_seconds:.6},{naive_seconds},{max_rel_err},{threads}",
                        spec.nu, spec.form
                    ));
                }
            }
            let table = rows.join("\n") + "\n";
            match output {
                Some(path) => std::fs::write(&path, table)
                    .with_context(|| format!("cannot write {}", path.display()))?,
                None => print!("{table}"),
            }
        }
        Command::Check => {
            let outcomes = fastgp::check::run_all_checks();
            let mut failures = 0;
            for c in &outcomes {
                if c.passed {
                    println!("ok   {:<30} {}", c.name, c.detail);
                } else {
                    failures += 1;
                    eprintln!("FAIL {:<30} {}", c.name, c.detail);
                }
            }
            if failures > 0 {
                bail!("{failures} of {} checks failed", outcomes.len());
            }
            println!("all {} checks passed", outcomes.len());
        }
    }
    Ok(())
}

fn emit_report(doc: &serde_json::Value, path: Option<&PathBuf>) -> Result<()> {
    let text = serde_json::to_string_pretty(doc)?;
    if let Some(p) = path {
        std::fs::write(p, &text).with_context(|| format!("cannot write {}", p.display()))?;
    }
    println!("{text}");
    Ok(())
}

fn write_prediction_csv(path: &Path, d: usize, cols: &[Vec<f64>], variance: bool) -> Result<()> {
    let file =
        std::fs::File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    use std::io::Write;
    let mut w = std::io::BufWriter::new(file);
    let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    header.push("mean".into());
    if variance {
        header.push("variance".into());
    }
    writeln!(w, "{}", header.join(","))?;
    let n = cols[0].len();
    for i in 0..n {
        let fields: Vec<String> = cols.iter().map(|c| csv::format_f64(c[i])).collect();
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}
