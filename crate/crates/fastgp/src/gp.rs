//! Gaussian-process inference on top of the fast MVM stack: log-marginal
//! likelihood and its stochastic gradient, ADAM hyperparameter
//! optimization, closed-form nugget updates, OLS/GLS fixed effects, the
//! joint estimation loop, posterior prediction, and dense simulation.

use crate::block::{dot, Block};
use crate::cdf::{build_presort_merged, PresortIndex};
use crate::data::Dataset;
use crate::dense::{cholesky_lower, cholesky_solve_vec};
use crate::error::{Error, Result};
use crate::kernels::{KernelForm, KernelSpec, MaternNu};
use crate::mvm::{kernel_cross_column, kernel_matrix, MvmPlan};
use crate::solver::{
    cg_lanczos, logdet_estimate, pivoted_cholesky, CgOutcome, Preconditioner, ProbeSet,
    ShiftedKernelOp,
};
use nalgebra::{DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use std::time::Instant;

/// Dataset plus its reusable presort schedule.
pub struct GpContext<'a> {
    pub data: &'a Dataset,
    pub presort: &'a PresortIndex,
}

impl<'a> GpContext<'a> {
    pub fn new(data: &'a Dataset, presort: &'a PresortIndex) -> Result<Self> {
        if presort.n_sources() != data.len()
            || presort.n_targets() != data.len()
            || presort.dim() != data.dim()
        {
            return Err(Error::DimensionMismatch {
                context: "presort/dataset pairing",
                expected: data.len(),
                got: presort.n_sources(),
            });
        }
        Ok(Self { data, presort })
    }

    fn n(&self) -> usize {
        self.data.len()
    }
}

/// Hyperparameter state of a fitted (or to-be-fitted) model.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GpModel {
    pub kernel: KernelSpec,
    /// Nugget standard deviation.
    pub sigma: f64,
    /// Fixed-effects coefficients for the affine design (intercept first),
    /// absent when the mean is zero.
    pub beta: Option<Vec<f64>>,
}

impl GpModel {
    pub fn new(kernel: KernelSpec, sigma: f64, beta: Option<Vec<f64>>) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma must be positive, got {sigma}")));
        }
        Ok(Self { kernel, sigma, beta })
    }
}

/// Design matrix for fixed effects: a column of ones, then the coordinate
/// columns, extensible with user-supplied columns.
#[derive(Debug, Clone)]
pub struct DesignMatrix {
    cols: Vec<Vec<f64>>,
    n: usize,
}

impl DesignMatrix {
    /// `[1, x_1, ..., x_d]` over the dataset's points.
    pub fn affine(data: &Dataset) -> Result<Self> {
        let n = data.len();
        let mut cols = vec![vec![1.0; n]];
        for k in 0..data.dim() {
            cols.push(data.coord(k).to_vec());
        }
        let dm = Self { cols, n };
        dm.check_rank()?;
        Ok(dm)
    }

    pub fn from_columns(cols: Vec<Vec<f64>>) -> Result<Self> {
        if cols.is_empty() {
            return Err(Error::InvalidParameter("design matrix needs at least one column".into()));
        }
        let n = cols[0].len();
        for c in &cols {
            if c.len() != n {
                return Err(Error::DimensionMismatch { context: "design column", expected: n, got: c.len() });
            }
        }
        let dm = Self { cols, n };
        dm.check_rank()?;
        Ok(dm)
    }

    pub fn ncols(&self) -> usize {
        self.cols.len()
    }

    pub fn nrows(&self) -> usize {
        self.n
    }

    pub fn columns(&self) -> &[Vec<f64>] {
        &self.cols
    }

    fn dense(&self) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(self.n, self.cols.len());
        for (j, c) in self.cols.iter().enumerate() {
            for (i, &v) in c.iter().enumerate() {
                h[(i, j)] = v;
            }
        }
        h
    }

    /// Full-column-rank check through a pivoted factorization of H^T H.
    fn check_rank(&self) -> Result<()> {
        let h = self.dense();
        let hth = h.transpose() * &h;
        let qr = hth.col_piv_qr();
        let r = qr.r();
        let scale = r[(0, 0)].abs().max(1e-300);
        for i in 0..r.nrows().min(r.ncols()) {
            let pivot = r[(i, i)].abs();
            if pivot < 1e-10 * scale {
                return Err(Error::RankDeficient { pivot });
            }
        }
        Ok(())
    }

    /// `H beta`.
    pub fn apply(&self, beta: &[f64]) -> Result<Vec<f64>> {
        if beta.len() != self.cols.len() {
            return Err(Error::DimensionMismatch {
                context: "beta",
                expected: self.cols.len(),
                got: beta.len(),
            });
        }
        let mut out = vec![0.0; self.n];
        for (c, &b) in self.cols.iter().zip(beta) {
            for (o, &v) in out.iter_mut().zip(c) {
                *o += b * v;
            }
        }
        Ok(out)
    }
}

/// Optimizer and solver settings. Defaults follow the reference setup:
/// learning rate decaying linearly 0.005 -> 0.0005 over at most 20000
/// iterations, gradient stop at 1e-3, parameter-stall stop of 1e-4 over a
/// 100-iteration window, CG tolerance 1e-5, rank-100 preconditioner.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OptimizerConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub max_iter: usize,
    pub grad_tol: f64,
    pub param_stall_tol: f64,
    pub stall_window: usize,
    pub cg_tol: f64,
    pub cg_max_iter: usize,
    pub precond_rank: usize,
    pub n_probe: usize,
    pub lanczos_m: usize,
    pub seed: u64,
    /// Cap on Algorithm-1 outer iterations before reporting best-so-far.
    pub outer_max: usize,
    /// Outer stop: ||beta_gls - beta_old|| <= eps_beta_rel * ||beta_ols||.
    pub eps_beta_rel: f64,
    pub outputscale_init: f64,
    pub lengthscale_init: f64,
    pub sigma_init: f64,
    /// Largest N the dense simulation path accepts.
    pub dense_cap: usize,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            lr_init: 0.005,
            lr_final: 0.0005,
            max_iter: 20_000,
            grad_tol: 1e-3,
            param_stall_tol: 1e-4,
            stall_window: 100,
            cg_tol: 1e-5,
            cg_max_iter: 2000,
            precond_rank: 100,
            n_probe: 10,
            lanczos_m: 50,
            seed: 0,
            outer_max: 20,
            eps_beta_rel: 1e-3,
            outputscale_init: 0.5,
            lengthscale_init: 1.0,
            sigma_init: 1.0,
            dense_cap: 8000,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_init", self.lr_init),
            ("lr_final", self.lr_final),
            ("grad_tol", self.grad_tol),
            ("param_stall_tol", self.param_stall_tol),
            ("cg_tol", self.cg_tol),
            ("eps_beta_rel", self.eps_beta_rel),
            ("outputscale_init", self.outputscale_init),
            ("lengthscale_init", self.lengthscale_init),
            ("sigma_init", self.sigma_init),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("max_iter", self.max_iter),
            ("stall_window", self.stall_window),
            ("cg_max_iter", self.cg_max_iter),
            ("precond_rank", self.precond_rank),
            ("n_probe", self.n_probe),
            ("lanczos_m", self.lanczos_m),
            ("outer_max", self.outer_max),
            ("dense_cap", self.dense_cap),
        ] {
            if v == 0 {
                return Err(Error::InvalidParameter(format!("{name} must be >= 1")));
            }
        }
        Ok(())
    }

    fn learning_rate(&self, t: usize) -> f64 {
        if self.max_iter <= 1 {
            return self.lr_init;
        }
        let frac = (t - 1) as f64 / (self.max_iter - 1) as f64;
        self.lr_init + (self.lr_final - self.lr_init) * frac
    }
}

/// Gradient of the log-marginal likelihood in the raw (outputscale,
/// lengthscale) domain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleGradient {
    pub d_outputscale: f64,
    pub d_lengthscale: f64,
}

impl ScaleGradient {
    pub fn norm(&self) -> f64 {
        self.d_outputscale.hypot(self.d_lengthscale)
    }
}

/// Fit outcome: estimates, diagnostics and the per-outer-iteration
/// fixed-effects history.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FitReport {
    pub beta: Option<Vec<f64>>,
    pub sigma: f64,
    pub outputscale: f64,
    pub lengthscale: f64,
    pub iterations: usize,
    pub outer_iterations: usize,
    pub wall_time_secs: f64,
    pub final_grad_norm: f64,
    pub beta_history: Vec<Vec<f64>>,
    pub converged: bool,
}

fn solve_system(
    ctx: &GpContext,
    kernel: &KernelSpec,
    sigma: f64,
    b: &Block,
    cfg: &OptimizerConfig,
    precond: Option<&Preconditioner>,
) -> Result<CgOutcome> {
    let plan = MvmPlan::new(*kernel, ctx.presort)?;
    let op = ShiftedKernelOp::new(&plan, sigma)?;
    let out = cg_lanczos(&op, b, precond, cfg.cg_max_iter, cfg.cg_tol)?;
    if !out.converged {
        return Err(Error::SolverDidNotConverge {
            max_iter: cfg.cg_max_iter,
            residual: out.residual_norm,
            tol: cfg.cg_tol,
        });
    }
    Ok(out)
}

fn build_precond(ctx: &GpContext, kernel: &KernelSpec, sigma: f64, cfg: &OptimizerConfig) -> Result<Preconditioner> {
    let rank = cfg.precond_rank.min(ctx.n());
    Preconditioner::new(pivoted_cholesky(kernel, ctx.data, rank)?, sigma)
}

/// Log-marginal likelihood
/// `-1/2 y^T (K+s^2 I)^{-1} y - 1/2 log det(K+s^2 I) - N/2 log 2 pi`
/// with the solve via CG and the log-determinant via the stochastic
/// Lanczos estimator. Responses are expected centered.
pub fn log_likelihood(ctx: &GpContext, kernel: &KernelSpec, sigma: f64, cfg: &OptimizerConfig) -> Result<f64> {
    cfg.validate()?;
    let y = ctx.data.responses();
    let precond = build_precond(ctx, kernel, sigma, cfg)?;
    let out = solve_system(ctx, kernel, sigma, &Block::from_column(y.to_vec()), cfg, Some(&precond))?;
    let quad = dot(y, out.solution.col(0));
    let plan = MvmPlan::new(*kernel, ctx.presort)?;
    let op = ShiftedKernelOp::new(&plan, sigma)?;
    // Distinct stream from the gradient probes.
    let logdet_seed = cfg.seed ^ 0x9e37_79b9_7f4a_7c15;
    let logdet = logdet_estimate(&op, Some(&precond), cfg.n_probe, cfg.lanczos_m, logdet_seed)?;
    let n = ctx.n() as f64;
    Ok(-0.5 * quad - 0.5 * logdet - 0.5 * n * (2.0 * std::f64::consts::PI).ln())
}

/// Stochastic gradient of the log-marginal likelihood in (outputscale,
/// lengthscale): `1/2 a^T (dK/dt) a - 1/2 tr((K+s^2I)^{-1} dK/dt)` with
/// `a = (K+s^2 I)^{-1} y` and the trace by Hutchinson probes. One block CG
/// solve covers y and all probes.
pub fn likelihood_gradient(
    ctx: &GpContext,
    kernel: &KernelSpec,
    sigma: f64,
    probes: &ProbeSet,
    cfg: &OptimizerConfig,
) -> Result<ScaleGradient> {
    let (grad, _alpha) =
        likelihood_gradient_with_y(ctx, ctx.data.responses(), kernel, sigma, probes, cfg, None)?;
    Ok(grad)
}

fn likelihood_gradient_with_y(
    ctx: &GpContext,
    y: &[f64],
    kernel: &KernelSpec,
    sigma: f64,
    probes: &ProbeSet,
    cfg: &OptimizerConfig,
    precond: Option<&Preconditioner>,
) -> Result<(ScaleGradient, Vec<f64>)> {
    let m = probes.count();
    let mut cols = Vec::with_capacity(1 + m);
    cols.push(y.to_vec());
    for j in 0..m {
        cols.push(probes.vectors().col(j).to_vec());
    }
    let rhs = Block::from_columns(&cols)?;
    let owned_precond;
    let precond = match precond {
        Some(p) => Some(p),
        None => {
            owned_precond = build_precond(ctx, kernel, sigma, cfg)?;
            Some(&owned_precond)
        }
    };
    let solved = solve_system(ctx, kernel, sigma, &rhs, cfg, precond)?;
    let alpha = solved.solution.col(0).to_vec();

    // One MVM block and one gradient-MVM block over [alpha, z_1..z_m].
    let mut mats = Vec::with_capacity(1 + m);
    mats.push(alpha.clone());
    for j in 0..m {
        mats.push(probes.vectors().col(j).to_vec());
    }
    let inputs = Block::from_columns(&mats)?;
    let plan = MvmPlan::new(*kernel, ctx.presort)?;
    let kb = plan.mvm_block(&inputs)?;
    let gb = plan.grad_lengthscale_block(&inputs)?;

    let two_over_s = 2.0 / kernel.outputscale;
    let fit_s = 0.5 * two_over_s * dot(&alpha, kb.col(0));
    let fit_l = 0.5 * dot(&alpha, gb.col(0));
    let mut tr_s = 0.0;
    let mut tr_l = 0.0;
    for j in 0..m {
        let u = solved.solution.col(1 + j);
        tr_s += two_over_s * dot(u, kb.col(1 + j));
        tr_l += dot(u, gb.col(1 + j));
    }
    tr_s /= m as f64;
    tr_l /= m as f64;
    let grad = ScaleGradient {
        d_outputscale: fit_s - 0.5 * tr_s,
        d_lengthscale: fit_l - 0.5 * tr_l,
    };
    Ok((grad, alpha))
}

/// Closed-form nugget update: with `Kt = K(outputscale/sigma_prev, l)`,
/// returns `sigma^2_new = (1/N) r^T (Kt + I)^{-1} r`.
pub fn sigma_update(
    ctx: &GpContext,
    kernel: &KernelSpec,
    sigma_prev: f64,
    r: &[f64],
    cfg: &OptimizerConfig,
) -> Result<f64> {
    if r.len() != ctx.n() {
        return Err(Error::DimensionMismatch { context: "residuals", expected: ctx.n(), got: r.len() });
    }
    let rr = dot(r, r);
    if rr == 0.0 {
        return Ok(0.0);
    }
    let kernel_tilde = KernelSpec::new(
        kernel.nu,
        kernel.form,
        kernel.outputscale / sigma_prev,
        kernel.lengthscale,
    )?;
    let rank = cfg.precond_rank.min(ctx.n());
    let precond = Preconditioner::new(pivoted_cholesky(&kernel_tilde, ctx.data, rank)?, 1.0)?;
    let out = solve_system(ctx, &kernel_tilde, 1.0, &Block::from_column(r.to_vec()), cfg, Some(&precond))?;
    Ok(dot(r, out.solution.col(0)) / ctx.n() as f64)
}

/// Ordinary least squares `(H^T H)^{-1} H^T y`.
pub fn ols_estimate(h: &DesignMatrix, y: &[f64]) -> Result<Vec<f64>> {
    if y.len() != h.nrows() {
        return Err(Error::DimensionMismatch { context: "responses", expected: h.nrows(), got: y.len() });
    }
    let hd = h.dense();
    let hth = hd.transpose() * &hd;
    let hty = hd.transpose() * DVector::from_column_slice(y);
    let l = cholesky_lower(&hth).map_err(|_| Error::RankDeficient { pivot: 0.0 })?;
    Ok(cholesky_solve_vec(&l, hty.as_slice()))
}

/// Generalized least squares
/// `(H^T (K+s^2 I)^{-1} H)^{-1} H^T (K+s^2 I)^{-1} y`; the N x N solves run
/// through CG, the (1+d) x (1+d) system densely.
pub fn gls_estimate(
    ctx: &GpContext,
    kernel: &KernelSpec,
    sigma: f64,
    h: &DesignMatrix,
    y: &[f64],
    cfg: &OptimizerConfig,
) -> Result<Vec<f64>> {
    let p = h.ncols();
    let mut cols: Vec<Vec<f64>> = h.columns().to_vec();
    cols.push(y.to_vec());
    let rhs = Block::from_columns(&cols)?;
    let precond = build_precond(ctx, kernel, sigma, cfg)?;
    let solved = solve_system(ctx, kernel, sigma, &rhs, cfg, Some(&precond))?;
    let mut m = DMatrix::zeros(p, p);
    let mut v = DVector::zeros(p);
    for a in 0..p {
        for b in 0..p {
            m[(a, b)] = dot(&h.columns()[a], solved.solution.col(b));
        }
        v[a] = dot(&h.columns()[a], solved.solution.col(p));
    }
    // Symmetrize away solver roundoff before factorizing.
    let m = (&m + m.transpose()) * 0.5;
    let l = cholesky_lower(&m)?;
    Ok(cholesky_solve_vec(&l, v.as_slice()))
}

struct AdamState {
    m: [f64; 2],
    v: [f64; 2],
    t: usize,
}

impl AdamState {
    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new() -> Self {
        Self { m: [0.0; 2], v: [0.0; 2], t: 0 }
    }

    /// One ascent step; returns the update to add to the parameters.
    fn step(&mut self, grad: [f64; 2], lr: f64) -> [f64; 2] {
        self.t += 1;
        let mut out = [0.0; 2];
        for i in 0..2 {
            self.m[i] = Self::BETA1 * self.m[i] + (1.0 - Self::BETA1) * grad[i];
            self.v[i] = Self::BETA2 * self.v[i] + (1.0 - Self::BETA2) * grad[i] * grad[i];
            let mhat = self.m[i] / (1.0 - Self::BETA1.powi(self.t as i32));
            let vhat = self.v[i] / (1.0 - Self::BETA2.powi(self.t as i32));
            out[i] = lr * mhat / (vhat.sqrt() + Self::EPS);
        }
        out
    }
}

struct DescentOutcome {
    kernel: KernelSpec,
    sigma: f64,
    iterations: usize,
    grad_norm: f64,
    converged: bool,
}

/// ADAM ascent on (outputscale, lengthscale) in the log domain, with the
/// two stopping rules: gradient norm below `grad_tol`, or parameter change
/// below `param_stall_tol` across `stall_window` iterations. When
/// `update_sigma` is set the closed-form nugget update runs after every
/// gradient step.
fn gradient_descent(
    ctx: &GpContext,
    y: &[f64],
    kernel0: KernelSpec,
    sigma0: f64,
    update_sigma: bool,
    cfg: &OptimizerConfig,
    probe_rng: &mut ChaCha20Rng,
) -> Result<DescentOutcome> {
    let mut kernel = kernel0;
    let mut sigma = sigma0;
    let mut adam = AdamState::new();
    let mut history: Vec<[f64; 2]> = Vec::with_capacity(cfg.max_iter.min(32_768));
    let mut grad_norm = f64::INFINITY;
    let mut iterations = 0;
    let mut converged = false;
    let mut log_s = kernel.outputscale.ln();
    let mut log_l = kernel.lengthscale.ln();

    // One pivoted-Cholesky factor per iteration, shared by the gradient
    // solve and (when enabled) the nugget update through `reweighted`.
    let mut precond = build_precond(ctx, &kernel, sigma, cfg)?;
    for t in 1..=cfg.max_iter {
        iterations = t;
        let probes = ProbeSet::standard_normal(ctx.n(), cfg.n_probe, probe_rng.gen())?;
        let (grad, _alpha) =
            likelihood_gradient_with_y(ctx, y, &kernel, sigma, &probes, cfg, Some(&precond))?;
        if !grad.d_outputscale.is_finite() || !grad.d_lengthscale.is_finite() {
            return Err(Error::NonFiniteGradient {
                iteration: t,
                detail: format!(
                    "outputscale={} lengthscale={} sigma={} grad=({}, {})",
                    kernel.outputscale, kernel.lengthscale, sigma, grad.d_outputscale, grad.d_lengthscale
                ),
            });
        }
        grad_norm = grad.norm();
        if grad_norm < cfg.grad_tol {
            converged = true;
            break;
        }
        // Log-domain chain rule keeps both parameters positive.
        let g_log = [
            kernel.outputscale * grad.d_outputscale,
            kernel.lengthscale * grad.d_lengthscale,
        ];
        let lr = cfg.learning_rate(t);
        let step = adam.step(g_log, lr);
        log_s += step[0];
        log_l += step[1];
        kernel = KernelSpec::new(kernel.nu, kernel.form, log_s.exp(), log_l.exp())?;
        precond = build_precond(ctx, &kernel, sigma, cfg)?;

        if update_sigma {
            // (1/N) r^T (Kt + I)^{-1} r with Kt = K(s/sigma_prev, l) equals
            // (sigma_prev^2/N) r^T (K + sigma_prev^2 I)^{-1} r exactly (the
            // systems are scalar multiples, with identical CG residuals),
            // so the fresh factor doubles as the update's preconditioner.
            let solved =
                solve_system(ctx, &kernel, sigma, &Block::from_column(y.to_vec()), cfg, Some(&precond))?;
            let s2 = sigma * sigma * dot(y, solved.solution.col(0)) / ctx.n() as f64;
            if !s2.is_finite() || s2 < 0.0 {
                return Err(Error::InvalidParameter(format!(
                    "nugget update produced sigma^2 = {s2} at iteration {t}"
                )));
            }
            // Exactly noise-free residuals (e.g. responses that are purely
            // affine) drive the update to zero, where the Woodbury form is
            // undefined; the nugget is left untouched in that case.
            if s2 > 0.0 {
                let sigma_new = s2.sqrt();
                if (sigma_new - sigma).abs() > 1e-12 * sigma {
                    precond = precond.reweighted(sigma_new)?;
                }
                sigma = sigma_new;
            }
        }

        history.push([kernel.outputscale, kernel.lengthscale]);
        if history.len() > cfg.stall_window {
            let prev = history[history.len() - 1 - cfg.stall_window];
            let cur = history[history.len() - 1];
            let change = (cur[0] - prev[0]).hypot(cur[1] - prev[1]);
            if change < cfg.param_stall_tol {
                converged = true;
                break;
            }
        }
    }
    Ok(DescentOutcome { kernel, sigma, iterations, grad_norm, converged })
}

/// Fits (outputscale, lengthscale) by ADAM ascent of the stochastic
/// log-likelihood gradient, nugget fixed and responses pre-centered.
pub fn fit_scale_params(ctx: &GpContext, sigma: f64, cfg: &OptimizerConfig) -> Result<FitReport> {
    cfg.validate()?;
    let start = Instant::now();
    let kernel0 = KernelSpec::new(
        default_nu_form().0,
        default_nu_form().1,
        cfg.outputscale_init,
        cfg.lengthscale_init,
    )?;
    fit_scale_params_with_kernel(ctx, kernel0, sigma, cfg, start)
}

fn default_nu_form() -> (MaternNu, KernelForm) {
    (MaternNu::Half, KernelForm::L1)
}

/// As [`fit_scale_params`] with an explicit kernel family / initial values.
pub fn fit_scale_params_with_kernel(
    ctx: &GpContext,
    kernel0: KernelSpec,
    sigma: f64,
    cfg: &OptimizerConfig,
    start: Instant,
) -> Result<FitReport> {
    cfg.validate()?;
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
    let out = gradient_descent(ctx, ctx.data.responses(), kernel0, sigma, false, cfg, &mut rng)?;
    Ok(FitReport {
        beta: None,
        sigma: out.sigma,
        outputscale: out.kernel.outputscale,
        lengthscale: out.kernel.lengthscale,
        iterations: out.iterations,
        outer_iterations: 0,
        wall_time_secs: start.elapsed().as_secs_f64(),
        final_grad_norm: out.grad_norm,
        beta_history: Vec::new(),
        converged: out.converged,
    })
}

/// Joint estimation of fixed effects, nugget and scale parameters:
/// OLS detrend, gradient descents with per-step nugget updates, GLS
/// re-estimation of the fixed effects against a running average detrend,
/// repeated until successive GLS coefficients stabilize.
pub fn fit_joint(ctx: &GpContext, h: &DesignMatrix, cfg: &OptimizerConfig) -> Result<FitReport> {
    fit_joint_with_kernel(
        ctx,
        h,
        KernelSpec::new(
            default_nu_form().0,
            default_nu_form().1,
            cfg.outputscale_init,
            cfg.lengthscale_init,
        )?,
        cfg,
    )
}

pub fn fit_joint_with_kernel(
    ctx: &GpContext,
    h: &DesignMatrix,
    kernel0: KernelSpec,
    cfg: &OptimizerConfig,
) -> Result<FitReport> {
    cfg.validate()?;
    let start = Instant::now();
    let y = ctx.data.responses();
    let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);

    let beta_ols = ols_estimate(h, y)?;
    let hb = h.apply(&beta_ols)?;
    let y_ols: Vec<f64> = y.iter().zip(&hb).map(|(a, b)| a - b).collect();

    let mut kernel = kernel0;
    let mut sigma = cfg.sigma_init;
    let mut total_iters = 0;
    let mut grad_norm;

    let first = gradient_descent(ctx, &y_ols, kernel, sigma, true, cfg, &mut rng)?;
    kernel = first.kernel;
    sigma = first.sigma;
    total_iters += first.iterations;
    grad_norm = first.grad_norm;

    let ols_norm = beta_ols.iter().map(|b| b * b).sum::<f64>().sqrt();
    let eps_beta = cfg.eps_beta_rel * ols_norm.max(1e-300);
    let p = h.ncols();
    let mut beta_avg = vec![0.0; p];
    let mut beta_old = beta_ols.clone();
    let mut beta_gls = beta_ols.clone();
    let mut beta_history: Vec<Vec<f64>> = Vec::new();
    let mut converged = false;
    let mut outer = 0;

    while outer < cfg.outer_max {
        outer += 1;
        beta_gls = gls_estimate(ctx, &kernel, sigma, h, y, cfg)?;
        beta_history.push(beta_gls.clone());
        for (a, &g) in beta_avg.iter_mut().zip(&beta_gls) {
            *a = (outer as f64 - 1.0) / outer as f64 * *a + g / outer as f64;
        }
        let hb = h.apply(&beta_avg)?;
        let y_avg: Vec<f64> = y.iter().zip(&hb).map(|(a, b)| a - b).collect();
        let inner = gradient_descent(ctx, &y_avg, kernel, sigma, true, cfg, &mut rng)?;
        kernel = inner.kernel;
        sigma = inner.sigma;
        total_iters += inner.iterations;
        grad_norm = inner.grad_norm;

        let change = beta_gls
            .iter()
            .zip(&beta_old)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        beta_old = beta_gls.clone();
        if change <= eps_beta {
            converged = true;
            break;
        }
    }

    Ok(FitReport {
        beta: Some(beta_gls),
        sigma,
        outputscale: kernel.outputscale,
        lengthscale: kernel.lengthscale,
        iterations: total_iters,
        outer_iterations: outer,
        wall_time_secs: start.elapsed().as_secs_f64(),
        final_grad_norm: grad_norm,
        beta_history,
        converged,
    })
}

/// Posterior prediction at external points. The representer weights
/// `a = (K+s^2 I)^{-1}(y - m(x))` are computed once; means go through the
/// fast merged-schedule MVM, variances through one batched CG solve per
/// evaluation point.
pub fn predict(
    ctx: &GpContext,
    model: &GpModel,
    z: &[Vec<f64>],
    want_variance: bool,
    cfg: &OptimizerConfig,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    cfg.validate()?;
    let kernel = &model.kernel;
    let sigma = model.sigma;
    let d = ctx.data.dim();
    let y = ctx.data.responses();
    let y_c: Vec<f64> = match &model.beta {
        None => y.to_vec(),
        Some(beta) => {
            let h = DesignMatrix::affine(ctx.data)?;
            let hb = h.apply(beta)?;
            y.iter().zip(&hb).map(|(a, b)| a - b).collect()
        }
    };
    let precond = build_precond(ctx, kernel, sigma, cfg)?;
    let alpha = solve_system(ctx, kernel, sigma, &Block::from_column(y_c), cfg, Some(&precond))?
        .solution;

    let merged = build_presort_merged(ctx.data, z)?;
    let plan_z = MvmPlan::new(*kernel, &merged)?;
    let mut means = plan_z.mvm_block(&alpha)?.col(0).to_vec();
    if let Some(beta) = &model.beta {
        for (mj, zj) in means.iter_mut().zip(z) {
            let mut m = beta[0];
            for k in 0..d {
                m += beta[1 + k] * zj[k];
            }
            *mj += m;
        }
    }

    if !want_variance {
        return Ok((means, None));
    }
    let s2 = kernel.outputscale * kernel.outputscale;
    let mut vars = vec![0.0; z.len()];
    const BATCH: usize = 16;
    let mut start = 0;
    while start < z.len() {
        let stop = (start + BATCH).min(z.len());
        let cols: Vec<Vec<f64>> = (start..stop)
            .map(|j| kernel_cross_column(kernel, ctx.data, &z[j]))
            .collect::<Result<_>>()?;
        let rhs = Block::from_columns(&cols)?;
        let solved = solve_system(ctx, kernel, sigma, &rhs, cfg, Some(&precond))?;
        for (local, j) in (start..stop).enumerate() {
            let reduction = dot(&cols[local], solved.solution.col(local));
            vars[j] = (s2 - reduction).max(0.0);
        }
        start = stop;
    }
    Ok((means, Some(vars)))
}

/// Draws GP responses `y = H beta + chol(K) g + sigma g'` at the given
/// points by dense Cholesky sampling; reproducible from the seed.
pub fn simulate_gp(
    kernel: &KernelSpec,
    sigma: f64,
    beta: Option<&[f64]>,
    points: &[Vec<f64>],
    seed: u64,
    dense_cap: usize,
) -> Result<Vec<f64>> {
    let n = points.len();
    if n == 0 {
        return Err(Error::InvalidParameter("simulation needs at least one point".into()));
    }
    if n > dense_cap {
        return Err(Error::SizeLimit(format!(
            "dense sampling is capped at {dense_cap} points (asked for {n}); \
             supply externally generated data for larger draws"
        )));
    }
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
    }
    let data = Dataset::from_rows(points, vec![0.0; n])?;
    let d = data.dim();
    let mut k = kernel_matrix(kernel, &data)?;
    let s2 = kernel.outputscale * kernel.outputscale;
    // Nearby points can make K numerically singular; a tiny deterministic
    // jitter keeps the factorization alive without visibly changing draws.
    let l = match cholesky_lower(&k) {
        Ok(l) => l,
        Err(_) => {
            for i in 0..n {
                k[(i, i)] += 1e-10 * s2;
            }
            cholesky_lower(&k)?
        }
    };
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let g: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let noise: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    let mut y = vec![0.0; n];
    for i in 0..n {
        let mut v = 0.0;
        for j in 0..=i {
            v += l[(i, j)] * g[j];
        }
        y[i] = v + sigma * noise[i];
    }
    if let Some(beta) = beta {
        if beta.len() != d + 1 {
            return Err(Error::DimensionMismatch { context: "beta", expected: d + 1, got: beta.len() });
        }
        for (i, p) in points.iter().enumerate() {
            let mut m = beta[0];
            for (k2, &x) in p.iter().enumerate() {
                m += beta[1 + k2] * x;
            }
            y[i] += m;
        }
    }
    Ok(y)
}
