//! Iterative machinery for the shifted kernel system (K + sigma^2 I):
//! multi-RHS preconditioned conjugate gradients with partial Lanczos
//! tridiagonalization, a pivoted-Cholesky preconditioner with Woodbury
//! solves, and stochastic log-determinant / trace estimation.

use crate::block::{axpy, dot, Block};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::KernelSpec;
use crate::mvm::MvmPlan;
use nalgebra::DMatrix;
use rand::prelude::*;
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

/// Symmetric positive definite operator available only through its action
/// on a block of vectors.
pub trait SpdOperator {
    fn size(&self) -> usize;
    fn apply_block(&self, b: &Block) -> Result<Block>;
}

/// `(K + sigma^2 I) v` backed by the fast MVM.
pub struct ShiftedKernelOp<'a> {
    plan: &'a MvmPlan<'a>,
    sigma2: f64,
}

impl<'a> ShiftedKernelOp<'a> {
    pub fn new(plan: &'a MvmPlan<'a>, sigma: f64) -> Result<Self> {
        if plan.presort().n_sources() != plan.presort().n_targets() {
            return Err(Error::InvalidParameter(
                "shifted kernel operator requires a square (data-point) presort".into(),
            ));
        }
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!("sigma must be >= 0, got {sigma}")));
        }
        Ok(Self { plan, sigma2: sigma * sigma })
    }

    pub fn sigma2(&self) -> f64 {
        self.sigma2
    }

    pub fn plan(&self) -> &MvmPlan<'a> {
        self.plan
    }
}

impl SpdOperator for ShiftedKernelOp<'_> {
    fn size(&self) -> usize {
        self.plan.presort().n_sources()
    }

    fn apply_block(&self, b: &Block) -> Result<Block> {
        let mut out = self.plan.mvm_block(b)?;
        for j in 0..b.ncols() {
            axpy(self.sigma2, b.col(j), out.col_mut(j));
        }
        Ok(out)
    }
}

/// Operator defined by a closure; handy for dense references in tests and
/// for synthetic gradient operators.
pub struct FnOperator<F: Fn(&Block) -> Result<Block>> {
    n: usize,
    f: F,
}

impl<F: Fn(&Block) -> Result<Block>> FnOperator<F> {
    pub fn new(n: usize, f: F) -> Self {
        Self { n, f }
    }
}

impl<F: Fn(&Block) -> Result<Block>> SpdOperator for FnOperator<F> {
    fn size(&self) -> usize {
        self.n
    }

    fn apply_block(&self, b: &Block) -> Result<Block> {
        (self.f)(b)
    }
}

/// Rank-k pivoted Cholesky factor of a kernel matrix plus diagnostics.
pub struct LowRankFactor {
    /// N x k lower-trapezoidal factor, column-major.
    pub l: Block,
    /// Pivot order (data indices chosen greedily by largest residual diagonal).
    pub pivots: Vec<usize>,
    /// Residual trace after each accepted pivot.
    pub residual_traces: Vec<f64>,
}

/// Greedy pivoted Cholesky on an implicitly defined PSD matrix: `diag0` is
/// its diagonal, `column(p)` returns column p. Stops early when the
/// residual diagonal is numerically exhausted.
pub fn pivoted_cholesky_impl(
    diag0: Vec<f64>,
    column: impl Fn(usize) -> Result<Vec<f64>>,
    rank: usize,
    pivot_tol: f64,
) -> Result<LowRankFactor> {
    let n = diag0.len();
    let rank = rank.min(n);
    if rank == 0 {
        return Err(Error::InvalidParameter("pivoted Cholesky rank must be >= 1".into()));
    }
    let mut d = diag0;
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(rank);
    let mut pivots = Vec::with_capacity(rank);
    let mut residual_traces = Vec::with_capacity(rank);
    let mut used = vec![false; n];
    for _ in 0..rank {
        let mut p = usize::MAX;
        let mut best = f64::NEG_INFINITY;
        for (i, &v) in d.iter().enumerate() {
            if !used[i] && v > best {
                best = v;
                p = i;
            }
        }
        if best < -pivot_tol {
            return Err(Error::NotPositiveDefinite(format!(
                "pivoted Cholesky found residual diagonal {best:.3e} at index {p}"
            )));
        }
        if best <= pivot_tol {
            break; // numerically exact factorization reached
        }
        let lpp = best.sqrt();
        let mut newcol = column(p)?;
        // Column-wise downdate keeps the memory walk sequential.
        for prev in &cols {
            axpy(-prev[p], prev, &mut newcol);
        }
        for (i, v) in newcol.iter_mut().enumerate() {
            if used[i] {
                *v = 0.0;
            } else {
                *v /= lpp;
            }
        }
        newcol[p] = lpp;
        for i in 0..n {
            if !used[i] {
                d[i] -= newcol[i] * newcol[i];
            }
        }
        d[p] = 0.0;
        used[p] = true;
        pivots.push(p);
        residual_traces.push(d.iter().enumerate().filter(|(i, _)| !used[*i]).map(|(_, v)| v.max(0.0)).sum());
        cols.push(newcol);
    }
    let k = cols.len();
    let mut l = Block::zeros(n, k);
    for (t, c) in cols.into_iter().enumerate() {
        l.col_mut(t).copy_from_slice(&c);
    }
    Ok(LowRankFactor { l, pivots, residual_traces })
}

/// Rank-k pivoted Cholesky of the kernel matrix over a dataset
/// (greedy largest-diagonal pivoting; never forms the dense matrix).
pub fn pivoted_cholesky(kernel: &KernelSpec, data: &Dataset, rank: usize) -> Result<LowRankFactor> {
    let n = data.len();
    let d = data.dim();
    let s2 = kernel.outputscale * kernel.outputscale;
    let diag = vec![s2; n];
    let column = |p: usize| -> Result<Vec<f64>> {
        let mut col = vec![0.0; n];
        let mut diff = vec![0.0; d];
        for (i, c) in col.iter_mut().enumerate() {
            for k in 0..d {
                diff[k] = data.coord(k)[i] - data.coord(k)[p];
            }
            *c = kernel.eval_multi(&diff)?;
        }
        Ok(col)
    };
    pivoted_cholesky_impl(diag, column, rank, 1e-10 * s2)
}

/// Preconditioner `P = L L^T + sigma^2 I`, applied through the Woodbury
/// identity with a cached k x k Cholesky of `I_k + L^T L / sigma^2`.
pub struct Preconditioner {
    l: DMatrix<f64>,
    lt: DMatrix<f64>,   // cached transpose so applies run through gemm
    gram: DMatrix<f64>, // L^T L, reusable across nugget updates
    sigma: f64,
    sigma2: f64,
    small_l: DMatrix<f64>, // lower Cholesky factor of I_k + L^T L / sigma^2
}

impl Preconditioner {
    pub fn new(factor: LowRankFactor, sigma: f64) -> Result<Self> {
        let n = factor.l.nrows();
        let k = factor.l.ncols();
        let l = DMatrix::from_column_slice(n, k, factor.l.data());
        let lt = l.transpose();
        let gram = &lt * &l;
        Self::assemble(l, lt, gram, sigma)
    }

    /// Same factor, different nugget; the k x k gram is reused.
    pub fn reweighted(&self, sigma: f64) -> Result<Self> {
        Self::assemble(self.l.clone(), self.lt.clone(), self.gram.clone(), sigma)
    }

    fn assemble(l: DMatrix<f64>, lt: DMatrix<f64>, gram: DMatrix<f64>, sigma: f64) -> Result<Self> {
        if !(sigma > 0.0) || !sigma.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "Woodbury preconditioning requires sigma > 0, got {sigma}"
            )));
        }
        let sigma2 = sigma * sigma;
        let k = l.ncols();
        let mut small = &gram / sigma2;
        for a in 0..k {
            small[(a, a)] += 1.0;
        }
        let small_l = crate::dense::cholesky_lower(&small)?;
        Ok(Self { l, lt, gram, sigma, sigma2, small_l })
    }

    /// Convenience: rank-k pivoted Cholesky of K, then the Woodbury wrap.
    pub fn from_kernel(kernel: &KernelSpec, data: &Dataset, rank: usize, sigma: f64) -> Result<Self> {
        Preconditioner::new(pivoted_cholesky(kernel, data, rank)?, sigma)
    }

    pub fn rank(&self) -> usize {
        self.l.ncols()
    }

    pub fn size(&self) -> usize {
        self.l.nrows()
    }

    /// `P^{-1} B = B/sigma^2 - (1/sigma^4) L (I + L^T L/sigma^2)^{-1} L^T B`,
    /// O(N k) per column; the N x k products go through gemm.
    pub fn solve_block(&self, b: &Block) -> Block {
        let n = self.l.nrows();
        let k = self.l.ncols();
        let mut out = b.clone();
        for v in out.data_mut() {
            *v /= self.sigma2;
        }
        if k == 0 {
            return out;
        }
        let bm = nalgebra::DMatrixView::from_slice(b.data(), n, b.ncols());
        let mut small = &self.lt * bm;
        for j in 0..b.ncols() {
            let solved = crate::dense::cholesky_solve_vec(&self.small_l, small.column(j).as_slice());
            small.column_mut(j).copy_from_slice(&solved);
        }
        let correction = &self.l * small;
        let scale = 1.0 / (self.sigma2 * self.sigma2);
        for (o, c) in out.data_mut().iter_mut().zip(correction.as_slice()) {
            *o -= scale * c;
        }
        out
    }

    /// Exact `log det(P)` via Sylvester's determinant theorem:
    /// `2N log(sigma) + log det(I_k + L^T L / sigma^2)`.
    pub fn logdet(&self) -> f64 {
        2.0 * self.l.nrows() as f64 * self.sigma.ln()
            + crate::dense::logdet_from_cholesky(&self.small_l)
    }

    /// Draws one `N(0, P)` vector as `L g1 + sigma g2`.
    pub fn sample(&self, rng: &mut ChaCha20Rng) -> Vec<f64> {
        let n = self.l.nrows();
        let k = self.l.ncols();
        let mut z: Vec<f64> = (0..n).map(|_| self.sigma * rng.sample::<f64, _>(StandardNormal)).collect();
        for t in 0..k {
            let g: f64 = rng.sample(StandardNormal);
            axpy(g, self.l.column(t).as_slice(), &mut z);
        }
        z
    }
}

/// Symmetric tridiagonal matrix from a partial Lanczos decomposition,
/// assembled from the conjugate-gradient recurrence coefficients.
#[derive(Debug, Clone)]
pub struct LanczosTridiag {
    pub diag: Vec<f64>,
    pub offdiag: Vec<f64>,
}

impl LanczosTridiag {
    pub fn order(&self) -> usize {
        self.diag.len()
    }

    fn dense(&self) -> DMatrix<f64> {
        let m = self.order();
        let mut t = DMatrix::zeros(m, m);
        for i in 0..m {
            t[(i, i)] = self.diag[i];
            if i + 1 < m {
                t[(i + 1, i)] = self.offdiag[i];
                t[(i, i + 1)] = self.offdiag[i];
            }
        }
        t
    }

    /// Eigenvalues, ascending.
    pub fn eigenvalues(&self) -> Vec<f64> {
        let mut ev: Vec<f64> = self.dense().symmetric_eigen().eigenvalues.iter().copied().collect();
        ev.sort_by(f64::total_cmp);
        ev
    }

    /// `e_1^T log(T) e_1`; errors if T is not positive definite.
    pub fn log_quadratic_e1(&self) -> Result<f64> {
        if self.order() == 0 {
            return Ok(0.0);
        }
        let eig = self.dense().symmetric_eigen();
        let mut total = 0.0;
        for (q, &lambda) in eig.eigenvalues.iter().enumerate() {
            if lambda <= 0.0 {
                return Err(Error::NotPositiveDefinite(format!(
                    "Lanczos tridiagonal has eigenvalue {lambda:.3e}; \
                     increase the Lanczos iteration count or add diagonal jitter"
                )));
            }
            let w = eig.eigenvectors[(0, q)];
            total += w * w * lambda.ln();
        }
        Ok(total)
    }
}

/// Result of the multi-RHS CG run.
pub struct CgOutcome {
    pub solution: Block,
    pub iterations: usize,
    pub converged: bool,
    pub residual_norm: f64,
    pub tridiags: Vec<LanczosTridiag>,
}

/// Per-iteration view handed to an observer (dense tests track error decay).
pub struct CgIterate<'a> {
    pub iteration: usize,
    pub solution: &'a Block,
    pub residual: &'a Block,
}

/// Multi-RHS preconditioned conjugate gradients with partial Lanczos
/// tridiagonalization, zero initial guess.
///
/// The aggregate residual test is over all columns (squared Frobenius
/// norm); `tol` is the residual norm threshold. Columns whose residual
/// vanishes exactly are frozen and their tridiagonal stops growing.
pub fn cg_lanczos(
    op: &dyn SpdOperator,
    b: &Block,
    precond: Option<&Preconditioner>,
    max_iter: usize,
    tol: f64,
) -> Result<CgOutcome> {
    cg_lanczos_observed(op, b, precond, max_iter, tol, &mut |_| {})
}

pub fn cg_lanczos_observed(
    op: &dyn SpdOperator,
    b: &Block,
    precond: Option<&Preconditioner>,
    max_iter: usize,
    tol: f64,
    observer: &mut dyn FnMut(&CgIterate),
) -> Result<CgOutcome> {
    let n = op.size();
    if b.nrows() != n {
        return Err(Error::DimensionMismatch { context: "cg rhs", expected: n, got: b.nrows() });
    }
    if let Some(p) = precond {
        if p.size() != n {
            return Err(Error::DimensionMismatch { context: "preconditioner", expected: n, got: p.size() });
        }
    }
    let ncols = b.ncols();
    let mut x = Block::zeros(n, ncols);
    let mut r = b.clone();
    let mut z = match precond {
        Some(p) => p.solve_block(&r),
        None => r.clone(),
    };
    let mut p = z.clone();
    let mut k: Vec<f64> = (0..ncols).map(|j| dot(p.col(j), r.col(j))).collect();
    let mut frozen: Vec<bool> = k.iter().map(|&kj| kj == 0.0).collect();
    for (j, f) in frozen.iter().enumerate() {
        if *f {
            for v in p.col_mut(j) {
                *v = 0.0;
            }
        }
    }
    let mut alpha = vec![0.0; ncols];
    let mut alpha_prev = vec![1.0; ncols];
    let mut beta_prev = vec![0.0; ncols];
    let mut diags: Vec<Vec<f64>> = vec![Vec::new(); ncols];
    let mut offdiags: Vec<Vec<f64>> = vec![Vec::new(); ncols];
    let mut iterations = 0;
    let mut residual_norm = r.frobenius_norm_sq().sqrt();
    let mut converged = residual_norm < tol || frozen.iter().all(|&f| f);

    while !converged && iterations < max_iter {
        let t = op.apply_block(&p)?;
        for j in 0..ncols {
            if frozen[j] {
                continue;
            }
            let pap = dot(p.col(j), t.col(j));
            if pap <= 0.0 || !pap.is_finite() {
                return Err(Error::SolverBreakdown {
                    iteration: iterations + 1,
                    column: j,
                    detail: format!("search-direction energy p^T A p = {pap:.3e} (operator not SPD?)"),
                });
            }
            alpha[j] = k[j] / pap;
            axpy(alpha[j], p.col(j), x.col_mut(j));
            axpy(-alpha[j], t.col(j), r.col_mut(j));
            // Lanczos diagonal for this iteration; recorded before the
            // residual test so a converged run keeps its final entry.
            diags[j].push(1.0 / alpha[j] + beta_prev[j] / alpha_prev[j]);
        }
        iterations += 1;
        observer(&CgIterate { iteration: iterations, solution: &x, residual: &r });
        residual_norm = r.frobenius_norm_sq().sqrt();
        if residual_norm < tol {
            converged = true;
            break;
        }
        z = match precond {
            Some(pc) => pc.solve_block(&r),
            None => r.clone(),
        };
        let mut all_frozen = true;
        for j in 0..ncols {
            if frozen[j] {
                continue;
            }
            let knew = dot(z.col(j), r.col(j));
            if knew < 0.0 || !knew.is_finite() {
                return Err(Error::SolverBreakdown {
                    iteration: iterations,
                    column: j,
                    detail: format!("preconditioned residual energy {knew:.3e} (preconditioner not SPD?)"),
                });
            }
            if knew == 0.0 {
                frozen[j] = true;
                for v in p.col_mut(j) {
                    *v = 0.0;
                }
                continue;
            }
            all_frozen = false;
            let beta = knew / k[j];
            k[j] = knew;
            let pj = p.col_mut(j);
            for (pv, zv) in pj.iter_mut().zip(z.col(j)) {
                *pv = zv + beta * *pv;
            }
            offdiags[j].push(beta.sqrt() / alpha[j]);
            alpha_prev[j] = alpha[j];
            beta_prev[j] = beta;
        }
        if all_frozen {
            converged = true;
            break;
        }
    }

    let tridiags = diags
        .into_iter()
        .zip(offdiags)
        .map(|(diag, mut offdiag)| {
            offdiag.truncate(diag.len().saturating_sub(1));
            LanczosTridiag { diag, offdiag }
        })
        .collect();
    Ok(CgOutcome { solution: x, iterations, converged, residual_norm, tridiags })
}

/// Reproducible set of standard-Gaussian probe vectors.
pub struct ProbeSet {
    pub seed: u64,
    vectors: Block,
}

impl ProbeSet {
    pub fn standard_normal(n: usize, count: usize, seed: u64) -> Result<Self> {
        if count == 0 {
            return Err(Error::InvalidParameter("probe count must be >= 1".into()));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut vectors = Block::zeros(n, count);
        for j in 0..count {
            for v in vectors.col_mut(j) {
                *v = rng.sample(StandardNormal);
            }
        }
        Ok(Self { seed, vectors })
    }

    pub fn count(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn vectors(&self) -> &Block {
        &self.vectors
    }
}

/// Stochastic estimate of `log det(K + sigma^2 I)`.
///
/// Unpreconditioned: `(N/n_probe) sum_i e_1^T log(T_i) e_1` over `m`-step
/// Lanczos tridiagonals started from N(0, I) probes. With a preconditioner
/// the same sum (with N(0, P) probes) estimates `log det(P^{-1}(K+s^2 I))`
/// and the exact `log det(P)` is added via Sylvester's theorem.
pub fn logdet_estimate(
    op: &dyn SpdOperator,
    precond: Option<&Preconditioner>,
    n_probe: usize,
    m: usize,
    seed: u64,
) -> Result<f64> {
    if n_probe == 0 || m == 0 {
        return Err(Error::InvalidParameter("logdet needs n_probe >= 1 and m >= 1".into()));
    }
    let n = op.size();
    let probes = match precond {
        None => ProbeSet::standard_normal(n, n_probe, seed)?.vectors,
        Some(p) => {
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let cols: Vec<Vec<f64>> = (0..n_probe).map(|_| p.sample(&mut rng)).collect();
            Block::from_columns(&cols)?
        }
    };
    // tol = 0: always run the full m iterations (early exit only on exact
    // convergence through column freezing).
    let outcome = cg_lanczos(op, &probes, precond, m, 0.0)?;
    let mut lanczos_sum = 0.0;
    for t in &outcome.tridiags {
        lanczos_sum += t.log_quadratic_e1()?;
    }
    let mut estimate = n as f64 / n_probe as f64 * lanczos_sum;
    if let Some(p) = precond {
        estimate += p.logdet();
    }
    Ok(estimate)
}

/// Hutchinson estimate of `tr((K + sigma^2 I)^{-1} dK/dtheta)`:
/// `(1/n_probe) sum_i z_i^T (K+s^2 I)^{-1} (dK/dtheta) z_i` with N(0, I)
/// probes; the linear solves run through [`cg_lanczos`].
pub fn trace_term_estimate(
    op: &dyn SpdOperator,
    grad_apply: &dyn Fn(&Block) -> Result<Block>,
    probes: &ProbeSet,
    precond: Option<&Preconditioner>,
    max_iter: usize,
    tol: f64,
) -> Result<f64> {
    let z = probes.vectors();
    let outcome = cg_lanczos(op, z, precond, max_iter, tol)?;
    if !outcome.converged {
        return Err(Error::SolverDidNotConverge {
            max_iter,
            residual: outcome.residual_norm,
            tol,
        });
    }
    let gz = grad_apply(z)?;
    let mut total = 0.0;
    for j in 0..z.ncols() {
        total += dot(outcome.solution.col(j), gz.col(j));
    }
    Ok(total / z.ncols() as f64)
}
