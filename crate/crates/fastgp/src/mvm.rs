//! Exact O(N log(N)^{d-1}) kernel matrix-vector products and
//! lengthscale-gradient products through the orthant-CDF decomposition,
//! plus the O(N^2) oracles they are tested against.
//!
//! For the L1 form, each sign vector `delta` contributes
//! `outputscale^2 * exp(-c delta.z) * sum_p coef_p(delta.z) * F(w^(p))`
//! with source weights `w_i^(p) = y_i (delta.x_i)^p exp(c delta.x_i)`,
//! `c = sqrt(2 nu) / lengthscale`. Within an orthant a source never has a
//! larger `delta.x` than its target, so every accumulated term stays
//! bounded by `|w_i|` after the target-side exponential is applied.

use crate::block::Block;
use crate::cdf::{PresortIndex, SignVector};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::kernels::{KernelForm, KernelSpec, MaternNu};

/// Largest |exponent| fed to exp() before the plan refuses to build.
pub const EXPONENT_LIMIT: f64 = 700.0;

/// Widest weight block handed to one CDF traversal.
const MAX_CDF_BLOCK: usize = 48;

/// Reusable per-(kernel, point-set) state for fast MVMs: the kernel, a
/// borrowed presort schedule, and per-orthant weight transforms
/// (`delta.x` dot products and their exponentials, which depend on the
/// lengthscale and are rebuilt whenever the kernel changes).
pub struct MvmPlan<'a> {
    kernel: KernelSpec,
    presort: &'a PresortIndex,
    /// Effective form: the product Matérn-1/2 coincides with the L1 form
    /// and is routed through it.
    form: KernelForm,
    /// tdot[delta_index][element] = delta . x for all elements
    /// (sources first, then targets for merged presorts).
    tdot: Vec<Vec<f64>>,
    /// edot[delta_index][element] = exp(c * delta . x).
    edot: Vec<Vec<f64>>,
    compensated: bool,
}

fn weight_sign_flip() -> f64 {
    // Self-test hook: lets the check command demonstrate that an injected
    // sign error in the orthant weights is caught by its oracles.
    if std::env::var_os("FASTGP_SELFTEST_PERTURB").is_some_and(|v| v == "weight-sign") {
        -1.0
    } else {
        1.0
    }
}

impl<'a> MvmPlan<'a> {
    pub fn new(kernel: KernelSpec, presort: &'a PresortIndex) -> Result<Self> {
        Self::with_options(kernel, presort, true)
    }

    pub fn with_options(
        kernel: KernelSpec,
        presort: &'a PresortIndex,
        compensated: bool,
    ) -> Result<Self> {
        if !kernel.decomposition_supported() {
            return Err(Error::UnsupportedKernel(format!(
                "fast MVM supports L1 form for nu in {{1/2, 3/2, 5/2}} and product form for \
                 nu in {{1/2, 3/2}}; got nu = {} with {:?} form",
                kernel.nu, kernel.form
            )));
        }
        let d = presort.dim();
        let form = if kernel.nu == MaternNu::Half { KernelForm::L1 } else { kernel.form };
        let c = kernel.nu.sqrt_2nu() / kernel.lengthscale;
        let n_elems = presort.coord(0).len();
        let ndelta = 1usize << d;
        let mut tdot = Vec::with_capacity(ndelta);
        let mut edot = Vec::with_capacity(ndelta);
        let mut max_exponent = 0.0f64;
        for delta in SignVector::enumerate(d) {
            let mut t = vec![0.0; n_elems];
            for (k, &s) in delta.signs().iter().enumerate() {
                let col = presort.coord(k);
                if s > 0 {
                    for (ti, &x) in t.iter_mut().zip(col) {
                        *ti += x;
                    }
                } else {
                    for (ti, &x) in t.iter_mut().zip(col) {
                        *ti -= x;
                    }
                }
            }
            let mut e = Vec::with_capacity(n_elems);
            for &ti in &t {
                let ex = c * ti;
                max_exponent = max_exponent.max(ex.abs());
                e.push(ex.exp());
            }
            tdot.push(t);
            edot.push(e);
        }
        if max_exponent > EXPONENT_LIMIT {
            return Err(Error::ExponentOverflow { max_exponent, limit: EXPONENT_LIMIT });
        }
        Ok(Self { kernel, presort, form, tdot, edot, compensated })
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn presort(&self) -> &PresortIndex {
        self.presort
    }

    fn n_src(&self) -> usize {
        self.presort.n_sources()
    }

    fn n_tgt(&self) -> usize {
        self.presort.n_targets()
    }

    /// Signed coordinate of element `i` under `delta` (product form needs
    /// per-coordinate values, not just the dot product).
    #[inline]
    fn signed_coord(&self, delta: &SignVector, k: usize, i: usize) -> f64 {
        let x = self.presort.coord(k)[i];
        if delta.signs()[k] > 0 {
            x
        } else {
            -x
        }
    }

    /// Index of a target element in the presort's element numbering.
    #[inline]
    fn tgt_elem(&self, j: usize) -> usize {
        if presort_is_split(self.presort) { self.n_src() + j } else { j }
    }

    /// K * Y for a block of input vectors.
    pub fn mvm_block(&self, y: &Block) -> Result<Block> {
        self.apply_block(y, Mode::Value)
    }

    /// (dK/d lengthscale) * Y for a block of input vectors.
    pub fn grad_lengthscale_block(&self, y: &Block) -> Result<Block> {
        self.apply_block(y, Mode::GradLengthscale)
    }

    fn apply_block(&self, y: &Block, mode: Mode) -> Result<Block> {
        if y.nrows() != self.n_src() {
            return Err(Error::DimensionMismatch {
                context: "mvm input",
                expected: self.n_src(),
                got: y.nrows(),
            });
        }
        if !y.is_finite() {
            return Err(Error::NonFinite { context: "mvm input", index: 0 });
        }
        let mut out = Block::zeros(self.n_tgt(), y.ncols());
        // Terms per input column in one CDF traversal.
        let per_col = match (self.form, mode) {
            (KernelForm::L1, Mode::Value) => self.kernel.nu.p() as usize + 1,
            (KernelForm::L1, Mode::GradLengthscale) => self.kernel.nu.p() as usize + 2,
            (KernelForm::Product, Mode::Value) => 1 << self.presort.dim(),
            (KernelForm::Product, Mode::GradLengthscale) => {
                (3 * self.presort.dim()) << (self.presort.dim() - 1)
            }
        };
        let chunk = (MAX_CDF_BLOCK / per_col).max(1);
        let mut col = 0;
        while col < y.ncols() {
            let m = chunk.min(y.ncols() - col);
            match (self.form, mode) {
                (KernelForm::L1, Mode::Value) => self.l1_chunk(y, col, m, &mut out, false)?,
                (KernelForm::L1, Mode::GradLengthscale) => self.l1_chunk(y, col, m, &mut out, true)?,
                (KernelForm::Product, Mode::Value) => self.product_chunk(y, col, m, &mut out)?,
                (KernelForm::Product, Mode::GradLengthscale) => {
                    self.product_grad_chunk(y, col, m, &mut out)?
                }
            }
            col += m;
        }
        Ok(out)
    }

    /// L1 value and gradient share the same weight columns
    /// `w^(p) = y (delta.x)^p exp(c delta.x)`; only the target-side
    /// combination coefficients differ.
    fn l1_chunk(&self, y: &Block, col0: usize, m: usize, out: &mut Block, grad: bool) -> Result<()> {
        let n = self.n_src();
        let nt = self.n_tgt();
        let p_terms = self.kernel.nu.p() as usize + 1;
        let nw = if grad { p_terms + 1 } else { p_terms };
        let width = m * nw;
        let l = self.kernel.lengthscale;
        let c = self.kernel.nu.sqrt_2nu() / l;
        let s2 = self.kernel.outputscale * self.kernel.outputscale;
        let flip = weight_sign_flip();
        let mut wb = vec![0.0; n * width];
        let mut fb = vec![0.0; nt * width];
        for (di, delta) in SignVector::enumerate(self.presort.dim()).enumerate() {
            let tdot = &self.tdot[di];
            let edot = &self.edot[di];
            for cm in 0..m {
                let yc = y.col(col0 + cm);
                for i in 0..n {
                    let base = yc[i] * edot[i];
                    let t = tdot[i];
                    let mut pw = base;
                    let row = &mut wb[i * width + cm * nw..i * width + (cm + 1) * nw];
                    for slot in row.iter_mut() {
                        *slot = pw;
                        pw *= t * flip;
                    }
                }
            }
            fb.iter_mut().for_each(|v| *v = 0.0);
            self.presort.weighted_cdf_block(&delta, &wb, width, &mut fb, self.compensated)?;
            for j in 0..nt {
                let e = self.tgt_elem(j);
                let u = tdot[e];
                let einv = 1.0 / edot[e];
                let f = &fb[j * width..(j + 1) * width];
                for cm in 0..m {
                    let fw = &f[cm * nw..(cm + 1) * nw];
                    let combo = match (self.kernel.nu.p(), grad) {
                        (0, false) => fw[0],
                        (0, true) => (u * fw[0] - fw[1]) / (l * l),
                        (1, false) => (1.0 + c * u) * fw[0] - c * fw[1],
                        (1, true) => 3.0 / (l * l * l) * (u * u * fw[0] - 2.0 * u * fw[1] + fw[2]),
                        (2, false) => {
                            let q = 5.0 / (3.0 * l * l);
                            (1.0 + c * u + q * u * u) * fw[0] - (c + 2.0 * q * u) * fw[1] + q * fw[2]
                        }
                        (2, true) => {
                            5.0 / (3.0 * l * l * l)
                                * ((c * u * u * u + u * u) * fw[0]
                                    - (2.0 * u + 3.0 * c * u * u) * fw[1]
                                    + (3.0 * c * u + 1.0) * fw[2]
                                    - c * fw[3])
                        }
                        _ => unreachable!("decomposition support checked at plan construction"),
                    };
                    out.col_mut(col0 + cm)[j] += s2 * einv * combo;
                }
            }
        }
        Ok(())
    }

    /// Product Matérn-3/2: for each subset `theta` of coordinates, the
    /// source weight takes the factor `-c delta_k x_k` on coordinates
    /// outside `theta` and the target side takes `(1 + c delta_k z_k)` on
    /// coordinates inside it.
    fn product_chunk(&self, y: &Block, col0: usize, m: usize, out: &mut Block) -> Result<()> {
        let n = self.n_src();
        let nt = self.n_tgt();
        let d = self.presort.dim();
        let nthetas = 1usize << d;
        let width = m * nthetas;
        let l = self.kernel.lengthscale;
        let c = self.kernel.nu.sqrt_2nu() / l;
        let s2 = self.kernel.outputscale * self.kernel.outputscale;
        let flip = weight_sign_flip();
        let mut wb = vec![0.0; n * width];
        let mut fb = vec![0.0; nt * width];
        for (di, delta) in SignVector::enumerate(d).enumerate() {
            let edot = &self.edot[di];
            for cm in 0..m {
                let yc = y.col(col0 + cm);
                for i in 0..n {
                    let base = yc[i] * edot[i];
                    let row = &mut wb[i * width + cm * nthetas..i * width + (cm + 1) * nthetas];
                    for (theta, slot) in row.iter_mut().enumerate() {
                        let mut w = base;
                        for k in 0..d {
                            if theta >> k & 1 == 0 {
                                w *= -c * self.signed_coord(&delta, k, i) * flip;
                            }
                        }
                        *slot = w;
                    }
                }
            }
            fb.iter_mut().for_each(|v| *v = 0.0);
            self.presort.weighted_cdf_block(&delta, &wb, width, &mut fb, self.compensated)?;
            for j in 0..nt {
                let e = self.tgt_elem(j);
                let einv = 1.0 / edot[e];
                let f = &fb[j * width..(j + 1) * width];
                for cm in 0..m {
                    let fw = &f[cm * nthetas..(cm + 1) * nthetas];
                    let mut total = 0.0;
                    for (theta, &fv) in fw.iter().enumerate() {
                        let mut coef = 1.0;
                        for k in 0..d {
                            if theta >> k & 1 == 1 {
                                coef *= 1.0 + c * self.signed_coord(&delta, k, e);
                            }
                        }
                        total += coef * fv;
                    }
                    out.col_mut(col0 + cm)[j] += s2 * einv * total;
                }
            }
        }
        Ok(())
    }

    /// Lengthscale gradient of the product Matérn-3/2 MVM. Differentiating
    /// one coordinate factor turns its two-term split into the three-term
    /// split of `3 s^2 / l^3 e^{-c s}` with `s^2 = (z' - x')^2` expanded by
    /// powers of the source coordinate; the remaining coordinates keep
    /// their usual two-term split.
    fn product_grad_chunk(&self, y: &Block, col0: usize, m: usize, out: &mut Block) -> Result<()> {
        let n = self.n_src();
        let nt = self.n_tgt();
        let d = self.presort.dim();
        let nthetas = 1usize << (d - 1); // subsets of the non-differentiated coords
        let per_k = 3 * nthetas;
        let per_col = d * per_k;
        let width = m * per_col;
        let l = self.kernel.lengthscale;
        let c = self.kernel.nu.sqrt_2nu() / l;
        let s2 = self.kernel.outputscale * self.kernel.outputscale;
        let flip = weight_sign_flip();
        let mut wb = vec![0.0; n * width];
        let mut fb = vec![0.0; nt * width];
        // Coordinates other than k, in a fixed order.
        let others: Vec<Vec<usize>> =
            (0..d).map(|k| (0..d).filter(|&k2| k2 != k).collect()).collect();
        for (di, delta) in SignVector::enumerate(d).enumerate() {
            let edot = &self.edot[di];
            for cm in 0..m {
                let yc = y.col(col0 + cm);
                for i in 0..n {
                    let base = yc[i] * edot[i];
                    let row = &mut wb[i * width + cm * per_col..i * width + (cm + 1) * per_col];
                    for k in 0..d {
                        let sk = self.signed_coord(&delta, k, i);
                        for theta in 0..nthetas {
                            let mut w = base;
                            for (bit, &k2) in others[k].iter().enumerate() {
                                if theta >> bit & 1 == 0 {
                                    w *= -c * self.signed_coord(&delta, k2, i) * flip;
                                }
                            }
                            let off = k * per_k + theta * 3;
                            row[off] = w;
                            row[off + 1] = w * sk;
                            row[off + 2] = w * sk * sk;
                        }
                    }
                }
            }
            fb.iter_mut().for_each(|v| *v = 0.0);
            self.presort.weighted_cdf_block(&delta, &wb, width, &mut fb, self.compensated)?;
            let scale = 3.0 * s2 / (l * l * l);
            for j in 0..nt {
                let e = self.tgt_elem(j);
                let einv = 1.0 / edot[e];
                let f = &fb[j * width..(j + 1) * width];
                for cm in 0..m {
                    let fw = &f[cm * per_col..(cm + 1) * per_col];
                    let mut total = 0.0;
                    for k in 0..d {
                        let zk = self.signed_coord(&delta, k, e);
                        for theta in 0..nthetas {
                            let mut coef = 1.0;
                            for (bit, &k2) in others[k].iter().enumerate() {
                                if theta >> bit & 1 == 1 {
                                    coef *= 1.0 + c * self.signed_coord(&delta, k2, e);
                                }
                            }
                            let off = k * per_k + theta * 3;
                            total += coef
                                * (zk * zk * fw[off] - 2.0 * zk * fw[off + 1] + fw[off + 2]);
                        }
                    }
                    out.col_mut(col0 + cm)[j] += scale * einv * total;
                }
            }
        }
        Ok(())
    }
}

fn presort_is_split(p: &PresortIndex) -> bool {
    // Merged presorts have disjoint source/target element ranges.
    p.coord(0).len() != p.n_sources()
}

#[derive(Clone, Copy, PartialEq)]
enum Mode {
    Value,
    GradLengthscale,
}

/// `out[j] = sum_i y_i K(x_i - x_j)`, the fast path.
pub fn mvm_fast(plan: &MvmPlan, y: &[f64]) -> Result<Vec<f64>> {
    let out = plan.mvm_block(&Block::from_column(y.to_vec()))?;
    Ok(out.col(0).to_vec())
}

/// `out[j] = sum_i y_i dK(x_i - x_j)/d lengthscale`, the fast path.
pub fn mvm_grad_lengthscale(plan: &MvmPlan, y: &[f64]) -> Result<Vec<f64>> {
    let out = plan.grad_lengthscale_block(&Block::from_column(y.to_vec()))?;
    Ok(out.col(0).to_vec())
}

/// `out[j] = sum_i y_i dK(x_i - x_j)/d outputscale = (2/outputscale) (K y)_j`.
pub fn mvm_grad_outputscale(plan: &MvmPlan, y: &[f64]) -> Result<Vec<f64>> {
    let mut out = mvm_fast(plan, y)?;
    let s = 2.0 / plan.kernel().outputscale;
    for v in &mut out {
        *v *= s;
    }
    Ok(out)
}

/// O(N^2) double-loop oracle for `K y`.
pub fn mvm_naive(kernel: &KernelSpec, data: &Dataset, y: &[f64]) -> Result<Vec<f64>> {
    let n = data.len();
    if y.len() != n {
        return Err(Error::DimensionMismatch { context: "mvm input", expected: n, got: y.len() });
    }
    for (i, v) in y.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { context: "mvm input", index: i });
        }
    }
    let d = data.dim();
    let mut out = vec![0.0; n];
    let mut diff = vec![0.0; d];
    for j in 0..n {
        let mut s = 0.0;
        for i in 0..n {
            for k in 0..d {
                diff[k] = data.coord(k)[i] - data.coord(k)[j];
            }
            s += y[i] * kernel.eval_multi(&diff)?;
        }
        out[j] = s;
    }
    Ok(out)
}

/// O(N^2) oracle for `(dK/d lengthscale) y` via the closed-form kernel
/// derivatives.
pub fn mvm_grad_lengthscale_naive(kernel: &KernelSpec, data: &Dataset, y: &[f64]) -> Result<Vec<f64>> {
    let n = data.len();
    if y.len() != n {
        return Err(Error::DimensionMismatch { context: "mvm input", expected: n, got: y.len() });
    }
    let d = data.dim();
    let mut out = vec![0.0; n];
    let mut diff = vec![0.0; d];
    for j in 0..n {
        let mut s = 0.0;
        for i in 0..n {
            for k in 0..d {
                diff[k] = data.coord(k)[i] - data.coord(k)[j];
            }
            s += y[i] * kernel.d_lengthscale_multi(&diff)?;
        }
        out[j] = s;
    }
    Ok(out)
}

/// Dense kernel matrix; oracle/simulation helper.
pub fn kernel_matrix(kernel: &KernelSpec, data: &Dataset) -> Result<nalgebra::DMatrix<f64>> {
    let n = data.len();
    let d = data.dim();
    let mut km = nalgebra::DMatrix::zeros(n, n);
    let mut diff = vec![0.0; d];
    for j in 0..n {
        for i in j..n {
            for k in 0..d {
                diff[k] = data.coord(k)[i] - data.coord(k)[j];
            }
            let v = kernel.eval_multi(&diff)?;
            km[(i, j)] = v;
            km[(j, i)] = v;
        }
    }
    Ok(km)
}

/// Kernel covariance vector between the data points and one external point.
pub fn kernel_cross_column(kernel: &KernelSpec, data: &Dataset, z: &[f64]) -> Result<Vec<f64>> {
    let n = data.len();
    let d = data.dim();
    if z.len() != d {
        return Err(Error::DimensionMismatch { context: "evaluation point", expected: d, got: z.len() });
    }
    let mut out = vec![0.0; n];
    let mut diff = vec![0.0; d];
    for (i, o) in out.iter_mut().enumerate() {
        for k in 0..d {
            diff[k] = data.coord(k)[i] - z[k];
        }
        *o = kernel.eval_multi(&diff)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cdf::build_presort;
    use rand::prelude::*;
    use rand_chacha::ChaCha20Rng;

    fn random_dataset(rng: &mut ChaCha20Rng, n: usize, d: usize) -> Dataset {
        let cols: Vec<Vec<f64>> = (0..d).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect();
        let y = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
        Dataset::from_columns(&cols, y).unwrap()
    }

    fn supported_kernels(l: f64) -> Vec<KernelSpec> {
        vec![
            KernelSpec::new(MaternNu::Half, KernelForm::L1, 1.3, l).unwrap(),
            KernelSpec::new(MaternNu::ThreeHalves, KernelForm::L1, 0.9, l).unwrap(),
            KernelSpec::new(MaternNu::FiveHalves, KernelForm::L1, 1.1, l).unwrap(),
            KernelSpec::new(MaternNu::Half, KernelForm::Product, 1.3, l).unwrap(),
            KernelSpec::new(MaternNu::ThreeHalves, KernelForm::Product, 0.8, l).unwrap(),
        ]
    }

    #[test]
    fn naive_trivial_cases() {
        let data = Dataset::from_rows(&[vec![0.3, 0.4]], vec![0.0]).unwrap();
        let kernel = KernelSpec::new(MaternNu::ThreeHalves, KernelForm::L1, 2.0, 1.0).unwrap();
        assert_eq!(mvm_naive(&kernel, &data, &[3.0]).unwrap(), vec![12.0]); // y1 * outputscale^2

        let mut rng = ChaCha20Rng::seed_from_u64(1);
        let data = random_dataset(&mut rng, 50, 2);
        assert!(mvm_naive(&kernel, &data, &vec![0.0; 50]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn naive_symmetry() {
        let mut rng = ChaCha20Rng::seed_from_u64(2);
        let data = random_dataset(&mut rng, 200, 2);
        let kernel = KernelSpec::new(MaternNu::Half, KernelForm::L1, 1.0, 0.4).unwrap();
        let y: Vec<f64> = (0..200).map(|_| rng.gen::<f64>()).collect();
        let w: Vec<f64> = (0..200).map(|_| rng.gen::<f64>()).collect();
        let ky = mvm_naive(&kernel, &data, &y).unwrap();
        let kw = mvm_naive(&kernel, &data, &w).unwrap();
        let a: f64 = ky.iter().zip(&w).map(|(x, y)| x * y).sum();
        let b: f64 = kw.iter().zip(&y).map(|(x, y)| x * y).sum();
        assert!((a - b).abs() <= 1e-10 * a.abs().max(1.0));
    }

    #[test]
    fn two_point_hand_computed() {
        let data = Dataset::from_rows(&[vec![0.0], vec![1.0]], vec![0.0, 0.0]).unwrap();
        let kernel = KernelSpec::new(MaternNu::Half, KernelForm::L1, 1.0, 1.0).unwrap();
        let ps = build_presort(&data).unwrap();
        let plan = MvmPlan::new(kernel, &ps).unwrap();
        let out = mvm_fast(&plan, &[1.0, 1.0]).unwrap();
        let expect = 1.0 + (-1.0f64).exp();
        assert!((out[0] - expect).abs() < 1e-14);
        assert!((out[1] - expect).abs() < 1e-14);
    }

    #[test]
    fn fast_matches_naive_all_supported() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for d in 1..=3usize {
            let n = 230;
            let data = random_dataset(&mut rng, n, d);
            let ps = build_presort(&data).unwrap();
            let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            for kernel in supported_kernels(0.35) {
                let plan = MvmPlan::new(kernel, &ps).unwrap();
                let fast = mvm_fast(&plan, &y).unwrap();
                let naive = mvm_naive(&kernel, &data, &y).unwrap();
                let scale = naive.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let err = fast
                    .iter()
                    .zip(&naive)
                    .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                assert!(
                    err <= 1e-10 * scale,
                    "d={d} kernel={:?}/{}: err={err:.3e} scale={scale:.3e}",
                    kernel.form,
                    kernel.nu
                );
            }
        }
    }

    #[test]
    fn unit_vector_recovers_kernel_column() {
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let n = 120;
        let data = random_dataset(&mut rng, n, 2);
        let ps = build_presort(&data).unwrap();
        let kernel = KernelSpec::new(MaternNu::FiveHalves, KernelForm::L1, 1.0, 0.5).unwrap();
        let plan = MvmPlan::new(kernel, &ps).unwrap();
        let jcol = 17;
        let mut e = vec![0.0; n];
        e[jcol] = 1.0;
        let col = mvm_fast(&plan, &e).unwrap();
        let mut diff = vec![0.0; 2];
        for i in 0..n {
            for k in 0..2 {
                diff[k] = data.coord(k)[jcol] - data.coord(k)[i];
            }
            let direct = kernel.eval_multi(&diff).unwrap();
            assert!(
                (col[i] - direct).abs() <= 1e-12 * direct.max(1.0),
                "i={i}: {} vs {}",
                col[i],
                direct
            );
        }
    }

    #[test]
    fn grad_lengthscale_single_point_is_zero() {
        let data = Dataset::from_rows(&[vec![0.5, 0.5]], vec![0.0]).unwrap();
        let ps = build_presort(&data).unwrap();
        for kernel in supported_kernels(0.7) {
            if data.dim() == 2 {
                let plan = MvmPlan::new(kernel, &ps).unwrap();
                let g = mvm_grad_lengthscale(&plan, &[2.0]).unwrap();
                // Zero in exact arithmetic; roundoff leaves ~ulp-scale
                // residue from the cancelling polynomial terms.
                assert!(g[0].abs() < 1e-12, "{:?}/{} gave {}", kernel.form, kernel.nu, g[0]);
            }
        }
    }

    #[test]
    fn grad_lengthscale_matches_dense_oracle() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for d in 1..=3usize {
            let n = 150;
            let data = random_dataset(&mut rng, n, d);
            let ps = build_presort(&data).unwrap();
            let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect();
            for kernel in supported_kernels(0.45) {
                let plan = MvmPlan::new(kernel, &ps).unwrap();
                let fast = mvm_grad_lengthscale(&plan, &y).unwrap();
                let dense = mvm_grad_lengthscale_naive(&kernel, &data, &y).unwrap();
                let scale = dense.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                let err = fast.iter().zip(&dense).fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
                assert!(
                    err <= 1e-10 * scale.max(1e-30),
                    "d={d} {:?}/{}: err={err:.3e} scale={scale:.3e}",
                    kernel.form,
                    kernel.nu
                );
            }
        }
    }

    #[test]
    fn grad_lengthscale_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(13);
        let n = 100;
        let data = random_dataset(&mut rng, n, 2);
        let ps = build_presort(&data).unwrap();
        let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        for kernel in supported_kernels(0.6) {
            let l = kernel.lengthscale;
            let h = l * 1e-6;
            let kp = KernelSpec::new(kernel.nu, kernel.form, kernel.outputscale, l + h).unwrap();
            let km = KernelSpec::new(kernel.nu, kernel.form, kernel.outputscale, l - h).unwrap();
            let fp = mvm_fast(&MvmPlan::new(kp, &ps).unwrap(), &y).unwrap();
            let fm = mvm_fast(&MvmPlan::new(km, &ps).unwrap(), &y).unwrap();
            let grad = mvm_grad_lengthscale(&MvmPlan::new(kernel, &ps).unwrap(), &y).unwrap();
            let scale = grad.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            for j in 0..n {
                let fd = (fp[j] - fm[j]) / (2.0 * h);
                assert!(
                    (fd - grad[j]).abs() <= 1e-6 * scale,
                    "{:?}/{} j={j}: fd={fd} grad={}",
                    kernel.form,
                    kernel.nu,
                    grad[j]
                );
            }
        }
    }

    #[test]
    fn grad_outputscale_is_scaled_mvm() {
        let mut rng = ChaCha20Rng::seed_from_u64(15);
        let n = 80;
        let data = random_dataset(&mut rng, n, 2);
        let ps = build_presort(&data).unwrap();
        let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let kernel = KernelSpec::new(MaternNu::Half, KernelForm::L1, 1.0, 0.3).unwrap();
        let plan = MvmPlan::new(kernel, &ps).unwrap();
        let kv = mvm_fast(&plan, &y).unwrap();
        let g = mvm_grad_outputscale(&plan, &y).unwrap();
        for j in 0..n {
            assert!((g[j] - 2.0 * kv[j]).abs() <= 1e-12 * kv[j].abs().max(1.0));
        }
        // Dense oracle: dK/d outputscale = 2 outputscale K(standard).
        let kernel2 = KernelSpec::new(MaternNu::ThreeHalves, KernelForm::L1, 1.7, 0.3).unwrap();
        let plan2 = MvmPlan::new(kernel2, &ps).unwrap();
        let g2 = mvm_grad_outputscale(&plan2, &y).unwrap();
        let naive = mvm_naive(&kernel2, &data, &y).unwrap();
        for j in 0..n {
            let expect = 2.0 / 1.7 * naive[j];
            assert!((g2[j] - expect).abs() <= 1e-10 * expect.abs().max(1.0));
        }
        assert!(mvm_grad_outputscale(&plan2, &vec![0.0; n]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linearity() {
        let mut rng = ChaCha20Rng::seed_from_u64(17);
        let n = 90;
        let data = random_dataset(&mut rng, n, 2);
        let ps = build_presort(&data).unwrap();
        let kernel = KernelSpec::new(MaternNu::ThreeHalves, KernelForm::L1, 1.0, 0.4).unwrap();
        let plan = MvmPlan::new(kernel, &ps).unwrap();
        let y: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let w: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let (a, b) = (1.7, -0.6);
        let mix: Vec<f64> = y.iter().zip(&w).map(|(yi, wi)| a * yi + b * wi).collect();
        let lhs = mvm_fast(&plan, &mix).unwrap();
        let ky = mvm_fast(&plan, &y).unwrap();
        let kw = mvm_fast(&plan, &w).unwrap();
        let scale = lhs.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        for j in 0..n {
            assert!((lhs[j] - (a * ky[j] + b * kw[j])).abs() <= 1e-11 * scale);
        }
    }

    #[test]
    fn overflow_guard_fires_with_instruction() {
        let data = Dataset::from_rows(&[vec![0.0], vec![900.0]], vec![0.0, 0.0]).unwrap();
        let ps = build_presort(&data).unwrap();
        let kernel = KernelSpec::new(MaternNu::Half, KernelForm::L1, 1.0, 1.0).unwrap();
        let err = match MvmPlan::new(kernel, &ps) {
            Err(e) => e,
            Ok(_) => panic!("plan construction should fail on exponent overflow"),
        };
        let msg = err.to_string();
        assert!(msg.contains("rescale"), "error should instruct rescaling: {msg}");
    }

    #[test]
    fn unsupported_combinations_rejected() {
        let mut rng = ChaCha20Rng::seed_from_u64(19);
        let data = random_dataset(&mut rng, 10, 2);
        let ps = build_presort(&data).unwrap();
        for kernel in [
            KernelSpec::new(MaternNu::FiveHalves, KernelForm::Product, 1.0, 1.0).unwrap(),
            KernelSpec::new(MaternNu::SevenHalves, KernelForm::L1, 1.0, 1.0).unwrap(),
        ] {
            assert!(MvmPlan::new(kernel, &ps).is_err());
        }
    }

    #[test]
    fn block_and_single_column_agree() {
        let mut rng = ChaCha20Rng::seed_from_u64(21);
        let n = 70;
        let data = random_dataset(&mut rng, n, 2);
        let ps = build_presort(&data).unwrap();
        let kernel = KernelSpec::new(MaternNu::FiveHalves, KernelForm::L1, 1.0, 0.5).unwrap();
        let plan = MvmPlan::new(kernel, &ps).unwrap();
        let cols: Vec<Vec<f64>> =
            (0..5).map(|_| (0..n).map(|_| rng.gen::<f64>()).collect()).collect();
        let block = plan.mvm_block(&Block::from_columns(&cols).unwrap()).unwrap();
        for (c, col) in cols.iter().enumerate() {
            let single = mvm_fast(&plan, col).unwrap();
            assert_eq!(block.col(c), single.as_slice());
        }
    }
}
