//! Half-integer Matérn covariance functions, their lengthscale derivatives,
//! and the two-factor decompositions that the fast MVM formulas consume.
//!
//! Every kernel here is polynomial-times-exponential:
//! `k(u) = (sum_i a_i u^i) * exp(-c u)` with `c = sqrt(2 nu)`, so one
//! coefficient routine serves evaluation, derivatives and factorization.

use crate::error::{Error, Result};

/// Smoothness parameter `nu = p + 1/2`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum MaternNu {
    Half,
    ThreeHalves,
    FiveHalves,
    SevenHalves,
    NineHalves,
    /// `nu = p + 1/2` for arbitrary `p` (plain evaluation only).
    General(u32),
}

impl MaternNu {
    /// The integer `p` in `nu = p + 1/2`.
    pub fn p(self) -> u32 {
        match self {
            MaternNu::Half => 0,
            MaternNu::ThreeHalves => 1,
            MaternNu::FiveHalves => 2,
            MaternNu::SevenHalves => 3,
            MaternNu::NineHalves => 4,
            MaternNu::General(p) => p,
        }
    }

    /// `sqrt(2 nu) = sqrt(2p + 1)`.
    pub fn sqrt_2nu(self) -> f64 {
        f64::from(2 * self.p() + 1).sqrt()
    }

    pub fn value(self) -> f64 {
        f64::from(self.p()) + 0.5
    }
}

impl std::fmt::Display for MaternNu {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/2", 2 * self.p() + 1)
    }
}

/// How a univariate kernel is extended to `R^d`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum KernelForm {
    /// `K(u) = k(||u||_1)`.
    L1,
    /// `K(u) = prod_k k(|u_k|)`.
    Product,
}

/// Scaled Matérn covariance `K(u) = outputscale^2 * k(u / lengthscale)`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct KernelSpec {
    pub nu: MaternNu,
    pub form: KernelForm,
    pub outputscale: f64,
    pub lengthscale: f64,
}

impl KernelSpec {
    pub fn new(nu: MaternNu, form: KernelForm, outputscale: f64, lengthscale: f64) -> Result<Self> {
        if !(outputscale > 0.0) || !outputscale.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "outputscale must be positive and finite, got {outputscale}"
            )));
        }
        if !(lengthscale > 0.0) || !lengthscale.is_finite() {
            return Err(Error::InvalidParameter(format!(
                "lengthscale must be positive and finite, got {lengthscale}"
            )));
        }
        Ok(Self { nu, form, outputscale, lengthscale })
    }

    /// Does the fast MVM have an exact decomposition for this (nu, form)?
    pub fn decomposition_supported(&self) -> bool {
        match self.form {
            KernelForm::L1 => self.nu.p() <= 2,
            KernelForm::Product => self.nu.p() <= 1,
        }
    }

    /// Scaled univariate evaluation `outputscale^2 * k(|u| / lengthscale)`.
    pub fn eval_1d(&self, u: f64) -> Result<f64> {
        if !u.is_finite() {
            return Err(Error::NonFinite { context: "kernel argument", index: 0 });
        }
        let t = u.abs() / self.lengthscale;
        Ok(self.outputscale * self.outputscale * standard_matern(self.nu, t))
    }

    /// Scaled multivariate evaluation (L1 or product form).
    pub fn eval_multi(&self, u: &[f64]) -> Result<f64> {
        if u.is_empty() {
            return Err(Error::InvalidParameter("kernel argument must have dimension >= 1".into()));
        }
        for &v in u {
            if !v.is_finite() {
                return Err(Error::NonFinite { context: "kernel argument", index: 0 });
            }
        }
        let s2 = self.outputscale * self.outputscale;
        Ok(match self.form {
            KernelForm::L1 => {
                let l1: f64 = u.iter().map(|v| v.abs()).sum();
                s2 * standard_matern(self.nu, l1 / self.lengthscale)
            }
            KernelForm::Product => {
                let mut prod = 1.0;
                for &v in u {
                    prod *= standard_matern(self.nu, v.abs() / self.lengthscale);
                }
                s2 * prod
            }
        })
    }

    /// `d K / d lengthscale` at `u` (univariate scaled kernel).
    pub fn d_lengthscale_1d(&self, u: f64) -> Result<f64> {
        if !u.is_finite() {
            return Err(Error::NonFinite { context: "kernel argument", index: 0 });
        }
        let a = u.abs();
        let l = self.lengthscale;
        Ok(-(self.outputscale * self.outputscale) / (l * l)
            * a
            * standard_matern_derivative(self.nu, a / l))
    }

    /// `d K / d lengthscale` at `u in R^d` for both multivariate forms.
    pub fn d_lengthscale_multi(&self, u: &[f64]) -> Result<f64> {
        if u.is_empty() {
            return Err(Error::InvalidParameter("kernel argument must have dimension >= 1".into()));
        }
        let s2 = self.outputscale * self.outputscale;
        let l = self.lengthscale;
        Ok(match self.form {
            KernelForm::L1 => {
                let l1: f64 = u.iter().map(|v| v.abs()).sum();
                -s2 / (l * l) * l1 * standard_matern_derivative(self.nu, l1 / l)
            }
            KernelForm::Product => {
                // d/dl of a product: sum over coordinates of the single-factor derivative.
                let vals: Vec<f64> = u.iter().map(|v| standard_matern(self.nu, v.abs() / l)).collect();
                let mut total = 0.0;
                for (k, &v) in u.iter().enumerate() {
                    let a = v.abs();
                    let dk = -1.0 / (l * l) * a * standard_matern_derivative(self.nu, a / l);
                    let mut rest = 1.0;
                    for (j, &val) in vals.iter().enumerate() {
                        if j != k {
                            rest *= val;
                        }
                    }
                    total += dk * rest;
                }
                s2 * total
            }
        })
    }

    /// `d K / d outputscale = (2 / outputscale) * K`.
    pub fn d_outputscale_multi(&self, u: &[f64]) -> Result<f64> {
        Ok(2.0 / self.outputscale * self.eval_multi(u)?)
    }
}

/// Polynomial coefficients `a_0..a_p` of the standard Matérn-(p+1/2) kernel
/// `k(u) = (sum_i a_i u^i) exp(-sqrt(2p+1) u)`, `u >= 0`.
pub(crate) fn matern_poly_coeffs(p: u32) -> Vec<f64> {
    let c2 = 2.0 * f64::from(2 * p + 1).sqrt();
    let mut coeffs = Vec::with_capacity(p as usize + 1);
    for i in 0..=p {
        // binom(p, i) * (2p - i)! / (2p)! * (2 sqrt(2p+1))^i, built up in f64.
        let mut a = 1.0;
        for j in 0..i {
            // binom(p, i) accumulated as prod (p - j) / (j + 1)
            a *= f64::from(p - j) / f64::from(j + 1);
        }
        for j in (2 * p - i + 1)..=(2 * p) {
            a /= f64::from(j);
        }
        a *= c2.powi(i as i32);
        coeffs.push(a);
    }
    coeffs
}

/// Coefficients for the enumerated smoothness values, precomputed once so
/// the evaluation path stays allocation-free.
fn cached_coeffs(p: u32) -> Option<&'static [f64]> {
    use std::sync::OnceLock;
    static TABLES: OnceLock<[Vec<f64>; 5]> = OnceLock::new();
    if p > 4 {
        return None;
    }
    let tables = TABLES.get_or_init(|| {
        [
            matern_poly_coeffs(0),
            matern_poly_coeffs(1),
            matern_poly_coeffs(2),
            matern_poly_coeffs(3),
            matern_poly_coeffs(4),
        ]
    });
    Some(&tables[p as usize])
}

fn horner(coeffs: &[f64], t: f64) -> f64 {
    let mut poly = 0.0;
    for &a in coeffs.iter().rev() {
        poly = poly * t + a;
    }
    poly
}

/// Standard (unit-scale) Matérn-`nu` kernel at `t = |u| >= 0`; `k(0) = 1`.
pub fn standard_matern(nu: MaternNu, t: f64) -> f64 {
    let t = t.abs();
    let c = nu.sqrt_2nu();
    let poly = match cached_coeffs(nu.p()) {
        Some(coeffs) => horner(coeffs, t),
        None => horner(&matern_poly_coeffs(nu.p()), t),
    };
    poly * (-c * t).exp()
}

/// First derivative `k'_nu(u)` of the standard Matérn kernel, `u >= 0`.
///
/// `k'(u) = -(sum_{i=1..p} b_i u^i) exp(-sqrt(2p+1) u)` with
/// `b_i = a_i * i * sqrt(2p+1) / (2p - i)`.
pub fn standard_matern_derivative(nu: MaternNu, u: f64) -> f64 {
    let p = nu.p();
    let c = nu.sqrt_2nu();
    if p == 0 {
        return -(-u).exp();
    }
    let deriv_poly = |coeffs: &[f64]| {
        let mut poly = 0.0;
        for i in (1..=p).rev() {
            let b = coeffs[i as usize] * f64::from(i) * c / f64::from(2 * p - i);
            poly = poly * u + b;
        }
        poly * u // the sum starts at i = 1
    };
    let poly = match cached_coeffs(p) {
        Some(coeffs) => deriv_poly(coeffs),
        None => deriv_poly(&matern_poly_coeffs(p)),
    };
    -poly * (-c * u).exp()
}

/// Checked wrapper matching the spec'd operation: `u >= 0` required.
pub fn kernel_derivative_1d(nu: MaternNu, u: f64) -> Result<f64> {
    if !u.is_finite() {
        return Err(Error::NonFinite { context: "kernel derivative argument", index: 0 });
    }
    if u < 0.0 {
        return Err(Error::InvalidParameter(format!(
            "kernel_derivative_1d requires u >= 0, got {u}"
        )));
    }
    Ok(standard_matern_derivative(nu, u))
}

/// Two-factor decomposition of the standardized kernel:
/// for `u >= v`, `k(u - v) = sum_p phi1[p](u) * phi2[p](v)`.
///
/// The factors are closures over lengthscale-standardized arguments; scaling
/// by `outputscale^2` and `1/lengthscale` is the caller's responsibility.
pub struct PhiDecomposition {
    pub terms: usize,
    pub phi1: Vec<Box<dyn Fn(f64) -> f64 + Send + Sync>>,
    pub phi2: Vec<Box<dyn Fn(f64) -> f64 + Send + Sync>>,
}

impl PhiDecomposition {
    /// Evaluates `sum_p phi1[p](u) * phi2[p](v)`.
    pub fn sum(&self, u: f64, v: f64) -> f64 {
        (0..self.terms).map(|p| (self.phi1[p])(u) * (self.phi2[p])(v)).sum()
    }
}

/// The exact factor pairs for `nu in {1/2, 3/2, 5/2}` (P = 1, 2, 3).
///
/// Expanding `k(u - v) = (sum_i a_i (u-v)^i) e^{-c u} e^{c v}` by powers of
/// `v` gives `phi2[j](v) = v^j e^{c v}` and
/// `phi1[j](u) = (-1)^j (sum_{i>=j} a_i binom(i,j) u^{i-j}) e^{-c u}`.
pub fn phi_factors(nu: MaternNu) -> Result<PhiDecomposition> {
    let p = nu.p();
    if p > 2 {
        return Err(Error::UnsupportedKernel(format!(
            "phi_factors supports nu in {{1/2, 3/2, 5/2}}, got nu = {nu}"
        )));
    }
    let c = nu.sqrt_2nu();
    let coeffs = matern_poly_coeffs(p);
    let terms = p as usize + 1;
    let mut phi1: Vec<Box<dyn Fn(f64) -> f64 + Send + Sync>> = Vec::with_capacity(terms);
    let mut phi2: Vec<Box<dyn Fn(f64) -> f64 + Send + Sync>> = Vec::with_capacity(terms);
    for j in 0..terms {
        let mut poly = Vec::new(); // coefficients of u^0, u^1, ... for phi1[j]
        for i in j..terms {
            let mut binom = 1.0;
            for q in 0..j {
                binom *= (i - q) as f64 / (q + 1) as f64;
            }
            poly.push(coeffs[i] * binom);
        }
        let sign = if j % 2 == 0 { 1.0 } else { -1.0 };
        phi1.push(Box::new(move |u: f64| {
            let mut s = 0.0;
            for &a in poly.iter().rev() {
                s = s * u + a;
            }
            sign * s * (-c * u).exp()
        }));
        phi2.push(Box::new(move |v: f64| v.powi(j as i32) * (c * v).exp()));
    }
    Ok(PhiDecomposition { terms, phi1, phi2 })
}
