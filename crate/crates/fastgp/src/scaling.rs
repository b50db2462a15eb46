//! Affine coordinate rescaling into [0, 1]^d and the inverse parameter
//! transforms. A single isotropic scale factor is used for every
//! coordinate so the kernel family (one shared lengthscale) is preserved;
//! this keeps the MVM exponent arguments in safe range regardless of the
//! raw coordinate units.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CoordinateScaling {
    /// Per-coordinate offsets subtracted before scaling.
    pub offsets: Vec<f64>,
    /// Shared multiplicative factor (1 / widest coordinate range).
    pub scale: f64,
}

impl CoordinateScaling {
    /// Fits the transform `x' = (x - offset) * scale` with a single scale
    /// chosen so every column lands in [0, 1].
    pub fn fit(columns: &[Vec<f64>]) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::InvalidParameter("scaling needs at least one coordinate".into()));
        }
        let mut offsets = Vec::with_capacity(columns.len());
        let mut widest = 0.0f64;
        for col in columns {
            if col.is_empty() {
                return Err(Error::InvalidParameter("scaling needs at least one point".into()));
            }
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &v in col {
                if !v.is_finite() {
                    return Err(Error::NonFinite { context: "coordinates", index: 0 });
                }
                lo = lo.min(v);
                hi = hi.max(v);
            }
            offsets.push(lo);
            widest = widest.max(hi - lo);
        }
        let scale = if widest > 0.0 { 1.0 / widest } else { 1.0 };
        Ok(Self { offsets, scale })
    }

    pub fn dim(&self) -> usize {
        self.offsets.len()
    }

    pub fn apply_columns(&self, columns: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        if columns.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "scaling columns",
                expected: self.dim(),
                got: columns.len(),
            });
        }
        Ok(columns
            .iter()
            .zip(&self.offsets)
            .map(|(col, &off)| col.iter().map(|&v| (v - off) * self.scale).collect())
            .collect())
    }

    pub fn apply_point(&self, point: &[f64]) -> Result<Vec<f64>> {
        if point.len() != self.dim() {
            return Err(Error::DimensionMismatch {
                context: "scaling point",
                expected: self.dim(),
                got: point.len(),
            });
        }
        Ok(point.iter().zip(&self.offsets).map(|(&v, &off)| (v - off) * self.scale).collect())
    }

    /// Internal-unit lengthscale for a user-unit one.
    pub fn lengthscale_to_internal(&self, user: f64) -> f64 {
        user * self.scale
    }

    /// User-unit lengthscale for an internal one.
    pub fn lengthscale_to_user(&self, internal: f64) -> f64 {
        internal / self.scale
    }

    /// Maps affine fixed-effects coefficients fitted on internal
    /// coordinates back to user units:
    /// `y = b0' + sum b_k' (x_k - o_k) s` becomes
    /// `y = (b0' - sum b_k' s o_k) + sum (b_k' s) x_k`.
    pub fn beta_to_user(&self, internal: &[f64]) -> Result<Vec<f64>> {
        if internal.len() != self.dim() + 1 {
            return Err(Error::DimensionMismatch {
                context: "beta",
                expected: self.dim() + 1,
                got: internal.len(),
            });
        }
        let mut out = Vec::with_capacity(internal.len());
        let mut intercept = internal[0];
        for (k, &off) in self.offsets.iter().enumerate() {
            intercept -= internal[1 + k] * self.scale * off;
        }
        out.push(intercept);
        for &b in &internal[1..] {
            out.push(b * self.scale);
        }
        Ok(out)
    }

    /// Inverse of [`Self::beta_to_user`].
    pub fn beta_to_internal(&self, user: &[f64]) -> Result<Vec<f64>> {
        if user.len() != self.dim() + 1 {
            return Err(Error::DimensionMismatch {
                context: "beta",
                expected: self.dim() + 1,
                got: user.len(),
            });
        }
        let mut out = Vec::with_capacity(user.len());
        let mut intercept = user[0];
        for (k, &off) in self.offsets.iter().enumerate() {
            intercept += user[1 + k] * off;
        }
        out.push(intercept);
        for &b in &user[1..] {
            out.push(b / self.scale);
        }
        Ok(out)
    }
}
