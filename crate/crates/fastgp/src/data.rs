use crate::error::{Error, Result};

/// A regression dataset: `n` points in `R^d` plus one response per point.
///
/// Coordinates are stored column-major (one contiguous slice per
/// coordinate), which is the layout every sorting and sweep step wants.
#[derive(Debug, Clone)]
pub struct Dataset {
    coords: Vec<f64>, // length n * d, coordinate k occupies [k*n, (k+1)*n)
    responses: Vec<f64>,
    n: usize,
    d: usize,
}

impl Dataset {
    /// Builds a dataset from row-major points (`points[i]` is the i-th point).
    pub fn from_rows(points: &[Vec<f64>], responses: Vec<f64>) -> Result<Self> {
        let n = points.len();
        if n == 0 {
            return Err(Error::InvalidParameter("dataset must contain at least one point".into()));
        }
        let d = points[0].len();
        if d == 0 {
            return Err(Error::InvalidParameter("points must have dimension >= 1".into()));
        }
        if responses.len() != n {
            return Err(Error::DimensionMismatch {
                context: "responses",
                expected: n,
                got: responses.len(),
            });
        }
        let mut coords = vec![0.0; n * d];
        for (i, p) in points.iter().enumerate() {
            if p.len() != d {
                return Err(Error::DimensionMismatch { context: "point row", expected: d, got: p.len() });
            }
            for (k, &v) in p.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite { context: "coordinates (row index)", index: i });
                }
                coords[k * n + i] = v;
            }
        }
        for (i, &y) in responses.iter().enumerate() {
            if !y.is_finite() {
                return Err(Error::NonFinite { context: "responses", index: i });
            }
        }
        Ok(Self { coords, responses, n, d })
    }

    /// Builds a dataset from column-major coordinates (one slice per coordinate).
    pub fn from_columns(columns: &[Vec<f64>], responses: Vec<f64>) -> Result<Self> {
        if columns.is_empty() {
            return Err(Error::InvalidParameter("points must have dimension >= 1".into()));
        }
        let n = columns[0].len();
        if n == 0 {
            return Err(Error::InvalidParameter("dataset must contain at least one point".into()));
        }
        let d = columns.len();
        if responses.len() != n {
            return Err(Error::DimensionMismatch {
                context: "responses",
                expected: n,
                got: responses.len(),
            });
        }
        let mut coords = vec![0.0; n * d];
        for (k, col) in columns.iter().enumerate() {
            if col.len() != n {
                return Err(Error::DimensionMismatch { context: "coordinate column", expected: n, got: col.len() });
            }
            for (i, &v) in col.iter().enumerate() {
                if !v.is_finite() {
                    return Err(Error::NonFinite { context: "coordinates (row index)", index: i });
                }
                coords[k * n + i] = v;
            }
        }
        for (i, &y) in responses.iter().enumerate() {
            if !y.is_finite() {
                return Err(Error::NonFinite { context: "responses", index: i });
            }
        }
        Ok(Self { coords, responses, n, d })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    /// Contiguous slice of coordinate `k` over all points.
    pub fn coord(&self, k: usize) -> &[f64] {
        &self.coords[k * self.n..(k + 1) * self.n]
    }

    /// All coordinates, column-major.
    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn responses(&self) -> &[f64] {
        &self.responses
    }

    /// Replaces the responses, keeping the points (used when detrending).
    pub fn with_responses(&self, responses: Vec<f64>) -> Result<Self> {
        if responses.len() != self.n {
            return Err(Error::DimensionMismatch {
                context: "responses",
                expected: self.n,
                got: responses.len(),
            });
        }
        Ok(Self { coords: self.coords.clone(), responses, n: self.n, d: self.d })
    }

    /// The i-th point as a freshly collected vector (test/oracle convenience).
    pub fn point(&self, i: usize) -> Vec<f64> {
        (0..self.d).map(|k| self.coords[k * self.n + i]).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_nan_with_row_index() {
        let err = Dataset::from_rows(&[vec![0.0], vec![f64::NAN]], vec![1.0, 2.0]).unwrap_err();
        match err {
            Error::NonFinite { index, .. } => assert_eq!(index, 1),
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn column_major_layout() {
        let ds = Dataset::from_rows(&[vec![1.0, 10.0], vec![2.0, 20.0]], vec![0.0, 0.0]).unwrap();
        assert_eq!(ds.coord(0), &[1.0, 2.0]);
        assert_eq!(ds.coord(1), &[10.0, 20.0]);
        assert_eq!(ds.point(1), vec![2.0, 20.0]);
    }

    #[test]
    fn mismatched_lengths_rejected() {
        assert!(Dataset::from_rows(&[vec![0.0]], vec![1.0, 2.0]).is_err());
        assert!(Dataset::from_columns(&[vec![0.0, 1.0], vec![0.0]], vec![1.0, 2.0]).is_err());
    }
}
