//! Small dense helpers shared by the solver, the network and the metrics.

use nalgebra::DMatrix;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::{Error, Mat, Result};

pub fn ensure_same_shape(a: &Mat, b: &Mat, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn ensure_finite(m: &Mat, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Strictly upper triangular part (diagonal excluded).
pub fn strict_upper(m: &Mat) -> Mat {
    let mut out = Mat::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in (i + 1)..m.ncols() {
            out[(i, j)] = m[(i, j)];
        }
    }
    out
}

/// Strictly lower triangular part (diagonal excluded).
pub fn strict_lower(m: &Mat) -> Mat {
    let mut out = Mat::zeros(m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        for j in 0..i.min(m.ncols()) {
            out[(i, j)] = m[(i, j)];
        }
    }
    out
}

/// Solve `(diag * I - lower) Y = rhs` column by column, where `lower` is
/// strictly lower triangular.
pub fn forward_substitute(diag: f64, lower: &Mat, rhs: &Mat) -> Mat {
    let n = rhs.nrows();
    let mut y = rhs.clone();
    for c in 0..rhs.ncols() {
        for i in 0..n {
            let mut acc = rhs[(i, c)];
            for j in 0..i {
                acc += lower[(i, j)] * y[(j, c)];
            }
            y[(i, c)] = acc / diag;
        }
    }
    y
}

/// Eigenvalues of a symmetric matrix in ascending order.
pub fn symmetric_eigenvalues(m: &Mat) -> Vec<f64> {
    let eig = nalgebra::SymmetricEigen::new(m.clone());
    let mut vals: Vec<f64> = eig.eigenvalues.iter().copied().collect();
    vals.sort_by(f64::total_cmp);
    vals
}

/// Eigenvalues of a triangular matrix are its diagonal. Errors when `m` is
/// neither upper nor lower triangular.
pub fn triangular_eigenvalues(m: &Mat) -> Result<Vec<f64>> {
    if !m.is_square() {
        return Err(Error::shape(format!("square matrix expected, got {:?}", m.shape())));
    }
    let n = m.nrows();
    let lower = (0..n).all(|i| ((i + 1)..n).all(|j| m[(i, j)] == 0.0));
    let upper = (0..n).all(|i| (0..i).all(|j| m[(i, j)] == 0.0));
    if !lower && !upper {
        return Err(Error::param("matrix is not triangular"));
    }
    Ok(m.diagonal().iter().copied().collect())
}

pub fn spectral_radius_triangular(m: &Mat) -> Result<f64> {
    Ok(triangular_eigenvalues(m)?
        .into_iter()
        .fold(0.0, |acc, v| acc.max(v.abs())))
}

/// Matrix stored as nested rows, used for feature files.
pub fn to_rows(m: &Mat) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

pub fn from_rows(rows: &[Vec<f64>]) -> Result<Mat> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != ncols) {
        return Err(Error::shape("ragged rows"));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

#[derive(Serialize, Deserialize)]
struct MatrixRepr {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

/// Serde adapter writing a matrix as `{rows, cols, data}` with `data` in
/// row-major order.
pub mod row_major {
    use super::*;

    pub fn serialize<S: Serializer>(m: &Mat, s: S) -> std::result::Result<S::Ok, S::Error> {
        MatrixRepr {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.transpose().as_slice().to_vec(),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Mat, D::Error> {
        let repr = MatrixRepr::deserialize(d)?;
        if repr.rows * repr.cols != repr.data.len() {
            return Err(serde::de::Error::custom(format!(
                "matrix {}x{} has {} entries",
                repr.rows,
                repr.cols,
                repr.data.len()
            )));
        }
        Ok(DMatrix::from_row_slice(repr.rows, repr.cols, &repr.data))
    }
}

/// Same as [`row_major`] for a list of matrices.
pub mod row_major_vec {
    use super::*;

    #[derive(Serialize, Deserialize)]
    struct Wrap(#[serde(with = "super::row_major")] Mat);

    pub fn serialize<S: Serializer>(ms: &[Mat], s: S) -> std::result::Result<S::Ok, S::Error> {
        let wrapped: Vec<Wrap> = ms.iter().cloned().map(Wrap).collect();
        wrapped.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<Mat>, D::Error> {
        let wrapped: Vec<Wrap> = Vec::deserialize(d)?;
        Ok(wrapped.into_iter().map(|w| w.0).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forward_substitution_matches_lu() {
        let lower = DMatrix::from_row_slice(3, 3, &[0.0, 0.0, 0.0, 0.3, 0.0, 0.0, -0.2, 0.5, 0.0]);
        let rhs = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, -1.0, 0.5, 3.0, 0.0]);
        let y = forward_substitute(1.5, &lower, &rhs);
        let system = Mat::identity(3, 3) * 1.5 - &lower;
        assert!((system * y - rhs).norm() < 1e-14);
    }

    #[test]
    fn triangle_checks() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        assert!(triangular_eigenvalues(&m).is_err());
        let l = DMatrix::from_row_slice(2, 2, &[-0.2, 0.0, 0.7, -0.2]);
        assert_eq!(spectral_radius_triangular(&l).unwrap(), 0.2);
    }

    #[test]
    fn row_major_layout() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        #[derive(Serialize, Deserialize)]
        struct W(#[serde(with = "row_major")] Mat);
        let json = serde_json::to_string(&W(m.clone())).unwrap();
        assert_eq!(json, r#"{"rows":2,"cols":3,"data":[1.0,2.0,3.0,4.0,5.0,6.0]}"#);
        let back: W = serde_json::from_str(&json).unwrap();
        assert_eq!(back.0, m);
    }
}
