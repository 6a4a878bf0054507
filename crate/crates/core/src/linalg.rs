//! Small dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

/// `(A + A^T) / 2`
pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// `(1/n) sum_i w_i x_i x_i^T` over the rows `x_i` of `x`.
pub fn weighted_gram(x: &DMatrix<f64>, weights: &[f64]) -> DMatrix<f64> {
    let n = x.nrows();
    debug_assert_eq!(n, weights.len());
    let mut xw = x.clone();
    for mut col in xw.column_iter_mut() {
        for (v, w) in col.iter_mut().zip(weights) {
            *v *= w;
        }
    }
    let g = x.tr_mul(&xw) / n as f64;
    symmetrize(&g)
}

/// Eigen-decomposition of a symmetric matrix with eigenvalues sorted in
/// non-increasing order. Each eigenvector is signed so that its
/// largest-magnitude entry is positive.
pub fn sym_eigen_desc(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let dim = a.nrows();
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]).then(i.cmp(&j)));
    let values = DVector::from_iterator(dim, order.iter().map(|&i| eig.eigenvalues[i]));
    let mut vectors = DMatrix::zeros(dim, dim);
    for (dst, &src) in order.iter().enumerate() {
        let col = eig.eigenvectors.column(src);
        let pivot = col
            .iter()
            .copied()
            .fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
        let sign = if pivot < 0.0 { -1.0 } else { 1.0 };
        vectors.set_column(dst, &(col * sign));
    }
    (values, vectors)
}

pub fn min_eigenvalue(a: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(a.clone()).eigenvalues.min()
}

/// Adds `delta * I` when `a` is not comfortably positive definite, with
/// `delta = 1e-8 (1 + |lambda_min|)`. Returns the shift applied, if any.
pub fn regularize_spd(a: &mut DMatrix<f64>) -> Option<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let lo = eig.eigenvalues.min();
    let hi = eig.eigenvalues.max();
    if lo >= 1e-8 * hi.max(1.0) {
        return None;
    }
    let delta = 1e-8 * (1.0 + lo.abs());
    for i in 0..a.nrows() {
        a[(i, i)] += delta;
    }
    Some(delta)
}

/// Solves `a x = b` for symmetric positive definite `a`.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<DVector<f64>> {
    Cholesky::new(a.clone()).map(|c| c.solve(b))
}

pub fn inverse_spd(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    Cholesky::new(a.clone()).map(|c| c.inverse())
}

/// Orthogonal projector onto the column space of `b`.
pub fn column_space_projector(b: &DMatrix<f64>) -> DMatrix<f64> {
    let m = b.nrows();
    if b.ncols() == 0 {
        return DMatrix::zeros(m, m);
    }
    let svd = b.clone().svd(true, false);
    let u = svd.u.expect("left singular vectors requested");
    let smax = svd.singular_values.max();
    let tol = smax * 1e-12 * m.max(b.ncols()) as f64;
    let mut p = DMatrix::zeros(m, m);
    for (j, s) in svd.singular_values.iter().enumerate() {
        if *s > tol {
            let c = u.column(j);
            p += c * c.transpose();
        }
    }
    symmetrize(&p)
}

/// Row-major `{rows, cols, data}` serde representation for dense matrices.
pub mod serde_matrix {
    use nalgebra::DMatrix;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    pub struct RowMajor {
        pub rows: usize,
        pub cols: usize,
        pub data: Vec<f64>,
    }

    impl From<&DMatrix<f64>> for RowMajor {
        fn from(m: &DMatrix<f64>) -> Self {
            RowMajor {
                rows: m.nrows(),
                cols: m.ncols(),
                data: m.transpose().as_slice().to_vec(),
            }
        }
    }

    impl RowMajor {
        pub fn into_matrix(self) -> Result<DMatrix<f64>, String> {
            if self.rows * self.cols != self.data.len() {
                return Err(format!(
                    "matrix declares {}x{} but carries {} values",
                    self.rows,
                    self.cols,
                    self.data.len()
                ));
            }
            Ok(DMatrix::from_row_slice(self.rows, self.cols, &self.data))
        }
    }

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        RowMajor::from(m).serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        RowMajor::deserialize(d)?
            .into_matrix()
            .map_err(serde::de::Error::custom)
    }
}

/// Vector counterpart of [`serde_matrix`]: a plain JSON array.
pub mod serde_vector {
    use nalgebra::DVector;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &DVector<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DVector<f64>, D::Error> {
        Ok(DVector::from_vec(Vec::<f64>::deserialize(d)?))
    }
}
