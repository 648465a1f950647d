use nalgebra::DMatrix;

use super::{dot, SeededRng};
use crate::error::{check_dim, Error, Result};

/// Row-major dense matrix with finite entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat64 {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat64 {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(Error::InvalidParameter(format!("matrix shape {rows}x{cols}")));
        }
        check_dim(rows * cols, data.len())?;
        if let Some(i) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn identity(n: usize) -> Self {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        Self { rows: n, cols: n, data }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            check_dim(c, row.len())?;
            data.extend_from_slice(row);
        }
        Self::new(r, c, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Row vector times matrix: `vᵀ M`.
    pub fn left_mul(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.rows, v.len())?;
        let mut out = vec![0.0; self.cols];
        for (r, &x) in v.iter().enumerate() {
            for (o, m) in out.iter_mut().zip(self.row(r)) {
                *o += x * m;
            }
        }
        Ok(out)
    }

    /// Matrix times column vector: `M v`.
    pub fn mul_vec(&self, v: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.cols, v.len())?;
        Ok((0..self.rows).map(|r| dot(self.row(r), v)).collect())
    }

    pub fn matmul(&self, other: &Mat64) -> Result<Mat64> {
        check_dim(self.cols, other.rows)?;
        let prod = self.to_nalgebra() * other.to_nalgebra();
        Ok(Self::from_nalgebra(&prod))
    }

    /// Splits into the first `at` rows and the remaining rows.
    pub fn split_rows(&self, at: usize) -> Result<(Mat64, Mat64)> {
        if at == 0 || at >= self.rows {
            return Err(Error::InvalidParameter(format!("row split {at} of {}", self.rows)));
        }
        let (top, bottom) = self.data.split_at(at * self.cols);
        Ok((
            Mat64 {
                rows: at,
                cols: self.cols,
                data: top.to_vec(),
            },
            Mat64 {
                rows: self.rows - at,
                cols: self.cols,
                data: bottom.to_vec(),
            },
        ))
    }

    pub fn inverse(&self) -> Result<Mat64> {
        if self.rows != self.cols {
            return Err(Error::InvalidParameter("inverse of a non-square matrix".into()));
        }
        self.to_nalgebra()
            .try_inverse()
            .map(|m| Self::from_nalgebra(&m))
            .filter(|m| m.data.iter().all(|x| x.is_finite()))
            .ok_or(Error::SingularSystem { attempts: 1 })
    }

    /// Largest absolute column sum.
    pub fn norm_1(&self) -> f64 {
        (0..self.cols)
            .map(|c| (0..self.rows).map(|r| self.get(r, c).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    /// `max |self - other|` over all entries.
    pub fn max_abs_diff(&self, other: &Mat64) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }

    pub(crate) fn from_nalgebra(m: &DMatrix<f64>) -> Self {
        let (rows, cols) = m.shape();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            data.extend(m.row(r).iter().copied());
        }
        Self { rows, cols, data }
    }
}

/// An invertible matrix together with its cached inverse.
#[derive(Clone, Debug, PartialEq)]
pub struct InvertibleMatrix {
    pub matrix: Mat64,
    pub inverse: Mat64,
}

pub const MAX_CONDITION: f64 = 1e6;
pub const MAX_RECONSTRUCTION_ERROR: f64 = 1e-9;
const MAX_ATTEMPTS: usize = 16;

/// Draws an `n x n` matrix with entries uniform in [-1, 1] and returns it with
/// its inverse. Candidates are redrawn until the 1-norm condition number is at
/// most [`MAX_CONDITION`] and `max |M M⁻¹ - I|` is at most [`MAX_RECONSTRUCTION_ERROR`].
pub fn gen_invertible_matrix(n: usize, rng: &mut SeededRng) -> Result<InvertibleMatrix> {
    if n == 0 {
        return Err(Error::InvalidParameter("matrix size must be positive".into()));
    }
    for _ in 0..MAX_ATTEMPTS {
        let data: Vec<f64> = (0..n * n).map(|_| rng.uniform(-1.0, 1.0)).collect();
        if n == 1 && data[0].abs() < 0.1 {
            continue;
        }
        let matrix = Mat64 { rows: n, cols: n, data };
        let Ok(inverse) = matrix.inverse() else {
            continue;
        };
        if matrix.norm_1() * inverse.norm_1() > MAX_CONDITION {
            continue;
        }
        let residual = matrix.matmul(&inverse)?.max_abs_diff(&Mat64::identity(n));
        if residual <= MAX_RECONSTRUCTION_ERROR {
            return Ok(InvertibleMatrix { matrix, inverse });
        }
    }
    Err(Error::MatrixGeneration {
        n,
        attempts: MAX_ATTEMPTS,
    })
}

/// Default singular-value spread for [`gen_conditioned_matrix`].
pub const CONDITIONED_SPREAD: f64 = 10.0;

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the
/// signs of `R`'s diagonal folded into `Q`.
fn haar_orthogonal(n: usize, rng: &mut SeededRng) -> DMatrix<f64> {
    let g = DMatrix::from_fn(n, n, |_, _| rng.gaussian());
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..n {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

/// Draws `M = Q₁ Σ Q₂` with Haar-random orthogonal `Q₁`, `Q₂` and singular
/// values log-uniform in `[spread^-½, spread^½]`, so the 2-norm condition
/// number is at most `spread`. The inverse `Q₂ᵀ Σ⁻¹ Q₁ᵀ` is formed directly.
/// The same gates as [`gen_invertible_matrix`] apply.
pub fn gen_conditioned_matrix(n: usize, spread: f64, rng: &mut SeededRng) -> Result<InvertibleMatrix> {
    if n == 0 {
        return Err(Error::InvalidParameter("matrix size must be positive".into()));
    }
    if !(spread.is_finite() && spread >= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "singular-value spread {spread} must be at least 1"
        )));
    }
    for _ in 0..MAX_ATTEMPTS {
        let q1 = haar_orthogonal(n, rng);
        let q2 = haar_orthogonal(n, rng);
        let sigma: Vec<f64> = (0..n).map(|_| spread.powf(rng.uniform(-0.5, 0.5))).collect();
        let scaled = |q: &DMatrix<f64>, f: &dyn Fn(f64) -> f64| {
            let mut q = q.clone();
            for (j, s) in sigma.iter().enumerate() {
                q.column_mut(j).scale_mut(f(*s));
            }
            q
        };
        let matrix = Mat64::from_nalgebra(&(scaled(&q1, &|s| s) * &q2));
        let inverse = Mat64::from_nalgebra(&(q2.transpose() * scaled(&q1, &|s| 1.0 / s).transpose()));
        if matrix.norm_1() * inverse.norm_1() > MAX_CONDITION {
            continue;
        }
        let residual = matrix.matmul(&inverse)?.max_abs_diff(&Mat64::identity(n));
        if residual <= MAX_RECONSTRUCTION_ERROR {
            return Ok(InvertibleMatrix { matrix, inverse });
        }
    }
    Err(Error::MatrixGeneration {
        n,
        attempts: MAX_ATTEMPTS,
    })
}

/// Solves `A x = b` by LU factorisation with partial pivoting.
///
/// Returns the solution and the 1-norm condition number of `A`.
pub fn solve(a: &Mat64, b: &[f64]) -> Result<(Vec<f64>, f64)> {
    if a.rows != a.cols {
        return Err(Error::InvalidParameter("solve needs a square system".into()));
    }
    check_dim(a.rows, b.len())?;
    let lu = a.to_nalgebra().lu();
    let x = lu
        .solve(&nalgebra::DVector::from_column_slice(b))
        .ok_or(Error::SingularSystem { attempts: 1 })?;
    let inv = lu.try_inverse().ok_or(Error::SingularSystem { attempts: 1 })?;
    let cond = a.norm_1() * Mat64::from_nalgebra(&inv).norm_1();
    if !cond.is_finite() || x.iter().any(|v| !v.is_finite()) {
        return Err(Error::SingularSystem { attempts: 1 });
    }
    Ok((x.iter().copied().collect(), cond))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scalar_case() {
        let mut rng = SeededRng::new(3);
        for _ in 0..50 {
            let m = gen_invertible_matrix(1, &mut rng).unwrap();
            let a = m.matrix.get(0, 0);
            assert!(a.abs() >= 0.1);
            assert!((m.inverse.get(0, 0) - 1.0 / a).abs() < 1e-15);
        }
    }

    #[test]
    fn reconstruction_within_tolerance() {
        let mut rng = SeededRng::new(5);
        for n in [2, 6, 24, 80] {
            let m = gen_invertible_matrix(n, &mut rng).unwrap();
            let err = m.matrix.matmul(&m.inverse).unwrap().max_abs_diff(&Mat64::identity(n));
            assert!(err <= 1e-9, "n={n} err={err}");
            assert!(m.matrix.as_slice().iter().all(|x| (-1.0..=1.0).contains(x)));
        }
    }

    #[test]
    fn conditioned_matrix_spectrum() {
        let mut rng = SeededRng::new(8);
        for n in [1, 6, 40, 120] {
            let m = gen_conditioned_matrix(n, CONDITIONED_SPREAD, &mut rng).unwrap();
            let err = m.matrix.matmul(&m.inverse).unwrap().max_abs_diff(&Mat64::identity(n));
            assert!(err <= 1e-12, "n={n} err={err}");
            let sv = m.matrix.to_nalgebra().singular_values();
            let kappa = sv.max() / sv.min();
            assert!(kappa <= CONDITIONED_SPREAD * (1.0 + 1e-9), "n={n} kappa={kappa}");
        }
        assert!(gen_conditioned_matrix(4, 0.5, &mut rng).is_err());
    }

    #[test]
    fn deterministic() {
        let a = gen_invertible_matrix(6, &mut SeededRng::new(9)).unwrap();
        let b = gen_invertible_matrix(6, &mut SeededRng::new(9)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn left_and_right_products() {
        let m = Mat64::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        assert_eq!(m.left_mul(&[1.0, -1.0]).unwrap(), vec![-3.0, -3.0, -3.0]);
        assert_eq!(m.mul_vec(&[1.0, 0.0, 1.0]).unwrap(), vec![4.0, 10.0]);
        assert!(m.left_mul(&[1.0]).is_err());
    }

    #[test]
    fn split_rows_halves() {
        let m = Mat64::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]]).unwrap();
        let (top, bottom) = m.split_rows(2).unwrap();
        assert_eq!(top.as_slice(), &[1.0, 2.0]);
        assert_eq!(bottom.as_slice(), &[3.0, 4.0]);
    }

    #[test]
    fn solve_small_system() {
        let a = Mat64::from_rows(&[vec![2.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let (x, cond) = solve(&a, &[3.0, 5.0]).unwrap();
        assert!((x[0] - 0.8).abs() < 1e-12 && (x[1] - 1.4).abs() < 1e-12);
        assert!(cond >= 1.0);
    }

    #[test]
    fn solve_singular() {
        let a = Mat64::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(solve(&a, &[1.0, 2.0]).is_err());
    }
}
