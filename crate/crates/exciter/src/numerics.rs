//! Dense linear-algebra and integration kernels.
//!
//! Everything in this crate operates on small systems (the intensity
//! dimension is capped at 8, so even augmented block matrices stay at
//! 16x16). At these sizes hand-rolled dense kernels are simpler, faster
//! and easier to audit than pulling in a general-purpose linear algebra
//! stack, so the crate carries its own:
//!
//! * [`mat_exp`] — scaling-and-squaring Pade-13 matrix exponential,
//! * [`int_exp`] / [`exp_and_int`] — the integral `∫_0^Δ e^{As} ds`
//!   computed exactly (up to the exponential itself) from a block
//!   augmentation, valid for singular `A`,
//! * [`sym_eigenvalues`] — cyclic Jacobi eigenvalues of a symmetric
//!   matrix,
//! * [`solve_lyapunov`] — `MX + XM^T + Q = 0` by vectorising to a dense
//!   `d^2 x d^2` linear system,
//! * [`rk4_integrate`] — classical fixed-step Runge-Kutta with a
//!   step-halving error estimate.
//!
//! Shape mismatches in the public entry points yield [`Error::Dimension`];
//! the private arithmetic helpers assert instead, since a mismatch there is
//! a programming error rather than bad user input.

use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

// ======================================================================
// Vectors
// ======================================================================

/// A dense real vector. All entries are finite for instances produced by
/// this crate's constructors and operations.
#[derive(Debug, Clone, PartialEq)]
pub struct Vector {
    data: Vec<f64>,
}

impl Vector {
    pub fn zeros(dim: usize) -> Self {
        Vector { data: vec![0.0; dim] }
    }

    pub fn from_slice(entries: &[f64]) -> Self {
        Vector { data: entries.to_vec() }
    }

    pub fn dim(&self) -> usize {
        self.data.len()
    }

    pub fn get(&self, i: usize) -> f64 {
        self.data[i]
    }

    pub fn set(&mut self, i: usize, value: f64) {
        self.data[i] = value;
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn iter(&self) -> std::slice::Iter<'_, f64> {
        self.data.iter()
    }

    pub fn add(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim(), "vector dimension mismatch");
        Vector { data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect() }
    }

    pub fn sub(&self, other: &Vector) -> Vector {
        assert_eq!(self.dim(), other.dim(), "vector dimension mismatch");
        Vector { data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect() }
    }

    pub fn scale(&self, s: f64) -> Vector {
        Vector { data: self.data.iter().map(|a| a * s).collect() }
    }

    pub fn dot(&self, other: &Vector) -> f64 {
        assert_eq!(self.dim(), other.dim(), "vector dimension mismatch");
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    /// Euclidean norm.
    pub fn norm2(&self) -> f64 {
        self.dot(self).sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

impl From<Vec<f64>> for Vector {
    fn from(data: Vec<f64>) -> Self {
        Vector { data }
    }
}

impl Serialize for Vector {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        self.data.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Vector {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let data = Vec::<f64>::deserialize(deserializer)?;
        if !data.iter().all(|x| x.is_finite()) {
            return Err(D::Error::custom("vector entries must be finite"));
        }
        Ok(Vector { data })
    }
}

// ======================================================================
// Matrices
// ======================================================================

/// A dense real matrix in row-major storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Matrix::zeros(dim, dim);
        for i in 0..dim {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Matrix::zeros(diag.len(), diag.len());
        for (i, &v) in diag.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    /// Builds a matrix from nested rows, checking that the shape is
    /// rectangular and every entry is finite.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::Dimension("matrix must have at least one row".into()));
        }
        let cols = rows[0].len();
        if cols == 0 {
            return Err(Error::Dimension("matrix must have at least one column".into()));
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(Error::Dimension(format!(
                    "row {} has {} entries, expected {}",
                    i,
                    row.len(),
                    cols
                )));
            }
            data.extend_from_slice(row);
        }
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::Domain("matrix entries must be finite".into()));
        }
        Ok(Matrix { rows: rows.len(), cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, value: f64) {
        self.data[i * self.cols + j] = value;
    }

    pub fn add(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "matrix shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Matrix) -> Matrix {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "matrix shape mismatch");
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Matrix {
        Matrix { rows: self.rows, cols: self.cols, data: self.data.iter().map(|a| a * s).collect() }
    }

    pub fn matmul(&self, other: &Matrix) -> Matrix {
        assert_eq!(self.cols, other.rows, "matrix product shape mismatch");
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self.get(i, k);
                if aik == 0.0 {
                    continue;
                }
                for j in 0..other.cols {
                    out.data[i * other.cols + j] += aik * other.get(k, j);
                }
            }
        }
        out
    }

    pub fn matvec(&self, v: &Vector) -> Vector {
        assert_eq!(self.cols, v.dim(), "matrix-vector shape mismatch");
        let mut out = Vector::zeros(self.rows);
        for i in 0..self.rows {
            let mut acc = 0.0;
            for j in 0..self.cols {
                acc += self.get(i, j) * v.get(j);
            }
            out.set(i, acc);
        }
        out
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.set(j, i, self.get(i, j));
            }
        }
        out
    }

    pub fn trace(&self) -> f64 {
        assert!(self.is_square(), "trace requires a square matrix");
        (0..self.rows).map(|i| self.get(i, i)).sum()
    }

    pub fn col(&self, j: usize) -> Vector {
        assert!(j < self.cols, "column index out of range");
        Vector { data: (0..self.rows).map(|i| self.get(i, j)).collect() }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    /// Maximum absolute column sum (the induced 1-norm).
    pub fn norm_one(&self) -> f64 {
        (0..self.cols)
            .map(|j| (0..self.rows).map(|i| self.get(i, j).abs()).sum::<f64>())
            .fold(0.0, f64::max)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Largest absolute difference to `other`, useful in tests and
    /// convergence checks.
    pub fn max_abs_diff(&self, other: &Matrix) -> f64 {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "matrix shape mismatch");
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    /// Copies `block` into `self` with its top-left corner at `(i0, j0)`.
    fn set_block(&mut self, i0: usize, j0: usize, block: &Matrix) {
        for i in 0..block.rows {
            for j in 0..block.cols {
                self.set(i0 + i, j0 + j, block.get(i, j));
            }
        }
    }

    /// Extracts the `rows x cols` block whose top-left corner is `(i0, j0)`.
    fn block(&self, i0: usize, j0: usize, rows: usize, cols: usize) -> Matrix {
        let mut out = Matrix::zeros(rows, cols);
        for i in 0..rows {
            for j in 0..cols {
                out.set(i, j, self.get(i0 + i, j0 + j));
            }
        }
        out
    }
}

impl Serialize for Matrix {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        let rows: Vec<&[f64]> =
            (0..self.rows).map(|i| &self.data[i * self.cols..(i + 1) * self.cols]).collect();
        rows.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for Matrix {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(deserializer)?;
        Matrix::from_rows(&rows).map_err(|e| D::Error::custom(e.to_string()))
    }
}

// ======================================================================
// LU factorisation
// ======================================================================

/// LU factorisation with partial pivoting, the workhorse behind the Pade
/// solve, matrix inversion and the Lyapunov linear system.
pub(crate) struct Lu {
    lu: Matrix,
    perm: Vec<usize>,
}

impl Lu {
    pub(crate) fn factor(a: &Matrix) -> Result<Lu> {
        assert!(a.is_square(), "LU factorisation requires a square matrix");
        let n = a.rows;
        let mut lu = a.clone();
        let mut perm: Vec<usize> = (0..n).collect();
        let tol = 1e-13 * a.max_abs().max(1.0) * (n as f64);
        for k in 0..n {
            // Pivot search.
            let mut piv = k;
            let mut best = lu.get(k, k).abs();
            for i in k + 1..n {
                let v = lu.get(i, k).abs();
                if v > best {
                    best = v;
                    piv = i;
                }
            }
            if best <= tol {
                return Err(Error::Domain("singular matrix in LU factorisation".into()));
            }
            if piv != k {
                for j in 0..n {
                    let tmp = lu.get(k, j);
                    lu.set(k, j, lu.get(piv, j));
                    lu.set(piv, j, tmp);
                }
                perm.swap(k, piv);
            }
            let dkk = lu.get(k, k);
            for i in k + 1..n {
                let m = lu.get(i, k) / dkk;
                lu.set(i, k, m);
                for j in k + 1..n {
                    let v = lu.get(i, j) - m * lu.get(k, j);
                    lu.set(i, j, v);
                }
            }
        }
        Ok(Lu { lu, perm })
    }

    pub(crate) fn solve_vec(&self, b: &[f64]) -> Vec<f64> {
        let n = self.lu.rows;
        assert_eq!(b.len(), n, "right-hand side length mismatch");
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        // Forward substitution (unit lower triangle).
        for i in 1..n {
            for j in 0..i {
                x[i] -= self.lu.get(i, j) * x[j];
            }
        }
        // Back substitution.
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.lu.get(i, j) * x[j];
            }
            x[i] /= self.lu.get(i, i);
        }
        x
    }

    pub(crate) fn solve_mat(&self, b: &Matrix) -> Matrix {
        let n = self.lu.rows;
        assert_eq!(b.rows, n, "right-hand side shape mismatch");
        let mut out = Matrix::zeros(n, b.cols);
        let mut col = vec![0.0; n];
        for j in 0..b.cols {
            for i in 0..n {
                col[i] = b.get(i, j);
            }
            let x = self.solve_vec(&col);
            for i in 0..n {
                out.set(i, j, x[i]);
            }
        }
        out
    }
}

/// Inverse via LU with partial pivoting. Fails with a domain error when the
/// matrix is numerically singular.
pub fn inverse(a: &Matrix) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "inverse requires a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    Ok(Lu::factor(a)?.solve_mat(&Matrix::identity(a.rows())))
}

/// Solves `A x = b` for a single right-hand side.
pub fn solve_linear(a: &Matrix, b: &Vector) -> Result<Vector> {
    if !a.is_square() || a.rows() != b.dim() {
        return Err(Error::Dimension(format!(
            "solve requires square A matching b, got {}x{} and {}",
            a.rows(),
            a.cols(),
            b.dim()
        )));
    }
    Ok(Vector::from(Lu::factor(a)?.solve_vec(b.as_slice())))
}

// ======================================================================
// Matrix exponential
// ======================================================================

/// Pade-13 numerator/denominator coefficients.
const PADE13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

/// 1-norm threshold below which a single Pade-13 evaluation keeps full
/// precision; larger norms are halved down by scaling and squaring.
const PADE13_THETA: f64 = 5.371920351148152;

/// Matrix exponential `e^{tA}` by scaling-and-squaring with a degree-13
/// Pade approximant. Relative accuracy is at the 1e-13 level for
/// well-conditioned inputs of the sizes used here.
pub fn mat_exp(a: &Matrix, t: f64) -> Result<Matrix> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "mat_exp requires a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !t.is_finite() || !a.all_finite() {
        return Err(Error::Domain("mat_exp requires finite entries and scale".into()));
    }
    let n = a.rows();
    let m = a.scale(t);
    let norm = m.norm_one();
    let squarings = if norm > PADE13_THETA {
        ((norm / PADE13_THETA).log2().ceil() as i32).max(0)
    } else {
        0
    };
    let ms = m.scale(0.5f64.powi(squarings));

    let ident = Matrix::identity(n);
    let m2 = ms.matmul(&ms);
    let m4 = m2.matmul(&m2);
    let m6 = m2.matmul(&m4);
    let b = &PADE13;

    let w1 = m6.scale(b[13]).add(&m4.scale(b[11])).add(&m2.scale(b[9]));
    let w = m6
        .matmul(&w1)
        .add(&m6.scale(b[7]))
        .add(&m4.scale(b[5]))
        .add(&m2.scale(b[3]))
        .add(&ident.scale(b[1]));
    let u = ms.matmul(&w);

    let z1 = m6.scale(b[12]).add(&m4.scale(b[10])).add(&m2.scale(b[8]));
    let v = m6
        .matmul(&z1)
        .add(&m6.scale(b[6]))
        .add(&m4.scale(b[4]))
        .add(&m2.scale(b[2]))
        .add(&ident.scale(b[0]));

    let num = v.add(&u);
    let den = v.sub(&u);
    let mut x = Lu::factor(&den)
        .map_err(|_| Error::Domain("mat_exp Pade denominator is singular".into()))?
        .solve_mat(&num);
    for _ in 0..squarings {
        x = x.matmul(&x);
    }
    Ok(x)
}

/// Computes the pair `(e^{AΔ}, ∫_0^Δ e^{As} ds)` from a single exponential
/// of the augmented block matrix
///
/// ```text
///       [ A  I ]            [ e^{AΔ}   ∫_0^Δ e^{As} ds ]
///   G = [ 0  0 ],  e^{GΔ} = [   0             I        ]
/// ```
///
/// which stays valid when `A` is singular (no `A^{-1}(e^{AΔ} - I)`
/// shortcut involved). One call serves both the intensity propagator and
/// the compensator increment.
pub fn exp_and_int(a: &Matrix, delta: f64) -> Result<(Matrix, Matrix)> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "exp_and_int requires a square matrix, got {}x{}",
            a.rows(),
            a.cols()
        )));
    }
    if !delta.is_finite() || delta < 0.0 {
        return Err(Error::Domain(format!(
            "exp_and_int requires a finite non-negative step, got {delta}"
        )));
    }
    let n = a.rows();
    let mut aug = Matrix::zeros(2 * n, 2 * n);
    aug.set_block(0, 0, a);
    aug.set_block(0, n, &Matrix::identity(n));
    let big = mat_exp(&aug, delta)?;
    Ok((big.block(0, 0, n, n), big.block(0, n, n, n)))
}

/// The matrix-valued integral `∫_0^Δ e^{As} ds`.
pub fn int_exp(a: &Matrix, delta: f64) -> Result<Matrix> {
    Ok(exp_and_int(a, delta)?.1)
}

// ======================================================================
// Symmetric eigenvalues
// ======================================================================

/// Relative asymmetry tolerated by [`sym_eigenvalues`] and
/// [`solve_lyapunov`] before the input is rejected.
const SYMMETRY_TOL: f64 = 1e-10;

fn check_symmetric(s: &Matrix, context: &str) -> Result<()> {
    let scale = s.max_abs().max(1.0);
    for i in 0..s.rows() {
        for j in i + 1..s.cols() {
            if (s.get(i, j) - s.get(j, i)).abs() > SYMMETRY_TOL * scale {
                return Err(Error::Domain(format!(
                    "{context}: matrix is not symmetric (entries ({i},{j}) and ({j},{i}) differ by {:.3e})",
                    (s.get(i, j) - s.get(j, i)).abs()
                )));
            }
        }
    }
    Ok(())
}

/// Eigenvalues of a symmetric matrix by the cyclic Jacobi method, returned
/// in ascending order. The input may be asymmetric up to a relative 1e-10
/// (it is symmetrised before iterating); beyond that it is rejected.
pub fn sym_eigenvalues(s: &Matrix) -> Result<Vector> {
    if !s.is_square() {
        return Err(Error::Dimension(format!(
            "sym_eigenvalues requires a square matrix, got {}x{}",
            s.rows(),
            s.cols()
        )));
    }
    if !s.all_finite() {
        return Err(Error::Domain("sym_eigenvalues requires finite entries".into()));
    }
    check_symmetric(s, "sym_eigenvalues")?;

    let n = s.rows();
    // Work on the symmetrised copy (S + S^T)/2.
    let mut a = s.add(&s.transpose()).scale(0.5);
    let frob: f64 = {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                acc += a.get(i, j) * a.get(i, j);
            }
        }
        acc.sqrt()
    };
    let target = 1e-14 * frob.max(f64::MIN_POSITIVE);

    let off = |a: &Matrix| -> f64 {
        let mut acc = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    acc += a.get(i, j) * a.get(i, j);
                }
            }
        }
        acc.sqrt()
    };

    for _sweep in 0..64 {
        if off(&a) <= target {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let theta = (a.get(q, q) - a.get(p, p)) / (2.0 * apq);
                let t = if theta.abs() > 1e12 {
                    // Rotation angle underflows; first-order formula avoids 0/0.
                    1.0 / (2.0 * theta)
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                // Apply the rotation J(p, q, angle) on both sides.
                for k in 0..n {
                    let akp = a.get(k, p);
                    let akq = a.get(k, q);
                    a.set(k, p, c * akp - sn * akq);
                    a.set(k, q, sn * akp + c * akq);
                }
                for k in 0..n {
                    let apk = a.get(p, k);
                    let aqk = a.get(q, k);
                    a.set(p, k, c * apk - sn * aqk);
                    a.set(q, k, sn * apk + c * aqk);
                }
            }
        }
    }
    if off(&a) > target.max(1e-12 * frob.max(1.0)) {
        return Err(Error::Domain("Jacobi iteration failed to converge".into()));
    }
    let mut eig: Vec<f64> = (0..n).map(|i| a.get(i, i)).collect();
    eig.sort_by(|x, y| x.partial_cmp(y).expect("eigenvalues are finite"));
    Ok(Vector::from(eig))
}

// ======================================================================
// Lyapunov equation
// ======================================================================

/// Solves the continuous Lyapunov equation `MX + XM^T + Q = 0` for
/// symmetric `Q`, by vectorising the unknown into a `d^2` linear system
/// and factorising it densely. With the dimension capped at 8 the system
/// is at most 64x64, where this direct approach is exact and cheap.
///
/// Requires the largest eigenvalue of `M + M^T` to be strictly negative;
/// otherwise the stationary problem has no (unique, stable) solution and
/// an instability error is returned.
pub fn solve_lyapunov(m: &Matrix, q: &Matrix) -> Result<Matrix> {
    if !m.is_square() || !q.is_square() || m.rows() != q.rows() {
        return Err(Error::Dimension(format!(
            "solve_lyapunov requires square M and Q of equal size, got {}x{} and {}x{}",
            m.rows(),
            m.cols(),
            q.rows(),
            q.cols()
        )));
    }
    check_symmetric(q, "solve_lyapunov")?;
    let gamma = sym_eigenvalues(&m.add(&m.transpose()))?;
    let gamma_max = gamma.get(gamma.dim() - 1);
    if gamma_max >= 0.0 {
        return Err(Error::Unstable(format!(
            "solve_lyapunov requires gamma_max(M + M^T) < 0, got {gamma_max:.6e}"
        )));
    }

    let d = m.rows();
    let n = d * d;
    // Unknown ordering: u[i + j*d] = X[i][j]. Row (i, j) encodes the (i, j)
    // entry of MX + XM^T + Q = 0.
    let mut k = Matrix::zeros(n, n);
    let mut rhs = vec![0.0; n];
    for i in 0..d {
        for j in 0..d {
            let r = i + j * d;
            for l in 0..d {
                // (MX)_{ij} contributes M[i][l] * X[l][j].
                let c1 = l + j * d;
                k.set(r, c1, k.get(r, c1) + m.get(i, l));
                // (XM^T)_{ij} contributes X[i][l] * M[j][l].
                let c2 = i + l * d;
                k.set(r, c2, k.get(r, c2) + m.get(j, l));
            }
            rhs[r] = -q.get(i, j);
        }
    }
    let lu = Lu::factor(&k)
        .map_err(|_| Error::Unstable("Lyapunov system is numerically singular".into()))?;
    let u = lu.solve_vec(&rhs);
    let mut x = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            x.set(i, j, u[i + j * d]);
        }
    }
    // Symmetrise to remove rounding noise; the exact solution is symmetric.
    Ok(x.add(&x.transpose()).scale(0.5))
}

// ======================================================================
// Runge-Kutta integration
// ======================================================================

/// Result of [`rk4_integrate`]: the end state of the fixed-step run plus a
/// step-halving error estimate (max-norm difference against a run with
/// twice as many steps).
#[derive(Debug, Clone)]
pub struct Rk4Result {
    pub state: Vector,
    pub error_estimate: f64,
}

/// Any RK4 state coordinate beyond this magnitude is treated as
/// divergence. Legitimate states (intensities, compensators, second
/// moments) stay many orders of magnitude below; a flow that reaches the
/// bound is either truly explosive or so under-resolved that every value
/// the step produces is noise. Failing eagerly keeps coarse and fine
/// grids consistent: without the bound a coarse pass over an explosive
/// flow can return bounded garbage while a fine pass overflows.
const RK4_DIVERGENCE_BOUND: f64 = 1e12;

/// One classical RK4 pass with `steps` uniform steps. `f(t, y, dy)` writes
/// the derivative into `dy`. Fails with a blow-up error if the state stops
/// being finite or leaves the divergence bound.
pub(crate) fn rk4_fixed<F>(f: &F, y0: &[f64], t0: f64, t1: f64, steps: usize) -> Result<Vec<f64>>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    let n = y0.len();
    let h = (t1 - t0) / steps as f64;
    let mut y = y0.to_vec();
    let mut k1 = vec![0.0; n];
    let mut k2 = vec![0.0; n];
    let mut k3 = vec![0.0; n];
    let mut k4 = vec![0.0; n];
    let mut tmp = vec![0.0; n];
    for step in 0..steps {
        let t = t0 + h * step as f64;
        f(t, &y, &mut k1);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k1[i];
        }
        f(t + 0.5 * h, &tmp, &mut k2);
        for i in 0..n {
            tmp[i] = y[i] + 0.5 * h * k2[i];
        }
        f(t + 0.5 * h, &tmp, &mut k3);
        for i in 0..n {
            tmp[i] = y[i] + h * k3[i];
        }
        f(t + h, &tmp, &mut k4);
        for i in 0..n {
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]);
        }
        if !y.iter().all(|v| v.is_finite() && v.abs() <= RK4_DIVERGENCE_BOUND) {
            return Err(Error::BlowUp {
                time: t + h,
                message: "RK4 state became non-finite or exceeded the divergence bound".into(),
            });
        }
    }
    Ok(y)
}

/// Classical fixed-step RK4 over `[t0, t1]` with an error estimate from a
/// second pass at half the step size. The returned state is the one
/// produced with step `h = (t1 - t0)/steps`.
pub fn rk4_integrate<F>(f: F, y0: &Vector, t0: f64, t1: f64, steps: usize) -> Result<Rk4Result>
where
    F: Fn(f64, &[f64], &mut [f64]),
{
    if steps == 0 {
        return Err(Error::Domain("rk4_integrate requires at least one step".into()));
    }
    if !t0.is_finite() || !t1.is_finite() || t1 < t0 {
        return Err(Error::Domain(format!(
            "rk4_integrate requires finite t1 >= t0, got [{t0}, {t1}]"
        )));
    }
    if !y0.all_finite() {
        return Err(Error::Domain("rk4_integrate requires a finite initial state".into()));
    }
    if t1 == t0 {
        return Ok(Rk4Result { state: y0.clone(), error_estimate: 0.0 });
    }
    let coarse = rk4_fixed(&f, y0.as_slice(), t0, t1, steps)?;
    let fine = rk4_fixed(&f, y0.as_slice(), t0, t1, 2 * steps)?;
    let err = coarse
        .iter()
        .zip(&fine)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
    Ok(Rk4Result { state: Vector::from(coarse), error_estimate: err })
}

// ======================================================================
// Tests
// ======================================================================
