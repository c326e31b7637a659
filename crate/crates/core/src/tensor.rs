//! Small dense kernels: fixed 3×3 tensors for the mechanics and a row-major
//! matrix type for network weights.

use std::ops::{Add, Index, IndexMut, Mul, Sub};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};

/// Determinants at or below this magnitude are treated as singular.
pub const SINGULAR_DET: f64 = 1e-14;

/// A 3×3 tensor stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Tensor3(pub [[f64; 3]; 3]);

impl Tensor3 {
    pub const fn zeros() -> Self {
        Tensor3([[0.0; 3]; 3])
    }

    pub const fn identity() -> Self {
        Tensor3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn diag(a: f64, b: f64, c: f64) -> Self {
        Tensor3([[a, 0.0, 0.0], [0.0, b, 0.0], [0.0, 0.0, c]])
    }

    /// Builds from nine row-major entries.
    pub fn from_row_major(v: &[f64; 9]) -> Self {
        Tensor3([[v[0], v[1], v[2]], [v[3], v[4], v[5]], [v[6], v[7], v[8]]])
    }

    pub fn to_row_major(&self) -> [f64; 9] {
        let m = &self.0;
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2], m[2][0], m[2][1], m[2][2]]
    }

    /// Outer product a ⊗ b.
    pub fn outer(a: &[f64; 3], b: &[f64; 3]) -> Self {
        let mut t = Self::zeros();
        for i in 0..3 {
            for j in 0..3 {
                t.0[i][j] = a[i] * b[j];
            }
        }
        t
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros();
        for i in 0..3 {
            for j in 0..3 {
                t.0[i][j] = self.0[j][i];
            }
        }
        t
    }

    pub fn trace(&self) -> f64 {
        self.0[0][0] + self.0[1][1] + self.0[2][2]
    }

    pub fn scale(&self, s: f64) -> Self {
        let mut t = *self;
        t.0.iter_mut().flatten().for_each(|v| *v *= s);
        t
    }

    /// (M + Mᵀ)/2
    pub fn symmetrize(&self) -> Self {
        let mut t = *self;
        for i in 0..3 {
            for j in (i + 1)..3 {
                let avg = 0.5 * (self.0[i][j] + self.0[j][i]);
                t.0[i][j] = avg;
                t.0[j][i] = avg;
            }
        }
        t
    }

    pub fn max_abs(&self) -> f64 {
        self.0.iter().flatten().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Double contraction A : B.
    pub fn ddot(&self, other: &Tensor3) -> f64 {
        self.0
            .iter()
            .flatten()
            .zip(other.0.iter().flatten())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn matvec(&self, v: &[f64; 3]) -> [f64; 3] {
        let m = &self.0;
        [
            m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
            m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
            m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
        ]
    }

    /// Right Cauchy-Green tensor C = FᵀF, symmetrized.
    pub fn right_cauchy_green(&self) -> Self {
        (self.transpose() * *self).symmetrize()
    }

    /// Symmetric 6-vector `[M11, M22, M33, M12, M13, M23]` (no Voigt factors).
    pub fn to_sym6(&self) -> [f64; 6] {
        let m = &self.0;
        [m[0][0], m[1][1], m[2][2], m[0][1], m[0][2], m[1][2]]
    }

    pub fn from_sym6(v: &[f64; 6]) -> Self {
        Tensor3([[v[0], v[3], v[4]], [v[3], v[1], v[5]], [v[4], v[5], v[2]]])
    }

    pub fn det(&self) -> f64 {
        det3(self)
    }

    pub fn cof(&self) -> Self {
        cof3(self)
    }

    pub fn inv(&self) -> Result<Self> {
        inv3(self)
    }
}

impl Mul for Tensor3 {
    type Output = Tensor3;
    fn mul(self, rhs: Tensor3) -> Tensor3 {
        let mut t = Tensor3::zeros();
        for i in 0..3 {
            for j in 0..3 {
                t.0[i][j] = (0..3).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        t
    }
}

impl Add for Tensor3 {
    type Output = Tensor3;
    fn add(self, rhs: Tensor3) -> Tensor3 {
        let mut t = self;
        for i in 0..3 {
            for j in 0..3 {
                t.0[i][j] += rhs.0[i][j];
            }
        }
        t
    }
}

impl Sub for Tensor3 {
    type Output = Tensor3;
    fn sub(self, rhs: Tensor3) -> Tensor3 {
        self + rhs.scale(-1.0)
    }
}

/// Determinant by cofactor expansion along the first row.
pub fn det3(m: &Tensor3) -> f64 {
    let a = &m.0;
    a[0][0] * (a[1][1] * a[2][2] - a[1][2] * a[2][1]) - a[0][1] * (a[1][0] * a[2][2] - a[1][2] * a[2][0])
        + a[0][2] * (a[1][0] * a[2][1] - a[1][1] * a[2][0])
}

/// Cofactor matrix, `Cof(m)[i][j] = (-1)^(i+j) minor(i, j)`, so that
/// `m · Cof(m)ᵀ = det(m) I`.
pub fn cof3(m: &Tensor3) -> Tensor3 {
    let a = &m.0;
    Tensor3([
        [
            a[1][1] * a[2][2] - a[1][2] * a[2][1],
            a[1][2] * a[2][0] - a[1][0] * a[2][2],
            a[1][0] * a[2][1] - a[1][1] * a[2][0],
        ],
        [
            a[0][2] * a[2][1] - a[0][1] * a[2][2],
            a[0][0] * a[2][2] - a[0][2] * a[2][0],
            a[0][1] * a[2][0] - a[0][0] * a[2][1],
        ],
        [
            a[0][1] * a[1][2] - a[0][2] * a[1][1],
            a[0][2] * a[1][0] - a[0][0] * a[1][2],
            a[0][0] * a[1][1] - a[0][1] * a[1][0],
        ],
    ])
}

/// Inverse via `Cof(m)ᵀ / det(m)`.
pub fn inv3(m: &Tensor3) -> Result<Tensor3> {
    let d = det3(m);
    if !(d.abs() > SINGULAR_DET) {
        return Err(Error::SingularMatrix { det: d });
    }
    Ok(cof3(m).transpose().scale(1.0 / d))
}

/// Dense row-major matrix. Vectors of biases are stored as 1×n matrices.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Mat { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: (rows, cols),
                found: (data.len(), 1),
            });
        }
        Ok(Mat { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::ShapeMismatch { expected: (r, c), found: (r, 0) });
        }
        Ok(Mat { rows: r, cols: c, data: rows.concat() })
    }

    pub fn row_vector(v: &[f64]) -> Self {
        Mat { rows: 1, cols: v.len(), data: v.to_vec() }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        (0..self.rows).map(|i| self.row(i).to_vec()).collect()
    }

    pub fn transpose(&self) -> Mat {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Mat {
        Mat { rows: self.rows, cols: self.cols, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// `self · v` for a matrix of shape (m, n) and a length-n vector.
    pub fn matvec(&self, v: &[f64]) -> Vec<f64> {
        debug_assert_eq!(v.len(), self.cols);
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Mat) -> Mat {
        assert_eq!(self.cols, other.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let orow = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                for (o, b) in orow.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Maximum of |M[i][j] − M[j][i]|.
    pub fn asymmetry(&self) -> f64 {
        let mut worst = 0.0_f64;
        for i in 0..self.rows {
            for j in 0..self.cols.min(self.rows) {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Copy of the sub-block starting at (r0, c0).
    pub fn block(&self, r0: usize, c0: usize, rows: usize, cols: usize) -> Mat {
        let mut b = Mat::zeros(rows, cols);
        for i in 0..rows {
            b.row_mut(i).copy_from_slice(&self.row(r0 + i)[c0..c0 + cols]);
        }
        b
    }
}

impl Index<(usize, usize)> for Mat {
    type Output = f64;
    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for Mat {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.cols + j]
    }
}

// Nested row arrays in JSON; serde_json writes shortest round-trip decimals.
impl Serialize for Mat {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_rows().serialize(s)
    }
}

impl<'de> Deserialize<'de> for Mat {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let rows: Vec<Vec<f64>> = Vec::deserialize(d)?;
        Mat::from_rows(&rows).map_err(serde::de::Error::custom)
    }
}

/// Eigen-decomposition of a small symmetric matrix by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching eigenvectors as
/// the columns of the returned matrix.
pub fn sym_eigen(m: &Mat) -> (Vec<f64>, Mat) {
    let n = m.rows();
    assert_eq!(n, m.cols(), "sym_eigen needs a square matrix");
    let mut a = m.clone();
    // work on the symmetric part
    for i in 0..n {
        for j in (i + 1)..n {
            let avg = 0.5 * (a[(i, j)] + a[(j, i)]);
            a[(i, j)] = avg;
            a[(j, i)] = avg;
        }
    }
    let mut v = Mat::identity(n);
    let scale = a.max_abs().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += a[(i, j)] * a[(i, j)];
            }
        }
        if off.sqrt() <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq.abs() <= f64::MIN_POSITIVE {
                    continue;
                }
                let theta = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(i, i)].total_cmp(&a[(j, j)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let mut vectors = Mat::zeros(n, n);
    for (c, &i) in order.iter().enumerate() {
        for k in 0..n {
            vectors[(k, c)] = v[(k, i)];
        }
    }
    (values, vectors)
}

/// Smallest eigenvalue of a symmetric matrix (0 for an empty matrix).
pub fn min_eigenvalue(m: &Mat) -> f64 {
    if m.rows() == 0 {
        return 0.0;
    }
    sym_eigen(m).0[0]
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng) -> Tensor3 {
        let mut t = Tensor3::zeros();
        t.0.iter_mut().flatten().for_each(|v| *v = rng.gen_range(-2.0..2.0));
        t
    }

    /// Leibniz permutation sum; independent of the cofactor expansion.
    fn det_by_permutations(m: &Tensor3) -> f64 {
        const PERMS: [([usize; 3], f64); 6] = [
            ([0, 1, 2], 1.0),
            ([1, 2, 0], 1.0),
            ([2, 0, 1], 1.0),
            ([0, 2, 1], -1.0),
            ([2, 1, 0], -1.0),
            ([1, 0, 2], -1.0),
        ];
        PERMS
            .iter()
            .map(|(p, sign)| sign * m.0[0][p[0]] * m.0[1][p[1]] * m.0[2][p[2]])
            .sum()
    }

    #[test]
    fn det_of_identity_and_diagonal() {
        assert_eq!(det3(&Tensor3::identity()), 1.0);
        assert_eq!(det3(&Tensor3::diag(2.0, 3.0, 4.0)), 24.0);
    }

    #[test]
    fn det_matches_permutation_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let m = random_tensor(&mut rng);
            assert!((det3(&m) - det_by_permutations(&m)).abs() <= 1e-12);
        }
    }

    #[test]
    fn cofactor_cases() {
        assert_eq!(cof3(&Tensor3::identity()), Tensor3::identity());
        assert_eq!(cof3(&Tensor3::diag(2.0, 3.0, 4.0)), Tensor3::diag(12.0, 8.0, 6.0));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        for _ in 0..200 {
            let m = random_tensor(&mut rng);
            let r = m * cof3(&m).transpose() - Tensor3::identity().scale(det3(&m));
            assert!(r.max_abs() <= 1e-10);
        }
    }

    #[test]
    fn inverse_cases() {
        assert_eq!(inv3(&Tensor3::identity()).unwrap(), Tensor3::identity());
        let inv = inv3(&Tensor3::diag(2.0, 4.0, 5.0)).unwrap();
        let expected = Tensor3::diag(0.5, 0.25, 0.2);
        assert!((inv - expected).max_abs() < 1e-15);
        let nearly = Tensor3::diag(1e-8, 1e-8, 1.0);
        assert!(matches!(inv3(&nearly), Err(Error::SingularMatrix { .. })));
    }

    #[test]
    fn det_of_cofactor_is_det_squared() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..200 {
            let m = random_tensor(&mut rng);
            let d = det3(&m);
            let lhs = det3(&cof3(&m));
            assert!((lhs - d * d).abs() <= 1e-8 * (d * d).max(1.0));
        }
    }

    #[test]
    fn cofactor_of_spd_equals_det_times_inverse() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        for _ in 0..200 {
            let f = random_tensor(&mut rng) + Tensor3::identity().scale(3.0);
            let c = f.right_cauchy_green();
            let rhs = inv3(&c).unwrap().scale(det3(&c));
            assert!((cof3(&c) - rhs).max_abs() <= 1e-9 * c.max_abs().powi(2));
        }
    }

    #[test]
    fn cauchy_green_is_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let f = random_tensor(&mut rng);
        let c = f.right_cauchy_green();
        assert_eq!(c, c.transpose());
    }

    #[test]
    fn jacobi_recovers_spectrum() {
        let m = Mat::from_rows(&[vec![2.0, 1.0, 0.0], vec![1.0, 2.0, 0.0], vec![0.0, 0.0, -1.0]]).unwrap();
        let (vals, vecs) = sym_eigen(&m);
        let expected = [-1.0, 1.0, 3.0];
        for (v, e) in vals.iter().zip(expected) {
            assert!((v - e).abs() < 1e-12);
        }
        // A V = V Λ
        let av = m.matmul(&vecs);
        for c in 0..3 {
            for r in 0..3 {
                assert!((av[(r, c)] - vecs[(r, c)] * vals[c]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn mat_json_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        let data: Vec<f64> = (0..12).map(|_| rng.gen::<f64>() * 1e3 - 1e-7).collect();
        let m = Mat::from_vec(3, 4, data).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        let back: Mat = serde_json::from_str(&s).unwrap();
        assert_eq!(m, back);
    }
}
