//! Dense complex linear algebra for the small Hermitian matrices used by the
//! estimators: products, Kronecker products, column-major vectorization,
//! cyclic Jacobi eigendecomposition, principal square roots, inversion and
//! a composite Simpson rule for angular integrals.

use std::ops::{Add, Index, IndexMut, Mul, Sub};

use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

/// Eigenvalues below this are treated as roundoff and clamped to zero.
pub const PSD_CLAMP: f64 = -1e-10;

/// Default number of Simpson subintervals for angular integrals.
pub const DEFAULT_QUADRATURE_NODES: usize = 4096;

const JACOBI_MAX_SWEEPS: usize = 100;

/// Dense complex matrix stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row-major data.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from real row-major data.
    pub fn from_real(rows: usize, cols: usize, data: &[f64]) -> Result<Self> {
        Self::from_vec(rows, cols, data.iter().map(|&x| C64::new(x, 0.0)).collect())
    }

    pub fn from_diag(diag: &[f64]) -> Self {
        let mut m = Self::zeros(diag.len(), diag.len());
        for (i, &d) in diag.iter().enumerate() {
            m[(i, i)] = C64::new(d, 0.0);
        }
        m
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

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    /// Row-major entries.
    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[C64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<C64> {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)])
    }

    /// Conjugate transpose.
    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn conj(&self) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|z| z.conj()).collect(),
        }
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|z| z * s)
    }

    pub fn scale_c(&self, s: C64) -> Self {
        self.map(|z| z * s)
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&z| f(z)).collect(),
        }
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn diag_real(&self) -> Vec<f64> {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)].re).collect()
    }

    /// Squared Frobenius norm.
    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    /// Largest entrywise distance to `other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape(), other.shape());
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }

    /// Frobenius distance relative to `other`'s norm.
    pub fn rel_diff(&self, other: &Self) -> f64 {
        (self - other).frobenius() / other.frobenius().max(f64::MIN_POSITIVE)
    }

    /// Largest |A[i,j] - conj(A[j,i])|; infinite for non-square input.
    pub fn hermitian_defect(&self) -> f64 {
        if !self.is_square() {
            return f64::INFINITY;
        }
        let mut worst = 0.0f64;
        for i in 0..self.rows {
            for j in i..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)].conj()).norm());
            }
        }
        worst
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermitian_defect() <= tol
    }

    /// (A + Aᴴ)/2.
    pub fn hermitian_part(&self) -> Self {
        assert!(self.is_square());
        Self::from_fn(self.rows, self.cols, |i, j| {
            (self[(i, j)] + self[(j, i)].conj()) * 0.5
        })
    }

    /// Row energies Σ_m |A[i,m]|².
    pub fn row_energies(&self) -> Vec<f64> {
        (0..self.rows)
            .map(|i| self.row(i).iter().map(|z| z.norm_sqr()).sum())
            .collect()
    }

    pub fn matmul(&self, rhs: &Self) -> Self {
        assert_eq!(
            self.cols, rhs.rows,
            "matmul {}x{} by {}x{}",
            self.rows, self.cols, rhs.rows, rhs.cols
        );
        let mut out = Self::zeros(self.rows, rhs.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * rhs.cols..(i + 1) * rhs.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a.re == 0.0 && a.im == 0.0 {
                    continue;
                }
                let rhs_row = &rhs.data[k * rhs.cols..(k + 1) * rhs.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row) {
                    *o += a * b;
                }
            }
        }
        out
    }

    /// `self += a · bᴴ`, i.e. the sum of outer products of matching columns.
    pub fn add_outer_products(&mut self, a: &Self, b: &Self) {
        assert_eq!(a.cols, b.cols);
        assert_eq!((self.rows, self.cols), (a.rows, b.rows));
        for i in 0..a.rows {
            let ar = a.row(i);
            for j in 0..b.rows {
                let s: C64 = ar.iter().zip(b.row(j)).map(|(x, y)| x * y.conj()).sum();
                self.data[i * self.cols + j] += s;
            }
        }
    }

    /// Matrix-vector product.
    pub fn apply(&self, v: &[C64]) -> Vec<C64> {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;
    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

impl Mul for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn mul(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        self.matmul(rhs)
    }
}

impl Add for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn add(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.shape(), rhs.shape());
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a + b).collect(),
        }
    }
}

impl Sub for &ComplexMatrix {
    type Output = ComplexMatrix;
    fn sub(self, rhs: &ComplexMatrix) -> ComplexMatrix {
        assert_eq!(self.shape(), rhs.shape());
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&rhs.data).map(|(a, b)| a - b).collect(),
        }
    }
}

/// Kronecker product A ⊗ B.
pub fn kron(a: &ComplexMatrix, b: &ComplexMatrix) -> ComplexMatrix {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    ComplexMatrix::from_fn(ra * rb, ca * cb, |i, j| {
        a[(i / rb, j / cb)] * b[(i % rb, j % cb)]
    })
}

/// Column-major stacking: column 0 first.
pub fn vec(a: &ComplexMatrix) -> Vec<C64> {
    let mut out = Vec::with_capacity(a.rows() * a.cols());
    for j in 0..a.cols() {
        for i in 0..a.rows() {
            out.push(a[(i, j)]);
        }
    }
    out
}

/// Inverse of [`vec`].
pub fn unvec(v: &[C64], rows: usize, cols: usize) -> Result<ComplexMatrix> {
    if v.len() != rows * cols {
        return Err(Error::Dimension(format!(
            "cannot reshape {} entries to {rows}x{cols}",
            v.len()
        )));
    }
    Ok(ComplexMatrix::from_fn(rows, cols, |i, j| v[j * rows + i]))
}

/// Eigendecomposition A = V·diag(λ)·Vᴴ of a Hermitian matrix.
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    /// Ascending.
    pub values: Vec<f64>,
    /// Columns are the matching orthonormal eigenvectors.
    pub vectors: ComplexMatrix,
}

impl HermitianEigen {
    /// V·diag(f(λ))·Vᴴ.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> ComplexMatrix {
        let n = self.values.len();
        let v = &self.vectors;
        let scaled: Vec<f64> = self.values.iter().map(|&l| f(l)).collect();
        let mut out = ComplexMatrix::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = C64::new(0.0, 0.0);
                for (k, &s) in scaled.iter().enumerate() {
                    if s != 0.0 {
                        acc += v[(i, k)] * v[(j, k)].conj() * s;
                    }
                }
                out[(i, j)] = acc;
                out[(j, i)] = acc.conj();
            }
            out[(i, i)] = C64::new(out[(i, i)].re, 0.0);
        }
        out
    }

    pub fn min_value(&self) -> f64 {
        self.values.first().copied().unwrap_or(0.0)
    }
}

fn hermitian_tolerance(a: &ComplexMatrix) -> f64 {
    1e-10 * a.max_abs().max(1.0)
}

/// Cyclic Jacobi eigendecomposition of a Hermitian matrix.
pub fn hermitian_eigen(a: &ComplexMatrix) -> Result<HermitianEigen> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "eigendecomposition of a {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    let defect = a.hermitian_defect();
    if defect > hermitian_tolerance(a) {
        return Err(Error::NotHermitian(defect));
    }
    let n = a.rows();
    let mut m = a.hermitian_part();
    let mut v = ComplexMatrix::identity(n);
    let scale = m.frobenius().max(f64::MIN_POSITIVE);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m[(i, j)].norm_sqr())
            .sum::<f64>()
            .sqrt();
        if off <= 1e-15 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m[(p, q)];
                let mag = apq.norm();
                if mag <= 1e-300 {
                    continue;
                }
                let phase = apq / mag;
                let app = m[(p, p)].re;
                let aqq = m[(q, q)].re;
                let theta = (aqq - app) / (2.0 * mag);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let ph_conj = phase.conj();

                // A <- A·U, U = diag(1, conj(phase)) · real rotation
                for r in 0..n {
                    let arp = m[(r, p)];
                    let arq = m[(r, q)] * ph_conj;
                    m[(r, p)] = arp * c - arq * s;
                    m[(r, q)] = arp * s + arq * c;
                }
                // A <- Uᴴ·A
                for col in 0..n {
                    let apc = m[(p, col)];
                    let aqc = m[(q, col)] * phase;
                    m[(p, col)] = apc * c - aqc * s;
                    m[(q, col)] = apc * s + aqc * c;
                }
                m[(p, q)] = C64::new(0.0, 0.0);
                m[(q, p)] = C64::new(0.0, 0.0);
                m[(p, p)] = C64::new(m[(p, p)].re, 0.0);
                m[(q, q)] = C64::new(m[(q, q)].re, 0.0);
                for r in 0..n {
                    let vrp = v[(r, p)];
                    let vrq = v[(r, q)] * ph_conj;
                    v[(r, p)] = vrp * c - vrq * s;
                    v[(r, q)] = vrp * s + vrq * c;
                }
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m[(i, i)].re.total_cmp(&m[(j, j)].re));
    let values = order.iter().map(|&i| m[(i, i)].re).collect();
    let vectors = ComplexMatrix::from_fn(n, n, |r, k| v[(r, order[k])]);
    Ok(HermitianEigen { values, vectors })
}

/// Eigendecomposition with the PSD check; tiny negative eigenvalues are
/// clamped to zero.
pub fn psd_eigen(a: &ComplexMatrix) -> Result<HermitianEigen> {
    let mut eig = hermitian_eigen(a)?;
    let min = eig.min_value();
    if min < PSD_CLAMP * a.max_abs().max(1.0) {
        return Err(Error::NotPsd(min));
    }
    for l in &mut eig.values {
        *l = l.max(0.0);
    }
    Ok(eig)
}

/// Principal square root of a Hermitian positive semidefinite matrix.
pub fn hermitian_sqrt(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    Ok(psd_eigen(a)?.reconstruct_with(f64::sqrt))
}

/// Inverse by Gauss-Jordan elimination with partial pivoting.
pub fn inverse(a: &ComplexMatrix) -> Result<ComplexMatrix> {
    if !a.is_square() {
        return Err(Error::Dimension(format!(
            "inverse of a {}x{} matrix",
            a.rows(),
            a.cols()
        )));
    }
    let n = a.rows();
    let mut m = a.clone();
    let mut inv = ComplexMatrix::identity(n);
    let scale = a.max_abs();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[(i, col)].norm().total_cmp(&m[(j, col)].norm()))
            .unwrap();
        if m[(pivot, col)].norm() <= 1e-14 * scale {
            return Err(Error::Singular);
        }
        if pivot != col {
            for j in 0..n {
                m.data.swap(pivot * n + j, col * n + j);
                inv.data.swap(pivot * n + j, col * n + j);
            }
        }
        let d = C64::new(1.0, 0.0) / m[(col, col)];
        for j in 0..n {
            m[(col, j)] *= d;
            inv[(col, j)] *= d;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = m[(i, col)];
            if f.re == 0.0 && f.im == 0.0 {
                continue;
            }
            for j in 0..n {
                let mc = m[(col, j)];
                let ic = inv[(col, j)];
                m[(i, j)] -= f * mc;
                inv[(i, j)] -= f * ic;
            }
        }
    }
    Ok(inv)
}

/// Composite Simpson rule for ∫ f over [lower, upper].
///
/// `nodes` is the number of subintervals; odd counts are rounded up to the
/// next even number.
pub fn integrate_periodic(
    f: impl Fn(f64) -> C64,
    lower: f64,
    upper: f64,
    nodes: usize,
) -> Result<C64> {
    if nodes < 2 {
        return Err(Error::InvalidArgument(format!(
            "quadrature needs at least 2 nodes, got {nodes}"
        )));
    }
    if !(lower < upper) {
        return Err(Error::InvalidArgument(format!(
            "empty interval [{lower}, {upper}]"
        )));
    }
    let n = nodes + nodes % 2;
    let h = (upper - lower) / n as f64;
    let mut odd = C64::new(0.0, 0.0);
    let mut even = C64::new(0.0, 0.0);
    for k in 1..n {
        let x = lower + k as f64 * h;
        if k % 2 == 1 {
            odd += f(x);
        } else {
            even += f(x);
        }
    }
    Ok((f(lower) + f(upper) + odd * 4.0 + even * 2.0) * (h / 3.0))
}

/// Pairwise summation; the result depends only on the order of `values`.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    match values.len() {
        0 => 0.0,
        1 => values[0],
        n if n <= 8 => values.iter().sum(),
        n => {
            let (a, b) = values.split_at(n / 2);
            pairwise_sum(a) + pairwise_sum(b)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, cols: usize) -> ComplexMatrix {
        ComplexMatrix::from_fn(r, cols, |_, _| {
            c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))
        })
    }

    fn random_psd(rng: &mut ChaCha8Rng, n: usize) -> ComplexMatrix {
        let g = random_matrix(rng, n, n);
        g.matmul(&g.adjoint())
    }

    #[test]
    fn sqrt_of_identity_and_diagonal() {
        let i4 = ComplexMatrix::identity(4);
        assert!(hermitian_sqrt(&i4).unwrap().max_abs_diff(&i4) < 1e-14);
        let d = ComplexMatrix::from_diag(&[4.0, 9.0]);
        let s = hermitian_sqrt(&d).unwrap();
        assert!(s.max_abs_diff(&ComplexMatrix::from_diag(&[2.0, 3.0])) < 1e-14);
    }

    #[test]
    fn sqrt_resquares_random_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_psd(&mut rng, 3);
        let s = hermitian_sqrt(&a).unwrap();
        assert!(s.is_hermitian(1e-12));
        assert!((&s.matmul(&s) - &a).frobenius() / a.frobenius() < 1e-9);
    }

    #[test]
    fn sqrt_rejects_bad_input() {
        let non_herm = ComplexMatrix::from_vec(2, 2, vec![c(1., 0.), c(0.5, 0.), c(0.1, 0.), c(1., 0.)])
            .unwrap();
        assert!(matches!(hermitian_sqrt(&non_herm), Err(Error::NotHermitian(_))));
        let indefinite = ComplexMatrix::from_diag(&[1.0, -0.5]);
        assert!(matches!(hermitian_sqrt(&indefinite), Err(Error::NotPsd(_))));
        // roundoff-level negatives are clamped
        let nearly = ComplexMatrix::from_diag(&[1.0, -1e-13]);
        assert!(hermitian_sqrt(&nearly).is_ok());
    }

    #[test]
    fn eigen_of_complex_hermitian() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [1, 2, 5, 16] {
            let a = random_psd(&mut rng, n);
            let e = hermitian_eigen(&a).unwrap();
            let back = e.reconstruct_with(|l| l);
            assert!(back.max_abs_diff(&a) < 1e-11 * a.max_abs().max(1.0), "n={n}");
            let vhv = e.vectors.adjoint().matmul(&e.vectors);
            assert!(vhv.max_abs_diff(&ComplexMatrix::identity(n)) < 1e-12);
            assert!(e.values.windows(2).all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn kron_basics() {
        let i6 = kron(&ComplexMatrix::identity(2), &ComplexMatrix::identity(3));
        assert_eq!(i6, ComplexMatrix::identity(6));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let b = random_matrix(&mut rng, 2, 3);
        let two = ComplexMatrix::from_diag(&[2.0]);
        assert!(kron(&two, &b).max_abs_diff(&b.scale(2.0)) < 1e-15);
    }

    #[test]
    fn kron_mixed_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (a, b, cc, d) = (
            random_matrix(&mut rng, 2, 2),
            random_matrix(&mut rng, 2, 2),
            random_matrix(&mut rng, 2, 2),
            random_matrix(&mut rng, 2, 2),
        );
        let lhs = kron(&a, &b).matmul(&kron(&cc, &d));
        let rhs = kron(&a.matmul(&cc), &b.matmul(&d));
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn vec_column_major_and_identity() {
        let a = ComplexMatrix::from_real(2, 2, &[1., 3., 2., 4.]).unwrap();
        let v: Vec<f64> = vec(&a).iter().map(|z| z.re).collect();
        assert_eq!(v, vec![1., 2., 3., 4.]);
        let one = ComplexMatrix::from_vec(1, 1, vec![c(2.5, -1.0)]).unwrap();
        assert_eq!(vec(&one), vec![c(2.5, -1.0)]);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let am = random_matrix(&mut rng, 2, 2);
        let x = random_matrix(&mut rng, 2, 3);
        let bm = random_matrix(&mut rng, 2, 3);
        let lhs = vec(&am.matmul(&x).matmul(&bm.transpose()));
        let rhs = kron(&bm, &am).apply(&vec(&x));
        for (l, r) in lhs.iter().zip(&rhs) {
            assert!((l - r).norm() < 1e-12);
        }
        assert_eq!(unvec(&vec(&x), 2, 3).unwrap(), x);
    }

    #[test]
    fn inverse_roundtrip_and_singular() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_matrix(&mut rng, 5, 5);
        let inv = inverse(&a).unwrap();
        assert!(a.matmul(&inv).max_abs_diff(&ComplexMatrix::identity(5)) < 1e-12);
        let sing = ComplexMatrix::from_real(2, 2, &[1., 2., 2., 4.]).unwrap();
        assert!(matches!(inverse(&sing), Err(Error::Singular)));
    }

    #[test]
    fn quadrature_simple_integrands() {
        let two_pi = integrate_periodic(|_| c(1.0, 0.0), -PI, PI, 64).unwrap();
        assert!((two_pi.re - 2.0 * PI).abs() < 1e-12);
        let zero = integrate_periodic(|x| c(x.sin(), 0.0), -PI, PI, 64).unwrap();
        assert!(zero.norm() < 1e-12);
        assert!(integrate_periodic(|_| c(1.0, 0.0), 0.0, 1.0, 1).is_err());
        assert!(integrate_periodic(|_| c(1.0, 0.0), 1.0, 0.0, 8).is_err());
    }

    #[test]
    fn quadrature_is_fourth_order() {
        let f = |x: f64| c((3.0 * x).cos() * x.exp(), 0.0);
        let exact = {
            // ∫_0^1 e^x cos 3x dx = [e^x (cos 3x + 3 sin 3x)/10]_0^1
            let g = |x: f64| x.exp() * ((3.0 * x).cos() + 3.0 * (3.0 * x).sin()) / 10.0;
            g(1.0) - g(0.0)
        };
        let e1 = (integrate_periodic(f, 0.0, 1.0, 16).unwrap().re - exact).abs();
        let e2 = (integrate_periodic(f, 0.0, 1.0, 32).unwrap().re - exact).abs();
        assert!(e1 / e2 > 8.0, "ratio {}", e1 / e2);
    }

    #[test]
    fn pairwise_sum_matches_naive() {
        let v: Vec<f64> = (0..1000).map(|i| i as f64 * 0.5).collect();
        assert_eq!(pairwise_sum(&v), v.iter().sum::<f64>());
    }
}
