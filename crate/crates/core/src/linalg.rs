//! Small dense complex linear-algebra helpers shared by the other modules.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

pub type C64 = Complex64;
pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub const I: C64 = C64 { re: 0.0, im: 1.0 };

#[inline]
pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

/// Spectral norm (largest singular value). Exact zero for a matrix of zeros.
pub fn op_norm(m: &CMat) -> f64 {
    if m.iter().all(|z| z.re == 0.0 && z.im == 0.0) {
        return 0.0;
    }
    m.clone()
        .svd(false, false)
        .singular_values
        .iter()
        .fold(0.0_f64, |acc, &s| acc.max(s))
}

pub fn frobenius(m: &CMat) -> f64 {
    m.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

pub fn vec_norm(v: &CVec) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Largest entry of `|M + M†|`.
pub fn skew_defect(m: &CMat) -> f64 {
    let d = m + m.adjoint();
    d.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

/// Largest entry of `|M − M†|`.
pub fn hermitian_defect(m: &CMat) -> f64 {
    let d = m - m.adjoint();
    d.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

/// `‖P†P − I‖` in spectral norm.
pub fn unitarity_defect(p: &CMat) -> f64 {
    let n = p.ncols();
    op_norm(&(p.adjoint() * p - CMat::identity(n, n)))
}

/// Eigendecomposition of a Hermitian matrix, kept around so that
/// `exp(-i t H)` can be evaluated for many `t` at the cost of two products.
#[derive(Clone, Debug)]
pub struct HermitianExp {
    values: Vec<f64>,
    vectors: CMat,
    vectors_adj: CMat,
}

impl HermitianExp {
    pub fn new(h: &CMat) -> Self {
        // symmetrize against round-off before diagonalizing
        let hs = (h + h.adjoint()) * c(0.5, 0.0);
        let eig = hs.symmetric_eigen();
        let vectors_adj = eig.eigenvectors.adjoint();
        HermitianExp {
            values: eig.eigenvalues.iter().copied().collect(),
            vectors: eig.eigenvectors,
            vectors_adj,
        }
    }

    pub fn eigenvalues(&self) -> &[f64] {
        &self.values
    }

    /// `exp(-i t H)` as a dense matrix.
    pub fn unitary(&self, t: f64) -> CMat {
        let n = self.values.len();
        let mut scaled = self.vectors.clone();
        for (j, &mu) in self.values.iter().enumerate() {
            let phase = C64::from_polar(1.0, -mu * t);
            for i in 0..n {
                scaled[(i, j)] *= phase;
            }
        }
        scaled * &self.vectors_adj
    }

    /// `exp(-i t H) v` without forming the matrix.
    pub fn apply(&self, t: f64, v: &CVec) -> CVec {
        let mut w = &self.vectors_adj * v;
        for (j, &mu) in self.values.iter().enumerate() {
            w[j] *= C64::from_polar(1.0, -mu * t);
        }
        &self.vectors * w
    }
}

/// `exp(X)` for skew-Hermitian `X`, computed through the Hermitian matrix `iX`
/// so the result is unitary to working precision.
pub fn expm_skew(x: &CMat) -> CMat {
    let h = x * I;
    HermitianExp::new(&h).unitary(1.0)
}

/// `exp(t·diag(-i λ))`, the free evolution at a finite cutoff.
pub fn drift_phases(eigenvalues: &[f64], t: f64) -> CMat {
    let d = CVec::from_iterator(
        eigenvalues.len(),
        eigenvalues.iter().map(|&l| C64::from_polar(1.0, -l * t)),
    );
    CMat::from_diagonal(&d)
}

/// Neumaier compensated sum.
#[derive(Clone, Copy, Debug, Default)]
pub struct CompensatedSum {
    sum: f64,
    carry: f64,
}

impl CompensatedSum {
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.carry += (self.sum - t) + x;
        } else {
            self.carry += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.carry
    }
}

pub fn compensated_sum<I: IntoIterator<Item = f64>>(xs: I) -> f64 {
    let mut acc = CompensatedSum::default();
    for x in xs {
        acc.add(x);
    }
    acc.value()
}
