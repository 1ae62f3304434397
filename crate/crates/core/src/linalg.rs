//! Dense linear-algebra helpers on top of nalgebra.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rand_distr::StandardNormal;

pub fn is_symmetric(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let n = m.nrows();
    (0..n).all(|i| (0..i).all(|j| (m[(i, j)] - m[(j, i)]).abs() <= tol))
}

pub fn is_positive_definite(m: &DMatrix<f64>) -> bool {
    m.nrows() == m.ncols() && Cholesky::new(m.clone()).is_some()
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn cholesky(m: &DMatrix<f64>) -> Option<Cholesky<f64, Dyn>> {
    Cholesky::new(m.clone())
}

/// Standard-normal vector of length `n`.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| rng.sample(StandardNormal))
}

/// Draw from N(mean, L L^T) given the lower Cholesky factor `l`.
pub fn mvn_sample<R: Rng + ?Sized>(
    rng: &mut R,
    mean: &DVector<f64>,
    l: &DMatrix<f64>,
) -> DVector<f64> {
    mean + l * standard_normal(rng, mean.len())
}

/// Add a growing multiple of the identity until the matrix is positive
/// definite. Returns the regularized matrix and the total ridge added.
pub fn regularize_pd(m: &DMatrix<f64>, eps: f64) -> (DMatrix<f64>, f64) {
    let n = m.nrows();
    let mut ridge = 0.0;
    let mut step = eps;
    let mut out = m.clone();
    loop {
        if is_positive_definite(&out) {
            return (out, ridge);
        }
        ridge += step;
        out = m + DMatrix::identity(n, n) * ridge;
        step *= 2.0;
    }
}
