//! One-sided Jacobi SVD.
//!
//! Column rotations are applied until every pair of columns is orthogonal to
//! working precision. Unlike bidiagonalisation-based routines this keeps
//! small singular values accurate relative to the matrix entries, which the
//! nuclear-norm gradient relies on when embeddings are rank-deficient.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const MAX_SWEEPS: usize = 80;

/// Thin SVD `A = U diag(s) V^T` with `r = min(m, n)` components. Singular
/// values are not sorted.
#[derive(Debug, Clone)]
pub struct Svd {
    pub u: DMatrix<f64>,
    pub s: Vec<f64>,
    pub v: DMatrix<f64>,
}

pub fn jacobi_svd(a: &DMatrix<f64>) -> Result<Svd> {
    let (m, n) = a.shape();
    if m < n {
        let t = jacobi_svd(&a.transpose())?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    let mut w = a.clone();
    let mut v = DMatrix::<f64>::identity(n, n);
    let tol = (m as f64).sqrt() * f64::EPSILON;
    // Columns below this squared norm are numerical noise and are left alone.
    let negligible = (f64::EPSILON * a.norm()).powi(2);
    let mut converged = n < 2;
    for _ in 0..MAX_SWEEPS {
        if converged {
            break;
        }
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (mut alpha, mut beta, mut gamma) = (0.0, 0.0, 0.0);
                for i in 0..m {
                    let (x, y) = (w[(i, p)], w[(i, q)]);
                    alpha += x * x;
                    beta += y * y;
                    gamma += x * y;
                }
                if alpha <= negligible || beta <= negligible || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for i in 0..m {
                    let (x, y) = (w[(i, p)], w[(i, q)]);
                    w[(i, p)] = c * x - s * y;
                    w[(i, q)] = s * x + c * y;
                }
                for i in 0..n {
                    let (x, y) = (v[(i, p)], v[(i, q)]);
                    v[(i, p)] = c * x - s * y;
                    v[(i, q)] = s * x + c * y;
                }
            }
        }
        converged = !rotated;
    }
    if !converged {
        return Err(Error::Numeric(format!("Jacobi SVD of a {m}x{n} matrix did not converge")));
    }
    let mut s = Vec::with_capacity(n);
    let mut u = DMatrix::zeros(m, n);
    for j in 0..n {
        let norm = w.column(j).norm();
        s.push(norm);
        if norm > 0.0 {
            u.set_column(j, &(w.column(j) / norm));
        }
    }
    Ok(Svd { u, s, v })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(m: usize, n: usize, seed: u64) -> DMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        DMatrix::from_fn(m, n, |_, _| rng.gen_range(-1.0..1.0))
    }

    /// Singular values from the eigenvalues of the Gram matrix.
    fn gram_singular_values(a: &DMatrix<f64>) -> Vec<f64> {
        let g = if a.nrows() >= a.ncols() { a.transpose() * a } else { a * a.transpose() };
        let mut s: Vec<f64> = g.symmetric_eigen().eigenvalues.iter().map(|e| e.max(0.0).sqrt()).collect();
        s.sort_by(|x, y| y.partial_cmp(x).unwrap());
        s
    }

    #[test]
    fn reconstructs_and_matches_gram_oracle() {
        for (m, n, seed) in [(8, 5, 1), (3, 7, 2), (6, 6, 3), (1, 4, 4), (5, 1, 5)] {
            let a = random(m, n, seed);
            let svd = jacobi_svd(&a).unwrap();
            let rebuilt = &svd.u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(svd.s.clone())) * svd.v.transpose();
            assert!((rebuilt - &a).abs().max() < 1e-12);
            let mut s = svd.s.clone();
            s.sort_by(|x, y| y.partial_cmp(x).unwrap());
            for (x, y) in s.iter().zip(gram_singular_values(&a)) {
                assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn rank_deficient_input() {
        let b = random(8, 2, 7);
        let c = random(2, 5, 8);
        let a = &b * &c;
        let svd = jacobi_svd(&a).unwrap();
        let mut s = svd.s.clone();
        s.sort_by(|x, y| y.partial_cmp(x).unwrap());
        assert!(s[2] < 1e-14);
        let rebuilt = &svd.u * DMatrix::from_diagonal(&nalgebra::DVector::from_vec(svd.s.clone())) * svd.v.transpose();
        assert!((rebuilt - &a).abs().max() < 1e-12);
    }

    #[test]
    fn zero_matrix() {
        let svd = jacobi_svd(&DMatrix::zeros(3, 2)).unwrap();
        assert_eq!(svd.s, vec![0.0, 0.0]);
    }
}
