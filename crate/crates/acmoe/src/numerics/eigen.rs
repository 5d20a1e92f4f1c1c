use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

const MAX_DIM: usize = 512;
const SYMMETRY_TOL: f64 = 1e-10;
const MAX_SWEEPS: usize = 100;

/// Eigendecomposition of a symmetric matrix: A = V diag(eigenvalues) V^T.
///
/// Eigenvalues are sorted descending; `eigenvectors` holds the matching
/// orthonormal eigenvectors as columns.
#[derive(Debug, Clone)]
pub struct EigenDecomposition {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: Matrix,
}

impl EigenDecomposition {
    /// ||V diag(l) V^T - A||_F, the reconstruction error against `a`.
    pub fn reconstruction_error(&self, a: &Matrix) -> f64 {
        let n = self.eigenvalues.len();
        let mut err = 0.0f64;
        for i in 0..n {
            for j in 0..n {
                let mut v = 0.0;
                for k in 0..n {
                    v += self.eigenvectors.get(i, k) * self.eigenvalues[k] * self.eigenvectors.get(j, k);
                }
                let d = v - a.get(i, j);
                err += d * d;
            }
        }
        err.sqrt()
    }
}

fn off_diagonal_norm(a: &Matrix) -> f64 {
    let n = a.rows();
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += a.get(i, j) * a.get(i, j);
            }
        }
    }
    s.sqrt()
}

/// Symmetric eigensolve by cyclic Jacobi rotations.
///
/// Sweeps annihilate every off-diagonal element in turn until the
/// off-diagonal Frobenius norm drops below 1e-12 relative to ||A||_F,
/// with a cap of 100 sweeps.
pub fn sym_eigen(a: &Matrix) -> Result<EigenDecomposition> {
    if !a.is_square() {
        return Err(Error::shape("eigensolve of a non-square matrix"));
    }
    let n = a.rows();
    if n > MAX_DIM {
        return Err(Error::DimensionTooLarge { dim: n, max: MAX_DIM });
    }
    if n == 0 {
        return Err(Error::EmptyInput { context: "0x0 matrix".into() });
    }
    let asym = a.max_asymmetry();
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { max_asymmetry: asym, tolerance: SYMMETRY_TOL });
    }

    let mut m = a.clone();
    // Symmetrize exactly so rotations preserve symmetry bit-for-bit.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m.get(i, j) + m.get(j, i));
            m.set(i, j, v);
            m.set(j, i, v);
        }
    }
    let mut v = Matrix::identity(n);
    let norm = m.frobenius_norm();
    let threshold = 1e-12 * norm.max(f64::MIN_POSITIVE);

    let mut converged = off_diagonal_norm(&m) <= threshold;
    let mut sweeps = 0;
    while !converged && sweeps < MAX_SWEEPS {
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                // Skip rotations that cannot change the matrix at this scale.
                if apq.abs() <= f64::EPSILON * (app.abs() + aqq.abs()) * 0.5e-3 {
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta >= 0.0 {
                    1.0 / (theta + (theta * theta + 1.0).sqrt())
                } else {
                    -1.0 / (-theta + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                let tau = s / (1.0 + c);

                m.set(p, p, app - t * apq);
                m.set(q, q, aqq + t * apq);
                m.set(p, q, 0.0);
                m.set(q, p, 0.0);
                for i in 0..n {
                    if i != p && i != q {
                        let aip = m.get(i, p);
                        let aiq = m.get(i, q);
                        let nip = aip - s * (aiq + tau * aip);
                        let niq = aiq + s * (aip - tau * aiq);
                        m.set(i, p, nip);
                        m.set(p, i, nip);
                        m.set(i, q, niq);
                        m.set(q, i, niq);
                    }
                }
                for i in 0..n {
                    let vip = v.get(i, p);
                    let viq = v.get(i, q);
                    v.set(i, p, vip - s * (viq + tau * vip));
                    v.set(i, q, viq + s * (vip - tau * viq));
                }
            }
        }
        sweeps += 1;
        converged = off_diagonal_norm(&m) <= threshold;
    }
    if !converged {
        return Err(Error::EigenNoConvergence { sweeps, off_norm: off_diagonal_norm(&m) });
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(j, j).partial_cmp(&m.get(i, i)).unwrap());
    let eigenvalues: Vec<f64> = order.iter().map(|&i| m.get(i, i)).collect();
    let mut eigenvectors = Matrix::zeros(n, n);
    for (new_col, &old_col) in order.iter().enumerate() {
        for r in 0..n {
            eigenvectors.set(r, new_col, v.get(r, old_col));
        }
    }
    Ok(EigenDecomposition { eigenvalues, eigenvectors })
}

/// kappa(A) = lambda_max / lambda_min for a symmetric positive-definite matrix.
pub fn condition_number(a: &Matrix) -> Result<f64> {
    const FLOOR: f64 = 1e-12;
    let eig = sym_eigen(a)?;
    let lambda_max = eig.eigenvalues[0];
    let lambda_min = *eig.eigenvalues.last().unwrap();
    if lambda_min <= FLOOR {
        return Err(Error::Singular { lambda_min, floor: FLOOR });
    }
    Ok(lambda_max / lambda_min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;

    fn random_orthonormal(n: usize, rng: &mut RngStream) -> Matrix {
        // Gram-Schmidt on a random Gaussian matrix.
        let mut cols: Vec<Vec<f64>> = Vec::with_capacity(n);
        for _ in 0..n {
            let mut v: Vec<f64> = (0..n).map(|_| rng.next_normal()).collect();
            for u in &cols {
                let proj: f64 = v.iter().zip(u.iter()).map(|(a, b)| a * b).sum();
                for i in 0..n {
                    v[i] -= proj * u[i];
                }
            }
            let norm: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            for x in v.iter_mut() {
                *x /= norm;
            }
            cols.push(v);
        }
        let mut q = Matrix::zeros(n, n);
        for (c, col) in cols.iter().enumerate() {
            for r in 0..n {
                q.set(r, c, col[r]);
            }
        }
        q
    }

    fn spd_from_spectrum(lambdas: &[f64], rng: &mut RngStream) -> Matrix {
        let n = lambdas.len();
        let q = random_orthonormal(n, rng);
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                let mut s = 0.0;
                for k in 0..n {
                    s += q.get(i, k) * lambdas[k] * q.get(j, k);
                }
                a.set(i, j, s);
            }
        }
        // Force exact symmetry against rounding.
        for i in 0..n {
            for j in (i + 1)..n {
                let v = 0.5 * (a.get(i, j) + a.get(j, i));
                a.set(i, j, v);
                a.set(j, i, v);
            }
        }
        a
    }

    #[test]
    fn diagonal_matrix_eigenvalues_sorted() {
        let eig = sym_eigen(&Matrix::diag(&[1.0, 4.0])).unwrap();
        assert_eq!(eig.eigenvalues, vec![4.0, 1.0]);
        // Axis-aligned eigenvectors up to sign.
        assert!((eig.eigenvectors.get(1, 0).abs() - 1.0).abs() < 1e-12);
        assert!((eig.eigenvectors.get(0, 1).abs() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn identity_has_unit_eigenvalues() {
        let eig = sym_eigen(&Matrix::identity(3)).unwrap();
        assert_eq!(eig.eigenvalues, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn random_spd_reconstructs() {
        let mut rng = RngStream::new(8, 0);
        for _ in 0..10 {
            let lambdas: Vec<f64> = (0..5).map(|_| rng.next_range(0.5, 10.0)).collect();
            let a = spd_from_spectrum(&lambdas, &mut rng);
            let eig = sym_eigen(&a).unwrap();
            let rel = eig.reconstruction_error(&a) / a.frobenius_norm();
            assert!(rel <= 1e-9, "reconstruction error {rel}");
        }
    }

    #[test]
    fn eigenvectors_are_orthonormal() {
        let mut rng = RngStream::new(12, 0);
        let a = spd_from_spectrum(&[3.0, 2.0, 1.0, 0.5], &mut rng);
        let eig = sym_eigen(&a).unwrap();
        let v = &eig.eigenvectors;
        for i in 0..4 {
            for j in 0..4 {
                let mut d = 0.0;
                for k in 0..4 {
                    d += v.get(k, i) * v.get(k, j);
                }
                let want = if i == j { 1.0 } else { 0.0 };
                assert!((d - want).abs() < 1e-10, "gram[{i}][{j}] = {d}");
            }
        }
    }

    #[test]
    fn eigenvalue_sum_matches_trace() {
        let mut rng = RngStream::new(3, 0);
        let a = spd_from_spectrum(&[9.0, 5.0, 2.0, 1.0, 0.1], &mut rng);
        let eig = sym_eigen(&a).unwrap();
        let sum: f64 = eig.eigenvalues.iter().sum();
        assert!((sum - a.trace()).abs() <= 1e-9 * a.trace().abs());
    }

    #[test]
    fn rejects_asymmetric_input() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![0.5, 1.0]]).unwrap();
        assert!(matches!(sym_eigen(&a), Err(Error::NotSymmetric { .. })));
    }

    #[test]
    fn condition_number_of_identity_is_one() {
        assert_eq!(condition_number(&Matrix::identity(4)).unwrap(), 1.0);
    }

    #[test]
    fn condition_number_of_diagonal_ratio() {
        let k = condition_number(&Matrix::diag(&[1.0, 4.0])).unwrap();
        assert!((k - 4.0).abs() < 1e-12);
    }

    #[test]
    fn condition_number_from_constructed_spectrum() {
        let mut rng = RngStream::new(77, 0);
        let a = spd_from_spectrum(&[9.0, 3.0, 1.0], &mut rng);
        let k = condition_number(&a).unwrap();
        assert!((k - 9.0).abs() < 1e-8, "kappa {k}");
    }

    #[test]
    fn condition_number_is_scale_invariant() {
        let mut rng = RngStream::new(13, 0);
        let a = spd_from_spectrum(&[7.0, 2.0, 1.0], &mut rng);
        let k1 = condition_number(&a).unwrap();
        let k2 = condition_number(&a.scale(37.5)).unwrap();
        assert!((k1 - k2).abs() <= 1e-10 * k1);
    }

    #[test]
    fn singular_matrix_rejected() {
        assert!(matches!(
            condition_number(&Matrix::diag(&[1.0, 0.0])),
            Err(Error::Singular { .. })
        ));
    }
}
