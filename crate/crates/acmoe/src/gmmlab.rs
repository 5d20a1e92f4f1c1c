//! Executable checks of the probabilistic claims: misassignment
//! probability under contamination, separation gain of the diagonal
//! transform, paired robustness of the plain and transformed nearest-mean
//! rules, Hessian-conditioning comparisons, and the eigenvalue/diagonal
//! gap bound.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::eigen::{condition_number, sym_eigen};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::{cholesky_psd, RngStream};
use crate::numerics::special::normal_cdf;
use crate::numerics::stats::SpreadMetric;
use crate::router::{transform_row_from_dispersions, NormalizationTarget};

/// A Gaussian mixture: component means as rows, one covariance per
/// component, and mixing weights on the simplex.
#[derive(Debug, Clone)]
pub struct GmmSpec {
    pub means: Matrix,
    pub covs: Vec<Matrix>,
    pub mix: Vec<f64>,
}

impl GmmSpec {
    pub fn new(means: Matrix, covs: Vec<Matrix>, mix: Vec<f64>) -> Result<Self> {
        let e = means.rows();
        let d = means.cols();
        if covs.len() != e || mix.len() != e {
            return Err(Error::shape("one covariance and one weight per component"));
        }
        for c in &covs {
            if c.rows() != d || c.cols() != d {
                return Err(Error::shape("covariance dimension mismatch"));
            }
        }
        let total: f64 = mix.iter().sum();
        if (total - 1.0).abs() > 1e-9 || mix.iter().any(|&w| w < 0.0) {
            return Err(Error::invalid("mixing weights must lie on the simplex"));
        }
        Ok(GmmSpec { means, covs, mix })
    }

    /// Equal-weight two-component mixture.
    pub fn two_cluster(mu_a: &[f64], mu_b: &[f64], cov_a: Matrix, cov_b: Matrix) -> Result<Self> {
        GmmSpec::new(
            Matrix::from_rows(&[mu_a.to_vec(), mu_b.to_vec()])?,
            vec![cov_a, cov_b],
            vec![0.5, 0.5],
        )
    }

    pub fn dim(&self) -> usize {
        self.means.cols()
    }

    pub fn num_components(&self) -> usize {
        self.means.rows()
    }
}

/// Zero-mean contamination with the given covariance.
#[derive(Debug, Clone)]
pub struct ContaminationSpec {
    pub cov_eps: Matrix,
}

/// Closed-form probability that a contaminated token drawn from the first
/// cluster lands nearer the second mean:
/// 1 - Phi(||dmu||^2 / (2 sqrt(dmu^T (Sigma_star + Sigma_eps) dmu))).
pub fn misassignment_closed_form(
    mu_star: &[f64],
    mu_other: &[f64],
    cov_star: &Matrix,
    cov_eps: &Matrix,
) -> Result<f64> {
    let d = mu_star.len();
    if mu_other.len() != d || cov_star.rows() != d || cov_eps.rows() != d {
        return Err(Error::shape("misassignment inputs must share one dimension"));
    }
    let dmu: Vec<f64> = mu_other.iter().zip(mu_star.iter()).map(|(b, a)| b - a).collect();
    let sep: f64 = dmu.iter().map(|v| v * v).sum();
    if sep == 0.0 {
        return Ok(0.5);
    }
    let mut quad = 0.0;
    for i in 0..d {
        for j in 0..d {
            quad += dmu[i] * (cov_star.get(i, j) + cov_eps.get(i, j)) * dmu[j];
        }
    }
    if quad <= 0.0 {
        return Err(Error::DegenerateVariance { value: quad });
    }
    Ok(1.0 - normal_cdf(sep / (2.0 * quad.sqrt())))
}

/// Monte Carlo estimate of the same probability via the L2 nearest-mean
/// rule on contaminated samples from the first cluster. Returns the error
/// frequency and its binomial standard error.
pub fn misassignment_monte_carlo(
    spec: &GmmSpec,
    contamination: &ContaminationSpec,
    rng: &mut RngStream,
    n: usize,
) -> Result<(f64, f64)> {
    if spec.num_components() != 2 {
        return Err(Error::invalid("the misassignment statement is two-cluster"));
    }
    if n < 10_000 {
        return Err(Error::invalid("use at least 1e4 samples"));
    }
    let d = spec.dim();
    let l_star = cholesky_psd(&spec.covs[0])?;
    let l_eps = cholesky_psd(&contamination.cov_eps)?;
    let mu_star = spec.means.row(0);
    let mu_other = spec.means.row(1);

    let mut z = vec![0.0; d];
    let mut h = vec![0.0; d];
    let mut errors = 0usize;
    for _ in 0..n {
        rng.fill_normal(&mut z);
        for i in 0..d {
            let mut v = mu_star[i];
            for j in 0..=i {
                v += l_star.get(i, j) * z[j];
            }
            h[i] = v;
        }
        rng.fill_normal(&mut z);
        for i in 0..d {
            let mut v = 0.0;
            for j in 0..=i {
                v += l_eps.get(i, j) * z[j];
            }
            h[i] += v;
        }
        let mut d_star = 0.0;
        let mut d_other = 0.0;
        for i in 0..d {
            d_star += (h[i] - mu_star[i]) * (h[i] - mu_star[i]);
            d_other += (h[i] - mu_other[i]) * (h[i] - mu_other[i]);
        }
        // Exact ties flip a fair coin, which realizes the Phi(0) = 1/2
        // convention when the means coincide; ties have measure zero
        // otherwise.
        if d_other < d_star || (d_other == d_star && rng.next_f64() < 0.5) {
            errors += 1;
        }
    }
    let p = errors as f64 / n as f64;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    Ok((p, se))
}

/// Both squared distances between the two component means: in the
/// row-weighted (Mahalanobis-style) geometry and in the plain Euclidean
/// one.
pub fn separation_gain(spec: &GmmSpec, cluster_index: usize, transform_row: &[f64]) -> Result<(f64, f64)> {
    if spec.num_components() != 2 {
        return Err(Error::invalid("separation gain is a two-cluster statement"));
    }
    if cluster_index > 1 {
        return Err(Error::invalid("cluster_index must be 0 or 1"));
    }
    if transform_row.len() != spec.dim() {
        return Err(Error::shape("transform row dimension mismatch"));
    }
    let a = spec.means.row(cluster_index);
    let b = spec.means.row(1 - cluster_index);
    let mut weighted = 0.0;
    let mut plain = 0.0;
    for q in 0..spec.dim() {
        let dq = b[q] - a[q];
        weighted += transform_row[q] * dq * dq;
        plain += dq * dq;
    }
    Ok((weighted, plain))
}

/// Mean-1 diagonal row from a cluster covariance's per-coordinate
/// dispersions. MAD of a Gaussian marginal is sigma * sqrt(2/pi); the
/// scale cancels under mean-1 normalization but is kept for fidelity.
pub fn transform_row_from_cov(cov: &Matrix, metric: SpreadMetric) -> Vec<f64> {
    let d = cov.rows();
    let s: Vec<f64> = (0..d)
        .map(|q| {
            let var = cov.get(q, q).max(0.0);
            match metric {
                SpreadMetric::Mad => var.sqrt() * (2.0 / std::f64::consts::PI).sqrt(),
                SpreadMetric::Variance => var,
            }
        })
        .collect();
    transform_row_from_dispersions(&s, NormalizationTarget::InverseDispersion)
}

/// Constructive check of the tight-feature regime: the per-feature
/// dispersions of the anchor cluster must split into two clearly separated
/// scales, and the mean separation must concentrate on the tight scale.
pub fn tight_feature_assumption_holds(spec: &GmmSpec, cluster_index: usize) -> bool {
    if spec.num_components() != 2 || cluster_index > 1 {
        return false;
    }
    let d = spec.dim();
    let cov = &spec.covs[cluster_index];
    let sigmas: Vec<f64> = (0..d).map(|q| cov.get(q, q).max(0.0).sqrt()).collect();
    let max_s = sigmas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let tight: Vec<usize> = (0..d).filter(|&q| sigmas[q] <= 0.5 * max_s).collect();
    if tight.is_empty() || tight.len() == d {
        return false;
    }
    let tight_max = tight.iter().map(|&q| sigmas[q]).fold(f64::NEG_INFINITY, f64::max);
    let loose_min = (0..d)
        .filter(|q| !tight.contains(q))
        .map(|q| sigmas[q])
        .fold(f64::INFINITY, f64::min);
    if tight_max > 0.5 * loose_min {
        return false;
    }
    let a = spec.means.row(cluster_index);
    let b = spec.means.row(1 - cluster_index);
    let total: f64 = (0..d).map(|q| (b[q] - a[q]) * (b[q] - a[q])).sum();
    let on_tight: f64 = tight.iter().map(|&q| (b[q] - a[q]) * (b[q] - a[q])).sum();
    total > 0.0 && on_tight >= 0.75 * total
}

/// Paired Monte Carlo comparison of the plain and transformed nearest-mean
/// rules on one shared sample stream.
#[derive(Debug, Clone, Serialize)]
pub struct RobustnessComparison {
    pub n: usize,
    pub standard_rate: f64,
    pub ac_rate: f64,
    pub standard_se: f64,
    pub ac_se: f64,
    /// Samples the transformed rule got wrong while the plain rule was right.
    pub ac_only_errors: usize,
    /// Samples the plain rule got wrong while the transformed rule was right.
    pub standard_only_errors: usize,
}

pub fn robustness_compare(
    spec: &GmmSpec,
    contamination: &ContaminationSpec,
    rng: &mut RngStream,
    n: usize,
) -> Result<RobustnessComparison> {
    if spec.num_components() != 2 {
        return Err(Error::invalid("robustness comparison is two-cluster"));
    }
    let d = spec.dim();
    let row = transform_row_from_cov(&spec.covs[0], SpreadMetric::Mad);
    let l_star = cholesky_psd(&spec.covs[0])?;
    let l_eps = cholesky_psd(&contamination.cov_eps)?;
    let mu_star = spec.means.row(0);
    let mu_other = spec.means.row(1);

    let mut z = vec![0.0; d];
    let mut h = vec![0.0; d];
    let mut std_errors = 0usize;
    let mut ac_errors = 0usize;
    let mut ac_only = 0usize;
    let mut std_only = 0usize;
    for _ in 0..n {
        rng.fill_normal(&mut z);
        for i in 0..d {
            let mut v = mu_star[i];
            for j in 0..=i {
                v += l_star.get(i, j) * z[j];
            }
            h[i] = v;
        }
        rng.fill_normal(&mut z);
        for i in 0..d {
            let mut v = 0.0;
            for j in 0..=i {
                v += l_eps.get(i, j) * z[j];
            }
            h[i] += v;
        }
        let mut plain_star = 0.0;
        let mut plain_other = 0.0;
        let mut w_star = 0.0;
        let mut w_other = 0.0;
        for i in 0..d {
            let ds = h[i] - mu_star[i];
            let do_ = h[i] - mu_other[i];
            plain_star += ds * ds;
            plain_other += do_ * do_;
            w_star += row[i] * ds * ds;
            w_other += row[i] * do_ * do_;
        }
        let std_err = plain_other < plain_star;
        let ac_err = w_other < w_star;
        if std_err {
            std_errors += 1;
        }
        if ac_err {
            ac_errors += 1;
        }
        if ac_err && !std_err {
            ac_only += 1;
        }
        if std_err && !ac_err {
            std_only += 1;
        }
    }
    let nf = n as f64;
    let p_std = std_errors as f64 / nf;
    let p_ac = ac_errors as f64 / nf;
    Ok(RobustnessComparison {
        n,
        standard_rate: p_std,
        ac_rate: p_ac,
        standard_se: (p_std * (1.0 - p_std) / nf).sqrt(),
        ac_se: (p_ac * (1.0 - p_ac) / nf).sqrt(),
        ac_only_errors: ac_only,
        standard_only_errors: std_only,
    })
}

/// Condition numbers of Sigma and of M Sigma M for a diagonal row M.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConditioningReport {
    pub kappa_plain: f64,
    pub kappa_transformed: f64,
}

pub fn conditioning_compare(cov: &Matrix, transform_row: &[f64]) -> Result<ConditioningReport> {
    let d = cov.rows();
    if transform_row.len() != d {
        return Err(Error::shape("transform row dimension mismatch"));
    }
    let kappa_plain = condition_number(cov)?;
    let mut transformed = Matrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            transformed.set(i, j, transform_row[i] * cov.get(i, j) * transform_row[j]);
        }
    }
    let kappa_transformed = condition_number(&transformed)?;
    Ok(ConditioningReport { kappa_plain, kappa_transformed })
}

/// Outcome of the eigenvalue/diagonal gap check.
#[derive(Debug, Clone)]
pub enum GapCheck {
    /// Per-axis residuals |lambda_i - Sigma_ii| - eps * max_{j != i} |lambda_i - lambda_j|;
    /// the bound holds when every residual is <= 0 (up to rounding).
    Qualifying { residuals: Vec<f64> },
    /// The eigenvectors are not within eps of the axes, so the bound's
    /// assumption fails and the instance is out of regime, not a failure.
    Rejected { reason: String },
}

pub fn eigen_gap_bound_check(cov: &Matrix, epsilon: f64) -> Result<GapCheck> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon must be positive"));
    }
    let d = cov.rows();
    let eig = sym_eigen(cov)?;
    // Pair each eigenvector with its dominant axis; the pairing must be a
    // permutation with |v_i . b_i| >= 1 - eps.
    let mut axis_of_col = vec![usize::MAX; d];
    let mut seen = vec![false; d];
    for col in 0..d {
        let mut best_axis = 0;
        let mut best = 0.0;
        for row in 0..d {
            let v = eig.eigenvectors.get(row, col).abs();
            if v > best {
                best = v;
                best_axis = row;
            }
        }
        if best < 1.0 - epsilon {
            return Ok(GapCheck::Rejected {
                reason: format!(
                    "eigenvector {col} aligns with axis {best_axis} only to {best:.6}"
                ),
            });
        }
        if seen[best_axis] {
            return Ok(GapCheck::Rejected {
                reason: format!("axis {best_axis} dominates two eigenvectors"),
            });
        }
        seen[best_axis] = true;
        axis_of_col[col] = best_axis;
    }

    let mut residuals = vec![0.0; d];
    for col in 0..d {
        let axis = axis_of_col[col];
        let lambda = eig.eigenvalues[col];
        let gap = (0..d)
            .filter(|&j| j != col)
            .map(|j| (lambda - eig.eigenvalues[j]).abs())
            .fold(0.0f64, f64::max);
        residuals[axis] = (lambda - cov.get(axis, axis)).abs() - epsilon * gap;
    }
    Ok(GapCheck::Qualifying { residuals })
}

/// Random SPD matrix whose eigenvectors stay near the axes: a uniform
/// spectrum conjugated by a product of small Givens rotations.
pub fn near_axis_spd(
    rng: &mut RngStream,
    d: usize,
    lambda_range: (f64, f64),
    max_angle: f64,
) -> Matrix {
    let lambdas: Vec<f64> = (0..d).map(|_| rng.next_range(lambda_range.0, lambda_range.1)).collect();
    // Accumulate Q as a product of plane rotations applied to the identity.
    let mut q = Matrix::identity(d);
    for i in 0..d {
        for j in (i + 1)..d {
            let theta = rng.next_range(-max_angle, max_angle);
            let (s, c) = theta.sin_cos();
            for r in 0..d {
                let qi = q.get(r, i);
                let qj = q.get(r, j);
                q.set(r, i, c * qi - s * qj);
                q.set(r, j, s * qi + c * qj);
            }
        }
    }
    let mut a = Matrix::zeros(d, d);
    for r in 0..d {
        for cidx in 0..d {
            let mut v = 0.0;
            for k in 0..d {
                v += q.get(r, k) * lambdas[k] * q.get(cidx, k);
            }
            a.set(r, cidx, v);
        }
    }
    for r in 0..d {
        for cidx in (r + 1)..d {
            let v = 0.5 * (a.get(r, cidx) + a.get(cidx, r));
            a.set(r, cidx, v);
            a.set(cidx, r, v);
        }
    }
    a
}

/// Builder for two-cluster instances in the tight-feature regime used by
/// the separation and robustness checks.
#[derive(Debug, Clone)]
pub struct TightInstanceConfig {
    pub dim: usize,
    pub tight_count: usize,
    pub tight_sigma: (f64, f64),
    pub loose_sigma: (f64, f64),
    pub tight_sep: (f64, f64),
    pub loose_sep: (f64, f64),
}

impl Default for TightInstanceConfig {
    fn default() -> Self {
        TightInstanceConfig {
            dim: 8,
            tight_count: 4,
            tight_sigma: (0.15, 0.4),
            loose_sigma: (1.8, 3.5),
            tight_sep: (1.8, 3.0),
            loose_sep: (0.4, 1.0),
        }
    }
}

/// Draws one instance: both clusters share the diagonal covariance with
/// tight/loose scales, and the mean separation concentrates on the tight
/// features (with signs randomized).
pub fn sample_tight_instance(rng: &mut RngStream, cfg: &TightInstanceConfig) -> Result<GmmSpec> {
    let d = cfg.dim;
    if cfg.tight_count == 0 || cfg.tight_count >= d {
        return Err(Error::invalid("tight_count must be in (0, dim)"));
    }
    let mut order: Vec<usize> = (0..d).collect();
    for i in (1..d).rev() {
        let j = rng.next_usize(i + 1);
        order.swap(i, j);
    }
    let tight = &order[..cfg.tight_count];
    let mut sigma = vec![0.0; d];
    let mut delta = vec![0.0; d];
    for q in 0..d {
        let is_tight = tight.contains(&q);
        sigma[q] = if is_tight {
            rng.next_range(cfg.tight_sigma.0, cfg.tight_sigma.1)
        } else {
            rng.next_range(cfg.loose_sigma.0, cfg.loose_sigma.1)
        };
        let sep = if is_tight {
            rng.next_range(cfg.tight_sep.0, cfg.tight_sep.1)
        } else {
            rng.next_range(cfg.loose_sep.0, cfg.loose_sep.1)
        };
        let sign = if rng.next_f64() < 0.5 { -1.0 } else { 1.0 };
        delta[q] = sign * sep;
    }
    let cov = Matrix::diag(&sigma.iter().map(|s| s * s).collect::<Vec<_>>());
    let mu_a = vec![0.0; d];
    GmmSpec::two_cluster(&mu_a, &delta, cov.clone(), cov)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn coincident_means_give_half() {
        let cov = Matrix::identity(2);
        let p = misassignment_closed_form(&[1.0, 2.0], &[1.0, 2.0], &cov, &cov).unwrap();
        assert_eq!(p, 0.5);
    }

    #[test]
    fn closed_form_hand_fixture() {
        // d = 2, separation 4 along the first axis, both covariances I:
        // argument reduces to sqrt(2).
        let p = misassignment_closed_form(
            &[0.0, 0.0],
            &[4.0, 0.0],
            &Matrix::identity(2),
            &Matrix::identity(2),
        )
        .unwrap();
        assert!((p - 0.0786496035251426).abs() < 1e-10, "p = {p}");
    }

    #[test]
    fn closed_form_decays_exponentially_in_separation() {
        // Isotropic case with total per-coordinate variance 1.1: the
        // argument is sep / (2 sqrt(1.1)), so the Gaussian tail gives
        // p <= exp(-sep^2 / 8.8) <= exp(-sep^2 / 9).
        let cov = Matrix::identity(2);
        let eps = Matrix::identity(2).scale(0.1);
        for sep in [3.0, 5.0, 7.0] {
            let p = misassignment_closed_form(&[0.0, 0.0], &[sep, 0.0], &cov, &eps).unwrap();
            assert!(p <= (-sep * sep / 9.0).exp(), "sep {sep}: p = {p}");
        }
    }

    #[test]
    fn closed_form_monotonicity() {
        let cov = Matrix::identity(3);
        let mut prev = 1.0;
        for sep in [1.0, 2.0, 3.0, 4.0, 6.0] {
            let p = misassignment_closed_form(&[0.0; 3], &[sep, 0.0, 0.0], &cov, &cov).unwrap();
            assert!(p < prev);
            prev = p;
        }
        // Increasing isotropic noise increases the probability.
        let mut prev = 0.0;
        for scale in [0.5, 1.0, 2.0, 4.0] {
            let eps = Matrix::identity(3).scale(scale);
            let p = misassignment_closed_form(&[0.0; 3], &[3.0, 0.0, 0.0], &cov, &eps).unwrap();
            assert!(p > prev);
            prev = p;
        }
    }

    #[test]
    fn degenerate_variance_is_an_error() {
        let zero = Matrix::zeros(2, 2);
        assert!(matches!(
            misassignment_closed_form(&[0.0, 0.0], &[1.0, 0.0], &zero, &zero),
            Err(Error::DegenerateVariance { .. })
        ));
    }

    #[test]
    fn monte_carlo_matches_closed_form_isotropic() {
        let spec = GmmSpec::two_cluster(
            &[0.0, 0.0],
            &[4.0, 0.0],
            Matrix::identity(2),
            Matrix::identity(2),
        )
        .unwrap();
        let contamination = ContaminationSpec { cov_eps: Matrix::identity(2) };
        let mut rng = RngStream::new(7, 100);
        let (estimate, se) =
            misassignment_monte_carlo(&spec, &contamination, &mut rng, 1_000_000).unwrap();
        let closed = 0.0786496035251426;
        assert!(
            (estimate - closed).abs() <= 3.0 * se,
            "estimate {estimate} vs {closed} (se {se})"
        );
    }

    #[test]
    fn monte_carlo_widely_separated_is_tiny() {
        let spec = GmmSpec::two_cluster(
            &[0.0, 0.0],
            &[20.0, 0.0],
            Matrix::identity(2),
            Matrix::zeros(2, 2),
        )
        .unwrap();
        let contamination = ContaminationSpec { cov_eps: Matrix::zeros(2, 2) };
        let mut rng = RngStream::new(8, 100);
        let (estimate, _) =
            misassignment_monte_carlo(&spec, &contamination, &mut rng, 100_000).unwrap();
        assert!(estimate <= 1e-4);
    }

    #[test]
    fn monte_carlo_coin_flip_at_zero_separation() {
        let spec = GmmSpec::two_cluster(
            &[1.0, 1.0],
            &[1.0, 1.0],
            Matrix::identity(2),
            Matrix::identity(2),
        )
        .unwrap();
        let contamination = ContaminationSpec { cov_eps: Matrix::identity(2) };
        let mut rng = RngStream::new(9, 100);
        let (estimate, se) =
            misassignment_monte_carlo(&spec, &contamination, &mut rng, 100_000).unwrap();
        assert!((estimate - 0.5).abs() <= 3.0 * se);
    }

    #[test]
    fn separation_gain_identity_is_equal() {
        let spec = GmmSpec::two_cluster(
            &[0.0, 0.0],
            &[3.0, 1.0],
            Matrix::identity(2),
            Matrix::identity(2),
        )
        .unwrap();
        let (w, p) = separation_gain(&spec, 0, &[1.0, 1.0]).unwrap();
        assert_eq!(w, p);
    }

    #[test]
    fn separation_gain_hand_fixture() {
        let spec = GmmSpec::two_cluster(
            &[0.0, 0.0],
            &[3.0, 0.0],
            Matrix::identity(2),
            Matrix::identity(2),
        )
        .unwrap();
        let (w, p) = separation_gain(&spec, 0, &[1.5, 0.5]).unwrap();
        assert_eq!(w, 13.5);
        assert_eq!(p, 9.0);
    }

    #[test]
    fn constructed_instances_always_gain_separation() {
        let mut rng = RngStream::new(10, 0);
        let cfg = TightInstanceConfig::default();
        let mut qualifying = 0;
        for _ in 0..100 {
            let spec = sample_tight_instance(&mut rng, &cfg).unwrap();
            if !tight_feature_assumption_holds(&spec, 0) {
                continue;
            }
            qualifying += 1;
            let row = transform_row_from_cov(&spec.covs[0], SpreadMetric::Mad);
            let (w, p) = separation_gain(&spec, 0, &row).unwrap();
            assert!(w >= p, "weighted {w} below plain {p}");
        }
        assert!(qualifying >= 90, "only {qualifying} qualifying instances");
    }

    #[test]
    fn conditioning_hand_fixture() {
        // m proportional to 1/sqrt(diag) of diag(1, 4), mean-1 scaled:
        // [4/3, 2/3]; M Sigma M = (16/9) I.
        let cov = Matrix::diag(&[1.0, 4.0]);
        let row = transform_row_from_cov(&cov, SpreadMetric::Mad);
        assert!((row[0] - 4.0 / 3.0).abs() < 1e-12);
        assert!((row[1] - 2.0 / 3.0).abs() < 1e-12);
        let report = conditioning_compare(&cov, &row).unwrap();
        assert!((report.kappa_plain - 4.0).abs() < 1e-9);
        assert!((report.kappa_transformed - 1.0).abs() < 1e-9);
    }

    #[test]
    fn conditioning_isotropic_is_unchanged() {
        let cov = Matrix::identity(3);
        let row = vec![1.0, 1.0, 1.0];
        let report = conditioning_compare(&cov, &row).unwrap();
        assert_eq!(report.kappa_plain, 1.0);
        assert_eq!(report.kappa_transformed, 1.0);
    }

    #[test]
    fn conditioning_scalar_covariance_is_exactly_equal() {
        let cov = Matrix::identity(4).scale(3.7);
        let row = transform_row_from_cov(&cov, SpreadMetric::Mad);
        assert!(row.iter().all(|&m| (m - 1.0).abs() < 1e-12));
        let report = conditioning_compare(&cov, &row).unwrap();
        assert!((report.kappa_transformed - report.kappa_plain).abs() < 1e-10);
    }

    #[test]
    fn near_axis_draws_mostly_improve_conditioning() {
        let mut rng = RngStream::new(11, 0);
        let mut improved = 0;
        let total = 200;
        for _ in 0..total {
            let cov = near_axis_spd(&mut rng, 6, (0.5, 5.0), 0.05);
            let row = transform_row_from_cov(&cov, SpreadMetric::Mad);
            let report = conditioning_compare(&cov, &row).unwrap();
            if report.kappa_transformed <= report.kappa_plain * (1.0 + 1e-12) {
                improved += 1;
            }
        }
        assert!(improved >= 190, "only {improved}/{total} draws improved");
    }

    #[test]
    fn eigen_gap_diagonal_matrix_residuals_nonpositive() {
        let cov = Matrix::diag(&[1.0, 4.0, 9.0]);
        match eigen_gap_bound_check(&cov, 0.05).unwrap() {
            GapCheck::Qualifying { residuals } => {
                for r in residuals {
                    assert!(r <= 1e-9, "residual {r}");
                }
            }
            GapCheck::Rejected { reason } => panic!("diagonal rejected: {reason}"),
        }
    }

    #[test]
    fn eigen_gap_small_rotation_fixture() {
        // diag(1, 4) rotated by 0.1 rad: alignment cos(0.1), so the bound
        // holds for eps >= 1 - cos(0.1) ~ 0.004996.
        let theta: f64 = 0.1;
        let (s, c) = theta.sin_cos();
        let l = [1.0, 4.0];
        let mut cov = Matrix::zeros(2, 2);
        cov.set(0, 0, c * c * l[0] + s * s * l[1]);
        cov.set(1, 1, s * s * l[0] + c * c * l[1]);
        let off = s * c * (l[1] - l[0]);
        cov.set(0, 1, off);
        cov.set(1, 0, off);
        let eps = s * s; // sin^2(0.1) >= 1 - cos(0.1)
        match eigen_gap_bound_check(&cov, eps).unwrap() {
            GapCheck::Qualifying { residuals } => {
                for r in residuals {
                    assert!(r <= 1e-9, "residual {r}");
                }
            }
            GapCheck::Rejected { reason } => panic!("rejected: {reason}"),
        }
    }

    #[test]
    fn eigen_gap_rejects_far_from_axes() {
        // 45-degree rotation of distinct eigenvalues is far from any axis.
        let theta = std::f64::consts::FRAC_PI_4;
        let (s, c) = theta.sin_cos();
        let l = [1.0, 4.0];
        let mut cov = Matrix::zeros(2, 2);
        cov.set(0, 0, c * c * l[0] + s * s * l[1]);
        cov.set(1, 1, s * s * l[0] + c * c * l[1]);
        let off = s * c * (l[1] - l[0]);
        cov.set(0, 1, off);
        cov.set(1, 0, off);
        assert!(matches!(
            eigen_gap_bound_check(&cov, 0.05).unwrap(),
            GapCheck::Rejected { .. }
        ));
    }

    #[test]
    fn eigen_gap_random_near_axis_draws_hold() {
        let mut rng = RngStream::new(12, 0);
        let mut checked = 0;
        for _ in 0..100 {
            let cov = near_axis_spd(&mut rng, 5, (0.5, 6.0), 0.04);
            match eigen_gap_bound_check(&cov, 0.05).unwrap() {
                GapCheck::Qualifying { residuals } => {
                    checked += 1;
                    for r in residuals {
                        assert!(r <= 1e-9, "residual {r}");
                    }
                }
                GapCheck::Rejected { .. } => {}
            }
        }
        assert!(checked >= 80, "only {checked} qualifying draws");
    }

    #[test]
    fn paired_robustness_identity_case_is_equal() {
        // Isotropic anchor covariance yields an all-ones row, so the two
        // rules coincide decision by decision.
        let spec = GmmSpec::two_cluster(
            &[0.0, 0.0, 0.0],
            &[2.0, 1.0, 0.5],
            Matrix::identity(3),
            Matrix::identity(3),
        )
        .unwrap();
        let contamination = ContaminationSpec { cov_eps: Matrix::identity(3) };
        let mut rng = RngStream::new(13, 0);
        let cmp = robustness_compare(&spec, &contamination, &mut rng, 50_000).unwrap();
        assert_eq!(cmp.standard_rate, cmp.ac_rate);
        assert_eq!(cmp.ac_only_errors, 0);
        assert_eq!(cmp.standard_only_errors, 0);
    }

    #[test]
    fn loose_feature_noise_strictly_favors_the_transformed_rule() {
        // Separation mostly on tight features; contamination only along the
        // loose ones. The transformed rule suppresses exactly the noisy
        // directions.
        let d = 8;
        let mut sigma2 = vec![0.09; d];
        for q in 4..d {
            sigma2[q] = 9.0;
        }
        let cov = Matrix::diag(&sigma2);
        let mut delta = vec![2.8, 2.8, 2.8, 2.8, 1.2, 1.2, 1.2, 1.2];
        delta[5] *= -1.0;
        let spec = GmmSpec::two_cluster(&vec![0.0; d], &delta, cov.clone(), cov).unwrap();
        assert!(tight_feature_assumption_holds(&spec, 0));
        let mut eps_diag = vec![0.0; d];
        for q in 4..d {
            eps_diag[q] = 9.0;
        }
        let contamination = ContaminationSpec { cov_eps: Matrix::diag(&eps_diag) };
        let mut rng = RngStream::new(14, 0);
        let cmp = robustness_compare(&spec, &contamination, &mut rng, 1_000_000).unwrap();
        let combined_se = (cmp.standard_se * cmp.standard_se + cmp.ac_se * cmp.ac_se).sqrt();
        assert!(
            cmp.standard_rate - cmp.ac_rate >= 5.0 * combined_se,
            "standard {} vs ac {} (combined se {})",
            cmp.standard_rate,
            cmp.ac_rate,
            combined_se
        );
        // In this construction the transformed rule's error set is a subset
        // of the plain rule's on the shared stream.
        assert_eq!(cmp.ac_only_errors, 0);
    }
}
