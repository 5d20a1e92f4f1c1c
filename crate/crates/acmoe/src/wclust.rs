//! Feature-weighted clustering: per-cluster per-feature dispersion
//! statistics, the Lagrangian root solve for the per-cluster multiplier,
//! and the resulting optimal feature weights, plus a brute-force joint
//! optimizer usable as a test oracle on tiny instances.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::stats::SpreadMetric;

/// Token batch: n tokens as rows, d features as columns.
pub type TokenBatch = Matrix;

/// Per-token cluster labels in `[0, num_experts)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    labels: Vec<usize>,
    num_experts: usize,
}

impl ClusterAssignment {
    pub fn new(labels: Vec<usize>, num_experts: usize) -> Result<Self> {
        if num_experts == 0 {
            return Err(Error::invalid("num_experts must be positive"));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_experts) {
            return Err(Error::invalid(format!(
                "label {bad} out of range for {num_experts} experts"
            )));
        }
        Ok(ClusterAssignment { labels, num_experts })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Tokens per cluster; sums to `len()`.
    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.num_experts];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }
}

/// Which dispersion statistic a profile holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DispersionKind {
    /// N_k^-2 double sum of squared per-feature differences.
    PairwiseSquared,
    /// N_k^-2 double sum of absolute per-feature differences.
    PairwiseAbsolute,
    /// Mean absolute deviation from the cluster mean.
    Mad,
    /// Population variance around the cluster mean.
    Variance,
}

/// Pairwise distance metric over a single feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairwiseMetric {
    Squared,
    Absolute,
}

/// Per-cluster per-feature spread statistics s_qk.
///
/// Rows of clusters that hold no tokens are flagged empty and left zero
/// rather than populated.
#[derive(Debug, Clone)]
pub struct DispersionProfile {
    s: Matrix,
    kind: DispersionKind,
    counts: Vec<usize>,
}

impl DispersionProfile {
    pub fn num_clusters(&self) -> usize {
        self.s.rows()
    }

    pub fn num_features(&self) -> usize {
        self.s.cols()
    }

    pub fn kind(&self) -> DispersionKind {
        self.kind
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn is_cluster_empty(&self, k: usize) -> bool {
        self.counts[k] == 0
    }

    /// Dispersion row for cluster `k`; meaningless when the cluster is empty.
    pub fn row(&self, k: usize) -> &[f64] {
        self.s.row(k)
    }
}

/// Theorem-style pairwise dispersion: s_qk = N_k^-2 sum_{i,j in k} rho(h_iq, h_jq).
///
/// The squared metric uses the moment identity (twice the population
/// variance) in O(n d); the absolute metric sorts each cluster's feature
/// column, O(N_k log N_k) per feature.
pub fn pairwise_dispersion(
    batch: &TokenBatch,
    assign: &ClusterAssignment,
    rho: PairwiseMetric,
) -> Result<DispersionProfile> {
    check_assignment(batch, assign)?;
    let e = assign.num_experts();
    let d = batch.cols();
    let counts = assign.counts();
    let mut s = Matrix::zeros(e, d);

    match rho {
        PairwiseMetric::Squared => {
            // sum_{i,j} (x_i - x_j)^2 = 2N sum x^2 - 2 (sum x)^2, so
            // s = 2 * population variance.
            let mut sums = Matrix::zeros(e, d);
            let mut sq_sums = Matrix::zeros(e, d);
            for i in 0..batch.rows() {
                let k = assign.labels()[i];
                let row = batch.row(i);
                for q in 0..d {
                    sums.set(k, q, sums.get(k, q) + row[q]);
                    sq_sums.set(k, q, sq_sums.get(k, q) + row[q] * row[q]);
                }
            }
            for k in 0..e {
                let n_k = counts[k] as f64;
                if counts[k] == 0 {
                    continue;
                }
                for q in 0..d {
                    let mean = sums.get(k, q) / n_k;
                    let var = (sq_sums.get(k, q) / n_k - mean * mean).max(0.0);
                    s.set(k, q, 2.0 * var);
                }
            }
        }
        PairwiseMetric::Absolute => {
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); e];
            for (i, &k) in assign.labels().iter().enumerate() {
                members[k].push(i);
            }
            for k in 0..e {
                let n_k = members[k].len();
                if n_k == 0 {
                    continue;
                }
                let mut col = vec![0.0; n_k];
                for q in 0..d {
                    for (slot, &i) in members[k].iter().enumerate() {
                        col[slot] = batch.get(i, q);
                    }
                    col.sort_by(|a, b| a.partial_cmp(b).unwrap());
                    // sum_{i<j} (x_(j) - x_(i)) via sorted prefix weights,
                    // then doubled for ordered pairs.
                    let mut acc = 0.0;
                    for (m, &x) in col.iter().enumerate() {
                        acc += x * (2.0 * m as f64 - (n_k as f64 - 1.0));
                    }
                    s.set(k, q, 2.0 * acc / (n_k as f64 * n_k as f64));
                }
            }
        }
    }

    let kind = match rho {
        PairwiseMetric::Squared => DispersionKind::PairwiseSquared,
        PairwiseMetric::Absolute => DispersionKind::PairwiseAbsolute,
    };
    Ok(DispersionProfile { s, kind, counts })
}

/// Moment-style dispersion (MAD or variance around the cluster mean),
/// computed with exactly two passes over the batch.
pub fn spread_dispersion(
    batch: &TokenBatch,
    assign: &ClusterAssignment,
    metric: SpreadMetric,
) -> Result<DispersionProfile> {
    check_assignment(batch, assign)?;
    let e = assign.num_experts();
    let d = batch.cols();
    let counts = assign.counts();

    let mut means = Matrix::zeros(e, d);
    for i in 0..batch.rows() {
        let k = assign.labels()[i];
        let row = batch.row(i);
        let m = means.row_mut(k);
        for q in 0..d {
            m[q] += row[q];
        }
    }
    for k in 0..e {
        if counts[k] == 0 {
            continue;
        }
        let n_k = counts[k] as f64;
        for v in means.row_mut(k) {
            *v /= n_k;
        }
    }

    let mut s = Matrix::zeros(e, d);
    for i in 0..batch.rows() {
        let k = assign.labels()[i];
        let row = batch.row(i);
        for q in 0..d {
            let dev = row[q] - means.get(k, q);
            let add = match metric {
                SpreadMetric::Mad => dev.abs(),
                SpreadMetric::Variance => dev * dev,
            };
            s.set(k, q, s.get(k, q) + add);
        }
    }
    for k in 0..e {
        if counts[k] == 0 {
            continue;
        }
        let n_k = counts[k] as f64;
        for v in s.row_mut(k) {
            *v /= n_k;
        }
    }

    let kind = match metric {
        SpreadMetric::Mad => DispersionKind::Mad,
        SpreadMetric::Variance => DispersionKind::Variance,
    };
    Ok(DispersionProfile { s, kind, counts })
}

fn check_assignment(batch: &TokenBatch, assign: &ClusterAssignment) -> Result<()> {
    if batch.rows() == 0 {
        return Err(Error::EmptyInput { context: "empty token batch".into() });
    }
    if assign.len() != batch.rows() {
        return Err(Error::shape(format!(
            "{} labels for {} tokens",
            assign.len(),
            batch.rows()
        )));
    }
    Ok(())
}

/// Row-stochastic per-cluster feature weights together with the solver
/// state that produced them.
#[derive(Debug, Clone)]
pub struct FeatureWeights {
    w: Matrix,
    lambda: f64,
    alpha: Vec<f64>,
}

impl FeatureWeights {
    /// Builds from explicit rows, validating the simplex constraint.
    pub fn from_rows(w: Matrix, lambda: f64, alpha: Vec<f64>) -> Result<Self> {
        if alpha.len() != w.rows() {
            return Err(Error::shape("one alpha per cluster"));
        }
        for k in 0..w.rows() {
            let row = w.row(k);
            if row.iter().any(|&v| v <= 0.0) {
                return Err(Error::invalid(format!("weights row {k} not strictly positive")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::invalid(format!("weights row {k} sums to {sum}, not 1")));
            }
        }
        Ok(FeatureWeights { w, lambda, alpha })
    }

    pub fn weights(&self) -> &Matrix {
        &self.w
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.w.row(k)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    /// Max KKT stationarity residual |s_qk - (lambda/d) / w_qk + alpha_k|
    /// over a profile's non-empty rows.
    pub fn kkt_residual(&self, profile: &DispersionProfile) -> f64 {
        let d = self.w.cols() as f64;
        let mut worst = 0.0f64;
        for k in 0..self.w.rows() {
            if profile.is_cluster_empty(k) {
                continue;
            }
            for q in 0..self.w.cols() {
                let r = profile.row(k)[q] - (self.lambda / d) / self.w.get(k, q) + self.alpha[k];
                worst = worst.max(r.abs());
            }
        }
        worst
    }
}

/// Root-sum residual |sum_q 1/(s_q + alpha) - d/lambda|.
pub fn alpha_residual(s_row: &[f64], lambda: f64, alpha: f64) -> f64 {
    let d = s_row.len() as f64;
    let sum: f64 = s_row.iter().map(|&s| 1.0 / (s + alpha)).sum();
    (sum - d / lambda).abs()
}

/// Solves sum_q 1/(s_q + alpha) = d/lambda for the unique root on
/// (-min_q s_q, infinity), the branch on which every weight is positive.
///
/// phi(alpha) = sum 1/(s_q + alpha) - d/lambda decreases strictly from
/// +infinity to -d/lambda on that interval, so a bracket plus bisection is
/// unconditionally safe. The bracket starts just right of the pole and
/// doubles outward from lambda until phi goes negative.
pub fn solve_alpha(s_row: &[f64], lambda: f64) -> Result<f64> {
    let d = s_row.len();
    if d == 0 {
        return Err(Error::EmptyInput { context: "empty dispersion row".into() });
    }
    if !(lambda > 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("lambda must be positive, got {lambda}")));
    }
    if s_row.iter().any(|&s| !(s >= 0.0) || !s.is_finite()) {
        return Err(Error::invalid("dispersions must be finite and nonnegative"));
    }

    let min_s = s_row.iter().copied().fold(f64::INFINITY, f64::min);
    let max_s = s_row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max_s - min_s == 0.0 {
        // All dispersions equal: the row-sum constraint forces uniform
        // weights, hence alpha = lambda - s exactly.
        return Ok(lambda - min_s);
    }

    let df = d as f64;
    let target = df / lambda;
    let phi = |alpha: f64| -> f64 { s_row.iter().map(|&s| 1.0 / (s + alpha)).sum::<f64>() - target };

    let mut lo = -min_s + 1e-12 * (1.0 + min_s);
    let phi_lo = phi(lo);
    if !(phi_lo > 0.0) {
        return Err(Error::RootSolver {
            context: "phi not positive at the pole-side bracket end".into(),
            lo,
            hi: lambda,
            phi_lo,
            phi_hi: phi(lambda),
        });
    }

    let mut hi = if lambda > lo { lambda } else { lo + 1.0 + lo.abs() };
    let mut phi_hi = phi(hi);
    let mut expansions = 0;
    while phi_hi >= 0.0 {
        hi = lo + 2.0 * (hi - lo);
        phi_hi = phi(hi);
        expansions += 1;
        if expansions > 200 || !hi.is_finite() {
            return Err(Error::RootSolver {
                context: "bracket expansion failed".into(),
                lo,
                hi,
                phi_lo,
                phi_hi,
            });
        }
    }

    for _ in 0..500 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if phi(mid) > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * lo.abs().max(hi.abs()) {
            break;
        }
    }
    let alpha = 0.5 * (lo + hi);

    let residual = alpha_residual(s_row, lambda, alpha);
    if residual > 1e-10 * target {
        return Err(Error::RootSolver {
            context: format!("residual {residual:.3e} exceeds 1e-10 * d/lambda"),
            lo,
            hi,
            phi_lo: phi(lo),
            phi_hi: phi(hi),
        });
    }
    Ok(alpha)
}

/// Optimal feature weights w_qk = (lambda/d) / (s_qk + alpha_k) for every
/// cluster of a dispersion profile. Empty clusters get uniform rows.
pub fn optimal_weights(profile: &DispersionProfile, lambda: f64) -> Result<FeatureWeights> {
    let e = profile.num_clusters();
    let d = profile.num_features();
    let uniform = 1.0 / d as f64;
    let mut w = Matrix::zeros(e, d);
    let mut alpha = vec![0.0; e];
    for k in 0..e {
        if profile.is_cluster_empty(k) {
            for q in 0..d {
                w.set(k, q, uniform);
            }
            // Consistent with an all-zero dispersion row.
            alpha[k] = lambda;
            continue;
        }
        let a = solve_alpha(profile.row(k), lambda)?;
        alpha[k] = a;
        let scale = lambda / d as f64;
        for q in 0..d {
            w.set(k, q, scale / (profile.row(k)[q] + a));
        }
    }
    FeatureWeights::from_rows(w, lambda, alpha)
}

/// The clustering criterion
/// sum_k N_k^-2 sum_{i,j in k} sum_q [ w_qk rho_ijq + (lambda/d) log(1/(d w_qk)) ],
/// with empty clusters excluded.
pub fn clustering_objective(
    batch: &TokenBatch,
    assign: &ClusterAssignment,
    weights: &FeatureWeights,
    lambda: f64,
    rho: PairwiseMetric,
) -> Result<f64> {
    let d = batch.cols();
    if weights.weights().cols() != d || weights.weights().rows() != assign.num_experts() {
        return Err(Error::shape(format!(
            "weights {}x{} against {} experts x {} features",
            weights.weights().rows(),
            weights.weights().cols(),
            assign.num_experts(),
            d
        )));
    }
    let profile = pairwise_dispersion(batch, assign, rho)?;
    let df = d as f64;
    let mut total = 0.0;
    for k in 0..assign.num_experts() {
        if profile.is_cluster_empty(k) {
            continue;
        }
        for q in 0..d {
            let w = weights.weights().get(k, q);
            total += w * profile.row(k)[q] + (lambda / df) * (1.0 / (df * w)).ln();
        }
    }
    Ok(total)
}

/// Exhaustive joint minimization over all E^n assignments, each paired
/// with its optimal weights. Only viable for tiny instances; intended as
/// an oracle.
pub fn brute_force_joint(
    batch: &TokenBatch,
    num_experts: usize,
    lambda: f64,
    rho: PairwiseMetric,
) -> Result<(ClusterAssignment, FeatureWeights, f64)> {
    let n = batch.rows();
    if n > 10 || num_experts > 3 {
        return Err(Error::InstanceTooLarge {
            context: format!("{n} tokens x {num_experts} experts (limits: 10 and 3)"),
        });
    }
    if num_experts == 0 {
        return Err(Error::invalid("num_experts must be positive"));
    }

    let mut best: Option<(ClusterAssignment, FeatureWeights, f64)> = None;
    let mut labels = vec![0usize; n];
    let total = (num_experts as u64).pow(n as u32);
    for code in 0..total {
        let mut c = code;
        for l in labels.iter_mut() {
            *l = (c % num_experts as u64) as usize;
            c /= num_experts as u64;
        }
        let assign = ClusterAssignment::new(labels.clone(), num_experts)?;
        let profile = pairwise_dispersion(batch, &assign, rho)?;
        let weights = optimal_weights(&profile, lambda)?;
        let objective = clustering_objective(batch, &assign, &weights, lambda, rho)?;
        if best.as_ref().map_or(true, |(_, _, b)| objective < *b) {
            best = Some((assign, weights, objective));
        }
    }
    Ok(best.expect("at least one assignment enumerated"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::rng::RngStream;
    use crate::numerics::stats::dispersion;

    /// Direct double-loop oracle for pairwise dispersion.
    fn pairwise_oracle(values: &[f64], rho: PairwiseMetric) -> f64 {
        let n = values.len() as f64;
        let mut acc = 0.0;
        for &a in values {
            for &b in values {
                acc += match rho {
                    PairwiseMetric::Squared => (a - b) * (a - b),
                    PairwiseMetric::Absolute => (a - b).abs(),
                };
            }
        }
        acc / (n * n)
    }

    fn single_cluster_batch(values: &[f64]) -> (TokenBatch, ClusterAssignment) {
        let rows: Vec<Vec<f64>> = values.iter().map(|&v| vec![v]).collect();
        let batch = Matrix::from_rows(&rows).unwrap();
        let assign = ClusterAssignment::new(vec![0; values.len()], 1).unwrap();
        (batch, assign)
    }

    #[test]
    fn pairwise_squared_fixture() {
        let (batch, assign) = single_cluster_batch(&[0.0, 2.0]);
        let p = pairwise_dispersion(&batch, &assign, PairwiseMetric::Squared).unwrap();
        // Pairwise sum 8 over N^2 = 4.
        assert!((p.row(0)[0] - 2.0).abs() < 1e-15);
    }

    #[test]
    fn constant_cluster_has_zero_spread() {
        let (batch, assign) = single_cluster_batch(&[3.0, 3.0, 3.0]);
        for rho in [PairwiseMetric::Squared, PairwiseMetric::Absolute] {
            let p = pairwise_dispersion(&batch, &assign, rho).unwrap();
            assert_eq!(p.row(0)[0], 0.0);
        }
    }

    #[test]
    fn pairwise_matches_double_loop_oracle() {
        let mut rng = RngStream::new(21, 0);
        for _ in 0..20 {
            let n = 2 + rng.next_usize(12);
            let values: Vec<f64> = (0..n).map(|_| rng.next_range(-5.0, 5.0)).collect();
            let (batch, assign) = single_cluster_batch(&values);
            for rho in [PairwiseMetric::Squared, PairwiseMetric::Absolute] {
                let got = pairwise_dispersion(&batch, &assign, rho).unwrap().row(0)[0];
                let want = pairwise_oracle(&values, rho);
                assert!((got - want).abs() < 1e-10, "{rho:?}: got {got}, want {want}");
            }
        }
    }

    #[test]
    fn squared_pairwise_is_twice_population_variance() {
        let mut rng = RngStream::new(33, 0);
        for _ in 0..20 {
            let n = 2 + rng.next_usize(30);
            let values: Vec<f64> = (0..n).map(|_| rng.next_range(-2.0, 8.0)).collect();
            let (batch, assign) = single_cluster_batch(&values);
            let got = pairwise_dispersion(&batch, &assign, PairwiseMetric::Squared).unwrap().row(0)[0];
            let var = dispersion(&values, SpreadMetric::Variance).unwrap();
            assert!((got - 2.0 * var).abs() < 1e-10);
        }
    }

    #[test]
    fn empty_cluster_is_flagged() {
        let batch = Matrix::from_rows(&[vec![1.0], vec![2.0]]).unwrap();
        let assign = ClusterAssignment::new(vec![0, 0], 2).unwrap();
        let p = pairwise_dispersion(&batch, &assign, PairwiseMetric::Squared).unwrap();
        assert!(!p.is_cluster_empty(0));
        assert!(p.is_cluster_empty(1));
    }

    #[test]
    fn alpha_equal_dispersions_closed_form() {
        for lambda in [0.3, 1.0, 5.0] {
            let a = solve_alpha(&[2.0, 2.0, 2.0], lambda).unwrap();
            assert_eq!(a, lambda - 2.0);
        }
    }

    #[test]
    fn alpha_two_feature_quadratic_oracle() {
        // For s = [1, 3], lambda = 1 the constraint is quadratic with
        // admissible root (-3 + sqrt 5) / 2.
        let a = solve_alpha(&[1.0, 3.0], 1.0).unwrap();
        let want = (-3.0 + 5.0f64.sqrt()) / 2.0;
        assert!((a - want).abs() < 1e-12, "alpha {a} vs {want}");
    }

    #[test]
    fn alpha_residual_small_on_random_rows() {
        let mut rng = RngStream::new(4, 0);
        for _ in 0..200 {
            let d = 2 + rng.next_usize(15);
            let s: Vec<f64> = (0..d).map(|_| rng.next_range(0.0, 10.0)).collect();
            let lambda = rng.next_range(0.05, 5.0);
            let a = solve_alpha(&s, lambda).unwrap();
            let min_s = s.iter().copied().fold(f64::INFINITY, f64::min);
            assert!(a > -min_s);
            assert!(alpha_residual(&s, lambda, a) <= 1e-10 * (d as f64 / lambda));
        }
    }

    #[test]
    fn weights_two_feature_fixture() {
        let profile = DispersionProfile {
            s: Matrix::from_rows(&[vec![1.0, 3.0]]).unwrap(),
            kind: DispersionKind::PairwiseSquared,
            counts: vec![2],
        };
        let fw = optimal_weights(&profile, 1.0).unwrap();
        assert!((fw.row(0)[0] - 0.8090169943749475).abs() < 1e-9);
        assert!((fw.row(0)[1] - 0.19098300562505258).abs() < 1e-9);
        assert!((fw.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn equal_dispersions_give_uniform_weights() {
        let profile = DispersionProfile {
            s: Matrix::from_rows(&[vec![0.7, 0.7, 0.7, 0.7]]).unwrap(),
            kind: DispersionKind::Mad,
            counts: vec![5],
        };
        let fw = optimal_weights(&profile, 2.0).unwrap();
        for &w in fw.row(0) {
            assert!((w - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_cluster_rows_are_uniform() {
        let profile = DispersionProfile {
            s: Matrix::zeros(2, 4),
            kind: DispersionKind::Mad,
            counts: vec![3, 0],
        };
        let fw = optimal_weights(&profile, 1.0).unwrap();
        for &w in fw.row(1) {
            assert_eq!(w, 0.25);
        }
    }

    #[test]
    fn weights_decrease_as_dispersion_grows() {
        let mut rng = RngStream::new(9, 0);
        for _ in 0..50 {
            let d = 2 + rng.next_usize(10);
            let s: Vec<f64> = (0..d).map(|_| rng.next_range(0.0, 4.0)).collect();
            let profile = DispersionProfile {
                s: Matrix::from_rows(&[s.clone()]).unwrap(),
                kind: DispersionKind::Variance,
                counts: vec![10],
            };
            let fw = optimal_weights(&profile, 1.0).unwrap();
            let mut order: Vec<usize> = (0..d).collect();
            order.sort_by(|&a, &b| s[a].partial_cmp(&s[b]).unwrap());
            for pair in order.windows(2) {
                let (lo, hi) = (pair[0], pair[1]);
                if s[hi] > s[lo] {
                    assert!(fw.row(0)[hi] < fw.row(0)[lo]);
                } else {
                    assert_eq!(fw.row(0)[hi], fw.row(0)[lo]);
                }
            }
        }
    }

    #[test]
    fn kkt_stationarity_holds() {
        let mut rng = RngStream::new(50, 0);
        for _ in 0..50 {
            let d = 2 + rng.next_usize(12);
            let s: Vec<f64> = (0..d).map(|_| rng.next_range(0.0, 6.0)).collect();
            let profile = DispersionProfile {
                s: Matrix::from_rows(&[s]).unwrap(),
                kind: DispersionKind::Variance,
                counts: vec![8],
            };
            let fw = optimal_weights(&profile, 1.3).unwrap();
            assert!(fw.kkt_residual(&profile) <= 1e-8);
        }
    }

    #[test]
    fn large_lambda_limit_is_uniform() {
        let s = vec![0.1, 2.0, 5.0, 9.0];
        let max_s = 9.0;
        let profile = DispersionProfile {
            s: Matrix::from_rows(&[s]).unwrap(),
            kind: DispersionKind::Variance,
            counts: vec![4],
        };
        let fw = optimal_weights(&profile, 1e6 * max_s).unwrap();
        for &w in fw.row(0) {
            assert!((w - 0.25).abs() <= 1e-3);
        }
    }

    #[test]
    fn objective_at_uniform_weights_is_mean_dispersion() {
        let batch = Matrix::from_rows(&[
            vec![0.0, 1.0],
            vec![2.0, 1.5],
            vec![1.0, -1.0],
        ])
        .unwrap();
        let assign = ClusterAssignment::new(vec![0, 0, 0], 1).unwrap();
        let d = 2usize;
        let uniform = FeatureWeights::from_rows(
            Matrix::from_rows(&[vec![1.0 / d as f64; 2]]).unwrap(),
            1.0,
            vec![1.0],
        )
        .unwrap();
        let got = clustering_objective(&batch, &assign, &uniform, 1.0, PairwiseMetric::Squared).unwrap();
        let profile = pairwise_dispersion(&batch, &assign, PairwiseMetric::Squared).unwrap();
        let want: f64 = profile.row(0).iter().sum::<f64>() / d as f64;
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn optimal_weights_beat_uniform_on_random_instances() {
        let mut rng = RngStream::new(61, 0);
        for _ in 0..50 {
            let n = 4 + rng.next_usize(10);
            let d = 2 + rng.next_usize(5);
            let e = 1 + rng.next_usize(3);
            let rows: Vec<Vec<f64>> =
                (0..n).map(|_| (0..d).map(|_| rng.next_range(-3.0, 3.0)).collect()).collect();
            let batch = Matrix::from_rows(&rows).unwrap();
            let labels: Vec<usize> = (0..n).map(|_| rng.next_usize(e)).collect();
            let assign = ClusterAssignment::new(labels, e).unwrap();
            let lambda = rng.next_range(0.2, 3.0);
            let profile = pairwise_dispersion(&batch, &assign, PairwiseMetric::Squared).unwrap();
            let opt = optimal_weights(&profile, lambda).unwrap();
            let uniform = FeatureWeights::from_rows(
                Matrix::from_vec(e, d, vec![1.0 / d as f64; e * d]).unwrap(),
                lambda,
                vec![lambda; e],
            )
            .unwrap();
            let q_opt =
                clustering_objective(&batch, &assign, &opt, lambda, PairwiseMetric::Squared).unwrap();
            let q_uni =
                clustering_objective(&batch, &assign, &uniform, lambda, PairwiseMetric::Squared)
                    .unwrap();
            assert!(q_opt <= q_uni + 1e-12, "opt {q_opt} > uniform {q_uni}");
        }
    }

    /// Exhaustive 0.01-lattice search over the 3-simplex for the profile's
    /// single row.
    fn grid_search_objective(s: &[f64], lambda: f64) -> f64 {
        let mut best = f64::INFINITY;
        let steps = 100i64;
        for i in 1..steps {
            for j in 1..(steps - i) {
                let w = [i as f64 / 100.0, j as f64 / 100.0, (steps - i - j) as f64 / 100.0];
                let q: f64 = (0..3)
                    .map(|q| w[q] * s[q] + (lambda / 3.0) * (1.0 / (3.0 * w[q])).ln())
                    .sum();
                best = best.min(q);
            }
        }
        best
    }

    #[test]
    fn grid_search_agrees_on_three_features() {
        // Instances constructed so the optimum lies on the 0.01 lattice:
        // s_q = (lambda/d) / w_q - alpha puts the optimal weights exactly at
        // w. The grid oracle must then reproduce the solver's objective.
        let cases: [([f64; 3], f64); 3] =
            [([0.47, 0.31, 0.22], 0.2), ([0.50, 0.30, 0.20], 0.0), ([0.36, 0.34, 0.30], 0.5)];
        let lambda = 1.0;
        for (w_target, alpha) in cases {
            let s: Vec<f64> = w_target.iter().map(|&w| (lambda / 3.0) / w - alpha).collect();
            assert!(s.iter().all(|&v| v >= 0.0));
            let profile = DispersionProfile {
                s: Matrix::from_rows(&[s.clone()]).unwrap(),
                kind: DispersionKind::PairwiseSquared,
                counts: vec![4],
            };
            let fw = optimal_weights(&profile, lambda).unwrap();
            for q in 0..3 {
                assert!((fw.row(0)[q] - w_target[q]).abs() < 1e-10);
            }
            let q_opt: f64 = (0..3)
                .map(|q| {
                    fw.row(0)[q] * s[q] + (lambda / 3.0) * (1.0 / (3.0 * fw.row(0)[q])).ln()
                })
                .sum();
            let best = grid_search_objective(&s, lambda);
            assert!(best >= q_opt - 1e-12, "grid {best} below optimum {q_opt}");
            assert!(best - q_opt <= 1e-4, "grid {best} vs optimum {q_opt}");
        }
    }

    #[test]
    fn grid_search_never_beats_the_solver() {
        let mut rng = RngStream::new(83, 0);
        for _ in 0..10 {
            let s: Vec<f64> = (0..3).map(|_| rng.next_range(0.0, 4.0)).collect();
            let lambda = rng.next_range(0.3, 3.0);
            let profile = DispersionProfile {
                s: Matrix::from_rows(&[s.clone()]).unwrap(),
                kind: DispersionKind::PairwiseSquared,
                counts: vec![4],
            };
            let fw = optimal_weights(&profile, lambda).unwrap();
            let q_opt: f64 = (0..3)
                .map(|q| {
                    fw.row(0)[q] * s[q] + (lambda / 3.0) * (1.0 / (3.0 * fw.row(0)[q])).ln()
                })
                .sum();
            let best = grid_search_objective(&s, lambda);
            assert!(best >= q_opt - 1e-12, "grid {best} below optimum {q_opt}");
        }
    }

    #[test]
    fn brute_force_groups_separated_pairs() {
        let batch = Matrix::from_rows(&[
            vec![0.0, 0.1],
            vec![0.1, 0.0],
            vec![10.0, 10.1],
            vec![10.1, 10.0],
        ])
        .unwrap();
        let (assign, _, _) = brute_force_joint(&batch, 2, 1.0, PairwiseMetric::Squared).unwrap();
        let l = assign.labels();
        assert_eq!(l[0], l[1]);
        assert_eq!(l[2], l[3]);
        assert_ne!(l[0], l[2]);
    }

    #[test]
    fn brute_force_beats_random_assignments() {
        let mut rng = RngStream::new(71, 0);
        let rows: Vec<Vec<f64>> =
            (0..6).map(|_| (0..2).map(|_| rng.next_range(-2.0, 2.0)).collect()).collect();
        let batch = Matrix::from_rows(&rows).unwrap();
        let lambda = 0.8;
        let (_, _, best_obj) = brute_force_joint(&batch, 2, lambda, PairwiseMetric::Squared).unwrap();
        for _ in 0..50 {
            let labels: Vec<usize> = (0..6).map(|_| rng.next_usize(2)).collect();
            let assign = ClusterAssignment::new(labels, 2).unwrap();
            let profile = pairwise_dispersion(&batch, &assign, PairwiseMetric::Squared).unwrap();
            let weights = optimal_weights(&profile, lambda).unwrap();
            let q = clustering_objective(&batch, &assign, &weights, lambda, PairwiseMetric::Squared)
                .unwrap();
            assert!(best_obj <= q + 1e-12);
        }
    }

    #[test]
    fn brute_force_single_expert_matches_whole_batch_weights() {
        let batch = Matrix::from_rows(&[
            vec![0.0, 3.0],
            vec![1.0, 1.0],
            vec![2.0, -1.0],
        ])
        .unwrap();
        let (assign, weights, _) = brute_force_joint(&batch, 1, 1.0, PairwiseMetric::Squared).unwrap();
        assert!(assign.labels().iter().all(|&l| l == 0));
        let profile = pairwise_dispersion(&batch, &assign, PairwiseMetric::Squared).unwrap();
        let direct = optimal_weights(&profile, 1.0).unwrap();
        for q in 0..2 {
            assert!((weights.row(0)[q] - direct.row(0)[q]).abs() < 1e-14);
        }
    }

    #[test]
    fn brute_force_rejects_large_instances() {
        let batch = Matrix::zeros(11, 2);
        assert!(matches!(
            brute_force_joint(&batch, 2, 1.0, PairwiseMetric::Squared),
            Err(Error::InstanceTooLarge { .. })
        ));
    }
}
