//! Router transforms and routing rules: standard dot-product top-k,
//! adaptively transformed top-k, transform mixing, dynamic top-p, and the
//! random-diagonal ablation.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::RngStream;
use crate::numerics::stats::{softmax, SpreadMetric};
use crate::wclust::{ClusterAssignment, DispersionKind, DispersionProfile, TokenBatch};

/// Where a transform's diagonal weights came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransformSource {
    Mad,
    Variance,
    Random,
    Identity,
}

/// Which side of the dispersion statistic gets rescaled to mean 1.
///
/// The default scales the inverse dispersions (the diagonal entries
/// themselves); the alternative scales the dispersions before inverting,
/// which does not generally leave the diagonal with mean 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormalizationTarget {
    #[default]
    InverseDispersion,
    Dispersion,
}

/// Per-expert diagonal router transforms: row k holds the diagonal of M_k.
#[derive(Debug, Clone)]
pub struct RouterTransform {
    m: Matrix,
    source: TransformSource,
    normalized: bool,
}

impl RouterTransform {
    pub fn identity(num_experts: usize, dim: usize) -> Self {
        RouterTransform {
            m: Matrix::from_vec(num_experts, dim, vec![1.0; num_experts * dim]).unwrap(),
            source: TransformSource::Identity,
            normalized: true,
        }
    }

    /// Wraps one explicit diagonal row as a single-anchor transform.
    pub fn from_single_row(row: &[f64]) -> Self {
        RouterTransform {
            m: Matrix::from_vec(1, row.len(), row.to_vec()).unwrap(),
            source: TransformSource::Identity,
            normalized: false,
        }
    }

    pub fn num_experts(&self) -> usize {
        self.m.rows()
    }

    pub fn dim(&self) -> usize {
        self.m.cols()
    }

    pub fn source(&self) -> TransformSource {
        self.source
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    pub fn row(&self, k: usize) -> &[f64] {
        self.m.row(k)
    }

    pub fn matrix(&self) -> &Matrix {
        &self.m
    }
}

/// Inverts a dispersion row into mean-1 diagonal weights.
///
/// Dispersions are floored at 1e-8 + 1e-4 * (row mean) before inversion so
/// constant features cannot blow up the weights.
pub fn transform_row_from_dispersions(s_row: &[f64], target: NormalizationTarget) -> Vec<f64> {
    let d = s_row.len();
    let mean_s = s_row.iter().sum::<f64>() / d as f64;
    let floor = 1e-8 + 1e-4 * mean_s;
    match target {
        NormalizationTarget::InverseDispersion => {
            let raw: Vec<f64> = s_row.iter().map(|&s| 1.0 / s.max(floor)).collect();
            let sum: f64 = raw.iter().sum();
            raw.iter().map(|&m| d as f64 * m / sum).collect()
        }
        NormalizationTarget::Dispersion => {
            let floored: Vec<f64> = s_row.iter().map(|&s| s.max(floor)).collect();
            let sum: f64 = floored.iter().sum();
            floored.iter().map(|&s| sum / (d as f64 * s)).collect()
        }
    }
}

/// Builds the per-expert router transform from a batch and its cluster
/// assignment using the default mean-1 scaling of the inverse dispersions.
pub fn build_transform(
    batch: &TokenBatch,
    assign: &ClusterAssignment,
    metric: SpreadMetric,
) -> Result<RouterTransform> {
    build_transform_with(batch, assign, metric, NormalizationTarget::default())
}

/// As [`build_transform`], with an explicit normalization target.
///
/// Experts holding one token or none fall back to an identity row, which
/// reduces routing for those anchors to the standard rule.
pub fn build_transform_with(
    batch: &TokenBatch,
    assign: &ClusterAssignment,
    metric: SpreadMetric,
    target: NormalizationTarget,
) -> Result<RouterTransform> {
    let profile = crate::wclust::spread_dispersion(batch, assign, metric)?;
    let e = assign.num_experts();
    let d = batch.cols();
    let mut m = Matrix::zeros(e, d);
    for k in 0..e {
        if profile.counts()[k] <= 1 {
            for q in 0..d {
                m.set(k, q, 1.0);
            }
            continue;
        }
        let row = transform_row_from_dispersions(profile.row(k), target);
        m.row_mut(k).copy_from_slice(&row);
    }
    Ok(RouterTransform {
        m,
        source: match metric {
            SpreadMetric::Mad => TransformSource::Mad,
            SpreadMetric::Variance => TransformSource::Variance,
        },
        normalized: target == NormalizationTarget::InverseDispersion,
    })
}

/// Builds the transform from optimal clustering weights instead of raw
/// inverse dispersions: each weight row already sums to 1, so scaling by d
/// gives the mean-1 diagonal.
pub fn transform_from_weights(
    profile: &DispersionProfile,
    weights: &crate::wclust::FeatureWeights,
) -> Result<RouterTransform> {
    let e = weights.weights().rows();
    let d = weights.weights().cols();
    let mut m = Matrix::zeros(e, d);
    for k in 0..e {
        for q in 0..d {
            m.set(k, q, d as f64 * weights.weights().get(k, q));
        }
    }
    let source = match profile.kind() {
        DispersionKind::Mad | DispersionKind::PairwiseAbsolute => TransformSource::Mad,
        DispersionKind::Variance | DispersionKind::PairwiseSquared => TransformSource::Variance,
    };
    Ok(RouterTransform { m, source, normalized: true })
}

/// Random-diagonal ablation: entries ~ Normal(1, 0.5) clipped below at
/// 1e-3, with no mean renormalization.
pub fn random_transform(rng: &mut RngStream, num_experts: usize, dim: usize) -> RouterTransform {
    let mut m = Matrix::zeros(num_experts, dim);
    for k in 0..num_experts {
        for q in 0..dim {
            m.set(k, q, (1.0 + 0.5 * rng.next_normal()).max(1e-3));
        }
    }
    RouterTransform { m, source: TransformSource::Random, normalized: false }
}

/// Routing outcome for a single token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenRoute {
    /// Selected experts, highest score first; ties resolve to the lower index.
    pub topk: Vec<usize>,
    /// Gate values matching `topk`; they sum to 1.
    pub gates: Vec<f64>,
    /// Previous-layer top-1 expert, when one exists.
    pub anchor: Option<usize>,
    /// Raw similarity scores for all experts.
    pub scores: Vec<f64>,
}

impl TokenRoute {
    pub fn top1(&self) -> usize {
        self.topk[0]
    }
}

/// Routing outcomes for a batch of tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingDecision {
    routes: Vec<TokenRoute>,
    num_experts: usize,
}

impl RoutingDecision {
    pub fn new(routes: Vec<TokenRoute>, num_experts: usize) -> Self {
        RoutingDecision { routes, num_experts }
    }

    pub fn routes(&self) -> &[TokenRoute] {
        &self.routes
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn len(&self) -> usize {
        self.routes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.routes.is_empty()
    }

    /// Top-1 expert per token.
    pub fn top1_labels(&self) -> Vec<usize> {
        self.routes.iter().map(|r| r.top1()).collect()
    }
}

fn validate_scores(scores: &[f64]) -> Result<()> {
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("non-finite routing score"));
    }
    Ok(())
}

/// Indices of the k largest scores, descending, ties to the lower index.
fn select_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    // Stable sort keeps equal scores in ascending index order.
    idx.sort_by(|&i, &j| scores[j].partial_cmp(&scores[i]).unwrap());
    idx.truncate(k);
    idx
}

fn finish_route(scores: Vec<f64>, k: usize, anchor: Option<usize>) -> Result<TokenRoute> {
    validate_scores(&scores)?;
    let topk = select_topk(&scores, k);
    let selected: Vec<f64> = topk.iter().map(|&i| scores[i]).collect();
    let gates = softmax(&selected);
    Ok(TokenRoute { topk, gates, anchor, scores })
}

/// Standard dot-product router: scores h . e_j, top-k selection, softmax
/// gating over the selected scores only.
pub fn route_standard(h: &[f64], experts: &Matrix, k: usize) -> Result<TokenRoute> {
    let e = experts.rows();
    if k == 0 || k > e {
        return Err(Error::invalid(format!("top-k {k} out of range for {e} experts")));
    }
    if h.len() != experts.cols() {
        return Err(Error::shape("token and expert dimensions differ"));
    }
    let scores: Vec<f64> = (0..e).map(|j| crate::numerics::dot(h, experts.row(j))).collect();
    finish_route(scores, k, None)
}

fn transformed_scores(h: &[f64], experts: &Matrix, m_row: &[f64]) -> Vec<f64> {
    let e = experts.rows();
    let d = experts.cols();
    let mut scores = vec![0.0; e];
    for (j, score) in scores.iter_mut().enumerate() {
        let row = experts.row(j);
        let mut s = 0.0;
        for q in 0..d {
            s += h[q] * m_row[q] * row[q];
        }
        *score = s;
    }
    scores
}

/// Adaptive-clustering router: scores h^T M_anchor e_j with the anchor's
/// diagonal transform, then selection and gating as in [`route_standard`].
/// An all-ones anchor row reproduces the standard rule bit for bit.
pub fn route_ac(
    h: &[f64],
    experts: &Matrix,
    transform: &RouterTransform,
    anchor: usize,
    k: usize,
) -> Result<TokenRoute> {
    let e = experts.rows();
    if k == 0 || k > e {
        return Err(Error::invalid(format!("top-k {k} out of range for {e} experts")));
    }
    if anchor >= transform.num_experts() {
        return Err(Error::invalid(format!(
            "anchor {anchor} out of range for {} transform rows",
            transform.num_experts()
        )));
    }
    if h.len() != experts.cols() || transform.dim() != experts.cols() {
        return Err(Error::shape("token, expert, and transform dimensions differ"));
    }
    let scores = transformed_scores(h, experts, transform.row(anchor));
    finish_route(scores, k, Some(anchor))
}

/// Routes with an explicit per-token diagonal row (used for weight mixing).
pub fn route_with_row(
    h: &[f64],
    experts: &Matrix,
    m_row: &[f64],
    anchor: Option<usize>,
    k: usize,
) -> Result<TokenRoute> {
    let e = experts.rows();
    if k == 0 || k > e {
        return Err(Error::invalid(format!("top-k {k} out of range for {e} experts")));
    }
    if h.len() != experts.cols() || m_row.len() != experts.cols() {
        return Err(Error::shape("token, expert, and row dimensions differ"));
    }
    let scores = transformed_scores(h, experts, m_row);
    finish_route(scores, k, anchor)
}

/// Convex combination of transform rows, weighted by the previous layer's
/// gate distribution over `anchors`. A single anchor returns its row
/// unchanged.
pub fn mix_transforms(
    transform: &RouterTransform,
    anchors: &[usize],
    affinities: &[f64],
) -> Result<Vec<f64>> {
    if anchors.is_empty() || anchors.len() != affinities.len() {
        return Err(Error::shape("anchors and affinities must pair up"));
    }
    if let Some(&bad) = anchors.iter().find(|&&a| a >= transform.num_experts()) {
        return Err(Error::invalid(format!("anchor {bad} out of range")));
    }
    let sum: f64 = affinities.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::invalid(format!("affinities sum to {sum}, expected 1")));
    }
    if affinities.iter().any(|&a| a < 0.0) {
        return Err(Error::invalid("affinities must be nonnegative"));
    }
    if anchors.len() == 1 {
        return Ok(transform.row(anchors[0]).to_vec());
    }
    let d = transform.dim();
    let mut row = vec![0.0; d];
    for (&a, &w) in anchors.iter().zip(affinities.iter()) {
        let src = transform.row(a);
        for q in 0..d {
            row[q] += w * src[q];
        }
    }
    Ok(row)
}

/// Dynamic top-p routing: full softmax over all experts, keep those with
/// probability >= p (argmax alone if none qualify), renormalize gates over
/// the kept set.
pub fn route_top_p(
    h: &[f64],
    experts: &Matrix,
    transform: Option<&RouterTransform>,
    anchor: Option<usize>,
    p: f64,
) -> Result<TokenRoute> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::invalid(format!("threshold p = {p} outside (0, 1)")));
    }
    if h.len() != experts.cols() {
        return Err(Error::shape("token and expert dimensions differ"));
    }
    let scores = match (transform, anchor) {
        (Some(t), Some(a)) => {
            if a >= t.num_experts() {
                return Err(Error::invalid(format!("anchor {a} out of range")));
            }
            transformed_scores(h, experts, t.row(a))
        }
        (None, _) => (0..experts.rows())
            .map(|j| crate::numerics::dot(h, experts.row(j)))
            .collect(),
        (Some(_), None) => {
            return Err(Error::invalid("a transform requires an anchor"));
        }
    };
    validate_scores(&scores)?;
    let probs = softmax(&scores);
    let order = select_topk(&probs, probs.len());
    let mut topk: Vec<usize> = order.iter().copied().filter(|&j| probs[j] >= p).collect();
    if topk.is_empty() {
        topk.push(order[0]);
    }
    // Renormalizing the kept full-softmax mass equals the softmax of the
    // kept scores; computing it that way keeps gating uniform across rules.
    let selected: Vec<f64> = topk.iter().map(|&j| scores[j]).collect();
    let gates = softmax(&selected);
    Ok(TokenRoute { topk, gates, anchor, scores })
}
