//! The desk-scale MoE stack: linear embedding, L MoE blocks, linear head,
//! with per-batch transform construction and a hand-derived backward pass.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::moe::adam::AdamConfig;
use crate::moe::layer::{
    moe_backward, moe_forward, ExpertFfn, LayerCache, LayerRoutingPlan, MoeLayerGrads,
    MoeLayerParams,
};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::RngStream;
use crate::numerics::stats::SpreadMetric;
use crate::router::{
    build_transform_with, mix_transforms, random_transform, transform_from_weights,
    NormalizationTarget, RouterTransform, RoutingDecision,
};
use crate::wclust::{optimal_weights, pairwise_dispersion, ClusterAssignment, PairwiseMetric};

/// Routing rule used by the stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RoutingMode {
    Standard,
    Ac,
    AcMix,
    TopP,
    RandomAblation,
}

/// Which layers apply the adaptive transform. The first MoE layer never
/// does; it has no previous assignment to anchor on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Placement {
    /// Every layer after the first.
    Full,
    /// Leave one extra plain layer before the first transformed one.
    Skip1,
    /// Only the last half of the stack.
    BackHalf,
    /// Every second layer.
    Alternating,
}

impl Placement {
    /// Per-layer mask (0-indexed); `mask[0]` is always false.
    pub fn mask(&self, layers: usize) -> Vec<bool> {
        (0..layers)
            .map(|l| match self {
                Placement::Full => l >= 1,
                Placement::Skip1 => l >= 2,
                Placement::BackHalf => l >= layers - layers / 2,
                Placement::Alternating => l % 2 == 1,
            })
            .collect()
    }
}

/// Whether transform rows come from inverted spread statistics, from the
/// optimal clustering weights, or are forced to the identity (which makes
/// every transformed layer behave exactly like a plain one).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TransformBasis {
    Dispersion,
    OptimalWeights,
    Identity,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub layers: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub out_dim: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub top_p: f64,
    pub routing_mode: RoutingMode,
    pub placement: Placement,
    pub metric: SpreadMetric,
    pub normalization: NormalizationTarget,
    pub transform_basis: TransformBasis,
    pub wclust_lambda: f64,
    pub lambda_aux: f64,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            layers: 3,
            dim: 16,
            ff_dim: 32,
            out_dim: 16,
            num_experts: 8,
            top_k: 2,
            top_p: 0.05,
            routing_mode: RoutingMode::Standard,
            placement: Placement::Skip1,
            metric: SpreadMetric::Mad,
            normalization: NormalizationTarget::InverseDispersion,
            transform_basis: TransformBasis::Dispersion,
            wclust_lambda: 1.0,
            lambda_aux: 0.01,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::invalid("at least one MoE layer is required"));
        }
        if self.num_experts < 2 {
            return Err(Error::invalid("at least two experts are required"));
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return Err(Error::invalid(format!(
                "top_k {} out of range for {} experts",
                self.top_k, self.num_experts
            )));
        }
        if self.routing_mode == RoutingMode::TopP && !(self.top_p > 0.0 && self.top_p < 1.0) {
            return Err(Error::invalid(format!("top_p {} outside (0, 1)", self.top_p)));
        }
        if self.dim == 0 || self.ff_dim == 0 || self.out_dim == 0 {
            return Err(Error::invalid("dimensions must be positive"));
        }
        if !(self.wclust_lambda > 0.0) {
            return Err(Error::invalid("wclust_lambda must be positive"));
        }
        if self.lambda_aux < 0.0 {
            return Err(Error::invalid("lambda_aux must be nonnegative"));
        }
        Ok(())
    }

    /// Per-layer transform mask honoring the first-layer rule.
    pub fn ac_mask(&self) -> Vec<bool> {
        match self.routing_mode {
            RoutingMode::Standard => vec![false; self.layers],
            _ => self.placement.mask(self.layers),
        }
    }
}

/// Row-vector linear map: out = x w + b.
#[derive(Debug, Clone)]
pub struct Linear {
    pub w: Matrix,
    pub b: Vec<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear { w: Matrix::zeros(input, output), b: vec![0.0; output] }
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.w.rows() {
            return Err(Error::shape("linear input width mismatch"));
        }
        let n = x.rows();
        let out_dim = self.w.cols();
        let mut out = Matrix::zeros(n, out_dim);
        for i in 0..n {
            let xi = x.row(i);
            let row = out.row_mut(i);
            row.copy_from_slice(&self.b);
            for q in 0..xi.len() {
                let v = xi[q];
                if v == 0.0 {
                    continue;
                }
                let wrow = self.w.row(q);
                for o in 0..out_dim {
                    row[o] += v * wrow[o];
                }
            }
        }
        Ok(out)
    }

    /// Returns (grad_w, grad_b, grad_x).
    pub fn backward(&self, x: &Matrix, grad_out: &Matrix) -> (Matrix, Vec<f64>, Matrix) {
        let n = x.rows();
        let input = self.w.rows();
        let output = self.w.cols();
        let mut gw = Matrix::zeros(input, output);
        let mut gb = vec![0.0; output];
        let mut gx = Matrix::zeros(n, input);
        for i in 0..n {
            let xi = x.row(i);
            let go = grad_out.row(i);
            for o in 0..output {
                gb[o] += go[o];
            }
            for q in 0..input {
                let row = gw.row_mut(q);
                let v = xi[q];
                for o in 0..output {
                    row[o] += v * go[o];
                }
            }
            let gxi = gx.row_mut(i);
            for q in 0..input {
                gxi[q] = crate::numerics::dot(go, self.w.row(q));
            }
        }
        (gw, gb, gx)
    }
}

/// The whole network.
#[derive(Debug, Clone)]
pub struct Model {
    pub embed: Linear,
    pub layers: Vec<MoeLayerParams>,
    pub head: Linear,
}

impl Model {
    /// Deterministic Gaussian initialization from the stream. The
    /// embedding starts near the identity so input feature scales carry
    /// through to the first layer unchanged.
    pub fn init(cfg: &ModelConfig, rng: &mut RngStream) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let mut embed = Linear::zeros(d, d);
        let scale_in = 1.0 / (d as f64).sqrt();
        for v in embed.w.data_mut() {
            *v = rng.next_normal() * 0.02;
        }
        for i in 0..d {
            embed.w.set(i, i, embed.w.get(i, i) + 1.0);
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        for _ in 0..cfg.layers {
            let mut embeddings = Matrix::zeros(cfg.num_experts, d);
            for v in embeddings.data_mut() {
                *v = rng.next_normal() * scale_in;
            }
            let mut experts = Vec::with_capacity(cfg.num_experts);
            let w1_scale = (2.0 / d as f64).sqrt();
            let w2_scale = (2.0 / cfg.ff_dim as f64).sqrt();
            for _ in 0..cfg.num_experts {
                let mut e = ExpertFfn::zeros(d, cfg.ff_dim);
                for v in e.w1.data_mut() {
                    *v = rng.next_normal() * w1_scale;
                }
                for v in e.w2.data_mut() {
                    *v = rng.next_normal() * w2_scale;
                }
                experts.push(e);
            }
            layers.push(MoeLayerParams { experts, embeddings });
        }
        let mut head = Linear::zeros(d, cfg.out_dim);
        for v in head.w.data_mut() {
            *v = rng.next_normal() * scale_in;
        }
        Ok(Model { embed, layers, head })
    }

    pub fn num_params(&self) -> usize {
        let mut n = self.embed.w.data().len() + self.embed.b.len();
        for layer in &self.layers {
            n += layer.embeddings.data().len();
            for e in &layer.experts {
                n += e.w1.data().len() + e.b1.len() + e.w2.data().len() + e.b2.len();
            }
        }
        n + self.head.w.data().len() + self.head.b.len()
    }

    fn visit<T>(&self, mut f: impl FnMut(&[f64]) -> T) -> Vec<T> {
        let mut out = Vec::new();
        out.push(f(self.embed.w.data()));
        out.push(f(&self.embed.b));
        for layer in &self.layers {
            out.push(f(layer.embeddings.data()));
            for e in &layer.experts {
                out.push(f(e.w1.data()));
                out.push(f(&e.b1));
                out.push(f(e.w2.data()));
                out.push(f(&e.b2));
            }
        }
        out.push(f(self.head.w.data()));
        out.push(f(&self.head.b));
        out
    }

    fn visit_mut(&mut self, mut f: impl FnMut(&mut [f64])) {
        f(self.embed.w.data_mut());
        f(&mut self.embed.b);
        for layer in &mut self.layers {
            f(layer.embeddings.data_mut());
            for e in &mut layer.experts {
                f(e.w1.data_mut());
                f(&mut e.b1);
                f(e.w2.data_mut());
                f(&mut e.b2);
            }
        }
        f(self.head.w.data_mut());
        f(&mut self.head.b);
    }

    /// All parameters concatenated in a fixed canonical order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut flat = Vec::with_capacity(self.num_params());
        self.visit(|chunk| flat.extend_from_slice(chunk));
        flat
    }

    pub fn load_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::shape(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_params()
            )));
        }
        let mut offset = 0;
        self.visit_mut(|chunk| {
            chunk.copy_from_slice(&flat[offset..offset + chunk.len()]);
            offset += chunk.len();
        });
        Ok(())
    }

    /// Named tensors in canonical order, as (name, rows, cols, data).
    pub fn named_tensors(&self) -> Vec<(String, usize, usize, Vec<f64>)> {
        let mut out = Vec::new();
        out.push(("embed.w".into(), self.embed.w.rows(), self.embed.w.cols(), self.embed.w.data().to_vec()));
        out.push(("embed.b".into(), 1, self.embed.b.len(), self.embed.b.clone()));
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((
                format!("layer{l}.embeddings"),
                layer.embeddings.rows(),
                layer.embeddings.cols(),
                layer.embeddings.data().to_vec(),
            ));
            for (x, e) in layer.experts.iter().enumerate() {
                out.push((format!("layer{l}.expert{x}.w1"), e.w1.rows(), e.w1.cols(), e.w1.data().to_vec()));
                out.push((format!("layer{l}.expert{x}.b1"), 1, e.b1.len(), e.b1.clone()));
                out.push((format!("layer{l}.expert{x}.w2"), e.w2.rows(), e.w2.cols(), e.w2.data().to_vec()));
                out.push((format!("layer{l}.expert{x}.b2"), 1, e.b2.len(), e.b2.clone()));
            }
        }
        out.push(("head.w".into(), self.head.w.rows(), self.head.w.cols(), self.head.w.data().to_vec()));
        out.push(("head.b".into(), 1, self.head.b.len(), self.head.b.clone()));
        out
    }
}

/// Gradients for the whole network, in the same structure as [`Model`].
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub embed_w: Matrix,
    pub embed_b: Vec<f64>,
    pub layers: Vec<MoeLayerGrads>,
    pub head_w: Matrix,
    pub head_b: Vec<f64>,
}

impl ModelGrads {
    /// Flattened in the canonical parameter order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut flat = Vec::new();
        flat.extend_from_slice(self.embed_w.data());
        flat.extend_from_slice(&self.embed_b);
        for layer in &self.layers {
            flat.extend_from_slice(layer.embeddings.data());
            for e in &layer.experts {
                flat.extend_from_slice(e.w1.data());
                flat.extend_from_slice(&e.b1);
                flat.extend_from_slice(e.w2.data());
                flat.extend_from_slice(&e.b2);
            }
        }
        flat.extend_from_slice(self.head_w.data());
        flat.extend_from_slice(&self.head_b);
        flat
    }
}

/// Forward artifacts: prediction, per-layer routing, and a cache for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct ModelForward {
    pub prediction: Matrix,
    pub decisions: Vec<RoutingDecision>,
    pub cache: ModelCache,
}

#[derive(Debug, Clone)]
pub struct ModelCache {
    input: Matrix,
    layer_caches: Vec<LayerCache>,
    head_input: Matrix,
}

fn pairwise_metric_for(metric: SpreadMetric) -> PairwiseMetric {
    match metric {
        SpreadMetric::Mad => PairwiseMetric::Absolute,
        SpreadMetric::Variance => PairwiseMetric::Squared,
    }
}

/// Builds the transform the previous layer's geometry induces.
fn layer_transform(
    cfg: &ModelConfig,
    prev_input: &Matrix,
    prev_decision: &RoutingDecision,
    ablation_rng: Option<&mut RngStream>,
) -> Result<RouterTransform> {
    if cfg.routing_mode == RoutingMode::RandomAblation {
        let rng = ablation_rng
            .ok_or_else(|| Error::invalid("random ablation requires an ablation stream"))?;
        return Ok(random_transform(rng, cfg.num_experts, cfg.dim));
    }
    match cfg.transform_basis {
        TransformBasis::Identity => Ok(RouterTransform::identity(cfg.num_experts, cfg.dim)),
        TransformBasis::Dispersion => {
            let assign = ClusterAssignment::new(prev_decision.top1_labels(), cfg.num_experts)?;
            build_transform_with(prev_input, &assign, cfg.metric, cfg.normalization)
        }
        TransformBasis::OptimalWeights => {
            let assign = ClusterAssignment::new(prev_decision.top1_labels(), cfg.num_experts)?;
            let rho = pairwise_metric_for(cfg.metric);
            let profile = pairwise_dispersion(prev_input, &assign, rho)?;
            let weights = optimal_weights(&profile, cfg.wclust_lambda)?;
            transform_from_weights(&profile, &weights)
        }
    }
}

impl Model {
    /// Full forward pass. Transformed layers rebuild their diagonal rows
    /// from the previous layer's batch statistics; `ablation_rng` feeds the
    /// random-diagonal ablation and is untouched otherwise.
    pub fn forward(
        &self,
        cfg: &ModelConfig,
        x: &Matrix,
        mut ablation_rng: Option<&mut RngStream>,
    ) -> Result<ModelForward> {
        let mask = cfg.ac_mask();
        let mut current = self.embed.forward(x)?;
        let mut decisions: Vec<RoutingDecision> = Vec::with_capacity(cfg.layers);
        let mut layer_caches = Vec::with_capacity(cfg.layers);
        let mut prev_input: Option<Matrix> = None;

        for (l, layer) in self.layers.iter().enumerate() {
            let transformed = mask[l];
            let plan = if !transformed {
                match cfg.routing_mode {
                    RoutingMode::TopP => LayerRoutingPlan::TopP { p: cfg.top_p },
                    _ => LayerRoutingPlan::TopK { k: cfg.top_k },
                }
            } else {
                let prev = prev_input.as_ref().expect("mask[0] is false");
                let prev_decision = decisions.last().expect("mask[0] is false");
                let transform =
                    layer_transform(cfg, prev, prev_decision, ablation_rng.as_deref_mut())?;
                let anchors: Vec<usize> = prev_decision.top1_labels();
                let rows: Vec<Vec<f64>> = match cfg.routing_mode {
                    RoutingMode::AcMix => prev_decision
                        .routes()
                        .iter()
                        .map(|r| mix_transforms(&transform, &r.topk, &r.gates))
                        .collect::<Result<Vec<_>>>()?,
                    _ => anchors.iter().map(|&a| transform.row(a).to_vec()).collect(),
                };
                match cfg.routing_mode {
                    RoutingMode::TopP => {
                        LayerRoutingPlan::TransformedTopP { p: cfg.top_p, rows, anchors }
                    }
                    _ => LayerRoutingPlan::TransformedTopK { k: cfg.top_k, rows, anchors },
                }
            };

            prev_input = Some(current.clone());
            let (out, decision, cache) = moe_forward(layer, &current, &plan)?;
            decisions.push(decision);
            layer_caches.push(cache);
            current = out;
        }

        let head_input = current.clone();
        let prediction = self.head.forward(&current)?;
        Ok(ModelForward {
            prediction,
            decisions,
            cache: ModelCache { input: x.clone(), layer_caches, head_input },
        })
    }

    /// Backward pass from dL/d(prediction). `gate_grad_extra[l]`, when
    /// present, is the per-expert uniform gate gradient the auxiliary loss
    /// adds at layer `l`.
    pub fn backward(
        &self,
        cache: &ModelCache,
        grad_prediction: &Matrix,
        gate_grad_extra: &[Option<Vec<f64>>],
    ) -> Result<ModelGrads> {
        if gate_grad_extra.len() != self.layers.len() {
            return Err(Error::shape("one gate_grad_extra slot per layer"));
        }
        let (head_w, head_b, mut grad) = self.head.backward(&cache.head_input, grad_prediction);
        let mut layer_grads: Vec<MoeLayerGrads> = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (g, gin) = moe_backward(
                layer,
                &cache.layer_caches[l],
                &grad,
                gate_grad_extra[l].as_deref(),
            )?;
            layer_grads.push(g);
            grad = gin;
        }
        layer_grads.reverse();
        let (embed_w, embed_b, _) = self.embed.backward(&cache.input, &grad);
        Ok(ModelGrads { embed_w, embed_b, layers: layer_grads, head_w, head_b })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placement_masks() {
        assert_eq!(Placement::Full.mask(6), vec![false, true, true, true, true, true]);
        assert_eq!(Placement::Skip1.mask(6), vec![false, false, true, true, true, true]);
        assert_eq!(Placement::BackHalf.mask(6), vec![false, false, false, true, true, true]);
        assert_eq!(
            Placement::Alternating.mask(6),
            vec![false, true, false, true, false, true]
        );
        // The first layer is plain under every placement.
        for p in [Placement::Full, Placement::Skip1, Placement::BackHalf, Placement::Alternating] {
            assert!(!p.mask(5)[0]);
        }
    }

    #[test]
    fn params_flat_roundtrip() {
        let cfg = ModelConfig { layers: 2, dim: 4, ff_dim: 5, out_dim: 3, ..Default::default() };
        let mut rng = RngStream::new(1, 0);
        let mut model = Model::init(&cfg, &mut rng).unwrap();
        let flat = model.params_flat();
        assert_eq!(flat.len(), model.num_params());
        let mut perturbed = flat.clone();
        perturbed[7] += 0.5;
        model.load_params_flat(&perturbed).unwrap();
        assert_eq!(model.params_flat(), perturbed);
    }

    #[test]
    fn forward_shapes_and_anchor_chain() {
        let cfg = ModelConfig {
            layers: 3,
            dim: 6,
            ff_dim: 8,
            out_dim: 4,
            num_experts: 4,
            top_k: 2,
            routing_mode: RoutingMode::Ac,
            placement: Placement::Full,
            ..Default::default()
        };
        let mut rng = RngStream::new(5, 0);
        let model = Model::init(&cfg, &mut rng).unwrap();
        let mut x = Matrix::zeros(10, 6);
        for v in x.data_mut() {
            *v = rng.next_normal();
        }
        let fwd = model.forward(&cfg, &x, None).unwrap();
        assert_eq!(fwd.prediction.rows(), 10);
        assert_eq!(fwd.prediction.cols(), 4);
        assert_eq!(fwd.decisions.len(), 3);
        // Every transformed layer's anchors equal the previous layer's top-1.
        for l in 1..3 {
            let prev_top1 = fwd.decisions[l - 1].top1_labels();
            for (i, route) in fwd.decisions[l].routes().iter().enumerate() {
                assert_eq!(route.anchor, Some(prev_top1[i]));
            }
        }
        // The first layer has no anchors.
        for route in fwd.decisions[0].routes() {
            assert_eq!(route.anchor, None);
        }
    }

    #[test]
    fn ac_identity_matches_standard_bitwise() {
        let cfg_std = ModelConfig {
            layers: 3,
            dim: 4,
            ff_dim: 4,
            out_dim: 2,
            num_experts: 3,
            top_k: 2,
            routing_mode: RoutingMode::Standard,
            ..Default::default()
        };
        let cfg_ac = ModelConfig {
            routing_mode: RoutingMode::Ac,
            placement: Placement::Full,
            transform_basis: TransformBasis::Identity,
            ..cfg_std.clone()
        };
        let mut rng = RngStream::new(9, 0);
        let model = Model::init(&cfg_std, &mut rng).unwrap();
        let mut x = Matrix::zeros(16, 4);
        for v in x.data_mut() {
            *v = rng.next_normal();
        }
        let a = model.forward(&cfg_std, &x, None).unwrap();
        let b = model.forward(&cfg_ac, &x, None).unwrap();
        for (pa, pb) in a.prediction.data().iter().zip(b.prediction.data().iter()) {
            assert_eq!(pa.to_bits(), pb.to_bits());
        }
    }
}
