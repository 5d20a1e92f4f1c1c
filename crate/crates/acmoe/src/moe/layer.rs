//! A single sparse MoE layer: routing, expert feed-forward networks,
//! residual combination, and the hand-derived backward pass.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::router::{route_standard, route_top_p, route_with_row, RoutingDecision, TokenRoute};

/// One expert's two-layer ReLU feed-forward network. Tokens are row
/// vectors: out = relu(h w1 + b1) w2 + b2.
#[derive(Debug, Clone)]
pub struct ExpertFfn {
    pub w1: Matrix, // d x d_ff
    pub b1: Vec<f64>,
    pub w2: Matrix, // d_ff x d
    pub b2: Vec<f64>,
}

impl ExpertFfn {
    pub fn zeros(dim: usize, ff_dim: usize) -> Self {
        ExpertFfn {
            w1: Matrix::zeros(dim, ff_dim),
            b1: vec![0.0; ff_dim],
            w2: Matrix::zeros(ff_dim, dim),
            b2: vec![0.0; dim],
        }
    }

    /// Forward pass returning (pre-activation, hidden, output).
    pub fn forward(&self, h: &[f64]) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
        let d = self.w1.rows();
        let ff = self.w1.cols();
        debug_assert_eq!(h.len(), d);
        let mut preact = self.b1.clone();
        for q in 0..d {
            let hv = h[q];
            if hv == 0.0 {
                continue;
            }
            let row = self.w1.row(q);
            for t in 0..ff {
                preact[t] += hv * row[t];
            }
        }
        // relu'(0) = 0 convention: strict positivity gates the backward pass.
        let hidden: Vec<f64> = preact.iter().map(|&a| if a > 0.0 { a } else { 0.0 }).collect();
        let mut out = self.b2.clone();
        for t in 0..ff {
            let zv = hidden[t];
            if zv == 0.0 {
                continue;
            }
            let row = self.w2.row(t);
            for q in 0..d {
                out[q] += zv * row[q];
            }
        }
        (preact, hidden, out)
    }
}

/// Parameters of one MoE layer: E experts plus their routing embeddings.
#[derive(Debug, Clone)]
pub struct MoeLayerParams {
    pub experts: Vec<ExpertFfn>,
    /// E x d expert embeddings e_k.
    pub embeddings: Matrix,
}

impl MoeLayerParams {
    pub fn num_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }

    pub fn ff_dim(&self) -> usize {
        self.experts.first().map_or(0, |e| e.w1.cols())
    }
}

/// How one layer routes one batch. Transformed variants carry a diagonal
/// row per token (the anchor's transform row, a mixture of rows, or a
/// random row) which the forward pass treats as a constant.
#[derive(Debug, Clone)]
pub enum LayerRoutingPlan {
    TopK { k: usize },
    TopP { p: f64 },
    TransformedTopK { k: usize, rows: Vec<Vec<f64>>, anchors: Vec<usize> },
    TransformedTopP { p: f64, rows: Vec<Vec<f64>>, anchors: Vec<usize> },
}

impl LayerRoutingPlan {
    fn check(&self, n: usize) -> Result<()> {
        match self {
            LayerRoutingPlan::TopK { .. } | LayerRoutingPlan::TopP { .. } => Ok(()),
            LayerRoutingPlan::TransformedTopK { rows, anchors, .. }
            | LayerRoutingPlan::TransformedTopP { rows, anchors, .. } => {
                if rows.len() != n || anchors.len() != n {
                    Err(Error::shape(format!(
                        "{} rows / {} anchors for {} tokens",
                        rows.len(),
                        anchors.len(),
                        n
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct TokenCache {
    preacts: Vec<Vec<f64>>,
    hiddens: Vec<Vec<f64>>,
    ffn_outs: Vec<Vec<f64>>,
}

/// Everything the backward pass needs from a forward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    input: Matrix,
    routes: Vec<TokenRoute>,
    /// Per-token diagonal row used in the scores; None means all-ones.
    m_rows: Vec<Option<Vec<f64>>>,
    tokens: Vec<TokenCache>,
}

impl LayerCache {
    pub fn routes(&self) -> &[TokenRoute] {
        &self.routes
    }
}

/// Gradients mirroring [`MoeLayerParams`].
#[derive(Debug, Clone)]
pub struct MoeLayerGrads {
    pub experts: Vec<ExpertFfn>,
    pub embeddings: Matrix,
}

impl MoeLayerGrads {
    pub fn zeros(params: &MoeLayerParams) -> Self {
        MoeLayerGrads {
            experts: params
                .experts
                .iter()
                .map(|e| ExpertFfn::zeros(e.w1.rows(), e.w1.cols()))
                .collect(),
            embeddings: Matrix::zeros(params.embeddings.rows(), params.embeddings.cols()),
        }
    }
}

/// Forward pass of the MoE layer over a batch:
/// out_i = h_i + sum_{k in K_i} gate_k FFN_k(h_i).
pub fn moe_forward(
    params: &MoeLayerParams,
    batch: &Matrix,
    plan: &LayerRoutingPlan,
) -> Result<(Matrix, RoutingDecision, LayerCache)> {
    let n = batch.rows();
    let d = batch.cols();
    if d != params.dim() {
        return Err(Error::shape(format!(
            "batch dim {d} vs layer dim {}",
            params.dim()
        )));
    }
    plan.check(n)?;

    let mut output = Matrix::zeros(n, d);
    let mut routes = Vec::with_capacity(n);
    let mut m_rows: Vec<Option<Vec<f64>>> = Vec::with_capacity(n);
    let mut tokens = Vec::with_capacity(n);

    for i in 0..n {
        let h = batch.row(i);
        let route = match plan {
            LayerRoutingPlan::TopK { k } => {
                m_rows.push(None);
                route_standard(h, &params.embeddings, *k)?
            }
            LayerRoutingPlan::TopP { p } => {
                m_rows.push(None);
                route_top_p(h, &params.embeddings, None, None, *p)?
            }
            LayerRoutingPlan::TransformedTopK { k, rows, anchors } => {
                m_rows.push(Some(rows[i].clone()));
                route_with_row(h, &params.embeddings, &rows[i], Some(anchors[i]), *k)?
            }
            LayerRoutingPlan::TransformedTopP { p, rows, anchors } => {
                m_rows.push(Some(rows[i].clone()));
                let row_transform = crate::router::RouterTransform::from_single_row(&rows[i]);
                route_top_p(h, &params.embeddings, Some(&row_transform), Some(0), *p)
                    .map(|mut r| {
                        r.anchor = Some(anchors[i]);
                        r
                    })?
            }
        };

        let out_row = output.row_mut(i);
        out_row.copy_from_slice(h);
        let mut cache = TokenCache {
            preacts: Vec::with_capacity(route.topk.len()),
            hiddens: Vec::with_capacity(route.topk.len()),
            ffn_outs: Vec::with_capacity(route.topk.len()),
        };
        for (slot, &j) in route.topk.iter().enumerate() {
            let (preact, hidden, out) = params.experts[j].forward(h);
            let g = route.gates[slot];
            for q in 0..d {
                out_row[q] += g * out[q];
            }
            cache.preacts.push(preact);
            cache.hiddens.push(hidden);
            cache.ffn_outs.push(out);
        }
        tokens.push(cache);
        routes.push(route);
    }

    let decision = RoutingDecision::new(routes.clone(), params.num_experts());
    let cache = LayerCache { input: batch.clone(), routes, m_rows, tokens };
    Ok((output, decision, cache))
}

/// Backward pass. `grad_output` is dL/d(out); `gate_grad_extra`, when
/// present, holds an extra dL/d(gate of expert j) that applies uniformly
/// to every token (the auxiliary balance loss contributes this way).
///
/// Selection masks and diagonal transform rows are constants here;
/// gradients flow through the gate softmax into the embeddings and the
/// token, and through the expert FFNs.
pub fn moe_backward(
    params: &MoeLayerParams,
    cache: &LayerCache,
    grad_output: &Matrix,
    gate_grad_extra: Option<&[f64]>,
) -> Result<(MoeLayerGrads, Matrix)> {
    let n = cache.input.rows();
    let d = cache.input.cols();
    if grad_output.rows() != n || grad_output.cols() != d {
        return Err(Error::shape("grad_output shape differs from the forward batch"));
    }
    if cache.tokens.len() != n {
        return Err(Error::MissingCache);
    }
    if let Some(extra) = gate_grad_extra {
        if extra.len() != params.num_experts() {
            return Err(Error::shape("gate_grad_extra must have one entry per expert"));
        }
    }

    let ff = params.ff_dim();
    let mut grads = MoeLayerGrads::zeros(params);
    let mut grad_input = Matrix::zeros(n, d);

    for i in 0..n {
        let h = cache.input.row(i);
        let u = grad_output.row(i);
        let route = &cache.routes[i];
        let token = &cache.tokens[i];
        let gi = grad_input.row_mut(i);

        // Residual path.
        gi.copy_from_slice(u);

        // dL/d(gate_slot) from the output mixture plus any uniform extra.
        let mut gate_grads: Vec<f64> = Vec::with_capacity(route.topk.len());
        for (slot, &j) in route.topk.iter().enumerate() {
            let mut c = crate::numerics::dot(u, &token.ffn_outs[slot]);
            if let Some(extra) = gate_grad_extra {
                c += extra[j];
            }
            gate_grads.push(c);
        }

        // Expert FFN paths.
        for (slot, &j) in route.topk.iter().enumerate() {
            let g = route.gates[slot];
            let expert = &params.experts[j];
            let eg = &mut grads.experts[j];
            let hidden = &token.hiddens[slot];
            let preact = &token.preacts[slot];

            // v = g * u feeds the expert output.
            for t in 0..ff {
                let zv = hidden[t];
                if zv != 0.0 {
                    let row = eg.w2.row_mut(t);
                    for q in 0..d {
                        row[q] += zv * g * u[q];
                    }
                }
            }
            for q in 0..d {
                eg.b2[q] += g * u[q];
            }

            // Back through w2 and the ReLU.
            let mut grad_pre = vec![0.0; ff];
            for t in 0..ff {
                if preact[t] > 0.0 {
                    grad_pre[t] = g * crate::numerics::dot(u, expert.w2.row(t));
                }
            }
            for t in 0..ff {
                eg.b1[t] += grad_pre[t];
            }
            for q in 0..d {
                let hv = h[q];
                if hv != 0.0 {
                    let row = eg.w1.row_mut(q);
                    for t in 0..ff {
                        row[t] += hv * grad_pre[t];
                    }
                }
            }
            for q in 0..d {
                gi[q] += crate::numerics::dot(&grad_pre, expert.w1.row(q));
            }
        }

        // Gate softmax over the selected scores, then into embeddings and
        // the token. Scores are s_j = sum_q h_q m_q e_jq.
        let weighted: f64 = gate_grads
            .iter()
            .zip(route.gates.iter())
            .map(|(c, g)| c * g)
            .sum();
        let ones;
        let m_row: &[f64] = match &cache.m_rows[i] {
            Some(r) => r,
            None => {
                ones = vec![1.0; d];
                &ones
            }
        };
        for (slot, &j) in route.topk.iter().enumerate() {
            let ds = route.gates[slot] * (gate_grads[slot] - weighted);
            if ds == 0.0 {
                continue;
            }
            let emb = params.embeddings.row(j);
            let erow = grads.embeddings.row_mut(j);
            for q in 0..d {
                erow[q] += ds * h[q] * m_row[q];
                gi[q] += ds * m_row[q] * emb[q];
            }
        }
    }

    Ok((grads, grad_input))
}

/// Switch-style auxiliary load-balancing loss E * sum_k f_k P_k, where
/// f_k is the fraction of tokens whose top-1 expert is k and P_k is the
/// mean gate mass on k (zero when k is unselected for a token).
pub fn aux_load_balance_loss(decision: &RoutingDecision, num_experts: usize) -> Result<f64> {
    let n = decision.len();
    if n == 0 {
        return Err(Error::EmptyInput { context: "aux loss over an empty batch".into() });
    }
    let mut top1_counts = vec![0.0f64; num_experts];
    let mut gate_mass = vec![0.0f64; num_experts];
    for route in decision.routes() {
        top1_counts[route.top1()] += 1.0;
        for (slot, &j) in route.topk.iter().enumerate() {
            gate_mass[j] += route.gates[slot];
        }
    }
    let nf = n as f64;
    let mut loss = 0.0;
    for k in 0..num_experts {
        loss += (top1_counts[k] / nf) * (gate_mass[k] / nf);
    }
    Ok(num_experts as f64 * loss)
}
