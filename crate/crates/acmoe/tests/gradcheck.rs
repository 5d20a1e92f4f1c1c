//! Central finite-difference validation of every analytic gradient.

use acmoe::moe::{
    aux_load_balance_loss, loss_and_grads, moe_backward, moe_forward, LayerRoutingPlan, Model,
    ModelConfig, Placement, RoutingMode, TaskBatch, TransformBasis,
};
use acmoe::numerics::{Matrix, RngStream};

const FD_STEP: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-4)
}

fn random_matrix(rng: &mut RngStream, rows: usize, cols: usize, scale: f64) -> Matrix {
    let mut m = Matrix::zeros(rows, cols);
    for v in m.data_mut() {
        *v = rng.next_normal() * scale;
    }
    m
}

/// Layer parameters live behind the model init; building a 1-layer model
/// gives a properly scaled random layer.
fn layer_under_test() -> (acmoe::moe::MoeLayerParams, Matrix, LayerRoutingPlan, Matrix) {
    let cfg = ModelConfig {
        layers: 1,
        dim: 4,
        ff_dim: 6,
        out_dim: 4,
        num_experts: 3,
        top_k: 2,
        ..Default::default()
    };
    let mut rng = RngStream::new(2024, 0);
    let model = Model::init(&cfg, &mut rng).unwrap();
    let layer = model.layers.into_iter().next().unwrap();
    let n = 5;
    let batch = random_matrix(&mut rng, n, 4, 1.0);
    let targets = random_matrix(&mut rng, n, 4, 1.0);
    // Fixed non-identity diagonal rows and anchors: the transform is an
    // input of the layer, so finite differences see it as constant exactly
    // like the backward pass does.
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..4).map(|_| rng.next_range(0.4, 1.8)).collect())
        .collect();
    let anchors: Vec<usize> = (0..n).map(|i| i % 3).collect();
    let plan = LayerRoutingPlan::TransformedTopK { k: 2, rows, anchors };
    (layer, batch, plan, targets)
}

fn layer_loss(
    params: &acmoe::moe::MoeLayerParams,
    batch: &Matrix,
    plan: &LayerRoutingPlan,
    targets: &Matrix,
    lambda_aux: f64,
) -> f64 {
    let (out, decision, _) = moe_forward(params, batch, plan).unwrap();
    let n = out.rows() as f64;
    let mut loss = 0.0;
    for i in 0..out.rows() {
        for j in 0..out.cols() {
            let d = out.get(i, j) - targets.get(i, j);
            loss += d * d;
        }
    }
    loss / n + lambda_aux * aux_load_balance_loss(&decision, params.num_experts()).unwrap()
}

/// Flat view over a layer's parameters in a fixed order.
fn layer_params_flat(p: &acmoe::moe::MoeLayerParams) -> Vec<f64> {
    let mut flat = Vec::new();
    flat.extend_from_slice(p.embeddings.data());
    for e in &p.experts {
        flat.extend_from_slice(e.w1.data());
        flat.extend_from_slice(&e.b1);
        flat.extend_from_slice(e.w2.data());
        flat.extend_from_slice(&e.b2);
    }
    flat
}

fn layer_load_flat(p: &mut acmoe::moe::MoeLayerParams, flat: &[f64]) {
    let mut off = 0;
    let take = |off: &mut usize, len: usize| {
        let s = *off;
        *off += len;
        s..s + len
    };
    let emb_len = p.embeddings.data().len();
    p.embeddings.data_mut().copy_from_slice(&flat[take(&mut off, emb_len)]);
    for e in &mut p.experts {
        let r = take(&mut off, e.w1.data().len());
        e.w1.data_mut().copy_from_slice(&flat[r]);
        let r = take(&mut off, e.b1.len());
        e.b1.copy_from_slice(&flat[r]);
        let r = take(&mut off, e.w2.data().len());
        e.w2.data_mut().copy_from_slice(&flat[r]);
        let r = take(&mut off, e.b2.len());
        e.b2.copy_from_slice(&flat[r]);
    }
    assert_eq!(off, flat.len());
}

#[test]
fn layer_gradients_match_finite_differences() {
    let (layer, batch, plan, targets) = layer_under_test();
    let lambda_aux = 0.01;

    // Analytic gradients: task term plus the auxiliary gate term.
    let (out, decision, cache) = moe_forward(&layer, &batch, &plan).unwrap();
    let n = out.rows() as f64;
    let mut grad_out = Matrix::zeros(out.rows(), out.cols());
    for i in 0..out.rows() {
        for j in 0..out.cols() {
            grad_out.set(i, j, 2.0 * (out.get(i, j) - targets.get(i, j)) / n);
        }
    }
    let e = layer.num_experts();
    let mut top1 = vec![0.0f64; e];
    for route in decision.routes() {
        top1[route.top1()] += 1.0;
    }
    let nf = decision.len() as f64;
    let extra: Vec<f64> = top1.iter().map(|&c| lambda_aux * e as f64 * (c / nf) / nf).collect();
    let (grads, _) = moe_backward(&layer, &cache, &grad_out, Some(&extra)).unwrap();

    let mut analytic = Vec::new();
    analytic.extend_from_slice(grads.embeddings.data());
    for g in &grads.experts {
        analytic.extend_from_slice(g.w1.data());
        analytic.extend_from_slice(&g.b1);
        analytic.extend_from_slice(g.w2.data());
        analytic.extend_from_slice(&g.b2);
    }

    let base = layer_params_flat(&layer);
    let mut work = layer.clone();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += FD_STEP;
        layer_load_flat(&mut work, &plus);
        let up = layer_loss(&work, &batch, &plan, &targets, lambda_aux);
        let mut minus = base.clone();
        minus[i] -= FD_STEP;
        layer_load_flat(&mut work, &minus);
        let down = layer_loss(&work, &batch, &plan, &targets, lambda_aux);
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = rel_err(analytic[i], numeric);
        worst = worst.max(err);
        assert!(
            err <= 1e-5,
            "param {i}: analytic {} vs numeric {} (rel err {err})",
            analytic[i],
            numeric
        );
    }
    println!("layer gradcheck: {} params, worst rel err {worst:.3e}", base.len());
}

#[test]
fn model_gradients_match_finite_differences_standard_mode() {
    let cfg = ModelConfig {
        layers: 2,
        dim: 4,
        ff_dim: 5,
        out_dim: 3,
        num_experts: 3,
        top_k: 2,
        routing_mode: RoutingMode::Standard,
        seed: 77,
        ..Default::default()
    };
    let mut rng = RngStream::new(77, 0);
    let model = Model::init(&cfg, &mut rng).unwrap();
    let batch = TaskBatch {
        inputs: random_matrix(&mut rng, 6, 4, 1.0),
        targets: random_matrix(&mut rng, 6, 3, 1.0),
        clusters: vec![0; 6],
    };

    let (_, _, _, _, grads) = loss_and_grads(&model, &cfg, &batch, None).unwrap();
    let analytic = grads.flatten();
    let base = model.params_flat();
    let mut work = model.clone();
    let mut worst = 0.0f64;
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += FD_STEP;
        work.load_params_flat(&plus).unwrap();
        let (up, _, _, _, _) = loss_and_grads(&work, &cfg, &batch, None).unwrap();
        let mut minus = base.clone();
        minus[i] -= FD_STEP;
        work.load_params_flat(&minus).unwrap();
        let (down, _, _, _, _) = loss_and_grads(&work, &cfg, &batch, None).unwrap();
        let numeric = (up - down) / (2.0 * FD_STEP);
        let err = rel_err(analytic[i], numeric);
        worst = worst.max(err);
        assert!(
            err <= 1e-5,
            "param {i}: analytic {} vs numeric {} (rel err {err})",
            analytic[i],
            numeric
        );
    }
    println!("model gradcheck: {} params, worst rel err {worst:.3e}", base.len());
}

#[test]
fn model_gradients_match_in_identity_transform_mode() {
    // With the identity basis the transform is constant, so finite
    // differences remain valid in the transformed mode as well.
    let cfg = ModelConfig {
        layers: 2,
        dim: 4,
        ff_dim: 5,
        out_dim: 3,
        num_experts: 3,
        top_k: 2,
        routing_mode: RoutingMode::Ac,
        placement: Placement::Full,
        transform_basis: TransformBasis::Identity,
        seed: 78,
        ..Default::default()
    };
    let mut rng = RngStream::new(78, 0);
    let model = Model::init(&cfg, &mut rng).unwrap();
    let batch = TaskBatch {
        inputs: random_matrix(&mut rng, 5, 4, 1.0),
        targets: random_matrix(&mut rng, 5, 3, 1.0),
        clusters: vec![0; 5],
    };
    let (_, _, _, _, grads) = loss_and_grads(&model, &cfg, &batch, None).unwrap();
    let analytic = grads.flatten();
    let base = model.params_flat();
    let mut work = model.clone();
    for i in 0..base.len() {
        let mut plus = base.clone();
        plus[i] += FD_STEP;
        work.load_params_flat(&plus).unwrap();
        let (up, _, _, _, _) = loss_and_grads(&work, &cfg, &batch, None).unwrap();
        let mut minus = base.clone();
        minus[i] -= FD_STEP;
        work.load_params_flat(&minus).unwrap();
        let (down, _, _, _, _) = loss_and_grads(&work, &cfg, &batch, None).unwrap();
        let numeric = (up - down) / (2.0 * FD_STEP);
        assert!(
            rel_err(analytic[i], numeric) <= 1e-5,
            "param {i}: analytic {} vs numeric {}",
            analytic[i],
            numeric
        );
    }
}
