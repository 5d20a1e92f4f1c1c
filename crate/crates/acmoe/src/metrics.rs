//! Diagnostics: expert load balance, routing stability across layers,
//! steps-to-threshold on training traces, and routing-overhead
//! microbenchmarks.

use std::time::Instant;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::moe::layer::{moe_forward, LayerRoutingPlan, MoeLayerParams};
use crate::moe::model::{Model, ModelConfig};
use crate::moe::train::TrainTrace;
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::RngStream;
use crate::numerics::stats::{mean, median, population_std};
use crate::router::{build_transform, RoutingDecision};
use crate::wclust::ClusterAssignment;

/// Per-layer standard deviation of expert token shares, in percent.
#[derive(Debug, Clone, Serialize)]
pub struct LoadBalanceReport {
    pub per_layer: Vec<f64>,
    pub overall_mean: f64,
    pub overall_std: f64,
}

/// Load balance from explicit top-1 labels, one vector per layer. The
/// score is the population std of the E per-expert percentages; 0 means
/// perfectly even assignment.
pub fn load_balance_from_labels(per_layer: &[Vec<usize>], num_experts: usize) -> LoadBalanceReport {
    let mut scores = Vec::with_capacity(per_layer.len());
    for labels in per_layer {
        let mut counts = vec![0.0f64; num_experts];
        for &l in labels {
            counts[l] += 1.0;
        }
        let n = labels.len() as f64;
        let percentages: Vec<f64> = counts.iter().map(|c| 100.0 * c / n).collect();
        scores.push(population_std(&percentages));
    }
    LoadBalanceReport {
        overall_mean: mean(&scores),
        overall_std: population_std(&scores),
        per_layer: scores,
    }
}

pub fn load_balance(decisions: &[RoutingDecision]) -> LoadBalanceReport {
    let labels: Vec<Vec<usize>> = decisions.iter().map(|d| d.top1_labels()).collect();
    let num_experts = decisions.first().map_or(1, |d| d.num_experts());
    load_balance_from_labels(&labels, num_experts)
}

/// Router instability between two adjacent layers: mean absolute
/// entrywise difference of the n x n co-membership matrices (diagonal
/// included; it is always 1 in both and never contributes).
pub fn router_instability(assign_prev: &[usize], assign_cur: &[usize]) -> Result<f64> {
    if assign_prev.len() != assign_cur.len() {
        return Err(Error::shape(format!(
            "{} vs {} labels",
            assign_prev.len(),
            assign_cur.len()
        )));
    }
    let n = assign_prev.len();
    if n == 0 {
        return Err(Error::EmptyInput { context: "instability of empty assignments".into() });
    }
    let mut diff = 0usize;
    for i in 0..n {
        for j in 0..n {
            let s_prev = assign_prev[i] == assign_prev[j];
            let s_cur = assign_cur[i] == assign_cur[j];
            if s_prev != s_cur {
                diff += 1;
            }
        }
    }
    Ok(diff as f64 / (n * n) as f64)
}

/// First step whose trailing-mean smoothed loss reaches the threshold.
pub fn steps_to_threshold_series(
    steps: &[u64],
    losses: &[f64],
    threshold: f64,
    window: usize,
) -> Option<u64> {
    debug_assert_eq!(steps.len(), losses.len());
    let w = window.max(1);
    for i in 0..losses.len() {
        let lo = i + 1 - w.min(i + 1);
        let smoothed = mean(&losses[lo..=i]);
        if smoothed <= threshold {
            return Some(steps[i]);
        }
    }
    None
}

/// Steps-to-threshold over a trace's eval curve with the standard
/// smoothing window of 10.
pub fn steps_to_threshold(trace: &TrainTrace, threshold: f64) -> Option<u64> {
    let steps: Vec<u64> = trace.evals.iter().map(|e| e.step).collect();
    let losses: Vec<f64> = trace.evals.iter().map(|e| e.loss).collect();
    steps_to_threshold_series(&steps, &losses, threshold, 10)
}

#[derive(Debug, Clone, Serialize)]
pub struct OverheadConfig {
    pub tokens: usize,
    pub dim: usize,
    pub ff_dim: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub iters: usize,
    pub warmup: usize,
    pub seed: u64,
}

impl Default for OverheadConfig {
    fn default() -> Self {
        OverheadConfig {
            tokens: 4096,
            dim: 64,
            ff_dim: 256,
            num_experts: 16,
            top_k: 2,
            iters: 9,
            warmup: 2,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct OverheadReport {
    pub standard_ms: f64,
    pub ac_ms: f64,
    /// (ac - standard) / standard.
    pub overhead_fraction: f64,
}

fn bench_layer(cfg: &OverheadConfig) -> Result<(MoeLayerParams, Matrix, Vec<usize>)> {
    let mut rng = RngStream::new(cfg.seed, 90);
    let mcfg = ModelConfig {
        layers: 1,
        dim: cfg.dim,
        ff_dim: cfg.ff_dim,
        out_dim: cfg.dim,
        num_experts: cfg.num_experts,
        top_k: cfg.top_k,
        ..Default::default()
    };
    let model = Model::init(&mcfg, &mut rng)?;
    let layer = model.layers.into_iter().next().unwrap();
    let mut batch = Matrix::zeros(cfg.tokens, cfg.dim);
    for v in batch.data_mut() {
        *v = rng.next_normal();
    }
    // A previous-layer assignment to anchor the transformed pass on.
    let (_, decision, _) = moe_forward(&layer, &batch, &LayerRoutingPlan::TopK { k: cfg.top_k })?;
    Ok((layer, batch, decision.top1_labels()))
}

/// Median wall-clock per MoE-layer forward pass for the standard and the
/// transformed routing paths on identical inputs. The transformed path
/// includes rebuilding the transform from batch statistics every
/// iteration, as training does.
pub fn routing_overhead(cfg: &OverheadConfig) -> Result<OverheadReport> {
    let (layer, batch, anchors) = bench_layer(cfg)?;
    let assign = ClusterAssignment::new(anchors.clone(), cfg.num_experts)?;

    let mut standard_times = Vec::with_capacity(cfg.iters);
    let mut ac_times = Vec::with_capacity(cfg.iters);
    for it in 0..cfg.warmup + cfg.iters {
        let start = Instant::now();
        let out = moe_forward(&layer, &batch, &LayerRoutingPlan::TopK { k: cfg.top_k })?;
        std::hint::black_box(&out);
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        if it >= cfg.warmup {
            standard_times.push(elapsed);
        }
    }
    for it in 0..cfg.warmup + cfg.iters {
        let start = Instant::now();
        let transform = build_transform(&batch, &assign, crate::numerics::SpreadMetric::Mad)?;
        let rows: Vec<Vec<f64>> = anchors.iter().map(|&a| transform.row(a).to_vec()).collect();
        let plan =
            LayerRoutingPlan::TransformedTopK { k: cfg.top_k, rows, anchors: anchors.clone() };
        let out = moe_forward(&layer, &batch, &plan)?;
        std::hint::black_box(&out);
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        if it >= cfg.warmup {
            ac_times.push(elapsed);
        }
    }
    let standard_ms = median(&mut standard_times);
    let ac_ms = median(&mut ac_times);
    Ok(OverheadReport {
        standard_ms,
        ac_ms,
        overhead_fraction: (ac_ms - standard_ms) / standard_ms,
    })
}

/// Median wall-clock of transform construction at several batch sizes.
pub fn transform_build_scaling(
    token_counts: &[usize],
    dim: usize,
    num_experts: usize,
    iters: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    let mut rng = RngStream::new(seed, 91);
    let mut out = Vec::with_capacity(token_counts.len());
    for &n in token_counts {
        let mut batch = Matrix::zeros(n, dim);
        for v in batch.data_mut() {
            *v = rng.next_normal();
        }
        let labels: Vec<usize> = (0..n).map(|_| rng.next_usize(num_experts)).collect();
        let assign = ClusterAssignment::new(labels, num_experts)?;
        let mut times = Vec::with_capacity(iters);
        for _ in 0..iters + 1 {
            let start = Instant::now();
            let t = build_transform(&batch, &assign, crate::numerics::SpreadMetric::Mad)?;
            std::hint::black_box(&t);
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
        times.remove(0); // warmup
        out.push((n, median(&mut times)));
    }
    Ok(out)
}

/// Least-squares slope of ln(ms) against ln(n).
pub fn log_log_slope(points: &[(usize, f64)]) -> f64 {
    let xs: Vec<f64> = points.iter().map(|(n, _)| (*n as f64).ln()).collect();
    let ys: Vec<f64> = points.iter().map(|(_, ms)| ms.ln()).collect();
    let mx = mean(&xs);
    let my = mean(&ys);
    let mut num = 0.0;
    let mut den = 0.0;
    for i in 0..xs.len() {
        num += (xs[i] - mx) * (ys[i] - my);
        den += (xs[i] - mx) * (xs[i] - mx);
    }
    num / den
}
