//! Paired experiments shared by the CLI and the acceptance suite: the
//! convergence race and the contamination-gap comparison, both run as
//! standard-vs-transformed on identical data streams.

use serde::Serialize;

use crate::error::Result;
use crate::metrics::steps_to_threshold;
use crate::moe::model::{RoutingMode, TransformBasis};
use crate::moe::train::{evaluate, train, TrainConfig, TrainRun};
use crate::numerics::stats::{mean, median};

/// The smallest trailing-mean eval loss a trace reaches.
fn best_smoothed_eval(run: &TrainRun, window: usize) -> f64 {
    let losses: Vec<f64> = run.trace.evals.iter().map(|e| e.loss).collect();
    let mut best = f64::INFINITY;
    for i in 0..losses.len() {
        let lo = i + 1 - window.min(i + 1);
        best = best.min(mean(&losses[lo..=i]));
    }
    best
}

fn standard_variant(base: &TrainConfig, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.model.seed = seed;
    cfg.model.routing_mode = RoutingMode::Standard;
    cfg
}

fn transformed_variant(base: &TrainConfig, seed: u64) -> TrainConfig {
    let mut cfg = base.clone();
    cfg.model.seed = seed;
    if cfg.model.routing_mode == RoutingMode::Standard {
        cfg.model.routing_mode = RoutingMode::Ac;
    }
    if cfg.model.transform_basis == TransformBasis::Identity {
        cfg.model.transform_basis = TransformBasis::Dispersion;
    }
    cfg
}

#[derive(Debug, Clone, Serialize)]
pub struct RaceSeedResult {
    pub seed: u64,
    pub threshold: f64,
    pub steps_standard: u64,
    pub steps_transformed: u64,
    pub final_eval_standard: f64,
    pub final_eval_transformed: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RaceSummary {
    pub per_seed: Vec<RaceSeedResult>,
    pub median_standard: f64,
    pub median_transformed: f64,
    pub pass: bool,
}

/// Fraction of the log-scale descent the race threshold sits at. Deep in
/// the descent is where routing quality, not the shared early phase,
/// drives progress.
pub const RACE_DEPTH: f64 = 0.75;

/// Runs the convergence race over the seeds. Per seed, both variants train
/// on the same task and batch stream. The threshold interpolates on a log
/// scale between the shared starting loss and the worse of the two best
/// smoothed losses, at depth [`RACE_DEPTH`]; both curves are guaranteed to
/// cross it.
pub fn convergence_race(base: &TrainConfig, seeds: &[u64]) -> Result<(RaceSummary, Vec<(TrainRun, TrainRun)>)> {
    let window = 10;
    let mut per_seed = Vec::with_capacity(seeds.len());
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let std_run = train(&standard_variant(base, seed))?;
        let ac_run = train(&transformed_variant(base, seed))?;
        let start = std_run
            .trace
            .evals
            .first()
            .map_or(f64::INFINITY, |e| e.loss)
            .max(ac_run.trace.evals.first().map_or(f64::INFINITY, |e| e.loss));
        let floor =
            best_smoothed_eval(&std_run, window).max(best_smoothed_eval(&ac_run, window));
        let ln_start = start.max(1e-12).ln();
        let ln_floor = floor.max(1e-12).ln();
        let threshold = (ln_start - RACE_DEPTH * (ln_start - ln_floor)).exp();
        let steps_standard = steps_to_threshold(&std_run.trace, threshold)
            .expect("standard trace crosses the depth threshold");
        let steps_transformed = steps_to_threshold(&ac_run.trace, threshold)
            .expect("transformed trace crosses the depth threshold");
        per_seed.push(RaceSeedResult {
            seed,
            threshold,
            steps_standard,
            steps_transformed,
            final_eval_standard: std_run.trace.evals.last().map_or(f64::NAN, |e| e.loss),
            final_eval_transformed: ac_run.trace.evals.last().map_or(f64::NAN, |e| e.loss),
        });
        runs.push((std_run, ac_run));
    }
    let mut std_steps: Vec<f64> = per_seed.iter().map(|r| r.steps_standard as f64).collect();
    let mut ac_steps: Vec<f64> = per_seed.iter().map(|r| r.steps_transformed as f64).collect();
    let median_standard = median(&mut std_steps);
    let median_transformed = median(&mut ac_steps);
    Ok((
        RaceSummary {
            per_seed,
            median_standard,
            median_transformed,
            pass: median_transformed <= median_standard,
        },
        runs,
    ))
}

#[derive(Debug, Clone, Serialize)]
pub struct GapSeedResult {
    pub seed: u64,
    pub clean_standard: f64,
    pub contaminated_standard: f64,
    pub clean_transformed: f64,
    pub contaminated_transformed: f64,
    pub gap_standard: f64,
    pub gap_transformed: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GapSummary {
    pub noise_sigma: f64,
    pub per_seed: Vec<GapSeedResult>,
    pub mean_gap_standard: f64,
    pub mean_gap_transformed: f64,
    pub pass: bool,
}

/// Trains both variants on clean data and compares their clean-to-
/// contaminated loss gaps at one test-time noise scale, averaged over
/// seeds.
pub fn contamination_gap(
    base: &TrainConfig,
    seeds: &[u64],
    noise_sigma: f64,
    eval_n: usize,
) -> Result<GapSummary> {
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let std_cfg = standard_variant(base, seed);
        let ac_cfg = transformed_variant(base, seed);
        let std_run = train(&std_cfg)?;
        let ac_run = train(&ac_cfg)?;
        let std_metrics = evaluate(&std_run.model, &std_cfg, &std_run.task, noise_sigma, eval_n)?;
        let ac_metrics = evaluate(&ac_run.model, &ac_cfg, &ac_run.task, noise_sigma, eval_n)?;
        per_seed.push(GapSeedResult {
            seed,
            clean_standard: std_metrics.clean_loss,
            contaminated_standard: std_metrics.contaminated_loss,
            clean_transformed: ac_metrics.clean_loss,
            contaminated_transformed: ac_metrics.contaminated_loss,
            gap_standard: std_metrics.gap,
            gap_transformed: ac_metrics.gap,
        });
    }
    let gaps_std: Vec<f64> = per_seed.iter().map(|r| r.gap_standard).collect();
    let gaps_ac: Vec<f64> = per_seed.iter().map(|r| r.gap_transformed).collect();
    let mean_gap_standard = mean(&gaps_std);
    let mean_gap_transformed = mean(&gaps_ac);
    Ok(GapSummary {
        noise_sigma,
        per_seed,
        mean_gap_standard,
        mean_gap_transformed,
        pass: mean_gap_transformed <= mean_gap_standard,
    })
}
