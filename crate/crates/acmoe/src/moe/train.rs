//! Training loop, trace recording, and evaluation under test-time
//! contamination.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics;
use crate::moe::adam::Adam;
use crate::moe::layer::aux_load_balance_loss;
use crate::moe::model::{Model, ModelConfig, ModelGrads, RoutingMode};
use crate::moe::task::{contaminate, GmmTask, GmmTaskSpec, TaskBatch};
use crate::numerics::matrix::Matrix;
use crate::numerics::rng::RngStream;

/// Stream ids reserved per seed; training and evaluation never share one.
pub mod streams {
    pub const MODEL_INIT: u64 = 0;
    pub const TASK_GEOMETRY: u64 = 1;
    pub const TRAIN_BATCHES: u64 = 2;
    pub const EVAL_BATCH: u64 = 3;
    pub const CONTAMINATION: u64 = 4;
    pub const ABLATION: u64 = 5;
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub model: ModelConfig,
    pub task: GmmTaskSpec,
    pub steps: u64,
    pub batch_size: usize,
    pub eval_every: u64,
    pub eval_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            model: ModelConfig::default(),
            task: GmmTaskSpec::default(),
            steps: 500,
            batch_size: 64,
            eval_every: 25,
            eval_size: 512,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.task.validate()?;
        if self.model.dim != self.task.dim {
            return Err(Error::invalid(format!(
                "model dim {} differs from task dim {}",
                self.model.dim, self.task.dim
            )));
        }
        if self.model.out_dim != self.task.out_dim {
            return Err(Error::invalid(format!(
                "model out_dim {} differs from task out_dim {}",
                self.model.out_dim, self.task.out_dim
            )));
        }
        if self.steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.eval_size == 0 {
            return Err(Error::invalid("steps, batch_size, eval_every, eval_size must be positive"));
        }
        Ok(())
    }
}

/// One optimizer step's diagnostics. `ms` is wall clock and is excluded
/// from determinism comparisons.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    pub aux_loss: f64,
    pub load_balance: f64,
    pub instability: f64,
    pub ms: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalRecord {
    pub step: u64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct TrainTrace {
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
}

impl TrainTrace {
    /// Equality of everything except wall-clock timing.
    pub fn data_eq(&self, other: &TrainTrace) -> bool {
        self.steps.len() == other.steps.len()
            && self.evals.len() == other.evals.len()
            && self
                .steps
                .iter()
                .zip(other.steps.iter())
                .all(|(a, b)| {
                    a.step == b.step
                        && a.loss.to_bits() == b.loss.to_bits()
                        && a.aux_loss.to_bits() == b.aux_loss.to_bits()
                        && a.load_balance.to_bits() == b.load_balance.to_bits()
                        && a.instability.to_bits() == b.instability.to_bits()
                })
            && self
                .evals
                .iter()
                .zip(other.evals.iter())
                .all(|(a, b)| a.step == b.step && a.loss.to_bits() == b.loss.to_bits())
    }

    /// Deterministic columns only; timing goes to [`TrainTrace::timing_csv`].
    pub fn step_csv(&self) -> String {
        let mut out = String::from("step,loss,aux_loss,load_balance,instability\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.step, r.loss, r.aux_loss, r.load_balance, r.instability
            ));
        }
        out
    }

    pub fn eval_csv(&self) -> String {
        let mut out = String::from("step,eval_loss\n");
        for r in &self.evals {
            out.push_str(&format!("{},{}\n", r.step, r.loss));
        }
        out
    }

    /// Wall-clock per step; nondeterministic by nature.
    pub fn timing_csv(&self) -> String {
        let mut out = String::from("step,ms_per_step\n");
        for r in &self.steps {
            out.push_str(&format!("{},{}\n", r.step, r.ms));
        }
        out
    }

    /// Full per-step table including timing.
    pub fn step_csv_with_timing(&self) -> String {
        let mut out = String::from("step,loss,aux_loss,load_balance,instability,ms_per_step\n");
        for r in &self.steps {
            out.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.step, r.loss, r.aux_loss, r.load_balance, r.instability, r.ms
            ));
        }
        out
    }
}

/// A finished (or diverged) training run.
#[derive(Debug)]
pub struct TrainRun {
    pub model: Model,
    pub task: GmmTask,
    pub trace: TrainTrace,
    /// Populated when the loss went non-finite; the trace holds every step
    /// up to the failure.
    pub divergence: Option<String>,
}

/// Mean squared error and its gradient: L = (1/n) sum_i ||p_i - t_i||^2.
pub fn mse_loss(prediction: &Matrix, targets: &Matrix) -> (f64, Matrix) {
    let n = prediction.rows() as f64;
    let mut grad = Matrix::zeros(prediction.rows(), prediction.cols());
    let mut loss = 0.0;
    for i in 0..prediction.rows() {
        for j in 0..prediction.cols() {
            let diff = prediction.get(i, j) - targets.get(i, j);
            loss += diff * diff;
            grad.set(i, j, 2.0 * diff / n);
        }
    }
    (loss / n, grad)
}

/// Total loss (task + scaled auxiliary), gradients for every parameter,
/// and the per-layer routing decisions of the forward pass.
pub fn loss_and_grads(
    model: &Model,
    cfg: &ModelConfig,
    batch: &TaskBatch,
    ablation_rng: Option<&mut RngStream>,
) -> Result<(f64, f64, f64, Vec<crate::router::RoutingDecision>, ModelGrads)> {
    let fwd = model.forward(cfg, &batch.inputs, ablation_rng)?;
    let (task_loss, grad_pred) = mse_loss(&fwd.prediction, &batch.targets);
    let num_layers = cfg.layers as f64;
    let n = batch.inputs.rows() as f64;
    let mut aux_total = 0.0;
    let mut extras: Vec<Option<Vec<f64>>> = Vec::with_capacity(cfg.layers);
    for decision in &fwd.decisions {
        let aux = aux_load_balance_loss(decision, cfg.num_experts)?;
        aux_total += aux;
        if cfg.lambda_aux > 0.0 {
            let mut top1 = vec![0.0f64; cfg.num_experts];
            for route in decision.routes() {
                top1[route.top1()] += 1.0;
            }
            let coeff = cfg.lambda_aux * cfg.num_experts as f64 / (num_layers * n);
            let extra: Vec<f64> = top1.iter().map(|&c| coeff * c / n).collect();
            extras.push(Some(extra));
        } else {
            extras.push(None);
        }
    }
    let aux_mean = aux_total / num_layers;
    let total = task_loss + cfg.lambda_aux * aux_mean;
    let grads = model.backward(&fwd.cache, &grad_pred, &extras)?;
    Ok((total, task_loss, aux_mean, fwd.decisions, grads))
}

/// Deterministic training honoring the stream layout in [`streams`].
pub fn train(cfg: &TrainConfig) -> Result<TrainRun> {
    cfg.validate()?;
    let seed = cfg.model.seed;
    let mut init_rng = RngStream::new(seed, streams::MODEL_INIT);
    let mut geometry_rng = RngStream::new(seed, streams::TASK_GEOMETRY);
    let mut batch_rng = RngStream::new(seed, streams::TRAIN_BATCHES);
    let mut eval_rng = RngStream::new(seed, streams::EVAL_BATCH);
    let mut ablation_rng = RngStream::new(seed, streams::ABLATION);

    let mut model = Model::init(&cfg.model, &mut init_rng)?;
    let task = GmmTask::generate(&cfg.task, &mut geometry_rng)?;
    let eval_batch = task.sample_batch(&mut eval_rng, cfg.eval_size);

    let mut adam = Adam::new(cfg.model.adam, model.num_params());
    let mut trace = TrainTrace::default();
    let mut divergence = None;

    for step in 0..cfg.steps {
        let start = Instant::now();
        let batch = task.sample_batch(&mut batch_rng, cfg.batch_size);
        let ablation = if cfg.model.routing_mode == RoutingMode::RandomAblation {
            Some(&mut ablation_rng)
        } else {
            None
        };
        let (total, task_loss, aux_mean, decisions, grads) =
            loss_and_grads(&model, &cfg.model, &batch, ablation)?;

        if !total.is_finite() {
            divergence = Some(format!("non-finite loss {total} at step {step}"));
            break;
        }

        let balance = metrics::load_balance(&decisions).overall_mean;
        let labels: Vec<Vec<usize>> = decisions.iter().map(|d| d.top1_labels()).collect();
        let mut instability = 0.0;
        if labels.len() > 1 {
            for pair in labels.windows(2) {
                instability += metrics::router_instability(&pair[0], &pair[1])?;
            }
            instability /= (labels.len() - 1) as f64;
        }

        let mut flat = model.params_flat();
        adam.step(&mut flat, &grads.flatten());
        model.load_params_flat(&flat)?;

        let ms = start.elapsed().as_secs_f64() * 1e3;
        trace.steps.push(StepRecord {
            step,
            loss: task_loss,
            aux_loss: aux_mean,
            load_balance: balance,
            instability,
            ms,
        });

        if step % cfg.eval_every == 0 || step + 1 == cfg.steps {
            let fwd = eval_forward(&model, &cfg.model, &eval_batch.inputs, seed)?;
            let (eval_loss, _) = mse_loss(&fwd, &eval_batch.targets);
            trace.evals.push(EvalRecord { step, loss: eval_loss });
        }
    }

    Ok(TrainRun { model, task, trace, divergence })
}

/// Forward pass for evaluation; the random-ablation mode gets a stream
/// derived from the seed so evaluation is reproducible on its own.
fn eval_forward(model: &Model, cfg: &ModelConfig, inputs: &Matrix, seed: u64) -> Result<Matrix> {
    let mut rng = RngStream::new(seed, streams::ABLATION + 1000);
    let ablation =
        if cfg.routing_mode == RoutingMode::RandomAblation { Some(&mut rng) } else { None };
    Ok(model.forward(cfg, inputs, ablation)?.prediction)
}

/// Clean and contaminated evaluation metrics.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalMetrics {
    pub clean_loss: f64,
    pub contaminated_loss: f64,
    /// contaminated - clean.
    pub gap: f64,
}

/// Evaluates a trained model on a fresh batch, optionally with iid
/// Gaussian contamination of the inputs (test-time only).
pub fn evaluate(
    model: &Model,
    cfg: &TrainConfig,
    task: &GmmTask,
    noise_sigma: f64,
    n: usize,
) -> Result<EvalMetrics> {
    let seed = cfg.model.seed;
    let mut eval_rng = RngStream::new(seed, streams::EVAL_BATCH);
    let mut noise_rng = RngStream::new(seed, streams::CONTAMINATION);
    let batch = task.sample_batch(&mut eval_rng, n);

    let clean_pred = eval_forward(model, &cfg.model, &batch.inputs, seed)?;
    let (clean_loss, _) = mse_loss(&clean_pred, &batch.targets);

    let noisy = contaminate(&batch.inputs, noise_sigma, &mut noise_rng);
    let noisy_pred = eval_forward(model, &cfg.model, &noisy, seed)?;
    let (contaminated_loss, _) = mse_loss(&noisy_pred, &batch.targets);

    Ok(EvalMetrics { clean_loss, contaminated_loss, gap: contaminated_loss - clean_loss })
}
