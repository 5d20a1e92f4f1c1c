//! Desk-scale trainable MoE stack with hand-derived gradients.

pub mod adam;
pub mod checkpoint;
pub mod layer;
pub mod model;
pub mod task;
pub mod train;

pub use adam::{Adam, AdamConfig};
pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use layer::{
    aux_load_balance_loss, moe_backward, moe_forward, ExpertFfn, LayerCache, LayerRoutingPlan,
    MoeLayerGrads, MoeLayerParams,
};
pub use model::{
    Linear, Model, ModelConfig, ModelForward, ModelGrads, Placement, RoutingMode, TransformBasis,
};
pub use task::{contaminate, GmmTask, GmmTaskSpec, TaskBatch};
pub use train::{
    evaluate, loss_and_grads, mse_loss, train, EvalMetrics, EvalRecord, StepRecord, TrainConfig,
    TrainRun, TrainTrace,
};
