//! Pre-training over a dataset mixture, router-frozen fine-tuning, the
//! learning-rate schedule and checkpoint persistence.

mod checkpoint;
mod config;
mod loss;
mod run;

pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CKPT_MAGIC, CKPT_VERSION};
pub use config::{one_cycle_lr, Phase, TrainConfig};
pub use loss::{clip_global_norm, compute_loss, loss_and_grads, LossAndGrads, LossBreakdown};
pub use run::{
    derive_seed, finetune, held_out_windows, metrics_csv, pretrain, MetricsRow, TrainOutcome, METRICS_HEADER,
};
