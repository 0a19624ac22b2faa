//! Error metrics, auto-regressive rollout, router gate signatures with the
//! dataset classifier, expert usage, and report emission.

mod interpret;
mod metrics;
mod report;
mod rollout;

pub use interpret::{
    build_centroids, calibration_split, classification_accuracy, classify_dataset, classify_vector, cross_entropy,
    expert_usage, gate_signature, gate_signatures, importance_cv, signatures_from_gates, smooth, BlockSel, Centroids,
    GateSignature, CENTROID_DELTA,
};
pub use metrics::{l2re, mean_l2re, one_step_l2re, Operator, Predictor, EVAL_CHUNK};
pub use report::{
    evaluate, interpret, pgm_bytes, write_pgm, AccuracyTable, DatasetReport, EvalOptions, EvalReport, DEFAULT_HORIZONS,
};
pub use rollout::{error_accumulation, rollout, rollout_many, HorizonError};
