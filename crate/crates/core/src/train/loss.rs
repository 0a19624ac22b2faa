use crate::data::SampleWindow;
use crate::error::{Error, Result};
use crate::model::{forward_tape, stack, GateDecision, ModelConfig, ModelParams};
use crate::tensor::{Tape, Tensor};

/// Loss of one batch, split into its terms.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    pub prediction_mse: f64,
    pub balance_per_block: Vec<f64>,
    pub total: f64,
}

impl LossBreakdown {
    fn new(prediction_mse: f64, balance_per_block: Vec<f64>) -> Self {
        let total = balance_per_block.iter().fold(prediction_mse, |acc, b| acc + b);
        LossBreakdown { prediction_mse, balance_per_block, total }
    }

    pub fn balance(&self) -> f64 {
        self.balance_per_block.iter().sum()
    }
}

/// Loss, gradients in parameter traversal order (`None` for frozen or
/// unused tensors) and the routing of the batch.
#[derive(Debug)]
pub struct LossAndGrads {
    pub loss: LossBreakdown,
    pub grads: Vec<Option<Tensor>>,
    pub gates: Vec<GateDecision>,
}

fn targets(batch: &[SampleWindow]) -> Result<(Tensor, Tensor)> {
    let inputs: Vec<&Tensor> = batch.iter().map(|w| &w.input).collect();
    let outs: Vec<&Tensor> = batch.iter().map(|w| &w.target).collect();
    Ok((stack(&inputs)?, stack(&outs)?))
}

/// Prediction MSE (mean over every element of the batch) plus
/// `w_bal · CV²(Importance)` per block, Importance summed over all tokens
/// of the batch. Tensors rejected by `trainable` get no gradient.
pub fn loss_and_grads(
    batch: &[SampleWindow],
    params: &ModelParams,
    cfg: &ModelConfig,
    trainable: impl Fn(&str) -> bool,
) -> Result<LossAndGrads> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let (x, y) = targets(batch)?;
    let mut tape = Tape::new(cfg.precision);
    let vars = params.bind(&mut tape, &trainable);
    let xv = tape.constant(x);
    let trace = forward_tape(&mut tape, cfg, &vars, xv)?;
    let yv = tape.constant(y);
    let mse = tape.mse(trace.prediction, yv);
    let mut total = mse;
    let mut balance = Vec::with_capacity(trace.probs.len());
    for &p in &trace.probs {
        let imp = tape.sum_rows(p);
        let cv = tape.cv_squared(imp);
        let term = tape.scale(cv, cfg.w_bal);
        balance.push(tape.value(term).item());
        total = tape.add(total, term);
    }
    let loss = LossBreakdown::new(tape.value(mse).item(), balance);
    if !loss.total.is_finite() {
        return Err(Error::NonFinite { op: "loss".into() });
    }
    tape.check_finite()?;
    let grads = tape.backward(total)?;
    let grads =
        vars.leaves().into_iter().map(|(name, v)| if trainable(&name) { grads.get(*v) } else { None }).collect();
    Ok(LossAndGrads { loss, grads, gates: trace.gates })
}

/// Loss of a batch without gradients.
pub fn compute_loss(batch: &[SampleWindow], params: &ModelParams, cfg: &ModelConfig) -> Result<LossBreakdown> {
    if batch.is_empty() {
        return Err(Error::contract("empty batch"));
    }
    let (x, y) = targets(batch)?;
    let mut tape = Tape::new(cfg.precision);
    let vars = params.bind(&mut tape, |_| false);
    let xv = tape.constant(x);
    let trace = forward_tape(&mut tape, cfg, &vars, xv)?;
    let yv = tape.constant(y);
    let mse = tape.mse(trace.prediction, yv);
    let mut balance = Vec::with_capacity(trace.probs.len());
    for &p in &trace.probs {
        let imp = tape.sum_rows(p);
        let cv = tape.cv_squared(imp);
        let term = tape.scale(cv, cfg.w_bal);
        balance.push(tape.value(term).item());
    }
    Ok(LossBreakdown::new(tape.value(mse).item(), balance))
}

/// Rescales gradients so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Option<Tensor>], max_norm: f64) -> f64 {
    let norm = grads.iter().flatten().map(|g| g.data().iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut().flatten() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
