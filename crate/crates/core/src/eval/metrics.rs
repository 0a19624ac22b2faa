use rayon::prelude::*;

use crate::data::SampleWindow;
use crate::error::{Error, Result};
use crate::model::{forward_batch, GateDecision, ModelConfig, ModelParams};
use crate::tensor::Tensor;

/// Windows per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 8;

/// `‖pred − gt‖₂ / ‖gt‖₂` over all elements.
pub fn l2re(pred: &[f64], gt: &[f64]) -> Result<f64> {
    if pred.len() != gt.len() {
        return Err(Error::contract(format!("l2re of {} vs {} elements", pred.len(), gt.len())));
    }
    let den = gt.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 || !den.is_finite() {
        return Err(Error::UndefinedMetric);
    }
    let num = pred.iter().zip(gt).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
    Ok(num / den)
}

/// Next-frame predictor over `[T, C, H, W]` windows.
pub trait Predictor: Sync {
    fn predict(&self, inputs: &[&Tensor]) -> Result<Vec<Tensor>>;
}

/// The operator network as a [`Predictor`].
#[derive(Debug, Clone, Copy)]
pub struct Operator<'a> {
    pub params: &'a ModelParams,
    pub cfg: &'a ModelConfig,
}

impl<'a> Operator<'a> {
    pub fn new(params: &'a ModelParams, cfg: &'a ModelConfig) -> Self {
        Operator { params, cfg }
    }

    /// Predictions and per-block routing of each chunk of [`EVAL_CHUNK`]
    /// windows, in input order.
    pub fn run_chunks(&self, inputs: &[&Tensor]) -> Result<Vec<(Vec<Tensor>, Vec<GateDecision>)>> {
        let frame = [self.cfg.channels, self.cfg.grid[0], self.cfg.grid[1]];
        inputs
            .par_chunks(EVAL_CHUNK)
            .map(|chunk| {
                let (pred, gates) = forward_batch(chunk, self.params, self.cfg)?;
                let len: usize = frame.iter().product();
                let preds =
                    pred.data().chunks(len).map(|c| Tensor::new(&frame, c.to_vec())).collect::<Result<Vec<_>>>()?;
                Ok((preds, gates))
            })
            .collect()
    }
}

impl Predictor for Operator<'_> {
    fn predict(&self, inputs: &[&Tensor]) -> Result<Vec<Tensor>> {
        Ok(self.run_chunks(inputs)?.into_iter().flat_map(|(p, _)| p).collect())
    }
}

/// Mean one-step relative error of a predictor over windows.
pub fn mean_l2re(predictor: &dyn Predictor, windows: &[SampleWindow]) -> Result<f64> {
    if windows.is_empty() {
        return Err(Error::contract("no windows to evaluate"));
    }
    let inputs: Vec<&Tensor> = windows.iter().map(|w| &w.input).collect();
    let preds = predictor.predict(&inputs)?;
    let mut total = 0.0;
    for (p, w) in preds.iter().zip(windows) {
        total += l2re(p.data(), w.target.data())?;
    }
    Ok(total / windows.len() as f64)
}

/// Mean one-step relative error of the network over windows.
pub fn one_step_l2re(params: &ModelParams, cfg: &ModelConfig, windows: &[SampleWindow]) -> Result<f64> {
    mean_l2re(&Operator::new(params, cfg), windows)
}
