use super::metrics::{l2re, Predictor};
use crate::data::TrajectorySet;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Auto-regressive rollouts of several `[T, C, H, W]` windows at once:
/// every step predicts the next frame and slides the window by one.
pub fn rollout_many(predictor: &dyn Predictor, initial: &[Tensor], steps: usize) -> Result<Vec<Vec<Tensor>>> {
    let mut windows = initial.to_vec();
    let mut out = vec![Vec::with_capacity(steps); initial.len()];
    if initial.is_empty() {
        return Ok(out);
    }
    let shape = initial[0].shape().to_vec();
    if shape.len() != 4 || initial.iter().any(|w| w.shape() != shape.as_slice()) {
        return Err(Error::contract(format!("rollout windows must share a [T, C, H, W] shape, first is {shape:?}")));
    }
    let frame_len: usize = shape[1..].iter().product();
    for _ in 0..steps {
        let refs: Vec<&Tensor> = windows.iter().collect();
        let preds = predictor.predict(&refs)?;
        if preds.len() != windows.len() {
            return Err(Error::contract("predictor returned the wrong number of frames"));
        }
        for ((w, p), o) in windows.iter_mut().zip(preds).zip(out.iter_mut()) {
            if p.len() != frame_len {
                return Err(Error::contract(format!("predicted frame has {} values, expected {frame_len}", p.len())));
            }
            let mut data = w.data()[frame_len..].to_vec();
            data.extend_from_slice(p.data());
            *w = Tensor::new(&shape, data)?;
            o.push(p.reshape(&shape[1..])?);
        }
    }
    Ok(out)
}

/// Rollout of a single window; returns `steps` frames `[C, H, W]`.
pub fn rollout(predictor: &dyn Predictor, initial: &Tensor, steps: usize) -> Result<Vec<Tensor>> {
    Ok(rollout_many(predictor, std::slice::from_ref(initial), steps)?.pop().unwrap_or_default())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HorizonError {
    pub horizon: usize,
    pub l2re: f64,
}

/// Mean relative error at each rollout horizon over the given
/// trajectories, rolled out from their first `t_window` frames. Horizon
/// `h ≥ 1` compares the `h`-th prediction with frame `t_window − 1 + h`.
pub fn error_accumulation(
    predictor: &dyn Predictor,
    set: &TrajectorySet,
    trajectories: &[usize],
    t_window: usize,
    horizons: &[usize],
) -> Result<Vec<HorizonError>> {
    let d = set.dims();
    if trajectories.is_empty() {
        return Err(Error::contract("no trajectories to roll out"));
    }
    let max_h = horizons.iter().copied().max().unwrap_or(0);
    if horizons.contains(&0) {
        return Err(Error::contract("horizons are 1-based"));
    }
    if t_window == 0 || t_window - 1 + max_h >= d.t_total {
        return Err(Error::contract(format!(
            "horizon {max_h} with T = {t_window} exceeds trajectory length {}",
            d.t_total
        )));
    }
    let initial = trajectories.iter().map(|&n| Ok(set.window(n, 0, t_window, 0)?.input)).collect::<Result<Vec<_>>>()?;
    let frames = rollout_many(predictor, &initial, max_h)?;
    horizons
        .iter()
        .map(|&h| {
            let mut total = 0.0;
            for (&n, pred) in trajectories.iter().zip(&frames) {
                total += l2re(pred[h - 1].data(), set.frame(n, t_window - 1 + h))?;
            }
            Ok(HorizonError { horizon: h, l2re: total / trajectories.len() as f64 })
        })
        .collect()
}
