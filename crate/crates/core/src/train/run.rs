use std::collections::BTreeMap;
use std::fmt::Write as _;

use super::checkpoint::Checkpoint;
use super::config::{one_cycle_lr, Phase, TrainConfig};
use super::loss::{clip_global_norm, loss_and_grads};
use crate::data::{inject_noise, BalancedSampler, DatasetExtent, SampleWindow, TrainingSet};
use crate::error::{Error, Result};
use crate::eval::one_step_l2re;
use crate::model::{is_router_tensor, ModelConfig, ModelParams};
use crate::tensor::adam_step;

fn check_dataset(d: &TrainingSet, cfg: &ModelConfig) -> Result<()> {
    let dims = d.set.dims();
    if dims.c != cfg.channels || [dims.h, dims.w] != cfg.grid {
        return Err(Error::config(format!(
            "dataset {} has C = {}, grid {}x{}; model expects C = {}, grid {:?}",
            d.name, dims.c, dims.h, dims.w, cfg.channels, cfg.grid
        )));
    }
    if d.set.window_starts(cfg.t_window) == 0 {
        return Err(Error::config(format!("dataset {} is too short for T = {}", d.name, cfg.t_window)));
    }
    Ok(())
}
/// Up to `max` windows spread evenly over the held-out trajectories,
/// as `(trajectory, start)` pairs.
pub fn held_out_windows(data: &TrainingSet, t_window: usize, max: usize) -> Vec<(usize, usize)> {
    let starts = data.set.window_starts(t_window);
    let all: Vec<(usize, usize)> = data.held_out().flat_map(|n| (0..starts).map(move |s| (n, s))).collect();
    if all.len() <= max {
        return all;
    }
    (0..max).map(|i| all[i * all.len() / max]).collect()
}

pub const METRICS_HEADER: &str = "epoch,step,phase,dataset,l2re,pred_mse,balance_loss,lr,seed";

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: u64,
    pub phase: Phase,
    pub dataset: String,
    /// Held-out one-step relative error.
    pub l2re: f64,
    /// Mean training prediction loss over the epoch.
    pub pred_mse: f64,
    /// Mean summed balance loss over the epoch.
    pub balance_loss: f64,
    pub lr: f64,
    pub seed: u64,
}

pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.epoch,
            r.step,
            r.phase.name(),
            r.dataset,
            r.l2re,
            r.pred_mse,
            r.balance_loss,
            r.lr,
            r.seed
        );
    }
    out
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

/// SplitMix64 finalizer over a seed and a stream of words.
pub fn derive_seed(seed: u64, words: &[u64]) -> u64 {
    let mut z = seed;
    for &w in words {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(w);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// Auto-regressive denoising pre-training from a fresh initialization.
pub fn pretrain(data: &[TrainingSet], model: &ModelConfig, train: &TrainConfig) -> Result<TrainOutcome> {
    model.validate()?;
    train.validate()?;
    let params = ModelParams::init(model, train.seed)?;
    let train = TrainConfig { phase: Phase::Pretrain, ..train.clone() };
    let ckpt = Checkpoint::new(model.clone(), train.clone(), params);
    run(ckpt, data, &train)
}

/// Router-frozen fine-tuning on one dataset without input noise.
pub fn finetune(ckpt: &Checkpoint, data: &TrainingSet, train: &TrainConfig) -> Result<TrainOutcome> {
    train.validate()?;
    if train.total_steps() == 0 {
        return Ok(TrainOutcome { checkpoint: ckpt.clone(), metrics: Vec::new() });
    }
    let train = TrainConfig { phase: Phase::Finetune, ..train.clone() };
    let mut start = ckpt.clone();
    start.train = train.clone();
    start.step = 0;
    run(start, std::slice::from_ref(data), &train)
}

fn describe_mix(batch: &[SampleWindow], data: &[TrainingSet]) -> String {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for w in batch {
        *counts.entry(data[w.dataset_id].name.as_str()).or_default() += 1;
    }
    counts.iter().map(|(k, v)| format!("{k} x{v}")).collect::<Vec<_>>().join(", ")
}

fn run(mut ckpt: Checkpoint, data: &[TrainingSet], train: &TrainConfig) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::config("no training data"));
    }
    let cfg = ckpt.model.clone();
    for d in data {
        check_dataset(d, &cfg)?;
    }
    let phase = train.phase;
    let weights: Vec<f64> = data.iter().map(|d| d.weight).collect();
    let extents: Vec<DatasetExtent> = data
        .iter()
        .map(|d| DatasetExtent { trajectories: d.split().0, starts: d.set.window_starts(cfg.t_window) })
        .collect();
    let mut sampler = BalancedSampler::new(&weights, &extents, derive_seed(train.seed, &[1, phase as u64]))?;
    let eval_sets: Vec<Vec<SampleWindow>> = data
        .iter()
        .enumerate()
        .map(|(i, d)| {
            held_out_windows(d, cfg.t_window, train.eval_windows)
                .into_iter()
                .map(|(n, s)| d.set.window(n, s, cfg.t_window, i))
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<_>>()?;
    let trainable = |name: &str| phase == Phase::Pretrain || !is_router_tensor(name);
    let total = train.total_steps();
    let mut metrics = Vec::new();
    let (mut sum_mse, mut sum_bal, mut count) = (0.0, 0.0, 0usize);
    for step in 0..total {
        let mut batch = Vec::with_capacity(train.batch_size);
        for (i, d) in sampler.by_ref().take(train.batch_size).enumerate() {
            let w = data[d.dataset].set.window(d.trajectory, d.start, cfg.t_window, d.dataset)?;
            let w = if phase == Phase::Pretrain && train.noise_coef > 0.0 {
                inject_noise(&w, train.noise_coef, derive_seed(train.seed, &[2, step as u64, i as u64]))?
            } else {
                w
            };
            batch.push(w);
        }
        let out = match loss_and_grads(&batch, &ckpt.params, &cfg, trainable) {
            Ok(out) => out,
            Err(Error::NonFinite { op }) => {
                return Err(Error::Diverged {
                    step: ckpt.step + step as u64,
                    detail: format!("non-finite value in {op}; batch mix: {}", describe_mix(&batch, data)),
                });
            }
            Err(e) => return Err(e),
        };
        let mut grads = out.grads;
        clip_global_norm(&mut grads, train.grad_clip);
        let lr = one_cycle_lr(step, total, train.warmup_fraction, train.peak_lr)?;
        if lr > 0.0 {
            let mut refs: Vec<&mut crate::tensor::Tensor> = Vec::new();
            ckpt.params.visit_mut(&mut |_, t| refs.push(t));
            adam_step(&mut refs, &grads, &mut ckpt.adam, lr)?;
        }
        sum_mse += out.loss.prediction_mse;
        sum_bal += out.loss.balance();
        count += 1;
        if (step + 1) % train.steps_per_epoch == 0 {
            let epoch = (step + 1) / train.steps_per_epoch;
            for (i, d) in data.iter().enumerate() {
                let l2re =
                    if eval_sets[i].is_empty() { f64::NAN } else { one_step_l2re(&ckpt.params, &cfg, &eval_sets[i])? };
                metrics.push(MetricsRow {
                    epoch,
                    step: ckpt.step + step as u64 + 1,
                    phase,
                    dataset: d.name.clone(),
                    l2re,
                    pred_mse: sum_mse / count as f64,
                    balance_loss: sum_bal / count as f64,
                    lr,
                    seed: train.seed,
                });
                log::info!(
                    "{} epoch {epoch} {}: l2re {l2re:.4} mse {:.3e}",
                    phase.name(),
                    d.name,
                    sum_mse / count as f64
                );
            }
            (sum_mse, sum_bal, count) = (0.0, 0.0, 0);
        }
    }
    ckpt.step += total as u64;
    let (seed, pos) = sampler.rng_state();
    ckpt.rng_seed = seed;
    ckpt.rng_word_pos = pos;
    Ok(TrainOutcome { checkpoint: ckpt, metrics })
}
