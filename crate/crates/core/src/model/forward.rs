//! Full forward pass and single-sample entry points for each stage.
//!
//! Latent tensors handed across the public API are channel-last
//! `[H/P, W/P, d_z]`; frames are `[C, H, W]`.

use super::config::ModelConfig;
use super::gate::{GateDecision, MoeStats};
use super::layers;
use super::params::{
    DecoderParams, ExpertParams, FourierLayerParams, ModelParams, ModelVars, PatchEmbedParams, RouterParams,
    TemporalAggParams,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Everything recorded by one batched forward pass.
#[derive(Debug)]
pub struct ForwardTrace {
    /// `[B, C, H, W]`.
    pub prediction: Var,
    /// Per block, router softmax `[B·N, N_r]`.
    pub probs: Vec<Var>,
    pub gates: Vec<GateDecision>,
    pub stats: Vec<MoeStats>,
}

fn expect_shape(t: &Tensor, want: &[usize], what: &str) -> Result<()> {
    if t.shape() != want {
        return Err(Error::contract(format!("{what}: expected shape {want:?}, got {:?}", t.shape())));
    }
    Ok(())
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack(items: &[&Tensor]) -> Result<Tensor> {
    let first = items.first().ok_or_else(|| Error::contract("cannot stack an empty batch"))?;
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    let mut data = Vec::with_capacity(first.len() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::contract(format!("batch shapes differ: {:?} vs {:?}", first.shape(), t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::with_precision(&shape, data, first.precision())
}

/// Batched forward on a tape. `input` is `[B, T, C, H, W]`.
pub fn forward_tape(tape: &mut Tape, cfg: &ModelConfig, vars: &ModelVars, input: Var) -> Result<ForwardTrace> {
    let s = tape.shape(input).to_vec();
    let want = [cfg.t_window, cfg.channels, cfg.grid[0], cfg.grid[1]];
    if s.len() != 5 || s[1..] != want {
        return Err(Error::contract(format!("window batch must be [B, {want:?}], got {s:?}")));
    }
    let batch = s[0];
    let rows = batch * cfg.tokens();
    let times: Vec<usize> = (1..=cfg.t_window).collect();
    let tokens = layers::embed(tape, cfg, &vars.embed, input, batch, &times);
    let mut x = layers::aggregate(tape, cfg, &vars.temporal, tokens, rows);
    let mut probs = Vec::with_capacity(vars.blocks.len());
    let mut gates = Vec::with_capacity(vars.blocks.len());
    let mut stats = Vec::with_capacity(vars.blocks.len());
    for (l, b) in vars.blocks.iter().enumerate() {
        let h = layers::norm(tape, &b.norm1, x, batch);
        let f = layers::fourier(tape, cfg, &b.fourier, h, batch);
        x = tape.add(x, f);
        let h = layers::norm(tape, &b.norm2, x, batch);
        let p = layers::router_probs(tape, cfg, &b.router, h, batch);
        let gate = GateDecision::from_probs(l, tape.value(p).data(), cfg.n_routed, cfg.top_k)?;
        let (m, st) = layers::moe(tape, cfg, &b.shared, &b.routed, h, p, &gate)?;
        x = tape.add(x, m);
        probs.push(p);
        gates.push(gate);
        stats.push(st);
    }
    let prediction = layers::decode(tape, cfg, &vars.decoder, x, batch);
    Ok(ForwardTrace { prediction, probs, gates, stats })
}

/// Inference on a batch of `[T, C, H, W]` windows. Returns the stacked
/// predictions `[B, C, H, W]` and the per-block routing of all `B·N` tokens.
pub fn forward_batch(
    inputs: &[&Tensor],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<(Tensor, Vec<GateDecision>)> {
    cfg.validate()?;
    let mut tape = Tape::new(cfg.precision);
    let vars = params.bind(&mut tape, |_| false);
    let x = tape.constant(stack(inputs)?);
    let trace = forward_tape(&mut tape, cfg, &vars, x)?;
    tape.check_finite()?;
    Ok((tape.value(trace.prediction).clone(), trace.gates))
}

/// Predicts the next `[C, H, W]` frame of one window.
pub fn forward(input: &Tensor, params: &ModelParams, cfg: &ModelConfig) -> Result<(Tensor, Vec<GateDecision>)> {
    let (pred, gates) = forward_batch(&[input], params, cfg)?;
    Ok((pred.reshape(&[cfg.channels, cfg.grid[0], cfg.grid[1]])?, gates))
}

fn latent_shape(cfg: &ModelConfig) -> [usize; 3] {
    let [a, b] = cfg.token_grid();
    [a, b, cfg.d_z]
}

/// Embeds one `[C, H, W]` frame observed at 1-based time index `t`.
pub fn patchify(frame: &Tensor, t: usize, params: &PatchEmbedParams, cfg: &ModelConfig) -> Result<Tensor> {
    cfg.validate()?;
    expect_shape(frame, &[cfg.channels, cfg.grid[0], cfg.grid[1]], "frame")?;
    let mut tape = Tape::new(cfg.precision);
    let p = params.map("embed", &mut |_, v| tape.constant(v.clone()));
    let x = tape.constant(frame.reshape(&[1, 1, cfg.channels, cfg.grid[0], cfg.grid[1]])?);
    let z = layers::embed(&mut tape, cfg, &p, x, 1, &[t]);
    tape.value(z).reshape(&latent_shape(cfg))
}

/// Aggregates `[T, H/P, W/P, d_z]` per-frame tokens into one latent.
pub fn temporal_aggregate(tokens: &Tensor, params: &TemporalAggParams, cfg: &ModelConfig) -> Result<Tensor> {
    let [a, b, d] = latent_shape(cfg);
    let t = params.time_maps.shape()[0];
    if t != cfg.t_window {
        return Err(Error::contract(format!("time maps cover {t} steps, config has T = {}", cfg.t_window)));
    }
    expect_shape(tokens, &[t, a, b, d], "token sequence")?;
    let mut tape = Tape::new(cfg.precision);
    let p = params.map("temporal", &mut |_, v| tape.constant(v.clone()));
    let x = tape.constant(tokens.reshape(&[t * a * b, d])?);
    let z = layers::aggregate(&mut tape, cfg, &p, x, a * b);
    tape.value(z).reshape(&[a, b, d])
}

/// Frequency-domain mixing of one latent.
pub fn fourier_mix(latent: &Tensor, params: &FourierLayerParams, cfg: &ModelConfig) -> Result<Tensor> {
    let shape = latent_shape(cfg);
    expect_shape(latent, &shape, "latent")?;
    let mut tape = Tape::new(cfg.precision);
    let p = params.map("fourier", &mut |_, v| tape.constant(v.clone()));
    let x = tape.constant(latent.reshape(&[shape[0] * shape[1], shape[2]])?);
    let y = layers::fourier(&mut tape, cfg, &p, x, 1);
    tape.check_finite()?;
    tape.value(y).reshape(&shape)
}

/// Router softmax and Top-K selection for every token of one latent.
pub fn route(latent: &Tensor, params: &RouterParams, cfg: &ModelConfig) -> Result<GateDecision> {
    let shape = latent_shape(cfg);
    expect_shape(latent, &shape, "latent")?;
    let mut tape = Tape::new(cfg.precision);
    let p = params.map("router", &mut |_, v| tape.constant(v.clone()));
    let x = tape.constant(latent.reshape(&[shape[0] * shape[1], shape[2]])?);
    let probs = layers::router_probs(&mut tape, cfg, &p, x, 1);
    GateDecision::from_probs(0, tape.value(probs).data(), cfg.n_routed, cfg.top_k)
}

/// Mixture-of-experts layer applied to one latent under a given routing.
pub fn moe_combine(
    latent: &Tensor,
    shared: &[ExpertParams],
    routed: &[ExpertParams],
    gate: &GateDecision,
    cfg: &ModelConfig,
) -> Result<(Tensor, MoeStats)> {
    let shape = latent_shape(cfg);
    expect_shape(latent, &shape, "latent")?;
    let mut tape = Tape::new(cfg.precision);
    let mut bind = |e: &ExpertParams| e.map("expert", &mut |_, v| tape.constant(v.clone()));
    let shared: Vec<_> = shared.iter().map(&mut bind).collect();
    let routed: Vec<_> = routed.iter().map(&mut bind).collect();
    let x = tape.constant(latent.reshape(&[shape[0] * shape[1], shape[2]])?);
    let probs = tape.constant(Tensor::new(&[gate.tokens(), gate.n_experts()], gate.full_weights().to_vec())?);
    let (y, stats) = layers::moe(&mut tape, cfg, &shared, &routed, x, probs, gate)?;
    Ok((tape.value(y).reshape(&shape)?, stats))
}

/// Output head: one latent to a `[C, H, W]` frame.
pub fn decode(latent: &Tensor, params: &DecoderParams, cfg: &ModelConfig) -> Result<Tensor> {
    let shape = latent_shape(cfg);
    expect_shape(latent, &shape, "latent")?;
    let mut tape = Tape::new(cfg.precision);
    let p = params.map("decoder", &mut |_, v| tape.constant(v.clone()));
    let x = tape.constant(latent.reshape(&[shape[0] * shape[1], shape[2]])?);
    let y = layers::decode(&mut tape, cfg, &p, x, 1);
    tape.value(y).reshape(&[cfg.channels, cfg.grid[0], cfg.grid[1]])
}
