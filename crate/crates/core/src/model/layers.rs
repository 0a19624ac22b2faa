//! Tape-level building blocks of the network.
//!
//! Latents are row-major `[B·N, d_z]` matrices: one row per token, samples
//! stacked, tokens in raster order of the `(H/P, W/P)` grid.

use std::sync::Arc;

use super::config::ModelConfig;
use super::gate::{GateDecision, MoeStats};
use super::params::{Decoder, Expert, FourierLayer, Norm, PatchEmbed, Router, TemporalAgg};
use crate::data::signed_freq;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Unary, Var};

/// Variance floor of the per-channel normalization.
pub const NORM_EPS: f64 = 1e-5;

/// Local indices of the `k×k` periodic neighbourhood of every token, offsets
/// in row-major order, centre at `k²/2`.
pub(crate) fn neighbors(grid: [usize; 2], k: usize) -> Vec<usize> {
    let [h, w] = grid;
    let r = (k / 2) as isize;
    let mut out = Vec::with_capacity(h * w * k * k);
    for i in 0..h as isize {
        for j in 0..w as isize {
            for di in -r..=r {
                for dj in -r..=r {
                    let a = (i + di).rem_euclid(h as isize) as usize;
                    let b = (j + dj).rem_euclid(w as isize) as usize;
                    out.push(a * w + b);
                }
            }
        }
    }
    out
}

/// Normalized `(x, y, t)` coordinates `[len(times)·H·W, 3]`.
fn coordinates(cfg: &ModelConfig, times: &[usize]) -> Tensor {
    let [h, w] = cfg.grid;
    let mut d = Vec::with_capacity(times.len() * h * w * 3);
    for &t in times {
        for i in 0..h {
            for j in 0..w {
                d.extend([i as f64 / h as f64, j as f64 / w as f64, t as f64 / cfg.t_window as f64]);
            }
        }
    }
    Tensor::new(&[times.len() * h * w, 3], d).expect("finite coordinates")
}

/// Patch embedding of frames `[B, S, C, H, W]` whose slots carry the
/// (1-based) time indices `times`. Returns `[S·B·N, d_z]`, slot-major.
pub(crate) fn embed(
    tape: &mut Tape,
    cfg: &ModelConfig,
    p: &PatchEmbed<Var>,
    x: Var,
    batch: usize,
    times: &[usize],
) -> Var {
    let (c, [h, w], pp) = (cfg.channels, cfg.grid, cfg.patch);
    let s = times.len();
    let [hp, wp] = cfg.token_grid();
    // positional field, permuted from [(s, i, j), c] to [s, c, i, j]
    let coords = tape.constant(coordinates(cfg, times));
    let pos = tape.matmul(coords, p.pos_weight);
    let pos = tape.add_bcast(pos, p.pos_bias);
    let mut perm = Vec::with_capacity(s * c * h * w);
    for t in 0..s {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    perm.push(((t * h + i) * w + j) * c + ch);
                }
            }
        }
    }
    let pos = tape.gather(pos, perm.into(), &[s * c * h * w]);
    let x = tape.add_bcast(x, pos);
    // im2col of non-overlapping P×P patches
    let pl = c * pp * pp;
    let mut idx = Vec::with_capacity(s * batch * hp * wp * pl);
    for t in 0..s {
        for b in 0..batch {
            for a in 0..hp {
                for e in 0..wp {
                    for ch in 0..c {
                        for pi in 0..pp {
                            let row = (((b * s + t) * c + ch) * h + a * pp + pi) * w + e * pp;
                            idx.extend(row..row + pp);
                        }
                    }
                }
            }
        }
    }
    let rows = s * batch * hp * wp;
    let patches = tape.gather(x, idx.into(), &[rows, pl]);
    let z = tape.matmul(patches, p.kernel);
    tape.add_bcast(z, p.bias)
}

/// Complex temporal aggregation of `[T·R, d]` slot-major tokens into `[R, d]`.
pub(crate) fn aggregate(tape: &mut Tape, cfg: &ModelConfig, p: &TemporalAgg<Var>, tokens: Var, rows: usize) -> Var {
    let d = cfg.d_z;
    let mut re: Option<Var> = None;
    let mut im: Option<Var> = None;
    for t in 0..cfg.t_window {
        let zt = tape.narrow(tokens, t * rows, rows);
        let wt = tape.narrow(p.time_maps, t, 1);
        let wt = tape.reshape(wt, &[d, d]);
        let y = tape.matmul(zt, wt);
        let phase = tape.scale(p.gamma, (t + 1) as f64);
        let cos = tape.map(phase, Unary::Cos);
        let sin = tape.map(phase, Unary::Sin);
        let yc = tape.mul_bcast(y, cos);
        let ys = tape.mul_bcast(y, sin);
        re = Some(match re {
            Some(acc) => tape.add(acc, yc),
            None => yc,
        });
        im = Some(match im {
            Some(acc) => tape.add(acc, ys),
            None => ys,
        });
    }
    let (re, im) = (re.expect("T >= 1"), im.expect("T >= 1"));
    // e^{-iγt} contributes -sin to the imaginary part
    let im = tape.scale(im, -1.0);
    let w_re = tape.narrow(p.post_weight, 0, d);
    let w_im = tape.narrow(p.post_weight, d, d);
    let a = tape.matmul(re, w_re);
    let b = tape.matmul(im, w_im);
    let out = tape.add(a, b);
    tape.add_bcast(out, p.post_bias)
}

/// Per-sample, per-channel normalization over tokens with learnable affine.
pub(crate) fn norm(tape: &mut Tape, p: &Norm<Var>, x: Var, batch: usize) -> Var {
    let n = tape.instance_norm(x, batch, NORM_EPS);
    let n = tape.mul_bcast(n, p.scale);
    tape.add_bcast(n, p.shift)
}

/// Row weights that zero every frequency bin beyond `cap` on either axis.
fn mode_mask(grid: [usize; 2], batch: usize, cap: usize) -> Tensor {
    let [h, w] = grid;
    let mut d = Vec::with_capacity(2 * batch * h * w);
    for _ in 0..2 * batch {
        for i in 0..h {
            for j in 0..w {
                let keep = signed_freq(i, h).abs() <= cap as f64 && signed_freq(j, w).abs() <= cap as f64;
                d.push(if keep { 1.0 } else { 0.0 });
            }
        }
    }
    Tensor::new(&[2 * batch * h * w], d).expect("binary mask")
}

/// Multi-head frequency-domain MLP on a `[B·N, d]` latent.
pub(crate) fn fourier(tape: &mut Tape, cfg: &ModelConfig, p: &FourierLayer<Var>, x: Var, batch: usize) -> Var {
    let [hp, wp] = cfg.token_grid();
    let (d, rows) = (cfg.d_z, batch * hp * wp);
    let act = cfg.activation.unary();
    let grid = tape.reshape(x, &[batch, hp, wp, d]);
    let spec = tape.dft2(grid);
    let mut spec = tape.reshape(spec, &[2 * rows, d]);
    let mask = (cfg.mode_cap > 0).then(|| tape.constant(mode_mask([hp, wp], batch, cfg.mode_cap)));
    if let Some(m) = mask {
        spec = tape.mul_rows(spec, m);
    }
    let re = tape.narrow(spec, 0, rows);
    let im = tape.narrow(spec, rows, rows);
    // real biases enter the real part only
    let re = tape.block_matmul(re, p.w1);
    let re = tape.add_bcast(re, p.b1);
    let im = tape.block_matmul(im, p.w1);
    let re = tape.map(re, act);
    let im = tape.map(im, act);
    let re = tape.block_matmul(re, p.w2);
    let re = tape.add_bcast(re, p.b2);
    let im = tape.block_matmul(im, p.w2);
    let mut out = tape.concat(re, im);
    if let Some(m) = mask {
        out = tape.mul_rows(out, m);
    }
    let out = tape.reshape(out, &[2, batch, hp, wp, d]);
    let field = tape.idft2_real(out);
    tape.reshape(field, &[rows, d])
}

/// Gathers `k×k` periodic neighbourhoods of `rows` (global row indices)
/// from a `[B·N, ch]` matrix. `src_pos` maps a global row to its position
/// in `x` (identity when `None`).
fn im2col(
    tape: &mut Tape,
    x: Var,
    rows: &[usize],
    nbr: &[usize],
    k2: usize,
    n: usize,
    ch: usize,
    src_pos: Option<&[usize]>,
) -> Var {
    let mut idx = Vec::with_capacity(rows.len() * k2 * ch);
    for &r in rows {
        let (b, l) = (r / n, r % n);
        for &q in &nbr[l * k2..(l + 1) * k2] {
            let g = b * n + q;
            let src = src_pos.map_or(g, |p| p[g]);
            idx.extend(src * ch..(src + 1) * ch);
        }
    }
    tape.gather(x, idx.into(), &[rows.len(), k2 * ch])
}

/// Router softmax `[B·N, N_r]`.
pub(crate) fn router_probs(tape: &mut Tape, cfg: &ModelConfig, p: &Router<Var>, x: Var, batch: usize) -> Var {
    let k = cfg.router_kernel;
    let inp = if k == 1 {
        x
    } else {
        let n = cfg.tokens();
        let rows: Vec<usize> = (0..batch * n).collect();
        let nbr = neighbors(cfg.token_grid(), k);
        im2col(tape, x, &rows, &nbr, k * k, n, cfg.d_z, None)
    };
    let logits = tape.matmul(inp, p.weight);
    let logits = tape.add_bcast(logits, p.bias);
    tape.softmax_rows(logits)
}

/// Evaluates one expert at the output rows `out_rows` (ascending global
/// indices). Hidden activations are computed only on the union of their
/// neighbourhoods. Returns `[|out_rows|, d]`.
fn expert_at(
    tape: &mut Tape,
    cfg: &ModelConfig,
    e: &Expert<Var>,
    x: Var,
    out_rows: &[usize],
    total: usize,
    nbr: &[usize],
) -> Var {
    let k2 = cfg.expert_kernel * cfg.expert_kernel;
    let n = cfg.tokens();
    let act = cfg.activation.unary();
    let dense = out_rows.len() == total;
    let (hid_rows, pos): (Vec<usize>, Option<Vec<usize>>) = if dense || k2 == 1 {
        (out_rows.to_vec(), None)
    } else {
        let mut mark = vec![false; total];
        for &r in out_rows {
            let (b, l) = (r / n, r % n);
            for &q in &nbr[l * k2..(l + 1) * k2] {
                mark[b * n + q] = true;
            }
        }
        let mut pos = vec![usize::MAX; total];
        let mut hid = Vec::new();
        for (g, m) in mark.iter().enumerate() {
            if *m {
                pos[g] = hid.len();
                hid.push(g);
            }
        }
        (hid, Some(pos))
    };
    let g1 = if k2 == 1 && dense { x } else { im2col(tape, x, &hid_rows, nbr, k2, n, cfg.d_z, None) };
    let h = tape.matmul(g1, e.w1);
    let h = tape.add_bcast(h, e.b1);
    let h = tape.map(h, act);
    let g2 = if k2 == 1 { h } else { im2col(tape, h, out_rows, nbr, k2, n, cfg.d_mlp, pos.as_deref()) };
    let y = tape.matmul(g2, e.w2);
    tape.add_bcast(y, e.b2)
}

/// Shared experts averaged over all tokens plus the selected routed experts
/// weighted by their softmax weights. Unselected experts are never evaluated.
pub(crate) fn moe(
    tape: &mut Tape,
    cfg: &ModelConfig,
    shared: &[Expert<Var>],
    routed: &[Expert<Var>],
    x: Var,
    probs: Var,
    gate: &GateDecision,
) -> Result<(Var, MoeStats)> {
    let d = cfg.d_z;
    let total = tape.shape(x)[0];
    if routed.len() != gate.n_experts() || gate.tokens() != total {
        return Err(Error::contract(format!(
            "gate covers {} tokens over {} experts, layer has {} tokens and {} experts",
            gate.tokens(),
            gate.n_experts(),
            total,
            routed.len()
        )));
    }
    let nbr = neighbors(cfg.token_grid(), cfg.expert_kernel);
    let all: Vec<usize> = (0..total).collect();
    let mut stats = MoeStats::new(routed.len());
    let mut acc: Option<Var> = None;
    for e in shared {
        let y = expert_at(tape, cfg, e, x, &all, total, &nbr);
        stats.shared_rows += total;
        acc = Some(match acc {
            Some(a) => tape.add(a, y),
            None => y,
        });
    }
    if let Some(a) = acc {
        acc = Some(tape.scale(a, 1.0 / shared.len() as f64));
    }
    let n_r = routed.len();
    for (ei, rows) in gate.rows_per_expert().into_iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        stats.routed_rows[ei] += rows.len();
        let y = expert_at(tape, cfg, &routed[ei], x, &rows, total, &nbr);
        let w_idx: Vec<usize> = rows.iter().map(|r| r * n_r + ei).collect();
        let w = tape.gather(probs, w_idx.into(), &[rows.len()]);
        let y = tape.mul_rows(y, w);
        let s_idx: Vec<usize> = rows.iter().flat_map(|r| r * d..(r + 1) * d).collect();
        let y = tape.scatter_add(y, s_idx.into(), &[total, d]);
        acc = Some(match acc {
            Some(a) => tape.add(a, y),
            None => y,
        });
    }
    let out = match acc {
        Some(a) => a,
        None => tape.constant(Tensor::zeros(&[total, d])),
    };
    Ok((out, stats))
}

/// Per-token linear head and depatchify: `[B·N, d]` to `[B, C, H, W]`.
pub(crate) fn decode(tape: &mut Tape, cfg: &ModelConfig, p: &Decoder<Var>, x: Var, batch: usize) -> Var {
    let (c, [h, w], pp) = (cfg.channels, cfg.grid, cfg.patch);
    let [_, wp] = cfg.token_grid();
    let n = cfg.tokens();
    let pl = cfg.patch_len();
    let y = tape.matmul(x, p.weight);
    let y = tape.add_bcast(y, p.bias);
    let mut idx = Vec::with_capacity(batch * c * h * w);
    for b in 0..batch {
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let row = b * n + (i / pp) * wp + j / pp;
                    let col = (ch * pp + i % pp) * pp + j % pp;
                    idx.push(row * pl + col);
                }
            }
        }
    }
    tape.gather(y, Arc::from(idx), &[batch, c, h, w])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neighbourhoods_wrap_periodically() {
        let nbr = neighbors([3, 4], 3);
        // token (0, 0): rows -1..=1 wrap to 2, 0, 1; cols to 3, 0, 1
        assert_eq!(&nbr[..9], &[11, 8, 9, 3, 0, 1, 7, 4, 5]);
        assert_eq!(neighbors([2, 2], 1), vec![0, 1, 2, 3]);
    }

    #[test]
    fn mode_mask_keeps_low_frequencies() {
        let m = mode_mask([8, 8], 1, 1);
        let kept: Vec<usize> = (0..64).filter(|&i| m.data()[i] == 1.0).collect();
        assert_eq!(kept, vec![0, 1, 7, 8, 9, 15, 56, 57, 63]);
    }
}
