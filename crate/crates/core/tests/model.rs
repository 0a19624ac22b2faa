use std::f64::consts::PI;

use moepot::model::*;
use moepot::tensor::{Precision, Tape, Tensor};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn double(cfg: ModelConfig) -> ModelConfig {
    ModelConfig { precision: Precision::Double, ..cfg }
}

fn small_cfg() -> ModelConfig {
    double(ModelConfig { d_z: 4, heads: 2, grid: [32, 32], patch: 4, ..ModelConfig::desk() })
}

#[test]
fn patchify_shape_and_constant_average() {
    let cfg = double(ModelConfig { channels: 2, grid: [8, 8], patch: 4, d_z: 6, heads: 2, ..ModelConfig::desk() });
    let mut p = ModelParams::init(&cfg, 0).unwrap().embed;
    let frame = Tensor::full(&[2, 8, 8], 0.75);
    assert_eq!(patchify(&frame, 1, &p, &cfg).unwrap().shape(), &[2, 2, 6]);
    p.kernel = Tensor::full(&[2 * 16, 6], 1.0 / 32.0);
    p.bias = Tensor::zeros(&[6]);
    p.pos_weight = Tensor::zeros(&[3, 2]);
    p.pos_bias = Tensor::zeros(&[2]);
    let z = patchify(&frame, 3, &p, &cfg).unwrap();
    assert!(z.data().iter().all(|v| (v - 0.75).abs() < 1e-14));
    assert!(z.bit_eq(&patchify(&frame, 3, &p, &cfg).unwrap()));
}

#[test]
fn positional_map_depends_on_time() {
    let cfg = double(ModelConfig { grid: [8, 8], ..ModelConfig::desk() });
    let p = ModelParams::init(&cfg, 2).unwrap().embed;
    let frame = Tensor::zeros(&[1, 8, 8]);
    let a = patchify(&frame, 1, &p, &cfg).unwrap();
    let b = patchify(&frame, 2, &p, &cfg).unwrap();
    assert!(a.max_abs_diff(&b) > 0.0);
}

fn select_real(d: usize) -> Tensor {
    let mut w = Tensor::zeros(&[2 * d, d]);
    for i in 0..d {
        w.data_mut()[i * d + i] = 1.0;
    }
    w
}

fn identity_maps(t: usize, d: usize) -> Tensor {
    Tensor::from_fn(&[t, d, d], |i| if (i % (d * d)) / d == i % d { 1.0 } else { 0.0 })
}

#[test]
fn temporal_single_step_identity() {
    let cfg = ModelConfig { t_window: 1, ..small_cfg() };
    let d = cfg.d_z;
    let p = TemporalAggParams {
        time_maps: identity_maps(1, d),
        gamma: Tensor::zeros(&[d]),
        post_weight: select_real(d),
        post_bias: Tensor::zeros(&[d]),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let z = random(&[1, 8, 8, d], &mut rng);
    let out = temporal_aggregate(&z, &p, &cfg).unwrap();
    assert!(out.max_abs_diff(&z.reshape(&[8, 8, d]).unwrap()) < 1e-15);
}

#[test]
fn temporal_half_turn_phases_alternate_sign() {
    let cfg = ModelConfig { t_window: 2, ..small_cfg() };
    let d = cfg.d_z;
    let p = TemporalAggParams {
        time_maps: identity_maps(2, d),
        gamma: Tensor::full(&[d], PI),
        post_weight: select_real(d),
        post_bias: Tensor::zeros(&[d]),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let z = random(&[2, 8, 8, d], &mut rng);
    let out = temporal_aggregate(&z, &p, &cfg).unwrap();
    let n = 64 * d;
    for i in 0..n {
        let want = -z.data()[i] + z.data()[n + i];
        assert!((out.data()[i] - want).abs() < 1e-14);
    }
}

#[test]
fn temporal_aggregation_is_linear() {
    let cfg = ModelConfig { t_window: 3, ..small_cfg() };
    let p = ModelParams::init(&cfg, 5).unwrap().temporal;
    let p = TemporalAggParams { post_bias: Tensor::zeros(&[cfg.d_z]), ..p };
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = random(&[3, 8, 8, cfg.d_z], &mut rng);
    let y = random(&[3, 8, 8, cfg.d_z], &mut rng);
    let combo =
        Tensor::new(x.shape(), x.data().iter().zip(y.data()).map(|(a, b)| 2.0 * a - 0.5 * b).collect()).unwrap();
    let lhs = temporal_aggregate(&combo, &p, &cfg).unwrap();
    let (ax, ay) = (temporal_aggregate(&x, &p, &cfg).unwrap(), temporal_aggregate(&y, &p, &cfg).unwrap());
    for i in 0..lhs.len() {
        assert!((lhs.data()[i] - (2.0 * ax.data()[i] - 0.5 * ay.data()[i])).abs() < 1e-12);
    }
    let bad = random(&[2, 8, 8, cfg.d_z], &mut rng);
    assert!(temporal_aggregate(&bad, &p, &cfg).is_err());
}

fn identity_fourier(cfg: &ModelConfig) -> FourierLayerParams {
    let dh = cfg.head_dim();
    FourierLayerParams {
        w1: identity_maps(cfg.heads, dh),
        b1: Tensor::zeros(&[cfg.d_z]),
        w2: identity_maps(cfg.heads, dh),
        b2: Tensor::zeros(&[cfg.d_z]),
    }
}

#[test]
fn fourier_identity_and_zero() {
    let cfg = ModelConfig { activation: Activation::Identity, ..small_cfg() };
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = random(&[8, 8, cfg.d_z], &mut rng);
    let p = identity_fourier(&cfg);
    assert!(fourier_mix(&x, &p, &cfg).unwrap().max_abs_diff(&x) < 1e-10);
    let zero = FourierLayerParams { w2: Tensor::zeros(p.w2.shape()), ..p };
    assert_eq!(fourier_mix(&x, &zero, &cfg).unwrap().max_abs(), 0.0);
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

/// Direct-sum DFT, per-head real matrices on each part, real biases on the
/// real part, inverse by direct sum.
fn fourier_oracle(
    x: &Tensor,
    p: &FourierLayerParams,
    h: usize,
    w: usize,
    d: usize,
    heads: usize,
    cap: usize,
) -> Vec<f64> {
    let dh = d / heads;
    let signed = |k: usize, n: usize| if 2 * k > n { k as i64 - n as i64 } else { k as i64 };
    let mut spec = vec![Complex64::new(0.0, 0.0); h * w * d];
    for k1 in 0..h {
        for k2 in 0..w {
            for c in 0..d {
                let mut acc = Complex64::new(0.0, 0.0);
                for a in 0..h {
                    for b in 0..w {
                        let ang = -2.0 * PI * ((k1 * a) as f64 / h as f64 + (k2 * b) as f64 / w as f64);
                        acc += x.data()[(a * w + b) * d + c] * Complex64::from_polar(1.0, ang);
                    }
                }
                spec[(k1 * w + k2) * d + c] = acc;
            }
        }
    }
    let mut mixed = vec![Complex64::new(0.0, 0.0); h * w * d];
    for k in 0..h * w {
        let keep = cap == 0 || (signed(k / w, h).abs() as usize <= cap && signed(k % w, w).abs() as usize <= cap);
        if !keep {
            continue;
        }
        for head in 0..heads {
            let z = &spec[k * d + head * dh..k * d + (head + 1) * dh];
            let mut hid = vec![Complex64::new(0.0, 0.0); dh];
            for j in 0..dh {
                let mut acc = Complex64::new(p.b1.data()[head * dh + j], 0.0);
                for i in 0..dh {
                    acc += z[i] * p.w1.data()[(head * dh + i) * dh + j];
                }
                hid[j] = Complex64::new(gelu(acc.re), gelu(acc.im));
            }
            for j in 0..dh {
                let mut acc = Complex64::new(p.b2.data()[head * dh + j], 0.0);
                for i in 0..dh {
                    acc += hid[i] * p.w2.data()[(head * dh + i) * dh + j];
                }
                mixed[k * d + head * dh + j] = acc;
            }
        }
    }
    let mut out = vec![0.0; h * w * d];
    for a in 0..h {
        for b in 0..w {
            for c in 0..d {
                let mut acc = Complex64::new(0.0, 0.0);
                for k1 in 0..h {
                    for k2 in 0..w {
                        let ang = 2.0 * PI * ((k1 * a) as f64 / h as f64 + (k2 * b) as f64 / w as f64);
                        acc += mixed[(k1 * w + k2) * d + c] * Complex64::from_polar(1.0, ang);
                    }
                }
                out[(a * w + b) * d + c] = acc.re / (h * w) as f64;
            }
        }
    }
    out
}

#[test]
fn fourier_matches_direct_sum_oracle() {
    for cap in [0, 2] {
        let cfg = ModelConfig { d_z: 4, heads: 2, mode_cap: cap, ..small_cfg() };
        let mut rng = ChaCha8Rng::seed_from_u64(6 + cap as u64);
        let x = random(&[8, 8, 4], &mut rng);
        let p = FourierLayerParams {
            w1: random(&[2, 2, 2], &mut rng),
            b1: random(&[4], &mut rng),
            w2: random(&[2, 2, 2], &mut rng),
            b2: random(&[4], &mut rng),
        };
        let got = fourier_mix(&x, &p, &cfg).unwrap();
        let want = fourier_oracle(&x, &p, 8, 8, 4, 2, cap);
        let err = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err < 1e-9, "cap {cap}: max error {err}");
    }
}

#[test]
fn route_examples() {
    let cfg = ModelConfig { n_routed: 4, top_k: 2, ..small_cfg() };
    let d = cfg.d_z;
    let p =
        RouterParams { weight: Tensor::zeros(&[d, 4]), bias: Tensor::new(&[4], vec![2.0, 1.0, 0.0, -1.0]).unwrap() };
    let x = Tensor::zeros(&[8, 8, d]);
    let g = route(&x, &p, &cfg).unwrap();
    assert_eq!(g.tokens(), 64);
    let want = [0.6439, 0.2369, 0.0871, 0.0321];
    for t in 0..64 {
        assert!(g.weights(t).iter().zip(want).all(|(a, b)| (a - b).abs() < 5e-5));
        assert!((g.weights(t).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(g.selected(t), &[(0, g.weights(t)[0]), (1, g.weights(t)[1])]);
    }
    let shifted = RouterParams { bias: p.bias.map(|v| v + 3.0), ..p.clone() };
    let h = route(&x, &shifted, &cfg).unwrap();
    for t in 0..64 {
        assert_eq!(h.selected(t).iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 1]);
        assert!(h.weights(t).iter().zip(g.weights(t)).all(|(a, b)| (a - b).abs() < 1e-14));
    }
}

fn identity_expert(d: usize) -> ExpertParams {
    ExpertParams {
        w1: identity_maps(1, d).reshape(&[d, d]).unwrap(),
        b1: Tensor::zeros(&[d]),
        w2: identity_maps(1, d).reshape(&[d, d]).unwrap(),
        b2: Tensor::zeros(&[d]),
    }
}

fn constant_expert(cfg: &ModelConfig, value: f64) -> ExpertParams {
    let k2 = cfg.expert_kernel * cfg.expert_kernel;
    ExpertParams {
        w1: Tensor::zeros(&[k2 * cfg.d_z, cfg.d_mlp]),
        b1: Tensor::zeros(&[cfg.d_mlp]),
        w2: Tensor::zeros(&[k2 * cfg.d_mlp, cfg.d_z]),
        b2: Tensor::full(&[cfg.d_z], value),
    }
}

#[test]
fn identity_shared_expert_with_zero_routed_weights() {
    let cfg = ModelConfig {
        expert_kernel: 1,
        activation: Activation::Identity,
        n_shared: 1,
        n_routed: 4,
        top_k: 2,
        ..small_cfg()
    };
    let d = cfg.d_z;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = random(&[8, 8, d], &mut rng);
    let routed: Vec<_> = (0..4).map(|_| ExpertParams { w1: random(&[d, d], &mut rng), ..identity_expert(d) }).collect();
    let gate = GateDecision::from_probs(0, &vec![0.0; 64 * 4], 4, 2).unwrap();
    let (y, stats) = moe_combine(&x, &[identity_expert(d)], &routed, &gate, &cfg).unwrap();
    assert!(y.max_abs_diff(&x) < 1e-15);
    assert_eq!(stats.routed_total(), 64 * 2);
}

#[test]
fn weighted_sum_of_constant_experts() {
    let cfg = ModelConfig { n_shared: 1, n_routed: 3, top_k: 2, ..small_cfg() };
    let x = Tensor::zeros(&[8, 8, cfg.d_z]);
    let shared = [constant_expert(&cfg, 1.5)];
    let routed = [constant_expert(&cfg, 10.0), constant_expert(&cfg, 100.0), constant_expert(&cfg, -7.0)];
    let probs: Vec<f64> = (0..64).flat_map(|_| [0.2, 0.6, 0.2]).collect();
    let gate = GateDecision::from_probs(0, &probs, 3, 2).unwrap();
    let (y, _) = moe_combine(&x, &shared, &routed, &gate, &cfg).unwrap();
    // selection: expert 1 (0.6) then expert 0 (0.2, lower index wins the tie)
    let want = 1.5 + 0.6 * 100.0 + 0.2 * 10.0;
    assert!(y.data().iter().all(|v| (v - want).abs() < 1e-12));
}

/// Dense evaluation of every routed expert by explicit periodic convolution.
fn dense_moe_oracle(x: &Tensor, routed: &[ExpertParams], probs: &[f64], cfg: &ModelConfig) -> Vec<f64> {
    let [h, w] = cfg.token_grid();
    let (d, m, k) = (cfg.d_z, cfg.d_mlp, cfg.expert_kernel as isize);
    let r = k / 2;
    let n_r = routed.len();
    let conv = |inp: &[f64], ch_in: usize, wt: &Tensor, bias: &Tensor, ch_out: usize| -> Vec<f64> {
        let mut out = vec![0.0; h * w * ch_out];
        for i in 0..h as isize {
            for j in 0..w as isize {
                for o in 0..ch_out {
                    let mut acc = bias.data()[o];
                    let mut tap = 0;
                    for di in -r..=r {
                        for dj in -r..=r {
                            let a = (i + di).rem_euclid(h as isize) as usize;
                            let b = (j + dj).rem_euclid(w as isize) as usize;
                            for c in 0..ch_in {
                                acc += inp[(a * w + b) * ch_in + c] * wt.data()[(tap * ch_in + c) * ch_out + o];
                            }
                            tap += 1;
                        }
                    }
                    out[(i as usize * w + j as usize) * ch_out + o] = acc;
                }
            }
        }
        out
    };
    let mut total = vec![0.0; h * w * d];
    for (e, ex) in routed.iter().enumerate() {
        let hid: Vec<f64> = conv(x.data(), d, &ex.w1, &ex.b1, m).into_iter().map(gelu).collect();
        let y = conv(&hid, m, &ex.w2, &ex.b2, d);
        for t in 0..h * w {
            for c in 0..d {
                total[t * d + c] += probs[t * n_r + e] * y[t * d + c];
            }
        }
    }
    total
}

#[test]
fn all_experts_selected_matches_dense_oracle() {
    let cfg = ModelConfig { n_shared: 0, n_routed: 3, top_k: 3, d_mlp: 5, ..small_cfg() };
    let p = ModelParams::init(&cfg, 9).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = random(&[8, 8, cfg.d_z], &mut rng);
    let routed: Vec<ExpertParams> = p.blocks[0]
        .routed
        .iter()
        .map(|e| ExpertParams { b1: e.b1.map(|_| 0.1), b2: e.b2.map(|_| -0.2), ..e.clone() })
        .collect();
    let probs: Vec<f64> = (0..64)
        .flat_map(|_| {
            let l: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
            softmax(&l)
        })
        .collect();
    let gate = GateDecision::from_probs(0, &probs, 3, 3).unwrap();
    let (y, stats) = moe_combine(&x, &[], &routed, &gate, &cfg).unwrap();
    let want = dense_moe_oracle(&x, &routed, &probs, &cfg);
    let err = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
    assert_eq!(stats.routed_rows, vec![64, 64, 64]);
}

#[test]
fn sparse_routing_matches_masked_dense_oracle() {
    let cfg = ModelConfig { n_shared: 0, n_routed: 4, top_k: 2, d_mlp: 3, ..small_cfg() };
    let p = ModelParams::init(&cfg, 11).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let x = random(&[8, 8, cfg.d_z], &mut rng);
    let probs: Vec<f64> =
        (0..64).flat_map(|_| softmax(&(0..4).map(|_| rng.random_range(-2.0..2.0)).collect::<Vec<_>>())).collect();
    let gate = GateDecision::from_probs(0, &probs, 4, 2).unwrap();
    let mut masked = vec![0.0; probs.len()];
    for t in 0..64 {
        for &(e, wgt) in gate.selected(t) {
            masked[t * 4 + e] = wgt;
        }
    }
    let (y, stats) = moe_combine(&x, &[], &p.blocks[0].routed, &gate, &cfg).unwrap();
    let want = dense_moe_oracle(&x, &p.blocks[0].routed, &masked, &cfg);
    let err = y.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    assert!(err < 1e-12, "{err}");
    assert_eq!(stats.routed_total(), 64 * 2);
}

#[test]
fn decode_zero_shape_and_right_inverse() {
    let cfg = ModelConfig { grid: [8, 8], ..small_cfg() };
    let d = cfg.d_z;
    let zero = DecoderParams { weight: Tensor::zeros(&[d, 16]), bias: Tensor::zeros(&[16]) };
    let f = decode(&Tensor::zeros(&[2, 2, d]), &zero, &cfg).unwrap();
    assert_eq!(f.shape(), &[1, 8, 8]);
    assert_eq!(f.max_abs(), 0.0);
    // averaging patchify followed by a head summing channels with weight 1/d
    let embed = PatchEmbedParams {
        kernel: Tensor::full(&[16, d], 1.0 / 16.0),
        bias: Tensor::zeros(&[d]),
        pos_weight: Tensor::zeros(&[3, 1]),
        pos_bias: Tensor::zeros(&[1]),
    };
    let head = DecoderParams { weight: Tensor::full(&[d, 16], 1.0 / d as f64), bias: Tensor::zeros(&[16]) };
    let a = -1.25;
    let z = patchify(&Tensor::full(&[1, 8, 8], a), 1, &embed, &cfg).unwrap();
    let back = decode(&z, &head, &cfg).unwrap();
    assert!(back.data().iter().all(|v| (v - a).abs() < 1e-14));
}

fn window(cfg: &ModelConfig, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    random(&[cfg.t_window, cfg.channels, cfg.grid[0], cfg.grid[1]], &mut rng)
}

#[test]
fn forward_shape_and_determinism() {
    let cfg = ModelConfig::desk();
    let p = ModelParams::init(&cfg, 3).unwrap();
    let x = window(&cfg, 1);
    let (a, ga) = forward(&x, &p, &cfg).unwrap();
    let (b, gb) = forward(&x, &p, &cfg).unwrap();
    assert_eq!(a.shape(), &[1, 32, 32]);
    assert!(a.bit_eq(&b));
    assert_eq!(ga, gb);
    assert_eq!(ga.len(), cfg.n_blocks);
    assert!(ga.iter().all(|g| g.tokens() == 64));
    assert!(forward(&Tensor::zeros(&[3, 1, 32, 32]), &p, &cfg).is_err());
}

#[test]
fn batched_forward_matches_per_sample() {
    let cfg = double(ModelConfig { grid: [16, 16], ..ModelConfig::desk() });
    let p = ModelParams::init(&cfg, 4).unwrap();
    let (x0, x1) = (window(&cfg, 2), window(&cfg, 3));
    let (both, gates) = forward_batch(&[&x0, &x1], &p, &cfg).unwrap();
    let (y1, g1) = forward(&x1, &p, &cfg).unwrap();
    let n = 256;
    for i in 0..n {
        assert!((both.data()[n + i] - y1.data()[i]).abs() < 1e-12);
    }
    assert!((gates[1].weights(16 + 5)[2] - g1[1].weights(5)[2]).abs() < 1e-12);
}

#[test]
fn relabelling_routed_experts_preserves_predictions() {
    let cfg = double(ModelConfig::desk());
    let p = ModelParams::init(&cfg, 7).unwrap();
    let mut q = p.clone();
    let (i, j) = (1, 5);
    for b in q.blocks.iter_mut() {
        b.routed.swap(i, j);
        let n_r = cfg.n_routed;
        let w = b.router.weight.data_mut();
        for row in w.chunks_exact_mut(n_r) {
            row.swap(i, j);
        }
        b.router.bias.data_mut().swap(i, j);
    }
    let x = window(&cfg, 5);
    let (a, _) = forward(&x, &p, &cfg).unwrap();
    let (b, _) = forward(&x, &q, &cfg).unwrap();
    assert!(a.max_abs_diff(&b) < 1e-12, "{}", a.max_abs_diff(&b));
}

#[test]
fn routed_evaluations_are_k_per_token() {
    let cfg = ModelConfig::desk();
    let p = ModelParams::init(&cfg, 8).unwrap();
    let mut tape = Tape::new(cfg.precision);
    let vars = p.bind(&mut tape, |_| false);
    let x = tape.constant(moepot::model::stack(&[&window(&cfg, 1), &window(&cfg, 2)]).unwrap());
    let trace = forward_tape(&mut tape, &cfg, &vars, x).unwrap();
    for (st, g) in trace.stats.iter().zip(&trace.gates) {
        assert_eq!(st.routed_total(), g.tokens() * cfg.top_k);
        assert_eq!(st.shared_rows, g.tokens() * cfg.n_shared);
    }
}

#[test]
fn balance_loss_alone_reaches_the_router() {
    let cfg = double(ModelConfig::desk());
    let p = ModelParams::init(&cfg, 9).unwrap();
    let mut tape = Tape::new(cfg.precision);
    let vars = p.bind(&mut tape, |_| true);
    let x = tape.constant(moepot::model::stack(&[&window(&cfg, 4)]).unwrap());
    let trace = forward_tape(&mut tape, &cfg, &vars, x).unwrap();
    let imp = tape.sum_rows(trace.probs[0]);
    let cv = tape.cv_squared(imp);
    let loss = tape.scale(cv, 0.1);
    let grads = tape.backward(loss).unwrap();
    let g = grads.get(vars.blocks[0].router.weight).unwrap();
    assert!(g.max_abs() > 0.0);
}

#[test]
fn prediction_gradient_matches_finite_differences_on_a_sample() {
    let cfg = ModelConfig::gradcheck();
    let p = ModelParams::init(&cfg, 10).unwrap();
    let x = window(&cfg, 6);
    let target = Tensor::from_fn(&[1, 1, 8, 8], |i| (i as f64 * 0.3).sin());
    let loss_of = |params: &ModelParams| -> f64 {
        let (y, _) = forward_batch(&[&x], params, &cfg).unwrap();
        y.data().iter().zip(target.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / 64.0
    };
    let mut tape = Tape::new(cfg.precision);
    let vars = p.bind(&mut tape, |_| true);
    let xv = tape.constant(moepot::model::stack(&[&x]).unwrap());
    let trace = forward_tape(&mut tape, &cfg, &vars, xv).unwrap();
    let t = tape.constant(target.clone());
    let loss = tape.mse(trace.prediction, t);
    let grads = tape.backward(loss).unwrap();
    let var_list: Vec<_> = vars.leaves().into_iter().map(|(n, v)| (n, *v)).collect();
    let h = 1e-5;
    let mut checked = 0;
    for (name, v) in var_list {
        let g = grads.get_or_zero(v);
        for k in (0..g.len()).step_by(7) {
            let mut plus = p.clone();
            let mut minus = p.clone();
            plus.visit_mut(&mut |n, t| {
                if n == name {
                    t.data_mut()[k] += h
                }
            });
            minus.visit_mut(&mut |n, t| {
                if n == name {
                    t.data_mut()[k] -= h
                }
            });
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let a = g.data()[k];
            let err = (a - fd).abs();
            assert!(err < 1e-8 || err / a.abs().max(fd.abs()) < 1e-5, "{name}[{k}]: autodiff {a} vs fd {fd}");
            checked += 1;
        }
    }
    assert!(checked > 100);
}
