//! Parameter tree of the network.
//!
//! Every group is generic over its leaf type so the same traversal yields
//! shapes, tensors, and tape variables with identical names and order.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

macro_rules! param_group {
    ($(#[$doc:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$doc])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(String, &T) -> U) -> $name<U> {
                $name { $($field: f(format!("{prefix}.{}", stringify!($field)), &self.$field),)* }
            }

            pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
                $(f(format!("{prefix}.{}", stringify!($field)), &self.$field);)*
            }

            pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
                $(f(format!("{prefix}.{}", stringify!($field)), &mut self.$field);)*
            }
        }
    };
}

param_group!(
    /// Stride-P patch convolution `[C·P·P, d_z]` plus the positional map
    /// from `(x, y, t)` coordinates to `C` channels.
    PatchEmbed { kernel, bias, pos_weight, pos_bias }
);
param_group!(
    /// Per-step maps `[T, d_z, d_z]`, phases `γ`, and the projection of the
    /// `(Re, Im)` concatenation `[2·d_z, d_z]`.
    TemporalAgg { time_maps, gamma, post_weight, post_bias }
);
param_group!(
    /// Learnable scale and shift applied after per-channel normalization.
    Norm { scale, shift }
);
param_group!(
    /// Per-head frequency-domain MLP weights `[h, d_z/h, d_z/h]`; biases `[d_z]`.
    FourierLayer { w1, b1, w2, b2 }
);
param_group!(
    /// Router convolution `[k·k·d_z, N_r]` with bias `[N_r]`.
    Router { weight, bias }
);
param_group!(
    /// Two periodic convolutions `d_z → d_mlp → d_z`.
    Expert { w1, b1, w2, b2 }
);
param_group!(
    /// Per-token linear head `[d_z, C·P·P]`.
    Decoder { weight, bias }
);

#[derive(Debug, Clone, PartialEq)]
pub struct Block<T> {
    pub norm1: Norm<T>,
    pub fourier: FourierLayer<T>,
    pub norm2: Norm<T>,
    pub router: Router<T>,
    pub shared: Vec<Expert<T>>,
    pub routed: Vec<Expert<T>>,
}

impl<T> Block<T> {
    pub fn map<U>(&self, prefix: &str, f: &mut impl FnMut(String, &T) -> U) -> Block<U> {
        Block {
            norm1: self.norm1.map(&format!("{prefix}.norm1"), f),
            fourier: self.fourier.map(&format!("{prefix}.fourier"), f),
            norm2: self.norm2.map(&format!("{prefix}.norm2"), f),
            router: self.router.map(&format!("{prefix}.router"), f),
            shared: self.shared.iter().enumerate().map(|(i, e)| e.map(&format!("{prefix}.shared.{i}"), f)).collect(),
            routed: self.routed.iter().enumerate().map(|(i, e)| e.map(&format!("{prefix}.routed.{i}"), f)).collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        self.norm1.visit(&format!("{prefix}.norm1"), f);
        self.fourier.visit(&format!("{prefix}.fourier"), f);
        self.norm2.visit(&format!("{prefix}.norm2"), f);
        self.router.visit(&format!("{prefix}.router"), f);
        for (i, e) in self.shared.iter().enumerate() {
            e.visit(&format!("{prefix}.shared.{i}"), f);
        }
        for (i, e) in self.routed.iter().enumerate() {
            e.visit(&format!("{prefix}.routed.{i}"), f);
        }
    }

    pub fn visit_mut<'a>(&'a mut self, prefix: &str, f: &mut impl FnMut(String, &'a mut T)) {
        self.norm1.visit_mut(&format!("{prefix}.norm1"), f);
        self.fourier.visit_mut(&format!("{prefix}.fourier"), f);
        self.norm2.visit_mut(&format!("{prefix}.norm2"), f);
        self.router.visit_mut(&format!("{prefix}.router"), f);
        for (i, e) in self.shared.iter_mut().enumerate() {
            e.visit_mut(&format!("{prefix}.shared.{i}"), f);
        }
        for (i, e) in self.routed.iter_mut().enumerate() {
            e.visit_mut(&format!("{prefix}.routed.{i}"), f);
        }
    }
}

/// The whole network, generic over its leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub embed: PatchEmbed<T>,
    pub temporal: TemporalAgg<T>,
    pub blocks: Vec<Block<T>>,
    pub decoder: Decoder<T>,
}

pub type ModelParams = Model<Tensor>;
pub type ModelVars = Model<Var>;
pub type PatchEmbedParams = PatchEmbed<Tensor>;
pub type TemporalAggParams = TemporalAgg<Tensor>;
pub type FourierLayerParams = FourierLayer<Tensor>;
pub type RouterParams = Router<Tensor>;
pub type ExpertParams = Expert<Tensor>;
pub type DecoderParams = Decoder<Tensor>;

/// True for tensors that belong to a router; these are frozen in fine-tuning.
pub fn is_router_tensor(name: &str) -> bool {
    name.contains(".router.")
}

impl<T> Model<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(String, &T) -> U) -> Model<U> {
        Model {
            embed: self.embed.map("embed", f),
            temporal: self.temporal.map("temporal", f),
            blocks: self.blocks.iter().enumerate().map(|(i, b)| b.map(&format!("blocks.{i}"), f)).collect(),
            decoder: self.decoder.map("decoder", f),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        self.embed.visit("embed", f);
        self.temporal.visit("temporal", f);
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&format!("blocks.{i}"), f);
        }
        self.decoder.visit("decoder", f);
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut impl FnMut(String, &'a mut T)) {
        self.embed.visit_mut("embed", f);
        self.temporal.visit_mut("temporal", f);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.visit_mut(&format!("blocks.{i}"), f);
        }
        self.decoder.visit_mut("decoder", f);
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.map(&mut |n, _| out.push(n));
        out
    }

    /// Leaves in traversal order.
    pub fn leaves(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.visit(&mut |n, t| out.push((n, t)));
        out
    }
}

/// How a freshly created tensor is filled.
#[derive(Debug, Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    /// Zero-mean normal with the given standard deviation.
    Normal(f64),
    /// `γ_c = π·c/d` for `c = 0..d`.
    Phases,
    /// Identity per leading slice plus normal noise.
    NearIdentity(f64),
}

fn expert_shapes(cfg: &ModelConfig) -> Expert<(Vec<usize>, Init)> {
    let k2 = cfg.expert_kernel * cfg.expert_kernel;
    let (d, m) = (cfg.d_z, cfg.d_mlp);
    Expert {
        w1: (vec![k2 * d, m], Init::Normal((2.0 / (k2 * d) as f64).sqrt())),
        b1: (vec![m], Init::Zeros),
        w2: (vec![k2 * m, d], Init::Normal((2.0 / (k2 * m) as f64).sqrt())),
        b2: (vec![d], Init::Zeros),
    }
}

fn layout(cfg: &ModelConfig) -> Model<(Vec<usize>, Init)> {
    let (d, t, c) = (cfg.d_z, cfg.t_window, cfg.channels);
    let pl = cfg.patch_len();
    let dh = cfg.head_dim();
    let kr = cfg.router_kernel * cfg.router_kernel;
    let norm = || Norm { scale: (vec![d], Init::Ones), shift: (vec![d], Init::Zeros) };
    let block = || Block {
        norm1: norm(),
        fourier: FourierLayer {
            w1: (vec![cfg.heads, dh, dh], Init::Normal((2.0 / dh as f64).sqrt())),
            b1: (vec![d], Init::Zeros),
            w2: (vec![cfg.heads, dh, dh], Init::Normal((2.0 / dh as f64).sqrt())),
            b2: (vec![d], Init::Zeros),
        },
        norm2: norm(),
        router: Router {
            weight: (vec![kr * d, cfg.n_routed], Init::Normal(0.01)),
            bias: (vec![cfg.n_routed], Init::Zeros),
        },
        shared: (0..cfg.n_shared).map(|_| expert_shapes(cfg)).collect(),
        routed: (0..cfg.n_routed).map(|_| expert_shapes(cfg)).collect(),
    };
    Model {
        embed: PatchEmbed {
            kernel: (vec![pl, d], Init::Normal((1.0 / pl as f64).sqrt())),
            bias: (vec![d], Init::Zeros),
            pos_weight: (vec![3, c], Init::Normal(0.02)),
            pos_bias: (vec![c], Init::Zeros),
        },
        temporal: TemporalAgg {
            time_maps: (vec![t, d, d], Init::NearIdentity(0.02)),
            gamma: (vec![d], Init::Phases),
            post_weight: (vec![2 * d, d], Init::Normal((1.0 / (2 * d) as f64).sqrt())),
            post_bias: (vec![d], Init::Zeros),
        },
        blocks: (0..cfg.n_blocks).map(|_| block()).collect(),
        decoder: Decoder {
            weight: (vec![d, pl], Init::Normal((1.0 / d as f64).sqrt())),
            bias: (vec![pl], Init::Zeros),
        },
    }
}

/// Shapes of every tensor, without allocating them.
pub fn shapes(cfg: &ModelConfig) -> Model<Vec<usize>> {
    layout(cfg).map(&mut |_, (s, _)| s.clone())
}

fn fill(shape: &[usize], init: Init, rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let mut normal = |std: f64| -> Vec<f64> {
        let dist = Normal::new(0.0, std).expect("finite std");
        (0..n).map(|_| dist.sample(rng)).collect()
    };
    let data = match init {
        Init::Zeros => vec![0.0; n],
        Init::Ones => vec![1.0; n],
        Init::Normal(std) => normal(std),
        Init::Phases => (0..n).map(|c| PI * c as f64 / n as f64).collect(),
        Init::NearIdentity(std) => {
            let d = shape[shape.len() - 1];
            let mut v = normal(std);
            for (i, x) in v.iter_mut().enumerate() {
                if (i % (d * d)) / d == i % d {
                    *x += 1.0;
                }
            }
            v
        }
    };
    Tensor::from_parts(shape.to_vec(), data, crate::tensor::Precision::Double)
}

impl ModelParams {
    /// Seeded initialization; tensors are rounded to `cfg.precision`.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // consume one word so distinct seeds never share a stream prefix with
        // other generators seeded from the same integer
        let _: u32 = rng.random();
        Ok(layout(cfg).map(&mut |_, (s, init)| fill(s, *init, &mut rng).to_precision(cfg.precision)))
    }

    /// Tensor lookup by stable name.
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.leaves().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Checks every tensor against the shapes implied by `cfg`.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let want = shapes(cfg);
        if want.blocks.len() != self.blocks.len() {
            return Err(Error::contract("block count does not match config"));
        }
        let want = want.leaves();
        let have = self.leaves();
        if want.len() != have.len() {
            return Err(Error::contract("expert count does not match config"));
        }
        for ((name, w), (_, t)) in want.into_iter().zip(have) {
            if w.as_slice() != t.shape() {
                return Err(Error::contract(format!("{name}: expected shape {w:?}, found {:?}", t.shape())));
            }
        }
        Ok(())
    }

    /// Registers every tensor on the tape. Tensors rejected by `trainable`
    /// become constants (no gradient).
    pub fn bind(&self, tape: &mut Tape, trainable: impl Fn(&str) -> bool) -> ModelVars {
        self.map(&mut |name, t| if trainable(&name) { tape.param(t) } else { tape.constant(t.clone()) })
    }

    pub fn total_len(&self) -> usize {
        self.leaves().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Parameter accounting.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ParamCount {
    pub total: usize,
    pub activated: usize,
    /// Parameters of one expert.
    pub per_expert: usize,
    /// `(N_s + K)·p_e / ((N_s + N_r)·p_e)` per MoE layer.
    pub activated_expert_fraction: f64,
}

pub fn count_params(cfg: &ModelConfig) -> ParamCount {
    let s = shapes(cfg);
    let total: usize = s.leaves().iter().map(|(_, v)| v.iter().product::<usize>()).sum();
    let e = expert_shapes(cfg);
    let per_expert: usize = [e.w1, e.b1, e.w2, e.b2].iter().map(|(v, _)| v.iter().product::<usize>()).sum();
    let inactive = cfg.n_blocks * (cfg.n_routed - cfg.top_k) * per_expert;
    let fraction =
        ((cfg.n_shared + cfg.top_k) * per_expert) as f64 / ((cfg.n_shared + cfg.n_routed) * per_expert) as f64;
    ParamCount { total, activated: total - inactive, per_expert, activated_expert_fraction: fraction }
}
