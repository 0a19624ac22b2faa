use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Precision, Unary};

/// Pointwise nonlinearity used inside the Fourier MLPs and the experts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Gelu,
    Tanh,
    Silu,
    Identity,
}

impl Activation {
    pub fn unary(self) -> Unary {
        match self {
            Activation::Gelu => Unary::Gelu,
            Activation::Tanh => Unary::Tanh,
            Activation::Silu => Unary::Silu,
            Activation::Identity => Unary::Identity,
        }
    }
}

/// Architecture hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Latent width.
    pub d_z: usize,
    /// Expert hidden width.
    pub d_mlp: usize,
    pub n_blocks: usize,
    /// Fourier heads; must divide `d_z`.
    pub heads: usize,
    pub patch: usize,
    pub n_routed: usize,
    pub n_shared: usize,
    pub top_k: usize,
    /// Balance-loss weight.
    pub w_bal: f64,
    pub channels: usize,
    /// Input window length.
    pub t_window: usize,
    /// Spatial grid `(H, W)`.
    pub grid: [usize; 2],
    pub activation: Activation,
    pub router_kernel: usize,
    pub expert_kernel: usize,
    /// Largest retained signed frequency per axis in the Fourier layer;
    /// 0 keeps every frequency.
    pub mode_cap: usize,
    pub precision: Precision,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_z: 512,
            d_mlp: 512,
            n_blocks: 4,
            heads: 4,
            patch: 8,
            n_routed: 16,
            n_shared: 2,
            top_k: 4,
            w_bal: 0.1,
            channels: 4,
            t_window: 10,
            grid: [128, 128],
            activation: Activation::Gelu,
            router_kernel: 1,
            expert_kernel: 3,
            mode_cap: 0,
            precision: Precision::Single,
        }
    }
}

impl ModelConfig {
    pub fn tiny() -> Self {
        ModelConfig::default()
    }

    pub fn small() -> Self {
        ModelConfig { d_z: 1024, d_mlp: 1024, n_blocks: 6, heads: 8, ..Default::default() }
    }

    pub fn medium() -> Self {
        ModelConfig { d_z: 1024, d_mlp: 2048, n_blocks: 8, heads: 8, ..Default::default() }
    }

    /// Desk-scale configuration that keeps every architectural ratio the
    /// tests rely on while staying trainable on one CPU core.
    pub fn desk() -> Self {
        ModelConfig {
            d_z: 32,
            d_mlp: 32,
            n_blocks: 2,
            heads: 2,
            patch: 4,
            n_routed: 8,
            n_shared: 1,
            top_k: 2,
            channels: 1,
            grid: [32, 32],
            ..Default::default()
        }
    }

    /// Smallest configuration used by gradient checks.
    pub fn gradcheck() -> Self {
        ModelConfig {
            d_z: 8,
            d_mlp: 8,
            n_blocks: 1,
            n_routed: 4,
            top_k: 2,
            grid: [8, 8],
            t_window: 3,
            precision: Precision::Double,
            ..ModelConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "small" => Some(Self::small()),
            "medium" => Some(Self::medium()),
            "desk" => Some(Self::desk()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("d_z", self.d_z),
            ("d_mlp", self.d_mlp),
            ("heads", self.heads),
            ("patch", self.patch),
            ("n_routed", self.n_routed),
            ("top_k", self.top_k),
            ("channels", self.channels),
            ("t_window", self.t_window),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{name} must be positive")));
        }
        if self.d_z % self.heads != 0 {
            return Err(Error::config(format!("heads ({}) must divide d_z ({})", self.heads, self.d_z)));
        }
        if self.grid[0] % self.patch != 0 || self.grid[1] % self.patch != 0 {
            return Err(Error::config(format!("patch {} must divide grid {:?}", self.patch, self.grid)));
        }
        if self.top_k > self.n_routed {
            return Err(Error::config(format!("top_k {} exceeds n_routed {}", self.top_k, self.n_routed)));
        }
        if !(self.w_bal >= 0.0) || !self.w_bal.is_finite() {
            return Err(Error::config("w_bal must be finite and >= 0"));
        }
        for (name, k) in [("router_kernel", self.router_kernel), ("expert_kernel", self.expert_kernel)] {
            if k == 0 || k % 2 == 0 {
                return Err(Error::config(format!("{name} must be odd and positive, got {k}")));
            }
        }
        Ok(())
    }

    /// Token grid `(H/P, W/P)`.
    pub fn token_grid(&self) -> [usize; 2] {
        [self.grid[0] / self.patch, self.grid[1] / self.patch]
    }

    pub fn tokens(&self) -> usize {
        let [a, b] = self.token_grid();
        a * b
    }

    pub fn head_dim(&self) -> usize {
        self.d_z / self.heads
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.patch * self.patch
    }

    /// Fields that must agree between a checkpoint and the data it is run on.
    pub fn describe_conflict(&self, other: &ModelConfig) -> Option<String> {
        if self == other {
            return None;
        }
        let a = serde_json::to_value(self).ok()?;
        let b = serde_json::to_value(other).ok()?;
        let (a, b) = (a.as_object()?, b.as_object()?);
        let diffs: Vec<String> = a
            .iter()
            .filter(|(k, v)| b.get(*k) != Some(v))
            .map(|(k, v)| format!("{k}: {v} vs {}", b.get(k).map(|x| x.to_string()).unwrap_or_default()))
            .collect();
        Some(diffs.join(", "))
    }
}
