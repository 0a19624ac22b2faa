//! Synthetic PDE families on the periodic unit square.
//!
//! Heat and advection are evolved exactly in Fourier space; the
//! reaction-diffusion family uses explicit finite differences for the
//! diffusion term and the closed-form flow of `u' = u - u^3` for the
//! reaction term, one substep at a time.

use std::f64::consts::PI;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::trajectory::{SetMeta, TrajDims, TrajectorySet};
use crate::error::{Error, Result};
use crate::tensor::{dft2_forward, dft2_inverse, ComplexSpectrum, Tensor};

/// Highest wavenumber magnitude present in generated initial fields.
pub const MAX_INIT_MODE: usize = 4;

/// Largest reaction-diffusion substep.
pub const MAX_SUBSTEP: f64 = 0.01;

/// Explicit diffusion stability bound on `D·dt/Δx²`.
pub const DIFFUSION_STABILITY: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Heat,
    Advection,
    ReactionDiffusion,
}

impl Family {
    pub fn name(self) -> &'static str {
        match self {
            Family::Heat => "heat",
            Family::Advection => "advection",
            Family::ReactionDiffusion => "reaction_diffusion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "heat" => Some(Family::Heat),
            "advection" => Some(Family::Advection),
            "reaction_diffusion" | "reaction-diffusion" => Some(Family::ReactionDiffusion),
            _ => None,
        }
    }
}

/// Generation parameters for one synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyParams {
    pub family: Family,
    /// Heat diffusivity.
    pub nu: f64,
    /// Advection velocity `(c_x, c_y)`; `x` runs along rows.
    pub velocity: [f64; 2],
    /// Reaction-diffusion diffusivity.
    pub diffusivity: f64,
    /// Whether the `u - u^3` reaction term is active.
    pub reaction: bool,
    /// Time between recorded frames.
    pub dt: f64,
    /// Grid `(H0, W0)`.
    pub grid: [usize; 2],
    pub t_total: usize,
    pub n_trajectories: usize,
    pub seed: u64,
}

impl FamilyParams {
    /// Parameters with the defaults used by the desk-scale mixture.
    pub fn preset(family: Family, n_trajectories: usize, seed: u64) -> Self {
        FamilyParams {
            family,
            nu: 0.002,
            velocity: [0.5, 0.25],
            diffusivity: 0.001,
            reaction: true,
            dt: 0.05,
            grid: [32, 32],
            t_total: 24,
            n_trajectories,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config(format!("dt must be positive, got {}", self.dt)));
        }
        if self.t_total < 12 {
            return Err(Error::config(format!("t_total must be at least 12, got {}", self.t_total)));
        }
        if self.grid[0] < 2 || self.grid[1] < 2 {
            return Err(Error::config("grid extents must be at least 2"));
        }
        if self.n_trajectories == 0 {
            return Err(Error::config("n_trajectories must be positive"));
        }
        match self.family {
            Family::Heat if !(self.nu >= 0.0) => Err(Error::config("heat nu must be >= 0")),
            Family::Advection if !self.velocity.iter().all(|v| v.is_finite()) => {
                Err(Error::config("advection velocity must be finite"))
            }
            Family::ReactionDiffusion => {
                if !(self.diffusivity >= 0.0) {
                    return Err(Error::config("diffusivity must be >= 0"));
                }
                let r = self.diffusion_number();
                if r > DIFFUSION_STABILITY {
                    return Err(Error::config(format!(
                        "explicit diffusion unstable: D·dt/Δx² = {r} exceeds {DIFFUSION_STABILITY}"
                    )));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// `D·dt/Δx²` on the finer of the two grid axes.
    pub fn diffusion_number(&self) -> f64 {
        let n = self.grid[0].max(self.grid[1]) as f64;
        self.diffusivity * self.dt * n * n
    }
}

/// Signed wavenumber of DFT bin `k` on an axis of length `n`.
pub fn signed_freq(k: usize, n: usize) -> f64 {
    if 2 * k > n {
        k as f64 - n as f64
    } else {
        k as f64
    }
}

/// Band-limited Gaussian random field with unit RMS: random cosine/sine
/// pairs over wavevectors with `|k| <= MAX_INIT_MODE` (clamped to what
/// the grid resolves without aliasing), amplitudes decaying like `1/(1+|k|)`.
pub fn random_initial_field(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Tensor {
    let kmax = MAX_INIT_MODE.min((h.min(w) - 1) / 2) as i64;
    let mut modes = Vec::new();
    for k1 in -kmax..=kmax {
        for k2 in -kmax..=kmax {
            let upper_half = k1 > 0 || (k1 == 0 && k2 > 0);
            if upper_half && k1 * k1 + k2 * k2 <= kmax * kmax {
                let decay = 1.0 / (1.0 + ((k1 * k1 + k2 * k2) as f64).sqrt());
                let a: f64 = StandardNormal.sample(rng);
                let b: f64 = StandardNormal.sample(rng);
                modes.push((k1 as f64, k2 as f64, a * decay, b * decay));
            }
        }
    }
    let z: f64 = StandardNormal.sample(rng);
    let dc = 0.1 * z;
    let power: f64 = dc * dc + modes.iter().map(|m| 0.5 * (m.2 * m.2 + m.3 * m.3)).sum::<f64>();
    let norm = if power > 0.0 { 1.0 / power.sqrt() } else { 1.0 };
    Tensor::from_fn(&[h, w, 1], |i| {
        let x = (i / w) as f64 / h as f64;
        let y = (i % w) as f64 / w as f64;
        let mut v = dc;
        for &(k1, k2, a, b) in &modes {
            let ph = 2.0 * PI * (k1 * x + k2 * y);
            v += a * ph.cos() + b * ph.sin();
        }
        v * norm
    })
}

fn multiply_spectrum(u0: &Tensor, factor: impl Fn(usize, usize, usize, usize) -> (f64, f64)) -> Result<Tensor> {
    let spec = dft2_forward(u0)?;
    let (h, w, c) = spec.shape();
    let mut re = spec.real_part.clone();
    let mut im = spec.imag_part.clone();
    for k1 in 0..h {
        for k2 in 0..w {
            let (fr, fi) = factor(k1, k2, h, w);
            for ch in 0..c {
                let i = (k1 * w + k2) * c + ch;
                let (a, b) = (re.data()[i], im.data()[i]);
                re.data_mut()[i] = a * fr - b * fi;
                im.data_mut()[i] = a * fi + b * fr;
            }
        }
    }
    dft2_inverse(&ComplexSpectrum::new(re, im)?)
}

/// Exact heat-equation evolution `∂u/∂t = ν∆u` of a periodic field `[H, W, C]`.
pub fn heat_evolve(u0: &Tensor, nu: f64, t: f64) -> Result<Tensor> {
    if nu == 0.0 || t == 0.0 {
        return Ok(u0.clone());
    }
    multiply_spectrum(u0, |k1, k2, h, w| {
        let (a, b) = (signed_freq(k1, h), signed_freq(k2, w));
        ((-nu * 4.0 * PI * PI * (a * a + b * b) * t).exp(), 0.0)
    })
}

/// Exact transport `∂u/∂t + c·∇u = 0` by Fourier phase shift. Nyquist
/// components (which have no signed direction) are left in place.
pub fn advect(u0: &Tensor, velocity: [f64; 2], t: f64) -> Result<Tensor> {
    if t == 0.0 || velocity == [0.0, 0.0] {
        return Ok(u0.clone());
    }
    multiply_spectrum(u0, |k1, k2, h, w| {
        let a = if 2 * k1 == h { 0.0 } else { signed_freq(k1, h) };
        let b = if 2 * k2 == w { 0.0 } else { signed_freq(k2, w) };
        let ph = -2.0 * PI * (a * velocity[0] + b * velocity[1]) * t;
        (ph.cos(), ph.sin())
    })
}

/// Closed-form flow of `u' = u - u^3` over time `tau`.
pub fn reaction_flow(u: f64, tau: f64) -> f64 {
    let e = tau.exp();
    let denom = 1.0 + u * u * (e * e - 1.0);
    u * e / denom.sqrt()
}

/// Advances a `[H, W, C]` field over one frame interval `dt` of
/// `∂u/∂t = D∆u + u - u^3` with `substeps` split steps.
pub fn reaction_diffusion_step(u: &mut [f64], hw: [usize; 2], d: f64, reaction: bool, dt: f64, substeps: usize) {
    let [h, w] = hw;
    let c = u.len() / (h * w);
    let (dx2, dy2) = (1.0 / (h * h) as f64, 1.0 / (w * w) as f64);
    let tau = dt / substeps as f64;
    let mut lap = vec![0.0; u.len()];
    for _ in 0..substeps {
        if d != 0.0 {
            for x in 0..h {
                let (xm, xp) = ((x + h - 1) % h, (x + 1) % h);
                for y in 0..w {
                    let (ym, yp) = ((y + w - 1) % w, (y + 1) % w);
                    for ch in 0..c {
                        let at = |xx: usize, yy: usize| u[(xx * w + yy) * c + ch];
                        let centre = at(x, y);
                        lap[(x * w + y) * c + ch] =
                            (at(xm, y) + at(xp, y) - 2.0 * centre) / dx2 + (at(x, ym) + at(x, yp) - 2.0 * centre) / dy2;
                    }
                }
            }
            for (v, l) in u.iter_mut().zip(&lap) {
                *v += d * tau * l;
            }
        }
        if reaction {
            for v in u.iter_mut() {
                *v = reaction_flow(*v, tau);
            }
        }
    }
}

/// Number of split substeps used per frame interval.
pub fn substeps_for(dt: f64) -> usize {
    ((dt / MAX_SUBSTEP).ceil() as usize).max(1)
}

fn build_set(
    params: &FamilyParams,
    mut frames_of: impl FnMut(&Tensor) -> Result<Vec<Tensor>>,
) -> Result<TrajectorySet> {
    params.validate()?;
    let [h, w] = params.grid;
    let dims = TrajDims { n: params.n_trajectories, t_total: params.t_total, c: 1, h, w };
    let mut data = Vec::with_capacity(dims.len());
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    for _ in 0..params.n_trajectories {
        let u0 = random_initial_field(h, w, &mut rng);
        let frames = frames_of(&u0)?;
        debug_assert_eq!(frames.len(), params.t_total);
        for f in frames {
            data.extend_from_slice(f.data());
        }
    }
    let meta =
        SetMeta { dataset_id: format!("{}-{}", params.family.name(), params.seed), params: Some(params.clone()) };
    TrajectorySet::new(dims, false, data, meta)
}

fn require(params: &FamilyParams, family: Family) -> Result<()> {
    if params.family != family {
        return Err(Error::config(format!("expected {} parameters, got {}", family.name(), params.family.name())));
    }
    Ok(())
}

pub fn gen_heat(params: &FamilyParams) -> Result<TrajectorySet> {
    require(params, Family::Heat)?;
    build_set(params, |u0| (0..params.t_total).map(|f| heat_evolve(u0, params.nu, f as f64 * params.dt)).collect())
}

pub fn gen_advection(params: &FamilyParams) -> Result<TrajectorySet> {
    require(params, Family::Advection)?;
    build_set(params, |u0| (0..params.t_total).map(|f| advect(u0, params.velocity, f as f64 * params.dt)).collect())
}

pub fn gen_reaction_diffusion(params: &FamilyParams) -> Result<TrajectorySet> {
    require(params, Family::ReactionDiffusion)?;
    let substeps = substeps_for(params.dt);
    build_set(params, |u0| {
        let mut u = u0.data().to_vec();
        let mut frames = vec![u0.clone()];
        for _ in 1..params.t_total {
            reaction_diffusion_step(&mut u, params.grid, params.diffusivity, params.reaction, params.dt, substeps);
            frames.push(Tensor::new(u0.shape(), u.clone())?);
        }
        Ok(frames)
    })
}

/// Dispatches on `params.family`.
pub fn generate(params: &FamilyParams) -> Result<TrajectorySet> {
    match params.family {
        Family::Heat => gen_heat(params),
        Family::Advection => gen_advection(params),
        Family::ReactionDiffusion => gen_reaction_diffusion(params),
    }
}
