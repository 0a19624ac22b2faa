//! Synthetic trajectory generation, preprocessing, mixture sampling and the
//! trajectory file format.

mod dataset;
mod family;
mod preprocess;
mod sampler;
mod trajectory;

pub use dataset::TrainingSet;
pub use family::{
    advect, gen_advection, gen_heat, gen_reaction_diffusion, generate, heat_evolve, random_initial_field,
    reaction_diffusion_step, reaction_flow, signed_freq, substeps_for, Family, FamilyParams, DIFFUSION_STABILITY,
    MAX_INIT_MODE,
};
pub use preprocess::{inject_noise, pad_channels, split_counts, unify_resolution, DEFAULT_NOISE_COEF};
pub use sampler::{BalancedSampler, DatasetExtent, Draw, MixtureEntry, MixtureSpec};
pub(crate) use trajectory::Reader;
pub use trajectory::{
    read_trajectories, write_trajectories, SampleWindow, SetMeta, TrajDims, TrajectorySet, TRAJ_MAGIC, TRAJ_VERSION,
};
