//! Sparse-to-dense HRTF upsampling in the spherical-harmonic domain.

pub mod baselines;
pub mod error;
pub mod eval;
pub mod grid;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod rng;
pub mod sht;
pub mod synth;
pub mod train;

pub use baselines::{barycentric_upsample, sh_baseline_upsample};
pub use error::{HrtfError, Result};
pub use eval::{evaluate_method, itd_estimate, Method, MetricReport};
pub use grid::{
    make_equiangular_grid, Direction, Ear, GridKind, HrtfSet, SparseMeasurement, SparsityLevel, SphericalGrid,
};
pub use losses::{ild_loss, lsd_loss, ndl_loss, total_loss, LossBreakdown, LossWeights};
pub use model::{upsample, ModelConfig, ModelWeights};
pub use sht::{eval_sh, fit_sh, ShCoefficients, ShFitConfig};
pub use synth::{generate_subject, make_sparse, SynthConfig};
pub use train::{adam_step, train, Checkpoint, TrainConfig, TrainingExample};
