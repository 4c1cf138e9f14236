//! Joint parameter estimation and model evidence for latent variable models
//! with weighted interacting Langevin particles.

pub mod baselines;
pub mod cli;
pub mod cloud;
pub mod config;
pub mod data;
pub mod engine;
pub mod error;
pub mod evaluation;
pub mod jarzynski;
pub mod model;
pub mod models;
pub mod optim;
pub mod rng;
pub mod selection;
pub mod trajectory;

pub use cloud::ParticleCloud;
pub use nalgebra;
pub use config::RunConfig;
pub use engine::{run_jala_em, FitResult, JalaEm};
pub use error::{Error, Result};
pub use model::LatentModel;
pub use optim::OptimizerSpec;
pub use trajectory::{Trajectory, TrajectoryRow};
