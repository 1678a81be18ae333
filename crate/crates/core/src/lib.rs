//! Compositional incremental learning with task vectors.
//!
//! A shared base `θ₀` is grown one classification head per task; each task
//! contributes a displacement `τ_t` (dense, low-rank, or row-scaling) and
//! the deployed model is the weight-space average `θ₀ + Σ w_t τ_t`. The crate
//! provides the parameter containers and pool arithmetic, a small
//! differentiable network, Fisher estimation, the two regularizers and their
//! closed-form gradients, the incremental trainers, and numerical checks of
//! the second-order identities behind them.

pub mod analysis;
pub mod data;
pub mod error;
pub mod fisher;
pub mod io;
pub mod linalg;
pub mod mog;
pub mod nn;
pub mod optim;
pub mod params;
pub mod pool;
pub mod regularizers;
pub mod task_vector;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use fisher::FisherDiagonal;
pub use nn::{Batch, ClassRange, NetSpec, Network};
pub use params::{ParamLayout, ParamVector};
pub use pool::{PoolState, UnlearnMode};
pub use task_vector::{TaskVector, Variant};
pub use trainer::{run_sequence, Algo, RunResult, TrainConfig};
