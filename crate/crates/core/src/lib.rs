pub mod boxcodec;
pub mod curriculum;
pub mod difficulty;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod grpo;
pub mod io;
pub mod optim;
pub mod policy;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type BBox64 = geometry::BBox<f64>;
pub type BBox32 = geometry::BBox<f32>;
pub type Context64 = policy::Context<f64>;
pub type Context32 = policy::Context<f32>;
pub type Policy64 = policy::PolicyParams<f64>;
pub type Policy32 = policy::PolicyParams<f32>;
pub type GroupRollout64 = grpo::GroupRollout<f64>;
