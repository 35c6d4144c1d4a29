//! Coarse-to-fine rigid point-cloud registration with geometric transformer
//! features, optimal-transport point matching, and local-to-global pose
//! estimation.

pub mod attention;
pub mod benchmark;
pub mod cloud;
pub mod config;
pub mod error;
pub mod features;
pub mod gradcheck;
pub mod linalg;
pub mod matching;
pub mod metrics;
pub mod model;
pub mod params;
pub mod pipeline;
pub mod registration;
pub mod synth;
pub mod tape;
pub mod tensor;
pub mod training;

pub use cloud::{PointCloud, RigidTransform, SuperpointGraph};
pub use error::{Error, Result};
pub use params::{Bindings, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
