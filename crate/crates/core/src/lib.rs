pub mod cellgraph;
pub mod config;
pub mod costmodel;
pub mod data;
pub mod error;
pub mod opset;
pub mod optim;
pub mod oracle;
pub mod projection;
pub mod scalar;
pub mod search;
pub mod tensor;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ArchParamsF32 = cellgraph::ArchParams<f32>;
pub type ArchParamsF64 = cellgraph::ArchParams<f64>;
pub type ProjectionResultF32 = projection::ProjectionResult<f32>;
pub type ProjectionResultF64 = projection::ProjectionResult<f64>;
