pub mod bench;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod loss;
pub mod model;
pub mod ops;
pub mod params;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use ops::Mode;
pub use params::{ParamId, ParamSet, Parameter};
pub use tape::{Tape, Var};
pub use tensor::Tensor2D;
