pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod energy;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod network;
pub mod ops;
pub mod ssm;
pub mod tasb;
pub mod tensor;
pub mod tokenizer;
pub mod training;
pub mod trajectory;

pub use error::{Error, Result};
pub use tensor::{Point2D, Scalar, Tensor};
