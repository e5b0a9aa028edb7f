pub mod autodiff;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod layers;
pub mod mi;
pub mod model_io;
mod linalg;
pub mod networks;
pub mod objectives;
pub mod optim;
pub mod runlog;
pub mod seed;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use autodiff::{Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
