pub mod autodiff;
pub mod baselines;
pub mod dataio;
pub mod error;
pub mod flow;
pub mod gradcheck;
pub mod harness;
pub mod losses;
pub mod models;
pub mod optim;
pub mod params;
pub mod rng;
pub mod scm;
pub mod tensor;
pub mod train;

pub use autodiff::{Axis, Tape, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;
