pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod features;
pub mod imaging;
pub mod loss;
pub mod masks;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
