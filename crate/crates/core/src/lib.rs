pub mod attention;
pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod processor;
pub mod profiles;
pub mod runconfig;
pub mod supernode;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
