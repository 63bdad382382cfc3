pub mod autodiff;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gnn;
pub mod interpret;
pub mod model;
pub mod rng;
pub mod search;
pub mod selfcheck;
pub mod train;

pub use error::{Error, Result};
