pub mod autodiff;
pub mod bench;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod field;
pub mod image;
pub mod io;
pub mod joint;
pub mod ipe;
pub mod motion;
pub mod rng;
pub mod scene;
pub mod so3;
pub mod viewgraph;

pub use error::{Error, Result};
