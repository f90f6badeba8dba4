pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod container;
pub mod dataset;
pub mod netpbm;
pub mod visualize;

pub use cli::run;
