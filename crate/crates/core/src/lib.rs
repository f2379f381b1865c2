pub mod baselines;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod losses;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod theory;
pub mod training;
pub mod types;
