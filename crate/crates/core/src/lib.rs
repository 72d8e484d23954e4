pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod params;
pub mod rng;
pub mod tensor;
pub mod gcn;
pub mod graph;
pub mod temporal;
pub mod cohort;
pub mod metrics;
pub mod model;
pub mod train;
pub mod config;
pub mod sweep;
pub mod pipeline;
pub mod verify;
