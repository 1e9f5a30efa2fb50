pub mod autodiff;
pub mod cli;
pub mod data;
pub mod decoder;
pub mod encoders;
pub mod metrics;
pub mod nn;
pub mod p2sa;
pub mod training;
