pub mod correlation;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod geometry;
pub mod io;
pub mod nn;
pub mod scenesim;
pub mod tensor;
pub mod tracker;
pub mod metrics;
pub mod training;
pub mod cli;
