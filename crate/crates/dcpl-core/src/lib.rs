pub mod error;
pub mod geometry;
pub mod fft;
pub mod synthesis;
pub mod cutoffs;
pub mod survey;
pub mod pruning;
pub mod highlow;
pub mod envelope;
pub mod decoupling;
