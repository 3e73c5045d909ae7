//! Cross-impact propagator estimation from binned market panels.

pub mod cli;
pub mod config;
pub mod decomp;
pub mod io;
pub mod kernels;
pub mod lagstats;
pub mod linalg;
pub mod panel;
pub mod scaling;
pub mod spectra;
pub mod synth;
