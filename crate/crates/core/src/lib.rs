//! Dense single-image detector with a twin anchor/anchor-free head,
//! anchor rescue label assignment and channel/scale self-attention.

pub mod assign;
pub mod attention;
pub mod autodiff;
pub mod boxes;
pub mod cli;
pub mod config;
pub mod detector;
pub mod dota;
pub mod eval;
pub mod gradsuite;
pub mod imageio;
pub mod losses;
pub mod pipeline;
pub mod plot;
pub mod synth;
