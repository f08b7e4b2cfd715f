//! Tri-branch text-to-{image, depth, mask} diffusion at desk scale.

pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod model;
pub mod nn;
pub mod par;
pub mod scenes;
pub mod sample;
pub mod schedule;
pub mod seed;
pub mod tape;
pub mod tensorio;
pub mod train;

pub use error::{Result, TideError};
