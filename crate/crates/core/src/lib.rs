//! Sketch-to-rendering pipeline for school building facades.
pub mod cli;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod imaging;
pub mod metrics;
pub mod pipeline;
pub mod refine;
pub mod retrieval;
pub mod segmenter;
pub mod service;
