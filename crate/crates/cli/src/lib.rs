//! Command-line entry points and the HTTP service for prompt-conditioned segmentation.

pub mod app;
pub mod dataset;
pub mod service;
pub mod summary;
