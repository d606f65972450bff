//! Command-line front end and HTTP service for the graphoscope pipeline.

pub mod args;
pub mod service;
