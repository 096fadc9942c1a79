//! Command-line front end for the latent-variable model library: flat
//! key-value run configs, named presets, a versioned binary checkpoint
//! format, and the train / eval / generate / export-latents operations
//! over run directories.

pub mod checkpoint;
pub mod config;
pub mod pgm;
pub mod presets;
pub mod runner;
