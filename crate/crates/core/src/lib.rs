pub mod bench;
pub mod clustering;
pub mod config;
pub mod dataio;
pub mod encoder;
pub mod error;
pub mod evalmetrics;
pub mod evaluate;
pub mod geometry;
pub mod gtransformer;
pub mod heads;
pub mod losses;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod synth;
pub mod tracks;
pub mod train;
