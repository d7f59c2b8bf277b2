pub mod audio;
pub mod autodiff;
pub mod config;
pub mod dsp;
pub mod metrics;
pub mod model;
pub mod synth;
pub mod train;
pub mod verify;
