pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod inference;
pub mod losses;
pub mod model;
pub mod params;
pub mod pgm;
pub mod weak;
pub mod synth;
pub mod tape;
pub mod train;
pub mod vocab;
