pub mod error;
pub mod losses;
pub mod networks;
pub mod optim;
pub mod pipeline;
pub mod raster;
pub mod seg;
pub mod style;
pub mod synth;
pub mod tape;
pub mod trainer;
