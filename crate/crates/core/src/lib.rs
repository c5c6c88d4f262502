pub mod bench;
pub mod io;
pub mod mask;
pub mod model;
pub mod render;
pub mod rng;
pub mod tensor;
pub mod train;
pub mod video;
