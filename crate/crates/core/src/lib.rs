pub mod assim;
pub mod codec;
pub mod field;
pub mod reduced;
pub mod rng;
