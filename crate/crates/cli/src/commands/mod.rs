pub mod datagen;
pub mod diagnose;
pub mod eval;
pub mod gradcheck;
pub mod sample;
pub mod train;
