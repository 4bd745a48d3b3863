pub mod analysis;
pub mod blocks;
pub mod checks;
pub mod model;
pub mod postprocess;
pub mod tensor;
