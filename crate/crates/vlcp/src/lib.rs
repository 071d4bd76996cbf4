pub mod baselines;
pub mod ctp;
pub mod eval;
pub mod harness;
pub mod losses;
pub mod memory;
pub mod model;
pub mod taskstream;
pub mod tensor;
pub mod util;
