//! Self-verification: gradient checks and oracle equivalences.

mod gradcheck;
pub mod oracles;
mod selftest;

pub use gradcheck::{gradcheck_items, run_gradcheck, GradcheckItem, GRADCHECK_STEP, GRADCHECK_TOLERANCE};
pub use selftest::{
    c3k2_matches_c2f, conv2d_matches_oracle, matmul_matches_oracle, maxpool_matches_oracle, nms_matches_oracle,
    param_formula_matches_enumeration, run_selftest, softmax_matches_oracle, sppf_matches_spp, PropertyResult,
    SelftestOptions, C3K2_CASES, KERNEL_CASES, SOFTMAX_TOLERANCE, SPP_CASES,
};
