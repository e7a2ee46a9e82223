//! Zero-sum linear attention kernels.

mod dump;
pub mod grad;
mod head;
pub mod kernels;
pub mod logits;
pub mod rope;
pub mod scan;
pub mod sm;
pub mod span;
pub mod weights;

pub use dump::{dump_naive_weights, weights_csv};
pub use head::{
    prepare_head, unit_rows, zeros_encoder_forward, zeros_forward_with, zeros_naive_forward, zeros_scan_forward,
    zeros_three_scan_forward, HeadInputs, PreparedHead, ZerosKernel,
};
pub use logits::{deviation_logits, soft_clamp, DeviationLogitParams};
pub use rope::{rope_rotate, RopeTable};
pub use scan::{scan_coefficients, ReadoutCoefficients, ScanState};
pub use sm::{zeros_sm_backward, zeros_sm_forward, zeros_sm_weights};
pub use span::{convex_deviation_feasible, zero_sum_offsets};
pub use weights::{softmax, zero_sum_weights, Gates, ZeroSWeightRow};
#[doc(hidden)]
pub use weights::{zero_sum_weights_with, Residual};
