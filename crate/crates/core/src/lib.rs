//! Multi-head linear attention (MHLA) kernels with their reference oracles,
//! a chunkwise causal engine, analytic gradients, expressivity diagnostics
//! and a throughput harness.
//!
//! Everything runs on the CPU over dense row-major matrices. Kernels are
//! generic over `f32`/`f64`; oracles, gradients and diagnostics use `f64`.

pub mod attention;
pub mod bench;
pub mod causal;
pub mod diagnostics;
pub mod error;
pub mod fixture;
pub mod grad;
pub mod mixing;
pub mod partition;
pub mod svd;
pub mod tensor;
pub mod verify;

pub use attention::{
    linear_attention, mhla_forward, mhla_token_expansion, softmax_attention, AttentionConfig,
};
pub use causal::{
    chunkwise_causal_forward, naive_causal_oracle, stream_init, stream_step, StreamState,
};
pub use diagnostics::{
    collapse_report, mean_row_entropy, numerical_rank, DiagnosticsReport, Mechanism, TolPolicy,
};
pub use error::{MhlaError, Result};
pub use fixture::{load_fixture, save_fixture, Fixture, FixtureError};
pub use grad::{
    distill_coefficients, finite_diff_grad, mhla_apply, mhla_backward, GradientBundle, TrainRecord,
};
pub use mixing::{
    causal_mask, clip_coefficients, compute_local_summaries, locality_init, mix_summaries,
    CoefficientMatrix, SummaryStack,
};
pub use partition::{make_partition, BlockPartition, Layout};
pub use tensor::{apply_feature_map, gemm, row_softmax, DenseMatrix, FeatureMap, Matrix, Real};
