//! Quantitative relighting evaluation: RMSE and SSIM with single color
//! vector correction, the multi-reference protocol, normal consistency and
//! user-study rank aggregation.

pub mod metrics;
pub mod normals;
pub mod protocol;
pub mod ranking;

pub use metrics::{color_correct, color_correct_with, rmse, ssim, ColorCorrection};
pub use normals::{median_angular_error, NormalEstimator, NormalMap};
pub use protocol::{
    eval_protocol, summary_table, EvalRecord, EvalReport, IdentityRelighter, OracleRelighter, PipelineRelighter,
    ProtocolConfig, Relighter,
};
pub use ranking::{aggregate_rankings, RankSummary, RankingResponse};
