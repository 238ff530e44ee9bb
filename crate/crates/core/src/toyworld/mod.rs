//! Procedural toy faces with an (identity, emotion) factorization, the
//! evaluators trained on them, and image quality metrics.

mod dataset;
mod metrics;
mod oracle;
mod render;

pub use dataset::Dataset;
pub use metrics::{
    csim, format_psnr, mean_psnr, mse, psnr, psnr_from_mse, ssim, MetricsRow, SsimConfig,
};
pub use oracle::{
    identity_groups, sample_pair, EmbedderConfig, EmotionOracle, IdentityEmbedder, OracleConfig,
    EMBEDDER_MIN_AUC, NORM_EPS, ORACLE_MIN_ACCURACY,
};
pub use render::{
    emotion_index, emotion_mask, emotion_name, render_face, FaceSpec, EMOTIONS, IDENTITY_DIM,
    MIN_SIZE, NUM_EMOTIONS,
};
