use thiserror::Error;

/// Errors raised across the editing pipeline.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid shape {0:?}: {1}")]
    InvalidShape(Vec<usize>, String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("degenerate vector (norm {0:e} below threshold)")]
    Degenerate(f64),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("ordering error: expected {0} < {1}")]
    Ordering(usize, usize),
    #[error("infeasible step plan: T_ddim={t_ddim} exceeds t0={t0}")]
    InfeasiblePlan { t_ddim: usize, t0: usize },
    #[error("label {label} out of range for {num_classes} classes")]
    Label { label: usize, num_classes: usize },
    #[error("classifier-free guidance requires a conditional label, got null")]
    Guidance,
    #[error("invalid DDIM variance: sigma^2={sigma_sq:e} exceeds 1-alpha_bar={budget:e}")]
    InvalidVariance { sigma_sq: f64, budget: f64 },
    #[error("non-finite value encountered: {0}")]
    NonFinite(String),
    #[error("training diverged: {0}")]
    Divergence(String),
    #[error("calibration failed: {0}")]
    Calibration(String),
    #[error("SSIM window {window} larger than image extent {extent}")]
    Window { window: usize, extent: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("stale artifact: {0}")]
    Stale(String),
    #[error("malformed file: {0}")]
    Format(String),
    #[error("empty input: {0}")]
    EmptyInput(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
