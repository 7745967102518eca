use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    /// An argument outside the domain of a math operation.
    #[error("domain error: {0}")]
    Domain(String),

    /// Dimensions of matrices or vectors do not agree.
    #[error("dimension mismatch: {0}")]
    Dimension(String),

    /// A scenario failed validation; every problem found is listed.
    #[error("invalid scenario:\n  - {}", .0.join("\n  - "))]
    Validation(Vec<String>),

    /// The robot came closer than `r_min` to a feature.
    #[error("feature {feature} came within {range:.3e} m of the camera at t = {time:.4} s (r_min = {r_min} m)")]
    FeatureTooClose { feature: usize, range: f64, time: f64, r_min: f64 },

    /// Contract violation by the caller (bad window, wrong observer for a mode, ...).
    #[error("{0}")]
    Contract(String),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}
