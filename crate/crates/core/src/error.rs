//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// Invalid user-supplied configuration (bad grid size, malformed spec, ...).
    #[error("configuration error: {0}")]
    Config(String),

    /// An internal contract between modules was violated (length mismatch,
    /// anchor mismatch, ...). Indicates a caller bug, not bad physics.
    #[error("contract violation: {0}")]
    Contract(String),

    /// The classical field blew up during propagation.
    #[error("propagation diverged at step {step}: max |U| = {max_abs:.3e}")]
    Divergence { step: usize, max_abs: f64 },

    /// Relaxation did not reach a stationary profile within the distance budget.
    #[error(
        "relaxation did not converge within distance {distance}: \
         last shape change {shape_change:.3e}{}",
        .drift.map(|d| format!(", separation drift {d:.3e} per unit z")).unwrap_or_default()
    )]
    RelaxationFailure {
        distance: f64,
        shape_change: f64,
        drift: Option<f64>,
    },

    /// The number of pulses changed (merger or decay) while a bound state was
    /// expected to persist.
    #[error("bound state unstable at z = {z}: peak count changed from {expected} to {found}")]
    BoundStateInstability {
        expected: usize,
        found: usize,
        z: f64,
    },

    /// Peak detection found nothing above threshold.
    #[error("no solitons detected in field")]
    NoSolitons,

    /// Pulse tails exceed the allowed fraction of the peak at the window edge.
    #[error("time window too small: edge amplitude is {edge_fraction:.3e} of peak (limit {limit:.1e})")]
    WindowTooSmall { edge_fraction: f64, limit: f64 },

    /// Normally-ordered variance is non-positive, so the normally-ordered
    /// denominator of the correlation coefficient is undefined.
    #[error("ordering ambiguity: normally-ordered variance non-positive for slots {slot_i} and {slot_j}")]
    OrderingAmbiguity { slot_i: usize, slot_j: usize },

    /// The dense oracle was asked for a grid larger than its cost guard.
    #[error("dense oracle cost guard: n_points = {n_points} exceeds limit {limit} (override to force)")]
    CostGuard { n_points: usize, limit: usize },

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("metadata error: {0}")]
    Json(#[from] serde_json::Error),
}
