use thiserror::Error;

/// Errors produced by the solver crate.
#[derive(Debug, Error)]
pub enum Error {
    /// An input violated a domain precondition (negative rate, non-finite value, ...).
    #[error("domain error: {0}")]
    Domain(String),

    /// The fixed-step integrator produced a non-finite value.
    #[error("integration failed at substep {substep}: non-finite {coord}")]
    Integration { substep: u32, coord: &'static str },

    /// A flow-map result left [0,1]^2 by more than the clamp tolerance.
    #[error("state invariance violated after flow map: {coord} = {value:e}")]
    Invariance { coord: &'static str, value: f64 },

    /// Integration failure annotated with its place in the DP sweep.
    #[error("sweep failed at t={t:?}, node=({i},{j}), u={u}, a=({a_m},{a_h}): {source}")]
    Sweep {
        t: Option<u32>,
        i: usize,
        j: usize,
        u: f64,
        a_m: f64,
        a_h: f64,
        #[source]
        source: Box<Error>,
    },

    /// Two kernels on different grid geometries cannot be compared.
    #[error("grid mismatch: {0}")]
    GridMismatch(String),

    #[error("kernel is empty")]
    EmptyKernel,

    /// Corners mode disagreed with full enumeration on the preflight instance.
    #[error("corners mode failed its equivalence preflight: {0}")]
    CornersUnsound(String),

    #[error("scenario error: {0}")]
    Scenario(String),

    #[error("empty observation series")]
    EmptySeries,

    /// Bounded least-squares solver could not produce an admissible iterate.
    #[error("optimizer failed: {0}")]
    Optimizer(String),

    /// Malformed row in an input CSV, 1-based line number included.
    #[error("csv parse error at line {line}: {msg}")]
    Csv { line: usize, msg: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn domain(msg: impl Into<String>) -> Self {
        Error::Domain(msg.into())
    }
}
