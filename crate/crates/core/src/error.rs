use thiserror::Error;

/// Errors raised by the simulator and its analysis tools.
#[derive(Debug, Error)]
pub enum Error {
    /// A configuration relation does not hold; the message names it.
    #[error("inconsistent lengths: {0}")]
    InconsistentLengths(String),

    #[error("dimension error: {0}")]
    Dimension(String),

    #[error("value {value} does not fit in {width} bits")]
    Overflow { value: u64, width: usize },

    #[error("access pattern index {index} outside the usable pool of {usable} rows")]
    IndexOutOfPool { index: usize, usable: usize },

    /// The rank-one inverse update lost positive definiteness.
    #[error("numeric breakdown in covariance update at coordinate {coordinate} (denominator {denominator:e})")]
    NumericBreakdown { coordinate: usize, denominator: f64 },

    #[error("singular pilot design (condition number {condition:e})")]
    SingularDesign { condition: f64 },

    #[error("{users} superposed codewords exceed the exhaustive search cap of {cap}")]
    CapExceeded { users: usize, cap: usize },

    #[error("semidefinite solver did not converge after {iterations} sweeps (gap {gap:e})")]
    NoConvergence { iterations: usize, gap: f64 },

    #[error("config parse error on line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("codebook format error: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
