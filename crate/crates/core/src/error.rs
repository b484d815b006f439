use std::fmt;

/// Errors produced anywhere in the training / integration / analysis pipeline.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("numeric error{}: {message}", IterCtx(*.iteration))]
    Numeric {
        message: String,
        iteration: Option<usize>,
    },

    #[error("data error: {0}")]
    Data(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("integrity error: {0}")]
    Integrity(String),

    #[error("index {index} out of range (valid: 0..{len})")]
    Range { index: usize, len: usize },

    #[error("contract violation: {0}")]
    Contract(String),

    #[error(
        "cumulative LCA error {cumulative_error_pct:.4}% exceeds the {gate_pct}% gate; worst iterations: {}",
        fmt_worst(worst)
    )]
    LcaGate {
        cumulative_error_pct: f64,
        gate_pct: f64,
        worst: Vec<(usize, f64)>,
    },

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn numeric(message: impl Into<String>, iteration: Option<usize>) -> Self {
        Error::Numeric {
            message: message.into(),
            iteration,
        }
    }

    /// Attach an iteration index to a numeric error that lacks one.
    pub fn at_iteration(self, t: usize) -> Self {
        match self {
            Error::Numeric {
                message,
                iteration: None,
            } => Error::Numeric {
                message,
                iteration: Some(t),
            },
            other => other,
        }
    }
}

struct IterCtx(Option<usize>);

impl fmt::Display for IterCtx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.0 {
            Some(t) => write!(f, " at iteration {t}"),
            None => Ok(()),
        }
    }
}

fn fmt_worst(worst: &[(usize, f64)]) -> String {
    worst
        .iter()
        .map(|(t, e)| format!("t={t} ({e:+.3e})"))
        .collect::<Vec<_>>()
        .join(", ")
}
