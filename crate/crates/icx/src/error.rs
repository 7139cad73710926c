//! Error type shared by every module in the crate.
//!
//! Fallible APIs return [`Result`]. Variants are grouped by failure domain so
//! the command-line frontend can map them onto distinct process exit codes.

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;

/// All failure modes surfaced by the library.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Two tensors (or a tensor and an index set) had incompatible shapes.
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    /// An operation received NaN or infinite input where finite values are required.
    #[error("non-finite input to {0}")]
    NumericInput(&'static str),

    /// A documented precondition was violated by the caller.
    #[error("contract violation: {0}")]
    Contract(String),

    /// A task exceeds the capacity the model was built for.
    #[error("capacity exceeded: {what} is {got}, limit is {limit}")]
    Capacity {
        what: &'static str,
        got: usize,
        limit: usize,
    },

    /// Bad configuration file, flag value, or inconsistent settings.
    #[error("configuration error: {0}")]
    Config(String),

    /// A data file could not be ingested (missing column, unreadable rows, ...).
    #[error("ingestion error in {path}: {reason}")]
    Ingestion { path: String, reason: String },

    /// Optimization produced a non-finite loss or otherwise diverged.
    #[error("training failed at step {step}: {reason}")]
    Training { step: usize, reason: String },

    /// A metric is undefined for the given inputs.
    #[error("metric error: {0}")]
    Metric(String),

    /// A checkpoint file is malformed, truncated, or from an unknown format version.
    #[error("checkpoint error in {path}: {reason}")]
    Checkpoint { path: String, reason: String },

    /// Underlying I/O failure, annotated with the path involved.
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },

    /// A multi-dataset sweep finished, but some datasets failed.
    #[error("{failed} of {total} datasets failed during sweep")]
    PartialSweep { failed: usize, total: usize },
}

impl Error {
    /// Convenience constructor for I/O errors so call sites keep the path.
    pub fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    /// Process exit code used by the command-line frontend.
    ///
    /// 2 = configuration, 3 = ingestion (including unreadable model or data
    /// files), 4 = training or numeric failure, 5 = partial sweep failure.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 2,
            Error::Ingestion { .. } | Error::Checkpoint { .. } | Error::Io { .. } => 3,
            Error::Dimension { .. }
            | Error::NumericInput(_)
            | Error::Contract(_)
            | Error::Capacity { .. }
            | Error::Training { .. }
            | Error::Metric(_) => 4,
            Error::PartialSweep { .. } => 5,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exit_codes_follow_the_documented_mapping() {
        assert_eq!(Error::Config("x".into()).exit_code(), 2);
        assert_eq!(
            Error::Ingestion {
                path: "a.csv".into(),
                reason: "bad".into()
            }
            .exit_code(),
            3
        );
        assert_eq!(
            Error::Training {
                step: 3,
                reason: "nan".into()
            }
            .exit_code(),
            4
        );
        assert_eq!(Error::NumericInput("softmax").exit_code(), 4);
        assert_eq!(Error::PartialSweep { failed: 1, total: 4 }.exit_code(), 5);
    }

    #[test]
    fn messages_carry_context() {
        let err = Error::Dimension {
            op: "matmul",
            lhs: vec![2, 3],
            rhs: vec![4, 5],
        };
        let text = err.to_string();
        assert!(text.contains("matmul"));
        assert!(text.contains("[2, 3]"));
        assert!(text.contains("[4, 5]"));

        let err = Error::Training {
            step: 17,
            reason: "loss became NaN".into(),
        };
        assert!(err.to_string().contains("step 17"));
    }
}
