//! Mapping failures to process exit codes.

use std::fmt;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitCode {
    Success = 0,
    Failure = 1,
    /// A tensor or structural contract was broken.
    Contract = 2,
    /// A file could not be read, decoded or parsed.
    Io = 3,
}

/// Raised by `trace` when a recorded shape departs from the expected table.
#[derive(Debug, Clone)]
pub struct ShapeDeviation {
    pub stages: Vec<String>,
}

impl fmt::Display for ShapeDeviation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "shape deviation at: {}", self.stages.join(", "))
    }
}

impl std::error::Error for ShapeDeviation {}

/// Classifies the first recognizable cause in the error chain.
pub fn exit_code(err: &anyhow::Error) -> ExitCode {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<rtdetr::Error>() {
            return match e {
                rtdetr::Error::Contract { .. } | rtdetr::Error::WeightShape { .. } => {
                    ExitCode::Contract
                }
                _ => ExitCode::Io,
            };
        }
        if cause.is::<ShapeDeviation>() {
            return ExitCode::Contract;
        }
        if cause.is::<image::ImageError>()
            || cause.is::<std::io::Error>()
            || cause.is::<serde_json::Error>()
        {
            return ExitCode::Io;
        }
    }
    ExitCode::Failure
}

#[cfg(test)]
mod tests {
    use super::*;
    use anyhow::Context;

    #[test]
    fn classifies_through_context() {
        let io: anyhow::Error = std::io::Error::other("gone").into();
        assert_eq!(exit_code(&io.context("reading")), ExitCode::Io);

        let contract = rtdetr::Tensor::<f32>::zeros(vec![2, 3])
            .reshape(vec![4])
            .map_err(anyhow::Error::from)
            .context("reshaping")
            .unwrap_err();
        assert_eq!(exit_code(&contract), ExitCode::Contract);

        let missing: anyhow::Error = rtdetr::Error::MissingWeight("x".into()).into();
        assert_eq!(exit_code(&missing), ExitCode::Io);

        let dev: anyhow::Error = ShapeDeviation {
            stages: vec!["query.memory".into()],
        }
        .into();
        assert_eq!(exit_code(&dev), ExitCode::Contract);
        assert_eq!(exit_code(&anyhow::anyhow!("other")), ExitCode::Failure);
    }
}
