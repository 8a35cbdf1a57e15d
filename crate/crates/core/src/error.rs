use alloc::string::String;

/// Errors raised by the core operations.
#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected}, got {actual}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("label value {value} at ({row}, {col}) is not a hard label in {{-1, 0, 1}}")]
    InvalidLabel { row: usize, col: usize, value: f64 },
    #[error("label matrix is incomplete: entry ({row}, {col}) is unknown")]
    IncompleteLabels { row: usize, col: usize },
    #[error("known-label proportion {0} is outside (0, 1]")]
    InvalidProportion(f64),
    #[error("adjacency row {row} sums to {sum}, expected 1")]
    NotRowStochastic { row: usize, sum: f64 },
    #[error("{requested} categories exceed the archetype catalog of {available}")]
    TooManyCategories { requested: usize, available: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("no category has a positive training label; prototype blending cannot run")]
    NoPrototypes,
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = core::result::Result<T, Error>;

pub(crate) fn check_len(what: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::ShapeMismatch {
            what,
            expected,
            actual,
        })
    }
}
