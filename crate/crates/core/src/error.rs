use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("newick parse error at byte {pos}: {msg}")]
    Parse { pos: usize, msg: String },

    #[error("invalid tree: {0}")]
    InvalidTree(String),

    #[error("tip '{tip}' has zero root-to-tip depth")]
    DegenerateDepth { tip: String },

    #[error("unknown ordering method '{0}'")]
    UnknownOrdering(String),

    #[error("neighbour count {nn} out of range for {m} species")]
    NeighborCount { nn: usize, m: usize },

    /// Conditional variance collapsed while building row `row` (species `species`).
    #[error("conditioning failure at position {row} (species {species}): conditional variance {cond_var:e}")]
    Conditioning {
        row: usize,
        species: usize,
        cond_var: f64,
    },

    #[error("dimension mismatch for {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: usize,
        found: usize,
    },

    #[error("matrix is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("invalid data: {0}")]
    InvalidData(String),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("species mismatch between response and tree: {0:?}")]
    SpeciesMismatch(Vec<String>),

    #[error("site identifiers differ between inputs: {0}")]
    SiteMismatch(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error("configuration file: {0}")]
    Toml(#[from] toml::de::Error),
}

pub(crate) fn check_dim(what: &'static str, expected: usize, found: usize) -> Result<()> {
    if expected == found {
        Ok(())
    } else {
        Err(Error::Dimension {
            what,
            expected,
            found,
        })
    }
}
