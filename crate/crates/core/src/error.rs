use thiserror::Error;

#[derive(Debug, Error)]
pub enum Error {
    #[error("scene parse error: {0}")]
    SceneParse(String),

    #[error("facet {facet} is degenerate (area {area:e} m²)")]
    DegenerateFacet { facet: usize, area: f64 },

    #[error("facet {facet} references vertex {index} but only {count} vertices exist")]
    VertexIndex {
        facet: usize,
        index: usize,
        count: usize,
    },

    #[error("no material for category {0} and no default entry")]
    MissingMaterial(i64),

    #[error("scene has no truth materials")]
    MissingTruthMaterials,

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("channel has zero energy")]
    ZeroEnergy,

    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),

    #[error("not enough samples: need {need}, have {have}")]
    NotEnoughSamples { need: usize, have: usize },

    #[error("cholesky factorization failed after jitter escalation to {0:e}")]
    Cholesky(f64),

    #[error("metric undefined: {0}")]
    Metric(String),

    #[error("non-finite loss at iteration {iteration} (entries {entries:?})")]
    NonFiniteLoss {
        iteration: usize,
        entries: Vec<usize>,
    },

    #[error("lineage mismatch: {0}")]
    Lineage(String),

    #[error("malformed data: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
