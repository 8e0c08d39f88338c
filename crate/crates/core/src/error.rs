//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    // Geometry / sampling
    #[error("non-finite input point {0:?}")]
    NonFiniteInput([f64; 3]),
    #[error("singular transform (det = {0})")]
    SingularTransform(f64),
    #[error("geometry mismatch: {0}")]
    GeometryMismatch(String),

    // NIfTI / file I/O
    #[error("bad NIfTI magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported NIfTI datatype code {0}")]
    UnsupportedDatatype(i16),
    #[error("truncated file: expected {expected} bytes, got {got}")]
    TruncatedFile { expected: usize, got: usize },
    #[error("malformed file: {0}")]
    MalformedFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    // Phantom
    #[error("invalid phantom spec: {0}")]
    InvalidSpec(String),

    // SRR
    #[error("empty stack list")]
    EmptyStackList,
    #[error("stacks do not overlap the target grid")]
    NoOverlap,

    // Preprocess
    #[error("no foreground voxels above threshold")]
    NoForeground,
    #[error("empty mask")]
    EmptyMask,
    #[error("degenerate mask: eigenvalue ratio {0:.3e} exceeds limit")]
    DegenerateMask(f64),

    // Registration
    #[error("channel count mismatch: fixed has {fixed}, moving has {moving}")]
    ChannelMismatch { fixed: usize, moving: usize },
    #[error("empty field list")]
    EmptyList,

    // Atlas / fusion
    #[error("label map list length mismatch: {0}")]
    LengthMismatch(String),
    #[error("temporal template has no samples")]
    EmptyTemplate,
    #[error("atlas needs at least {needed} subjects, got {got}")]
    TooFewSubjects { needed: usize, got: usize },

    // EM segmentation
    #[error("class {0} has near-zero posterior mass")]
    DegenerateClass(usize),
    #[error("structural labels without a tissue mapping: {0:?}")]
    UnmappedLabel(Vec<u16>),

    // Surfaces / features
    #[error("no isosurface crossings in field")]
    EmptySurface,
    #[error("mesh vertex channel {0:?} missing")]
    MissingChannel(String),
    #[error("meshes do not share topology: {0}")]
    TopologyMismatch(String),

    // Evaluation / pipeline
    #[error("subject {0:?} missing from one of the cohort directories")]
    MissingSubject(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("pipeline stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn in_stage(self, stage: &'static str) -> Error {
        Error::Stage {
            stage,
            source: Box::new(self),
        }
    }
}
