//! Error type shared across the crate.

use thiserror::Error;

/// Errors produced by point-cloud I/O, geometry, and the authentication pipeline.
#[derive(Error, Debug)]
pub enum Error {
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),

    #[error("malformed PLY header: {0}")]
    PlyMalformedHeader(String),

    #[error("unsupported PLY variant: {0}")]
    PlyUnsupported(String),

    #[error("non-finite coordinate at vertex {index}")]
    NonFiniteCoordinate { index: usize },

    #[error("normals length {normals} does not match point count {points}")]
    NormalsLengthMismatch { points: usize, normals: usize },

    #[error("normal at index {index} is not unit length (norm {norm})")]
    NonUnitNormal { index: usize, norm: f64 },

    #[error("search radius must be positive (got {0})")]
    NonPositiveRadius(f64),

    #[error("k must be at least 1")]
    ZeroNeighborCount,

    #[error("rigid fit needs at least 3 correspondences (got {0})")]
    TooFewCorrespondences(usize),

    #[error("degenerate geometry: {0}")]
    DegenerateGeometry(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("point cloud is empty")]
    EmptyCloud,

    #[error("insufficient structure: {points} points after preprocessing (minimum {min})")]
    InsufficientStructure { points: usize, min: usize },

    #[error("coincident points in feature pair")]
    CoincidentPoints,

    #[error("degenerate pair frame: source normal parallel to displacement")]
    DegeneratePairFrame,

    #[error("isolated keypoint: no valid neighbors within feature radius")]
    IsolatedKeypoint,

    #[error("descriptor list is empty")]
    EmptyDescriptors,

    #[error("enrollment failed: too few keypoints ({got}, minimum {min})")]
    TooFewKeypoints { got: usize, min: usize },

    #[error("template keypoint set is empty")]
    EmptyTemplate,

    #[error("parameter fingerprint mismatch between template and configuration")]
    FingerprintMismatch,

    #[error("bad template magic")]
    TemplateBadMagic,

    #[error("unsupported template version {0}")]
    TemplateUnsupportedVersion(u32),

    #[error("truncated template data: needed {needed} bytes, had {available}")]
    TemplateTruncated { needed: usize, available: usize },

    #[error("template checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    TemplateChecksumMismatch { stored: u32, computed: u32 },

    #[error("raw point count must be positive")]
    ZeroRawCount,

    #[error("evaluation needs at least {min} genuine and {min} impostor pairs")]
    InsufficientPairs { min: usize },

    #[error("score list is empty")]
    EmptyScores,

    #[error("degenerate room spec: {0}")]
    DegenerateRoomSpec(String),

    #[error("manifest error: {0}")]
    Manifest(String),
}

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, Error>;
