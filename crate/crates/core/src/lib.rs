//! Core library for dparc: a two-stage, coarse-to-fine brain parcellation
//! pipeline operating on diffusion tensor scalar maps.
//!
//! The crate is organised around the pipeline's data flow:
//!
//! * [`volume`], [`nifti`], [`dwi`], [`transform`], [`resample`]: volumes
//!   on world-anchored grids, NIfTI-1 I/O, gradient tables, and resampling
//!   into and out of the conformed analysis space.
//! * [`tensor`], [`eigen`], [`maps`]: per-voxel diffusion tensor fitting,
//!   symmetric eigendecomposition, and derived scalar maps.
//! * [`schema`]: the hierarchical label inventory (fine labels, coarse
//!   groups) and projections between label spaces.
//! * [`backend`], [`sliding`], [`pipeline`]: the external segmenter
//!   protocol, Gaussian-weighted sliding-window inference, and the
//!   coarse-to-fine orchestration.
//! * [`postprocess`]: mask-restricted cleanup of predicted labels.
//! * [`metrics`]: overlap, surface-distance and homogeneity metrics plus
//!   report emission.
//! * [`ablation`]: enumeration and ranking of input-map combinations.

pub mod ablation;
pub mod backend;
pub mod config;
pub mod dwi;
pub mod eigen;
pub mod error;
pub mod io_util;
pub mod maps;
pub mod metrics;
pub mod nifti;
pub mod pipeline;
pub mod postprocess;
pub mod resample;
pub mod schema;
pub mod sliding;
pub mod tensor;
pub mod transform;
pub mod volume;

pub use backend::{PatchTensor, SegmenterBackend, SubprocessBackend};
pub use config::PipelineConfig;
pub use dwi::{DwiSeries, GradientScheme};
pub use error::{CoreError, ErrorKind, Result};
pub use maps::{MapCode, ScalarMapSet};
pub use pipeline::{run_pipeline, spawn_backends, PipelineBackends, PipelineOutputs};
pub use resample::{conform, resample_to, Interpolation};
pub use schema::{LabelSchema, LabelSpace, LabelVolume};
pub use sliding::SlidingWindowConfig;
pub use transform::GridTransform;
pub use volume::{AnyVolume, Grid, ScalarType, Volume, Voxel};
