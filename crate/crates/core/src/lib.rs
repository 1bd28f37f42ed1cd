//! Panoramic cubic-field engine.
//!
//! A 360° scene is held as six cube-face multi-plane images (MPIs) sharing
//! one set of depth planes. The crate covers the projection geometry between
//! equirectangular panoramas and cubemaps, the blending stages that fuse the
//! per-face MPIs, volume rendering with planar-homography and ray-cube
//! sampling, the photometric and edge-alignment losses with analytic
//! gradients, a per-scene optimizer, depth metrics, and file formats.

pub mod blending;
pub mod error;
pub mod field;
pub mod geometry;
pub mod image;
pub mod io;
pub mod losses;
pub mod metrics;
pub mod optimizer;
pub mod rendering;
pub mod synth;

pub use crate::error::{Error, Result};
pub use crate::field::{CubicField, DepthPlaneSet, Mpi};
pub use crate::metrics::{DepthEvalConfig, DepthMetrics};
pub use crate::geometry::{CubeIntrinsics, Edge, ErpGrid, Face, SphereDir};
pub use crate::image::{Cubemap, Image};
pub use crate::losses::LossWeights;
pub use crate::optimizer::{FitConfig, FitResult, PosedView, SamplingMode};
pub use crate::rendering::{Pose, RenderOutput};
