//! Masked linear regression with local receptive fields for paired
//! image-to-image mapping.
//!
//! Each output pixel observes only a small dilated window of input
//! pixels, so a quadratic regression objective decomposes into one tiny
//! positive-definite system per output pixel. That keeps parameter counts
//! near-linear in image size where dense ridge regression grows
//! quadratically, and trains in milliseconds. The crate covers the whole
//! pipeline:
//!
//! - [`topology`]: receptive-field layout and mask enumeration;
//! - [`dataset`]: image buffers, CSV manifests, seeded splits and design
//!   matrices under four color strategies;
//! - [`solvers`]: the per-pixel masked solver plus ridge, LASSO and OMP
//!   baselines, with gradient/Hessian transcriptions for verification;
//! - [`model`]: sparse-row models, synthesis and the `.lrm` file format;
//! - [`refinement`]: the α-blend refinement pipeline;
//! - [`evaluation`]: mse_x100, hyperparameter grids and cross-validation.

pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod model;
pub mod refinement;
pub mod solvers;
pub mod topology;
mod util;

pub use dataset::{load_manifest, ChannelStrategy, ImageBuffer, ImagePair, ManifestEntry, SplitSpec};
pub use error::{ErrorClass, LrfError, Result};
pub use evaluation::{cross_validate, fit_from_pairs, CvGrid, CvOutcome, FitSpec, SolverKind};
pub use model::{SparseRow, SparseRowModel};
pub use refinement::{AlphaMap, AlphaParams};
pub use solvers::{Hyperparams, LassoOptions};
pub use topology::{RfGeometry, Topology};
pub use util::atomic_write;
