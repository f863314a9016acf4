//! Hyperspectral unmixing under the perturbed linear mixing model.
//!
//! Each pixel is modelled as `y_n = (M + dM_n) a_n + b_n`: a convex
//! combination of endmember spectra that are allowed to drift from pixel to
//! pixel. [`admm::unmix`] estimates `M`, the abundances `A` and the
//! perturbations `dM_n` jointly by block coordinate descent with ADMM
//! sub-solvers.
//!
//! ```
//! use plmm::{generate, initialize, unmix, BcdConfig, InitSpec, SyntheticSpec};
//! use plmm::synthgen::gaussian_bump_endmembers;
//!
//! # fn main() -> plmm::Result<()> {
//! let mut spec = SyntheticSpec::new(16, 16, gaussian_bump_endmembers(30, 3, 0));
//! spec.seed = 0;
//! let scene = generate(&spec)?;
//! let init = initialize(&scene.y, 3, &InitSpec::default())?;
//! let result = unmix(&scene.y, init, &BcdConfig::default())?;
//! assert!(result.trace.last().unwrap().objective.is_finite());
//! # Ok(())
//! # }
//! ```

// `!(x > 0.0)` style checks are meant to reject NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod admm;
pub mod error;
pub mod init;
pub mod io;
mod linalg;
pub mod metrics;
pub mod model;
pub mod penalties;
pub mod subspace;
pub mod synthgen;

pub use admm::{unmix, AdmmConfig, AdmmTrace, BcdConfig, SweepOrder, UnmixResult};
pub use error::{PlmmError, Result};
pub use model::{
    objective, objective_terms, reconstruct, HsiMatrix, ObjectiveBreakdown, PenaltyConfig, PlmmState, PsiKind,
};
pub use penalties::{MutualDistOperator, SmoothnessOperator};
pub use subspace::{fit_projection, PcaFrame, VolumeContext};
pub use init::{fcls, initialize, vca, InitMethod, InitSpec};
pub use metrics::{evaluate, EvalReport};
pub use synthgen::{generate, GroundTruth, SyntheticSpec};
