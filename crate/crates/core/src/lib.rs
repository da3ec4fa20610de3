//! Voxel metamaterial design: periodic homogenization, SIMP inverse
//! homogenization, a self-conditioned conditional diffusion model over
//! eighth cells, and the dataset pipeline and metrics around them.

pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod homogenize;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod topopt;
pub mod voxel;

pub use error::{Error, Result};
pub use homogenize::{BaseMaterial, CubicTensor, DerivedModuli, FullTensor6, SolverOptions};
pub use voxel::{similarity, CellRole, ComponentLabeling, VoxelGrid};
