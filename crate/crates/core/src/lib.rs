//! Score-distillation 3D synthesis at desk scale.
//!
//! The crate reproduces a two-stage image-prompted text-to-3D pipeline:
//!
//! 1. a coarse voxel radiance field is optimized with score distillation
//!    against a view-conditioned denoiser ([`distill::zero123_sds_grad`]);
//! 2. the density is converted into a deformable tetrahedral grid
//!    ([`tetmesh`]), whose extracted surface is refined first in geometry
//!    ([`distill::ipsd_geo_grad`]) and then in texture
//!    ([`distill::ipsd_tex_grad`]) by an image-prompt-conditioned denoiser.
//!
//! Every pretrained network sits behind the [`diffusion::Denoiser`] trait.
//! The crate ships analytic oracle denoisers with closed-form behaviour, and
//! a bridge client ([`diffusion::RemoteDenoiser`]) for attaching real models
//! over HTTP.

pub mod check;
pub mod diffusion;
pub mod distill;
pub mod fields;
pub mod image_io;
pub mod math;
pub mod optim;
pub mod pipeline;
pub mod prompts;
pub mod render_mesh;
pub mod render_volume;
pub mod tetmesh;

pub use diffusion::{Denoiser, Latent, NoiseSchedule};
pub use fields::Grid3;
pub use render_volume::{CameraPose, Image, RelativePose};
pub use tetmesh::{SurfaceMesh, TetGrid};
