//! Compiles the guide's code blocks as doc-tests, one module per chapter so
//! a failure points at its chapter.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/volume-rendering.md")]
pub mod volume_rendering {}
#[doc = include_str!("../../../book/src/tetrahedral-meshes.md")]
pub mod tetrahedral_meshes {}
#[doc = include_str!("../../../book/src/denoisers.md")]
pub mod denoisers {}
#[doc = include_str!("../../../book/src/distillation.md")]
pub mod distillation {}
#[doc = include_str!("../../../book/src/pipeline.md")]
pub mod pipeline {}
#[doc = include_str!("../../../book/src/bridge.md")]
pub mod bridge {}
