//! Joint semantic-rendering enhancement for 3D Gaussian scenes.
//!
//! The crate is organized around a small pipeline:
//!
//! * [`scene`] owns the Gaussian scene data model, ingestion, frustum
//!   culling, farthest point sampling and neighborhood queries.
//! * [`numerics`] provides dense linear algebra (Jacobi eigensolver,
//!   one-sided Jacobi SVD, orthonormalization) and a reverse-mode
//!   autodiff tape used by every learnable component.
//! * [`spectral`] builds anisotropic metrics, graph Laplacians over
//!   local regions and rotated-metric Chebyshev descriptors.
//! * [`encode`] runs the transformer local encoder, propagates region
//!   encodings back to Gaussians and fuses them with semantic features.
//! * [`adapt`] implements semantic-aware pruning, gradient-triggered
//!   densification and soft-histogram-guided SH pruning.
//! * [`transfer`] maintains the cross-scene pattern basis.
//! * [`splat`] is the CPU reference renderer with the backward pass
//!   feeding the adaptation statistics.
//! * [`pipeline`] wires everything into the `anisogauss` CLI.

pub mod adapt;
pub mod encode;
pub mod numerics;
pub mod pipeline;
pub mod scene;
pub mod spectral;
pub mod splat;
pub mod transfer;
