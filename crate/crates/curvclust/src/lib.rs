//! Clustering of attributed graphs in a heterogeneous-curvature product
//! manifold.
//!
//! The pipeline has three stages: Ollivier-Ricci curvature of every edge is
//! computed once by exact optimal transport ([`ricci`]), node features are
//! encoded into a product of constant-curvature factors by fully Riemannian
//! graph convolutions ([`encoder`]), and cluster centroids are trained
//! end-to-end against a Ricci density loss plus a dual-reweighted,
//! augmentation-free contrastive loss ([`trainer`]).
//!
//! All gradients come from the reverse-mode tape in [`diff`]; the geometry
//! primitives live in [`manifold`]; clustering quality is scored by
//! [`metrics`].

pub mod config;
pub mod diff;
pub mod encoder;
pub mod graph;
pub mod manifold;
pub mod metrics;
pub mod params;
pub mod ricci;
pub mod synth;
pub mod trainer;

pub use config::TrainConfig;
pub use graph::Graph;
pub use manifold::{FreeFactor, ProductManifold, ProductPoint, RestrictedFactor};
pub use ricci::RicciTable;
