//! Restricted projections onto tangent hyperplanes of convex spherical
//! hypersurfaces.
//!
//! The crate models a strictly convex hypersurface `Σ ⊂ S^{n−1}`, the family
//! of maps `f_z(x) = (e_i(x)·z, ν(x)·z)` that record a point `z ∈ R^n` in the
//! moving frame of `Σ`, the light cone over `Σ`, fractal test sets, and the
//! scaling experiments built on top of them.

pub mod cone;
pub mod error;
pub mod experiments;
pub mod grid;
pub mod manifold;
pub mod projmap;
pub mod rng;
pub mod sets;
pub mod stats;
pub mod taylor;

pub use error::{Error, Result};
pub use manifold::{ChartSpec, CurvatureData, Frame, GlobalConstants, ManifoldChart};
