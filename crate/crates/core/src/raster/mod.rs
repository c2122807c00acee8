//! Tile-based differentiable rasterization of colour, semantic features,
//! uncertainty, alpha and depth.
//!
//! Gaussians are depth-sorted once per frame (ties broken by id) and binned
//! into square tiles. Every pixel blends its tile's list front to back:
//! `w_k = α_k·T_k`, `T_{k+1} = T_k·(1 − α_k)` with `α_k` clamped to 0.99,
//! contributions under 1/255 skipped and traversal stopping once the
//! transmittance would drop below 1e-4.

mod backward;
mod forward;
mod project;

pub use backward::{rasterize_backward, ChannelMask, GaussianGrads};
pub use forward::{rasterize, rasterize_with_state, FrameState, RasterSettings, RenderOutput};
pub use project::{
    project, project_point, projection_jacobian, Projected2D, COV2D_DILATION, MIN_ALPHA,
};

/// Upper clamp on per-splat alpha.
pub const MAX_ALPHA: f64 = 0.99;

/// Blending stops once transmittance would fall below this value.
pub const MIN_TRANSMITTANCE: f64 = 1e-4;

/// Default tile edge in pixels.
pub const TILE_SIZE: usize = 16;
