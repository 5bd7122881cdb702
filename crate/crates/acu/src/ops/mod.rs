//! Forward and backward kernels: direct dense convolution and the
//! position-based unit with grouped and depthwise variants.

pub mod backward;
pub mod bilinear;
pub mod forward;
pub mod geometry;
pub mod layer;
pub mod naive;
pub mod positions;

pub use backward::acu_backward;
pub use bilinear::{bilinear_sample, bilinear_sample_with_grad};
pub use forward::acu_forward;
pub use geometry::ConvGeometry;
pub use layer::{AcuGradients, AcuLayer, GroupMode};
pub use naive::{naive_conv_forward, ConvLayer};
pub use positions::{make_grid_positions, PositionSet};
