//! Convolution with learnable sampling positions.
//!
//! A unit here is a convolution whose taps — *synapses* — sit at continuous,
//! trainable displacements instead of a fixed grid. Fractional positions are
//! read through bilinear interpolation, which makes the output differentiable
//! in the positions, so a filter can learn its own shape. Grouping gives each
//! channel group its own position set (multiple receptive fields per layer),
//! with depthwise as the extreme case; shared mode keeps one set for all
//! groups.
//!
//! What the crate provides:
//!
//! - [`ops`]: dense reference convolution, the position-based forward pass,
//!   and analytic gradients for weights, bias, input, and positions.
//! - [`equivalence`]: exact lowering of any unit to a sparse dense kernel by
//!   extrapolating each synapse weight onto its four lattice neighbors, plus
//!   sparsity reporting.
//! - [`verify`]: literal-loop forward oracle and central finite differences,
//!   wired into a deterministic gradient-check battery.
//! - [`train`]: SGD with Nesterov momentum and weight decay, a separate
//!   normalized-gradient rule for positions, warm-up freezing, schedules,
//!   and small networks sufficient to watch shapes converge.
//! - [`cost`]: parameter counts and multiply-add accounting.
//! - [`manifest`] / [`export`] / [`cli`]: JSON network manifests, bit-exact
//!   snapshots, CSV exports, and the `acu` command-line driver.
//!
//! # Conventions
//!
//! Tensors are NCHW `f64` ([`tensor::Tensor4`]). Position displacements are
//! `(alpha, beta)` with `alpha` along rows and `beta` along columns. Samples
//! landing outside the input read zero, consistent with zero padding.
//!
//! A position-based layer is anchored like a 1x1 convolution: with stride 1
//! and padding 0 its output matches the input size, and synapses reach out
//! from each anchor. A centered `(2d+1) x (2d+1)` grid of integer positions
//! therefore reproduces a conventional kernel used with padding `d`:
//!
//! ```
//! use acu::ops::{acu_forward, make_grid_positions, AcuLayer, ConvGeometry, GroupMode};
//! use acu::tensor::{he_init, Tensor4};
//!
//! let geometry = ConvGeometry::simple(1, 1, 1).unwrap();
//! let weights = he_init((1, 1, 1, 9), 9, 7).unwrap();
//! let layer = AcuLayer::new(
//!     geometry,
//!     weights,
//!     vec![0.0],
//!     make_grid_positions(3, 3, 1, 1).unwrap(),
//!     GroupMode::Multi,
//! )
//! .unwrap();
//! let x = Tensor4::filled(1, 1, 5, 5, 1.0);
//! let y = acu_forward(&x, &layer).unwrap();
//! assert_eq!(y.dims(), x.dims());
//! ```
//!
//! The `examples/` directory exercises each capability end to end; the thin
//! `acu` binary exposes the same functionality as subcommands.

pub mod cli;
pub mod cost;
pub mod equivalence;
pub mod error;
pub mod export;
pub mod manifest;
pub mod ops;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use ops::{
    acu_backward, acu_forward, bilinear_sample, make_grid_positions, naive_conv_forward,
    AcuGradients, AcuLayer, ConvGeometry, ConvLayer, GroupMode, PositionSet,
};
pub use tensor::Tensor4;
