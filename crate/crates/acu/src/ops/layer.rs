//! The trainable position-based convolution unit.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::geometry::ConvGeometry;
use crate::ops::positions::PositionSet;
use crate::tensor::Tensor4;

/// How groups relate to stored position sets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GroupMode {
    /// Every group owns its own position set: `G` receptive fields per layer.
    #[serde(rename = "multi")]
    Multi,
    /// One position set shared by all groups: a single receptive field,
    /// whatever the cardinality.
    #[serde(rename = "shared")]
    Shared,
}

/// Weights, bias, positions, and geometry of one unit.
///
/// Weights have shape `(C_O, C_I/G, 1, K)`: one scalar per output channel,
/// in-group input channel, and synapse. Keeping the synapse index contiguous
/// lets the forward pass interpolate each input once per synapse and reuse
/// the sample across the group's output channels.
///
/// Stride greater than 1 is supported but rarely exercised; these units
/// normally replace unit-stride kernels.
#[derive(Debug, Clone, PartialEq)]
pub struct AcuLayer {
    pub geometry: ConvGeometry,
    pub weights: Tensor4,
    pub bias: Vec<f64>,
    pub positions: PositionSet,
    pub group_mode: GroupMode,
}

impl AcuLayer {
    pub fn new(
        geometry: ConvGeometry,
        weights: Tensor4,
        bias: Vec<f64>,
        positions: PositionSet,
        group_mode: GroupMode,
    ) -> Result<AcuLayer> {
        let layer = AcuLayer {
            geometry,
            weights,
            bias,
            positions,
            group_mode,
        };
        layer.validate()?;
        Ok(layer)
    }

    /// Checks the internal shape contracts; called by every operation that
    /// consumes a layer, since fields are public.
    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        let k = self.positions.synapses();
        let expect = (g.out_channels, g.group_in(), 1, k);
        if self.weights.dims() != expect {
            return Err(Error::InvalidArgument(format!(
                "weights shape {:?} does not match expected {expect:?}",
                self.weights.dims()
            )));
        }
        if self.bias.len() != g.out_channels {
            return Err(Error::InvalidArgument(format!(
                "bias length {} does not match out_channels {}",
                self.bias.len(),
                g.out_channels
            )));
        }
        let expect_sets = match self.group_mode {
            GroupMode::Multi => g.groups,
            GroupMode::Shared => 1,
        };
        if self.positions.groups() != expect_sets {
            return Err(Error::InvalidArgument(format!(
                "position set count {} does not match {:?} mode with {} groups",
                self.positions.groups(),
                self.group_mode,
                g.groups
            )));
        }
        if !self.weights.all_finite() || self.bias.iter().any(|b| !b.is_finite()) {
            return Err(Error::InvalidArgument("non-finite layer parameters".into()));
        }
        Ok(())
    }

    pub fn synapses(&self) -> usize {
        self.positions.synapses()
    }

    /// Stored position sets: `G` in multi mode, 1 in shared mode.
    pub fn position_sets(&self) -> usize {
        self.positions.groups()
    }

    /// Position set index serving a given group.
    #[inline]
    pub fn set_of_group(&self, group: usize) -> usize {
        match self.group_mode {
            GroupMode::Multi => group,
            GroupMode::Shared => 0,
        }
    }

    /// Effective displacement of synapse `k` for `group`.
    #[inline]
    pub fn position(&self, group: usize, k: usize) -> (f64, f64) {
        self.positions.get(self.set_of_group(group), k)
    }

    #[inline]
    pub fn weight(&self, o: usize, c_local: usize, k: usize) -> f64 {
        self.weights.get(o, c_local, 0, k)
    }

    /// Output shape for an input of the given spatial extent.
    pub fn output_dims(&self, x: &Tensor4) -> Result<(usize, usize, usize, usize)> {
        if x.c() != self.geometry.in_channels {
            return Err(Error::InvalidArgument(format!(
                "input has {} channels, layer expects {}",
                x.c(),
                self.geometry.in_channels
            )));
        }
        let (oh, ow) = self.geometry.anchor_output_hw(x.h(), x.w());
        Ok((x.n(), self.geometry.out_channels, oh, ow))
    }

    /// Stored trainable scalar count: weights + bias + free positions.
    pub fn trainable_scalars(&self) -> usize {
        self.weights.numel() + self.bias.len() + self.positions.free_parameter_count()
    }
}

/// Gradients of a scalar objective with respect to every layer parameter
/// and the input.
///
/// `d_positions[s][j]` is the `(d_alpha, d_beta)` pair of free synapse
/// `j + first_free` of stored position set `s`; a pinned origin synapse has
/// no entry. In shared mode there is a single set accumulating contributions
/// from all groups.
#[derive(Debug, Clone)]
pub struct AcuGradients {
    pub d_weights: Tensor4,
    pub d_bias: Vec<f64>,
    pub d_positions: Vec<Vec<(f64, f64)>>,
    pub d_input: Tensor4,
}

impl AcuGradients {
    pub(crate) fn zeros_like(layer: &AcuLayer, x: &Tensor4) -> AcuGradients {
        let (wn, wc, wh, ww) = layer.weights.dims();
        let (xn, xc, xh, xw) = x.dims();
        AcuGradients {
            d_weights: Tensor4::zeros(wn, wc, wh, ww),
            d_bias: vec![0.0; layer.bias.len()],
            d_positions: vec![
                vec![(0.0, 0.0); layer.positions.free_per_group()];
                layer.position_sets()
            ],
            d_input: Tensor4::zeros(xn, xc, xh, xw),
        }
    }

    /// Flat view of all position gradients of one set, `(alpha, beta)`
    /// interleaved in synapse order.
    pub fn position_grad_flat(&self, set: usize) -> Vec<f64> {
        self.d_positions[set]
            .iter()
            .flat_map(|&(a, b)| [a, b])
            .collect()
    }
}
