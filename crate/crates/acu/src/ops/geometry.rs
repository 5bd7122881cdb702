//! Channel and spatial geometry shared by all convolution variants.

use crate::error::{Error, Result};

/// Stride, zero padding, and channel grouping of a convolution-like layer.
///
/// Groups partition channels into `G` equal blocks: output channel `o`
/// belongs to group `o / (C_O/G)` and reads only input channels
/// `[g*C_I/G, (g+1)*C_I/G)`. Depthwise is the `G == C_I == C_O` case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl ConvGeometry {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<ConvGeometry> {
        if in_channels < 1 || out_channels < 1 || groups < 1 {
            return Err(Error::InvalidArgument(
                "channel and group counts must be >= 1".into(),
            ));
        }
        if in_channels % groups != 0 || out_channels % groups != 0 {
            return Err(Error::InvalidArgument(format!(
                "groups ({groups}) must divide in_channels ({in_channels}) and out_channels ({out_channels})"
            )));
        }
        if stride.0 < 1 || stride.1 < 1 {
            return Err(Error::InvalidArgument("stride must be >= 1".into()));
        }
        Ok(ConvGeometry {
            in_channels,
            out_channels,
            groups,
            stride,
            padding,
        })
    }

    /// Unit-stride, no-padding geometry.
    pub fn simple(in_channels: usize, out_channels: usize, groups: usize) -> Result<ConvGeometry> {
        ConvGeometry::new(in_channels, out_channels, groups, (1, 1), (0, 0))
    }

    pub fn group_in(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn group_out(&self) -> usize {
        self.out_channels / self.groups
    }

    #[inline]
    pub fn group_of_output(&self, o: usize) -> usize {
        o / self.group_out()
    }

    /// Output extent for a position-based layer.
    ///
    /// Position-based layers are anchored like a 1x1 convolution: the anchor
    /// for output `(m, n)` is input point `(m*s - p, n*s - p)` and synapses
    /// reach out from there with zero extension. With stride 1 and padding 0
    /// the output matches the input size.
    pub fn anchor_output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.padding.0 - 1) / self.stride.0 + 1;
        let ow = (w + 2 * self.padding.1 - 1) / self.stride.1 + 1;
        (oh, ow)
    }

    /// Output extent for a dense kernel of `kh x kw` taps anchored at its
    /// top-left corner. Fails when the padded input is smaller than the
    /// kernel.
    pub fn conv_output_hw(&self, h: usize, w: usize, kh: usize, kw: usize) -> Result<(usize, usize)> {
        let ph = h + 2 * self.padding.0;
        let pw = w + 2 * self.padding.1;
        if kh < 1 || kw < 1 || ph < kh || pw < kw {
            return Err(Error::InvalidArgument(format!(
                "kernel {kh}x{kw} does not fit padded input {ph}x{pw}"
            )));
        }
        Ok(((ph - kh) / self.stride.0 + 1, (pw - kw) / self.stride.1 + 1))
    }
}
