//! Parameter counting and multiply-add accounting.
//!
//! Parameter counts follow the closed form
//!
//! ```text
//! weights   = (C_I/G) * (C_O/G) * K * G
//! positions = 2 * (K - 1) * G        (multi mode; one shared set counts once)
//! bias      = C_O
//! ```
//!
//! and must agree with a brute-force enumeration of stored trainable
//! scalars for any constructible layer.
//!
//! MAdds convention: one multiply-accumulate is one MAdd; a bilinear sample
//! costs 4 MAdds (four products of precomputed coefficients), coefficient
//! computation amortized and excluded; bias adds excluded. Each input
//! channel is interpolated once per synapse per output location regardless
//! of how many output channels share the group.

use crate::error::{Error, Result};
use crate::ops::layer::GroupMode;

/// What a layer looks like for counting purposes.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerDesc {
    pub kind: LayerKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub groups: usize,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    /// Dense convolution with a fixed `kh x kw` kernel.
    Conv { kernel: (usize, usize) },
    /// Position-based unit with `K` synapses.
    Acu {
        synapses: usize,
        group_mode: GroupMode,
        pin_origin: bool,
    },
}

impl LayerDesc {
    pub fn conv(
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        kernel: (usize, usize),
    ) -> LayerDesc {
        LayerDesc {
            kind: LayerKind::Conv { kernel },
            in_channels,
            out_channels,
            groups,
            stride: (1, 1),
            padding: (0, 0),
        }
    }

    pub fn acu(
        in_channels: usize,
        out_channels: usize,
        groups: usize,
        synapses: usize,
    ) -> LayerDesc {
        LayerDesc {
            kind: LayerKind::Acu {
                synapses,
                group_mode: GroupMode::Multi,
                pin_origin: true,
            },
            in_channels,
            out_channels,
            groups,
            stride: (1, 1),
            padding: (0, 0),
        }
    }

    fn check(&self) -> Result<()> {
        if self.groups == 0
            || self.in_channels % self.groups != 0
            || self.out_channels % self.groups != 0
        {
            return Err(Error::InvalidArgument(format!(
                "groups ({}) must divide in_channels ({}) and out_channels ({})",
                self.groups, self.in_channels, self.out_channels
            )));
        }
        Ok(())
    }
}

/// Per-layer cost figures. `core_madds` is the convolution contraction;
/// `interp_madds` the bilinear overhead, zero for dense layers.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LayerCost {
    pub weight_params: usize,
    pub position_params: usize,
    pub bias_params: usize,
    pub core_madds: usize,
    pub interp_madds: usize,
}

impl LayerCost {
    pub fn total_params_ex_bias(&self) -> usize {
        self.weight_params + self.position_params
    }

    pub fn total_madds(&self) -> usize {
        self.core_madds + self.interp_madds
    }

    pub fn add(&self, other: &LayerCost) -> LayerCost {
        LayerCost {
            weight_params: self.weight_params + other.weight_params,
            position_params: self.position_params + other.position_params,
            bias_params: self.bias_params + other.bias_params,
            core_madds: self.core_madds + other.core_madds,
            interp_madds: self.interp_madds + other.interp_madds,
        }
    }
}

/// Parameter counts of a layer (MAdd fields left zero).
pub fn count_params(desc: &LayerDesc) -> Result<LayerCost> {
    desc.check()?;
    let g = desc.groups;
    let per_group_in = desc.in_channels / g;
    let per_group_out = desc.out_channels / g;
    let (weight_params, position_params) = match &desc.kind {
        LayerKind::Conv { kernel } => {
            (per_group_in * per_group_out * kernel.0 * kernel.1 * g, 0)
        }
        LayerKind::Acu {
            synapses,
            group_mode,
            pin_origin,
        } => {
            let free_per_set = if *pin_origin { synapses - 1 } else { *synapses };
            let sets = match group_mode {
                GroupMode::Multi => g,
                GroupMode::Shared => 1,
            };
            (
                per_group_in * per_group_out * synapses * g,
                2 * free_per_set * sets,
            )
        }
    };
    Ok(LayerCost {
        weight_params,
        position_params,
        bias_params: desc.out_channels,
        core_madds: 0,
        interp_madds: 0,
    })
}

/// Full cost of a layer on an `h x w` input, parameters included.
pub fn count_madds(desc: &LayerDesc, h: usize, w: usize) -> Result<LayerCost> {
    let mut cost = count_params(desc)?;
    let (s_h, s_w) = desc.stride;
    let (p_h, p_w) = desc.padding;
    match &desc.kind {
        LayerKind::Conv { kernel } => {
            let (kh, kw) = *kernel;
            let ph = h + 2 * p_h;
            let pw = w + 2 * p_w;
            if ph < kh || pw < kw {
                return Err(Error::InvalidArgument(format!(
                    "kernel {kh}x{kw} does not fit padded input {ph}x{pw}"
                )));
            }
            let oh = (ph - kh) / s_h + 1;
            let ow = (pw - kw) / s_w + 1;
            cost.core_madds = oh
                * ow
                * desc.out_channels
                * (desc.in_channels / desc.groups)
                * kh
                * kw;
        }
        LayerKind::Acu { synapses, .. } => {
            let oh = (h + 2 * p_h - 1) / s_h + 1;
            let ow = (w + 2 * p_w - 1) / s_w + 1;
            cost.core_madds =
                oh * ow * desc.out_channels * (desc.in_channels / desc.groups) * synapses;
            cost.interp_madds = oh * ow * desc.in_channels * synapses * 4;
        }
    }
    Ok(cost)
}

/// One row of a cost table.
#[derive(Debug, Clone)]
pub struct CostRow {
    pub layer: String,
    pub cost: LayerCost,
}

/// Per-layer costs of a network on the given `(channels, height, width)`
/// input. Parameterless layers contribute no row; pooling and dense layers
/// still update the tracked activation shape.
pub fn network_cost_rows(
    net: &crate::train::network::ToyNetwork,
    input: (usize, usize, usize),
) -> Result<Vec<CostRow>> {
    let mut rows = Vec::new();
    walk_cost(&net.layers, input, "", &mut rows)?;
    Ok(rows)
}

fn walk_cost(
    layers: &[crate::train::network::NamedLayer],
    mut dims: (usize, usize, usize),
    prefix: &str,
    rows: &mut Vec<CostRow>,
) -> Result<(usize, usize, usize)> {
    use crate::train::network::{join_path, Layer};
    for nl in layers {
        let path = join_path(prefix, &nl.name);
        match &nl.layer {
            Layer::Conv(c) => {
                let desc = LayerDesc {
                    kind: LayerKind::Conv { kernel: c.kernel_hw() },
                    in_channels: c.geometry.in_channels,
                    out_channels: c.geometry.out_channels,
                    groups: c.geometry.groups,
                    stride: c.geometry.stride,
                    padding: c.geometry.padding,
                };
                rows.push(CostRow {
                    layer: path,
                    cost: count_madds(&desc, dims.1, dims.2)?,
                });
                let (kh, kw) = c.kernel_hw();
                let (oh, ow) = c.geometry.conv_output_hw(dims.1, dims.2, kh, kw)?;
                dims = (c.geometry.out_channels, oh, ow);
            }
            Layer::Acu(a) => {
                let desc = LayerDesc {
                    kind: LayerKind::Acu {
                        synapses: a.synapses(),
                        group_mode: a.group_mode,
                        pin_origin: a.positions.pin_origin(),
                    },
                    in_channels: a.geometry.in_channels,
                    out_channels: a.geometry.out_channels,
                    groups: a.geometry.groups,
                    stride: a.geometry.stride,
                    padding: a.geometry.padding,
                };
                rows.push(CostRow {
                    layer: path,
                    cost: count_madds(&desc, dims.1, dims.2)?,
                });
                let (oh, ow) = a.geometry.anchor_output_hw(dims.1, dims.2);
                dims = (a.geometry.out_channels, oh, ow);
            }
            Layer::Dense(d) => {
                rows.push(CostRow {
                    layer: path,
                    cost: LayerCost {
                        weight_params: d.weights.numel(),
                        position_params: 0,
                        bias_params: d.bias.len(),
                        core_madds: d.in_features() * d.out_features(),
                        interp_madds: 0,
                    },
                });
                dims = (d.out_features(), 1, 1);
            }
            Layer::Relu => {}
            Layer::GlobalAvgPool => dims = (dims.0, 1, 1),
            Layer::Residual(body) => {
                dims = walk_cost(body, dims, &path, rows)?;
            }
        }
    }
    Ok(dims)
}

pub const COST_CSV_HEADER: &str =
    "layer,weight_params,position_params,bias_params,core_madds,interp_madds,total_params_ex_bias,total_madds";

pub fn cost_rows_to_csv(rows: &[CostRow]) -> String {
    let mut out = String::from(COST_CSV_HEADER);
    out.push('\n');
    let mut total = LayerCost::default();
    for r in rows {
        out.push_str(&cost_csv_row(&r.layer, &r.cost));
        out.push('\n');
        total = total.add(&r.cost);
    }
    out.push_str(&cost_csv_row("total", &total));
    out.push('\n');
    out
}

fn cost_csv_row(name: &str, c: &LayerCost) -> String {
    format!(
        "{name},{},{},{},{},{},{},{}",
        c.weight_params,
        c.position_params,
        c.bias_params,
        c.core_madds,
        c.interp_madds,
        c.total_params_ex_bias(),
        c.total_madds()
    )
}

pub fn render_cost_table(rows: &[CostRow]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<16} {:>12} {:>10} {:>6} {:>14} {:>13} {:>12}\n",
        "layer", "weights", "positions", "bias", "core_madds", "interp_madds", "total_ex_b"
    ));
    let mut total = LayerCost::default();
    for r in rows {
        out.push_str(&format!(
            "{:<16} {:>12} {:>10} {:>6} {:>14} {:>13} {:>12}\n",
            r.layer,
            r.cost.weight_params,
            r.cost.position_params,
            r.cost.bias_params,
            r.cost.core_madds,
            r.cost.interp_madds,
            r.cost.total_params_ex_bias()
        ));
        total = total.add(&r.cost);
    }
    out.push_str(&format!(
        "{:<16} {:>12} {:>10} {:>6} {:>14} {:>13} {:>12}\n",
        "total",
        total.weight_params,
        total.position_params,
        total.bias_params,
        total.core_madds,
        total.interp_madds,
        total.total_params_ex_bias()
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn worked_example_16x4d_block() {
        // C_I = C_O = 64, K = 9, G = 16: 2304 weights + 256 positions = 2560.
        let cost = count_params(&LayerDesc::acu(64, 64, 16, 9)).unwrap();
        assert_eq!(cost.weight_params, 2304);
        assert_eq!(cost.position_params, 256);
        assert_eq!(cost.total_params_ex_bias(), 2560);
    }

    #[test]
    fn worked_example_single_group() {
        // G = 1, C_I = C_O = 32, K = 9: same weight count as a 3x3 kernel.
        let cost = count_params(&LayerDesc::acu(32, 32, 1, 9)).unwrap();
        assert_eq!(cost.weight_params, 9216);
        assert_eq!(cost.position_params, 16);
        let conv = count_params(&LayerDesc::conv(32, 32, 1, (3, 3))).unwrap();
        assert_eq!(conv.weight_params, 9216);
        assert_eq!(conv.position_params, 0);
    }

    #[test]
    fn worked_example_depthwise() {
        // C_I = C_O = G = 128, K = 9.
        let cost = count_params(&LayerDesc::acu(128, 128, 128, 9)).unwrap();
        assert_eq!(cost.weight_params, 1152);
        assert_eq!(cost.position_params, 2048);
    }

    #[test]
    fn shared_mode_counts_one_set() {
        let mut desc = LayerDesc::acu(8, 8, 4, 5);
        if let LayerKind::Acu { group_mode, .. } = &mut desc.kind {
            *group_mode = GroupMode::Shared;
        }
        let cost = count_params(&desc).unwrap();
        assert_eq!(cost.position_params, 2 * 4);
    }

    #[test]
    fn non_divisible_groups_rejected() {
        assert!(count_params(&LayerDesc::acu(6, 4, 4, 3)).is_err());
    }

    #[test]
    fn madds_of_1x1_conv() {
        let cost = count_madds(&LayerDesc::conv(8, 8, 1, (1, 1)), 4, 4).unwrap();
        assert_eq!(cost.core_madds, 1024);
        assert_eq!(cost.interp_madds, 0);
    }

    #[test]
    fn madds_of_depthwise_unit() {
        let cost = count_madds(&LayerDesc::acu(8, 8, 8, 9), 4, 4).unwrap();
        assert_eq!(cost.core_madds, 1152);
        assert_eq!(cost.interp_madds, 4608);
    }

    #[test]
    fn doubling_groups_halves_core_madds_only() {
        let g1 = count_madds(&LayerDesc::acu(8, 8, 1, 5), 6, 6).unwrap();
        let g2 = count_madds(&LayerDesc::acu(8, 8, 2, 5), 6, 6).unwrap();
        assert_eq!(g1.core_madds, 2 * g2.core_madds);
        assert_eq!(g1.interp_madds, g2.interp_madds);
    }

    #[test]
    fn cardinality_trades_weights_for_positions() {
        // For fixed channels and K >= 2, raising G strictly shrinks weights
        // and strictly grows positions.
        let (ci, co, k) = (32, 32, 9);
        let mut prev: Option<LayerCost> = None;
        for g in [1usize, 2, 4, 8, 16, 32] {
            let cost = count_params(&LayerDesc::acu(ci, co, g, k)).unwrap();
            if let Some(p) = prev {
                assert!(cost.weight_params < p.weight_params);
                assert!(cost.position_params > p.position_params);
                assert!(cost.total_params_ex_bias() < p.total_params_ex_bias());
            }
            prev = Some(cost);
        }
    }
}
