//! Analytic gradients for the position-based unit.
//!
//! Gradients are taken of the scalar `L = sum(d_out . y)`. Weight, bias, and
//! input gradients follow the usual convolution pattern; the position
//! gradient differentiates the bilinear sample with respect to its
//! coordinates,
//!
//! ```text
//! dS/d_alpha = (Q21 - Q11)(1 - db) + (Q22 - Q12) db
//! dS/d_beta  = (Q12 - Q11)(1 - da) + (Q22 - Q21) da
//! ```
//!
//! accumulated over every output location and channel that shares the
//! synapse. A pinned origin synapse receives no position gradient.
//!
//! The pass parallelizes over the batch; per-item partial gradients are
//! reduced in batch order, so the result is independent of the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::ops::bilinear::Stencil;
use crate::ops::layer::{AcuGradients, AcuLayer};
use crate::tensor::Tensor4;

pub fn acu_backward(x: &Tensor4, layer: &AcuLayer, d_out: &Tensor4) -> Result<AcuGradients> {
    layer.validate()?;
    let y_dims = layer.output_dims(x)?;
    if d_out.dims() != y_dims {
        return Err(Error::InvalidArgument(format!(
            "d_out shape {:?} does not match forward output {:?}",
            d_out.dims(),
            y_dims
        )));
    }
    let (batch, _, oh, ow) = y_dims;

    let partials: Vec<ItemGrads> = (0..batch)
        .into_par_iter()
        .map(|b| backward_item(x, layer, d_out, b, oh, ow))
        .collect();

    let mut grads = AcuGradients::zeros_like(layer, x);
    let item_input = x.c() * x.h() * x.w();
    let free = layer.positions.free_per_group();
    for (b, part) in partials.into_iter().enumerate() {
        for (dst, src) in grads.d_weights.as_mut_slice().iter_mut().zip(&part.d_weights) {
            *dst += src;
        }
        for (dst, src) in grads.d_bias.iter_mut().zip(&part.d_bias) {
            *dst += src;
        }
        for set in 0..layer.position_sets() {
            for j in 0..free {
                let (da, db) = part.d_positions[set * free + j];
                let slot = &mut grads.d_positions[set][j];
                slot.0 += da;
                slot.1 += db;
            }
        }
        grads.d_input.as_mut_slice()[b * item_input..(b + 1) * item_input]
            .copy_from_slice(&part.d_input);
    }
    Ok(grads)
}

struct ItemGrads {
    d_weights: Vec<f64>,
    d_bias: Vec<f64>,
    /// Flattened `[set][free synapse]` pairs.
    d_positions: Vec<(f64, f64)>,
    /// One batch item's input gradient, `(c, h, w)` row-major.
    d_input: Vec<f64>,
}

fn backward_item(
    x: &Tensor4,
    layer: &AcuLayer,
    d_out: &Tensor4,
    b: usize,
    oh: usize,
    ow: usize,
) -> ItemGrads {
    let geo = &layer.geometry;
    let k_count = layer.synapses();
    let group_in = geo.group_in();
    let group_out = geo.group_out();
    let first_free = layer.positions.first_free();
    let free = layer.positions.free_per_group();
    let (s_h, s_w) = geo.stride;
    let (p_h, p_w) = (geo.padding.0 as f64, geo.padding.1 as f64);
    let (ih, iw) = (x.h(), x.w());

    let mut part = ItemGrads {
        d_weights: vec![0.0; layer.weights.numel()],
        d_bias: vec![0.0; layer.bias.len()],
        d_positions: vec![(0.0, 0.0); layer.position_sets() * free],
        d_input: vec![0.0; x.c() * ih * iw],
    };

    // per-(location, group) scratch: stencils and fetched corner values
    let mut stencils: Vec<Stencil> = Vec::with_capacity(k_count);
    let mut corners = vec![[0.0f64; 4]; group_in * k_count];

    for g in 0..geo.groups {
        let c0 = g * group_in;
        let set = layer.set_of_group(g);
        for m in 0..oh {
            for q in 0..ow {
                let anchor_r = (m * s_h) as f64 - p_h;
                let anchor_c = (q * s_w) as f64 - p_w;
                stencils.clear();
                for k in 0..k_count {
                    let (alpha, beta) = layer.position(g, k);
                    let st = Stencil::new(anchor_r + alpha, anchor_c + beta);
                    for cl in 0..group_in {
                        corners[cl * k_count + k] = st.fetch(x, b, c0 + cl);
                    }
                    stencils.push(st);
                }

                // weight and bias gradients
                for oo in 0..group_out {
                    let o = g * group_out + oo;
                    let u = d_out.get(b, o, m, q);
                    part.d_bias[o] += u;
                    if u == 0.0 {
                        continue;
                    }
                    for cl in 0..group_in {
                        for (k, st) in stencils.iter().enumerate() {
                            let s = st.value(corners[cl * k_count + k]);
                            part.d_weights[layer.weights.idx(o, cl, 0, k)] += u * s;
                        }
                    }
                }

                // position and input gradients share the upstream-times-weight
                // factor summed over the group's output channels
                for cl in 0..group_in {
                    for (k, st) in stencils.iter().enumerate() {
                        let mut t = 0.0;
                        for oo in 0..group_out {
                            let o = g * group_out + oo;
                            t += d_out.get(b, o, m, q) * layer.weight(o, cl, k);
                        }
                        if t == 0.0 {
                            continue;
                        }
                        let q4 = corners[cl * k_count + k];
                        if k >= first_free {
                            let slot = &mut part.d_positions[set * free + (k - first_free)];
                            slot.0 += t * st.d_row(q4);
                            slot.1 += t * st.d_col(q4);
                        }
                        let coef = st.coefficients();
                        for (corner, w) in st.corners().into_iter().zip(coef) {
                            let (r, cc) = corner;
                            if r >= 0 && cc >= 0 && (r as usize) < ih && (cc as usize) < iw {
                                part.d_input
                                    [((c0 + cl) * ih + r as usize) * iw + cc as usize] += t * w;
                            }
                        }
                    }
                }
            }
        }
    }
    part
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::forward::acu_forward;
    use crate::ops::geometry::ConvGeometry;
    use crate::ops::layer::GroupMode;
    use crate::ops::positions::PositionSet;
    use crate::tensor::he_init;

    fn small_layer() -> AcuLayer {
        let geo = ConvGeometry::simple(2, 2, 1).unwrap();
        let weights = he_init((2, 2, 1, 3), 6, 81).unwrap();
        let positions =
            PositionSet::new(1, 3, vec![(0.0, 0.0), (0.4, -1.6), (1.3, 0.7)]).unwrap();
        AcuLayer::new(geo, weights, vec![0.1, -0.2], positions, GroupMode::Multi).unwrap()
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let layer = small_layer();
        let x = he_init((2, 2, 5, 5), 2, 82).unwrap();
        let d_out = Tensor4::zeros(2, 2, 5, 5);
        let g = acu_backward(&x, &layer, &d_out).unwrap();
        assert!(g.d_weights.as_slice().iter().all(|&v| v == 0.0));
        assert!(g.d_bias.iter().all(|&v| v == 0.0));
        assert!(g.d_positions[0].iter().all(|&(a, b)| a == 0.0 && b == 0.0));
        assert!(g.d_input.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn constant_field_has_zero_position_gradient_in_the_interior() {
        // A bilinear interpolant of a constant does not move with position,
        // so as long as no sampled stencil touches the zero-extended border
        // the position gradient vanishes exactly.
        let geo = ConvGeometry::simple(1, 1, 1).unwrap();
        let layer = AcuLayer::new(
            geo,
            Tensor4::filled(1, 1, 1, 2, 0.7),
            vec![0.0],
            PositionSet::new(1, 2, vec![(0.0, 0.0), (0.5, 0.5)]).unwrap(),
            GroupMode::Multi,
        )
        .unwrap();
        let x = Tensor4::filled(1, 1, 7, 7, 3.0);
        // upstream support restricted to interior outputs
        let mut d_out = Tensor4::zeros(1, 1, 7, 7);
        for m in 2..5 {
            for q in 2..5 {
                d_out.set(0, 0, m, q, 1.0);
            }
        }
        let g = acu_backward(&x, &layer, &d_out).unwrap();
        assert_eq!(g.d_positions[0][0], (0.0, 0.0));
    }

    #[test]
    fn matches_finite_differences_on_a_random_instance() {
        let layer = small_layer();
        let x = he_init((1, 2, 5, 5), 2, 83).unwrap();
        let d_out = he_init((1, 2, 5, 5), 2, 84).unwrap();
        let g = acu_backward(&x, &layer, &d_out).unwrap();

        let loss = |l: &AcuLayer, xx: &Tensor4| -> f64 {
            acu_forward(xx, l)
                .unwrap()
                .as_slice()
                .iter()
                .zip(d_out.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        let rel = |a: f64, f: f64| (a - f).abs() / a.abs().max(f.abs()).max(1e-8);

        // every weight
        for i in 0..layer.weights.numel() {
            let mut lp = layer.clone();
            lp.weights.as_mut_slice()[i] += h;
            let mut lm = layer.clone();
            lm.weights.as_mut_slice()[i] -= h;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
            assert!(
                rel(g.d_weights.as_slice()[i], fd) <= 1e-5,
                "weight {i}: {} vs {fd}",
                g.d_weights.as_slice()[i]
            );
        }
        // every free position coordinate
        for k in 1..3 {
            let (a0, b0) = layer.positions.get(0, k);
            for axis in 0..2 {
                let mut lp = layer.clone();
                let mut lm = layer.clone();
                if axis == 0 {
                    lp.positions.set(0, k, a0 + h, b0).unwrap();
                    lm.positions.set(0, k, a0 - h, b0).unwrap();
                } else {
                    lp.positions.set(0, k, a0, b0 + h).unwrap();
                    lm.positions.set(0, k, a0, b0 - h).unwrap();
                }
                let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
                let analytic = if axis == 0 {
                    g.d_positions[0][k - 1].0
                } else {
                    g.d_positions[0][k - 1].1
                };
                assert!(rel(analytic, fd) <= 1e-5, "pos {k}.{axis}: {analytic} vs {fd}");
            }
        }
        // every input element
        for i in 0..x.numel() {
            let mut xp = x.clone();
            xp.as_mut_slice()[i] += h;
            let mut xm = x.clone();
            xm.as_mut_slice()[i] -= h;
            let fd = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
            assert!(
                rel(g.d_input.as_slice()[i], fd) <= 1e-5,
                "input {i}: {} vs {fd}",
                g.d_input.as_slice()[i]
            );
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let layer = small_layer();
        let x = he_init((1, 2, 5, 5), 2, 85).unwrap();
        let d_out = Tensor4::zeros(1, 2, 4, 4);
        assert!(acu_backward(&x, &layer, &d_out).is_err());
    }

    #[test]
    fn depthwise_groups_accumulate_independently() {
        let geo = ConvGeometry::simple(3, 3, 3).unwrap();
        let weights = he_init((3, 1, 1, 2), 2, 86).unwrap();
        let positions = PositionSet::new(
            3,
            2,
            vec![
                (0.0, 0.0),
                (0.5, 0.5),
                (0.0, 0.0),
                (-0.5, 0.25),
                (0.0, 0.0),
                (1.25, -0.75),
            ],
        )
        .unwrap();
        let layer =
            AcuLayer::new(geo, weights, vec![0.0; 3], positions, GroupMode::Multi).unwrap();
        let x = he_init((1, 3, 5, 5), 2, 87).unwrap();
        // upstream only on output channel 1: only group 1 gets gradients
        let mut d_out = Tensor4::zeros(1, 3, 5, 5);
        d_out.set(0, 1, 2, 2, 1.0);
        let g = acu_backward(&x, &layer, &d_out).unwrap();
        assert_eq!(g.d_positions[0][0], (0.0, 0.0));
        assert_ne!(g.d_positions[1][0], (0.0, 0.0));
        assert_eq!(g.d_positions[2][0], (0.0, 0.0));
        for c in [0usize, 2] {
            for r in 0..5 {
                for q in 0..5 {
                    assert_eq!(g.d_input.get(0, c, r, q), 0.0);
                }
            }
        }
    }
}
