//! Forward pass of the position-based unit.
//!
//! For output location `(m, q)` of channel `o` in group `g`:
//!
//! ```text
//! y[n,o,m,q] = bias[o] + sum_{c in group g} sum_k w[o,c,k]
//!              * sample(x, n, c, m*s_h - p_h + alpha_k^g, q*s_w - p_w + beta_k^g)
//! ```
//!
//! `sample` is bilinear with zero extension. Because every output channel of
//! a group shares the group's sampling points, the interpolated values are
//! computed once per `(location, synapse, input channel)` and reused across
//! the group's output channels.
//!
//! Batch items are independent; the pass parallelizes over the batch with
//! each output element written exactly once, so results do not depend on the
//! thread count.

use rayon::prelude::*;

use crate::error::Result;
use crate::ops::bilinear::Stencil;
use crate::ops::layer::AcuLayer;
use crate::tensor::Tensor4;

pub fn acu_forward(x: &Tensor4, layer: &AcuLayer) -> Result<Tensor4> {
    layer.validate()?;
    let (n, co, oh, ow) = layer.output_dims(x)?;
    let mut out = Tensor4::zeros(n, co, oh, ow);
    let per_item = co * oh * ow;
    out.as_mut_slice()
        .par_chunks_mut(per_item)
        .enumerate()
        .for_each(|(b, chunk)| forward_item(x, layer, b, oh, ow, chunk));
    Ok(out)
}

fn forward_item(x: &Tensor4, layer: &AcuLayer, b: usize, oh: usize, ow: usize, out: &mut [f64]) {
    let geo = &layer.geometry;
    let k_count = layer.synapses();
    let group_in = geo.group_in();
    let group_out = geo.group_out();
    let (s_h, s_w) = geo.stride;
    let (p_h, p_w) = (geo.padding.0 as f64, geo.padding.1 as f64);
    // samples[cl * k_count + k] for the current (group, location)
    let mut samples = vec![0.0; group_in * k_count];

    for g in 0..geo.groups {
        let c0 = g * group_in;
        for m in 0..oh {
            for q in 0..ow {
                let anchor_r = (m * s_h) as f64 - p_h;
                let anchor_c = (q * s_w) as f64 - p_w;
                for k in 0..k_count {
                    let (alpha, beta) = layer.position(g, k);
                    let st = Stencil::new(anchor_r + alpha, anchor_c + beta);
                    for cl in 0..group_in {
                        samples[cl * k_count + k] = st.value(st.fetch(x, b, c0 + cl));
                    }
                }
                for oo in 0..group_out {
                    let o = g * group_out + oo;
                    let mut acc = layer.bias[o];
                    for cl in 0..group_in {
                        let row = &samples[cl * k_count..(cl + 1) * k_count];
                        for (k, s) in row.iter().enumerate() {
                            acc += layer.weight(o, cl, k) * s;
                        }
                    }
                    out[(o * oh + m) * ow + q] = acc;
                }
            }
        }
    }
}
