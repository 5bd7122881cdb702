//! Direct dense convolution, the fixed-shape reference against which the
//! position-based unit is checked.
//!
//! Taps are anchored at the kernel's top-left corner:
//!
//! ```text
//! y[n,o,m,q] = sum_c sum_{i,j} w[o,c,i,j] * x[n,c, m*s_h + i - p_h, q*s_w + j - p_w] + bias[o]
//! ```
//!
//! with reads outside the input contributing zero. The grouped variant
//! restricts `c` to the input channels of `o`'s group.

use crate::error::{Error, Result};
use crate::ops::geometry::ConvGeometry;
use crate::tensor::Tensor4;

/// Dense convolution layer: `(C_O, C_I/G, KH, KW)` weights plus bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub geometry: ConvGeometry,
    pub weights: Tensor4,
    pub bias: Vec<f64>,
}

impl ConvLayer {
    pub fn new(geometry: ConvGeometry, weights: Tensor4, bias: Vec<f64>) -> Result<ConvLayer> {
        let layer = ConvLayer {
            geometry,
            weights,
            bias,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.geometry;
        let (co, ci, _, _) = self.weights.dims();
        if co != g.out_channels || ci != g.group_in() {
            return Err(Error::InvalidArgument(format!(
                "conv weights shape {:?} does not match geometry (C_O={}, C_I/G={})",
                self.weights.dims(),
                g.out_channels,
                g.group_in()
            )));
        }
        if self.bias.len() != g.out_channels {
            return Err(Error::InvalidArgument(format!(
                "conv bias length {} does not match out_channels {}",
                self.bias.len(),
                g.out_channels
            )));
        }
        Ok(())
    }

    pub fn kernel_hw(&self) -> (usize, usize) {
        let (_, _, kh, kw) = self.weights.dims();
        (kh, kw)
    }

    pub fn forward(&self, x: &Tensor4) -> Result<Tensor4> {
        naive_conv_forward(x, self)
    }

    /// Gradients of `L = sum(d_out . y)` with respect to weights, bias, and
    /// input.
    pub fn backward(&self, x: &Tensor4, d_out: &Tensor4) -> Result<(Tensor4, Vec<f64>, Tensor4)> {
        self.validate()?;
        let y_dims = {
            let (kh, kw) = self.kernel_hw();
            let (oh, ow) = self.geometry.conv_output_hw(x.h(), x.w(), kh, kw)?;
            (x.n(), self.geometry.out_channels, oh, ow)
        };
        if d_out.dims() != y_dims {
            return Err(Error::InvalidArgument(format!(
                "d_out shape {:?} does not match forward output {y_dims:?}",
                d_out.dims()
            )));
        }
        let g = &self.geometry;
        let (kh, kw) = self.kernel_hw();
        let (s_h, s_w) = g.stride;
        let (p_h, p_w) = (g.padding.0 as i64, g.padding.1 as i64);
        let (wn, wc, wh, ww) = self.weights.dims();
        let mut d_weights = Tensor4::zeros(wn, wc, wh, ww);
        let mut d_bias = vec![0.0; g.out_channels];
        let mut d_input = Tensor4::zeros(x.n(), x.c(), x.h(), x.w());
        let (_, _, oh, ow) = y_dims;

        for n in 0..x.n() {
            for o in 0..g.out_channels {
                let grp = g.group_of_output(o);
                let c0 = grp * g.group_in();
                for m in 0..oh {
                    for q in 0..ow {
                        let u = d_out.get(n, o, m, q);
                        if u == 0.0 {
                            continue;
                        }
                        d_bias[o] += u;
                        let base_r = (m * s_h) as i64 - p_h;
                        let base_c = (q * s_w) as i64 - p_w;
                        for cl in 0..g.group_in() {
                            let ch = c0 + cl;
                            for i in 0..kh {
                                let r = base_r + i as i64;
                                if r < 0 || r >= x.h() as i64 {
                                    continue;
                                }
                                for j in 0..kw {
                                    let cc = base_c + j as i64;
                                    if cc < 0 || cc >= x.w() as i64 {
                                        continue;
                                    }
                                    let xi = x.idx(n, ch, r as usize, cc as usize);
                                    let wi = self.weights.idx(o, cl, i, j);
                                    d_weights.as_mut_slice()[wi] += u * x.as_slice()[xi];
                                    d_input.as_mut_slice()[xi] += u * self.weights.as_slice()[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok((d_weights, d_bias, d_input))
    }
}

/// Grouped dense convolution.
pub fn naive_conv_forward(x: &Tensor4, layer: &ConvLayer) -> Result<Tensor4> {
    layer.validate()?;
    let g = &layer.geometry;
    if x.c() != g.in_channels {
        return Err(Error::InvalidArgument(format!(
            "input has {} channels, conv expects {}",
            x.c(),
            g.in_channels
        )));
    }
    let (kh, kw) = layer.kernel_hw();
    let (oh, ow) = g.conv_output_hw(x.h(), x.w(), kh, kw)?;
    let (s_h, s_w) = g.stride;
    let (p_h, p_w) = (g.padding.0 as i64, g.padding.1 as i64);
    let mut out = Tensor4::zeros(x.n(), g.out_channels, oh, ow);

    for n in 0..x.n() {
        for o in 0..g.out_channels {
            let grp = g.group_of_output(o);
            let c0 = grp * g.group_in();
            for m in 0..oh {
                for q in 0..ow {
                    let base_r = (m * s_h) as i64 - p_h;
                    let base_c = (q * s_w) as i64 - p_w;
                    let mut acc = layer.bias[o];
                    for cl in 0..g.group_in() {
                        let ch = c0 + cl;
                        for i in 0..kh {
                            for j in 0..kw {
                                acc += layer.weight_at(o, cl, i, j)
                                    * x.get_padded(n, ch, base_r + i as i64, base_c + j as i64);
                            }
                        }
                    }
                    out.set(n, o, m, q, acc);
                }
            }
        }
    }
    Ok(out)
}

impl ConvLayer {
    #[inline]
    fn weight_at(&self, o: usize, cl: usize, i: usize, j: usize) -> f64 {
        self.weights.get(o, cl, i, j)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::he_init;

    fn conv(
        ci: usize,
        co: usize,
        groups: usize,
        k: (usize, usize),
        padding: (usize, usize),
        seed: u64,
    ) -> ConvLayer {
        let geo = ConvGeometry::new(ci, co, groups, (1, 1), padding).unwrap();
        let weights = he_init((co, ci / groups, k.0, k.1), ci * k.0 * k.1, seed).unwrap();
        ConvLayer::new(geo, weights, vec![0.0; co]).unwrap()
    }

    #[test]
    fn identity_kernel_passes_input_through() {
        let geo = ConvGeometry::simple(1, 1, 1).unwrap();
        let layer = ConvLayer::new(geo, Tensor4::filled(1, 1, 1, 1, 1.0), vec![0.0]).unwrap();
        let x = he_init((1, 1, 4, 4), 2, 3).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn all_ones_3x3_sums_to_nine() {
        let geo = ConvGeometry::simple(1, 1, 1).unwrap();
        let layer = ConvLayer::new(geo, Tensor4::filled(1, 1, 3, 3, 1.0), vec![0.0]).unwrap();
        let x = Tensor4::filled(1, 1, 3, 3, 1.0);
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.dims(), (1, 1, 1, 1));
        assert_eq!(y.get(0, 0, 0, 0), 9.0);
    }

    #[test]
    fn matches_brute_force_loop() {
        // Independent elementwise oracle, written with no shared code path.
        let layer = conv(1, 1, 1, (2, 2), (0, 0), 5);
        let x = he_init((1, 1, 2, 2), 2, 6).unwrap();
        let y = layer.forward(&x).unwrap();
        assert_eq!(y.dims(), (1, 1, 1, 1));
        let mut expect = 0.0;
        for i in 0..2 {
            for j in 0..2 {
                expect += layer.weights.get(0, 0, i, j) * x.get(0, 0, i, j);
            }
        }
        assert!((y.get(0, 0, 0, 0) - expect).abs() <= 1e-12);
    }

    #[test]
    fn grouped_conv_ignores_other_groups() {
        let layer = conv(4, 4, 2, (1, 1), (0, 0), 9);
        let x = he_init((1, 4, 3, 3), 2, 10).unwrap();
        let y = layer.forward(&x).unwrap();
        // Perturb a channel of group 1; group 0 outputs must not move.
        let mut x2 = x.clone();
        x2.set(0, 3, 1, 1, 100.0);
        let y2 = layer.forward(&x2).unwrap();
        for o in 0..2 {
            for m in 0..3 {
                for q in 0..3 {
                    assert_eq!(y.get(0, o, m, q), y2.get(0, o, m, q));
                }
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let layer = conv(2, 2, 1, (3, 3), (1, 1), 11);
        let x = he_init((1, 2, 4, 4), 2, 12).unwrap();
        let d_out = he_init((1, 2, 4, 4), 2, 13).unwrap();
        let (dw, db, dx) = layer.backward(&x, &d_out).unwrap();

        let loss = |l: &ConvLayer, x: &Tensor4| -> f64 {
            let y = l.forward(x).unwrap();
            y.as_slice()
                .iter()
                .zip(d_out.as_slice())
                .map(|(a, b)| a * b)
                .sum()
        };
        let h = 1e-6;
        // spot-check one weight, one bias, one input element
        let mut lp = layer.clone();
        let wi = lp.weights.idx(1, 0, 2, 1);
        lp.weights.as_mut_slice()[wi] += h;
        let mut lm = layer.clone();
        lm.weights.as_mut_slice()[wi] -= h;
        let fd_w = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
        assert!((dw.as_slice()[wi] - fd_w).abs() < 1e-6);

        let mut lp = layer.clone();
        lp.bias[0] += h;
        let mut lm = layer.clone();
        lm.bias[0] -= h;
        let fd_b = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h);
        assert!((db[0] - fd_b).abs() < 1e-6);

        let xi = x.idx(0, 1, 2, 2);
        let mut xp = x.clone();
        xp.as_mut_slice()[xi] += h;
        let mut xm = x.clone();
        xm.as_mut_slice()[xi] -= h;
        let fd_x = (loss(&layer, &xp) - loss(&layer, &xm)) / (2.0 * h);
        assert!((dx.as_slice()[xi] - fd_x).abs() < 1e-6);
    }
}
