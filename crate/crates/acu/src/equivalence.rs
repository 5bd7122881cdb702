//! Lowering a position-based unit to an equivalent dense convolution.
//!
//! Every synapse weight `w` at fractional displacement `(alpha, beta)` is
//! spread onto its four neighboring lattice taps with the bilinear
//! coefficients
//!
//! ```text
//! w11 = (1-da)(1-db) w     w21 = da (1-db) w
//! w12 = (1-da) db    w     w22 = da db     w
//! ```
//!
//! and overlapping contributions from different synapses accumulate. The
//! resulting kernel applied as an ordinary convolution (with its origin tap
//! honored) reproduces the unit's output exactly, because interpolating the
//! input and extrapolating the weight are the same bilinear form read in two
//! directions. The four coefficients sum to one, so each `(o, c)` kernel
//! slice sums to the synapse weight sum of that channel pair.
//!
//! The dense kernel is usually sparse: at most `4K` nonzero taps per slice,
//! inside a box bounded by the largest displacement magnitudes. The extent
//! is computed tight per layer from the actual positions.

use crate::error::{Error, Result};
use crate::ops::geometry::ConvGeometry;
use crate::ops::layer::AcuLayer;
use crate::tensor::Tensor4;

/// Dense convolution weight produced by extrapolation.
///
/// `weights` has shape `(C_O, C_I/G, KH, KW)`; `origin` is the `(row, col)`
/// index of the tap corresponding to displacement `(0, 0)`. Bias is not part
/// of the kernel and is added after convolution.
#[derive(Debug, Clone, PartialEq)]
pub struct ExtrapolatedKernel {
    pub weights: Tensor4,
    pub origin: (usize, usize),
}

impl ExtrapolatedKernel {
    /// Spatial extent `(KH, KW)` of the kernel.
    pub fn extent(&self) -> (usize, usize) {
        let (_, _, kh, kw) = self.weights.dims();
        (kh, kw)
    }
}

/// Builds the dense kernel equivalent of a layer.
pub fn extrapolate_weights(layer: &AcuLayer) -> Result<ExtrapolatedKernel> {
    layer.validate()?;
    let geo = &layer.geometry;
    let k_count = layer.synapses();

    // Tight tap bounds over all stored position sets. The origin is always
    // included so the kernel has a well-defined (0,0) tap.
    let (mut r_lo, mut r_hi, mut c_lo, mut c_hi) = (0i64, 0i64, 0i64, 0i64);
    for set in 0..layer.position_sets() {
        for &(alpha, beta) in layer.positions.group_offsets(set) {
            let (fr, da) = floor_frac(alpha);
            let (fc, db) = floor_frac(beta);
            r_lo = r_lo.min(fr);
            c_lo = c_lo.min(fc);
            r_hi = r_hi.max(fr + (da > 0.0) as i64);
            c_hi = c_hi.max(fc + (db > 0.0) as i64);
        }
    }
    let kh = (r_hi - r_lo + 1) as usize;
    let kw = (c_hi - c_lo + 1) as usize;
    let mut weights = Tensor4::zeros(geo.out_channels, geo.group_in(), kh, kw);

    for o in 0..geo.out_channels {
        let g = geo.group_of_output(o);
        for cl in 0..geo.group_in() {
            for k in 0..k_count {
                let w = layer.weight(o, cl, k);
                let (alpha, beta) = layer.position(g, k);
                let (fr, da) = floor_frac(alpha);
                let (fc, db) = floor_frac(beta);
                let ri = (fr - r_lo) as usize;
                let ci = (fc - c_lo) as usize;
                let mut bump = |i: usize, j: usize, coef: f64| {
                    let idx = weights.idx(o, cl, i, j);
                    weights.as_mut_slice()[idx] += coef * w;
                };
                bump(ri, ci, (1.0 - da) * (1.0 - db));
                if da > 0.0 {
                    bump(ri + 1, ci, da * (1.0 - db));
                }
                if db > 0.0 {
                    bump(ri, ci + 1, (1.0 - da) * db);
                }
                if da > 0.0 && db > 0.0 {
                    bump(ri + 1, ci + 1, da * db);
                }
            }
        }
    }
    Ok(ExtrapolatedKernel {
        weights,
        origin: ((-r_lo) as usize, (-c_lo) as usize),
    })
}

#[inline]
fn floor_frac(v: f64) -> (i64, f64) {
    let f = v.floor();
    (f as i64, v - f)
}

/// Grouped convolution with an extrapolated kernel, origin tap honored.
///
/// The output matches the shape the source unit would produce; bias is not
/// applied.
pub fn conv_with_extrapolated(
    x: &Tensor4,
    kernel: &ExtrapolatedKernel,
    geometry: &ConvGeometry,
) -> Result<Tensor4> {
    let (co, ci, kh, kw) = kernel.weights.dims();
    if co != geometry.out_channels || ci != geometry.group_in() {
        return Err(Error::InvalidArgument(format!(
            "kernel shape {:?} does not match geometry (C_O={}, C_I/G={})",
            kernel.weights.dims(),
            geometry.out_channels,
            geometry.group_in()
        )));
    }
    if x.c() != geometry.in_channels {
        return Err(Error::InvalidArgument(format!(
            "input has {} channels, geometry expects {}",
            x.c(),
            geometry.in_channels
        )));
    }
    let (oh, ow) = geometry.anchor_output_hw(x.h(), x.w());
    let (s_h, s_w) = geometry.stride;
    let (p_h, p_w) = (geometry.padding.0 as i64, geometry.padding.1 as i64);
    let (r0, c0) = (kernel.origin.0 as i64, kernel.origin.1 as i64);
    let mut out = Tensor4::zeros(x.n(), co, oh, ow);

    for n in 0..x.n() {
        for o in 0..co {
            let base_ch = geometry.group_of_output(o) * geometry.group_in();
            for m in 0..oh {
                for q in 0..ow {
                    let anchor_r = (m * s_h) as i64 - p_h;
                    let anchor_c = (q * s_w) as i64 - p_w;
                    let mut acc = 0.0;
                    for cl in 0..ci {
                        for i in 0..kh {
                            for j in 0..kw {
                                acc += kernel.weights.get(o, cl, i, j)
                                    * x.get_padded(
                                        n,
                                        base_ch + cl,
                                        anchor_r + i as i64 - r0,
                                        anchor_c + j as i64 - c0,
                                    );
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

/// Summary of how sparse an extrapolated kernel is.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityReport {
    pub extent_h: usize,
    pub extent_w: usize,
    /// Total tap slots over all `(o, c)` slices.
    pub taps: usize,
    pub nonzeros: usize,
    pub density: f64,
    /// Whether the kernel fits the 7x7 box typical of trained units.
    pub fits_7x7: bool,
}

pub fn sparsity_report(kernel: &ExtrapolatedKernel) -> SparsityReport {
    let (kh, kw) = kernel.extent();
    let taps = kernel.weights.numel();
    let nonzeros = kernel.weights.as_slice().iter().filter(|&&v| v != 0.0).count();
    SparsityReport {
        extent_h: kh,
        extent_w: kw,
        taps,
        nonzeros,
        density: nonzeros as f64 / taps as f64,
        fits_7x7: kh <= 7 && kw <= 7,
    }
}

impl SparsityReport {
    pub const CSV_HEADER: &'static str = "layer,extent_h,extent_w,nonzeros,density";

    pub fn csv_row(&self, layer: &str) -> String {
        format!(
            "{layer},{},{},{},{}",
            self.extent_h, self.extent_w, self.nonzeros, self.density
        )
    }
}

/// Random layer drawn for the equivalence sweep: cardinality from
/// `{1, 2, 4, depthwise}`, synapse count from `{1, 3, 5, 9}`, both group
/// modes, positions uniform in `[-3, 3]^2`.
pub fn random_sweep_layer(seed: u64, case: usize) -> AcuLayer {
    use crate::ops::layer::GroupMode;
    use crate::ops::positions::PositionSet;
    use rand::Rng;

    let mut rng = crate::tensor::stream(seed, &format!("equiv-sweep-{case}"));
    let channels = 4;
    let groups = [1, 2, 4, channels][rng.random_range(0..4)];
    let synapses = [1, 3, 5, 9][rng.random_range(0..4)];
    let group_mode = if rng.random_range(0..4) == 0 {
        GroupMode::Shared
    } else {
        GroupMode::Multi
    };
    let sets = match group_mode {
        GroupMode::Multi => groups,
        GroupMode::Shared => 1,
    };
    let geo = ConvGeometry::simple(channels, channels, groups).unwrap();
    let mut offsets = Vec::with_capacity(sets * synapses);
    for _ in 0..sets {
        offsets.push((0.0, 0.0));
        for _ in 1..synapses {
            offsets.push((rng.random_range(-3.0..=3.0), rng.random_range(-3.0..=3.0)));
        }
    }
    let mut weights = Tensor4::zeros(channels, geo.group_in(), 1, synapses);
    for v in weights.as_mut_slice() {
        *v = rng.random_range(-1.0..=1.0);
    }
    let bias: Vec<f64> = (0..channels).map(|_| rng.random_range(-0.5..=0.5)).collect();
    AcuLayer::new(
        geo,
        weights,
        bias,
        PositionSet::new(sets, synapses, offsets).unwrap(),
        group_mode,
    )
    .unwrap()
}

/// Runs `cases` random layers against their lowered dense kernels and
/// returns the largest elementwise deviation seen.
pub fn equivalence_sweep(seed: u64, cases: usize) -> Result<f64> {
    use crate::ops::forward::acu_forward;

    let mut worst = 0.0f64;
    for case in 0..cases {
        let layer = random_sweep_layer(seed, case);
        let x = crate::tensor::he_init(
            (2, layer.geometry.in_channels, 8, 8),
            2,
            crate::tensor::derive_seed(seed, &format!("equiv-input-{case}")),
        )?;
        let direct = acu_forward(&x, &layer)?;
        let kernel = extrapolate_weights(&layer)?;
        let lowered = conv_with_extrapolated(&x, &kernel, &layer.geometry)?
            .with_channel_bias(&layer.bias)?;
        worst = worst.max(direct.max_abs_diff(&lowered));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops::forward::acu_forward;
    use crate::ops::layer::GroupMode;
    use crate::ops::naive::ConvLayer;
    use crate::ops::positions::{make_grid_positions, PositionSet};
    use crate::tensor::he_init;
    use proptest::prelude::*;

    #[test]
    fn integer_grid_reproduces_the_original_weights() {
        let geo = ConvGeometry::simple(1, 1, 1).unwrap();
        let w = he_init((1, 1, 1, 9), 9, 91).unwrap();
        let layer = AcuLayer::new(
            geo,
            w.clone(),
            vec![0.0],
            make_grid_positions(3, 3, 1, 1).unwrap(),
            GroupMode::Multi,
        )
        .unwrap();
        let kernel = extrapolate_weights(&layer).unwrap();
        assert_eq!(kernel.extent(), (3, 3));
        assert_eq!(kernel.origin, (1, 1));
        for k in 0..9 {
            let (a, b) = layer.position(0, k);
            let (i, j) = ((a + 1.0) as usize, (b + 1.0) as usize);
            assert_eq!(kernel.weights.get(0, 0, i, j), w.get(0, 0, 0, k));
        }
    }

    #[test]
    fn half_pixel_synapse_spreads_to_quarter_taps() {
        let geo = ConvGeometry::simple(1, 1, 1).unwrap();
        let layer = AcuLayer::new(
            geo,
            Tensor4::filled(1, 1, 1, 1, 1.0),
            vec![0.0],
            PositionSet::new_unpinned(1, 1, vec![(0.5, 0.5)]).unwrap(),
            GroupMode::Multi,
        )
        .unwrap();
        let kernel = extrapolate_weights(&layer).unwrap();
        assert_eq!(kernel.extent(), (2, 2));
        assert_eq!(kernel.origin, (0, 0));
        for i in 0..2 {
            for j in 0..2 {
                assert_eq!(kernel.weights.get(0, 0, i, j), 0.25);
            }
        }
    }

    #[test]
    fn overlapping_synapses_accumulate() {
        // p0 = (0,0) w=1 and p1 = (0.5,0) w=2 share the origin tap.
        let geo = ConvGeometry::simple(1, 1, 1).unwrap();
        let layer = AcuLayer::new(
            geo,
            Tensor4::from_vec(1, 1, 1, 2, vec![1.0, 2.0]).unwrap(),
            vec![0.0],
            PositionSet::new(1, 2, vec![(0.0, 0.0), (0.5, 0.0)]).unwrap(),
            GroupMode::Multi,
        )
        .unwrap();
        let kernel = extrapolate_weights(&layer).unwrap();
        assert_eq!(kernel.extent(), (2, 1));
        let (r0, c0) = kernel.origin;
        assert_eq!(kernel.weights.get(0, 0, r0, c0), 2.0);
        assert_eq!(kernel.weights.get(0, 0, r0 + 1, c0), 1.0);
    }

    #[test]
    fn grid_kernel_convolves_identically_to_naive() {
        let geo = ConvGeometry::simple(2, 2, 1).unwrap();
        let w = he_init((2, 2, 1, 9), 18, 92).unwrap();
        let layer = AcuLayer::new(
            geo,
            w,
            vec![0.0; 2],
            make_grid_positions(3, 3, 1, 1).unwrap(),
            GroupMode::Multi,
        )
        .unwrap();
        let kernel = extrapolate_weights(&layer).unwrap();
        let x = he_init((1, 2, 6, 6), 2, 93).unwrap();
        let by_kernel = conv_with_extrapolated(&x, &kernel, &geo).unwrap();

        let conv_geo = ConvGeometry::new(2, 2, 1, (1, 1), (1, 1)).unwrap();
        let conv = ConvLayer::new(conv_geo, kernel.weights.clone(), vec![0.0; 2]).unwrap();
        let by_conv = conv.forward(&x).unwrap();
        assert_eq!(by_kernel.dims(), by_conv.dims());
        assert_eq!(by_kernel.max_abs_diff(&by_conv), 0.0);
    }

    #[test]
    fn fractional_two_group_layer_matches_the_unit() {
        let geo = ConvGeometry::simple(4, 4, 2).unwrap();
        let w = he_init((4, 2, 1, 5), 10, 94).unwrap();
        let mut offsets = Vec::new();
        let mut rng_vals = he_init((1, 1, 2, 10), 2, 95).unwrap();
        for v in rng_vals.as_mut_slice().iter_mut() {
            *v *= 1.5;
        }
        for g in 0..2 {
            offsets.push((0.0, 0.0));
            for k in 1..5 {
                offsets.push((
                    rng_vals.get(0, 0, g, 2 * k - 2),
                    rng_vals.get(0, 0, g, 2 * k - 1),
                ));
            }
        }
        let layer = AcuLayer::new(
            geo,
            w,
            vec![0.3, -0.1, 0.0, 0.7],
            PositionSet::new(2, 5, offsets).unwrap(),
            GroupMode::Multi,
        )
        .unwrap();
        let x = he_init((2, 4, 7, 7), 2, 96).unwrap();
        let direct = acu_forward(&x, &layer).unwrap();
        let kernel = extrapolate_weights(&layer).unwrap();
        let lowered = conv_with_extrapolated(&x, &kernel, &geo)
            .unwrap()
            .with_channel_bias(&layer.bias)
            .unwrap();
        assert!(direct.max_abs_diff(&lowered) <= 1e-10);
    }

    #[test]
    fn zero_input_convolves_to_zero() {
        let geo = ConvGeometry::simple(1, 1, 1).unwrap();
        let layer = AcuLayer::new(
            geo,
            Tensor4::filled(1, 1, 1, 2, 3.0),
            vec![5.0],
            PositionSet::new(1, 2, vec![(0.0, 0.0), (0.25, -0.75)]).unwrap(),
            GroupMode::Multi,
        )
        .unwrap();
        let kernel = extrapolate_weights(&layer).unwrap();
        let x = Tensor4::zeros(1, 1, 4, 4);
        let y = conv_with_extrapolated(&x, &kernel, &geo).unwrap();
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sparsity_of_dense_grid() {
        let geo = ConvGeometry::simple(1, 1, 1).unwrap();
        let layer = AcuLayer::new(
            geo,
            Tensor4::filled(1, 1, 1, 9, 1.0),
            vec![0.0],
            make_grid_positions(3, 3, 1, 1).unwrap(),
            GroupMode::Multi,
        )
        .unwrap();
        let report = sparsity_report(&extrapolate_weights(&layer).unwrap());
        assert_eq!((report.extent_h, report.extent_w), (3, 3));
        assert_eq!(report.nonzeros, 9);
        assert_eq!(report.density, 1.0);
        assert!(report.fits_7x7);
    }

    #[test]
    fn sparsity_of_single_fractional_synapse() {
        let geo = ConvGeometry::simple(1, 1, 1).unwrap();
        let layer = AcuLayer::new(
            geo,
            Tensor4::filled(1, 1, 1, 1, 1.0),
            vec![0.0],
            PositionSet::new_unpinned(1, 1, vec![(0.5, 0.5)]).unwrap(),
            GroupMode::Multi,
        )
        .unwrap();
        let report = sparsity_report(&extrapolate_weights(&layer).unwrap());
        assert_eq!((report.extent_h, report.extent_w), (2, 2));
        assert_eq!(report.nonzeros, 4);
    }

    proptest! {
        /// Mass conservation and the 4K nonzero bound over random layers.
        #[test]
        fn tap_sums_equal_weight_sums(seed in 0u64..500) {
            let geo = ConvGeometry::simple(2, 2, 1).unwrap();
            let w = he_init((2, 2, 1, 4), 8, seed).unwrap();
            let mut offsets = vec![(0.0, 0.0)];
            let spread = he_init((1, 1, 1, 6), 1, seed.wrapping_add(1)).unwrap();
            for k in 0..3 {
                offsets.push((
                    2.0 * spread.get(0, 0, 0, 2 * k),
                    2.0 * spread.get(0, 0, 0, 2 * k + 1),
                ));
            }
            let layer = AcuLayer::new(
                geo,
                w,
                vec![0.0; 2],
                PositionSet::new(1, 4, offsets).unwrap(),
                GroupMode::Multi,
            )
            .unwrap();
            let kernel = extrapolate_weights(&layer).unwrap();
            let (_, _, kh, kw) = kernel.weights.dims();
            for o in 0..2 {
                for c in 0..2 {
                    let mut tap_sum = 0.0;
                    let mut nonzeros = 0;
                    for i in 0..kh {
                        for j in 0..kw {
                            let v = kernel.weights.get(o, c, i, j);
                            tap_sum += v;
                            if v != 0.0 {
                                nonzeros += 1;
                            }
                        }
                    }
                    let w_sum: f64 = (0..4).map(|k| layer.weight(o, c, k)).sum();
                    prop_assert!((tap_sum - w_sum).abs() <= 1e-12);
                    prop_assert!(nonzeros <= 4 * 4);
                }
            }
        }
    }
}
