//! Independent oracles for the optimized kernels.
//!
//! `oracle_acu_forward` recomputes every sample from scratch in the most
//! literal loop nest possible — no caching, no reuse — so it shares no
//! shortcuts with the production forward pass. `finite_diff_gradients`
//! differentiates the same objective numerically. Both exist to be slow and
//! obviously right.
//!
//! Gradient checks keep position fractional parts away from the lattice:
//! the bilinear interpolant is non-smooth there and the analytic backward
//! pass takes the one-sided derivative, which central differences straddle.

use crate::error::{Error, Result};
use crate::ops::backward::acu_backward;
use crate::ops::forward::acu_forward;
use crate::ops::geometry::ConvGeometry;
use crate::ops::layer::{AcuGradients, AcuLayer, GroupMode};
use crate::ops::positions::PositionSet;
use crate::ops::bilinear::bilinear_sample;
use crate::tensor::{stream, Tensor4};

use rand::Rng;

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-6;
/// Default pass tolerance on the relative error.
pub const GRAD_TOL: f64 = 1e-5;
/// Floor in the relative-error denominator.
pub const REL_FLOOR: f64 = 1e-8;

/// Literal-loop forward pass, identical contract to `acu_forward`.
pub fn oracle_acu_forward(x: &Tensor4, layer: &AcuLayer) -> Result<Tensor4> {
    layer.validate()?;
    let (n, co, oh, ow) = layer.output_dims(x)?;
    let geo = &layer.geometry;
    let mut out = Tensor4::zeros(n, co, oh, ow);
    for b in 0..n {
        for o in 0..co {
            let g = geo.group_of_output(o);
            let c0 = g * geo.group_in();
            for m in 0..oh {
                for q in 0..ow {
                    let mut acc = layer.bias[o];
                    for cl in 0..geo.group_in() {
                        for k in 0..layer.synapses() {
                            let (alpha, beta) = layer.position(g, k);
                            let row = (m * geo.stride.0) as f64 - geo.padding.0 as f64 + alpha;
                            let col = (q * geo.stride.1) as f64 - geo.padding.1 as f64 + beta;
                            acc += layer.weight(o, cl, k)
                                * bilinear_sample(x, b, c0 + cl, row, col);
                        }
                    }
                    out.set(b, o, m, q, acc);
                }
            }
        }
    }
    Ok(out)
}

/// Central difference of a scalar function of one coordinate.
pub fn central_diff(f: impl Fn(f64) -> f64, at: f64, h: f64) -> f64 {
    (f(at + h) - f(at - h)) / (2.0 * h)
}

fn objective(x: &Tensor4, layer: &AcuLayer, d_out: &Tensor4) -> Result<f64> {
    let y = acu_forward(x, layer)?;
    Ok(y.as_slice()
        .iter()
        .zip(d_out.as_slice())
        .map(|(a, b)| a * b)
        .sum())
}

/// Numerical gradients of `L = sum(d_out . acu_forward(x, layer))` for every
/// scalar parameter: each weight, each bias, each free position coordinate,
/// and each input element.
pub fn finite_diff_gradients(
    x: &Tensor4,
    layer: &AcuLayer,
    d_out: &Tensor4,
    h: f64,
) -> Result<AcuGradients> {
    if h <= 0.0 {
        return Err(Error::InvalidArgument("finite-difference step must be > 0".into()));
    }
    layer.validate()?;
    let mut grads = AcuGradients::zeros_like(layer, x);

    for i in 0..layer.weights.numel() {
        let f = |v: f64| {
            let mut l = layer.clone();
            l.weights.as_mut_slice()[i] = v;
            objective(x, &l, d_out).unwrap()
        };
        grads.d_weights.as_mut_slice()[i] = central_diff(f, layer.weights.as_slice()[i], h);
    }
    for o in 0..layer.bias.len() {
        let f = |v: f64| {
            let mut l = layer.clone();
            l.bias[o] = v;
            objective(x, &l, d_out).unwrap()
        };
        grads.d_bias[o] = central_diff(f, layer.bias[o], h);
    }
    let first_free = layer.positions.first_free();
    for set in 0..layer.position_sets() {
        for k in first_free..layer.synapses() {
            let (a0, b0) = layer.positions.get(set, k);
            let fa = |v: f64| {
                let mut l = layer.clone();
                l.positions.set(set, k, v, b0).unwrap();
                objective(x, &l, d_out).unwrap()
            };
            let fb = |v: f64| {
                let mut l = layer.clone();
                l.positions.set(set, k, a0, v).unwrap();
                objective(x, &l, d_out).unwrap()
            };
            grads.d_positions[set][k - first_free] =
                (central_diff(fa, a0, h), central_diff(fb, b0, h));
        }
    }
    for i in 0..x.numel() {
        let f = |v: f64| {
            let mut xx = x.clone();
            xx.as_mut_slice()[i] = v;
            objective(&xx, layer, d_out).unwrap()
        };
        grads.d_input.as_mut_slice()[i] = central_diff(f, x.as_slice()[i], h);
    }
    Ok(grads)
}

/// Outcome of comparing one parameter block against its numerical oracle.
#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub worst_index: usize,
    pub pass: bool,
}

impl GradCheckReport {
    pub const CSV_HEADER: &'static str = "name,max_rel_err,max_abs_err,worst_index,pass";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.name, self.max_rel_err, self.max_abs_err, self.worst_index, self.pass
        )
    }
}

/// Compares analytic and numerical values with the relative error
/// `|a - f| / max(|a|, |f|, 1e-8)`.
pub fn compare_grads(name: &str, analytic: &[f64], numeric: &[f64], tol: f64) -> GradCheckReport {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        worst_index: 0,
        pass: true,
    };
    for (i, (&a, &f)) in analytic.iter().zip(numeric).enumerate() {
        let abs = (a - f).abs();
        let rel = abs / a.abs().max(f.abs()).max(REL_FLOOR);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst_index = i;
        }
        report.max_abs_err = report.max_abs_err.max(abs);
    }
    report.pass = report.max_rel_err <= tol;
    report
}

fn flat_positions(grads: &AcuGradients) -> Vec<f64> {
    (0..grads.d_positions.len())
        .flat_map(|s| grads.position_grad_flat(s))
        .collect()
}

/// Compares a full gradient bundle, one report per parameter block.
pub fn compare_gradient_bundles(
    prefix: &str,
    analytic: &AcuGradients,
    numeric: &AcuGradients,
    tol: f64,
) -> Vec<GradCheckReport> {
    let mut reports = vec![
        compare_grads(
            &format!("{prefix}.weights"),
            analytic.d_weights.as_slice(),
            numeric.d_weights.as_slice(),
            tol,
        ),
        compare_grads(
            &format!("{prefix}.bias"),
            &analytic.d_bias,
            &numeric.d_bias,
            tol,
        ),
    ];
    let ap = flat_positions(analytic);
    if !ap.is_empty() {
        reports.push(compare_grads(
            &format!("{prefix}.positions"),
            &ap,
            &flat_positions(numeric),
            tol,
        ));
    }
    reports.push(compare_grads(
        &format!("{prefix}.input"),
        analytic.d_input.as_slice(),
        numeric.d_input.as_slice(),
        tol,
    ));
    reports
}

struct BatteryShape {
    label: &'static str,
    in_channels: usize,
    out_channels: usize,
    groups: usize,
    synapses: usize,
}

const BATTERY: [BatteryShape; 3] = [
    BatteryShape { label: "g1-k9", in_channels: 2, out_channels: 2, groups: 1, synapses: 9 },
    BatteryShape { label: "g2-k5", in_channels: 4, out_channels: 4, groups: 2, synapses: 5 },
    BatteryShape { label: "dw-k3", in_channels: 4, out_channels: 4, groups: 4, synapses: 3 },
];

/// Builds a random layer of the given battery shape with position fractional
/// parts confined to `[0.2, 0.8]`.
fn battery_layer(shape: &BatteryShape, seed: u64, trial: usize) -> AcuLayer {
    let geo = ConvGeometry::simple(shape.in_channels, shape.out_channels, shape.groups).unwrap();
    let label = format!("{}-t{trial}", shape.label);
    let fan_in = shape.in_channels / shape.groups * shape.synapses;
    let weights = crate::tensor::he_init(
        (shape.out_channels, geo.group_in(), 1, shape.synapses),
        fan_in,
        crate::tensor::derive_seed(seed, &format!("{label}-w")),
    )
    .unwrap();
    let bias_t = crate::tensor::he_init(
        (1, 1, 1, shape.out_channels),
        2,
        crate::tensor::derive_seed(seed, &format!("{label}-b")),
    )
    .unwrap();
    let mut rng = stream(seed, &format!("{label}-p"));
    let mut offsets = Vec::new();
    for _ in 0..shape.groups {
        offsets.push((0.0, 0.0));
        for _ in 1..shape.synapses {
            let int_a = rng.random_range(-2i32..=1) as f64;
            let int_b = rng.random_range(-2i32..=1) as f64;
            let frac_a = rng.random_range(0.2..=0.8);
            let frac_b = rng.random_range(0.2..=0.8);
            offsets.push((int_a + frac_a, int_b + frac_b));
        }
    }
    AcuLayer::new(
        geo,
        weights,
        bias_t.as_slice().to_vec(),
        PositionSet::new(shape.groups, shape.synapses, offsets).unwrap(),
        GroupMode::Multi,
    )
    .unwrap()
}

/// Deterministic gradient-check battery over the standard shape set.
///
/// Runs `trials` random instances of each shape and reports every parameter
/// block at tolerance [`GRAD_TOL`] with step [`FD_STEP`].
pub fn run_gradient_suite(seed: u64, trials: usize) -> Result<Vec<GradCheckReport>> {
    if trials < 1 {
        return Err(Error::InvalidArgument("trials must be >= 1".into()));
    }
    let mut reports = Vec::new();
    for shape in &BATTERY {
        for trial in 0..trials {
            let layer = battery_layer(shape, seed, trial);
            let label = format!("{}-t{trial}", shape.label);
            let x = crate::tensor::he_init(
                (2, shape.in_channels, 5, 5),
                2,
                crate::tensor::derive_seed(seed, &format!("{label}-x")),
            )?;
            let d_out = crate::tensor::he_init(
                layer.output_dims(&x)?.into(),
                2,
                crate::tensor::derive_seed(seed, &format!("{label}-d")),
            )?;
            let analytic = acu_backward(&x, &layer, &d_out)?;
            let numeric = finite_diff_gradients(&x, &layer, &d_out, FD_STEP)?;
            reports.extend(compare_gradient_bundles(&label, &analytic, &numeric, GRAD_TOL));
        }
    }
    Ok(reports)
}

/// Fixed-column text table of reports.
pub fn render_report_table(reports: &[GradCheckReport]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<22} {:>12} {:>12} {:>11} {:>6}\n",
        "parameter", "max_rel_err", "max_abs_err", "worst_index", "pass"
    ));
    for r in reports {
        out.push_str(&format!(
            "{:<22} {:>12.3e} {:>12.3e} {:>11} {:>6}\n",
            r.name,
            r.max_rel_err,
            r.max_abs_err,
            r.worst_index,
            if r.pass { "ok" } else { "FAIL" }
        ));
    }
    out
}

pub fn reports_to_csv(reports: &[GradCheckReport]) -> String {
    let mut out = String::from(GradCheckReport::CSV_HEADER);
    out.push('\n');
    for r in reports {
        out.push_str(&r.csv_row());
        out.push('\n');
    }
    out
}
