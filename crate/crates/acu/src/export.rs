//! CSV exports: learned positions, position histograms, and training traces.
//!
//! All CSV output uses a header row, comma separators, `.` decimals, LF line
//! endings, and no timestamps, so identical runs produce identical bytes.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::train::network::ToyNetwork;
use crate::train::{LossRecord, PositionRecord};

pub const POSITIONS_CSV_HEADER: &str = "layer,group,synapse,alpha,beta";

/// Effective per-group positions of every position-based layer, one row per
/// `(layer, group, synapse)`.
pub fn positions_csv(net: &ToyNetwork) -> String {
    let mut out = String::from(POSITIONS_CSV_HEADER);
    out.push('\n');
    net.visit_acu(&mut |path, layer| {
        for g in 0..layer.geometry.groups {
            for k in 0..layer.synapses() {
                let (alpha, beta) = layer.position(g, k);
                out.push_str(&format!("{path},{g},{k},{alpha},{beta}\n"));
            }
        }
    });
    out
}

/// 2-D histogram of synapse positions over all layers and groups.
///
/// Returns a matrix CSV: the first column holds alpha bin centers, the
/// header row beta bin centers, each cell the synapse count in that bin.
pub fn position_histogram_csv(net: &ToyNetwork, bin_width: f64) -> Result<String> {
    if !(bin_width > 0.0) {
        return Err(Error::InvalidArgument("bin width must be positive".into()));
    }
    let mut positions = Vec::new();
    net.visit_acu(&mut |_, layer| {
        for g in 0..layer.geometry.groups {
            for k in 0..layer.synapses() {
                positions.push(layer.position(g, k));
            }
        }
    });
    if positions.is_empty() {
        return Ok(String::from("alpha\\beta\n"));
    }
    let bin_of = |v: f64| (v / bin_width).floor() as i64;
    let (mut a_lo, mut a_hi, mut b_lo, mut b_hi) = (i64::MAX, i64::MIN, i64::MAX, i64::MIN);
    for &(a, b) in &positions {
        a_lo = a_lo.min(bin_of(a));
        a_hi = a_hi.max(bin_of(a));
        b_lo = b_lo.min(bin_of(b));
        b_hi = b_hi.max(bin_of(b));
    }
    let rows = (a_hi - a_lo + 1) as usize;
    let cols = (b_hi - b_lo + 1) as usize;
    let mut counts = vec![0u64; rows * cols];
    for &(a, b) in &positions {
        let r = (bin_of(a) - a_lo) as usize;
        let c = (bin_of(b) - b_lo) as usize;
        counts[r * cols + c] += 1;
    }
    let center = |bin: i64| (bin as f64 + 0.5) * bin_width;
    let mut out = String::from("alpha\\beta");
    for c in 0..cols {
        out.push_str(&format!(",{}", center(b_lo + c as i64)));
    }
    out.push('\n');
    for r in 0..rows {
        out.push_str(&format!("{}", center(a_lo + r as i64)));
        for c in 0..cols {
            out.push_str(&format!(",{}", counts[r * cols + c]));
        }
        out.push('\n');
    }
    Ok(out)
}

pub const LOSS_CSV_HEADER: &str = "iter,loss,lr";

pub fn loss_trace_csv(trace: &[LossRecord]) -> String {
    let mut out = String::from(LOSS_CSV_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&format!("{},{},{}\n", r.iter, r.loss, r.lr));
    }
    out
}

pub const TRAJECTORY_CSV_HEADER: &str = "iter,layer,group,synapse,alpha,beta";

pub fn position_trace_csv(trace: &[PositionRecord]) -> String {
    let mut out = String::from(TRAJECTORY_CSV_HEADER);
    out.push('\n');
    for r in trace {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.iter, r.layer, r.group, r.synapse, r.alpha, r.beta
        ));
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
