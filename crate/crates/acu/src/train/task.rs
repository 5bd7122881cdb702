//! Datasets for desk-scale runs, including the synthetic shift-regression
//! task used to watch positions converge to a known optimum.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ops::bilinear::bilinear_sample;
use crate::tensor::{stream, Tensor4};

/// Training targets: dense fields for regression or class indices.
#[derive(Debug, Clone)]
pub enum Targets {
    Fields(Tensor4),
    Classes(Vec<usize>),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Tensor4,
    pub targets: Targets,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.inputs.n()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn new(inputs: Tensor4, targets: Targets) -> Result<Dataset> {
        match &targets {
            Targets::Fields(f) => {
                if f.n() != inputs.n() {
                    return Err(Error::InvalidArgument(format!(
                        "{} inputs but {} target fields",
                        inputs.n(),
                        f.n()
                    )));
                }
            }
            Targets::Classes(c) => {
                if c.len() != inputs.n() {
                    return Err(Error::InvalidArgument(format!(
                        "{} inputs but {} labels",
                        inputs.n(),
                        c.len()
                    )));
                }
            }
        }
        Ok(Dataset { inputs, targets })
    }

    /// Gathers a minibatch by sample indices.
    pub fn batch(&self, indices: &[usize]) -> (Tensor4, Targets) {
        let items: Vec<Tensor4> = indices.iter().map(|&i| self.inputs.batch_item(i)).collect();
        let x = Tensor4::stack(&items).expect("uniform dataset shapes");
        let t = match &self.targets {
            Targets::Fields(f) => {
                let picked: Vec<Tensor4> = indices.iter().map(|&i| f.batch_item(i)).collect();
                Targets::Fields(Tensor4::stack(&picked).expect("uniform target shapes"))
            }
            Targets::Classes(c) => Targets::Classes(indices.iter().map(|&i| c[i]).collect()),
        };
        (x, t)
    }
}

/// Random smooth field: white noise passed once through a 3x3 box average
/// (zero boundary). The smoothing gives bilinear samples a well-posed local
/// structure to latch onto.
fn smooth_field(rng: &mut impl Rng, h: usize, w: usize) -> Vec<f64> {
    let mut noise = vec![0.0f64; h * w];
    for v in &mut noise {
        *v = rng.sample(StandardNormal);
    }
    let mut out = vec![0.0f64; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut sum = 0.0;
            for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    let rr = r as i64 + dr;
                    let cc = c as i64 + dc;
                    if rr >= 0 && cc >= 0 && (rr as usize) < h && (cc as usize) < w {
                        sum += noise[rr as usize * w + cc as usize];
                    }
                }
            }
            out[r * w + c] = sum / 9.0;
        }
    }
    out
}

/// Pairs `(x, y)` with `y(m, n) = x(m + dr, n + dc)` computed by bilinear
/// sampling with zero bounds. A unit with one free synapse solves this
/// exactly at weight 1 and position `(dr, dc)`.
pub fn make_shift_task(
    offset: (f64, f64),
    samples: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    make_multi_shift_task(&[offset], samples, size, seed)
}

/// Per-channel version: channel `c` of the target is channel `c` of the
/// input shifted by `offsets[c]`. Used to give different groups different
/// optima.
pub fn make_multi_shift_task(
    offsets: &[(f64, f64)],
    samples: usize,
    size: usize,
    seed: u64,
) -> Result<Dataset> {
    if offsets.is_empty() || samples == 0 || size == 0 {
        return Err(Error::InvalidArgument(
            "shift task needs channels, samples, and a size".into(),
        ));
    }
    let bound = size as f64 / 4.0;
    for &(dr, dc) in offsets {
        if !(dr.abs() <= bound && dc.abs() <= bound) {
            return Err(Error::InvalidArgument(format!(
                "shift ({dr}, {dc}) exceeds a quarter of the field size {size}"
            )));
        }
    }
    let channels = offsets.len();
    let mut rng = stream(seed, "shift-task");
    let mut inputs = Tensor4::zeros(samples, channels, size, size);
    for s in 0..samples {
        for c in 0..channels {
            let field = smooth_field(&mut rng, size, size);
            let base = inputs.idx(s, c, 0, 0);
            inputs.as_mut_slice()[base..base + size * size].copy_from_slice(&field);
        }
    }
    let mut targets = Tensor4::zeros(samples, channels, size, size);
    for s in 0..samples {
        for (c, &(dr, dc)) in offsets.iter().enumerate() {
            for m in 0..size {
                for n in 0..size {
                    let v = bilinear_sample(&inputs, s, c, m as f64 + dr, n as f64 + dc);
                    targets.set(s, c, m, n, v);
                }
            }
        }
    }
    Dataset::new(inputs, Targets::Fields(targets))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_shift_is_the_identity() {
        let data = make_shift_task((0.0, 0.0), 3, 8, 1).unwrap();
        match &data.targets {
            Targets::Fields(f) => assert_eq!(f, &data.inputs),
            _ => unreachable!(),
        }
    }

    #[test]
    fn integer_shift_moves_pixels() {
        let data = make_shift_task((2.0, 0.0), 1, 8, 2).unwrap();
        let Targets::Fields(f) = &data.targets else {
            unreachable!()
        };
        // y(m, n) = x(m + 2, n) where it exists
        for m in 0..6 {
            for n in 0..8 {
                assert_eq!(f.get(0, 0, m, n), data.inputs.get(0, 0, m + 2, n));
            }
        }
        // bottom rows sample outside: zero
        for m in 6..8 {
            for n in 0..8 {
                assert_eq!(f.get(0, 0, m, n), 0.0);
            }
        }
    }

    #[test]
    fn oversized_shift_rejected() {
        assert!(make_shift_task((5.0, 0.0), 1, 8, 3).is_err());
    }

    #[test]
    fn deterministic_for_a_fixed_seed() {
        let a = make_shift_task((1.5, -0.5), 2, 8, 9).unwrap();
        let b = make_shift_task((1.5, -0.5), 2, 8, 9).unwrap();
        assert_eq!(a.inputs, b.inputs);
    }

    #[test]
    fn batch_gathers_requested_samples() {
        let data = make_shift_task((1.0, 1.0), 4, 6, 4).unwrap();
        let (x, t) = data.batch(&[2, 0]);
        assert_eq!(x.dims(), (2, 1, 6, 6));
        assert_eq!(x.batch_item(0), data.inputs.batch_item(2));
        match t {
            Targets::Fields(f) => assert_eq!(f.dims(), (2, 1, 6, 6)),
            _ => unreachable!(),
        }
    }
}
