//! Dense 4-D tensors in NCHW layout.
//!
//! Everything in this crate moves through [`Tensor4`]: a batch of channel
//! planes stored row-major in `(n, c, h, w)` order, so the innermost index
//! (`w`) is contiguous. Values are `f64`; the on-disk format also supports
//! an `f32` payload for size-sensitive exports (see [`io`]).
//!
//! Tensors are plain owned buffers. Operations return new tensors and never
//! mutate their inputs, so independent calls are safe to run concurrently.

pub mod io;

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

/// Batch x channel x height x width array of `f64`, row-major in
/// `(n, c, h, w)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor4 {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Tensor4 {
    /// All-zero tensor. Dimensions must be at least 1.
    pub fn zeros(n: usize, c: usize, h: usize, w: usize) -> Tensor4 {
        assert!(n >= 1 && c >= 1 && h >= 1 && w >= 1, "zero tensor dimension");
        Tensor4 {
            n,
            c,
            h,
            w,
            data: vec![0.0; n * c * h * w],
        }
    }

    /// Tensor filled with a constant.
    pub fn filled(n: usize, c: usize, h: usize, w: usize, value: f64) -> Tensor4 {
        let mut t = Tensor4::zeros(n, c, h, w);
        t.data.fill(value);
        t
    }

    /// Wrap an existing buffer. Fails unless `data.len() == n*c*h*w`.
    pub fn from_vec(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Tensor4> {
        if n < 1 || c < 1 || h < 1 || w < 1 {
            return Err(Error::InvalidArgument(format!(
                "tensor dimensions must be >= 1, got ({n}, {c}, {h}, {w})"
            )));
        }
        let expected = n
            .checked_mul(c)
            .and_then(|v| v.checked_mul(h))
            .and_then(|v| v.checked_mul(w))
            .ok_or_else(|| Error::Overflow(format!("({n}, {c}, {h}, {w})")))?;
        if data.len() != expected {
            return Err(Error::InvalidArgument(format!(
                "data length {} does not match dimensions ({n}, {c}, {h}, {w}) = {expected}",
                data.len()
            )));
        }
        Ok(Tensor4 { n, c, h, w, data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        (self.n, self.c, self.h, self.w)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn c(&self) -> usize {
        self.c
    }

    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn idx(&self, n: usize, c: usize, h: usize, w: usize) -> usize {
        debug_assert!(n < self.n && c < self.c && h < self.h && w < self.w);
        ((n * self.c + c) * self.h + h) * self.w + w
    }

    #[inline]
    pub fn get(&self, n: usize, c: usize, h: usize, w: usize) -> f64 {
        self.data[self.idx(n, c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, n: usize, c: usize, h: usize, w: usize, value: f64) {
        let i = self.idx(n, c, h, w);
        self.data[i] = value;
    }

    /// Value at a signed lattice point, or 0 outside the spatial bounds.
    /// This is the zero-extension convention used by every sampling and
    /// convolution routine in the crate.
    #[inline]
    pub fn get_padded(&self, n: usize, c: usize, h: i64, w: i64) -> f64 {
        if h < 0 || w < 0 || h >= self.h as i64 || w >= self.w as i64 {
            0.0
        } else {
            self.data[self.idx(n, c, h as usize, w as usize)]
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn same_shape(&self, other: &Tensor4) -> bool {
        self.dims() == other.dims()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor4 {
        Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, factor: f64) -> Tensor4 {
        self.map(|v| v * factor)
    }

    pub fn add(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor4) -> Result<Tensor4> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn zip_map(&self, other: &Tensor4, f: impl Fn(f64, f64) -> f64) -> Result<Tensor4> {
        if !self.same_shape(other) {
            return Err(Error::InvalidArgument(format!(
                "shape mismatch: {:?} vs {:?}",
                self.dims(),
                other.dims()
            )));
        }
        Ok(Tensor4 {
            n: self.n,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Largest elementwise absolute difference between two same-shape tensors.
    pub fn max_abs_diff(&self, other: &Tensor4) -> f64 {
        assert!(self.same_shape(other), "shape mismatch in max_abs_diff");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    /// Adds `bias[c]` to every element of channel `c`.
    pub fn with_channel_bias(&self, bias: &[f64]) -> Result<Tensor4> {
        if bias.len() != self.c {
            return Err(Error::InvalidArgument(format!(
                "bias length {} does not match channel count {}",
                bias.len(),
                self.c
            )));
        }
        let mut out = self.clone();
        for n in 0..self.n {
            for c in 0..self.c {
                let base = out.idx(n, c, 0, 0);
                for i in base..base + self.h * self.w {
                    out.data[i] += bias[c];
                }
            }
        }
        Ok(out)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Extracts sample `i` of the batch as a batch-of-one tensor.
    pub fn batch_item(&self, i: usize) -> Tensor4 {
        assert!(i < self.n);
        let size = self.c * self.h * self.w;
        Tensor4 {
            n: 1,
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data[i * size..(i + 1) * size].to_vec(),
        }
    }

    /// Stacks same-shape batch items into one tensor along the batch axis.
    pub fn stack(items: &[Tensor4]) -> Result<Tensor4> {
        let first = items
            .first()
            .ok_or_else(|| Error::InvalidArgument("stack of zero tensors".into()))?;
        let mut data = Vec::with_capacity(items.len() * first.numel());
        for t in items {
            if t.dims() != first.dims() {
                return Err(Error::InvalidArgument("stack of mismatched shapes".into()));
            }
            data.extend_from_slice(&t.data);
        }
        Tensor4::from_vec(
            items.len() * first.n,
            first.c,
            first.h,
            first.w,
            data,
        )
    }
}

/// Deterministic random stream keyed by `(seed, label)`.
///
/// The label keeps independently drawn parameters decoupled: the stream for
/// `("net", seed)` never overlaps the stream for `("data", seed)`, and adding
/// a new consumer does not shift anyone else's draws.
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(label.as_bytes())
        .finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(key)
}

/// Derives a child seed from a master seed and a label. Used to give every
/// named parameter its own initialization stream.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    let digest = Sha256::new()
        .chain_update(seed.to_le_bytes())
        .chain_update(label.as_bytes())
        .finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Normal initialization with standard deviation `sqrt(2 / fan_in)`.
///
/// Deterministic: the output depends only on `(dims, fan_in, seed)`.
pub fn he_init(dims: (usize, usize, usize, usize), fan_in: usize, seed: u64) -> Result<Tensor4> {
    if fan_in == 0 {
        return Err(Error::InvalidArgument("he_init: fan_in must be > 0".into()));
    }
    let (n, c, h, w) = dims;
    let sigma = (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    let mut rng = stream(seed, "he-init");
    let mut t = Tensor4::zeros(n, c, h, w);
    for v in t.as_mut_slice() {
        *v = normal.sample(&mut rng);
    }
    Ok(t)
}
