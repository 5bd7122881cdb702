//! Bilinear sampling at fractional lattice positions.
//!
//! A sample at `(row, col)` blends the four nearest lattice values
//! `Q11 = x[r, c]`, `Q21 = x[r+1, c]`, `Q12 = x[r, c+1]`, `Q22 = x[r+1, c+1]`
//! with `r = floor(row)`, `c = floor(col)`:
//!
//! ```text
//! value = Q11 (1-da)(1-db) + Q21 da (1-db) + Q12 (1-da) db + Q22 da db
//! ```
//!
//! where `da = row - floor(row)` and `db = col - floor(col)`. Lattice points
//! outside the image contribute zero, matching the zero-padding convention
//! of the convolutions built on top of this.
//!
//! The interpolant is only piecewise smooth: on lattice lines the derivative
//! below is the one-sided derivative of the floor-based formula.

use crate::tensor::Tensor4;

/// Integer corner and fractional parts of one sampling location.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Stencil {
    pub r: i64,
    pub c: i64,
    pub da: f64,
    pub db: f64,
}

impl Stencil {
    #[inline]
    pub fn new(row: f64, col: f64) -> Stencil {
        let rf = row.floor();
        let cf = col.floor();
        Stencil {
            r: rf as i64,
            c: cf as i64,
            da: row - rf,
            db: col - cf,
        }
    }

    /// Coefficients in `(Q11, Q21, Q12, Q22)` order.
    #[inline]
    pub fn coefficients(&self) -> [f64; 4] {
        let (da, db) = (self.da, self.db);
        [
            (1.0 - da) * (1.0 - db),
            da * (1.0 - db),
            (1.0 - da) * db,
            da * db,
        ]
    }

    /// Lattice offsets of the four corners in the same order.
    #[inline]
    pub fn corners(&self) -> [(i64, i64); 4] {
        [
            (self.r, self.c),
            (self.r + 1, self.c),
            (self.r, self.c + 1),
            (self.r + 1, self.c + 1),
        ]
    }

    #[inline]
    pub fn fetch(&self, x: &Tensor4, n: usize, ch: usize) -> [f64; 4] {
        [
            x.get_padded(n, ch, self.r, self.c),
            x.get_padded(n, ch, self.r + 1, self.c),
            x.get_padded(n, ch, self.r, self.c + 1),
            x.get_padded(n, ch, self.r + 1, self.c + 1),
        ]
    }

    #[inline]
    pub fn value(&self, q: [f64; 4]) -> f64 {
        let w = self.coefficients();
        q[0] * w[0] + q[1] * w[1] + q[2] * w[2] + q[3] * w[3]
    }

    /// Derivative of the sample with respect to the row coordinate.
    #[inline]
    pub fn d_row(&self, q: [f64; 4]) -> f64 {
        (q[1] - q[0]) * (1.0 - self.db) + (q[3] - q[2]) * self.db
    }

    /// Derivative of the sample with respect to the column coordinate.
    #[inline]
    pub fn d_col(&self, q: [f64; 4]) -> f64 {
        (q[2] - q[0]) * (1.0 - self.da) + (q[3] - q[1]) * self.da
    }
}

/// Bilinear sample of channel `ch` of batch item `n` at fractional
/// coordinates `(row, col)`. Total on finite inputs; out-of-bounds lattice
/// neighbors contribute zero.
pub fn bilinear_sample(x: &Tensor4, n: usize, ch: usize, row: f64, col: f64) -> f64 {
    let s = Stencil::new(row, col);
    s.value(s.fetch(x, n, ch))
}

/// Sample value together with its derivatives with respect to `row` and
/// `col` (one-sided on lattice lines).
pub fn bilinear_sample_with_grad(
    x: &Tensor4,
    n: usize,
    ch: usize,
    row: f64,
    col: f64,
) -> (f64, f64, f64) {
    let s = Stencil::new(row, col);
    let q = s.fetch(x, n, ch);
    (s.value(q), s.d_row(q), s.d_col(q))
}
