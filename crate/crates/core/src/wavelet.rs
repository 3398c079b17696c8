//! Redundant union of orthogonal single-level Haar transforms.
//!
//! Transform `i` circularly shifts its input by a fixed offset and then
//! applies one level of the orthonormal 2-D Haar transform, writing the
//! approximation and detail bands into the four quadrants of a coefficient
//! plane (`LL | LH` over `HL | HH`). Distinct offsets give the cycle-spun
//! union used by the coupling prior.
//!
//! Odd dimensions are padded by duplicating the last row/column before the
//! transform and cropped again by the inverse.

use crate::error::{Error, Result};
use crate::tensor::Plane;

/// Default number of transforms in the union.
pub const DEFAULT_TRANSFORMS: usize = 4;

const SHIFTS: [(usize, usize); 4] = [(0, 0), (1, 0), (0, 1), (1, 1)];

#[derive(Clone, Debug, PartialEq)]
pub struct WaveletBank {
    height: usize,
    width: usize,
    padded: (usize, usize),
    shifts: Vec<(usize, usize)>,
}

impl WaveletBank {
    /// Builds `count` Haar transforms (count in {1, 2, 4}) for `height x width` planes.
    pub fn new(count: usize, height: usize, width: usize) -> Result<Self> {
        if !matches!(count, 1 | 2 | 4) {
            return Err(Error::invalid(format!("wavelet count {count} must be 1, 2 or 4")));
        }
        if height < 2 || width < 2 {
            return Err(Error::invalid(format!("wavelet bank needs dims >= 2, got {height}x{width}")));
        }
        Ok(Self {
            height,
            width,
            padded: (height + height % 2, width + width % 2),
            shifts: SHIFTS[..count].to_vec(),
        })
    }

    pub fn count(&self) -> usize {
        self.shifts.len()
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Dimensions of the coefficient planes.
    pub fn coeff_dims(&self) -> (usize, usize) {
        self.padded
    }

    pub fn shift(&self, i: usize) -> Result<(usize, usize)> {
        self.shifts
            .get(i)
            .copied()
            .ok_or_else(|| Error::invalid(format!("transform index {i} out of range 0..{}", self.count())))
    }

    fn check_input(&self, x: &Plane) -> Result<()> {
        if x.dims() != (self.height, self.width) {
            return Err(Error::shape(format!(
                "wavelet input {}x{} for a {}x{} bank",
                x.height(),
                x.width(),
                self.height,
                self.width
            )));
        }
        Ok(())
    }

    fn check_coeffs(&self, c: &Plane) -> Result<()> {
        if c.dims() != self.padded {
            return Err(Error::shape(format!(
                "wavelet coefficients {}x{} for padded dims {}x{}",
                c.height(),
                c.width(),
                self.padded.0,
                self.padded.1
            )));
        }
        Ok(())
    }

    /// Applies transform `i` (zero-based).
    pub fn forward(&self, i: usize, x: &Plane) -> Result<Plane> {
        let s = self.shift(i)?;
        self.check_input(x)?;
        let padded = pad(x, self.padded);
        Ok(haar(&circular_shift(&padded, s.0 as isize, s.1 as isize)))
    }

    /// Inverse of transform `i`.
    pub fn inverse(&self, i: usize, c: &Plane) -> Result<Plane> {
        let s = self.shift(i)?;
        self.check_coeffs(c)?;
        let shifted = circular_shift(&inverse_haar(c), -(s.0 as isize), -(s.1 as isize));
        Ok(shifted.crop(0, 0, self.height, self.width))
    }

    /// Adjoint of [`forward`](Self::forward); equals the inverse for even dims.
    pub fn forward_adjoint(&self, i: usize, c: &Plane) -> Result<Plane> {
        let s = self.shift(i)?;
        self.check_coeffs(c)?;
        let shifted = circular_shift(&inverse_haar(c), -(s.0 as isize), -(s.1 as isize));
        Ok(pad_adjoint(&shifted, self.height, self.width))
    }

    /// Adjoint of [`inverse`](Self::inverse); equals the forward map for even dims.
    pub fn inverse_adjoint(&self, i: usize, y: &Plane) -> Result<Plane> {
        let s = self.shift(i)?;
        self.check_input(y)?;
        let mut ext = Plane::zeros(self.padded.0, self.padded.1);
        for r in 0..self.height {
            for c in 0..self.width {
                ext[(r, c)] = y[(r, c)];
            }
        }
        Ok(haar(&circular_shift(&ext, s.0 as isize, s.1 as isize)))
    }
}

/// `out(i, j) = x((i + di) mod h, (j + dj) mod w)`
pub fn circular_shift(x: &Plane, di: isize, dj: isize) -> Plane {
    let (h, w) = (x.height() as isize, x.width() as isize);
    Plane::from_fn(x.height(), x.width(), |i, j| {
        let si = (i as isize + di).rem_euclid(h) as usize;
        let sj = (j as isize + dj).rem_euclid(w) as usize;
        x[(si, sj)]
    })
}

fn pad(x: &Plane, (ph, pw): (usize, usize)) -> Plane {
    if x.dims() == (ph, pw) {
        return x.clone();
    }
    let (h, w) = x.dims();
    Plane::from_fn(ph, pw, |i, j| x[(i.min(h - 1), j.min(w - 1))])
}

fn pad_adjoint(g: &Plane, h: usize, w: usize) -> Plane {
    if g.dims() == (h, w) {
        return g.clone();
    }
    let mut out = Plane::zeros(h, w);
    for i in 0..g.height() {
        for j in 0..g.width() {
            out[(i.min(h - 1), j.min(w - 1))] += g[(i, j)];
        }
    }
    out
}

/// One level of the orthonormal Haar transform on an even-sized plane.
fn haar(x: &Plane) -> Plane {
    let (h, w) = x.dims();
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Plane::zeros(h, w);
    for bi in 0..h2 {
        for bj in 0..w2 {
            let a = x[(2 * bi, 2 * bj)];
            let b = x[(2 * bi, 2 * bj + 1)];
            let c = x[(2 * bi + 1, 2 * bj)];
            let d = x[(2 * bi + 1, 2 * bj + 1)];
            out[(bi, bj)] = 0.5 * (a + b + c + d);
            out[(bi, w2 + bj)] = 0.5 * (a - b + c - d);
            out[(h2 + bi, bj)] = 0.5 * (a + b - c - d);
            out[(h2 + bi, w2 + bj)] = 0.5 * (a - b - c + d);
        }
    }
    out
}

fn inverse_haar(c: &Plane) -> Plane {
    let (h, w) = c.dims();
    let (h2, w2) = (h / 2, w / 2);
    let mut out = Plane::zeros(h, w);
    for bi in 0..h2 {
        for bj in 0..w2 {
            let ll = c[(bi, bj)];
            let lh = c[(bi, w2 + bj)];
            let hl = c[(h2 + bi, bj)];
            let hh = c[(h2 + bi, w2 + bj)];
            out[(2 * bi, 2 * bj)] = 0.5 * (ll + lh + hl + hh);
            out[(2 * bi, 2 * bj + 1)] = 0.5 * (ll - lh + hl - hh);
            out[(2 * bi + 1, 2 * bj)] = 0.5 * (ll + lh - hl - hh);
            out[(2 * bi + 1, 2 * bj + 1)] = 0.5 * (ll - lh - hl + hh);
        }
    }
    out
}
