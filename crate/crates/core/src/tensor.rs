//! Dense single-channel 2-D kernels.
//!
//! Every kernel is a pure function over immutable inputs and accumulates in a
//! fixed order, so identical inputs give bit-identical outputs.
//!
//! Convolution uses the "same" placement with zero padding: for an `f x f`
//! filter `a` with center `c = (f - 1) / 2`,
//!
//! ```text
//! out(i, j) = sum_{p,q} a(p, q) * x(i - p + c, j - q + c)
//! ```
//!
//! and samples outside the input grid contribute nothing. The adjoint is the
//! matching correlation `adj(y)(m, n) = sum_{p,q} a(p, q) * y(m + p - c, n + q - c)`.

use std::fmt;
use std::ops::{Index, IndexMut};

use crate::error::{Error, Result};

/// Single-channel image grid stored row-major in double precision.
#[derive(Clone, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Plane {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Plane({}x{})", self.height, self.width)
    }
}

impl Plane {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        assert!(height >= 1 && width >= 1, "plane dimensions must be positive");
        Self { height, width, data: vec![value; height * width] }
    }

    pub fn from_vec(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!("plane dimensions {height}x{width}")));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "{} values for a {height}x{width} plane",
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        assert!(height >= 1 && width >= 1, "plane dimensions must be positive");
        let mut data = Vec::with_capacity(height * width);
        for i in 0..height {
            for j in 0..width {
                data.push(f(i, j));
            }
        }
        Self { height, width, data }
    }

    /// 1x1 plane; the tape stores scalars this way.
    pub fn scalar(value: f64) -> Self {
        Self { height: 1, width: 1, data: vec![value] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.width..(i + 1) * self.width]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.width + j]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub(crate) fn check_finite(&self, what: &'static str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(what))
        }
    }

    pub fn same_shape(&self, other: &Plane) -> bool {
        self.dims() == other.dims()
    }

    pub(crate) fn ensure_same_shape(&self, other: &Plane, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{what}: {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    /// Single value of a 1x1 plane.
    pub fn value(&self) -> f64 {
        debug_assert_eq!(self.data.len(), 1);
        self.data[0]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Plane {
        Plane { height: self.height, width: self.width, data: self.data.iter().map(|&v| f(v)).collect() }
    }

    /// Elementwise combination; panics on shape mismatch (callers check first).
    pub fn zip_map(&self, other: &Plane, f: impl Fn(f64, f64) -> f64) -> Plane {
        assert!(self.same_shape(other), "zip_map on mismatched planes");
        Plane {
            height: self.height,
            width: self.width,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        }
    }

    pub fn add(&self, other: &Plane) -> Result<Plane> {
        self.ensure_same_shape(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Plane) -> Result<Plane> {
        self.ensure_same_shape(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn hadamard(&self, other: &Plane) -> Result<Plane> {
        self.ensure_same_shape(other, "hadamard")?;
        Ok(self.zip_map(other, |a, b| a * b))
    }

    pub fn scale(&self, s: f64) -> Plane {
        self.map(|v| v * s)
    }

    pub fn add_assign(&mut self, other: &Plane) {
        assert!(self.same_shape(other), "add_assign on mismatched planes");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// `self += s * other`
    pub fn axpy(&mut self, s: f64, other: &Plane) {
        assert!(self.same_shape(other), "axpy on mismatched planes");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
    }

    pub fn frobenius_sq(&self) -> f64 {
        frobenius_sq(self)
    }

    pub fn frobenius(&self) -> f64 {
        frobenius_sq(self).sqrt()
    }

    pub fn l1(&self) -> f64 {
        l1(self)
    }

    pub fn inner(&self, other: &Plane) -> Result<f64> {
        inner(self, other)
    }

    pub fn max_abs_diff(&self, other: &Plane) -> f64 {
        assert!(self.same_shape(other), "max_abs_diff on mismatched planes");
        self.data.iter().zip(&other.data).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)))
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// 180-degree rotation.
    pub fn rotate180(&self) -> Plane {
        let mut data = self.data.clone();
        data.reverse();
        Plane { height: self.height, width: self.width, data }
    }

    /// Sub-window copy starting at `(row, col)`.
    pub fn crop(&self, row: usize, col: usize, height: usize, width: usize) -> Plane {
        assert!(row + height <= self.height && col + width <= self.width, "crop out of range");
        let mut data = Vec::with_capacity(height * width);
        for i in row..row + height {
            data.extend_from_slice(&self.data[i * self.width + col..i * self.width + col + width]);
        }
        Plane { height, width, data }
    }
}

impl Index<(usize, usize)> for Plane {
    type Output = f64;

    fn index(&self, (i, j): (usize, usize)) -> &f64 {
        &self.data[i * self.width + j]
    }
}

impl IndexMut<(usize, usize)> for Plane {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut f64 {
        &mut self.data[i * self.width + j]
    }
}

/// Three colour planes in `R, G, B` order.
pub type Rgb = [Plane; 3];

/// Default filter side length.
pub const DEFAULT_FILTER_SIZE: usize = 5;

/// Square convolution filter with an odd side length.
#[derive(Clone, PartialEq)]
pub struct Filter(Plane);

impl fmt::Debug for Filter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Filter({}x{})", self.0.height, self.0.width)
    }
}

impl Filter {
    pub fn new(taps: Plane) -> Result<Self> {
        check_filter_dims(&taps)?;
        Ok(Self(taps))
    }

    pub fn from_vec(size: usize, taps: Vec<f64>) -> Result<Self> {
        Self::new(Plane::from_vec(size, size, taps)?)
    }

    pub fn zeros(size: usize) -> Result<Self> {
        if size == 0 || size % 2 == 0 {
            return Err(Error::invalid(format!("filter size {size} must be odd")));
        }
        Ok(Self(Plane::zeros(size, size)))
    }

    /// `1` at the center tap, `0` elsewhere.
    pub fn delta(size: usize) -> Result<Self> {
        let mut f = Self::zeros(size)?;
        let c = size / 2;
        f.0[(c, c)] = 1.0;
        Ok(f)
    }

    pub fn size(&self) -> usize {
        self.0.height
    }

    pub fn taps(&self) -> &Plane {
        &self.0
    }

    pub fn taps_mut(&mut self) -> &mut Plane {
        &mut self.0
    }

    pub fn into_plane(self) -> Plane {
        self.0
    }

    pub fn rotate180(&self) -> Filter {
        Filter(self.0.rotate180())
    }

    pub fn scale(&self, s: f64) -> Filter {
        Filter(self.0.scale(s))
    }
}

fn check_filter_dims(taps: &Plane) -> Result<()> {
    if taps.height != taps.width || taps.height % 2 == 0 {
        return Err(Error::invalid(format!(
            "filter must be square with odd size, got {}x{}",
            taps.height, taps.width
        )));
    }
    Ok(())
}

/// Adds `w * src(i + di, j + dj)` into `out(i, j)` wherever the source index is in range.
#[inline]
fn shifted_axpy(out: &mut Plane, src: &Plane, w: f64, di: isize, dj: isize) {
    let (h, wd) = (out.height as isize, out.width as isize);
    let i0 = 0.max(-di);
    let i1 = h.min(h - di);
    let j0 = 0.max(-dj);
    let j1 = wd.min(wd - dj);
    if i0 >= i1 || j0 >= j1 {
        return;
    }
    let (j0, j1) = (j0 as usize, j1 as usize);
    let sj0 = (j0 as isize + dj) as usize;
    let len = j1 - j0;
    for i in i0..i1 {
        let o = i as usize * out.width;
        let s = (i + di) as usize * src.width;
        let orow = &mut out.data[o + j0..o + j0 + len];
        let srow = &src.data[s + sj0..s + sj0 + len];
        for (a, b) in orow.iter_mut().zip(srow) {
            *a += w * b;
        }
    }
}

/// Inner product of `a(i, j)` with `b(i + di, j + dj)` over the overlap.
#[inline]
fn shifted_inner(a: &Plane, b: &Plane, di: isize, dj: isize) -> f64 {
    let (h, wd) = (a.height as isize, a.width as isize);
    let i0 = 0.max(-di);
    let i1 = h.min(h - di);
    let j0 = 0.max(-dj);
    let j1 = wd.min(wd - dj);
    if i0 >= i1 || j0 >= j1 {
        return 0.0;
    }
    let (j0, j1) = (j0 as usize, j1 as usize);
    let sj0 = (j0 as isize + dj) as usize;
    let len = j1 - j0;
    let mut acc = 0.0;
    for i in i0..i1 {
        let o = i as usize * a.width;
        let s = (i + di) as usize * b.width;
        let arow = &a.data[o + j0..o + j0 + len];
        let brow = &b.data[s + sj0..s + sj0 + len];
        let mut row_acc = 0.0;
        for (x, y) in arow.iter().zip(brow) {
            row_acc += x * y;
        }
        acc += row_acc;
    }
    acc
}

fn check_conv_args(input: &Plane, filter: &Plane) -> Result<()> {
    check_filter_dims(filter)?;
    input.check_finite("convolution input")?;
    filter.check_finite("convolution filter")
}

/// Same-size zero-padded convolution.
pub fn conv2d_same(input: &Plane, filter: &Filter) -> Result<Plane> {
    conv2d_same_taps(input, filter.taps())
}

/// [`conv2d_same`] taking the taps as a plain plane (used by the tape).
pub fn conv2d_same_taps(input: &Plane, taps: &Plane) -> Result<Plane> {
    check_conv_args(input, taps)?;
    let c = (taps.height / 2) as isize;
    let mut out = Plane::zeros(input.height, input.width);
    for p in 0..taps.height {
        for q in 0..taps.width {
            let w = taps.get(p, q);
            if w != 0.0 {
                shifted_axpy(&mut out, input, w, c - p as isize, c - q as isize);
            }
        }
    }
    Ok(out)
}

/// Exact adjoint of [`conv2d_same`]: correlation with the filter.
pub fn adjoint_conv2d(input: &Plane, filter: &Filter) -> Result<Plane> {
    adjoint_conv2d_taps(input, filter.taps())
}

pub fn adjoint_conv2d_taps(input: &Plane, taps: &Plane) -> Result<Plane> {
    check_conv_args(input, taps)?;
    let c = (taps.height / 2) as isize;
    let mut out = Plane::zeros(input.height, input.width);
    for p in 0..taps.height {
        for q in 0..taps.width {
            let w = taps.get(p, q);
            if w != 0.0 {
                shifted_axpy(&mut out, input, w, p as isize - c, q as isize - c);
            }
        }
    }
    Ok(out)
}

/// Gradient of `<g, conv2d_same(input, a)>` with respect to the taps of `a`.
pub fn conv2d_filter_grad(grad_out: &Plane, input: &Plane, size: usize) -> Plane {
    let c = (size / 2) as isize;
    Plane::from_fn(size, size, |p, q| shifted_inner(grad_out, input, c - p as isize, c - q as isize))
}

/// Gradient of `<g, adjoint_conv2d(input, a)>` with respect to the taps of `a`.
pub fn adjoint_filter_grad(grad_out: &Plane, input: &Plane, size: usize) -> Plane {
    let c = (size / 2) as isize;
    Plane::from_fn(size, size, |p, q| shifted_inner(grad_out, input, p as isize - c, q as isize - c))
}

/// Downsampling factor `2^(level - 1)`.
pub fn downsample_factor(level: u32) -> Result<usize> {
    if level == 0 || level > 31 {
        return Err(Error::invalid(format!("downsample level {level} out of range")));
    }
    Ok(1usize << (level - 1))
}

/// Bilinear downsampling by `2^(level - 1)` with pixel-center alignment.
///
/// Each output pixel averages its aligned `factor x factor` block; the
/// trailing block along an axis may be partial when the dimension is not a
/// multiple of the factor, in which case it averages only the covered pixels.
/// Output dims are `ceil(dim / factor)`.
pub fn bilinear_downsample(input: &Plane, level: u32) -> Result<Plane> {
    let factor = downsample_factor(level)?;
    if factor == 1 {
        return Ok(input.clone());
    }
    if input.height < factor || input.width < factor {
        return Err(Error::invalid(format!(
            "downsample level {level} on a {}x{} plane",
            input.height, input.width
        )));
    }
    let oh = input.height.div_ceil(factor);
    let ow = input.width.div_ceil(factor);
    let mut out = Plane::zeros(oh, ow);
    for oi in 0..oh {
        let r0 = oi * factor;
        let r1 = (r0 + factor).min(input.height);
        for oj in 0..ow {
            let c0 = oj * factor;
            let c1 = (c0 + factor).min(input.width);
            let mut acc = 0.0;
            for i in r0..r1 {
                for v in &input.row(i)[c0..c1] {
                    acc += v;
                }
            }
            out[(oi, oj)] = acc / ((r1 - r0) * (c1 - c0)) as f64;
        }
    }
    Ok(out)
}

/// Adjoint of [`bilinear_downsample`] for an input of dims `(height, width)`.
pub fn bilinear_downsample_adjoint(grad_out: &Plane, level: u32, height: usize, width: usize) -> Result<Plane> {
    let factor = downsample_factor(level)?;
    if factor == 1 {
        return Ok(grad_out.clone());
    }
    let mut out = Plane::zeros(height, width);
    for oi in 0..grad_out.height {
        let r0 = oi * factor;
        let r1 = (r0 + factor).min(height);
        for oj in 0..grad_out.width {
            let c0 = oj * factor;
            let c1 = (c0 + factor).min(width);
            let share = grad_out[(oi, oj)] / ((r1 - r0) * (c1 - c0)) as f64;
            for i in r0..r1 {
                for j in c0..c1 {
                    out[(i, j)] += share;
                }
            }
        }
    }
    Ok(out)
}

/// Forward differences with the last row/column replicated (so the trailing
/// difference is zero). Returns `(dx, dy)` along columns and rows.
pub fn forward_differences(input: &Plane) -> (Plane, Plane) {
    let (h, w) = input.dims();
    let dx = Plane::from_fn(h, w, |i, j| if j + 1 < w { input[(i, j + 1)] - input[(i, j)] } else { 0.0 });
    let dy = Plane::from_fn(h, w, |i, j| if i + 1 < h { input[(i + 1, j)] - input[(i, j)] } else { 0.0 });
    (dx, dy)
}

/// Adjoint of [`forward_differences`] applied to `(gx, gy)`.
pub fn forward_differences_adjoint(gx: &Plane, gy: &Plane) -> Plane {
    let (h, w) = gx.dims();
    let mut out = Plane::zeros(h, w);
    for i in 0..h {
        for j in 0..w {
            if j + 1 < w {
                let g = gx[(i, j)];
                out[(i, j + 1)] += g;
                out[(i, j)] -= g;
            }
            if i + 1 < h {
                let g = gy[(i, j)];
                out[(i + 1, j)] += g;
                out[(i, j)] -= g;
            }
        }
    }
    out
}

/// `sqrt(dx^2 + dy^2)` per pixel using [`forward_differences`].
pub fn gradient_magnitude(input: &Plane) -> Result<Plane> {
    if input.height < 2 || input.width < 2 {
        return Err(Error::invalid(format!(
            "gradient magnitude needs at least 2x2, got {}x{}",
            input.height, input.width
        )));
    }
    let (dx, dy) = forward_differences(input);
    Ok(dx.zip_map(&dy, |a, b| (a * a + b * b).sqrt()))
}

/// Anything made of one or more planes of a common layout.
pub trait PlaneSet {
    fn planes(&self) -> &[Plane];
}

impl PlaneSet for Plane {
    fn planes(&self) -> &[Plane] {
        std::slice::from_ref(self)
    }
}

impl PlaneSet for [Plane] {
    fn planes(&self) -> &[Plane] {
        self
    }
}

impl PlaneSet for Vec<Plane> {
    fn planes(&self) -> &[Plane] {
        self
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Reduction<'a, T: PlaneSet + ?Sized> {
    FrobeniusSq,
    L1,
    Inner(&'a T),
}

/// Row-major sequential reductions over every plane in order.
pub fn reduce<T: PlaneSet + ?Sized>(input: &T, kind: Reduction<'_, T>) -> Result<f64> {
    match kind {
        Reduction::FrobeniusSq => Ok(input.planes().iter().map(frobenius_sq).fold(0.0, |a, b| a + b)),
        Reduction::L1 => Ok(input.planes().iter().map(l1).fold(0.0, |a, b| a + b)),
        Reduction::Inner(other) => {
            let (a, b) = (input.planes(), other.planes());
            if a.len() != b.len() {
                return Err(Error::shape(format!("inner over {} vs {} planes", a.len(), b.len())));
            }
            let mut acc = 0.0;
            for (x, y) in a.iter().zip(b) {
                acc += inner(x, y)?;
            }
            Ok(acc)
        }
    }
}

pub fn frobenius_sq(p: &Plane) -> f64 {
    let mut acc = 0.0;
    for v in &p.data {
        acc += v * v;
    }
    acc
}

pub fn l1(p: &Plane) -> f64 {
    let mut acc = 0.0;
    for v in &p.data {
        acc += v.abs();
    }
    acc
}

pub fn inner(a: &Plane, b: &Plane) -> Result<f64> {
    a.ensure_same_shape(b, "inner")?;
    let mut acc = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        acc += x * y;
    }
    Ok(acc)
}
