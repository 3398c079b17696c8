//! Reverse-mode differentiation over a fixed vocabulary of plane kernels.
//!
//! Values are computed eagerly as nodes are recorded. Scalars are stored as
//! 1x1 planes so every node carries the same value type. A single reverse
//! sweep over the node list propagates adjoints; a node used several times
//! (tied parameters) accumulates every contribution.

use std::collections::HashSet;
use std::hash::Hasher;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, Plane};
use crate::wavelet::WaveletBank;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Sum(Vec<Var>),
    /// Plane times a 1x1 scalar node.
    Scale(Var, Var),
    ScaleConst(Var, f64),
    Abs(Var),
    Tanh(Var),
    Sqrt(Var),
    Conv { input: Var, filter: Var },
    Correlate { input: Var, filter: Var },
    SoftThreshold { input: Var, sigma: Var },
    SoftThresholdMap { input: Var, threshold: Var },
    WaveletForward { bank: WaveletBank, index: usize, input: Var },
    WaveletInverse { bank: WaveletBank, index: usize, input: Var },
    Downsample { input: Var, level: u32 },
    GradMag(Var),
    FrobeniusSq(Var),
    FrobeniusNorm(Var),
    L1(Var),
    Inner(Var, Var),
}

struct Node {
    op: Op,
    value: Plane,
    requires_grad: bool,
}

/// Append-only record of primitive applications in topological order.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of every node after a backward sweep.
pub struct Gradients {
    grads: Vec<Option<Plane>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Plane> {
        self.grads[v.0].as_ref()
    }

    /// Gradient with respect to `v`, zero if `v` did not influence the root.
    pub fn wrt(&self, v: Var) -> Plane {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let (h, w) = self.shapes[v.0];
                Plane::zeros(h, w)
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Elementwise `sign(x) * max(|x| - t, 0)`.
pub fn soft_threshold_value(x: f64, t: f64) -> f64 {
    let m = x.abs() - t;
    if m > 0.0 {
        sign(x) * m
    } else {
        0.0
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Plane {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value.value()
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Plane) -> Var {
        self.push(Op::Leaf, value, true)
    }

    pub fn scalar_leaf(&mut self, value: f64) -> Var {
        self.leaf(Plane::scalar(value))
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Plane) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Plane::scalar(value))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op: Op, value: Plane, requires_grad: bool) -> Var {
        self.nodes.push(Node { op, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn record(&mut self, op: Op, value: Plane, operands: &[Var]) -> Var {
        let rg = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(op, value, rg)
    }

    fn check_scalar(&self, v: Var, what: &str) -> Result<()> {
        if self.value(v).dims() != (1, 1) {
            return Err(Error::shape(format!("{what} expects a scalar operand")));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        Ok(self.record(Op::Add(a, b), value, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).sub(self.value(b))?;
        Ok(self.record(Op::Sub(a, b), value, &[a, b]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).hadamard(self.value(b))?;
        Ok(self.record(Op::Mul(a, b), value, &[a, b]))
    }

    /// Elementwise quotient.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.value(a).ensure_same_shape(self.value(b), "div")?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x / y);
        value.check_finite("div")?;
        Ok(self.record(Op::Div(a, b), value, &[a, b]))
    }

    /// Sum of same-shaped nodes, accumulated left to right.
    pub fn sum(&mut self, terms: &[Var]) -> Result<Var> {
        let (first, rest) = terms.split_first().ok_or_else(|| Error::invalid("sum of no terms"))?;
        let mut value = self.value(*first).clone();
        for t in rest {
            self.value(*first).ensure_same_shape(self.value(*t), "sum")?;
            value.add_assign(self.value(*t));
        }
        Ok(self.record(Op::Sum(terms.to_vec()), value, terms))
    }

    /// Plane scaled by a scalar node.
    pub fn scale(&mut self, x: Var, s: Var) -> Result<Var> {
        self.check_scalar(s, "scale")?;
        let value = self.value(x).scale(self.scalar_value(s));
        Ok(self.record(Op::Scale(x, s), value, &[x, s]))
    }

    pub fn scale_const(&mut self, x: Var, c: f64) -> Var {
        let value = self.value(x).scale(c);
        self.record(Op::ScaleConst(x, c), value, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::abs);
        self.record(Op::Abs(x), value, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(f64::tanh);
        self.record(Op::Tanh(x), value, &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).map(f64::sqrt);
        value.check_finite("sqrt")?;
        Ok(self.record(Op::Sqrt(x), value, &[x]))
    }

    pub fn conv(&mut self, input: Var, filter: Var) -> Result<Var> {
        let value = tensor::conv2d_same_taps(self.value(input), self.value(filter))?;
        Ok(self.record(Op::Conv { input, filter }, value, &[input, filter]))
    }

    /// Adjoint convolution (correlation with the filter).
    pub fn correlate(&mut self, input: Var, filter: Var) -> Result<Var> {
        let value = tensor::adjoint_conv2d_taps(self.value(input), self.value(filter))?;
        Ok(self.record(Op::Correlate { input, filter }, value, &[input, filter]))
    }

    /// Soft threshold with a scalar threshold node.
    pub fn soft_threshold(&mut self, input: Var, sigma: Var) -> Result<Var> {
        self.check_scalar(sigma, "soft_threshold")?;
        let t = self.scalar_value(sigma);
        let value = self.value(input).map(|x| soft_threshold_value(x, t));
        Ok(self.record(Op::SoftThreshold { input, sigma }, value, &[input, sigma]))
    }

    /// Soft threshold with a per-element threshold plane.
    pub fn soft_threshold_map(&mut self, input: Var, threshold: Var) -> Result<Var> {
        self.value(input).ensure_same_shape(self.value(threshold), "soft_threshold_map")?;
        let value = self.value(input).zip_map(self.value(threshold), soft_threshold_value);
        Ok(self.record(Op::SoftThresholdMap { input, threshold }, value, &[input, threshold]))
    }

    pub fn wavelet_forward(&mut self, bank: &WaveletBank, index: usize, input: Var) -> Result<Var> {
        let value = bank.forward(index, self.value(input))?;
        Ok(self.record(Op::WaveletForward { bank: bank.clone(), index, input }, value, &[input]))
    }

    pub fn wavelet_inverse(&mut self, bank: &WaveletBank, index: usize, input: Var) -> Result<Var> {
        let value = bank.inverse(index, self.value(input))?;
        Ok(self.record(Op::WaveletInverse { bank: bank.clone(), index, input }, value, &[input]))
    }

    pub fn downsample(&mut self, input: Var, level: u32) -> Result<Var> {
        let value = tensor::bilinear_downsample(self.value(input), level)?;
        Ok(self.record(Op::Downsample { input, level }, value, &[input]))
    }

    pub fn gradient_magnitude(&mut self, input: Var) -> Result<Var> {
        let value = tensor::gradient_magnitude(self.value(input))?;
        Ok(self.record(Op::GradMag(input), value, &[input]))
    }

    pub fn frobenius_sq(&mut self, x: Var) -> Var {
        let value = Plane::scalar(self.value(x).frobenius_sq());
        self.record(Op::FrobeniusSq(x), value, &[x])
    }

    pub fn frobenius_norm(&mut self, x: Var) -> Var {
        let value = Plane::scalar(self.value(x).frobenius());
        self.record(Op::FrobeniusNorm(x), value, &[x])
    }

    pub fn l1(&mut self, x: Var) -> Var {
        let value = Plane::scalar(self.value(x).l1());
        self.record(Op::L1(x), value, &[x])
    }

    pub fn inner(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = Plane::scalar(self.value(a).inner(self.value(b))?);
        Ok(self.record(Op::Inner(a, b), value, &[a, b]))
    }

    /// Hash of the branch taken by every non-smooth node.
    ///
    /// Two evaluations of the same graph share a signature exactly when every
    /// soft threshold, absolute value and norm sits on the same side of its
    /// kink, which is how the finite-difference harness spots coordinates whose
    /// perturbation interval straddles a kink.
    pub fn activation_signature(&self) -> u64 {
        let mut h = Fnv::new();
        for node in &self.nodes {
            match &node.op {
                Op::SoftThreshold { input, sigma } => {
                    let t = self.scalar_value(*sigma);
                    for &x in self.value(*input).as_slice() {
                        h.bit(x.abs() > t);
                    }
                }
                Op::SoftThresholdMap { input, threshold } => {
                    for (&x, &t) in self.value(*input).as_slice().iter().zip(self.value(*threshold).as_slice()) {
                        h.bit(x.abs() > t);
                    }
                }
                Op::Abs(x) | Op::L1(x) => {
                    for &v in self.value(*x).as_slice() {
                        h.sign(v);
                    }
                }
                Op::GradMag(_) | Op::Sqrt(_) => {
                    for &v in node.value.as_slice() {
                        h.bit(v > 0.0);
                    }
                }
                Op::FrobeniusNorm(_) => h.bit(node.value.value() > 0.0),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).dims() != (1, 1) {
            return Err(Error::shape("backward root must be a scalar"));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Plane>> = vec![None; n];
        grads[root.0] = Some(Plane::scalar(1.0));

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, shapes: self.nodes.iter().map(|n| n.value.dims()).collect() })
    }

    fn propagate(&self, node: &Node, g: &Plane, grads: &mut [Option<Plane>]) -> Result<()> {
        let mut acc = |v: Var, contrib: Plane| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        let rg = |v: Var| self.nodes[v.0].requires_grad;

        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                acc(*b, g.scale(-1.0));
            }
            Op::Mul(a, b) => {
                if rg(*a) {
                    acc(*a, g.zip_map(self.value(*b), |x, y| x * y));
                }
                if rg(*b) {
                    acc(*b, g.zip_map(self.value(*a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = self.value(*b);
                if rg(*a) {
                    acc(*a, g.zip_map(bv, |x, y| x / y));
                }
                if rg(*b) {
                    let db = Plane::from_fn(bv.height(), bv.width(), |i, j| -g[(i, j)] * node.value[(i, j)] / bv[(i, j)]);
                    acc(*b, db);
                }
            }
            Op::Sum(terms) => {
                for t in terms {
                    acc(*t, g.clone());
                }
            }
            Op::Scale(x, s) => {
                if rg(*x) {
                    acc(*x, g.scale(self.scalar_value(*s)));
                }
                if rg(*s) {
                    acc(*s, Plane::scalar(g.inner(self.value(*x))?));
                }
            }
            Op::ScaleConst(x, c) => acc(*x, g.scale(*c)),
            Op::Abs(x) => acc(*x, g.zip_map(self.value(*x), |gv, xv| gv * sign(xv))),
            Op::Tanh(x) => acc(*x, g.zip_map(&node.value, |gv, t| gv * (1.0 - t * t))),
            Op::Sqrt(x) => acc(*x, g.zip_map(&node.value, |gv, r| if r > 0.0 { gv / (2.0 * r) } else { 0.0 })),
            Op::Conv { input, filter } => {
                if rg(*input) {
                    acc(*input, tensor::adjoint_conv2d_taps(g, self.value(*filter))?);
                }
                if rg(*filter) {
                    acc(*filter, tensor::conv2d_filter_grad(g, self.value(*input), self.value(*filter).height()));
                }
            }
            Op::Correlate { input, filter } => {
                if rg(*input) {
                    acc(*input, tensor::conv2d_same_taps(g, self.value(*filter))?);
                }
                if rg(*filter) {
                    acc(*filter, tensor::adjoint_filter_grad(g, self.value(*input), self.value(*filter).height()));
                }
            }
            Op::SoftThreshold { input, sigma } => {
                let t = self.scalar_value(*sigma);
                let x = self.value(*input);
                if rg(*input) {
                    acc(*input, g.zip_map(x, |gv, xv| if xv.abs() > t { gv } else { 0.0 }));
                }
                if rg(*sigma) {
                    let mut s = 0.0;
                    for (&gv, &xv) in g.as_slice().iter().zip(x.as_slice()) {
                        if xv.abs() > t {
                            s -= gv * sign(xv);
                        }
                    }
                    acc(*sigma, Plane::scalar(s));
                }
            }
            Op::SoftThresholdMap { input, threshold } => {
                let x = self.value(*input);
                let t = self.value(*threshold);
                if rg(*input) {
                    let d = Plane::from_fn(x.height(), x.width(), |i, j| {
                        if x[(i, j)].abs() > t[(i, j)] {
                            g[(i, j)]
                        } else {
                            0.0
                        }
                    });
                    acc(*input, d);
                }
                if rg(*threshold) {
                    let d = Plane::from_fn(x.height(), x.width(), |i, j| {
                        if x[(i, j)].abs() > t[(i, j)] {
                            -g[(i, j)] * sign(x[(i, j)])
                        } else {
                            0.0
                        }
                    });
                    acc(*threshold, d);
                }
            }
            Op::WaveletForward { bank, index, input } => acc(*input, bank.forward_adjoint(*index, g)?),
            Op::WaveletInverse { bank, index, input } => acc(*input, bank.inverse_adjoint(*index, g)?),
            Op::Downsample { input, level } => {
                let (h, w) = self.value(*input).dims();
                acc(*input, tensor::bilinear_downsample_adjoint(g, *level, h, w)?);
            }
            Op::GradMag(input) => {
                let (dx, dy) = tensor::forward_differences(self.value(*input));
                let m = &node.value;
                let gx = Plane::from_fn(m.height(), m.width(), |i, j| {
                    if m[(i, j)] > 0.0 {
                        g[(i, j)] * dx[(i, j)] / m[(i, j)]
                    } else {
                        0.0
                    }
                });
                let gy = Plane::from_fn(m.height(), m.width(), |i, j| {
                    if m[(i, j)] > 0.0 {
                        g[(i, j)] * dy[(i, j)] / m[(i, j)]
                    } else {
                        0.0
                    }
                });
                acc(*input, tensor::forward_differences_adjoint(&gx, &gy));
            }
            Op::FrobeniusSq(x) => acc(*x, self.value(*x).scale(2.0 * g.value())),
            Op::FrobeniusNorm(x) => {
                let n = node.value.value();
                let (h, w) = self.value(*x).dims();
                let d = if n > 0.0 { self.value(*x).scale(g.value() / n) } else { Plane::zeros(h, w) };
                acc(*x, d);
            }
            Op::L1(x) => {
                let gv = g.value();
                acc(*x, self.value(*x).map(|v| gv * sign(v)));
            }
            Op::Inner(a, b) => {
                let gv = g.value();
                if rg(*a) {
                    acc(*a, self.value(*b).scale(gv));
                }
                if rg(*b) {
                    acc(*b, self.value(*a).scale(gv));
                }
            }
        }
        Ok(())
    }
}

/// Packs branch bits into bytes for an FNV-1a hash.
struct Fnv {
    hasher: fnv::FnvHasher,
    pending: u8,
    bits: u32,
}

impl Fnv {
    fn new() -> Self {
        Fnv { hasher: fnv::FnvHasher::default(), pending: 0, bits: 0 }
    }

    fn bit(&mut self, on: bool) {
        self.pending = (self.pending << 1) | on as u8;
        self.bits += 1;
        if self.bits % 8 == 0 {
            self.hasher.write_u8(self.pending);
            self.pending = 0;
        }
    }

    fn sign(&mut self, v: f64) {
        self.bit(v > 0.0);
        self.bit(v < 0.0);
    }

    fn finish(mut self) -> u64 {
        self.hasher.write_u8(self.pending);
        self.hasher.write_u32(self.bits);
        self.hasher.finish()
    }
}

/// A scalar loss over a flat parameter vector with an analytic gradient.
pub trait DifferentiableLoss {
    fn value(&self, params: &[f64]) -> Result<f64>;

    fn value_and_grad(&self, params: &[f64]) -> Result<(f64, Vec<f64>)>;

    /// Branch signature of the non-smooth primitives at `params`, when available.
    fn kink_signature(&self, _params: &[f64]) -> Result<Option<u64>> {
        Ok(None)
    }
}

#[derive(Clone, Debug)]
pub struct FdOptions {
    /// Central-difference step, within `[1e-7, 1e-4]`.
    pub epsilon: f64,
    /// Number of coordinates sampled (all coordinates when larger than the parameter count).
    pub samples: usize,
    pub seed: u64,
    /// Coordinates whose `±kink_window * epsilon` interval changes the kink signature are skipped.
    pub kink_window: f64,
    /// Denominator floor of the relative error.
    pub grad_floor: f64,
    /// Differences within `noise_factor * f64::EPSILON * |f| / epsilon` are
    /// below what central differences can resolve and count as agreement.
    pub noise_factor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self { epsilon: 1e-6, samples: 200, seed: 0, kink_window: 10.0, grad_floor: 1e-8, noise_factor: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: Option<usize>,
    pub tested: usize,
    pub excluded: usize,
    /// Tested coordinates whose mismatch was within the rounding resolution.
    pub noise_limited: usize,
    /// Largest relative error before the rounding allowance.
    pub max_raw_rel_error: f64,
}

/// Compares `value_and_grad` against central differences on a random coordinate subsample.
///
/// Relative error per coordinate is `|g - fd| / max(|g|, |fd|, grad_floor)`,
/// taken as zero when `|g - fd|` is within the rounding noise of the
/// difference quotient (see [`FdOptions::noise_factor`]).
pub fn finite_diff_check<L: DifferentiableLoss + ?Sized>(loss: &L, params: &[f64], opts: &FdOptions) -> Result<FdReport> {
    if !(1e-7..=1e-4).contains(&opts.epsilon) {
        return Err(Error::invalid(format!("epsilon {} outside [1e-7, 1e-4]", opts.epsilon)));
    }
    let (f0, grad) = loss.value_and_grad(params)?;
    let again = loss.value(params)?;
    if f0.to_bits() != again.to_bits() {
        return Err(Error::NonDeterministicLoss { first: f0, second: again });
    }
    if grad.len() != params.len() {
        return Err(Error::shape(format!("gradient has {} entries for {} parameters", grad.len(), params.len())));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let coords: Vec<usize> = if opts.samples >= params.len() {
        (0..params.len()).collect()
    } else {
        let mut c = index::sample(&mut rng, params.len(), opts.samples).into_vec();
        c.sort_unstable();
        c
    };

    let eps = opts.epsilon;
    let mut probe = params.to_vec();
    let mut eval = |j: usize, delta: f64| -> Result<f64> {
        probe[j] = params[j] + delta;
        let v = loss.value(&probe);
        probe[j] = params[j];
        v
    };
    let mut report = FdReport { max_rel_error: 0.0, worst: None, tested: 0, excluded: 0, noise_limited: 0, max_raw_rel_error: 0.0 };
    let mut excluded = HashSet::new();

    let base_sig = loss.kink_signature(params)?;
    for &j in &coords {
        if let Some(sig) = base_sig {
            let mut p = params.to_vec();
            let w = opts.kink_window * eps;
            p[j] = params[j] + w;
            let plus = loss.kink_signature(&p)?;
            p[j] = params[j] - w;
            let minus = loss.kink_signature(&p)?;
            if plus != Some(sig) || minus != Some(sig) {
                excluded.insert(j);
                continue;
            }
        }
        let (up, down) = (eval(j, eps)?, eval(j, -eps)?);
        let fd = (up - down) / (2.0 * eps);
        let g = grad[j];
        let gap = (g - fd).abs();
        let noise = opts.noise_factor * f64::EPSILON * up.abs().max(down.abs()) / eps;
        report.tested += 1;
        let raw = gap / g.abs().max(fd.abs()).max(opts.grad_floor);
        report.max_raw_rel_error = report.max_raw_rel_error.max(raw);
        let rel = if gap <= noise {
            report.noise_limited += 1;
            0.0
        } else {
            raw
        };
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = rel;
            report.worst = Some(j);
        }
    }
    report.excluded = excluded.len();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
        Plane::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn record_add_and_tanh_chain() {
        let mut tape = Tape::new();
        let x = tape.leaf(Plane::from_vec(1, 2, vec![1.0, 2.0]).unwrap());
        let y = tape.leaf(Plane::from_vec(1, 2, vec![0.5, -4.0]).unwrap());
        let s = tape.add(x, y).unwrap();
        assert_eq!(tape.value(s).as_slice(), &[1.5, -2.0]);

        let z = tape.leaf(Plane::zeros(2, 2));
        let z2 = tape.scale_const(z, 2.0);
        let t = tape.tanh(z2);
        assert!(tape.value(t).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_errors_and_non_scalar_root() {
        let mut tape = Tape::new();
        let a = tape.leaf(Plane::zeros(2, 2));
        let b = tape.leaf(Plane::zeros(3, 2));
        assert!(tape.add(a, b).is_err());
        assert!(tape.scale(a, a).is_err());
        assert!(tape.backward(a).is_err());
    }

    #[test]
    fn quadratic_and_l1_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let xv = random_plane(&mut rng, 4, 3);
        let mut tape = Tape::new();
        let x = tape.leaf(xv.clone());
        let unused = tape.leaf(Plane::filled(2, 2, 1.0));
        let f = tape.frobenius_sq(x);
        let g = tape.backward(f).unwrap();
        assert_eq!(g.wrt(x), xv.scale(2.0));
        assert_eq!(g.wrt(unused), Plane::zeros(2, 2));

        let l = tape.l1(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x), xv.map(|v| v.signum()));
    }

    #[test]
    fn tied_leaf_accumulates_all_uses() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv = random_plane(&mut rng, 6, 6);
        let fv = random_plane(&mut rng, 3, 3);

        let mut tape = Tape::new();
        let x = tape.constant(xv.clone());
        let f = tape.leaf(fv.clone());
        let a = tape.conv(x, f).unwrap();
        let b = tape.conv(a, f).unwrap();
        let r = tape.frobenius_sq(b);
        let tied = tape.backward(r).unwrap().wrt(f);

        let mut tape = Tape::new();
        let x = tape.constant(xv);
        let f1 = tape.leaf(fv.clone());
        let f2 = tape.leaf(fv);
        let a = tape.conv(x, f1).unwrap();
        let b = tape.conv(a, f2).unwrap();
        let r = tape.frobenius_sq(b);
        let g = tape.backward(r).unwrap();
        let untied = g.wrt(f1).add(&g.wrt(f2)).unwrap();
        assert!(tied.max_abs_diff(&untied) < 1e-12);
    }

    /// Builds each primitive once with random operands and checks that the
    /// backward rule is the adjoint of a finite-difference linearization:
    /// `<J^T ybar, dx> == d/dt <ybar, f(x + t dx)>`.
    #[test]
    fn every_primitive_backward_is_adjoint_of_its_linearization() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bank = WaveletBank::new(4, 8, 6).unwrap();
        type Build = Box<dyn Fn(&mut Tape, &[Var]) -> Var>;
        let cases: Vec<(&str, Vec<(usize, usize)>, Build)> = vec![
            ("add", vec![(8, 6), (8, 6)], Box::new(|t, v| t.add(v[0], v[1]).unwrap())),
            ("sub", vec![(8, 6), (8, 6)], Box::new(|t, v| t.sub(v[0], v[1]).unwrap())),
            ("mul", vec![(8, 6), (8, 6)], Box::new(|t, v| t.mul(v[0], v[1]).unwrap())),
            ("div", vec![(8, 6), (8, 6)], Box::new(|t, v| {
                let sq = t.mul(v[1], v[1]).unwrap();
                let one = t.constant(Plane::filled(8, 6, 1.0));
                let d = t.add(sq, one).unwrap();
                t.div(v[0], d).unwrap()
            })),
            ("sum", vec![(8, 6), (8, 6), (8, 6)], Box::new(|t, v| t.sum(v).unwrap())),
            ("scale", vec![(8, 6), (1, 1)], Box::new(|t, v| t.scale(v[0], v[1]).unwrap())),
            ("abs", vec![(8, 6)], Box::new(|t, v| t.abs(v[0]))),
            ("tanh", vec![(8, 6)], Box::new(|t, v| t.tanh(v[0]))),
            ("sqrt", vec![(8, 6)], Box::new(|t, v| {
                let a = t.abs(v[0]);
                t.sqrt(a).unwrap()
            })),
            ("conv", vec![(8, 6), (5, 5)], Box::new(|t, v| t.conv(v[0], v[1]).unwrap())),
            ("correlate", vec![(8, 6), (3, 3)], Box::new(|t, v| t.correlate(v[0], v[1]).unwrap())),
            ("soft_threshold", vec![(8, 6), (1, 1)], Box::new(|t, v| {
                let s = t.abs(v[1]);
                t.soft_threshold(v[0], s).unwrap()
            })),
            ("soft_threshold_map", vec![(8, 6), (8, 6)], Box::new(|t, v| {
                let s = t.abs(v[1]);
                let s = t.scale_const(s, 0.5);
                t.soft_threshold_map(v[0], s).unwrap()
            })),
            ("wavelet_forward", vec![(8, 6)], {
                let b = bank.clone();
                Box::new(move |t, v| t.wavelet_forward(&b, 2, v[0]).unwrap())
            }),
            ("wavelet_inverse", vec![(8, 6)], {
                let b = bank.clone();
                Box::new(move |t, v| t.wavelet_inverse(&b, 3, v[0]).unwrap())
            }),
            ("downsample", vec![(8, 6)], Box::new(|t, v| t.downsample(v[0], 2).unwrap())),
            ("gradient_magnitude", vec![(8, 6)], Box::new(|t, v| t.gradient_magnitude(v[0]).unwrap())),
            ("frobenius_sq", vec![(8, 6)], Box::new(|t, v| t.frobenius_sq(v[0]))),
            ("frobenius_norm", vec![(8, 6)], Box::new(|t, v| t.frobenius_norm(v[0]))),
            ("l1", vec![(8, 6)], Box::new(|t, v| t.l1(v[0]))),
            ("inner", vec![(8, 6), (8, 6)], Box::new(|t, v| t.inner(v[0], v[1]).unwrap())),
        ];

        for (name, shapes, build) in &cases {
            for trial in 0..3 {
                let xs: Vec<Plane> = shapes.iter().map(|&(h, w)| random_plane(&mut rng, h, w)).collect();
                let dxs: Vec<Plane> = shapes.iter().map(|&(h, w)| random_plane(&mut rng, h, w)).collect();

                let eval = |t_step: f64| -> (Tape, Var, Vec<Var>) {
                    let mut tape = Tape::new();
                    let vars: Vec<Var> = xs
                        .iter()
                        .zip(&dxs)
                        .map(|(x, d)| {
                            let mut p = x.clone();
                            p.axpy(t_step, d);
                            tape.leaf(p)
                        })
                        .collect();
                    let out = build(&mut tape, &vars);
                    (tape, out, vars)
                };

                let (tape, out, vars) = eval(0.0);
                let (oh, ow) = tape.value(out).dims();
                let ybar = random_plane(&mut rng, oh, ow);
                let sig = tape.activation_signature();

                let mut t2 = tape;
                let yb = t2.constant(ybar.clone());
                let root = t2.inner(out, yb).unwrap();
                let grads = t2.backward(root).unwrap();
                let lhs: f64 = vars.iter().zip(&dxs).map(|(v, d)| grads.wrt(*v).inner(d).unwrap()).sum();

                let h = 1e-6;
                let (tp, op, _) = eval(h);
                let (tm, om, _) = eval(-h);
                if tp.activation_signature() != sig || tm.activation_signature() != sig {
                    continue;
                }
                let fp = tp.value(op).inner(&ybar).unwrap();
                let fm = tm.value(om).inner(&ybar).unwrap();
                let rhs = (fp - fm) / (2.0 * h);
                let linear = matches!(
                    *name,
                    "add" | "sub" | "sum" | "conv" | "correlate" | "wavelet_forward" | "wavelet_inverse" | "downsample" | "inner"
                );
                let tol = if linear { 1e-8 } else { 1e-6 };
                assert!((lhs - rhs).abs() <= tol * (1.0 + lhs.abs()), "{name} trial {trial}: {lhs} vs {rhs}");
            }
        }
    }

    struct Quadratic {
        weights: Vec<f64>,
    }

    impl DifferentiableLoss for Quadratic {
        fn value(&self, p: &[f64]) -> Result<f64> {
            Ok(p.iter().zip(&self.weights).map(|(x, w)| w * x * x).sum())
        }

        fn value_and_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
            Ok((self.value(p)?, p.iter().zip(&self.weights).map(|(x, w)| 2.0 * w * x).collect()))
        }
    }

    #[test]
    fn finite_difference_on_quadratic() {
        let loss = Quadratic { weights: vec![1.0, 2.0, 0.5, 3.0, 0.0] };
        let params = vec![0.3, -1.2, 2.0, 0.7, 5.0];
        let report = finite_diff_check(&loss, &params, &FdOptions { epsilon: 1e-5, ..Default::default() }).unwrap();
        assert_eq!(report.tested, 5);
        assert!(report.max_rel_error <= 1e-8, "{}", report.max_rel_error);
    }

    #[test]
    fn finite_difference_rejects_bad_epsilon_and_nondeterminism() {
        let loss = Quadratic { weights: vec![1.0] };
        assert!(finite_diff_check(&loss, &[1.0], &FdOptions { epsilon: 1e-2, ..Default::default() }).is_err());

        struct Drifting(std::cell::Cell<f64>);
        impl DifferentiableLoss for Drifting {
            fn value(&self, _: &[f64]) -> Result<f64> {
                self.0.set(self.0.get() + 1.0);
                Ok(self.0.get())
            }
            fn value_and_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
                Ok((self.value(p)?, vec![0.0; p.len()]))
            }
        }
        let err = finite_diff_check(&Drifting(0.0.into()), &[1.0], &FdOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NonDeterministicLoss { .. }));
    }

    #[test]
    fn small_gradient_errors_above_noise_are_caught() {
        struct Offset(f64);
        impl DifferentiableLoss for Offset {
            fn value(&self, p: &[f64]) -> Result<f64> {
                Ok(30.0 + 1e-6 * p[0])
            }
            fn value_and_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
                Ok((self.value(p)?, vec![1e-6 + self.0]))
            }
        }
        let opts = FdOptions { epsilon: 1e-5, ..Default::default() };
        assert!(finite_diff_check(&Offset(0.0), &[0.3], &opts).unwrap().max_rel_error <= 1e-5);
        // A 1% error on a tiny component is far above the rounding noise.
        let report = finite_diff_check(&Offset(1e-8), &[0.3], &opts).unwrap();
        assert!(report.max_rel_error > 5e-3, "{report:?}");
        assert_eq!(report.noise_limited, 0);
    }

    #[test]
    fn constant_parameter_has_zero_error() {
        let loss = Quadratic { weights: vec![0.0, 0.0] };
        let report = finite_diff_check(&loss, &[1.0, -1.0], &FdOptions::default()).unwrap();
        assert_eq!(report.max_rel_error, 0.0);
    }
}
