//! The unrolled separation network.
//!
//! Every layer applies the same [`AnalysisParams`]: each filter and scalar is
//! recorded once per tape and referenced by all `L` layers, so gradients of
//! the tied weights accumulate across depth. With the parameters produced by
//! [`params_from_dictionaries`] a layer is exactly one [`CistaSolver::step`].
//!
//! [`CistaSolver::step`]: crate::sparse_model::CistaSolver::step

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::sparse_model::{CodeStack, DictionarySet, RegWeights, ThresholdMode};
use crate::tensor::{conv2d_same, Filter, Plane, Rgb, DEFAULT_FILTER_SIZE};
use crate::wavelet::{WaveletBank, DEFAULT_TRANSFORMS};

/// Default number of unrolled layers.
pub const DEFAULT_DEPTH: usize = 5;

/// Standard deviation of the Gaussian filter initialization.
pub const INIT_FILTER_STD: f64 = 0.1;

/// Network shape: `K` code channels, `I` transforms, `L` layers, `f x f` filters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Architecture {
    pub channels: usize,
    pub transforms: usize,
    pub depth: usize,
    pub filter_size: usize,
}

impl Default for Architecture {
    fn default() -> Self {
        Self {
            channels: crate::sparse_model::DEFAULT_CHANNELS,
            transforms: DEFAULT_TRANSFORMS,
            depth: DEFAULT_DEPTH,
            filter_size: DEFAULT_FILTER_SIZE,
        }
    }
}

impl std::fmt::Display for Architecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "K={} I={} L={} f={}", self.channels, self.transforms, self.depth, self.filter_size)
    }
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.depth == 0 {
            return Err(Error::invalid("channels and depth must be positive"));
        }
        if !(1..=4).contains(&self.transforms) {
            return Err(Error::invalid(format!("transform count {} outside 1..=4", self.transforms)));
        }
        if self.filter_size == 0 || self.filter_size % 2 == 0 {
            return Err(Error::invalid(format!("filter size {} must be odd", self.filter_size)));
        }
        Ok(())
    }

    /// Filters in the canonical flat layout, analysis then synthesis.
    pub fn filter_count(&self) -> usize {
        let k = self.channels;
        2 * k + 2 + 6 + 3 * k + k
    }

    pub fn scalar_count(&self) -> usize {
        5 + self.transforms
    }

    /// Length of [`NetworkParams::to_flat`].
    pub fn param_count(&self) -> usize {
        self.filter_count() * self.filter_size * self.filter_size + self.scalar_count()
    }
}

/// Learnable parameters shared by every analysis layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalysisParams {
    pub a: Vec<Filter>,
    pub b: Vec<Filter>,
    pub c: Filter,
    pub d: Filter,
    pub e: [Filter; 3],
    pub f: [Filter; 3],
    pub tau1: f64,
    pub tau2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub gamma: f64,
    pub mu: Vec<f64>,
}

/// Linear decoders from codes to the RGB (`w_omega[k][s]`) and X-ray (`w_xi[k]`).
#[derive(Clone, Debug, PartialEq)]
pub struct SynthesisParams {
    pub w_omega: Vec<[Filter; 3]>,
    pub w_xi: Vec<Filter>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams {
    pub arch: Architecture,
    pub analysis: AnalysisParams,
    pub synthesis: SynthesisParams,
}

struct Cursor<'a> {
    data: &'a [f64],
    pos: usize,
    size: usize,
}

impl Cursor<'_> {
    fn filter(&mut self) -> Filter {
        let n = self.size * self.size;
        let taps = self.data[self.pos..self.pos + n].to_vec();
        self.pos += n;
        Filter::from_vec(self.size, taps).expect("architecture validated")
    }

    fn filters(&mut self, n: usize) -> Vec<Filter> {
        (0..n).map(|_| self.filter()).collect()
    }

    fn triple(&mut self) -> [Filter; 3] {
        [self.filter(), self.filter(), self.filter()]
    }

    fn scalar(&mut self) -> f64 {
        self.pos += 1;
        self.data[self.pos - 1]
    }
}

impl NetworkParams {
    /// Canonical flat order: `A_1..K, B_1..K, C, D, E_1..3, F_1..3,
    /// tau1, tau2, lambda1, lambda2, gamma, mu_1..I, W_omega (k-major, then s), W_xi_1..K`,
    /// each filter row-major.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.arch.param_count());
        let (an, sy) = (&self.analysis, &self.synthesis);
        let mut push = |f: &Filter| out.extend_from_slice(f.taps().as_slice());
        an.a.iter().chain(&an.b).chain([&an.c, &an.d]).chain(&an.e).chain(&an.f).for_each(&mut push);
        out.extend_from_slice(&[an.tau1, an.tau2, an.lambda1, an.lambda2, an.gamma]);
        out.extend_from_slice(&an.mu);
        for f in sy.w_omega.iter().flatten().chain(&sy.w_xi) {
            out.extend_from_slice(f.taps().as_slice());
        }
        out
    }

    pub fn from_flat(arch: Architecture, data: &[f64]) -> Result<Self> {
        arch.validate()?;
        if data.len() != arch.param_count() {
            return Err(Error::invalid(format!("{} parameters for architecture {arch} (expected {})", data.len(), arch.param_count())));
        }
        let k = arch.channels;
        let mut c = Cursor { data, pos: 0, size: arch.filter_size };
        let a = c.filters(k);
        let b = c.filters(k);
        let (cf, d) = (c.filter(), c.filter());
        let (e, f) = (c.triple(), c.triple());
        let (tau1, tau2, lambda1, lambda2, gamma) = (c.scalar(), c.scalar(), c.scalar(), c.scalar(), c.scalar());
        let mu = (0..arch.transforms).map(|_| c.scalar()).collect();
        let w_omega = (0..k).map(|_| c.triple()).collect();
        let w_xi = c.filters(k);
        Ok(Self {
            arch,
            analysis: AnalysisParams { a, b, c: cf, d, e, f, tau1, tau2, lambda1, lambda2, gamma, mu },
            synthesis: SynthesisParams { w_omega, w_xi },
        })
    }

    /// Offsets of `lambda1` and `lambda2` in the flat layout.
    pub fn lambda_offsets(arch: &Architecture) -> [usize; 2] {
        let base = (2 * arch.channels + 8) * arch.filter_size * arch.filter_size;
        [base + 2, base + 3]
    }

    /// Clamps `lambda1`, `lambda2` to be nonnegative.
    pub fn project(&mut self) {
        self.analysis.lambda1 = self.analysis.lambda1.max(0.0);
        self.analysis.lambda2 = self.analysis.lambda2.max(0.0);
    }
}

/// Distribution of the initial parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InitScheme {
    pub filter_std: f64,
    /// `lambda1`, `lambda2` are drawn uniformly on `(0, threshold_scale]`.
    pub threshold_scale: f64,
}

impl Default for InitScheme {
    fn default() -> Self {
        Self { filter_std: INIT_FILTER_STD, threshold_scale: 1.0 }
    }
}

impl InitScheme {
    pub fn validate(&self) -> Result<()> {
        if !(self.filter_std.is_finite() && self.filter_std > 0.0 && self.threshold_scale.is_finite() && self.threshold_scale > 0.0) {
            return Err(Error::invalid(format!("init scales must be positive and finite, got {self:?}")));
        }
        Ok(())
    }
}

/// Gaussian filters (std [`INIT_FILTER_STD`]) and scalars uniform on `(0, 1]`,
/// drawn in flat order from one seeded stream.
pub fn init_params(arch: Architecture, seed: u64) -> Result<NetworkParams> {
    init_params_with(arch, seed, InitScheme::default())
}

/// [`init_params`] with other scales; the random stream is the same, so only
/// the scaled entries differ.
pub fn init_params_with(arch: Architecture, seed: u64, scheme: InitScheme) -> Result<NetworkParams> {
    arch.validate()?;
    scheme.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = rand_distr::Normal::new(0.0, scheme.filter_std).expect("validated std");
    let taps = arch.filter_size * arch.filter_size;
    let scalar_start = (2 * arch.channels + 8) * taps;
    let scalar_end = scalar_start + arch.scalar_count();
    let lambdas = NetworkParams::lambda_offsets(&arch);
    let flat: Vec<f64> = (0..arch.param_count())
        .map(|i| {
            if (scalar_start..scalar_end).contains(&i) {
                let u = 1.0 - rng.random::<f64>();
                if lambdas.contains(&i) {
                    scheme.threshold_scale * u
                } else {
                    u
                }
            } else {
                rng.sample(normal)
            }
        })
        .collect();
    NetworkParams::from_flat(arch, &flat)
}

/// Iterate of the analysis network.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkState {
    pub z1: CodeStack,
    pub z2: CodeStack,
    pub y1: Plane,
    pub y2: Plane,
}

/// Zero codes, `y1 = g1`, `y2 = x - g1`.
pub fn init_state(x: &Plane, g1: &Plane, k: usize) -> Result<NetworkState> {
    let y2 = x.sub(g1)?;
    let (h, w) = x.dims();
    Ok(NetworkState { z1: CodeStack::zeros(k, h, w), z2: CodeStack::zeros(k, h, w), y1: g1.clone(), y2 })
}

/// Network parameters under which one layer reproduces one solver step.
pub fn params_from_dictionaries(dict: &DictionarySet, w: &RegWeights) -> AnalysisParams {
    let inv = 1.0 / w.xi;
    AnalysisParams {
        a: dict.theta.iter().map(|t| t.rotate180().scale(inv)).collect(),
        b: dict.theta.clone(),
        c: dict.psi.rotate180().scale(inv),
        d: dict.psi.clone(),
        e: [0, 1, 2].map(|s| dict.phi[s].rotate180()),
        f: dict.phi.clone(),
        tau1: w.tau1 * inv,
        tau2: w.tau2 * inv,
        lambda1: w.lambda1 / (2.0 * w.tau1 * w.xi),
        lambda2: w.lambda2 / (2.0 * w.tau2 * w.xi),
        gamma: w.gamma * inv,
        mu: w.prox_weights(),
    }
}

/// Tape handles for [`AnalysisParams`].
#[derive(Clone, Debug)]
pub struct AnalysisVars {
    pub a: Vec<Var>,
    pub b: Vec<Var>,
    pub c: Var,
    pub d: Var,
    pub e: [Var; 3],
    pub f: [Var; 3],
    pub tau1: Var,
    pub tau2: Var,
    pub lambda1: Var,
    pub lambda2: Var,
    pub gamma: Var,
    pub mu: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct SynthesisVars {
    pub w_omega: Vec<[Var; 3]>,
    pub w_xi: Vec<Var>,
}

/// Every parameter recorded once on a tape, in flat order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub analysis: AnalysisVars,
    pub synthesis: SynthesisVars,
}

fn record_filter(tape: &mut Tape, f: &Filter, trainable: bool) -> Var {
    if trainable {
        tape.leaf(f.taps().clone())
    } else {
        tape.constant(f.taps().clone())
    }
}

fn record_scalar(tape: &mut Tape, v: f64, trainable: bool) -> Var {
    if trainable {
        tape.scalar_leaf(v)
    } else {
        tape.scalar_constant(v)
    }
}

impl AnalysisVars {
    pub fn record(tape: &mut Tape, p: &AnalysisParams, trainable: bool) -> Self {
        let mut f = |x: &Filter| record_filter(tape, x, trainable);
        let a = p.a.iter().map(&mut f).collect();
        let b = p.b.iter().map(&mut f).collect();
        let (c, d) = (f(&p.c), f(&p.d));
        let e = [f(&p.e[0]), f(&p.e[1]), f(&p.e[2])];
        let ff = [f(&p.f[0]), f(&p.f[1]), f(&p.f[2])];
        let mut s = |v: f64| record_scalar(tape, v, trainable);
        let (tau1, tau2, lambda1, lambda2, gamma) = (s(p.tau1), s(p.tau2), s(p.lambda1), s(p.lambda2), s(p.gamma));
        let mu = p.mu.iter().map(|&m| s(m)).collect();
        Self { a, b, c, d, e, f: ff, tau1, tau2, lambda1, lambda2, gamma, mu }
    }

    fn flat(&self) -> impl Iterator<Item = Var> + '_ {
        self.a
            .iter()
            .chain(&self.b)
            .chain([&self.c, &self.d])
            .chain(&self.e)
            .chain(&self.f)
            .chain([&self.tau1, &self.tau2, &self.lambda1, &self.lambda2, &self.gamma])
            .chain(&self.mu)
            .copied()
    }
}

impl ParamVars {
    pub fn record(tape: &mut Tape, params: &NetworkParams, trainable: bool) -> Self {
        let analysis = AnalysisVars::record(tape, &params.analysis, trainable);
        let mut f = |x: &Filter| record_filter(tape, x, trainable);
        let w_omega = params.synthesis.w_omega.iter().map(|t| [f(&t[0]), f(&t[1]), f(&t[2])]).collect();
        let w_xi = params.synthesis.w_xi.iter().map(f).collect();
        Self { analysis, synthesis: SynthesisVars { w_omega, w_xi } }
    }

    /// Gradient in the flat layout of [`NetworkParams::to_flat`].
    pub fn flat_gradient(&self, grads: &Gradients) -> Vec<f64> {
        let s = &self.synthesis;
        let mut out = Vec::new();
        for v in self.analysis.flat().chain(s.w_omega.iter().flatten().copied()).chain(s.w_xi.iter().copied()) {
            out.extend_from_slice(grads.wrt(v).as_slice());
        }
        out
    }
}

/// Network iterate on a tape, plus the cached `sum_k B_k * z_k` for each stack.
#[derive(Clone, Debug)]
pub struct StateVars {
    pub z1: Vec<Var>,
    pub z2: Vec<Var>,
    pub y1: Var,
    pub y2: Var,
    bz1: Option<Var>,
    bz2: Option<Var>,
}

impl StateVars {
    pub fn constant(tape: &mut Tape, s: &NetworkState) -> Self {
        let mut stack = |z: &CodeStack| z.channels().iter().map(|c| tape.constant(c.clone())).collect::<Vec<_>>();
        let z1 = stack(&s.z1);
        let z2 = stack(&s.z2);
        let y1 = tape.constant(s.y1.clone());
        let y2 = tape.constant(s.y2.clone());
        Self { z1, z2, y1, y2, bz1: None, bz2: None }
    }

    pub fn value(&self, tape: &Tape) -> NetworkState {
        let stack = |z: &[Var]| CodeStack::from_planes(z.iter().map(|&v| tape.value(v).clone()).collect()).expect("recorded stack");
        NetworkState { z1: stack(&self.z1), z2: stack(&self.z2), y1: tape.value(self.y1).clone(), y2: tape.value(self.y2).clone() }
    }
}

/// Mixed X-ray and surface RGB on a tape.
#[derive(Clone, Copy, Debug)]
pub struct InputVars {
    pub x: Var,
    pub rgb: [Var; 3],
}

impl InputVars {
    pub fn constant(tape: &mut Tape, x: &Plane, rgb: &Rgb) -> Self {
        Self { x: tape.constant(x.clone()), rgb: [0, 1, 2].map(|s| tape.constant(rgb[s].clone())) }
    }
}

fn filter_sum(tape: &mut Tape, filters: &[Var], z: &[Var]) -> Result<Var> {
    if filters.len() != z.len() {
        return Err(Error::shape(format!("{} code channels for {} filters", z.len(), filters.len())));
    }
    let terms = filters.iter().zip(z).map(|(&f, &c)| tape.conv(c, f)).collect::<Result<Vec<_>>>()?;
    tape.sum(&terms)
}

/// The analysis stack: architecture, the transforms for one patch shape, and
/// the threshold mode of its coupling prox.
#[derive(Clone, Debug)]
pub struct Lcista {
    pub arch: Architecture,
    pub bank: WaveletBank,
    pub mode: ThresholdMode,
}

impl Lcista {
    pub fn new(arch: Architecture, height: usize, width: usize) -> Result<Self> {
        arch.validate()?;
        Ok(Self { arch, bank: WaveletBank::new(arch.transforms, height, width)?, mode: ThresholdMode::Elementwise })
    }

    pub fn with_mode(mut self, mode: ThresholdMode) -> Self {
        self.mode = mode;
        self
    }

    fn code_update(&self, tape: &mut Tape, a: &[Var], z: &[Var], y: Var, bz: Var, lambda: Var) -> Result<Vec<Var>> {
        let resid = tape.sub(y, bz)?;
        z.iter()
            .zip(a)
            .map(|(&zk, &ak)| {
                let corr = tape.conv(resid, ak)?;
                let pre = tape.add(zk, corr)?;
                tape.soft_threshold(pre, lambda)
            })
            .collect()
    }

    /// `(1/I) sum_i W_i^{-1} S_{t_i}(W_i c)` with `t_i` from `mu_i` and `W_i b`.
    pub fn prox_tape(&self, tape: &mut Tape, mu: &[Var], b: Var, c: Var) -> Result<Var> {
        if mu.len() != self.bank.count() {
            return Err(Error::invalid(format!("{} prox weights for {} transforms", mu.len(), self.bank.count())));
        }
        let mut terms = Vec::with_capacity(mu.len());
        for (i, &m) in mu.iter().enumerate() {
            let wb = tape.wavelet_forward(&self.bank, i, b)?;
            let wc = tape.wavelet_forward(&self.bank, i, c)?;
            let shrunk = match self.mode {
                ThresholdMode::Elementwise => {
                    let mag = tape.abs(wb);
                    let t = tape.scale(mag, m)?;
                    tape.soft_threshold_map(wc, t)?
                }
                ThresholdMode::Literal => {
                    let n = tape.l1(wb);
                    let t = tape.mul(n, m)?;
                    tape.soft_threshold(wc, t)?
                }
            };
            terms.push(tape.wavelet_inverse(&self.bank, i, shrunk)?);
        }
        let total = tape.sum(&terms)?;
        Ok(tape.scale_const(total, 1.0 / mu.len() as f64))
    }

    /// `c + C*(x - D*(y1 + y2)) - tau (c - bz)`
    fn data_step(&self, tape: &mut Tape, p: &AnalysisVars, x: Var, y1: Var, y2: Var, own: Var, bz: Var, tau: Var) -> Result<Var> {
        let sum = tape.add(y1, y2)?;
        let pred = tape.conv(sum, p.d)?;
        let resid = tape.sub(x, pred)?;
        let corr = tape.conv(resid, p.c)?;
        let gap = tape.sub(own, bz)?;
        let pull = tape.scale(gap, tau)?;
        let step = tape.add(own, corr)?;
        tape.sub(step, pull)
    }

    /// One analysis layer: `z2`, `z1`, `y2`, `y1` in that order.
    pub fn layer_tape(&self, tape: &mut Tape, p: &AnalysisVars, s: &StateVars, input: &InputVars) -> Result<StateVars> {
        if s.z1.len() != p.b.len() || s.z2.len() != p.b.len() {
            return Err(Error::shape(format!("state has {} code channels, network {}", s.z1.len(), p.b.len())));
        }
        let bz2_prev = match s.bz2 {
            Some(v) => v,
            None => filter_sum(tape, &p.b, &s.z2)?,
        };
        let bz1_prev = match s.bz1 {
            Some(v) => v,
            None => filter_sum(tape, &p.b, &s.z1)?,
        };
        let z2 = self.code_update(tape, &p.a, &s.z2, s.y2, bz2_prev, p.lambda2)?;
        let z1 = self.code_update(tape, &p.a, &s.z1, s.y1, bz1_prev, p.lambda1)?;

        let bz2 = filter_sum(tape, &p.b, &z2)?;
        let c2 = self.data_step(tape, p, input.x, s.y1, s.y2, s.y2, bz2, p.tau2)?;
        let y2 = self.prox_tape(tape, &p.mu, s.y1, c2)?;

        let bz1 = filter_sum(tape, &p.b, &z1)?;
        let mut c1 = self.data_step(tape, p, input.x, s.y1, y2, s.y1, bz1, p.tau1)?;
        let mut rgb_terms = Vec::with_capacity(3);
        for ch in 0..3 {
            let pred = tape.conv(s.y1, p.f[ch])?;
            let resid = tape.sub(input.rgb[ch], pred)?;
            rgb_terms.push(tape.conv(resid, p.e[ch])?);
        }
        let rgb_sum = tape.sum(&rgb_terms)?;
        let rgb_pull = tape.scale(rgb_sum, p.gamma)?;
        c1 = tape.add(c1, rgb_pull)?;
        let y1 = self.prox_tape(tape, &p.mu, y2, c1)?;

        Ok(StateVars { z1, z2, y1, y2, bz1: Some(bz1), bz2: Some(bz2) })
    }

    /// `init_state` then `L` shared-weight layers.
    pub fn analysis_tape(&self, tape: &mut Tape, p: &AnalysisVars, input: &InputVars, g1: Var) -> Result<StateVars> {
        let k = p.b.len();
        let zeros = |tape: &mut Tape| -> Vec<Var> {
            let (h, w) = tape.value(g1).dims();
            (0..k).map(|_| tape.constant(Plane::zeros(h, w))).collect()
        };
        let z1 = zeros(tape);
        let z2 = zeros(tape);
        let y2 = tape.sub(input.x, g1)?;
        // Zero codes synthesize to zero; skipping the K convolutions keeps the first layer cheap.
        let (h, w) = tape.value(g1).dims();
        let zero = tape.constant(Plane::zeros(h, w));
        let mut state = StateVars { z1, z2, y1: g1, y2, bz1: Some(zero), bz2: Some(zero) };
        for _ in 0..self.arch.depth {
            state = self.layer_tape(tape, p, &state, input)?;
        }
        Ok(state)
    }

    pub fn layer_forward(&self, state: &NetworkState, x: &Plane, rgb: &Rgb, params: &AnalysisParams) -> Result<NetworkState> {
        let mut tape = Tape::new();
        let p = AnalysisVars::record(&mut tape, params, false);
        let s = StateVars::constant(&mut tape, state);
        let input = InputVars::constant(&mut tape, x, rgb);
        Ok(self.layer_tape(&mut tape, &p, &s, &input)?.value(&tape))
    }

    pub fn analysis_forward(&self, x: &Plane, rgb: &Rgb, g1: &Plane, params: &AnalysisParams) -> Result<NetworkState> {
        x.ensure_same_shape(g1, "analysis_forward")?;
        let mut tape = Tape::new();
        let p = AnalysisVars::record(&mut tape, params, false);
        let input = InputVars::constant(&mut tape, x, rgb);
        let g = tape.constant(g1.clone());
        Ok(self.analysis_tape(&mut tape, &p, &input, g)?.value(&tape))
    }
}

/// `r_s = sum_k W_omega[k][s] * z1_k` on a tape.
pub fn synthesize_rgb_tape(tape: &mut Tape, s: &SynthesisVars, z1: &[Var]) -> Result<[Var; 3]> {
    let mut out = [z1[0]; 3];
    for (ch, slot) in out.iter_mut().enumerate() {
        let filters: Vec<Var> = s.w_omega.iter().map(|t| t[ch]).collect();
        *slot = filter_sum(tape, &filters, z1)?;
    }
    Ok(out)
}

/// `(x1, x2, x1 + x2)` with `x_j = sum_k W_xi[k] * z_j,k` on a tape.
pub fn synthesize_xray_tape(tape: &mut Tape, s: &SynthesisVars, z1: &[Var], z2: &[Var]) -> Result<(Var, Var, Var)> {
    let x1 = filter_sum(tape, &s.w_xi, z1)?;
    let x2 = filter_sum(tape, &s.w_xi, z2)?;
    let x = tape.add(x1, x2)?;
    Ok((x1, x2, x))
}

fn check_channels(z: &CodeStack, k: usize) -> Result<()> {
    if z.len() != k {
        return Err(Error::shape(format!("{} code channels for {k} synthesis filters", z.len())));
    }
    Ok(())
}

pub fn synthesize_rgb(z1: &CodeStack, params: &SynthesisParams) -> Result<Rgb> {
    check_channels(z1, params.w_omega.len())?;
    let (h, w) = z1.dims();
    let mut out = [Plane::zeros(h, w), Plane::zeros(h, w), Plane::zeros(h, w)];
    for (filters, z) in params.w_omega.iter().zip(z1.channels()) {
        for (acc, f) in out.iter_mut().zip(filters) {
            acc.add_assign(&conv2d_same(z, f)?);
        }
    }
    Ok(out)
}

/// Returns `(x1, x2, x)`; `x` is computed as `x1 + x2` so additivity is exact.
pub fn synthesize_xray(z1: &CodeStack, z2: &CodeStack, params: &SynthesisParams) -> Result<(Plane, Plane, Plane)> {
    check_channels(z1, params.w_xi.len())?;
    check_channels(z2, params.w_xi.len())?;
    let decode = |z: &CodeStack| -> Result<Plane> {
        let (h, w) = z.dims();
        let mut acc = Plane::zeros(h, w);
        for (f, c) in params.w_xi.iter().zip(z.channels()) {
            acc.add_assign(&conv2d_same(c, f)?);
        }
        Ok(acc)
    };
    let x1 = decode(z1)?;
    let x2 = decode(z2)?;
    let x = x1.add(&x2)?;
    Ok((x1, x2, x))
}
