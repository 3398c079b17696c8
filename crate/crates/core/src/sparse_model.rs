//! Coupled convolutional sparse coding with fixed dictionaries.
//!
//! The model ties a mixed X-ray `x`, the surface RGB `r_s`, two information
//! images `y1`, `y2` and their sparse codes `z1`, `z2`:
//!
//! ```text
//! J = ||x - Psi*y1 - Psi*y2||^2
//!   + tau1 ||y1 - sum_k Theta_k*z1_k||^2 + tau2 ||y2 - sum_k Theta_k*z2_k||^2
//!   + gamma sum_s ||r_s - Phi_s*y1||^2
//!   + lambda1 sum_k ||z1_k||_1 + lambda2 sum_k ||z2_k||_1
//!   + sum_i mu_i ||(W_i y1) . (W_i y2)||_1
//! ```
//!
//! [`CistaSolver::step`] is one sweep of block proximal gradient over
//! `z2, z1, y2, y1` (in that order), each block using the freshest values of
//! the others. With `1/xi` the inverse Lipschitz scale, the `z` blocks take a
//! step of `1/(2 tau xi)` and the `y` blocks `1/(2 xi)`, which is what keeps
//! the shared-filter layer form of the learned network reachable.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::soft_threshold_value;
use crate::error::{Error, Result};
use crate::tensor::{adjoint_conv2d, conv2d_same, Filter, Plane, PlaneSet, Rgb};
use crate::wavelet::WaveletBank;

/// Default number of code channels.
pub const DEFAULT_CHANNELS: usize = 64;

/// `K` same-shaped code planes.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeStack {
    channels: Vec<Plane>,
}

impl CodeStack {
    pub fn zeros(k: usize, height: usize, width: usize) -> Self {
        Self { channels: (0..k).map(|_| Plane::zeros(height, width)).collect() }
    }

    pub fn from_planes(channels: Vec<Plane>) -> Result<Self> {
        let first = channels.first().ok_or_else(|| Error::invalid("code stack needs at least one channel"))?;
        if channels.iter().any(|c| !c.same_shape(first)) {
            return Err(Error::shape("code channels must share one shape"));
        }
        Ok(Self { channels })
    }

    pub fn len(&self) -> usize {
        self.channels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.channels.is_empty()
    }

    pub fn dims(&self) -> (usize, usize) {
        self.channels[0].dims()
    }

    pub fn channel(&self, k: usize) -> &Plane {
        &self.channels[k]
    }

    pub fn channels(&self) -> &[Plane] {
        &self.channels
    }

    pub fn into_planes(self) -> Vec<Plane> {
        self.channels
    }

    pub fn max_abs_diff(&self, other: &CodeStack) -> f64 {
        self.channels.iter().zip(&other.channels).fold(0.0, |m, (a, b)| m.max(a.max_abs_diff(b)))
    }

    pub fn is_zero(&self) -> bool {
        self.channels.iter().all(|c| c.as_slice().iter().all(|&v| v == 0.0))
    }
}

impl PlaneSet for CodeStack {
    fn planes(&self) -> &[Plane] {
        &self.channels
    }
}

/// Elementwise `sign(x) * max(|x| - sigma, 0)`.
pub fn soft_threshold(x: &Plane, sigma: f64) -> Result<Plane> {
    if !(sigma >= 0.0) {
        return Err(Error::invalid(format!("soft threshold {sigma} must be nonnegative")));
    }
    Ok(x.map(|v| soft_threshold_value(v, sigma)))
}

pub fn soft_threshold_stack(z: &CodeStack, sigma: f64) -> Result<CodeStack> {
    Ok(CodeStack { channels: z.channels.iter().map(|c| soft_threshold(c, sigma)).collect::<Result<_>>()? })
}

/// How the coupling prox turns `a_i` and the pivot `W_i b` into thresholds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ThresholdMode {
    /// `t = a_i * |W_i b|` per coefficient: the exact prox of the weighted product term.
    #[default]
    Elementwise,
    /// `t = a_i * ||W_i b||_1`, one scalar per transform.
    Literal,
}

/// `(1/I) sum_i W_i^{-1} S_{t_i}(W_i c)` with thresholds derived from `a_i` and `W_i b`.
pub fn parallel_prox(a: &[f64], b: &Plane, c: &Plane, bank: &WaveletBank, mode: ThresholdMode) -> Result<Plane> {
    if a.len() != bank.count() {
        return Err(Error::invalid(format!("{} prox weights for {} transforms", a.len(), bank.count())));
    }
    b.ensure_same_shape(c, "parallel_prox")?;
    let mut out = Plane::zeros(c.height(), c.width());
    for (i, &ai) in a.iter().enumerate() {
        let wb = bank.forward(i, b)?;
        let wc = bank.forward(i, c)?;
        let shrunk = match mode {
            ThresholdMode::Elementwise => wc.zip_map(&wb, |v, p| soft_threshold_value(v, ai * p.abs())),
            ThresholdMode::Literal => {
                let t = ai * wb.l1();
                wc.map(|v| soft_threshold_value(v, t))
            }
        };
        out.add_assign(&bank.inverse(i, &shrunk)?);
    }
    Ok(out.scale(1.0 / bank.count() as f64))
}

/// Known dictionaries `Psi`, `Theta_k` and `Phi_s`.
#[derive(Clone, Debug, PartialEq)]
pub struct DictionarySet {
    pub psi: Filter,
    pub theta: Vec<Filter>,
    pub phi: [Filter; 3],
}

impl DictionarySet {
    pub fn new(psi: Filter, theta: Vec<Filter>, phi: [Filter; 3]) -> Result<Self> {
        let f = psi.size();
        if theta.is_empty() {
            return Err(Error::invalid("dictionary needs at least one Theta filter"));
        }
        if theta.iter().chain(phi.iter()).any(|t| t.size() != f) {
            return Err(Error::invalid("all dictionary filters must share one size"));
        }
        Ok(Self { psi, theta, phi })
    }

    /// I.i.d. Gaussian taps with the given standard deviation.
    pub fn random(k: usize, size: usize, std: f64, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = rand_distr::Normal::new(0.0, std).map_err(|e| Error::invalid(e.to_string()))?;
        let mut draw = || Filter::new(Plane::from_fn(size, size, |_, _| rng.sample(normal)));
        let psi = draw()?;
        let theta = (0..k).map(|_| draw()).collect::<Result<Vec<_>>>()?;
        let phi = [draw()?, draw()?, draw()?];
        Self::new(psi, theta, phi)
    }

    pub fn channels(&self) -> usize {
        self.theta.len()
    }

    pub fn filter_size(&self) -> usize {
        self.psi.size()
    }

    /// `sum_k Theta_k * z_k`
    pub fn synthesize(&self, z: &CodeStack) -> Result<Plane> {
        if z.len() != self.theta.len() {
            return Err(Error::shape(format!("{} code channels for {} filters", z.len(), self.theta.len())));
        }
        let (h, w) = z.dims();
        let mut acc = Plane::zeros(h, w);
        for (t, c) in self.theta.iter().zip(z.channels()) {
            acc.add_assign(&conv2d_same(c, t)?);
        }
        Ok(acc)
    }
}

/// Regularization weights and the inverse step scale `xi`.
#[derive(Clone, Debug, PartialEq)]
pub struct RegWeights {
    pub gamma: f64,
    pub tau1: f64,
    pub tau2: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub mu: Vec<f64>,
    pub xi: f64,
}

impl RegWeights {
    pub fn validate(&self, transforms: usize) -> Result<()> {
        let all = [self.gamma, self.tau1, self.tau2, self.lambda1, self.lambda2, self.xi];
        if all.iter().chain(&self.mu).any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::invalid("regularization weights must be finite and strictly positive"));
        }
        if self.mu.len() != transforms {
            return Err(Error::invalid(format!("{} mu weights for {} transforms", self.mu.len(), transforms)));
        }
        Ok(())
    }

    /// Thresholds `a_i` handed to [`parallel_prox`] by the `y` updates.
    pub fn prox_weights(&self) -> Vec<f64> {
        let n = self.mu.len() as f64;
        self.mu.iter().map(|m| n * m / (2.0 * self.xi)).collect()
    }
}

/// Iterate `(z1, z2, y1, y2)` of the solver.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub z1: CodeStack,
    pub z2: CodeStack,
    pub y1: Plane,
    pub y2: Plane,
    pub iteration: usize,
}

impl SolverState {
    pub fn zeros(k: usize, height: usize, width: usize) -> Self {
        Self {
            z1: CodeStack::zeros(k, height, width),
            z2: CodeStack::zeros(k, height, width),
            y1: Plane::zeros(height, width),
            y2: Plane::zeros(height, width),
            iteration: 0,
        }
    }

    fn check(&self, x: &Plane, rgb: &Rgb, k: usize) -> Result<()> {
        let dims = x.dims();
        if self.y1.dims() != dims
            || self.y2.dims() != dims
            || self.z1.dims() != dims
            || self.z2.dims() != dims
            || rgb.iter().any(|r| r.dims() != dims)
        {
            return Err(Error::shape("solver state, X-ray and RGB planes must share one shape"));
        }
        if self.z1.len() != k || self.z2.len() != k {
            return Err(Error::shape(format!("state has {}/{} code channels, dictionary {k}", self.z1.len(), self.z2.len())));
        }
        Ok(())
    }
}

/// The seven terms of the coupled objective, in model order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveTerms {
    pub xray: f64,
    pub info1: f64,
    pub info2: f64,
    pub rgb: f64,
    pub sparsity1: f64,
    pub sparsity2: f64,
    pub coupling: f64,
}

impl ObjectiveTerms {
    pub fn total(&self) -> f64 {
        self.xray + self.info1 + self.info2 + self.rgb + self.sparsity1 + self.sparsity2 + self.coupling
    }
}

#[derive(Clone, Debug)]
pub struct SolveResult {
    pub state: SolverState,
    /// Objective at the start and after every iteration (`L + 1` values).
    pub objective: Vec<f64>,
}

/// CISTA over fixed dictionaries.
#[derive(Clone, Debug)]
pub struct CistaSolver {
    pub dict: DictionarySet,
    pub weights: RegWeights,
    pub bank: WaveletBank,
    pub mode: ThresholdMode,
}

impl CistaSolver {
    pub fn new(dict: DictionarySet, weights: RegWeights, bank: WaveletBank) -> Result<Self> {
        weights.validate(bank.count())?;
        Ok(Self { dict, weights, bank, mode: ThresholdMode::Elementwise })
    }

    pub fn with_mode(mut self, mode: ThresholdMode) -> Self {
        self.mode = mode;
        self
    }

    pub fn objective_terms(&self, x: &Plane, rgb: &Rgb, state: &SolverState) -> Result<ObjectiveTerms> {
        state.check(x, rgb, self.dict.channels())?;
        let (d, w) = (&self.dict, &self.weights);
        let psi1 = conv2d_same(&state.y1, &d.psi)?;
        let psi2 = conv2d_same(&state.y2, &d.psi)?;
        let xray = x.sub(&psi1)?.sub(&psi2)?.frobenius_sq();
        let info1 = w.tau1 * state.y1.sub(&d.synthesize(&state.z1)?)?.frobenius_sq();
        let info2 = w.tau2 * state.y2.sub(&d.synthesize(&state.z2)?)?.frobenius_sq();
        let mut rgb_term = 0.0;
        for (r, phi) in rgb.iter().zip(&d.phi) {
            rgb_term += r.sub(&conv2d_same(&state.y1, phi)?)?.frobenius_sq();
        }
        let sparsity1 = w.lambda1 * state.z1.channels().iter().map(Plane::l1).sum::<f64>();
        let sparsity2 = w.lambda2 * state.z2.channels().iter().map(Plane::l1).sum::<f64>();
        let mut coupling = 0.0;
        for (i, mu) in w.mu.iter().enumerate() {
            let a = self.bank.forward(i, &state.y1)?;
            let b = self.bank.forward(i, &state.y2)?;
            coupling += mu * a.hadamard(&b)?.l1();
        }
        Ok(ObjectiveTerms { xray, info1, info2, rgb: w.gamma * rgb_term, sparsity1, sparsity2, coupling })
    }

    pub fn objective(&self, x: &Plane, rgb: &Rgb, state: &SolverState) -> Result<f64> {
        Ok(self.objective_terms(x, rgb, state)?.total())
    }

    fn code_update(&self, z: &CodeStack, y: &Plane, tau: f64, lambda: f64) -> Result<CodeStack> {
        let xi = self.weights.xi;
        let residual = y.sub(&self.dict.synthesize(z)?)?;
        let threshold = lambda / (2.0 * tau * xi);
        let channels = z
            .channels()
            .iter()
            .zip(&self.dict.theta)
            .map(|(zk, theta)| {
                let mut pre = zk.clone();
                pre.axpy(1.0 / xi, &adjoint_conv2d(&residual, theta)?);
                soft_threshold(&pre, threshold)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(CodeStack { channels })
    }

    /// One pass of the four block updates.
    pub fn step(&self, state: &SolverState, x: &Plane, rgb: &Rgb) -> Result<SolverState> {
        state.check(x, rgb, self.dict.channels())?;
        let (d, w) = (&self.dict, &self.weights);
        let xi = w.xi;
        let prox_a = w.prox_weights();

        let z2 = self.code_update(&state.z2, &state.y2, w.tau2, w.lambda2)?;
        let z1 = self.code_update(&state.z1, &state.y1, w.tau1, w.lambda1)?;

        let data = |y1: &Plane, y2: &Plane| -> Result<Plane> {
            let resid = x.sub(&conv2d_same(&y1.add(y2)?, &d.psi)?)?;
            adjoint_conv2d(&resid, &d.psi)
        };

        let mut c2 = state.y2.clone();
        c2.axpy(1.0 / xi, &data(&state.y1, &state.y2)?);
        c2.axpy(-w.tau2 / xi, &state.y2.sub(&d.synthesize(&z2)?)?);
        let y2 = parallel_prox(&prox_a, &state.y1, &c2, &self.bank, self.mode)?;

        let mut c1 = state.y1.clone();
        c1.axpy(1.0 / xi, &data(&state.y1, &y2)?);
        c1.axpy(-w.tau1 / xi, &state.y1.sub(&d.synthesize(&z1)?)?);
        let mut rgb_grad = Plane::zeros(x.height(), x.width());
        for (r, phi) in rgb.iter().zip(&d.phi) {
            let resid = r.sub(&conv2d_same(&state.y1, phi)?)?;
            rgb_grad.add_assign(&adjoint_conv2d(&resid, phi)?);
        }
        c1.axpy(w.gamma / xi, &rgb_grad);
        let y1 = parallel_prox(&prox_a, &y2, &c1, &self.bank, self.mode)?;

        Ok(SolverState { z1, z2, y1, y2, iteration: state.iteration + 1 })
    }

    /// `iterations` steps from `init`, recording the objective after each.
    pub fn solve(&self, x: &Plane, rgb: &Rgb, init: SolverState, iterations: usize) -> Result<SolveResult> {
        if iterations == 0 {
            return Err(Error::invalid("solver needs at least one iteration"));
        }
        let mut objective = vec![self.objective(x, rgb, &init)?];
        let mut state = init;
        for _ in 0..iterations {
            state = self.step(&state, x, rgb)?;
            objective.push(self.objective(x, rgb, &state)?);
        }
        Ok(SolveResult { state, objective })
    }
}

/// Power-method estimate of the largest eigenvalue of `op^T op`.
fn power_norm_sq(mut apply: impl FnMut(&[Plane]) -> Result<Vec<Plane>>, shape: (usize, usize, usize), iterations: usize, seed: u64) -> Result<f64> {
    let (n, h, w) = shape;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut v: Vec<Plane> = (0..n).map(|_| Plane::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))).collect();
    let norm = |v: &[Plane]| v.iter().map(Plane::frobenius_sq).sum::<f64>().sqrt();
    let mut estimate = 0.0;
    for _ in 0..iterations {
        let nv = norm(&v);
        if nv == 0.0 {
            return Ok(0.0);
        }
        for p in &mut v {
            *p = p.scale(1.0 / nv);
        }
        let next = apply(&v)?;
        estimate = norm(&next);
        v = next;
    }
    Ok(estimate)
}

/// Number of power iterations used by [`calibrate_xi`].
pub const POWER_ITERATIONS: usize = 20;

/// Step margin: `1/xi = STEP_MARGIN / (Lipschitz bound)`.
pub const STEP_MARGIN: f64 = 0.9;

/// Chooses `xi` so every block step is within `STEP_MARGIN` of its Lipschitz limit.
///
/// The bound is the largest of `||Theta||^2`, `||Psi||^2 + tau2` and
/// `||Psi||^2 + tau1 + gamma ||Phi||^2`, each operator norm estimated by
/// power iteration on `height x width` planes.
pub fn calibrate_xi(dict: &DictionarySet, tau1: f64, tau2: f64, gamma: f64, height: usize, width: usize) -> Result<f64> {
    let k = dict.channels();
    let theta = power_norm_sq(
        |v| {
            let code = CodeStack::from_planes(v.to_vec())?;
            let y = dict.synthesize(&code)?;
            dict.theta.iter().map(|t| adjoint_conv2d(&y, t)).collect()
        },
        (k, height, width),
        POWER_ITERATIONS,
        1,
    )?;
    let psi = power_norm_sq(
        |v| Ok(vec![adjoint_conv2d(&conv2d_same(&v[0], &dict.psi)?, &dict.psi)?]),
        (1, height, width),
        POWER_ITERATIONS,
        2,
    )?;
    let phi = power_norm_sq(
        |v| {
            let mut acc = Plane::zeros(height, width);
            for f in &dict.phi {
                acc.add_assign(&adjoint_conv2d(&conv2d_same(&v[0], f)?, f)?);
            }
            Ok(vec![acc])
        },
        (1, height, width),
        POWER_ITERATIONS,
        3,
    )?;
    let bound = theta.max(psi + tau2).max(psi + tau1 + gamma * phi);
    Ok(bound / STEP_MARGIN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop, prop_assert, prop_assert_eq, proptest};

    fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
        Plane::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
    }

    fn weights(i: usize, xi: f64) -> RegWeights {
        RegWeights { gamma: 0.7, tau1: 0.4, tau2: 0.6, lambda1: 0.05, lambda2: 0.08, mu: vec![0.1; i], xi }
    }

    fn rgb_of(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Rgb {
        [random_plane(rng, h, w), random_plane(rng, h, w), random_plane(rng, h, w)]
    }

    #[test]
    fn soft_threshold_examples() {
        let x = Plane::from_vec(1, 3, vec![1.0, -0.3, 0.6]).unwrap();
        assert_eq!(soft_threshold(&x, 0.0).unwrap(), x);
        let s = soft_threshold(&x, 0.5).unwrap();
        let expected = [0.5, 0.0, 0.1];
        for (a, b) in s.as_slice().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(soft_threshold(&x, -0.1).is_err());
    }

    proptest! {
        #[test]
        fn soft_threshold_is_odd_shrinking_and_nonexpansive(
            xs in prop::collection::vec(-5.0f64..5.0, 16),
            ys in prop::collection::vec(-5.0f64..5.0, 16),
            sigma in 0.0f64..3.0,
        ) {
            let x = Plane::from_vec(4, 4, xs).unwrap();
            let y = Plane::from_vec(4, 4, ys).unwrap();
            let sx = soft_threshold(&x, sigma).unwrap();
            let sy = soft_threshold(&y, sigma).unwrap();
            let sneg = soft_threshold(&x.scale(-1.0), sigma).unwrap();
            prop_assert_eq!(sneg, sx.scale(-1.0));
            for (a, b) in sx.as_slice().iter().zip(x.as_slice()) {
                prop_assert!(a.abs() <= b.abs());
            }
            prop_assert!(sx.sub(&sy).unwrap().frobenius() <= x.sub(&y).unwrap().frobenius() + 1e-12);
        }
    }

    #[test]
    fn parallel_prox_identity_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bank = WaveletBank::new(4, 8, 8).unwrap();
        let c = random_plane(&mut rng, 8, 8);
        let b = random_plane(&mut rng, 8, 8);
        let zero = Plane::zeros(8, 8);
        for mode in [ThresholdMode::Elementwise, ThresholdMode::Literal] {
            let out = parallel_prox(&[0.3, 1.0, 2.0, 0.1], &zero, &c, &bank, mode).unwrap();
            assert!(out.max_abs_diff(&c) < 1e-10);
            let out = parallel_prox(&[0.0; 4], &b, &c, &bank, mode).unwrap();
            assert!(out.max_abs_diff(&c) < 1e-10);
        }
        assert!(parallel_prox(&[0.1; 3], &b, &c, &bank, ThresholdMode::Elementwise).is_err());
    }

    #[test]
    fn parallel_prox_matches_per_coefficient_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let bank = WaveletBank::new(4, 6, 8).unwrap();
        let b = random_plane(&mut rng, 6, 8);
        let c = random_plane(&mut rng, 6, 8);
        let a = [0.4, 0.9, 0.2, 1.3];
        let out = parallel_prox(&a, &b, &c, &bank, ThresholdMode::Elementwise).unwrap();

        let mut oracle = Plane::zeros(6, 8);
        for (i, &ai) in a.iter().enumerate() {
            let wb = bank.forward(i, &b).unwrap();
            let mut wc = bank.forward(i, &c).unwrap();
            for r in 0..6 {
                for col in 0..8 {
                    let t = ai * wb[(r, col)].abs();
                    let v = wc[(r, col)];
                    wc[(r, col)] = if v > t { v - t } else if v < -t { v + t } else { 0.0 };
                }
            }
            oracle.add_assign(&bank.inverse(i, &wc).unwrap());
        }
        let oracle = oracle.scale(0.25);
        assert!(out.max_abs_diff(&oracle) < 1e-14);
    }

    #[test]
    fn objective_zero_instance() {
        let dict = DictionarySet::random(2, 5, 0.3, 3).unwrap();
        let solver = CistaSolver::new(dict, weights(4, 10.0), WaveletBank::new(4, 8, 8).unwrap()).unwrap();
        let z = Plane::zeros(8, 8);
        let rgb = [z.clone(), z.clone(), z.clone()];
        assert_eq!(solver.objective(&z, &rgb, &SolverState::zeros(2, 8, 8)).unwrap(), 0.0);
    }

    /// Codes with a single spike each, far enough apart that no Haar block of
    /// any shift sees both information images: only the l1 terms survive.
    #[test]
    fn objective_on_exact_synthesis_with_disjoint_supports() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let filt = |rng: &mut ChaCha8Rng| Filter::new(random_plane(rng, 3, 3)).unwrap();
        let dict = DictionarySet::new(filt(&mut rng), vec![filt(&mut rng)], [filt(&mut rng), filt(&mut rng), filt(&mut rng)]).unwrap();
        let mut z1 = Plane::zeros(8, 8);
        z1[(1, 1)] = 0.8;
        let mut z2 = Plane::zeros(8, 8);
        z2[(5, 5)] = -1.3;
        let z1 = CodeStack::from_planes(vec![z1]).unwrap();
        let z2 = CodeStack::from_planes(vec![z2]).unwrap();
        let y1 = dict.synthesize(&z1).unwrap();
        let y2 = dict.synthesize(&z2).unwrap();
        let x = conv2d_same(&y1.add(&y2).unwrap(), &dict.psi).unwrap();
        let rgb = [
            conv2d_same(&y1, &dict.phi[0]).unwrap(),
            conv2d_same(&y1, &dict.phi[1]).unwrap(),
            conv2d_same(&y1, &dict.phi[2]).unwrap(),
        ];
        let w = weights(4, 10.0);
        let solver = CistaSolver::new(dict, w.clone(), WaveletBank::new(4, 8, 8).unwrap()).unwrap();
        let state = SolverState { z1, z2, y1, y2, iteration: 0 };
        let terms = solver.objective_terms(&x, &rgb, &state).unwrap();
        assert!(terms.xray < 1e-24 && terms.info1 < 1e-24 && terms.info2 < 1e-24 && terms.rgb < 1e-24);
        assert_eq!(terms.coupling, 0.0);
        let expected = w.lambda1 * 0.8 + w.lambda2 * 1.3;
        assert!((terms.total() - expected).abs() < 1e-14);
    }

    #[test]
    fn objective_matches_term_by_term_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, wd, k) = (8, 6, 3);
        let dict = DictionarySet::random(k, 5, 0.3, 6).unwrap();
        let w = weights(2, 12.0);
        let bank = WaveletBank::new(2, h, wd).unwrap();
        let solver = CistaSolver::new(dict.clone(), w.clone(), bank.clone()).unwrap();
        let x = random_plane(&mut rng, h, wd);
        let rgb = rgb_of(&mut rng, h, wd);
        let state = SolverState {
            z1: CodeStack::from_planes((0..k).map(|_| random_plane(&mut rng, h, wd)).collect()).unwrap(),
            z2: CodeStack::from_planes((0..k).map(|_| random_plane(&mut rng, h, wd)).collect()).unwrap(),
            y1: random_plane(&mut rng, h, wd),
            y2: random_plane(&mut rng, h, wd),
            iteration: 0,
        };

        // Pixel loops with explicit zero padding instead of the shared kernels.
        let conv = |p: &Plane, f: &Filter| {
            let c = (f.size() / 2) as isize;
            Plane::from_fn(h, wd, |i, j| {
                let mut acc = 0.0;
                for a in 0..f.size() {
                    for b in 0..f.size() {
                        let (si, sj) = (i as isize - a as isize + c, j as isize - b as isize + c);
                        if si >= 0 && sj >= 0 && (si as usize) < h && (sj as usize) < wd {
                            acc += f.taps()[(a, b)] * p[(si as usize, sj as usize)];
                        }
                    }
                }
                acc
            })
        };
        let sq = |p: &Plane| p.as_slice().iter().map(|v| v * v).sum::<f64>();
        let synth = |z: &CodeStack| {
            let mut acc = Plane::zeros(h, wd);
            for (t, c) in dict.theta.iter().zip(z.channels()) {
                acc.add_assign(&conv(c, t));
            }
            acc
        };
        let mut oracle = sq(&x.sub(&conv(&state.y1, &dict.psi)).unwrap().sub(&conv(&state.y2, &dict.psi)).unwrap());
        oracle += w.tau1 * sq(&state.y1.sub(&synth(&state.z1)).unwrap());
        oracle += w.tau2 * sq(&state.y2.sub(&synth(&state.z2)).unwrap());
        for s in 0..3 {
            oracle += w.gamma * sq(&rgb[s].sub(&conv(&state.y1, &dict.phi[s])).unwrap());
        }
        oracle += w.lambda1 * state.z1.channels().iter().flat_map(|c| c.as_slice()).map(|v| v.abs()).sum::<f64>();
        oracle += w.lambda2 * state.z2.channels().iter().flat_map(|c| c.as_slice()).map(|v| v.abs()).sum::<f64>();
        for i in 0..2 {
            let a = bank.forward(i, &state.y1).unwrap();
            let b = bank.forward(i, &state.y2).unwrap();
            oracle += w.mu[i] * a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| (p * q).abs()).sum::<f64>();
        }
        let got = solver.objective(&x, &rgb, &state).unwrap();
        assert!((got - oracle).abs() <= 1e-12 * oracle.abs().max(1.0), "{got} vs {oracle}");
    }

    #[test]
    fn zero_problem_is_a_fixed_point() {
        let zero_filter = Filter::zeros(5).unwrap();
        let dict = DictionarySet::new(zero_filter.clone(), vec![zero_filter.clone(); 2], [zero_filter.clone(), zero_filter.clone(), zero_filter]).unwrap();
        let solver = CistaSolver::new(dict, weights(4, 5.0), WaveletBank::new(4, 8, 8).unwrap()).unwrap();
        let z = Plane::zeros(8, 8);
        let state = SolverState::zeros(2, 8, 8);
        let next = solver.step(&state, &z, &[z.clone(), z.clone(), z.clone()]).unwrap();
        assert_eq!(next.z1, state.z1);
        assert_eq!(next.y1, state.y1);
        assert_eq!(next.y2, state.y2);
        assert_eq!(next.iteration, 1);
    }

    #[test]
    fn huge_lambda_kills_codes() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let dict = DictionarySet::random(2, 5, 0.3, 8).unwrap();
        let mut w = weights(4, 10.0);
        w.lambda1 = 1e9;
        w.lambda2 = 1e9;
        let solver = CistaSolver::new(dict, w, WaveletBank::new(4, 8, 8).unwrap()).unwrap();
        let x = random_plane(&mut rng, 8, 8);
        let rgb = rgb_of(&mut rng, 8, 8);
        let mut state = SolverState::zeros(2, 8, 8);
        state.y1 = random_plane(&mut rng, 8, 8);
        state.y2 = random_plane(&mut rng, 8, 8);
        let next = solver.step(&state, &x, &rgb).unwrap();
        assert!(next.z1.is_zero() && next.z2.is_zero());
    }

    #[test]
    fn exact_synthesis_without_penalties_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (h, wd, k) = (8, 8, 2);
        let dict = DictionarySet::random(k, 5, 0.3, 10).unwrap();
        let z1 = CodeStack::from_planes((0..k).map(|_| random_plane(&mut rng, h, wd)).collect()).unwrap();
        let z2 = CodeStack::from_planes((0..k).map(|_| random_plane(&mut rng, h, wd)).collect()).unwrap();
        let y1 = dict.synthesize(&z1).unwrap();
        let y2 = dict.synthesize(&z2).unwrap();
        let x = conv2d_same(&y1.add(&y2).unwrap(), &dict.psi).unwrap();
        let rgb = [0, 1, 2].map(|s| conv2d_same(&y1, &dict.phi[s]).unwrap());
        // Strictly positive but negligible penalties stand in for zero.
        let w = RegWeights { gamma: 0.5, tau1: 0.5, tau2: 0.5, lambda1: 1e-300, lambda2: 1e-300, mu: vec![1e-300; 4], xi: 8.0 };
        let solver = CistaSolver::new(dict, w, WaveletBank::new(4, h, wd).unwrap()).unwrap();
        let state = SolverState { z1, z2, y1, y2, iteration: 0 };
        let next = solver.step(&state, &x, &rgb).unwrap();
        assert!(next.z1.max_abs_diff(&state.z1) < 1e-10);
        assert!(next.z2.max_abs_diff(&state.z2) < 1e-10);
        assert!(next.y1.max_abs_diff(&state.y1) < 1e-10);
        assert!(next.y2.max_abs_diff(&state.y2) < 1e-10);
    }

    #[test]
    fn solve_with_one_iteration_equals_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dict = DictionarySet::random(2, 5, 0.3, 12).unwrap();
        let solver = CistaSolver::new(dict, weights(4, 10.0), WaveletBank::new(4, 8, 8).unwrap()).unwrap();
        let x = random_plane(&mut rng, 8, 8);
        let rgb = rgb_of(&mut rng, 8, 8);
        let init = SolverState::zeros(2, 8, 8);
        let step = solver.step(&init, &x, &rgb).unwrap();
        let solved = solver.solve(&x, &rgb, init, 1).unwrap();
        assert_eq!(solved.state, step);
        assert_eq!(solved.objective.len(), 2);
        assert!(solver.solve(&x, &rgb, step, 0).is_err());
    }

    #[test]
    fn objective_decreases_with_calibrated_step() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let dict = DictionarySet::random(2, 5, 0.3, 14).unwrap();
        let mut w = weights(4, 1.0);
        w.xi = calibrate_xi(&dict, w.tau1, w.tau2, w.gamma, 8, 8).unwrap();
        let solver = CistaSolver::new(dict, w, WaveletBank::new(4, 8, 8).unwrap()).unwrap();
        let x = random_plane(&mut rng, 8, 8);
        let rgb = rgb_of(&mut rng, 8, 8);
        let result = solver.solve(&x, &rgb, SolverState::zeros(2, 8, 8), 50).unwrap();
        for pair in result.objective.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-9, "{} -> {}", pair[0], pair[1]);
        }
    }

    #[test]
    fn rejects_invalid_weights_and_shapes() {
        let dict = DictionarySet::random(2, 5, 0.3, 15).unwrap();
        let bank = WaveletBank::new(4, 8, 8).unwrap();
        let mut w = weights(4, 1.0);
        w.tau1 = 0.0;
        assert!(CistaSolver::new(dict.clone(), w, bank.clone()).is_err());
        assert!(CistaSolver::new(dict.clone(), weights(2, 1.0), bank.clone()).is_err());
        let solver = CistaSolver::new(dict, weights(4, 1.0), bank).unwrap();
        let z = Plane::zeros(8, 8);
        let rgb = [z.clone(), z.clone(), z.clone()];
        assert!(solver.step(&SolverState::zeros(3, 8, 8), &z, &rgb).is_err());
        assert!(solver.objective(&Plane::zeros(6, 8), &rgb, &SolverState::zeros(2, 8, 8)).is_err());
    }
}
