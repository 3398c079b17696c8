//! Built-in numerical checks: adjoints, gradients, unrolling, transforms, roundtrips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{finite_diff_check, DifferentiableLoss, FdOptions, FdReport, Tape, Var};
use crate::error::Result;
use crate::io::{decode_checkpoint, encode_checkpoint};
use crate::loss::{training_loss_tape, ExclusionOptions, LossWeights, NormalizerMode};
use crate::net::{
    init_params, init_state, params_from_dictionaries, synthesize_rgb_tape, synthesize_xray_tape, Architecture, InputVars, Lcista, NetworkParams, ParamVars,
};
use crate::patch::{grayscale, PatchGrid};
use crate::sparse_model::{calibrate_xi, CistaSolver, DictionarySet, RegWeights, SolverState};
use crate::synthetic;
use crate::tensor::{adjoint_conv2d, conv2d_same, Filter, Plane};
use crate::train::{patch_loss_and_grad, PatchSample};
use crate::wavelet::WaveletBank;

/// Training loss of one patch as a function of the flat parameter vector.
///
/// Only `NormalizerMode::Differentiate` yields the exact gradient of the
/// loss value; the stop-gradient mode deliberately drops the normalizer terms.
pub struct NetworkLoss {
    pub net: Lcista,
    pub arch: Architecture,
    pub sample: PatchSample,
    pub weights: LossWeights,
    pub exclusion: ExclusionOptions,
}

impl NetworkLoss {
    fn record(&self, flat: &[f64]) -> Result<(Tape, Var)> {
        let params = NetworkParams::from_flat(self.arch, flat)?;
        let mut tape = Tape::new();
        let vars = ParamVars::record(&mut tape, &params, false);
        let input = InputVars::constant(&mut tape, &self.sample.x, &self.sample.rgb);
        let g1 = tape.constant(self.sample.g1.clone());
        let state = self.net.analysis_tape(&mut tape, &vars.analysis, &input, g1)?;
        let rgb_hat = synthesize_rgb_tape(&mut tape, &vars.synthesis, &state.z1)?;
        let (_, _, x_hat) = synthesize_xray_tape(&mut tape, &vars.synthesis, &state.z1, &state.z2)?;
        let loss = training_loss_tape(&mut tape, input.x, x_hat, &input.rgb, &rgb_hat, state.y1, state.y2, self.weights, self.exclusion)?;
        Ok((tape, loss.total))
    }
}

impl DifferentiableLoss for NetworkLoss {
    fn value(&self, flat: &[f64]) -> Result<f64> {
        let (tape, total) = self.record(flat)?;
        Ok(tape.scalar_value(total))
    }

    fn value_and_grad(&self, flat: &[f64]) -> Result<(f64, Vec<f64>)> {
        let params = NetworkParams::from_flat(self.arch, flat)?;
        let (report, grad) = patch_loss_and_grad(&self.net, &params, &self.sample, self.weights, self.exclusion)?;
        Ok((report.total, grad))
    }

    fn kink_signature(&self, flat: &[f64]) -> Result<Option<u64>> {
        Ok(Some(self.record(flat)?.0.activation_signature()))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradientCheck {
    pub arch: Architecture,
    pub patch_size: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub samples: usize,
}

impl Default for GradientCheck {
    fn default() -> Self {
        Self { arch: Architecture { channels: 4, transforms: 4, depth: 3, filter_size: 5 }, patch_size: 8, seed: 0, epsilon: 1e-5, samples: 200 }
    }
}

impl GradientCheck {
    /// Random parameters on a synthetic patch, both drawn from `seed`.
    pub fn build(&self) -> Result<(NetworkLoss, Vec<f64>)> {
        let scene = synthetic::generate(self.patch_size, self.patch_size, self.seed)?;
        let g1 = grayscale(&scene.rgb)?;
        let sample = PatchSample { x: scene.mix, rgb: scene.rgb, g1 };
        let net = Lcista::new(self.arch, self.patch_size, self.patch_size)?;
        let params = init_params(self.arch, self.seed)?;
        let loss = NetworkLoss {
            net,
            arch: self.arch,
            sample,
            weights: LossWeights::default(),
            exclusion: ExclusionOptions { mode: NormalizerMode::Differentiate, ..ExclusionOptions::default() },
        };
        Ok((loss, params.to_flat()))
    }

    pub fn run(&self) -> Result<FdReport> {
        let (loss, flat) = self.build()?;
        finite_diff_check(&loss, &flat, &FdOptions { epsilon: self.epsilon, samples: self.samples, seed: self.seed, ..FdOptions::default() })
    }
}

/// Result of one built-in check.
#[derive(Clone, Debug)]
pub struct CheckOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub measured: f64,
    pub tolerance: f64,
}

impl std::fmt::Display for CheckOutcome {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let verdict = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{verdict} {:<12} measured {:.3e} (tolerance {:.1e})", self.name, self.measured, self.tolerance)
    }
}

fn outcome(name: &'static str, measured: f64, tolerance: f64) -> CheckOutcome {
    CheckOutcome { name, passed: measured <= tolerance, measured, tolerance }
}

fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
    Plane::from_fn(h, w, |_, _| rng.random_range(-1.0..1.0))
}

/// Worst `|<a*x, y> - <x, adj(y, a)>| / (|a| |x| |y|)` over random triples.
pub fn adjoint_error(trials: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let n = [8, 16, 50][t % 3];
        let size = [1, 3, 5, 7][t % 4];
        let a = Filter::new(random_plane(&mut rng, size, size))?;
        let x = random_plane(&mut rng, n, n);
        let y = random_plane(&mut rng, n, n);
        let lhs = conv2d_same(&x, &a)?.inner(&y)?;
        let rhs = x.inner(&adjoint_conv2d(&y, &a)?)?;
        let scale = a.taps().frobenius() * x.frobenius() * y.frobenius();
        worst = worst.max((lhs - rhs).abs() / scale);
    }
    Ok(worst)
}

/// Worst roundtrip and norm-preservation error of every transform, and the
/// union identity error, on random planes.
pub fn wavelet_errors(size: usize, seed: u64) -> Result<(f64, f64)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bank = WaveletBank::new(4, size, size)?;
    let x = random_plane(&mut rng, size, size);
    let mut orthogonal: f64 = 0.0;
    let mut union = Plane::zeros(size, size);
    for i in 0..bank.count() {
        let c = bank.forward(i, &x)?;
        let back = bank.inverse(i, &c)?;
        orthogonal = orthogonal.max(back.max_abs_diff(&x));
        orthogonal = orthogonal.max((c.frobenius() - x.frobenius()).abs() / x.frobenius());
        union.add_assign(&back);
    }
    Ok((orthogonal, union.scale(1.0 / bank.count() as f64).max_abs_diff(&x)))
}

/// Largest deviation between the dictionary-mapped network and the solver.
pub fn equivalence_error(k: usize, depth: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = 8;
    let dict = DictionarySet::random(k, 5, 0.3, seed.wrapping_add(100))?;
    let (tau1, tau2, gamma) = (rng.random_range(0.2..1.0), rng.random_range(0.2..1.0), rng.random_range(0.2..1.0));
    let xi = calibrate_xi(&dict, tau1, tau2, gamma, n, n)?;
    let w = RegWeights {
        gamma,
        tau1,
        tau2,
        lambda1: rng.random_range(0.01..0.2),
        lambda2: rng.random_range(0.01..0.2),
        mu: (0..4).map(|_| rng.random_range(0.05..0.5)).collect(),
        xi,
    };
    let x = random_plane(&mut rng, n, n);
    let rgb = [0, 1, 2].map(|_| random_plane(&mut rng, n, n));
    let g1 = random_plane(&mut rng, n, n);
    let net = Lcista::new(Architecture { channels: k, transforms: 4, depth, filter_size: 5 }, n, n)?;
    let out = net.analysis_forward(&x, &rgb, &g1, &params_from_dictionaries(&dict, &w))?;
    let start = init_state(&x, &g1, k)?;
    let init = SolverState { z1: start.z1, z2: start.z2, y1: start.y1, y2: start.y2, iteration: 0 };
    let solved = CistaSolver::new(dict, w, net.bank.clone())?.solve(&x, &rgb, init, depth)?.state;
    Ok([out.z1.max_abs_diff(&solved.z1), out.z2.max_abs_diff(&solved.z2), out.y1.max_abs_diff(&solved.y1), out.y2.max_abs_diff(&solved.y2)]
        .into_iter()
        .fold(0.0, f64::max))
}

/// Patch reassembly error and whether a checkpoint survives encoding bit for bit.
pub fn roundtrip_errors(seed: u64) -> Result<(f64, bool)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut patch: f64 = 0.0;
    for (h, w) in [(100, 100), (137, 93)] {
        let image = random_plane(&mut rng, h, w);
        for overlap in [45, 40, 0] {
            let grid = PatchGrid::new(h, w, 50, overlap)?;
            patch = patch.max(grid.reassemble(&grid.extract(&image)?)?.max_abs_diff(&image));
        }
    }
    let params = init_params(Architecture { channels: 4, transforms: 4, depth: 3, filter_size: 5 }, seed)?;
    let (back, _) = decode_checkpoint(&encode_checkpoint(&params, 50))?;
    let exact = back.to_flat().iter().zip(params.to_flat()).all(|(a, b)| a.to_bits() == b.to_bits());
    Ok((patch, exact))
}

pub const ADJOINT_TOLERANCE: f64 = 1e-10;
pub const GRADIENT_TOLERANCE: f64 = 1e-5;
pub const EQUIVALENCE_TOLERANCE: f64 = 1e-8;
pub const ORTHOGONALITY_TOLERANCE: f64 = 1e-12;
pub const UNION_TOLERANCE: f64 = 1e-10;
pub const ROUNDTRIP_TOLERANCE: f64 = 1e-12;

/// The built-in verification suite.
pub fn run_suite(seed: u64) -> Result<Vec<CheckOutcome>> {
    let mut out = vec![outcome("adjoint", adjoint_error(120, seed)?, ADJOINT_TOLERANCE)];
    let grad = GradientCheck { seed, ..GradientCheck::default() }.run()?;
    out.push(outcome("gradient", grad.max_rel_error, GRADIENT_TOLERANCE));
    let mut equiv: f64 = 0.0;
    for (case, depth) in [1, 3, 5].into_iter().enumerate() {
        equiv = equiv.max(equivalence_error(2, depth, seed.wrapping_add(case as u64))?);
    }
    out.push(outcome("unrolling", equiv, EQUIVALENCE_TOLERANCE));
    let (orth, union) = wavelet_errors(16, seed)?;
    out.push(outcome("wavelet", orth, ORTHOGONALITY_TOLERANCE));
    out.push(outcome("union", union, UNION_TOLERANCE));
    let (patch, exact) = roundtrip_errors(seed)?;
    out.push(outcome("patches", patch, ROUNDTRIP_TOLERANCE));
    out.push(outcome("checkpoint", if exact { 0.0 } else { f64::INFINITY }, 0.0));
    Ok(out)
}
