//! Training objective and evaluation metrics.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{bilinear_downsample, gradient_magnitude, Plane, Rgb};

/// Number of resolutions in the exclusion loss.
pub const EXCLUSION_LEVELS: u32 = 3;

/// Norm offset used by the trainer so an all-zero estimate never divides by zero.
pub const TRAINING_NORM_EPS: f64 = 1e-12;

/// Weights of the RGB reconstruction (`eta1`) and exclusion (`eta2`) terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub eta1: f64,
    pub eta2: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { eta1: 0.5, eta2: 0.1 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta1 >= 0.0 && self.eta1.is_finite() && self.eta2 >= 0.0 && self.eta2.is_finite()) {
            return Err(Error::invalid(format!("loss weights ({}, {}) must be finite and nonnegative", self.eta1, self.eta2)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub recon_xray: f64,
    pub recon_rgb: f64,
    pub exclusion: f64,
}

impl LossReport {
    pub fn from_parts(recon_xray: f64, recon_rgb: f64, exclusion: f64, w: LossWeights) -> Self {
        Self { total: recon_xray + w.eta1 * recon_rgb + w.eta2 * exclusion, recon_xray, recon_rgb, exclusion }
    }

    /// Componentwise mean of a nonempty slice of reports.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len() as f64;
        let sum = reports.iter().fold(LossReport::default(), |a, r| LossReport {
            total: a.total + r.total,
            recon_xray: a.recon_xray + r.recon_xray,
            recon_rgb: a.recon_rgb + r.recon_rgb,
            exclusion: a.exclusion + r.exclusion,
        });
        LossReport { total: sum.total / n, recon_xray: sum.recon_xray / n, recon_rgb: sum.recon_rgb / n, exclusion: sum.exclusion / n }
    }
}

/// `(sigma1, sigma2) = (sqrt(|x2| / |x1|), sqrt(|x1| / |x2|))` in Frobenius norm, offset by `eps`.
///
/// `None` when both images vanish (the loss is then zero).
pub fn exclusion_normalizers(x1: &Plane, x2: &Plane, eps: f64) -> Result<Option<(f64, f64)>> {
    let (n1, n2) = (x1.frobenius() + eps, x2.frobenius() + eps);
    match (n1 == 0.0, n2 == 0.0) {
        (true, true) => Ok(None),
        (false, false) => Ok(Some(((n2 / n1).sqrt(), (n1 / n2).sqrt()))),
        _ => Err(Error::DegenerateNormalizer),
    }
}

/// Multi-scale edge-correlation loss between two images.
pub fn exclusion_loss(x1: &Plane, x2: &Plane) -> Result<f64> {
    exclusion_loss_eps(x1, x2, 0.0)
}

pub fn exclusion_loss_eps(x1: &Plane, x2: &Plane, eps: f64) -> Result<f64> {
    x1.ensure_same_shape(x2, "exclusion_loss")?;
    let Some((s1, s2)) = exclusion_normalizers(x1, x2, eps)? else {
        return Ok(0.0);
    };
    let (g1, g2) = (gradient_magnitude(x1)?, gradient_magnitude(x2)?);
    let mut total = 0.0;
    for level in 1..=EXCLUSION_LEVELS {
        let d1 = bilinear_downsample(&g1, level)?;
        let d2 = bilinear_downsample(&g2, level)?;
        total += d1.zip_map(&d2, |a, b| (s1 * a).tanh() * (s2 * b).tanh()).frobenius();
    }
    Ok(total)
}

/// Whether gradients flow through the norm ratio inside the exclusion loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormalizerMode {
    /// The normalizers are treated as constants of the current iterate.
    #[default]
    StopGradient,
    Differentiate,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ExclusionOptions {
    pub mode: NormalizerMode,
    pub eps: f64,
}

impl Default for ExclusionOptions {
    fn default() -> Self {
        Self { mode: NormalizerMode::StopGradient, eps: TRAINING_NORM_EPS }
    }
}

pub fn exclusion_loss_tape(tape: &mut Tape, x1: Var, x2: Var, opts: ExclusionOptions) -> Result<Var> {
    tape.value(x1).ensure_same_shape(tape.value(x2), "exclusion_loss")?;
    let Some((s1v, s2v)) = exclusion_normalizers(tape.value(x1), tape.value(x2), opts.eps)? else {
        return Ok(tape.scalar_constant(0.0));
    };
    let (s1, s2) = match opts.mode {
        NormalizerMode::StopGradient => (tape.scalar_constant(s1v), tape.scalar_constant(s2v)),
        NormalizerMode::Differentiate => {
            let eps = tape.scalar_constant(opts.eps);
            let n1 = tape.frobenius_norm(x1);
            let n1 = tape.add(n1, eps)?;
            let n2 = tape.frobenius_norm(x2);
            let n2 = tape.add(n2, eps)?;
            let r12 = tape.div(n2, n1)?;
            let r21 = tape.div(n1, n2)?;
            (tape.sqrt(r12)?, tape.sqrt(r21)?)
        }
    };
    let g1 = tape.gradient_magnitude(x1)?;
    let g2 = tape.gradient_magnitude(x2)?;
    let mut terms = Vec::with_capacity(EXCLUSION_LEVELS as usize);
    for level in 1..=EXCLUSION_LEVELS {
        let d1 = tape.downsample(g1, level)?;
        let d2 = tape.downsample(g2, level)?;
        let a = tape.scale(d1, s1)?;
        let b = tape.scale(d2, s2)?;
        let a = tape.tanh(a);
        let b = tape.tanh(b);
        let prod = tape.mul(a, b)?;
        terms.push(tape.frobenius_norm(prod));
    }
    tape.sum(&terms)
}

/// `||x - x_hat||^2 + eta1 sum_s ||r_s - r_hat_s||^2 + eta2 E(y1, y2)` and its parts.
pub fn training_loss(x: &Plane, x_hat: &Plane, rgb: &Rgb, rgb_hat: &Rgb, y1: &Plane, y2: &Plane, w: LossWeights) -> Result<LossReport> {
    w.validate()?;
    let recon_xray = x.sub(x_hat)?.frobenius_sq();
    let mut recon_rgb = 0.0;
    for (r, rh) in rgb.iter().zip(rgb_hat) {
        recon_rgb += r.sub(rh)?.frobenius_sq();
    }
    let exclusion = exclusion_loss(y1, y2)?;
    Ok(LossReport::from_parts(recon_xray, recon_rgb, exclusion, w))
}

/// Tape nodes of the training loss.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub recon_xray: Var,
    pub recon_rgb: Var,
    pub exclusion: Var,
}

impl LossVars {
    pub fn report(&self, tape: &Tape) -> LossReport {
        LossReport {
            total: tape.scalar_value(self.total),
            recon_xray: tape.scalar_value(self.recon_xray),
            recon_rgb: tape.scalar_value(self.recon_rgb),
            exclusion: tape.scalar_value(self.exclusion),
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub fn training_loss_tape(
    tape: &mut Tape,
    x: Var,
    x_hat: Var,
    rgb: &[Var; 3],
    rgb_hat: &[Var; 3],
    y1: Var,
    y2: Var,
    w: LossWeights,
    opts: ExclusionOptions,
) -> Result<LossVars> {
    w.validate()?;
    let d = tape.sub(x, x_hat)?;
    let recon_xray = tape.frobenius_sq(d);
    let mut parts = Vec::with_capacity(3);
    for (&r, &rh) in rgb.iter().zip(rgb_hat) {
        let d = tape.sub(r, rh)?;
        parts.push(tape.frobenius_sq(d));
    }
    let recon_rgb = tape.sum(&parts)?;
    let exclusion = exclusion_loss_tape(tape, y1, y2, opts)?;
    let a = tape.scale_const(recon_rgb, w.eta1);
    let b = tape.scale_const(exclusion, w.eta2);
    let total = tape.sum(&[recon_xray, a, b])?;
    Ok(LossVars { total, recon_xray, recon_rgb, exclusion })
}

/// `||a - b||_F^2 / (2 M N)`.
pub fn mse(a: &Plane, b: &Plane) -> Result<f64> {
    Ok(a.sub(b)?.frobenius_sq() / (2.0 * a.len() as f64))
}

/// Per-pixel `|a - b|`.
pub fn error_map(a: &Plane, b: &Plane) -> Result<Plane> {
    Ok(a.sub(b)?.map(f64::abs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_check, DifferentiableLoss, FdOptions};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_plane(rng: &mut ChaCha8Rng, h: usize, w: usize) -> Plane {
        Plane::from_fn(h, w, |_, _| rng.random_range(0.0..1.0))
    }

    /// Pixel loops: forward differences with a replicated border, block means with partial tails.
    fn exclusion_oracle(x1: &Plane, x2: &Plane) -> f64 {
        let (h, w) = x1.dims();
        let mag = |x: &Plane| {
            Plane::from_fn(h, w, |i, j| {
                let dx = if j + 1 < w { x[(i, j + 1)] - x[(i, j)] } else { 0.0 };
                let dy = if i + 1 < h { x[(i + 1, j)] - x[(i, j)] } else { 0.0 };
                (dx * dx + dy * dy).sqrt()
            })
        };
        let down = |x: &Plane, factor: usize| {
            let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
            Plane::from_fn(oh, ow, |i, j| {
                let mut s = 0.0;
                let mut n = 0.0;
                for a in i * factor..((i + 1) * factor).min(h) {
                    for b in j * factor..((j + 1) * factor).min(w) {
                        s += x[(a, b)];
                        n += 1.0;
                    }
                }
                s / n
            })
        };
        let norm = |x: &Plane| x.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt();
        let (s1, s2) = ((norm(x2) / norm(x1)).sqrt(), (norm(x1) / norm(x2)).sqrt());
        let (m1, m2) = (mag(x1), mag(x2));
        let mut total = 0.0;
        for factor in [1, 2, 4] {
            let (a, b) = (down(&m1, factor), down(&m2, factor));
            let sq: f64 = a.as_slice().iter().zip(b.as_slice()).map(|(p, q)| ((s1 * p).tanh() * (s2 * q).tanh()).powi(2)).sum();
            total += sq.sqrt();
        }
        total
    }

    #[test]
    fn exclusion_constant_and_symmetric() {
        let c = Plane::filled(8, 8, 0.3);
        assert_eq!(exclusion_loss(&c, &Plane::filled(8, 8, 0.7)).unwrap(), 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random_plane(&mut rng, 12, 9);
        let b = random_plane(&mut rng, 12, 9);
        let ab = exclusion_loss(&a, &b).unwrap();
        assert!(ab > 0.0);
        assert!((ab - exclusion_loss(&b, &a).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn exclusion_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (h, w) in [(16, 16), (13, 10)] {
            let a = random_plane(&mut rng, h, w);
            let b = random_plane(&mut rng, h, w).scale(3.0);
            let got = exclusion_loss(&a, &b).unwrap();
            let want = exclusion_oracle(&a, &b);
            assert!((got - want).abs() < 1e-10, "{got} vs {want}");
        }
    }

    #[test]
    fn exclusion_degenerate_normalizers() {
        let z = Plane::zeros(6, 6);
        assert_eq!(exclusion_loss(&z, &z).unwrap(), 0.0);
        assert!(matches!(exclusion_loss(&z, &Plane::filled(6, 6, 1.0)), Err(Error::DegenerateNormalizer)));
        assert!(exclusion_loss(&Plane::filled(6, 6, 1.0), &z).is_err());
        assert!(exclusion_loss_eps(&z, &Plane::filled(6, 6, 1.0), 1e-12).is_ok());
        assert!(exclusion_loss(&z, &Plane::zeros(5, 6)).is_err());
    }

    #[test]
    fn normalizer_product_is_scale_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random_plane(&mut rng, 8, 8);
        let b = random_plane(&mut rng, 8, 8);
        for alpha in [0.01, 1.0, 7.5] {
            let (s1, s2) = exclusion_normalizers(&a.scale(alpha), &b, 0.0).unwrap().unwrap();
            assert!((s1 * s2 - 1.0).abs() < 1e-14);
        }
        let (s1, _) = exclusion_normalizers(&a, &b, 0.0).unwrap().unwrap();
        let (t1, _) = exclusion_normalizers(&a.scale(4.0), &b, 0.0).unwrap().unwrap();
        assert!((t1 - s1 / 2.0).abs() < 1e-14);
    }

    #[test]
    fn tape_matches_plain_in_both_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_plane(&mut rng, 10, 10);
        let b = random_plane(&mut rng, 10, 10);
        let plain = exclusion_loss_eps(&a, &b, 1e-12).unwrap();
        for mode in [NormalizerMode::StopGradient, NormalizerMode::Differentiate] {
            let mut tape = Tape::new();
            let (va, vb) = (tape.leaf(a.clone()), tape.leaf(b.clone()));
            let e = exclusion_loss_tape(&mut tape, va, vb, ExclusionOptions { mode, eps: 1e-12 }).unwrap();
            assert!((tape.scalar_value(e) - plain).abs() < 1e-13);
        }
    }

    /// Loss of the pair packed as one flat vector, with the normalizers either
    /// differentiated or frozen at `frozen`.
    struct PairLoss {
        h: usize,
        w: usize,
        mode: NormalizerMode,
        frozen: Option<(f64, f64)>,
    }

    impl PairLoss {
        fn split(&self, p: &[f64]) -> (Plane, Plane) {
            let n = self.h * self.w;
            (Plane::from_vec(self.h, self.w, p[..n].to_vec()).unwrap(), Plane::from_vec(self.h, self.w, p[n..].to_vec()).unwrap())
        }

        fn run(&self, p: &[f64]) -> Result<(Tape, Var, Var, Var)> {
            let (a, b) = self.split(p);
            let mut tape = Tape::new();
            let (va, vb) = (tape.leaf(a), tape.leaf(b));
            let e = exclusion_loss_tape(&mut tape, va, vb, ExclusionOptions { mode: self.mode, eps: 0.0 })?;
            Ok((tape, va, vb, e))
        }
    }

    impl DifferentiableLoss for PairLoss {
        fn value(&self, p: &[f64]) -> Result<f64> {
            match self.frozen {
                None => {
                    let (tape, _, _, e) = self.run(p)?;
                    Ok(tape.scalar_value(e))
                }
                Some((s1, s2)) => {
                    // The loss with the normalizers pinned, written out directly.
                    let (a, b) = self.split(p);
                    let (g1, g2) = (gradient_magnitude(&a)?, gradient_magnitude(&b)?);
                    let mut total = 0.0;
                    for level in 1..=EXCLUSION_LEVELS {
                        let d1 = bilinear_downsample(&g1, level)?;
                        let d2 = bilinear_downsample(&g2, level)?;
                        total += d1.zip_map(&d2, |x, y| (s1 * x).tanh() * (s2 * y).tanh()).frobenius();
                    }
                    Ok(total)
                }
            }
        }

        fn value_and_grad(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
            let (tape, va, vb, e) = self.run(p)?;
            let g = tape.backward(e)?;
            let mut grad = g.wrt(va).into_vec();
            grad.extend(g.wrt(vb).into_vec());
            Ok((self.value(p)?, grad))
        }

        fn kink_signature(&self, p: &[f64]) -> Result<Option<u64>> {
            Ok(Some(self.run(p)?.0.activation_signature()))
        }
    }

    #[test]
    fn exclusion_gradients_in_both_normalizer_modes() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (h, w) = (8, 8);
        let params: Vec<f64> = (0..2 * h * w).map(|_| rng.random_range(0.0..1.0)).collect();
        let opts = FdOptions { epsilon: 1e-6, samples: 128, ..FdOptions::default() };

        let full = PairLoss { h, w, mode: NormalizerMode::Differentiate, frozen: None };
        let report = finite_diff_check(&full, &params, &opts).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");

        let (a, b) = full.split(&params);
        let frozen = exclusion_normalizers(&a, &b, 0.0).unwrap();
        let stop = PairLoss { h, w, mode: NormalizerMode::StopGradient, frozen };
        let report = finite_diff_check(&stop, &params, &opts).unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
        assert!(report.tested > 100);
    }

    #[test]
    fn training_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random_plane(&mut rng, 6, 6);
        let rgb = [0, 1, 2].map(|_| random_plane(&mut rng, 6, 6));
        let c = Plane::filled(6, 6, 0.4);
        let r = training_loss(&x, &x, &rgb, &rgb, &c, &c, LossWeights::default()).unwrap();
        assert_eq!(r.total, 0.0);

        let x_hat = random_plane(&mut rng, 6, 6);
        let rgb_hat = [0, 1, 2].map(|_| random_plane(&mut rng, 6, 6));
        let (y1, y2) = (random_plane(&mut rng, 6, 6), random_plane(&mut rng, 6, 6));
        let none = training_loss(&x, &x_hat, &rgb, &rgb_hat, &y1, &y2, LossWeights { eta1: 0.0, eta2: 0.0 }).unwrap();
        assert_eq!(none.total, none.recon_xray);
        let w = LossWeights { eta1: 0.5, eta2: 0.1 };
        let r = training_loss(&x, &x_hat, &rgb, &rgb_hat, &y1, &y2, w).unwrap();
        assert_eq!(r.total, r.recon_xray + 0.5 * r.recon_rgb + 0.1 * r.exclusion);
        assert!(r.recon_rgb > 0.0 && r.exclusion > 0.0);
        assert!(training_loss(&x, &x_hat, &rgb, &rgb_hat, &y1, &y2, LossWeights { eta1: -1.0, eta2: 0.0 }).is_err());

        let mut tape = Tape::new();
        let vx = tape.constant(x.clone());
        let vxh = tape.constant(x_hat.clone());
        let vr = [0, 1, 2].map(|s| tape.constant(rgb[s].clone()));
        let vrh = [0, 1, 2].map(|s| tape.constant(rgb_hat[s].clone()));
        let (v1, v2) = (tape.constant(y1.clone()), tape.constant(y2.clone()));
        let lv = training_loss_tape(&mut tape, vx, vxh, &vr, &vrh, v1, v2, w, ExclusionOptions { eps: 0.0, ..Default::default() }).unwrap();
        let tr = lv.report(&tape);
        assert!((tr.total - r.total).abs() < 1e-12 && (tr.exclusion - r.exclusion).abs() < 1e-14);
    }

    #[test]
    fn mse_and_error_map() {
        assert_eq!(mse(&Plane::filled(2, 2, 1.0), &Plane::zeros(2, 2)).unwrap(), 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_plane(&mut rng, 5, 4);
        assert_eq!(mse(&a, &a).unwrap(), 0.0);
        assert!(error_map(&a, &a).unwrap().as_slice().iter().all(|&v| v == 0.0));
        let shifted = a.map(|v| v + 0.1);
        assert!(error_map(&a, &shifted).unwrap().max_abs_diff(&Plane::filled(5, 4, 0.1)) < 1e-15);
        let b = random_plane(&mut rng, 5, 4);
        let e = error_map(&a, &b).unwrap();
        let half_mean_sq = e.as_slice().iter().map(|v| v * v).sum::<f64>() / e.len() as f64 / 2.0;
        assert!((half_mean_sq - mse(&a, &b).unwrap()).abs() < 1e-15);
        assert!(mse(&a, &Plane::zeros(4, 5)).is_err());
    }

    #[test]
    fn report_mean() {
        let w = LossWeights::default();
        let r = LossReport::mean(&[LossReport::from_parts(1.0, 2.0, 3.0, w), LossReport::from_parts(3.0, 0.0, 1.0, w)]);
        assert_eq!((r.recon_xray, r.recon_rgb, r.exclusion), (2.0, 1.0, 2.0));
        assert!((r.total - (2.0 + 0.5 + 0.2)).abs() < 1e-15);
    }
}
