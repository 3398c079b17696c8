//! Planted mixtures for desk-scale experiments.
//!
//! The surface painting is a set of coloured discs and boxes over a flat
//! ground. Its X-ray `x1` is a fixed linear rendering of that RGB, while the
//! concealed X-ray `x2` holds independent rings and bars. Both lie in
//! `[0, 0.5]`, so their sum stays in `[0, 1]`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::patch::synth_mix;
use crate::tensor::{Plane, Rgb};

/// Channel weights of the surface X-ray rendering, scaled by one half.
pub const XRAY_RENDER_WEIGHTS: [f64; 3] = [0.15, 0.2, 0.15];

#[derive(Clone, Debug)]
pub struct SyntheticScene {
    pub rgb: Rgb,
    pub x1: Plane,
    pub x2: Plane,
    pub mix: Plane,
}

/// `x1 = sum_s XRAY_RENDER_WEIGHTS[s] * rgb_s`.
pub fn render_surface_xray(rgb: &Rgb) -> Result<Plane> {
    let [a, b, c] = XRAY_RENDER_WEIGHTS;
    Ok(rgb[0].scale(a).add(&rgb[1].scale(b))?.add(&rgb[2].scale(c))?)
}

fn paint(canvas: &mut Plane, inside: impl Fn(f64, f64) -> bool, value: f64) {
    let w = canvas.width();
    for (idx, v) in canvas.as_mut_slice().iter_mut().enumerate() {
        let (i, j) = ((idx / w) as f64 + 0.5, (idx % w) as f64 + 0.5);
        if inside(i, j) {
            *v = value;
        }
    }
}

pub fn generate(height: usize, width: usize, seed: u64) -> Result<SyntheticScene> {
    if height < 8 || width < 8 {
        return Err(Error::invalid(format!("synthetic scene of {height}x{width} is too small")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f64, width as f64);
    let scale = h.min(w);

    let ground: [f64; 3] = [0.0; 3].map(|_| rng.random_range(0.2..0.4));
    let mut rgb = ground.map(|g| Plane::filled(height, width, g));
    for shape in 0..6 {
        let colour: [f64; 3] = [0.0; 3].map(|_| rng.random_range(0.0..1.0));
        let (ci, cj) = (rng.random_range(0.1..0.9) * h, rng.random_range(0.1..0.9) * w);
        let size = rng.random_range(0.08..0.2) * scale;
        for (plane, value) in rgb.iter_mut().zip(colour) {
            if shape % 2 == 0 {
                paint(plane, |i, j| (i - ci).powi(2) + (j - cj).powi(2) < size * size, value);
            } else {
                paint(plane, |i, j| (i - ci).abs() < size && (j - cj).abs() < 0.6 * size, value);
            }
        }
    }
    let x1 = render_surface_xray(&rgb)?;

    let mut x2 = Plane::filled(height, width, rng.random_range(0.05..0.15));
    for shape in 0..5 {
        let value = rng.random_range(0.2..0.5);
        let (ci, cj) = (rng.random_range(0.1..0.9) * h, rng.random_range(0.1..0.9) * w);
        let size = rng.random_range(0.1..0.25) * scale;
        if shape % 2 == 0 {
            let r2 = |i: f64, j: f64| (i - ci).powi(2) + (j - cj).powi(2);
            paint(&mut x2, |i, j| r2(i, j) < size * size && r2(i, j) > 0.36 * size * size, value);
        } else {
            let horizontal = rng.random_bool(0.5);
            paint(
                &mut x2,
                |i, j| {
                    let (along, across) = if horizontal { (j - cj, i - ci) } else { (i - ci, j - cj) };
                    along.abs() < 1.5 * size && across.abs() < 0.25 * size
                },
                value,
            );
        }
    }
    let mix = synth_mix(&x1, &x2)?;
    Ok(SyntheticScene { rgb, x1, x2, mix })
}
