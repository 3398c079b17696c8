//! Image to patch conversion and pixel-level preprocessing.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{Plane, Rgb};

pub const DEFAULT_PATCH_SIZE: usize = 50;
pub const DEFAULT_OVERLAP: usize = 45;

/// Row-major lattice of square patch origins covering an image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PatchGrid {
    patch_size: usize,
    stride: usize,
    height: usize,
    width: usize,
    rows: Vec<usize>,
    cols: Vec<usize>,
}

/// Origins `0, s, 2s, ...` up to `dim - p`, plus `dim - p` itself when the stride skips it.
fn axis_origins(dim: usize, p: usize, stride: usize) -> Vec<usize> {
    let last = dim - p;
    let mut out: Vec<usize> = (0..=last).step_by(stride).collect();
    if *out.last().expect("origin 0 always present") != last {
        out.push(last);
    }
    out
}

impl PatchGrid {
    pub fn new(height: usize, width: usize, patch_size: usize, overlap: usize) -> Result<Self> {
        if patch_size == 0 || patch_size > height.min(width) {
            return Err(Error::invalid(format!("patch size {patch_size} does not fit a {height}x{width} image")));
        }
        if overlap >= patch_size {
            return Err(Error::invalid(format!("overlap {overlap} must be smaller than the patch size {patch_size}")));
        }
        let stride = patch_size - overlap;
        Ok(Self {
            patch_size,
            stride,
            height,
            width,
            rows: axis_origins(height, patch_size, stride),
            cols: axis_origins(width, patch_size, stride),
        })
    }

    pub fn patch_size(&self) -> usize {
        self.patch_size
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Origin lattice shape `(rows, cols)`.
    pub fn lattice(&self) -> (usize, usize) {
        (self.rows.len(), self.cols.len())
    }

    pub fn len(&self) -> usize {
        self.rows.len() * self.cols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Top-left corners in row-major order.
    pub fn origins(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.rows.iter().flat_map(move |&r| self.cols.iter().map(move |&c| (r, c)))
    }

    fn check_image(&self, image: &Plane) -> Result<()> {
        if image.dims() != (self.height, self.width) {
            return Err(Error::shape(format!("image is {:?}, grid expects {:?}", image.dims(), self.dims())));
        }
        Ok(())
    }

    pub fn extract(&self, image: &Plane) -> Result<Vec<Plane>> {
        self.check_image(image)?;
        let p = self.patch_size;
        Ok(self.origins().map(|(r, c)| image.crop(r, c, p, p)).collect())
    }

    pub fn extract_rgb(&self, rgb: &Rgb) -> Result<Vec<Rgb>> {
        let [r, g, b] = [self.extract(&rgb[0])?, self.extract(&rgb[1])?, self.extract(&rgb[2])?];
        Ok(r.into_iter().zip(g).zip(b).map(|((r, g), b)| [r, g, b]).collect())
    }

    /// Number of patches covering each pixel.
    pub fn coverage(&self) -> Plane {
        let mut count = Plane::zeros(self.height, self.width);
        let p = self.patch_size;
        for (r, c) in self.origins() {
            for i in r..r + p {
                for v in &mut count.as_mut_slice()[i * self.width + c..i * self.width + c + p] {
                    *v += 1.0;
                }
            }
        }
        count
    }

    /// Each pixel becomes the mean of every patch value covering it.
    pub fn reassemble(&self, patches: &[Plane]) -> Result<Plane> {
        if patches.len() != self.len() {
            return Err(Error::shape(format!("{} patches for a grid of {}", patches.len(), self.len())));
        }
        let p = self.patch_size;
        if let Some(bad) = patches.iter().find(|q| q.dims() != (p, p)) {
            return Err(Error::shape(format!("patch is {:?}, grid expects {p}x{p}", bad.dims())));
        }
        let mut sum = Plane::zeros(self.height, self.width);
        let w = self.width;
        for ((r, c), patch) in self.origins().zip(patches) {
            for i in 0..p {
                let dst = &mut sum.as_mut_slice()[(r + i) * w + c..(r + i) * w + c + p];
                for (d, s) in dst.iter_mut().zip(patch.row(i)) {
                    *d += s;
                }
            }
        }
        Ok(sum.zip_map(&self.coverage(), |s, n| s / n))
    }
}

/// Grid plus the patches of `image` in grid order.
pub fn extract_patches(image: &Plane, patch_size: usize, overlap: usize) -> Result<(PatchGrid, Vec<Plane>)> {
    let grid = PatchGrid::new(image.height(), image.width(), patch_size, overlap)?;
    let patches = grid.extract(image)?;
    Ok((grid, patches))
}

/// Uniform random permutation of `0..count`.
pub fn shuffle_order(count: usize, seed: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
}

pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Luma `0.299 R + 0.587 G + 0.114 B`, clamped to `[0, 1]`.
pub fn grayscale(rgb: &Rgb) -> Result<Plane> {
    rgb[0].ensure_same_shape(&rgb[1], "grayscale")?;
    rgb[0].ensure_same_shape(&rgb[2], "grayscale")?;
    let [wr, wg, wb] = LUMA_WEIGHTS;
    // Summed blue first: in this order the three weights add to exactly 1.
    let gray = rgb[2].zip_map(&rgb[1], |b, g| wb * b + wg * g).zip_map(&rgb[0], |bg, r| bg + wr * r);
    Ok(gray.map(|v| v.clamp(0.0, 1.0)))
}

/// Pixelwise sum of two X-ray images, unclipped.
pub fn synth_mix(x1: &Plane, x2: &Plane) -> Result<Plane> {
    x1.add(x2)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NormalizeMode {
    #[default]
    None,
    MinMax,
}

/// `out = scale * in + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Affine {
    pub scale: f64,
    pub offset: f64,
}

impl Affine {
    pub const IDENTITY: Affine = Affine { scale: 1.0, offset: 0.0 };

    pub fn apply(&self, p: &Plane) -> Plane {
        p.map(|v| self.scale * v + self.offset)
    }

    pub fn invert(&self, p: &Plane) -> Plane {
        p.map(|v| (v - self.offset) / self.scale)
    }
}

/// Min-max maps `[min, max]` onto `[0, 1]`; a constant image maps to 0.5.
pub fn normalize(image: &Plane, mode: NormalizeMode) -> Result<(Plane, Affine)> {
    image.check_finite("normalize")?;
    let t = match mode {
        NormalizeMode::None => Affine::IDENTITY,
        NormalizeMode::MinMax => {
            let (lo, hi) = image.min_max();
            if hi > lo {
                Affine { scale: 1.0 / (hi - lo), offset: -lo / (hi - lo) }
            } else {
                Affine { scale: 1.0, offset: 0.5 - lo }
            }
        }
    };
    Ok((t.apply(image), t))
}
