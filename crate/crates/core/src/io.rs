//! File formats: checkpoints, images and run configuration.

use std::fmt::Write as _;
use std::fs;
use std::hash::Hasher;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::loss::{ExclusionOptions, LossWeights, NormalizerMode};
use crate::net::{Architecture, InitScheme, NetworkParams};
use crate::patch::NormalizeMode;
use crate::sparse_model::ThresholdMode;
use crate::tensor::{Plane, Rgb};
use crate::train::{LrSchedule, ShuffleMode, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"XSEP";
pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 5 * 4;

/// 64-bit FNV-1a.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = fnv::FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Architecture and patch size stored ahead of the parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CheckpointHeader {
    pub arch: Architecture,
    pub patch_size: usize,
}

impl std::fmt::Display for CheckpointHeader {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{} patch={}", self.arch, self.patch_size)
    }
}

/// Layout: magic, version, `K I L f patch` as u32, the flat parameters as
/// f64, then the FNV-1a hash of everything before it. All little-endian.
pub fn encode_checkpoint(params: &NetworkParams, patch_size: usize) -> Vec<u8> {
    let a = params.arch;
    let flat = params.to_flat();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * flat.len() + 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [a.channels, a.transforms, a.depth, a.filter_size, patch_size] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let sum = fnv1a64(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(NetworkParams, CheckpointHeader)> {
    if bytes.len() < HEADER_LEN + 8 {
        return Err(Error::Checksum);
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a64(payload).to_le_bytes() != tail {
        return Err(Error::Checksum);
    }
    if &payload[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("missing XSEP magic".into()));
    }
    let word = |i: usize| u32::from_le_bytes(payload[4 + 4 * i..8 + 4 * i].try_into().expect("4 bytes"));
    let version = word(0);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version { found: version, expected: CHECKPOINT_VERSION });
    }
    let arch = Architecture { channels: word(1) as usize, transforms: word(2) as usize, depth: word(3) as usize, filter_size: word(4) as usize };
    arch.validate().map_err(|e| Error::Format(e.to_string()))?;
    let header = CheckpointHeader { arch, patch_size: word(5) as usize };
    let body = &payload[HEADER_LEN..];
    if body.len() != 8 * arch.param_count() {
        return Err(Error::Format(format!("{} parameter bytes for {arch} (expected {})", body.len(), 8 * arch.param_count())));
    }
    let flat: Vec<f64> = body.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
    Ok((NetworkParams::from_flat(arch, &flat)?, header))
}

pub fn save_checkpoint(path: &Path, params: &NetworkParams, patch_size: usize) -> Result<()> {
    fs::write(path, encode_checkpoint(params, patch_size))?;
    Ok(())
}

/// Loads a checkpoint, failing if its header differs from `expected`.
pub fn load_checkpoint(path: &Path, expected: Option<CheckpointHeader>) -> Result<NetworkParams> {
    let (params, header) = decode_checkpoint(&fs::read(path)?)?;
    if let Some(want) = expected {
        if want != header {
            return Err(Error::Architecture { found: header.to_string(), expected: want.to_string() });
        }
    }
    Ok(params)
}

/// Decoded image with samples scaled to `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub enum Image {
    Gray(Plane),
    Rgb(Rgb),
}

impl Image {
    pub fn dims(&self) -> (usize, usize) {
        match self {
            Image::Gray(p) => p.dims(),
            Image::Rgb(c) => c[0].dims(),
        }
    }

    pub fn into_gray(self, path: &Path) -> Result<Plane> {
        match self {
            Image::Gray(p) => Ok(p),
            Image::Rgb(_) => Err(image_error(path, "expected a grayscale image, found RGB")),
        }
    }

    pub fn into_rgb(self, path: &Path) -> Result<Rgb> {
        match self {
            Image::Rgb(c) => Ok(c),
            Image::Gray(_) => Err(image_error(path, "expected an RGB image, found grayscale")),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BitDepth {
    #[default]
    Eight,
    Sixteen,
}

impl BitDepth {
    fn max(self) -> f64 {
        match self {
            BitDepth::Eight => 255.0,
            BitDepth::Sixteen => 65535.0,
        }
    }
}

fn image_error(path: &Path, msg: impl Into<String>) -> Error {
    Error::Image { path: path.to_path_buf(), msg: msg.into() }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Format {
    Png,
    Pnm,
}

fn format_of(path: &Path) -> Result<Format> {
    let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => Ok(Format::Png),
        Some("pgm" | "ppm" | "pnm") => Ok(Format::Pnm),
        _ => Err(image_error(path, "unsupported extension (use .png, .pgm or .ppm)")),
    }
}

/// Planes built from interleaved integer samples.
fn from_samples(width: usize, height: usize, channels: usize, max: f64, samples: impl Iterator<Item = u16>) -> Image {
    let mut planes: Vec<Vec<f64>> = (0..channels).map(|_| Vec::with_capacity(width * height)).collect();
    for (i, s) in samples.enumerate() {
        planes[i % channels].push(s as f64 / max);
    }
    let mut it = planes.into_iter().map(|d| Plane::from_vec(height, width, d).expect("sample count"));
    if channels == 1 {
        Image::Gray(it.next().expect("one plane"))
    } else {
        Image::Rgb([it.next().expect("r"), it.next().expect("g"), it.next().expect("b")])
    }
}

/// Binary PGM (`P5`) or PPM (`P6`) with any maxval up to 65535.
pub fn decode_pnm(bytes: &[u8], path: &Path) -> Result<Image> {
    let mut pos = 0;
    let err = |at: usize, msg: &str| image_error(path, format!("{msg} at byte {at}"));
    let token = |pos: &mut usize| -> Result<(usize, String)> {
        loop {
            match bytes.get(*pos) {
                Some(b'#') => {
                    while bytes.get(*pos).is_some_and(|&b| b != b'\n') {
                        *pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => *pos += 1,
                Some(_) => break,
                None => return Err(err(*pos, "unexpected end of header")),
            }
        }
        let start = *pos;
        while bytes.get(*pos).is_some_and(|b| !b.is_ascii_whitespace()) {
            *pos += 1;
        }
        Ok((start, String::from_utf8_lossy(&bytes[start..*pos]).into_owned()))
    };
    let (at, magic) = token(&mut pos)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        _ => return Err(err(at, "expected P5 or P6 magic")),
    };
    let number = |pos: &mut usize, what: &str| -> Result<usize> {
        let (at, t) = token(pos)?;
        t.parse::<usize>().ok().filter(|&v| v > 0).ok_or_else(|| err(at, &format!("invalid {what} {t:?}")))
    };
    let width = number(&mut pos, "width")?;
    let height = number(&mut pos, "height")?;
    let maxval = number(&mut pos, "maxval")?;
    if maxval > 65535 {
        return Err(err(pos, "maxval above 65535"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    pos += 1;
    let bytes_per = if maxval > 255 { 2 } else { 1 };
    let need = width * height * channels * bytes_per;
    let raster = bytes.get(pos..pos + need).ok_or_else(|| err(bytes.len(), &format!("raster truncated, expected {need} bytes from byte {pos}")))?;
    let samples: Vec<usize> = if bytes_per == 2 {
        raster.chunks_exact(2).map(|c| u16::from_be_bytes([c[0], c[1]]) as usize).collect()
    } else {
        raster.iter().map(|&v| v as usize).collect()
    };
    if let Some((i, v)) = samples.iter().enumerate().find(|&(_, &v)| v > maxval) {
        return Err(err(pos + i * bytes_per, &format!("sample {v} exceeds maxval {maxval}")));
    }
    Ok(from_samples(width, height, channels, maxval as f64, samples.into_iter().map(|v| v as u16)))
}

fn decode_png(bytes: &[u8], path: &Path) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png).map_err(|e| image_error(path, e.to_string()))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    use image::ColorType as C;
    Ok(match img.color() {
        C::L8 => from_samples(w, h, 1, 255.0, img.into_luma8().into_raw().into_iter().map(u16::from)),
        C::L16 => from_samples(w, h, 1, 65535.0, img.into_luma16().into_raw().into_iter()),
        C::Rgb8 => from_samples(w, h, 3, 255.0, img.into_rgb8().into_raw().into_iter().map(u16::from)),
        C::Rgb16 => from_samples(w, h, 3, 65535.0, img.into_rgb16().into_raw().into_iter()),
        other => return Err(image_error(path, format!("unsupported PNG colour type {other:?}"))),
    })
}

pub fn load_image(path: &Path) -> Result<Image> {
    let format = format_of(path)?;
    let bytes = fs::read(path).map_err(|e| image_error(path, e.to_string()))?;
    match format {
        Format::Png => decode_png(&bytes, path),
        Format::Pnm => decode_pnm(&bytes, path),
    }
}

/// Quantized samples, interleaved, and the number of values clamped into `[0, 1]`.
fn quantize(planes: &[&Plane], depth: BitDepth) -> (Vec<u16>, usize) {
    let max = depth.max();
    let n = planes[0].len();
    let mut clamped = 0;
    let mut out = Vec::with_capacity(n * planes.len());
    for i in 0..n {
        for p in planes {
            let v = p.as_slice()[i];
            let c = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
            if c != v {
                clamped += 1;
            }
            out.push((c * max).round() as u16);
        }
    }
    (out, clamped)
}

fn encode_pnm(planes: &[&Plane], depth: BitDepth) -> (Vec<u8>, usize) {
    let (h, w) = planes[0].dims();
    let magic = if planes.len() == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{w} {h}\n{}\n", depth.max() as u32).into_bytes();
    let (samples, clamped) = quantize(planes, depth);
    match depth {
        BitDepth::Eight => out.extend(samples.iter().map(|&s| s as u8)),
        BitDepth::Sixteen => out.extend(samples.iter().flat_map(|s| s.to_be_bytes())),
    }
    (out, clamped)
}

fn encode_png(planes: &[&Plane], depth: BitDepth, path: &Path) -> Result<(Vec<u8>, usize)> {
    let (h, w) = planes[0].dims();
    let (samples, clamped) = quantize(planes, depth);
    let (w32, h32) = (w as u32, h as u32);
    let bad = || image_error(path, "image buffer size mismatch");
    let img: image::DynamicImage = match (planes.len(), depth) {
        (1, BitDepth::Eight) => image::GrayImage::from_raw(w32, h32, samples.iter().map(|&s| s as u8).collect()).ok_or_else(bad)?.into(),
        (1, BitDepth::Sixteen) => image::ImageBuffer::<image::Luma<u16>, _>::from_raw(w32, h32, samples).ok_or_else(bad)?.into(),
        (_, BitDepth::Eight) => image::RgbImage::from_raw(w32, h32, samples.iter().map(|&s| s as u8).collect()).ok_or_else(bad)?.into(),
        (_, BitDepth::Sixteen) => image::ImageBuffer::<image::Rgb<u16>, _>::from_raw(w32, h32, samples).ok_or_else(bad)?.into(),
    };
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, image::ImageFormat::Png).map_err(|e| image_error(path, e.to_string()))?;
    Ok((out.into_inner(), clamped))
}

/// Writes `image` in the format named by the extension.
///
/// Returns how many samples fell outside `[0, 1]` and were clamped.
pub fn save_image(image: &Image, path: &Path, depth: BitDepth) -> Result<usize> {
    let planes: Vec<&Plane> = match image {
        Image::Gray(p) => vec![p],
        Image::Rgb(c) => c.iter().collect(),
    };
    let format = format_of(path)?;
    let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("").to_ascii_lowercase();
    if format == Format::Pnm && ((ext == "pgm" && planes.len() != 1) || (ext == "ppm" && planes.len() != 3)) {
        return Err(image_error(path, "extension does not match the channel count"));
    }
    let (bytes, clamped) = match format {
        Format::Pnm => encode_pnm(&planes, depth),
        Format::Png => encode_png(&planes, depth, path)?,
    };
    fs::write(path, bytes).map_err(|e| image_error(path, e.to_string()))?;
    Ok(clamped)
}

/// Plain-text `key = value` settings of a separation run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub xray: Option<PathBuf>,
    pub rgb: Option<PathBuf>,
    pub init_image: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub channels: usize,
    pub transforms: usize,
    pub depth: usize,
    pub filter_size: usize,
    pub patch_size: usize,
    pub overlap: usize,
    pub eta1: f64,
    pub eta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub workers: usize,
    pub normalize: NormalizeMode,
    pub shuffle: ShuffleMode,
    pub threshold_mode: ThresholdMode,
    pub normalizer: NormalizerMode,
    /// `0` disables clipping.
    pub grad_clip: f64,
    /// Upper end of the uniform draw for the initial thresholds.
    pub init_threshold_scale: f64,
    pub bit_depth: BitDepth,
}

impl Default for RunConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            xray: None,
            rgb: None,
            init_image: None,
            out_dir: None,
            channels: t.arch.channels,
            transforms: t.arch.transforms,
            depth: t.arch.depth,
            filter_size: t.arch.filter_size,
            patch_size: t.patch_size,
            overlap: t.overlap,
            eta1: t.weights.eta1,
            eta2: t.weights.eta2,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: t.seed,
            workers: t.workers,
            normalize: NormalizeMode::None,
            shuffle: t.shuffle,
            threshold_mode: t.threshold_mode,
            normalizer: t.exclusion.mode,
            grad_clip: t.grad_clip.unwrap_or(0.0),
            init_threshold_scale: t.init.threshold_scale,
            bit_depth: BitDepth::Sixteen,
        }
    }
}

fn enum_text<T: Copy + PartialEq>(table: &[(&'static str, T)], value: T) -> &'static str {
    table.iter().find(|(_, v)| *v == value).map(|(k, _)| *k).expect("every variant is listed")
}

fn enum_parse<T: Copy>(table: &[(&'static str, T)], text: &str) -> std::result::Result<T, String> {
    let names: Vec<&str> = table.iter().map(|(k, _)| *k).collect();
    table.iter().find(|(k, _)| *k == text).map(|(_, v)| *v).ok_or_else(|| format!("expected one of {}", names.join(", ")))
}

const NORMALIZE: &[(&str, NormalizeMode)] = &[("none", NormalizeMode::None), ("minmax", NormalizeMode::MinMax)];
const SHUFFLE: &[(&str, ShuffleMode)] = &[("each-epoch", ShuffleMode::EachEpoch), ("once", ShuffleMode::Once)];
const THRESHOLD: &[(&str, ThresholdMode)] = &[("elementwise", ThresholdMode::Elementwise), ("literal", ThresholdMode::Literal)];
const NORMALIZER: &[(&str, NormalizerMode)] = &[("stop-gradient", NormalizerMode::StopGradient), ("differentiate", NormalizerMode::Differentiate)];
const DEPTH: &[(&str, BitDepth)] = &[("8", BitDepth::Eight), ("16", BitDepth::Sixteen)];

fn number<T: FromStr>(text: &str) -> std::result::Result<T, String> {
    text.parse().map_err(|_| format!("cannot parse {text:?}"))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let fail = |msg: String| Error::Config { line, msg };
            let (key, value) = content.split_once('=').ok_or_else(|| fail("expected key = value".into()))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(fail(format!("duplicate key {key:?}")));
            }
            c.set(key, value).map_err(fail)?;
        }
        Ok(c)
    }

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        let path = || (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "xray" => self.xray = path(),
            "rgb" => self.rgb = path(),
            "init_image" => self.init_image = path(),
            "out_dir" => self.out_dir = path(),
            "channels" => self.channels = number(v)?,
            "transforms" => self.transforms = number(v)?,
            "depth" => self.depth = number(v)?,
            "filter_size" => self.filter_size = number(v)?,
            "patch_size" => self.patch_size = number(v)?,
            "overlap" => self.overlap = number(v)?,
            "eta1" => self.eta1 = number(v)?,
            "eta2" => self.eta2 = number(v)?,
            "epochs" => self.epochs = number(v)?,
            "batch_size" => self.batch_size = number(v)?,
            "seed" => self.seed = number(v)?,
            "workers" => self.workers = number(v)?,
            "grad_clip" => self.grad_clip = number(v)?,
            "init_threshold_scale" => self.init_threshold_scale = number(v)?,
            "normalize" => self.normalize = enum_parse(NORMALIZE, v)?,
            "shuffle" => self.shuffle = enum_parse(SHUFFLE, v)?,
            "threshold_mode" => self.threshold_mode = enum_parse(THRESHOLD, v)?,
            "normalizer" => self.normalizer = enum_parse(NORMALIZER, v)?,
            "bit_depth" => self.bit_depth = enum_parse(DEPTH, v)?,
            _ => return Err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    /// Every key, one per line; unset paths are written empty.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = writeln!(s, "xray = {}", p(&self.xray));
        let _ = writeln!(s, "rgb = {}", p(&self.rgb));
        let _ = writeln!(s, "init_image = {}", p(&self.init_image));
        let _ = writeln!(s, "out_dir = {}", p(&self.out_dir));
        for (k, v) in [
            ("channels", self.channels),
            ("transforms", self.transforms),
            ("depth", self.depth),
            ("filter_size", self.filter_size),
            ("patch_size", self.patch_size),
            ("overlap", self.overlap),
            ("epochs", self.epochs),
            ("batch_size", self.batch_size),
            ("workers", self.workers),
        ] {
            let _ = writeln!(s, "{k} = {v}");
        }
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "eta1 = {}", self.eta1);
        let _ = writeln!(s, "eta2 = {}", self.eta2);
        let _ = writeln!(s, "grad_clip = {}", self.grad_clip);
        let _ = writeln!(s, "init_threshold_scale = {}", self.init_threshold_scale);
        let _ = writeln!(s, "normalize = {}", enum_text(NORMALIZE, self.normalize));
        let _ = writeln!(s, "shuffle = {}", enum_text(SHUFFLE, self.shuffle));
        let _ = writeln!(s, "threshold_mode = {}", enum_text(THRESHOLD, self.threshold_mode));
        let _ = writeln!(s, "normalizer = {}", enum_text(NORMALIZER, self.normalizer));
        let _ = writeln!(s, "bit_depth = {}", enum_text(DEPTH, self.bit_depth));
        s
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn arch(&self) -> Architecture {
        Architecture { channels: self.channels, transforms: self.transforms, depth: self.depth, filter_size: self.filter_size }
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let t = TrainConfig {
            arch: self.arch(),
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            weights: LossWeights { eta1: self.eta1, eta2: self.eta2 },
            lr: LrSchedule::default(),
            patch_size: self.patch_size,
            overlap: self.overlap,
            shuffle: self.shuffle,
            workers: self.workers,
            exclusion: ExclusionOptions { mode: self.normalizer, ..ExclusionOptions::default() },
            threshold_mode: self.threshold_mode,
            grad_clip: (self.grad_clip > 0.0).then_some(self.grad_clip),
            init: InitScheme { threshold_scale: self.init_threshold_scale, ..InitScheme::default() },
        };
        t.validate()?;
        Ok(t)
    }
}
