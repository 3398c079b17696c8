//! Self-supervised training on the patches of a single artwork.
//!
//! Per-patch gradients are computed in parallel against a read-only
//! parameter snapshot and summed in batch order, so a run is bit-identical
//! for any worker count.

use std::io::Write;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::loss::{mse, training_loss_tape, ExclusionOptions, LossReport, LossWeights};
use crate::net::{init_params_with, synthesize_rgb_tape, synthesize_xray_tape, Architecture, InitScheme, InputVars, Lcista, NetworkParams, ParamVars};
use crate::patch::{grayscale, shuffle_order, PatchGrid, DEFAULT_OVERLAP, DEFAULT_PATCH_SIZE};
use crate::sparse_model::ThresholdMode;
use crate::tensor::{Plane, Rgb};

pub const DEFAULT_EPOCHS: usize = 120;
pub const DEFAULT_BATCH_SIZE: usize = 16;
pub const CHECKPOINT_EVERY: usize = 10;
/// Plain SGD on the summed-pixel loss overshoots at `lr = 1e-3` without it.
pub const DEFAULT_GRAD_CLIP: f64 = 100.0;

/// `10^(-3 - epoch / 40)`.
pub fn lr_schedule(epoch: usize) -> f64 {
    LrSchedule::default().at(epoch)
}

/// `10^(-(offset + epoch / decay))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub offset: f64,
    pub decay: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self { offset: 3.0, decay: 40.0 }
    }
}

impl LrSchedule {
    pub fn at(&self, epoch: usize) -> f64 {
        // A positive power of ten is exact at integer exponents, so its reciprocal rounds correctly.
        1.0 / 10f64.powf(self.offset + epoch as f64 / self.decay)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ShuffleMode {
    #[default]
    EachEpoch,
    Once,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub arch: Architecture,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub weights: LossWeights,
    pub lr: LrSchedule,
    pub patch_size: usize,
    pub overlap: usize,
    pub shuffle: ShuffleMode,
    /// Gradient worker threads; 0 uses every available core.
    pub workers: usize,
    pub exclusion: ExclusionOptions,
    pub threshold_mode: ThresholdMode,
    /// Rescales the batch-mean gradient to at most this Euclidean norm.
    pub grad_clip: Option<f64>,
    pub init: InitScheme,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            arch: Architecture::default(),
            epochs: DEFAULT_EPOCHS,
            batch_size: DEFAULT_BATCH_SIZE,
            seed: 0,
            weights: LossWeights::default(),
            lr: LrSchedule::default(),
            patch_size: DEFAULT_PATCH_SIZE,
            overlap: DEFAULT_OVERLAP,
            shuffle: ShuffleMode::EachEpoch,
            workers: 0,
            exclusion: ExclusionOptions::default(),
            threshold_mode: ThresholdMode::Elementwise,
            grad_clip: Some(DEFAULT_GRAD_CLIP),
            init: InitScheme::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.weights.validate()?;
        self.init.validate()?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        if self.overlap >= self.patch_size {
            return Err(Error::invalid("overlap must be smaller than the patch size"));
        }
        if let Some(c) = self.grad_clip {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::invalid(format!("gradient clip {c} must be positive and finite")));
            }
        }
        Ok(())
    }

    pub fn network(&self) -> Result<Lcista> {
        Ok(Lcista::new(self.arch, self.patch_size, self.patch_size)?.with_mode(self.threshold_mode))
    }

    fn pool(&self) -> Result<rayon::ThreadPool> {
        rayon::ThreadPoolBuilder::new().num_threads(self.workers).build().map_err(|e| Error::invalid(e.to_string()))
    }
}

/// One training example: mixed X-ray, surface RGB and the initial `y1`.
#[derive(Clone, Debug)]
pub struct PatchSample {
    pub x: Plane,
    pub rgb: Rgb,
    pub g1: Plane,
}

/// Decoded outputs of one patch.
#[derive(Clone, Debug)]
pub struct PatchOutput {
    pub x1: Plane,
    pub x2: Plane,
    pub rgb: Rgb,
}

/// Loss of one patch and its gradient in the flat parameter layout.
pub fn patch_loss_and_grad(net: &Lcista, params: &NetworkParams, sample: &PatchSample, weights: LossWeights, exclusion: ExclusionOptions) -> Result<(LossReport, Vec<f64>)> {
    let mut tape = Tape::new();
    let vars = ParamVars::record(&mut tape, params, true);
    let input = InputVars::constant(&mut tape, &sample.x, &sample.rgb);
    let g1 = tape.constant(sample.g1.clone());
    let state = net.analysis_tape(&mut tape, &vars.analysis, &input, g1)?;
    let rgb_hat = synthesize_rgb_tape(&mut tape, &vars.synthesis, &state.z1)?;
    let (_, _, x_hat) = synthesize_xray_tape(&mut tape, &vars.synthesis, &state.z1, &state.z2)?;
    let loss = training_loss_tape(&mut tape, input.x, x_hat, &input.rgb, &rgb_hat, state.y1, state.y2, weights, exclusion)?;
    let grads = tape.backward(loss.total)?;
    Ok((loss.report(&tape), vars.flat_gradient(&grads)))
}

/// Forward pass and decoding of one patch.
pub fn patch_forward(net: &Lcista, params: &NetworkParams, sample: &PatchSample) -> Result<PatchOutput> {
    let state = net.analysis_forward(&sample.x, &sample.rgb, &sample.g1, &params.analysis)?;
    let rgb = crate::net::synthesize_rgb(&state.z1, &params.synthesis)?;
    let (x1, x2, _) = crate::net::synthesize_xray(&state.z1, &state.z2, &params.synthesis)?;
    Ok(PatchOutput { x1, x2, rgb })
}

/// One pass over `data` in `order`: one SGD step per batch on the batch-mean loss.
///
/// Returns the updated parameters and the epoch mean of every loss component,
/// each patch evaluated at the parameters of its batch.
pub fn train_epoch(params: &NetworkParams, data: &[PatchSample], order: &[usize], config: &TrainConfig, epoch: usize) -> Result<(NetworkParams, LossReport)> {
    if data.is_empty() || order.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    config.validate()?;
    let net = config.network()?;
    let lr = config.lr.at(epoch);
    let pool = config.pool()?;
    let mut flat = params.to_flat();
    let mut current = params.clone();
    let mut reports = Vec::with_capacity(order.len());
    for batch in order.chunks(config.batch_size) {
        let results: Vec<Result<(LossReport, Vec<f64>)>> = pool.install(|| {
            batch.par_iter().map(|&i| patch_loss_and_grad(&net, &current, &data[i], config.weights, config.exclusion)).collect()
        });
        let mut sum = vec![0.0; flat.len()];
        for (&i, result) in batch.iter().zip(results) {
            let (report, grad) = match result {
                Err(Error::NonFinite(_)) => return Err(Error::NonFiniteLoss { epoch, patch: i }),
                other => other?,
            };
            if !report.total.is_finite() || grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch, patch: i });
            }
            for (s, g) in sum.iter_mut().zip(&grad) {
                *s += g;
            }
            reports.push(report);
        }
        let mut scale = lr / batch.len() as f64;
        if let Some(max) = config.grad_clip {
            let norm = sum.iter().map(|g| g * g).sum::<f64>().sqrt() / batch.len() as f64;
            if norm > max {
                scale *= max / norm;
            }
        }
        for (p, s) in flat.iter_mut().zip(&sum) {
            *p -= scale * s;
        }
        current = NetworkParams::from_flat(config.arch, &flat)?;
        current.project();
        flat = current.to_flat();
    }
    Ok((current, LossReport::mean(&reports)))
}

/// Full-image inputs of a training run.
#[derive(Clone, Debug)]
pub struct TrainInput {
    pub xray: Plane,
    pub rgb: Rgb,
    /// Replaces the grayscale of `rgb` as the initial surface image.
    pub g1_override: Option<Plane>,
}

impl TrainInput {
    pub fn new(xray: Plane, rgb: Rgb) -> Self {
        Self { xray, rgb, g1_override: None }
    }

    pub fn g1(&self) -> Result<Plane> {
        match &self.g1_override {
            Some(g) => Ok(g.clone()),
            None => grayscale(&self.rgb),
        }
    }

    fn check(&self) -> Result<()> {
        let dims = self.xray.dims();
        if self.rgb.iter().any(|p| p.dims() != dims) {
            return Err(Error::shape(format!("RGB planes do not match the {dims:?} X-ray")));
        }
        if let Some(g) = &self.g1_override {
            if g.dims() != dims {
                return Err(Error::shape(format!("initialization image is {:?}, X-ray {dims:?}", g.dims())));
            }
        }
        Ok(())
    }
}

/// Reassembled full-image outputs.
#[derive(Clone, Debug)]
pub struct Separation {
    pub x1: Plane,
    pub x2: Plane,
    /// `x1 + x2`.
    pub x: Plane,
    pub rgb: Rgb,
}

#[derive(Clone, Debug)]
pub struct TrainOutput {
    pub params: NetworkParams,
    /// Epoch means, one per epoch.
    pub history: Vec<LossReport>,
    pub separation: Separation,
}

/// Passed to the epoch callback after every epoch.
pub struct EpochEvent<'a> {
    /// 1-based count of completed epochs.
    pub epoch: usize,
    pub params: &'a NetworkParams,
    pub report: &'a LossReport,
    /// Set every [`CHECKPOINT_EVERY`] epochs and on the last one.
    pub checkpoint_due: bool,
}

pub fn build_dataset(input: &TrainInput, grid: &PatchGrid) -> Result<Vec<PatchSample>> {
    let x = grid.extract(&input.xray)?;
    let rgb = grid.extract_rgb(&input.rgb)?;
    let g1 = grid.extract(&input.g1()?)?;
    Ok(x.into_iter().zip(rgb).zip(g1).map(|((x, rgb), g1)| PatchSample { x, rgb, g1 }).collect())
}

/// Decodes every patch with `params` and averages the overlaps back to full size.
pub fn separate(params: &NetworkParams, grid: &PatchGrid, data: &[PatchSample], config: &TrainConfig) -> Result<Separation> {
    let net = config.network()?;
    let pool = config.pool()?;
    let outputs: Vec<PatchOutput> = pool.install(|| data.par_iter().map(|s| patch_forward(&net, params, s)).collect::<Result<_>>())?;
    let collect = |f: &dyn Fn(&PatchOutput) -> Plane| -> Result<Plane> { grid.reassemble(&outputs.iter().map(f).collect::<Vec<_>>()) };
    let x1 = collect(&|o| o.x1.clone())?;
    let x2 = collect(&|o| o.x2.clone())?;
    let rgb = [collect(&|o| o.rgb[0].clone())?, collect(&|o| o.rgb[1].clone())?, collect(&|o| o.rgb[2].clone())?];
    let x = x1.add(&x2)?;
    Ok(Separation { x1, x2, x, rgb })
}

/// Initializes from `config.seed`, trains for `config.epochs` and separates the full image.
pub fn train(input: &TrainInput, config: &TrainConfig, mut on_epoch: impl FnMut(EpochEvent<'_>) -> Result<()>) -> Result<TrainOutput> {
    config.validate()?;
    input.check()?;
    let (h, w) = input.xray.dims();
    let grid = PatchGrid::new(h, w, config.patch_size, config.overlap)?;
    let data = build_dataset(input, &grid)?;
    let mut params = init_params_with(config.arch, config.seed, config.init)?;
    let mut history = Vec::with_capacity(config.epochs);
    let once = shuffle_order(data.len(), config.seed);
    for epoch in 0..config.epochs {
        let order = match config.shuffle {
            ShuffleMode::Once => once.clone(),
            ShuffleMode::EachEpoch => shuffle_order(data.len(), config.seed.wrapping_add(epoch as u64)),
        };
        let (next, report) = train_epoch(&params, &data, &order, config, epoch)?;
        params = next;
        let done = epoch + 1;
        on_epoch(EpochEvent { epoch: done, params: &params, report: &report, checkpoint_due: done % CHECKPOINT_EVERY == 0 || done == config.epochs })?;
        history.push(report);
    }
    let separation = separate(&params, &grid, &data, config)?;
    Ok(TrainOutput { params, history, separation })
}

pub const LOSS_CSV_HEADER: &str = "epoch,total,recon_xray,recon_rgb,exclusion";

/// Loss curves, one row per epoch (1-based), 12 significant digits.
pub fn write_loss_csv(history: &[LossReport], mut out: impl Write) -> Result<()> {
    writeln!(out, "{LOSS_CSV_HEADER}")?;
    for (i, r) in history.iter().enumerate() {
        writeln!(out, "{},{:.11e},{:.11e},{:.11e},{:.11e}", i + 1, r.total, r.recon_xray, r.recon_rgb, r.exclusion)?;
    }
    Ok(())
}

/// Cartesian grid of loss weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepGrid {
    pub eta1: Vec<f64>,
    pub eta2: Vec<f64>,
}

impl Default for SweepGrid {
    /// `eta1` in `0..=1` by 0.025 and `eta2` in `0..=0.4` by 0.01.
    fn default() -> Self {
        Self { eta1: (0..=40).map(|i| i as f64 / 40.0).collect(), eta2: (0..=40).map(|i| i as f64 / 100.0).collect() }
    }
}

impl SweepGrid {
    pub fn single(eta1: f64, eta2: f64) -> Self {
        Self { eta1: vec![eta1], eta2: vec![eta2] }
    }

    pub fn len(&self) -> usize {
        self.eta1.len() * self.eta2.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cells with `eta1` varying slowest.
    pub fn cells(&self) -> impl Iterator<Item = LossWeights> + '_ {
        self.eta1.iter().flat_map(move |&eta1| self.eta2.iter().map(move |&eta2| LossWeights { eta1, eta2 }))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SweepRow {
    pub eta1: f64,
    pub eta2: f64,
    pub mse_surface: f64,
    pub mse_concealed: f64,
    pub mse_mean: f64,
}

#[derive(Clone, Debug)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Row with the smallest `mse_mean`.
    pub best: usize,
}

pub const SWEEP_CSV_HEADER: &str = "eta1,eta2,mse_surface,mse_concealed,mse_mean";

pub fn write_sweep_csv(rows: &[SweepRow], mut out: impl Write) -> Result<()> {
    writeln!(out, "{SWEEP_CSV_HEADER}")?;
    for r in rows {
        writeln!(out, "{},{},{:.11e},{:.11e},{:.11e}", r.eta1, r.eta2, r.mse_surface, r.mse_concealed, r.mse_mean)?;
    }
    Ok(())
}

/// Trains one network per grid cell and scores both separated X-rays against ground truth.
///
/// `config.epochs` is the per-cell budget; `on_row` sees each row as it completes.
pub fn sweep(
    input: &TrainInput,
    x1_truth: Option<&Plane>,
    x2_truth: Option<&Plane>,
    grid: &SweepGrid,
    config: &TrainConfig,
    mut on_row: impl FnMut(&SweepRow),
) -> Result<SweepResult> {
    let x1 = x1_truth.ok_or_else(|| Error::MissingGroundTruth("surface X-ray".into()))?;
    let x2 = x2_truth.ok_or_else(|| Error::MissingGroundTruth("concealed X-ray".into()))?;
    if grid.is_empty() {
        return Err(Error::invalid("sweep grid is empty"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for weights in grid.cells() {
        let cfg = TrainConfig { weights, ..config.clone() };
        let out = train(input, &cfg, |_| Ok(()))?;
        let mse_surface = mse(&out.separation.x1, x1)?;
        let mse_concealed = mse(&out.separation.x2, x2)?;
        let row = SweepRow { eta1: weights.eta1, eta2: weights.eta2, mse_surface, mse_concealed, mse_mean: 0.5 * (mse_surface + mse_concealed) };
        on_row(&row);
        rows.push(row);
    }
    let best = rows.iter().enumerate().min_by(|a, b| a.1.mse_mean.total_cmp(&b.1.mse_mean)).map(|(i, _)| i).expect("nonempty grid");
    Ok(SweepResult { rows, best })
}
