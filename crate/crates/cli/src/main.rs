use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use xsep_core::io::{load_image, save_checkpoint, save_image, BitDepth, Image, RunConfig};
use xsep_core::loss::{error_map, mse};
use xsep_core::patch::{normalize, synth_mix, Affine};
use xsep_core::train::{sweep, train, write_loss_csv, write_sweep_csv, SweepGrid, TrainInput};
use xsep_core::{verify, Error, Plane};

#[derive(Parser)]
#[command(name = "xsep", version, about = "Separate mixed X-ray images of double-sided or overpainted artworks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Sum two X-ray images into a mixture.
    SynthMix {
        #[arg(long)]
        x1: PathBuf,
        #[arg(long)]
        x2: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16, value_parser = parse_depth)]
        bit_depth: u8,
    },
    /// Train on a mixed X-ray and its surface RGB, then write the separated images.
    Separate {
        #[arg(long)]
        xray: Option<PathBuf>,
        #[arg(long)]
        rgb: Option<PathBuf>,
        /// Replaces the grayscale RGB as the initial surface image.
        #[arg(long)]
        init_image: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Print the mean squared error between two images.
    Eval {
        #[arg(long)]
        est: PathBuf,
        #[arg(long)]
        gt: PathBuf,
    },
    /// Grid search over the loss weights against known individual X-rays.
    Sweep {
        #[arg(long)]
        xray1_gt: PathBuf,
        #[arg(long)]
        xray2_gt: PathBuf,
        #[arg(long)]
        rgb: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs_per_cell: Option<usize>,
        #[command(flatten)]
        run: RunArgs,
    },
    /// Run the built-in numerical verification suite.
    Check {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Overrides applied on top of the configuration file.
#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    eta1: Option<f64>,
    #[arg(long)]
    eta2: Option<f64>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig, Failure> {
        let mut c = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        c.epochs = self.epochs.unwrap_or(c.epochs);
        c.seed = self.seed.unwrap_or(c.seed);
        c.workers = self.workers.unwrap_or(c.workers);
        c.channels = self.channels.unwrap_or(c.channels);
        c.depth = self.depth.unwrap_or(c.depth);
        c.eta1 = self.eta1.unwrap_or(c.eta1);
        c.eta2 = self.eta2.unwrap_or(c.eta2);
        Ok(c)
    }
}

fn parse_depth(s: &str) -> Result<u8, String> {
    match s {
        "8" => Ok(8),
        "16" => Ok(16),
        _ => Err("bit depth must be 8 or 16".into()),
    }
}

fn depth_of(bits: u8) -> BitDepth {
    if bits == 8 {
        BitDepth::Eight
    } else {
        BitDepth::Sixteen
    }
}

enum Failure {
    Usage(String),
    Data(String),
    Numerical(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::NonFinite(_) | Error::NonFiniteLoss { .. } | Error::DegenerateNormalizer | Error::NonDeterministicLoss { .. } => Failure::Numerical(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

fn gray(path: &Path) -> Result<Plane, Failure> {
    Ok(load_image(path)?.into_gray(path)?)
}

fn save(image: Image, path: &Path, depth: BitDepth) -> Result<(), Failure> {
    let clamped = save_image(&image, path, depth)?;
    if clamped > 0 {
        eprintln!("warning: {clamped} samples of {} clamped to [0, 1]", path.display());
    }
    Ok(())
}

fn required(value: Option<PathBuf>, name: &str) -> Result<PathBuf, Failure> {
    value.ok_or_else(|| Failure::Usage(format!("--{name} is required (or set it in the config file)")))
}

fn separate(xray: Option<PathBuf>, rgb: Option<PathBuf>, init_image: Option<PathBuf>, out_dir: Option<PathBuf>, run: &RunArgs) -> Result<(), Failure> {
    let mut cfg = run.resolve()?;
    cfg.xray = xray.or(cfg.xray);
    cfg.rgb = rgb.or(cfg.rgb);
    cfg.init_image = init_image.or(cfg.init_image);
    cfg.out_dir = out_dir.or(cfg.out_dir);
    let xray_path = required(cfg.xray.clone(), "xray")?;
    let rgb_path = required(cfg.rgb.clone(), "rgb")?;
    let out_dir = required(cfg.out_dir.clone(), "out-dir")?;
    let train_cfg = cfg.train_config()?;

    let x = gray(&xray_path)?;
    let rgb = load_image(&rgb_path)?.into_rgb(&rgb_path)?;
    let g1 = cfg.init_image.as_deref().map(gray).transpose()?;
    let (x_norm, affine) = normalize(&x, cfg.normalize)?;
    let input = TrainInput { xray: x_norm, rgb, g1_override: g1 };

    fs::create_dir_all(&out_dir)?;
    fs::write(out_dir.join("run.cfg"), cfg.to_text())?;
    let patch = train_cfg.patch_size;
    let out = train(&input, &train_cfg, |event| {
        eprintln!("epoch {:>4}  total {:.6e}  xray {:.6e}  rgb {:.6e}  exclusion {:.6e}", event.epoch, event.report.total, event.report.recon_xray, event.report.recon_rgb, event.report.exclusion);
        if event.checkpoint_due {
            save_checkpoint(&out_dir.join(format!("checkpoint_{:04}.xsep", event.epoch)), event.params, patch)?;
        }
        Ok(())
    })?;

    let s = &out.separation;
    let (x1, x2) = split_affine(&s.x1, &s.x2, affine);
    let x_hat = x1.add(&x2)?;
    let depth = cfg.bit_depth;
    save(Image::Gray(x1), &out_dir.join("x1.png"), depth)?;
    save(Image::Gray(x2), &out_dir.join("x2.png"), depth)?;
    save(Image::Gray(error_map(&x_hat, &x)?), &out_dir.join("error_map.png"), depth)?;
    eprintln!("mixture mse {:.6e}", mse(&x_hat, &x)?);
    save(Image::Gray(x_hat), &out_dir.join("x.png"), depth)?;
    write_loss_csv(&out.history, BufWriter::new(File::create(out_dir.join("loss.csv"))?))?;
    save_checkpoint(&out_dir.join("final.xsep"), &out.params, patch)?;
    Ok(())
}

/// Maps estimates made on a normalized mixture back to input units, sharing
/// the offset equally so the two parts still sum to the inverted mixture.
fn split_affine(x1: &Plane, x2: &Plane, t: Affine) -> (Plane, Plane) {
    let half = Affine { scale: t.scale, offset: t.offset / 2.0 };
    (half.invert(x1), half.invert(x2))
}

fn run_sweep(x1: &Path, x2: &Path, rgb: &Path, out: &Path, epochs_per_cell: Option<usize>, run: &RunArgs) -> Result<(), Failure> {
    let mut cfg = run.resolve()?;
    cfg.epochs = epochs_per_cell.unwrap_or(cfg.epochs);
    let train_cfg = cfg.train_config()?;
    let (x1, x2) = (gray(x1)?, gray(x2)?);
    let input = TrainInput::new(synth_mix(&x1, &x2)?, load_image(rgb)?.into_rgb(rgb)?);
    let grid = SweepGrid::default();
    let total = grid.len();
    let mut done = 0;
    let result = sweep(&input, Some(&x1), Some(&x2), &grid, &train_cfg, |row| {
        done += 1;
        eprintln!("[{done}/{total}] eta1 {} eta2 {} mse {:.6e}", row.eta1, row.eta2, row.mse_mean);
    })?;
    write_sweep_csv(&result.rows, BufWriter::new(File::create(out)?))?;
    let best = &result.rows[result.best];
    println!("best eta1={} eta2={} mse={:.6e}", best.eta1, best.eta2, best.mse_mean);
    Ok(())
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::SynthMix { x1, x2, out, bit_depth } => {
            let mix = synth_mix(&gray(&x1)?, &gray(&x2)?)?;
            save(Image::Gray(mix), &out, depth_of(bit_depth))
        }
        Command::Separate { xray, rgb, init_image, out_dir, run } => separate(xray, rgb, init_image, out_dir, &run),
        Command::Eval { est, gt } => {
            let (a, b) = (load_image(&est)?, load_image(&gt)?);
            let value = match (a, b) {
                (Image::Gray(a), Image::Gray(b)) => mse(&a, &b)?,
                (Image::Rgb(a), Image::Rgb(b)) => (0..3).map(|s| mse(&a[s], &b[s])).sum::<Result<f64, _>>()? / 3.0,
                _ => return Err(Failure::Data("images have different channel counts".into())),
            };
            println!("{value}");
            Ok(())
        }
        Command::Sweep { xray1_gt, xray2_gt, rgb, out, epochs_per_cell, run } => run_sweep(&xray1_gt, &xray2_gt, &rgb, &out, epochs_per_cell, &run),
        Command::Check { seed } => {
            let outcomes = verify::run_suite(seed)?;
            for o in &outcomes {
                println!("{o}");
            }
            match outcomes.iter().filter(|o| !o.passed).count() {
                0 => Ok(()),
                n => Err(Failure::Numerical(format!("{n} check(s) failed"))),
            }
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(3)
        }
    }
}
