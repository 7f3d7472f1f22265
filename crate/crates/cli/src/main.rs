//! `octa`: phantom generation, tail filtering, training, enhancement,
//! metrics, quantification and diagnostics from the command line.
//!
//! Reports go to files or stdout as JSON; progress goes to stderr. Exit status
//! is 0 on success, 1 for invalid input or failed checks, 2 for I/O errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;
use serde::Serialize;

use octa_core::blocks::Variant;
use octa_core::checkpoint::Checkpoint;
use octa_core::error::{Error, Result};
use octa_core::gradcheck;
use octa_core::masf::{masf_volume, MasfConfig};
use octa_core::metrics::MetricReport;
use octa_core::model::{log_spectrum_difference, Model, ModelConfig, Preset};
use octa_core::phantom::{self, PhantomConfig};
use octa_core::trainer::{self, TrainConfig};
use octa_core::vasc3d;
use octa_core::volume::{Mask, Volume};

const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(name = "octa", version, about = "Single-scan OCTA enhancement and vessel quantification")]
struct Cli {
    /// Seed for every random choice (default 42; overrides seeds in config files).
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic phantom dataset with a checksummed manifest.
    Phantom {
        /// Phantom configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        volumes: usize,
    },
    /// Suppress axial tail artifacts with the moving average subtraction filter.
    Masf {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.8)]
        gamma: f64,
        #[arg(long, default_value_t = 11)]
        window: usize,
        /// Depth index grows from posterior to anterior.
        #[arg(long)]
        flip_depth: bool,
    },
    /// Train a model on a phantom dataset directory.
    Train {
        /// Training configuration (JSON); defaults apply when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value = "tiny")]
        preset: Preset,
        /// Block variant: a, b, c, d or resblock.
        #[arg(long, default_value = "a")]
        variant: Variant,
        /// Loss curve CSV (default: checkpoint path + ".curve.csv").
        #[arg(long)]
        curve: Option<PathBuf>,
    },
    /// Enhance every depth plane of a volume.
    Enhance {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
    /// PSNR, SSIM and GMSD of volume `a` against reference `b`.
    Metrics {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
        /// Volumetric SSIM and GMSD instead of plane averages.
        #[arg(long)]
        d3: bool,
        #[arg(long)]
        report: PathBuf,
    },
    /// Skeleton-based vessel quantification.
    Quantify {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = vasc3d::DEFAULT_THRESHOLD)]
        threshold: f32,
        /// Restrict analysis to the non-zero voxels of this volume.
        #[arg(long)]
        mask: Option<PathBuf>,
        #[arg(long)]
        report: PathBuf,
    },
    /// Finite-difference gradient checks of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
        /// Optional JSON report.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Log-magnitude spectrum change across one block's frequency module.
    Spectrum {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        block: usize,
        #[arg(long)]
        channel: usize,
        /// Depth plane to probe (default: middle plane).
        #[arg(long)]
        depth: Option<usize>,
        /// Output map, written in the volume format as `[1, H, W/2 + 1]`.
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_io() { 2 } else { 1 })
        }
    }
}

fn read_json<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p)?;
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let seed = cli.seed;
    match cli.command {
        Command::Phantom { config, out, volumes } => {
            let mut cfg: PhantomConfig = read_json(config.as_deref())?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let m = phantom::build_dataset(&cfg, volumes, &out)?;
            info!("{} plane pairs, {} files", m.pairs.len(), m.files.len());
        }
        Command::Masf { input, out, gamma, window, flip_depth } => {
            let cfg = MasfConfig {
                gamma,
                window,
                depth_axis_ascending: !flip_depth,
            };
            info!("masf: gamma={gamma} window={window} flip_depth={flip_depth}");
            let vol = Volume::load(&input)?;
            masf_volume(&vol, &cfg)?.save(&out)?;
        }
        Command::Train { config, data, out, preset, variant, curve } => {
            let mut cfg: TrainConfig = read_json(config.as_deref())?;
            let seed = seed.unwrap_or(DEFAULT_SEED);
            cfg.seed = seed;
            let dataset = phantom::load_dataset(&data)?;
            info!(
                "training {preset:?}/{variant:?} on {} pairs ({} held out) for {} iterations",
                dataset.train.len(),
                dataset.val.len(),
                cfg.total_iters
            );
            let mut model = Model::new(&ModelConfig::preset(preset).with_variant(variant), seed)?;
            let outcome = trainer::train(&mut model, &dataset, &cfg)?;
            Checkpoint::from_model(&model, Some(&outcome.optimizer)).save(&out)?;
            let curve_path = curve.unwrap_or_else(|| {
                let mut s = out.as_os_str().to_owned();
                s.push(".curve.csv");
                PathBuf::from(s)
            });
            fs::write(&curve_path, trainer::curve_csv(&outcome.curve))?;
            info!("wrote {} and {}", out.display(), curve_path.display());
        }
        Command::Enhance { ckpt, input, out, workers } => {
            let model = Checkpoint::load(&ckpt)?.to_model()?;
            let vol = Volume::load(&input)?;
            model.enhance_volume(&vol, workers.max(1))?.save(&out)?;
            info!("enhanced {:?} with {} workers", vol.dims(), workers.max(1));
        }
        Command::Metrics { a, b, d3, report } => {
            let r = MetricReport::for_volumes(&Volume::load(&a)?, &Volume::load(&b)?, d3)?;
            info!("psnr {:.3} dB, ssim {:.4}, gmsd {:.4}", r.psnr, r.ssim, r.gmsd);
            write_json(&report, &r)?;
        }
        Command::Quantify { input, threshold, mask, report } => {
            let vol = Volume::load(&input)?;
            let region = mask.map(|p| Volume::load(&p).map(|v| Mask::from_volume(&v))).transpose()?;
            let r = vasc3d::quantify_volume(&vol, threshold, region.as_ref())?;
            info!(
                "{} segments, {:.1} per mm³",
                r.segment_count, r.segment_density_per_mm3
            );
            write_json(&report, &r)?;
        }
        Command::Gradcheck { tolerance, report } => {
            let entries = gradcheck::standard_suite(tolerance, seed.unwrap_or(DEFAULT_SEED))?;
            let mut failed = 0;
            let mut rows = Vec::new();
            for e in &entries {
                let err = e.report.max_rel_error();
                let ok = e.report.passed();
                failed += !ok as usize;
                eprintln!(
                    "{:<5} {:<28} {:<20} {:.3e} (tol {:.0e})",
                    if ok { "ok" } else { "FAIL" },
                    e.op,
                    e.shape,
                    err,
                    e.report.tolerance
                );
                rows.push(serde_json::json!({
                    "op": e.op, "shape": e.shape, "max_rel_error": err,
                    "tolerance": e.report.tolerance, "passed": ok,
                }));
            }
            if let Some(p) = report {
                write_json(&p, &rows)?;
            }
            if failed > 0 {
                return Err(Error::GradCheck(format!("{failed} of {} checks failed", entries.len())));
            }
            info!("all {} checks passed", entries.len());
        }
        Command::Spectrum { ckpt, input, block, channel, depth, out } => {
            let model = Checkpoint::load(&ckpt)?.to_model()?;
            let vol = Volume::load(&input)?;
            let [d, _, _] = vol.dims();
            let z = depth.unwrap_or(d / 2);
            if z >= d {
                return Err(Error::Config(format!("depth {z} out of range for {d} planes")));
            }
            let traces = model.probe_plane(&vol.plane_tensor(z).map(|v| v / 255.0))?;
            let trace = traces
                .get(block)
                .ok_or_else(|| Error::Config(format!("block {block} out of range for {} blocks", traces.len())))?
                .as_ref()
                .ok_or_else(|| Error::Config(format!("block {block} has no frequency module")))?;
            let map = log_spectrum_difference(trace, channel)?;
            let [h, w] = [map.shape()[0], map.shape()[1]];
            Volume::new([1, h, w], [1.0; 3], map.into_data())?.save(&out)?;
            info!("spectrum difference of block {block} channel {channel} at depth {z}");
        }
    }
    Ok(())
}
