//! Command-line surface: fingerprint building and adaptation, calibration,
//! video analysis, momentum inspection, synthesis and benchmarking.

pub mod config;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use eisprnu::batcheval::{self, CandidateBatch};
use eisprnu::imagecore::{downscale, load_image, save_png, BitDepth, CropRect, Image};
use eisprnu::inversion::{decide, Inverter};
use eisprnu::prnu::{self, Adaptation, Fingerprint, FingerprintAccumulator, PreparedFingerprint, ShiftPolicy};
use eisprnu::selector::{self, FileSource, FrameSource, PairMomentum};
use eisprnu::synth::{self, SynthSpec, Texture};
use eisprnu::warp::RestrictedParams;

pub use config::{Overrides, RegisterConfig, RunConfig};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error(transparent)]
    Data(#[from] eisprnu::Error),
    #[error("inconclusive: {0}")]
    Inconclusive(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Inconclusive(_) => 3,
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "eisprnu", version, about = "PRNU source-camera identification for stabilized video")]
pub struct Cli {
    /// JSON configuration file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Decision threshold on mean PCE.
    #[arg(long, global = true)]
    pub tau: Option<f64>,
    /// Where to write the JSON report.
    #[arg(long, global = true)]
    pub report: Option<PathBuf>,
    /// denoise_per_candidate or warp_residual.
    #[arg(long = "residual-mode", global = true)]
    pub residual_mode: Option<String>,
    /// parallel or sequential candidate evaluation.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Keypoint displacement limit (px) for momentum.
    #[arg(long = "sanitize-threshold", global = true)]
    pub sanitize_threshold: Option<f64>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a reference fingerprint from a directory of flat images.
    Fingerprint {
        images_dir: PathBuf,
        #[arg(short, long)]
        out: PathBuf,
        #[arg(long, default_value = "device")]
        device_id: String,
    },
    /// Down-scale and crop a fingerprint to video geometry.
    Adapt {
        fingerprint: PathBuf,
        #[arg(long)]
        scale: f64,
        /// w_tl,h_tl,w_br,h_br
        #[arg(long)]
        crop: String,
        #[arg(short, long)]
        out: PathBuf,
    },
    /// Estimate the scale and crop relating a fingerprint to a video.
    Register {
        fingerprint: PathBuf,
        manifest: PathBuf,
        /// Also write the adapted fingerprint here.
        #[arg(short, long)]
        out: Option<PathBuf>,
    },
    /// Test whether a video was shot by the fingerprint's device.
    Analyze { fingerprint: PathBuf, manifest: PathBuf },
    /// Print I-frame momenta and the selected anchor.
    Momentum { manifest: PathBuf },
    /// Write a synthetic stabilized sequence with a known fingerprint.
    Synth {
        out_dir: PathBuf,
        /// Full SynthSpec as JSON; other synth flags are ignored.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long, default_value = "128x128")]
        size: String,
        #[arg(long, default_value_t = 5)]
        frames: usize,
        #[arg(long, default_value_t = 0.05)]
        strength: f64,
        #[arg(long, default_value_t = 2.0)]
        noise: f64,
        #[arg(long, default_value = "textured")]
        texture: String,
        #[arg(long, default_value_t = 0)]
        gop_size: usize,
        #[arg(long, default_value_t = 1.0)]
        sensor_scale: f64,
        /// Per-frame increment of the correcting scale.
        #[arg(long, default_value_t = 0.0)]
        lambda_drift: f64,
        /// Per-frame increment of the correcting rotation entry.
        #[arg(long, default_value_t = 0.0)]
        theta_drift: f64,
    },
    /// Time candidate evaluation sequentially and in parallel.
    Bench {
        #[arg(long, default_value_t = 256)]
        size: usize,
        /// Side of the square (λ, θ) candidate grid.
        #[arg(long, default_value_t = 11)]
        grid: usize,
    },
}

/// Parses `args` (including the program name) and runs; returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .try_init();
    match execute(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn execute(cli: &Cli) -> CliResult<()> {
    let over = Overrides {
        seed: cli.seed,
        workers: cli.workers,
        tau: cli.tau,
        residual_mode: cli.residual_mode.clone(),
        backend: cli.backend.clone(),
        sanitize_threshold: cli.sanitize_threshold,
    };
    let cfg = RunConfig::load(cli.config.as_deref(), &over)?;
    let report = cli.report.as_deref();
    match &cli.command {
        Command::Fingerprint { images_dir, out, device_id } => {
            cmd_fingerprint(images_dir, out, device_id, &cfg, report)
        }
        Command::Adapt { fingerprint, scale, crop, out } => {
            let crop: CropRect = crop.parse().map_err(|e: eisprnu::Error| CliError::Usage(e.to_string()))?;
            cmd_adapt(fingerprint, *scale, crop, out, &cfg, report)
        }
        Command::Register { fingerprint, manifest, out } => {
            cmd_register(fingerprint, manifest, out.as_deref(), &cfg, report).map(|_| ())
        }
        Command::Analyze { fingerprint, manifest } => {
            cmd_analyze(fingerprint, manifest, &cfg, report).map(|_| ())
        }
        Command::Momentum { manifest } => cmd_momentum(manifest, &cfg, report).map(|_| ()),
        Command::Synth {
            out_dir,
            spec,
            size,
            frames,
            strength,
            noise,
            texture,
            gop_size,
            sensor_scale,
            lambda_drift,
            theta_drift,
        } => {
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", p.display())))?;
                    let mut s: SynthSpec = serde_json::from_str(&text)
                        .map_err(|e| CliError::Usage(format!("bad synth spec: {e}")))?;
                    if cli.seed.is_some() {
                        s.seed = cfg.seed;
                    }
                    s
                }
                None => {
                    if *frames == 0 {
                        return Err(CliError::Usage("frames must be at least 1".into()));
                    }
                    let warps = (0..*frames)
                        .map(|v| {
                            RestrictedParams::new(1.0 + v as f64 * lambda_drift, v as f64 * theta_drift, 0.0, 0.0)
                        })
                        .collect::<eisprnu::Result<Vec<_>>>()
                        .map_err(|e| CliError::Usage(e.to_string()))?;
                    SynthSpec {
                        dims: parse_size(size)?,
                        fingerprint_strength: *strength,
                        noise_sigma: *noise,
                        warps,
                        texture: texture.parse::<Texture>().map_err(|e| CliError::Usage(e.to_string()))?,
                        seed: cfg.seed,
                        scene_motion: Vec::new(),
                        gop_size: *gop_size,
                        sensor_scale: *sensor_scale,
                    }
                }
            };
            cmd_synth(&spec, out_dir, &cfg, report)
        }
        Command::Bench { size, grid } => cmd_bench(*size, *grid, &cfg, report).map(|_| ()),
    }
}

fn parse_size(s: &str) -> CliResult<(usize, usize)> {
    let bad = || CliError::Usage(format!("size '{s}' must look like 128x96 (height x width)"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn write_report<T: Serialize>(report: &T, path: Option<&Path>) -> CliResult<()> {
    if let Some(p) = path {
        let text = serde_json::to_string_pretty(report).map_err(eisprnu::Error::from)?;
        std::fs::write(p, text + "\n").map_err(|e| {
            CliError::Data(eisprnu::Error::Io {
                path: p.to_path_buf(),
                source: e,
            })
        })?;
    }
    Ok(())
}

type Timings = BTreeMap<&'static str, f64>;

fn is_image_file(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "pgm" | "pnm"))
        .unwrap_or(false)
}

#[derive(Debug, Serialize)]
pub struct FingerprintReport {
    pub command: &'static str,
    pub out: PathBuf,
    pub device_id: String,
    pub n_images: usize,
    pub height: usize,
    pub width: usize,
    pub k_mean: f64,
    pub k_std: f64,
    pub config: RunConfig,
    pub seed: u64,
    pub timings: Timings,
}

pub fn cmd_fingerprint(
    images_dir: &Path,
    out: &Path,
    device_id: &str,
    cfg: &RunConfig,
    report: Option<&Path>,
) -> CliResult<()> {
    let start = Instant::now();
    let entries = std::fs::read_dir(images_dir).map_err(|e| eisprnu::Error::Io {
        path: images_dir.to_path_buf(),
        source: e,
    })?;
    let mut files: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image_file(p))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(eisprnu::Error::InsufficientData(format!(
            "no PNG/PGM images in {}",
            images_dir.display()
        ))
        .into());
    }
    let first = load_image(&files[0])?;
    let mut acc = FingerprintAccumulator::new(first.height(), first.width(), cfg.sigma0_sq);
    let pool = worker_pool(cfg.workers)?;
    let chunk = cfg.workers.max(1) * 2;
    for group in files.chunks(chunk) {
        let imgs = group.iter().map(load_image).collect::<eisprnu::Result<Vec<_>>>()?;
        pool.install(|| acc.add_batch(&imgs))?;
        log::info!("accumulated {} images", acc.count());
    }
    let fp = acc.finish()?;
    fp.save(out, device_id, cfg.sigma0_sq)?;
    let (k_mean, k_std) = (fp.k_hat.mean(), fp.k_hat.variance().sqrt());
    println!(
        "fingerprint {}x{} from {} images -> {} (mean {:.3e}, std {:.3e})",
        fp.k_hat.height(),
        fp.k_hat.width(),
        fp.n_images,
        out.display(),
        k_mean,
        k_std
    );
    let mut timings = Timings::new();
    timings.insert("total_ms", ms(start));
    write_report(
        &FingerprintReport {
            command: "fingerprint",
            out: out.to_path_buf(),
            device_id: device_id.to_string(),
            n_images: fp.n_images,
            height: fp.k_hat.height(),
            width: fp.k_hat.width(),
            k_mean,
            k_std,
            config: cfg.clone(),
            seed: cfg.seed,
            timings,
        },
        report,
    )
}

fn worker_pool(workers: usize) -> CliResult<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| CliError::Usage(format!("worker pool: {e}")))
}

#[derive(Debug, Serialize)]
pub struct AdaptReport {
    pub command: &'static str,
    pub out: PathBuf,
    pub scale: f64,
    pub crop: CropRect,
    pub height: usize,
    pub width: usize,
}

pub fn cmd_adapt(
    fp_path: &Path,
    scale: f64,
    crop: CropRect,
    out: &Path,
    cfg: &RunConfig,
    report: Option<&Path>,
) -> CliResult<()> {
    let (fp, side) = Fingerprint::load(fp_path)?;
    if fp.adaptation.is_some() {
        return Err(eisprnu::Error::InvalidArgument(format!(
            "{} is already adapted",
            fp_path.display()
        ))
        .into());
    }
    let k = eisprnu::imagecore::adapt_fingerprint(&fp.k_hat, scale, &crop)?;
    let adapted = Fingerprint {
        k_hat: k,
        n_images: fp.n_images,
        adaptation: Some(Adaptation { scale, crop }),
    };
    let device = side.as_ref().map_or("device".to_string(), |s| s.device_id.clone());
    let sigma0_sq = side.as_ref().map_or(cfg.sigma0_sq, |s| s.sigma0_sq);
    adapted.save(out, &device, sigma0_sq)?;
    let (h, w) = adapted.dims();
    println!("adapted fingerprint {h}x{w} (scale {scale}) -> {}", out.display());
    write_report(
        &AdaptReport {
            command: "adapt",
            out: out.to_path_buf(),
            scale,
            crop,
            height: h,
            width: w,
        },
        report,
    )
}

#[derive(Debug, Clone, Serialize)]
pub struct RegisterOutcome {
    pub scale: f64,
    pub crop: CropRect,
    pub pce: f64,
    pub inconclusive: bool,
    pub scales_evaluated: usize,
}

fn scale_grid(lo: f64, hi: f64, step: f64) -> Vec<f64> {
    let n = ((hi - lo) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| round_to(lo + i as f64 * step, step)).collect()
}

fn round_to(v: f64, step: f64) -> f64 {
    // Keeps grid values free of accumulated binary noise (1.333, not 1.3330000000000002).
    let digits = (-step.log10()).ceil().max(0.0) as i32 + 1;
    let f = 10f64.powi(digits);
    (v * f).round() / f
}

/// Coarse-to-fine scale sweep maximizing PCE of the frame residual against
/// the down-scaled fingerprint; the crop follows the correlation peak.
pub fn register_scale(
    k: &Image,
    frame: &Image,
    rc: &RegisterConfig,
    sigma0_sq: f64,
) -> CliResult<RegisterOutcome> {
    let w = prnu::residual(frame, sigma0_sq)?;
    let (fh, fw) = frame.dims();
    let eval = |s: &f64| -> Option<(f64, f64, (usize, usize))> {
        let scaled = downscale(k, *s).ok()?;
        if scaled.height() < fh || scaled.width() < fw {
            return None;
        }
        let rep = PreparedFingerprint::new(&scaled).ok()?.pce(&w, ShiftPolicy::Search).ok()?;
        Some((*s, rep.pce, rep.peak))
    };
    let best_of = |grid: &[f64]| {
        grid.par_iter()
            .map(eval)
            .collect::<Vec<_>>()
            .into_iter()
            .flatten()
            .fold(None, |b: Option<(f64, f64, (usize, usize))>, c| match b {
                Some(b) if b.1 >= c.1 => Some(b),
                _ => Some(c),
            })
    };
    let coarse = scale_grid(rc.min_scale, rc.max_scale, rc.coarse_step);
    let (c_scale, ..) = best_of(&coarse).ok_or_else(|| {
        eisprnu::Error::InvalidDimensions(format!(
            "fingerprint {}x{} is smaller than the {fh}x{fw} frame at every scale",
            k.height(),
            k.width()
        ))
    })?;
    let lo = (c_scale - rc.coarse_step).max(rc.min_scale);
    let hi = (c_scale + rc.coarse_step).min(rc.max_scale);
    let fine = scale_grid(lo, hi, rc.fine_step);
    let (scale, pce, peak) = best_of(&fine).expect("coarse optimum lies on the fine grid");
    let crop = CropRect::new(peak.1, peak.0, peak.1 + fw, peak.0 + fh)?;
    Ok(RegisterOutcome {
        scale,
        crop,
        pce,
        inconclusive: pce < rc.min_pce,
        scales_evaluated: coarse.len() + fine.len(),
    })
}

#[derive(Debug, Serialize)]
pub struct RegisterReport {
    pub command: &'static str,
    #[serde(flatten)]
    pub outcome: RegisterOutcome,
    pub anchor_index: usize,
    pub config: RunConfig,
    pub seed: u64,
    pub timings: Timings,
}

pub fn cmd_register(
    fp_path: &Path,
    manifest: &Path,
    out: Option<&Path>,
    cfg: &RunConfig,
    report: Option<&Path>,
) -> CliResult<RegisterOutcome> {
    let start = Instant::now();
    let (fp, side) = Fingerprint::load(fp_path)?;
    let records = selector::parse_manifest(manifest)?;
    let sel = selector::select_anchor(&records, &FileSource, cfg.sanitize_threshold, &cfg.matching)?;
    let anchor = FileSource.load(&sel.window[0])?;
    let pool = worker_pool(cfg.workers)?;
    let outcome = pool.install(|| register_scale(&fp.k_hat, &anchor, &cfg.register, cfg.sigma0_sq))?;
    println!(
        "scale {:.3} crop ({},{})-({},{}) pce {:.1}{}",
        outcome.scale,
        outcome.crop.w_tl,
        outcome.crop.h_tl,
        outcome.crop.w_br,
        outcome.crop.h_br,
        outcome.pce,
        if outcome.inconclusive { " [inconclusive]" } else { "" }
    );
    if let (Some(out), false) = (out, outcome.inconclusive) {
        let k = eisprnu::imagecore::adapt_fingerprint(&fp.k_hat, outcome.scale, &outcome.crop)?;
        let adapted = Fingerprint {
            k_hat: k,
            n_images: fp.n_images,
            adaptation: Some(Adaptation { scale: outcome.scale, crop: outcome.crop }),
        };
        let device = side.as_ref().map_or("device".to_string(), |s| s.device_id.clone());
        adapted.save(out, &device, cfg.sigma0_sq)?;
    }
    let mut timings = Timings::new();
    timings.insert("total_ms", ms(start));
    write_report(
        &RegisterReport {
            command: "register",
            outcome: outcome.clone(),
            anchor_index: sel.anchor_index,
            config: cfg.clone(),
            seed: cfg.seed,
            timings,
        },
        report,
    )?;
    if outcome.inconclusive {
        return Err(CliError::Inconclusive(format!(
            "best PCE {:.1} is below {}",
            outcome.pce, cfg.register.min_pce
        )));
    }
    Ok(outcome)
}

#[derive(Debug, Clone, Serialize)]
pub struct AnchorReport {
    pub index: usize,
    pub gop: usize,
    pub fallback: bool,
    pub momenta: Vec<PairMomentum>,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameReport {
    pub index: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub theta: f64,
    pub dx: f64,
    pub dy: f64,
    pub seeded: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct AnalyzeReport {
    pub command: &'static str,
    pub decision: bool,
    pub mean_gamma: f64,
    pub tau: f64,
    pub frames: Vec<FrameReport>,
    pub anchor: AnchorReport,
    pub notes: Vec<String>,
    pub fingerprint: PathBuf,
    pub manifest: PathBuf,
    pub config: RunConfig,
    pub seed: u64,
    pub timings: Timings,
}

fn make_inverter(k: &Image, cfg: &RunConfig) -> CliResult<Inverter> {
    let backend = batcheval::backends(cfg.workers)?.get(&cfg.backend)?;
    Ok(Inverter::new(k, cfg.search.clone(), cfg.sigma0_sq, backend, cfg.matching)?)
}

pub fn cmd_analyze(
    fp_path: &Path,
    manifest: &Path,
    cfg: &RunConfig,
    report: Option<&Path>,
) -> CliResult<AnalyzeReport> {
    let start = Instant::now();
    let (fp, _) = Fingerprint::load(fp_path)?;
    let records = selector::parse_manifest(manifest)?;
    let t_sel = Instant::now();
    let sel = selector::select_anchor(&records, &FileSource, cfg.sanitize_threshold, &cfg.matching)?;
    let selection_ms = ms(t_sel);
    let frames = sel
        .window
        .iter()
        .map(|r| FileSource.load(r))
        .collect::<eisprnu::Result<Vec<_>>>()?;
    let inverter = make_inverter(&fp.k_hat, cfg)?;
    let t_inv = Instant::now();
    let gamma = inverter.run_window(&frames)?;
    let inversion_ms = ms(t_inv);
    let d = decide(&gamma, cfg.tau)?;

    let mut notes = Vec::new();
    if sel.fallback {
        notes.push("no momentum defined between I-frames; anchor is the first I-frame".to_string());
    }
    if !sel.window.last().is_some_and(|r| r.is_intra()) || sel.window.len() == 1 {
        notes.push("window ends at stream end (no closing I-frame)".to_string());
    }
    let frame_reports: Vec<FrameReport> = sel
        .window
        .iter()
        .zip(&gamma.frames)
        .map(|(r, f)| FrameReport {
            index: r.index,
            gamma: f.gamma,
            lambda: f.params.lambda,
            theta: f.params.theta,
            dx: f.params.dx,
            dy: f.params.dy,
            seeded: f.seeded,
        })
        .collect();
    println!(
        "decision: {} (mean gamma {:.2}, tau {}) over {} frames from anchor {}",
        if d.decision { "MATCH" } else { "no match" },
        d.mean_gamma,
        d.tau,
        frame_reports.len(),
        sel.anchor_index
    );
    for f in &frame_reports {
        println!(
            "  frame {:>5}  gamma {:>10.2}  lambda {:.4}  theta {:+.4}{}",
            f.index,
            f.gamma,
            f.lambda,
            f.theta,
            if f.seeded { "  seeded" } else { "" }
        );
    }
    for n in &notes {
        println!("note: {n}");
    }
    let mut timings = Timings::new();
    timings.insert("selection_ms", selection_ms);
    timings.insert("inversion_ms", inversion_ms);
    timings.insert("total_ms", ms(start));
    let rep = AnalyzeReport {
        command: "analyze",
        decision: d.decision,
        mean_gamma: d.mean_gamma,
        tau: d.tau,
        frames: frame_reports,
        anchor: AnchorReport {
            index: sel.anchor_index,
            gop: sel.anchor_gop,
            fallback: sel.fallback,
            momenta: sel.momenta.clone(),
        },
        notes,
        fingerprint: fp_path.to_path_buf(),
        manifest: manifest.to_path_buf(),
        config: cfg.clone(),
        seed: cfg.seed,
        timings,
    };
    write_report(&rep, report)?;
    Ok(rep)
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentumReport {
    pub command: &'static str,
    pub anchor: AnchorReport,
    pub window: Vec<usize>,
    pub config: RunConfig,
    pub seed: u64,
    pub timings: Timings,
}

pub fn cmd_momentum(manifest: &Path, cfg: &RunConfig, report: Option<&Path>) -> CliResult<MomentumReport> {
    let start = Instant::now();
    let records = selector::parse_manifest(manifest)?;
    let sel = selector::select_anchor(&records, &FileSource, cfg.sanitize_threshold, &cfg.matching)?;
    if sel.momenta.is_empty() {
        println!("fewer than two I-frames: anchor is frame {}", sel.anchor_index);
    } else {
        println!("{:>8} {:>8} {:>12}", "from", "to", "momentum");
        for m in &sel.momenta {
            match m.momentum {
                Some(v) => println!("{:>8} {:>8} {:>12.3}", m.from, m.to, v),
                None => println!("{:>8} {:>8} {:>12}", m.from, m.to, "-"),
            }
        }
        println!(
            "anchor: frame {} (GOP {}){}",
            sel.anchor_index,
            sel.anchor_gop,
            if sel.fallback { ", first I-frame fallback" } else { "" }
        );
    }
    let mut timings = Timings::new();
    timings.insert("total_ms", ms(start));
    let rep = MomentumReport {
        command: "momentum",
        anchor: AnchorReport {
            index: sel.anchor_index,
            gop: sel.anchor_gop,
            fallback: sel.fallback,
            momenta: sel.momenta.clone(),
        },
        window: sel.window.iter().map(|r| r.index).collect(),
        config: cfg.clone(),
        seed: cfg.seed,
        timings,
    };
    write_report(&rep, report)?;
    Ok(rep)
}

#[derive(Debug, Serialize)]
struct SynthTruth<'a> {
    spec: &'a SynthSpec,
    adaptation: Option<Adaptation>,
}

pub fn cmd_synth(spec: &SynthSpec, out_dir: &Path, cfg: &RunConfig, report: Option<&Path>) -> CliResult<()> {
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let start = Instant::now();
    std::fs::create_dir_all(out_dir).map_err(|e| eisprnu::Error::Io {
        path: out_dir.to_path_buf(),
        source: e,
    })?;
    let seq = synth::make_sequence(spec)?;
    for (rec, frame) in seq.manifest.iter().zip(&seq.frames) {
        save_png(frame, out_dir.join(&rec.path), BitDepth::Eight)?;
    }
    selector::write_manifest(&seq.manifest, out_dir.join("manifest.json"))?;
    let truth = Fingerprint {
        adaptation: None,
        ..seq.truth.clone()
    };
    truth.save(out_dir.join("fingerprint.prnu"), "synthetic", cfg.sigma0_sq)?;
    let meta = SynthTruth {
        spec,
        adaptation: seq.truth.adaptation,
    };
    let meta_path = out_dir.join("synth.json");
    std::fs::write(
        &meta_path,
        serde_json::to_string_pretty(&meta).map_err(eisprnu::Error::from)? + "\n",
    )
    .map_err(|e| eisprnu::Error::Io { path: meta_path, source: e })?;
    println!(
        "wrote {} frames of {}x{} to {}",
        seq.frames.len(),
        spec.dims.0,
        spec.dims.1,
        out_dir.display()
    );
    let mut timings = Timings::new();
    timings.insert("total_ms", ms(start));
    #[derive(Serialize)]
    struct Rep<'a> {
        command: &'static str,
        out_dir: &'a Path,
        frames: usize,
        spec: &'a SynthSpec,
        seed: u64,
        timings: Timings,
    }
    write_report(
        &Rep {
            command: "synth",
            out_dir,
            frames: seq.frames.len(),
            spec,
            seed: spec.seed,
            timings,
        },
        report,
    )
}

#[derive(Debug, Serialize)]
pub struct BenchCliReport {
    pub command: &'static str,
    pub size: usize,
    pub residual_mode: String,
    #[serde(flatten)]
    pub timing: batcheval::BenchReport,
    /// Largest relative PCE gap between warp_residual and
    /// denoise_per_candidate over the same candidates.
    pub warp_residual_max_rel_dev: f64,
    pub config: RunConfig,
    pub seed: u64,
}

pub fn cmd_bench(size: usize, grid: usize, cfg: &RunConfig, report: Option<&Path>) -> CliResult<BenchCliReport> {
    if grid == 0 {
        return Err(CliError::Usage("grid must be at least 1".into()));
    }
    let spec = SynthSpec {
        dims: (size, size),
        seed: cfg.seed,
        warps: vec![RestrictedParams::new(1.01, 0.1, 0.0, 0.0)?],
        ..Default::default()
    };
    spec.validate().map_err(|e| CliError::Usage(e.to_string()))?;
    let seq = synth::make_sequence(&spec)?;
    let fp = Arc::new(PreparedFingerprint::new(&seq.frame_k)?);
    let half = (grid / 2) as f64;
    let mut cands = Vec::with_capacity(grid * grid);
    for i in 0..grid {
        for j in 0..grid {
            let l = 1.0 + (i as f64 - half) * cfg.search.lambda_step0;
            let t = (j as f64 - half) * cfg.search.theta_step0;
            cands.push(RestrictedParams::new(l, t, 0.0, 0.0)?.to_matrix());
        }
    }
    let strategies = batcheval::residual_strategies();
    let batch = |mode: &str| -> CliResult<CandidateBatch> {
        Ok(CandidateBatch::new(&seq.frames[0], fp.clone(), cands.clone(), strategies.get(mode)?, cfg.sigma0_sq)?)
    };
    let main = batch(&cfg.search.residual_mode)?;
    let timing = batcheval::bench(&main, cfg.workers)?;

    let exact = batcheval::SequentialBackend;
    let a = batcheval::BatchBackend::evaluate(&exact, &batch(batcheval::DENOISE_PER_CANDIDATE)?);
    let b = batcheval::BatchBackend::evaluate(&exact, &batch(batcheval::WARP_RESIDUAL)?);
    let dev = a
        .iter()
        .zip(&b)
        .filter_map(|(x, y)| Some(batcheval::rel_diff(x.as_ref().ok()?.pce, y.as_ref().ok()?.pce)))
        .fold(0.0, f64::max);
    println!(
        "{} candidates at {size}x{size}: sequential {:.1} ms, parallel({}) {:.1} ms, speedup {:.2}",
        timing.candidates, timing.sequential_ms, timing.workers, timing.parallel_ms, timing.speedup
    );
    println!("warp_residual max relative PCE deviation: {dev:.3e}");
    let rep = BenchCliReport {
        command: "bench",
        size,
        residual_mode: cfg.search.residual_mode.clone(),
        timing,
        warp_residual_max_rel_dev: dev,
        config: cfg.clone(),
        seed: cfg.seed,
    };
    write_report(&rep, report)?;
    Ok(rep)
}
