//! End-to-end acceptance checks on synthetic data. Prints one PASS/FAIL
//! line per criterion and exits non-zero if any fails.

use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use eisprnu::batcheval::{self, BatchBackend, CandidateBatch, ParallelBackend, SequentialBackend};
use eisprnu::features::{estimate_homography, MatchConfig, PointPair, RansacConfig};
use eisprnu::imagecore::{CropRect, Image};
use eisprnu::inversion::{Inverter, SearchConfig, DEFAULT_TAU};
use eisprnu::prnu::{self, build_fingerprint, PreparedFingerprint};
use eisprnu::synth::{self, derive_seed, gaussian_field, make_sequence, SynthSpec, Texture};
use eisprnu::warp::{RestrictedParams, TransformParams};

type Check = Result<(bool, String), String>;

const SIGMA0_SQ: f64 = 9.0;

fn rel(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m == 0.0 { 0.0 } else { (a - b).abs() / m }
}

fn workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn cli(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_eisprnu"))
        .args(args)
        .output()
        .map_err(err)?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!(
            "eisprnu {} exited {:?}: {}",
            args.join(" "),
            o.status.code(),
            String::from_utf8_lossy(&o.stderr)
        ))
    }
}

fn read_json(p: &Path) -> Result<serde_json::Value, String> {
    serde_json::from_str(&std::fs::read_to_string(p).map_err(err)?).map_err(err)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn c1_oracle() -> Check {
    let mut worst = 0.0f64;
    let mut peak_mismatch = 0;
    for t in 0..50u64 {
        let k = gaussian_field(64, 64, derive_seed(1, t));
        let noise = gaussian_field(64, 64, derive_seed(2, t));
        let w = if t % 2 == 0 {
            Image::from_fn(64, 64, |r, c| 0.2 * k.get(r, c) + noise.get(r, c))
        } else {
            let (d1, d2) = ((t as usize * 7) % 17, (t as usize * 11) % 25);
            let crop = CropRect::new(d2, d1, d2 + 40, d1 + 48).map_err(err)?;
            let planted = k.crop(&crop).map_err(err)?;
            Image::from_fn(48, 40, |r, c| 0.3 * planted.get(r, c) + noise.get(r, c))
        };
        let fast = prnu::pce(&k, &w).map_err(err)?;
        let slow = synth::oracle_pce(&k, &w).map_err(err)?;
        worst = worst.max(rel(fast.pce, slow.pce));
        if fast.peak != slow.peak {
            peak_mismatch += 1;
        }
    }
    Ok((
        worst <= 1e-6 && peak_mismatch == 0,
        format!("max rel diff {worst:.2e}, peak mismatches {peak_mismatch}/50"),
    ))
}

fn c2_batch() -> Check {
    let seq = make_sequence(&SynthSpec {
        dims: (256, 256),
        seed: 3,
        warps: vec![RestrictedParams::new(1.01, 0.1, 0.0, 0.0).map_err(err)?],
        ..Default::default()
    })
    .map_err(err)?;
    let fp = Arc::new(PreparedFingerprint::new(&seq.frame_k).map_err(err)?);
    let mut cands = Vec::new();
    for i in 0..11 {
        for j in 0..11 {
            let l = 0.95 + 0.01 * i as f64;
            let th = -0.5 + 0.1 * j as f64;
            cands.push(RestrictedParams::new(l, th, 0.0, 0.0).map_err(err)?.to_matrix());
        }
    }
    let strategy = batcheval::residual_strategies()
        .get(batcheval::DENOISE_PER_CANDIDATE)
        .map_err(err)?;
    let batch = CandidateBatch::new(&seq.frames[0], fp, cands, strategy, SIGMA0_SQ).map_err(err)?;
    let n = workers().max(2);
    let seq_out = SequentialBackend.evaluate(&batch);
    let par_out = ParallelBackend::new(n).map_err(err)?.evaluate(&batch);
    let mut worst = 0.0f64;
    for (a, b) in seq_out.iter().zip(&par_out) {
        let (a, b) = (a.as_ref().map_err(err)?, b.as_ref().map_err(err)?);
        if a.peak != b.peak {
            return Ok((false, format!("peak differs: {:?} vs {:?}", a.peak, b.peak)));
        }
        worst = worst.max(rel(a.pce, b.pce));
    }
    Ok((
        seq_out.len() == 121 && par_out.len() == 121 && worst <= 1e-9,
        format!("121 candidates, {n} workers, max rel diff {worst:.2e}"),
    ))
}

fn c3_recovery() -> Check {
    let mut ok = 0;
    let mut misses = Vec::new();
    let mut case = 0u64;
    for lambda in [1.0, 1.01, 1.03] {
        for theta in [0.0, 0.2, -0.4] {
            case += 1;
            let seq = make_sequence(&SynthSpec {
                dims: (256, 256),
                fingerprint_strength: 0.05,
                seed: 100 + case,
                warps: vec![RestrictedParams::new(lambda, theta, 0.0, 0.0).map_err(err)?],
                ..Default::default()
            })
            .map_err(err)?;
            let inv = Inverter::new(
                &seq.frame_k,
                SearchConfig::default(),
                SIGMA0_SQ,
                Arc::new(ParallelBackend::new(workers()).map_err(err)?),
                MatchConfig::default(),
            )
            .map_err(err)?;
            let c = inv.correction(&seq.frames[0], None).map_err(err)?;
            let (dl, dt) = ((c.params.lambda - lambda).abs(), (c.params.theta - theta).abs());
            if dl <= 0.001 + 1e-12 && dt <= 0.01 + 1e-12 {
                ok += 1;
            } else {
                misses.push(format!("({lambda},{theta})->({:.4},{:.3})", c.params.lambda, c.params.theta));
            }
        }
    }
    Ok((ok >= 8, format!("{ok}/9 recovered {}", misses.join(" "))))
}

/// Reference fingerprint estimated from 20 flat frames of the sensor
/// behind `seed`.
fn flat_field_fingerprint(seed: u64, dims: (usize, usize)) -> Result<Image, String> {
    let flats = make_sequence(&SynthSpec {
        dims,
        seed,
        texture: Texture::Flat,
        warps: vec![RestrictedParams::IDENTITY; 20],
        ..Default::default()
    })
    .map_err(err)?;
    Ok(build_fingerprint(&flats.frames, SIGMA0_SQ).map_err(err)?.k_hat)
}

fn c4_separation() -> Check {
    let trials = 200u64;
    let dims = (64, 64);
    let lambdas = [0.99, 1.0, 1.01];
    let thetas = [-0.1, 0.0, 0.1];
    let backend: Arc<dyn BatchBackend> = Arc::new(ParallelBackend::new(workers()).map_err(err)?);
    let (mut tp, mut fp) = (0, 0);
    let (mut h1_min, mut h0_max) = (f64::INFINITY, f64::NEG_INFINITY);
    for t in 0..trials {
        let seed = derive_seed(4000, t);
        let i = t as usize;
        let warps = vec![
            RestrictedParams::new(lambdas[i % 3], thetas[(i / 3) % 3], 0.0, 0.0).map_err(err)?,
            RestrictedParams::new(lambdas[(i + 1) % 3], thetas[(i / 9) % 3], 0.0, 0.0).map_err(err)?,
        ];
        let video = make_sequence(&SynthSpec {
            dims,
            seed,
            fingerprint_strength: 0.05,
            texture: Texture::Textured,
            warps,
            ..Default::default()
        })
        .map_err(err)?;
        let own = flat_field_fingerprint(seed, dims)?;
        let foreign = flat_field_fingerprint(derive_seed(9000, t), dims)?;
        for (k, is_h1) in [(own, true), (foreign, false)] {
            let inv = Inverter::new(&k, SearchConfig::default(), SIGMA0_SQ, backend.clone(), MatchConfig::default())
                .map_err(err)?;
            let g = inv.run_window(&video.frames).map_err(err)?;
            let mean = g.mean().ok_or("empty window")?;
            if is_h1 {
                h1_min = h1_min.min(mean);
                tp += (mean > DEFAULT_TAU) as usize;
            } else {
                h0_max = h0_max.max(mean);
                fp += (mean > DEFAULT_TAU) as usize;
            }
        }
    }
    let tpr = tp as f64 / trials as f64;
    let fpr = fp as f64 / trials as f64;
    Ok((
        tpr >= 0.90 && fpr <= 0.05,
        format!("TPR {tpr:.3}, FPR {fpr:.3} at tau {DEFAULT_TAU} (min H1 {h1_min:.1}, max H0 {h0_max:.1})"),
    ))
}

fn c5_anchor() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    // I-frames at 0, 2, 4, 6 move by 5, 1.2 and 8 px.
    let motion = [(0.0, 0.0), (1.5, 2.0), (3.0, 4.0), (3.36, 4.48), (3.72, 4.96), (3.72, 8.96), (3.72, 12.96)];
    let spec = SynthSpec {
        dims: (512, 512),
        texture: Texture::Textured,
        warps: vec![RestrictedParams::IDENTITY; motion.len()],
        scene_motion: motion.to_vec(),
        gop_size: 2,
        seed: 5,
        ..Default::default()
    };
    let spec_path = dir.path().join("spec.json");
    std::fs::write(&spec_path, serde_json::to_string(&spec).map_err(err)?).map_err(err)?;
    let video = dir.path().join("video");
    cli(&["synth", p(&video), "--spec", p(&spec_path)])?;
    let rep = dir.path().join("momentum.json");
    cli(&["momentum", p(&video.join("manifest.json")), "--report", p(&rep)])?;
    let r = read_json(&rep)?;
    let planted = [5.0, 1.2, 8.0];
    let measured: Vec<Option<f64>> = r["anchor"]["momenta"]
        .as_array()
        .ok_or("no momenta")?
        .iter()
        .map(|m| m["momentum"].as_f64())
        .collect();
    let close = measured.len() == 3
        && measured
            .iter()
            .zip(planted)
            .all(|(m, want)| m.is_some_and(|v| (v - want).abs() <= 0.5));
    let (index, gop) = (r["anchor"]["index"].as_u64(), r["anchor"]["gop"].as_u64());
    // Second GOP of the stream; GOP ids count from zero.
    Ok((
        close && index == Some(2) && gop == Some(1),
        format!("momenta {measured:?}, anchor frame {index:?} (GOP id {gop:?})"),
    ))
}

fn c6_seeding() -> Check {
    let backend: Arc<dyn BatchBackend> = Arc::new(ParallelBackend::new(workers()).map_err(err)?);
    let (mut with, mut without) = (0.0, 0.0);
    let mut wins = 0;
    for t in 0..20u64 {
        let warps = (0..5)
            .map(|v| RestrictedParams::new(1.0 + 0.0237 * v as f64, 0.013 * v as f64, 0.0, 0.0))
            .collect::<eisprnu::Result<Vec<_>>>()
            .map_err(err)?;
        let seq = make_sequence(&SynthSpec {
            dims: (96, 96),
            texture: Texture::Textured,
            warps,
            seed: derive_seed(6000, t),
            ..Default::default()
        })
        .map_err(err)?;
        let run = |seeding: bool| -> Result<f64, String> {
            let cfg = SearchConfig { coregistration_seeding: seeding, ..Default::default() };
            let inv = Inverter::new(&seq.frame_k, cfg, SIGMA0_SQ, backend.clone(), MatchConfig::default())
                .map_err(err)?;
            inv.run_window(&seq.frames).map_err(err)?.mean().ok_or_else(|| "empty".to_string())
        };
        let (a, b) = (run(true)?, run(false)?);
        with += a;
        without += b;
        wins += (a >= b) as usize;
    }
    Ok((
        with >= without,
        format!("mean gamma seeded {:.1} vs unseeded {:.1}, seeded >= unseeded in {wins}/20", with / 20.0, without / 20.0),
    ))
}

fn c7_homography() -> Check {
    let mut ok = 0;
    let mut worst = 0.0f64;
    for t in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(7000, t));
        let truth = TransformParams::from_matrix([
            [1.0 + rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), rng.random_range(-20.0..20.0)],
            [rng.random_range(-0.05..0.05), 1.0 + rng.random_range(-0.05..0.05), rng.random_range(-20.0..20.0)],
            [rng.random_range(-1e-4..1e-4), rng.random_range(-1e-4..1e-4), 1.0],
        ])
        .map_err(err)?;
        let noise = Normal::new(0.0, 0.3).map_err(err)?;
        let mut pairs = Vec::new();
        let mut inlier_src = Vec::new();
        for i in 0..100 {
            let from = [rng.random_range(0.0..512.0), rng.random_range(0.0..512.0)];
            let to = if i % 10 < 3 {
                [rng.random_range(0.0..512.0), rng.random_range(0.0..512.0)]
            } else {
                inlier_src.push(from);
                let (x, y) = truth.map_point(from[0], from[1]);
                [x + noise.sample(&mut rng), y + noise.sample(&mut rng)]
            };
            pairs.push(PointPair::new(from, to));
        }
        let cfg = RansacConfig { seed: t, ..Default::default() };
        let fit = estimate_homography(&pairs, &cfg).map_err(err)?;
        let e = inlier_src
            .iter()
            .map(|&q| {
                let (a, b) = (fit.h.map_point(q[0], q[1]), truth.map_point(q[0], q[1]));
                (a.0 - b.0).hypot(a.1 - b.1)
            })
            .fold(0.0, f64::max);
        worst = worst.max(e);
        ok += (e <= 1.0) as usize;
    }
    Ok((ok >= 95, format!("{ok}/100 within 1 px (worst {worst:.3} px)")))
}

fn c8_register() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let video = dir.path().join("video");
    cli(&["synth", p(&video), "--size", "128x128", "--frames", "1", "--sensor-scale", "1.333", "--seed", "8"])?;
    let rep = dir.path().join("register.json");
    cli(&[
        "register",
        p(&video.join("fingerprint.prnu")),
        p(&video.join("manifest.json")),
        "--report",
        p(&rep),
    ])?;
    let r = read_json(&rep)?;
    let scale = r["scale"].as_f64().ok_or("no scale")?;
    Ok(((scale - 1.333).abs() <= 0.005, format!("scale {scale} (pce {:.1})", r["pce"].as_f64().unwrap_or(f64::NAN))))
}

fn c9_determinism() -> Check {
    let dir = tempfile::tempdir().map_err(err)?;
    let video = dir.path().join("video");
    cli(&["synth", p(&video), "--size", "64x64", "--frames", "3", "--gop-size", "2", "--lambda-drift", "0.01", "--seed", "9"])?;
    let mut reports = Vec::new();
    for name in ["a.json", "b.json"] {
        let rep = dir.path().join(name);
        cli(&[
            "analyze",
            p(&video.join("fingerprint.prnu")),
            p(&video.join("manifest.json")),
            "--seed",
            "5",
            "--report",
            p(&rep),
        ])?;
        let mut v = read_json(&rep)?;
        v.as_object_mut().ok_or("report is not an object")?.remove("timings");
        reports.push(serde_json::to_string(&v).map_err(err)?);
    }
    Ok((reports[0] == reports[1], format!("{} bytes without timings", reports[0].len())))
}

fn c10_denoiser() -> Check {
    let flat = prnu::residual(&Image::filled(64, 64, 77.0), SIGMA0_SQ).map_err(err)?;
    let zero = flat.pixels().iter().all(|&v| v == 0.0);
    let mut worst = 0.0f64;
    let mut sum = 0.0;
    for t in 0..100u64 {
        let g = gaussian_field(64, 64, derive_seed(10_000, t));
        let noisy = g.map(|v| 128.0 + 3.0 * v);
        let ratio = prnu::denoise(&noisy, SIGMA0_SQ).map_err(err)?.variance() / noisy.variance();
        worst = worst.max(ratio);
        sum += ratio;
    }
    Ok((
        zero && sum / 100.0 < 0.25,
        format!("constant residual zero: {zero}; variance ratio mean {:.4}, worst {worst:.4}", sum / 100.0),
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Check); 10] = [
        ("C1 FFT PCE equals brute-force oracle", c1_oracle),
        ("C2 batch evaluation equals sequential", c2_batch),
        ("C3 correction recovers planted warps", c3_recovery),
        ("C4 decision separation at tau 19.5", c4_separation),
        ("C5 anchor selection by momentum", c5_anchor),
        ("C6 coregistration seeding helps", c6_seeding),
        ("C7 homography under 30% outliers", c7_homography),
        ("C8 fingerprint scale registration", c8_register),
        ("C9 analyze reports are deterministic", c9_determinism),
        ("C10 denoiser sanity", c10_denoiser),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (name, f) in criteria {
        if !filter.is_empty() && !filter.iter().any(|x| name.starts_with(&format!("{x} "))) {
            continue;
        }
        let start = Instant::now();
        let (pass, detail) = match f() {
            Ok(r) => r,
            Err(e) => (false, format!("error: {e}")),
        };
        failed += (!pass) as usize;
        println!(
            "{} {name}: {detail} [{:.1}s]",
            if pass { "PASS" } else { "FAIL" },
            start.elapsed().as_secs_f64()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
