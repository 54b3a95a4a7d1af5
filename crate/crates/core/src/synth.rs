//! Synthetic stabilized sequences with planted fingerprints, a direct-loop
//! PCE reference, and an H0/H1 trial harness.

use std::path::PathBuf;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{adapt_fingerprint, scaled_dims, CropRect, Image};
use crate::prnu::{self, Adaptation, Fingerprint, PceReport, PreparedFingerprint, ShiftPolicy};
use crate::selector::{FrameKind, FrameRecord};
use crate::warp::{apply_transform, invert, RestrictedParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Texture {
    #[default]
    Flat,
    Gradient,
    Textured,
}

impl std::str::FromStr for Texture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "flat" => Ok(Texture::Flat),
            "gradient" => Ok(Texture::Gradient),
            "textured" => Ok(Texture::Textured),
            _ => Err(Error::InvalidArgument(format!(
                "texture '{s}' (expected flat, gradient or textured)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub dims: (usize, usize),
    pub fingerprint_strength: f64,
    pub noise_sigma: f64,
    /// Correcting transform of each frame; the frame count is its length.
    pub warps: Vec<RestrictedParams>,
    pub texture: Texture,
    pub seed: u64,
    /// Scene translation `(dx, dy)` per frame; missing entries are zero.
    pub scene_motion: Vec<(f64, f64)>,
    /// Frames per GOP; 0 makes frame 0 the only I-frame.
    pub gop_size: usize,
    /// Ratio between the sensor and the video raster. Above 1 the truth
    /// fingerprint has sensor resolution and frames see its down-scaled,
    /// centre-cropped version.
    pub sensor_scale: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            dims: (128, 128),
            fingerprint_strength: 0.05,
            noise_sigma: 2.0,
            warps: vec![RestrictedParams::IDENTITY],
            texture: Texture::Flat,
            seed: 0,
            scene_motion: Vec::new(),
            gop_size: 0,
            sensor_scale: 1.0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let (h, w) = self.dims;
        if h < 64 || w < 64 {
            return Err(Error::InvalidDimensions(format!("synthetic frames {h}x{w} below 64x64")));
        }
        if !(self.fingerprint_strength >= 0.0) || !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidArgument(
                "strength and noise must be non-negative".into(),
            ));
        }
        if self.warps.is_empty() {
            return Err(Error::InvalidArgument("at least one frame warp is required".into()));
        }
        if !(self.sensor_scale >= 1.0) {
            return Err(Error::InvalidArgument("sensor_scale must be at least 1".into()));
        }
        for p in &self.warps {
            p.validate()?;
        }
        Ok(())
    }
}

/// Independent RNG stream for item `index` under `seed`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng.next_u64()
}

pub fn gaussian_field(h: usize, w: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(h, w, |_, _| rng.sample::<f64, _>(StandardNormal) as f32)
}

const CELL: f64 = 12.0;
const CELL_REACH: i64 = 3;

/// Analytic scene: Gaussian blobs on a jittered grid over a bounded plane,
/// so shifted views can be rendered exactly at sub-pixel offsets.
#[derive(Debug, Clone)]
pub struct Scene {
    texture: Texture,
    h: usize,
    w: usize,
    origin: (i64, i64),
    cols: usize,
    blobs: Vec<(f64, f64, f64, f64)>,
}

impl Scene {
    /// Covers `[-margin, h+margin) × [-margin, w+margin)`.
    pub fn new(texture: Texture, h: usize, w: usize, margin: f64, seed: u64) -> Self {
        let lo = -((margin / CELL).ceil() as i64) - CELL_REACH;
        let rows = ((h as f64 + 2.0 * margin) / CELL).ceil() as usize + 2 * CELL_REACH as usize + 2;
        let cols = ((w as f64 + 2.0 * margin) / CELL).ceil() as usize + 2 * CELL_REACH as usize + 2;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut blobs = Vec::new();
        if texture == Texture::Textured {
            for i in 0..rows {
                for j in 0..cols {
                    let cy = (lo + i as i64) as f64 * CELL + rng.random_range(0.0..CELL);
                    let cx = (lo + j as i64) as f64 * CELL + rng.random_range(0.0..CELL);
                    let s = rng.random_range(2.0..5.0);
                    let a = rng.random_range(15.0..45.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 };
                    blobs.push((cy, cx, s, a));
                }
            }
        }
        Self {
            texture,
            h,
            w,
            origin: (lo, lo),
            cols,
            blobs,
        }
    }

    /// Scene luminance at continuous `(y, x)`.
    pub fn value(&self, y: f64, x: f64) -> f64 {
        match self.texture {
            Texture::Flat => 128.0,
            Texture::Gradient => {
                60.0 + 120.0 * x / self.w as f64 + 30.0 * y / self.h as f64
            }
            Texture::Textured => {
                let ci = (y / CELL).floor() as i64 - self.origin.0;
                let cj = (x / CELL).floor() as i64 - self.origin.1;
                let rows = (self.blobs.len() / self.cols) as i64;
                let mut v = 128.0;
                for i in (ci - CELL_REACH).max(0)..=(ci + CELL_REACH).min(rows - 1) {
                    for j in (cj - CELL_REACH).max(0)..=(cj + CELL_REACH).min(self.cols as i64 - 1) {
                        let (by, bx, s, a) = self.blobs[i as usize * self.cols + j as usize];
                        let d2 = (y - by).powi(2) + (x - bx).powi(2);
                        v += a * (-d2 / (2.0 * s * s)).exp();
                    }
                }
                v
            }
        }
    }

    /// `h×w` view with the scene translated by `(dx, dy)`.
    pub fn render(&self, dx: f64, dy: f64) -> Image {
        Image::from_fn(self.h, self.w, |r, c| {
            self.value(r as f64 - dy, c as f64 - dx).clamp(0.0, 255.0) as f32
        })
    }
}

#[derive(Debug, Clone)]
pub struct SynthSequence {
    /// Ground-truth PRNU, with adaptation metadata when `sensor_scale > 1`.
    pub truth: Fingerprint,
    /// The truth as seen by the frames (adapted to the video raster).
    pub frame_k: Image,
    pub frames: Vec<Image>,
    pub manifest: Vec<FrameRecord>,
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:04}.png")
}

pub fn make_manifest(n: usize, gop_size: usize) -> Vec<FrameRecord> {
    (0..n)
        .map(|i| {
            let intra = if gop_size == 0 { i == 0 } else { i % gop_size == 0 };
            FrameRecord {
                index: i,
                path: PathBuf::from(frame_file_name(i)),
                kind: if intra { FrameKind::I } else { FrameKind::P },
                gop_id: i.checked_div(gop_size).unwrap_or(0),
                rotate180: false,
            }
        })
        .collect()
}

/// Generates frames `T_{P⁻¹}(C·(1 + s·K) + n)` for each listed correcting `P`.
pub fn make_sequence(spec: &SynthSpec) -> Result<SynthSequence> {
    spec.validate()?;
    let (h, w) = spec.dims;
    let k_seed = derive_seed(spec.seed, 0);
    let (truth, frame_k) = if spec.sensor_scale > 1.0 {
        let s = spec.sensor_scale;
        let sh = (h as f64 * s).ceil() as usize + 8;
        let sw = (w as f64 * s).ceil() as usize + 8;
        let sensor = gaussian_field(sh, sw, k_seed);
        let (dh, dw) = scaled_dims(sh, sw, s);
        let crop = CropRect::centered(dh, dw, h, w)?;
        let frame_k = adapt_fingerprint(&sensor, s, &crop)?;
        let mut fp = Fingerprint::new(sensor, 1)?;
        fp.adaptation = Some(Adaptation { scale: s, crop });
        (fp, frame_k)
    } else {
        let k = gaussian_field(h, w, k_seed);
        (Fingerprint::new(k.clone(), 1)?, k)
    };

    let max_motion = spec
        .scene_motion
        .iter()
        .map(|&(dx, dy)| dx.abs().max(dy.abs()))
        .fold(0.0, f64::max);
    let scene = Scene::new(spec.texture, h, w, max_motion + 8.0, derive_seed(spec.seed, 1));
    let frames = spec
        .warps
        .par_iter()
        .enumerate()
        .map(|(v, p)| -> Result<Image> {
            let (dx, dy) = spec.scene_motion.get(v).copied().unwrap_or((0.0, 0.0));
            let clean = scene.render(dx, dy);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 2 + v as u64));
            let s = spec.fingerprint_strength;
            let raw = Image::from_fn(h, w, |r, c| {
                let n: f64 = rng.sample(StandardNormal);
                let i = clean.get(r, c) as f64;
                (i * (1.0 + s * frame_k.get(r, c) as f64) + spec.noise_sigma * n) as f32
            });
            let stab = invert(&p.to_matrix())?;
            apply_transform(&raw, &stab, h, w)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SynthSequence {
        truth,
        frame_k,
        manifest: make_manifest(frames.len(), spec.gop_size),
        frames,
    })
}

/// PCE by direct summation over every cyclic shift; no FFT.
///
/// Same conventions as [`prnu::correlation`]: both inputs are centred over
/// their own support, `w` is zero-padded to `k`'s size, the peak is taken
/// over admissible shifts and the 11×11 cyclic neighbourhood of the peak is
/// excluded from the energy.
pub fn oracle_pce(k: &Image, w: &Image) -> Result<PceReport> {
    let (m, n) = k.dims();
    let (mp, np) = w.dims();
    if mp > m || np > n {
        return Err(Error::DimensionMismatch {
            expected: (m, n),
            got: (mp, np),
        });
    }
    let km = k.mean();
    let wm = w.mean();
    let kc: Vec<f64> = k.pixels().iter().map(|&v| v as f64 - km).collect();
    let wc: Vec<f64> = w.pixels().iter().map(|&v| v as f64 - wm).collect();
    let kn: f64 = kc.iter().map(|v| v * v).sum::<f64>().sqrt();
    let wn: f64 = wc.iter().map(|v| v * v).sum::<f64>().sqrt();
    if kn == 0.0 || wn == 0.0 {
        return Err(Error::Degenerate("constant input".into()));
    }
    let mut rho = vec![0.0; m * n];
    for d1 in 0..m {
        for d2 in 0..n {
            let mut acc = 0.0;
            for r in 0..mp {
                for c in 0..np {
                    acc += kc[((r + d1) % m) * n + (c + d2) % n] * wc[r * np + c];
                }
            }
            rho[d1 * n + d2] = acc / (kn * wn);
        }
    }
    let mut peak = (0, 0);
    for d1 in 0..=m - mp {
        for d2 in 0..=n - np {
            let (p1, p2) = peak;
            if rho[d1 * n + d2].powi(2) > rho[p1 * n + p2].powi(2) {
                peak = (d1, d2);
            }
        }
    }
    let cyc = |a: usize, b: usize, len: usize| {
        let d = a.abs_diff(b);
        d.min(len - d)
    };
    let mut energy = 0.0;
    let mut count = 0usize;
    for d1 in 0..m {
        for d2 in 0..n {
            if cyc(d1, peak.0, m) <= 5 && cyc(d2, peak.1, n) <= 5 {
                continue;
            }
            energy += rho[d1 * n + d2].powi(2);
            count += 1;
        }
    }
    if count == 0 || energy == 0.0 {
        return Err(Error::Degenerate("empty off-peak region".into()));
    }
    let rp = rho[peak.0 * n + peak.1];
    let pce = if rp == 0.0 { 0.0 } else { rp.signum() * rp * rp * count as f64 / energy };
    Ok(PceReport { pce, peak, rho_peak: rp })
}

/// Area under the ROC curve (Mann–Whitney, ties count half).
pub fn roc_auc(h1: &[f64], h0: &[f64]) -> f64 {
    if h1.is_empty() || h0.is_empty() {
        return f64::NAN;
    }
    let mut wins = 0.0;
    for &a in h1 {
        for &b in h0 {
            wins += if a > b { 1.0 } else if a == b { 0.5 } else { 0.0 };
        }
    }
    wins / (h1.len() * h0.len()) as f64
}

/// Fraction of `scores` strictly above `tau`.
pub fn rate_above(scores: &[f64], tau: f64) -> f64 {
    if scores.is_empty() {
        return f64::NAN;
    }
    scores.iter().filter(|&&s| s > tau).count() as f64 / scores.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialOutcome {
    pub h1: Vec<f64>,
    pub h0: Vec<f64>,
    pub auc: f64,
}

/// Unwarped single-frame PCE under H1 (frame carries K) and H0 (frame
/// carries an independent pattern), `trials` each.
pub fn pce_trials(
    dims: (usize, usize),
    strength: f64,
    noise_sigma: f64,
    texture: Texture,
    trials: usize,
    seed: u64,
) -> Result<TrialOutcome> {
    let run = |t: usize| -> Result<(f64, f64)> {
        let spec = SynthSpec {
            dims,
            fingerprint_strength: strength,
            noise_sigma,
            texture,
            seed: derive_seed(seed, t as u64),
            ..Default::default()
        };
        let seq = make_sequence(&spec)?;
        let w = prnu::residual(&seq.frames[0], prnu::DEFAULT_SIGMA0_SQ)?;
        let other = gaussian_field(dims.0, dims.1, derive_seed(seed ^ 0x5eed, t as u64));
        let h1 = PreparedFingerprint::new(&seq.frame_k)?.pce(&w, ShiftPolicy::Search)?;
        let h0 = PreparedFingerprint::new(&other)?.pce(&w, ShiftPolicy::Search)?;
        Ok((h1.pce, h0.pce))
    };
    let pairs = (0..trials).into_par_iter().map(run).collect::<Result<Vec<_>>>()?;
    let (h1, h0): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
    let auc = roc_auc(&h1, &h0);
    Ok(TrialOutcome { h1, h0, auc })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sequence_is_deterministic() {
        let spec = SynthSpec {
            dims: (64, 64),
            warps: vec![RestrictedParams::IDENTITY, RestrictedParams::new(1.01, 0.02, 0.0, 0.0).unwrap()],
            texture: Texture::Textured,
            seed: 42,
            ..Default::default()
        };
        let a = make_sequence(&spec).unwrap();
        let b = make_sequence(&spec).unwrap();
        assert_eq!(a.frames, b.frames);
        assert_eq!(a.frame_k, b.frame_k);
        assert_eq!(a.manifest.len(), 2);
        assert_eq!(a.manifest[0].kind, FrameKind::I);
        assert_eq!(a.manifest[1].kind, FrameKind::P);
    }

    #[test]
    fn zero_strength_and_noise_flat_is_constant() {
        let spec = SynthSpec {
            dims: (64, 64),
            fingerprint_strength: 0.0,
            noise_sigma: 0.0,
            ..Default::default()
        };
        let seq = make_sequence(&spec).unwrap();
        assert!(seq.frames[0].pixels().iter().all(|&v| v == 128.0));
    }

    #[test]
    fn planted_fingerprint_is_detectable() {
        let seq = make_sequence(&SynthSpec {
            dims: (128, 128),
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        let w = prnu::residual(&seq.frames[0], prnu::DEFAULT_SIGMA0_SQ).unwrap();
        assert!(prnu::pce(&seq.frame_k, &w).unwrap().pce > 19.5);
    }

    #[test]
    fn scene_shift_is_exact() {
        let s = Scene::new(Texture::Textured, 64, 64, 20.0, 1);
        let a = s.render(0.0, 0.0);
        let b = s.render(3.0, 0.0);
        for r in 0..64 {
            for c in 3..64 {
                assert_eq!(a.get(r, c - 3), b.get(r, c));
            }
        }
    }

    #[test]
    fn sensor_scale_records_adaptation() {
        let seq = make_sequence(&SynthSpec {
            dims: (64, 64),
            sensor_scale: 1.5,
            ..Default::default()
        })
        .unwrap();
        let a = seq.truth.adaptation.unwrap();
        assert_eq!(a.scale, 1.5);
        assert_eq!(seq.frame_k.dims(), (64, 64));
        assert_eq!(
            adapt_fingerprint(&seq.truth.k_hat, a.scale, &a.crop).unwrap(),
            seq.frame_k
        );
    }

    #[test]
    fn oracle_planted_shift_and_self_match() {
        let k = gaussian_field(24, 20, 8);
        let rep = oracle_pce(&k, &k).unwrap();
        assert_eq!(rep.peak, (0, 0));
        let crop = CropRect::new(3, 5, 3 + 14, 5 + 16).unwrap();
        let rep = oracle_pce(&k, &k.crop(&crop).unwrap()).unwrap();
        assert_eq!(rep.peak, (5, 3));
    }

    #[test]
    fn auc_edge_cases() {
        assert_eq!(roc_auc(&[2.0, 3.0], &[0.0, 1.0]), 1.0);
        assert_eq!(roc_auc(&[0.0], &[1.0]), 0.0);
        assert_eq!(roc_auc(&[1.0], &[1.0]), 0.5);
        assert_eq!(rate_above(&[1.0, 20.0, 30.0, 19.5], 19.5), 0.5);
    }

    #[test]
    fn invalid_specs() {
        let small = SynthSpec { dims: (32, 64), ..Default::default() };
        assert!(make_sequence(&small).is_err());
        let none = SynthSpec { warps: vec![], ..Default::default() };
        assert!(make_sequence(&none).is_err());
    }
}
