//! Normalized cross-correlation and the peak-to-correlation-energy statistic.
//!
//! The correlation plane is circular over the fingerprint's `M×N` support:
//! the probe residual (`M'×N'`, no larger than the fingerprint) is centred,
//! zero-padded to `M×N` and correlated against the centred fingerprint via
//! FFT. The peak is searched over the admissible shifts
//! `0 ≤ δ1 ≤ M−M'`, `0 ≤ δ2 ≤ N−N'`, and the off-peak energy is averaged
//! over the whole plane minus an 11×11 cyclic neighbourhood of the peak.

use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::{zero_pad, Image};

/// Side of the square exclusion neighbourhood around the correlation peak.
pub const EXCLUSION_SIDE: usize = 11;

/// Outcome of one PCE evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PceReport {
    /// Signed PCE: `sign(ρ_peak)·ρ_peak² / mean off-peak ρ²`.
    pub pce: f64,
    /// Peak shift `(δ1, δ2)` (row, column).
    pub peak: (usize, usize),
    pub rho_peak: f64,
}

/// How the peak location is chosen on the correlation plane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ShiftPolicy {
    /// Maximize ρ² over all admissible shifts.
    #[default]
    Search,
    /// Use a given shift.
    Fixed(usize, usize),
}

/// `ρ(X, Y)`; the smaller input is zero-padded to the larger extent first.
pub fn ncc(x: &Image, y: &Image) -> Result<f64> {
    let (h, w) = (x.height().max(y.height()), x.width().max(y.width()));
    let xp;
    let yp;
    let (x, y) = if x.dims() == y.dims() {
        (x, y)
    } else {
        xp = zero_pad(x, h, w)?;
        yp = zero_pad(y, h, w)?;
        (&xp, &yp)
    };
    let mx = x.mean();
    let my = y.mean();
    let (mut dot, mut nx, mut ny) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.pixels().iter().zip(y.pixels()) {
        let (a, b) = (a as f64 - mx, b as f64 - my);
        dot += a * b;
        nx += a * a;
        ny += b * b;
    }
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Degenerate("ncc of a constant matrix".into()));
    }
    Ok((dot / (nx.sqrt() * ny.sqrt())).clamp(-1.0, 1.0))
}

struct Plans {
    row_fwd: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

/// A fingerprint with its spectrum cached, ready to correlate many probes.
///
/// Read-only after construction and shareable across threads; each call
/// allocates its own scratch buffers.
pub struct PreparedFingerprint {
    height: usize,
    width: usize,
    /// FFT of the centred fingerprint, stored column-major (transposed).
    spectrum: Vec<Complex<f64>>,
    norm: f64,
    plans: Plans,
}

impl std::fmt::Debug for PreparedFingerprint {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PreparedFingerprint")
            .field("height", &self.height)
            .field("width", &self.width)
            .field("norm", &self.norm)
            .finish()
    }
}

fn transpose(src: &[Complex<f64>], rows: usize, cols: usize, dst: &mut [Complex<f64>]) {
    const TILE: usize = 32;
    for rb in (0..rows).step_by(TILE) {
        for cb in (0..cols).step_by(TILE) {
            for r in rb..(rb + TILE).min(rows) {
                for c in cb..(cb + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

impl PreparedFingerprint {
    pub fn new(k: &Image) -> Result<Self> {
        let (h, w) = k.dims();
        let mean = k.mean();
        let mut buf: Vec<Complex<f64>> = k
            .pixels()
            .iter()
            .map(|&v| Complex::new(v as f64 - mean, 0.0))
            .collect();
        let norm = buf.iter().map(|c| c.re * c.re).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate("fingerprint is constant".into()));
        }
        let mut planner = FftPlanner::new();
        let plans = Plans {
            row_fwd: planner.plan_fft_forward(w),
            col_fwd: planner.plan_fft_forward(h),
            row_inv: planner.plan_fft_inverse(w),
            col_inv: planner.plan_fft_inverse(h),
        };
        plans.row_fwd.process(&mut buf);
        let mut spectrum = vec![Complex::default(); h * w];
        transpose(&buf, h, w, &mut spectrum);
        plans.col_fwd.process(&mut spectrum);
        Ok(Self {
            height: h,
            width: w,
            spectrum,
            norm,
            plans,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Full circular NCC plane of `w` against the fingerprint.
    pub fn correlate(&self, w: &Image) -> Result<CorrelationPlane> {
        let (m, n) = (self.height, self.width);
        let (mp, np) = w.dims();
        if mp > m || np > n {
            return Err(Error::DimensionMismatch {
                expected: (m, n),
                got: (mp, np),
            });
        }
        let mean = w.mean();
        let mut buf = vec![Complex::default(); m * n];
        let mut wnorm = 0.0;
        for r in 0..mp {
            for (c, &v) in w.row(r).iter().enumerate() {
                let d = v as f64 - mean;
                wnorm += d * d;
                buf[r * n + c] = Complex::new(d, 0.0);
            }
        }
        if wnorm == 0.0 {
            return Err(Error::Degenerate("residual is constant".into()));
        }
        let wnorm = wnorm.sqrt();

        self.plans.row_fwd.process(&mut buf);
        let mut t = vec![Complex::default(); m * n];
        transpose(&buf, m, n, &mut t);
        self.plans.col_fwd.process(&mut t);
        for (x, k) in t.iter_mut().zip(&self.spectrum) {
            *x = k * x.conj();
        }
        self.plans.col_inv.process(&mut t);
        transpose(&t, n, m, &mut buf);
        self.plans.row_inv.process(&mut buf);

        let scale = 1.0 / ((m * n) as f64 * self.norm * wnorm);
        let rho = buf.iter().map(|c| c.re * scale).collect();
        Ok(CorrelationPlane {
            height: m,
            width: n,
            probe: (mp, np),
            rho,
        })
    }

    pub fn pce(&self, w: &Image, policy: ShiftPolicy) -> Result<PceReport> {
        self.correlate(w)?.pce(policy)
    }
}

/// `ρ(δ)` for every cyclic shift of the probe over the fingerprint plane.
#[derive(Debug, Clone)]
pub struct CorrelationPlane {
    pub height: usize,
    pub width: usize,
    /// Dimensions of the probe that produced the plane.
    pub probe: (usize, usize),
    pub rho: Vec<f64>,
}

impl CorrelationPlane {
    #[inline]
    pub fn at(&self, d1: usize, d2: usize) -> f64 {
        self.rho[d1 * self.width + d2]
    }

    /// Largest admissible shift along each axis.
    pub fn max_shift(&self) -> (usize, usize) {
        (self.height - self.probe.0, self.width - self.probe.1)
    }

    fn peak(&self, policy: ShiftPolicy) -> Result<(usize, usize)> {
        let (s1, s2) = self.max_shift();
        match policy {
            ShiftPolicy::Fixed(d1, d2) => {
                if d1 > s1 || d2 > s2 {
                    return Err(Error::InvalidArgument(format!(
                        "shift ({d1},{d2}) outside admissible range ({s1},{s2})"
                    )));
                }
                Ok((d1, d2))
            }
            ShiftPolicy::Search => {
                let mut best = (0, 0);
                let mut best_sq = -1.0;
                for d1 in 0..=s1 {
                    let row = &self.rho[d1 * self.width..d1 * self.width + s2 + 1];
                    for (d2, &v) in row.iter().enumerate() {
                        if v * v > best_sq {
                            best_sq = v * v;
                            best = (d1, d2);
                        }
                    }
                }
                Ok(best)
            }
        }
    }

    pub fn pce(&self, policy: ShiftPolicy) -> Result<PceReport> {
        let peak = self.peak(policy)?;
        let (m, n) = (self.height, self.width);
        let in_band = |centre: usize, len: usize| -> Vec<bool> {
            let mut mask = vec![false; len];
            let half = EXCLUSION_SIDE / 2;
            for k in 0..EXCLUSION_SIDE {
                mask[(centre + len * EXCLUSION_SIDE + k - half) % len] = true;
            }
            mask
        };
        let rows = in_band(peak.0, m);
        let cols = in_band(peak.1, n);
        let excluded = rows.iter().filter(|&&b| b).count() * cols.iter().filter(|&&b| b).count();
        let count = m * n - excluded;
        let mut energy = 0.0;
        for (r, &row_in) in rows.iter().enumerate() {
            let row = &self.rho[r * n..(r + 1) * n];
            if row_in {
                energy += row
                    .iter()
                    .zip(&cols)
                    .filter(|(_, &c)| !c)
                    .map(|(&v, _)| v * v)
                    .sum::<f64>();
            } else {
                energy += row.iter().map(|&v| v * v).sum::<f64>();
            }
        }
        if count == 0 || energy <= 0.0 {
            return Err(Error::Degenerate(
                "no off-peak correlation energy to normalize by".into(),
            ));
        }
        let rho_peak = self.at(peak.0, peak.1);
        let pce = rho_peak.signum() * rho_peak * rho_peak / (energy / count as f64);
        Ok(PceReport {
            pce: if rho_peak == 0.0 { 0.0 } else { pce },
            peak,
            rho_peak,
        })
    }
}

/// One-shot PCE of a residual against a fingerprint image.
pub fn pce(k: &Image, w: &Image) -> Result<PceReport> {
    PreparedFingerprint::new(k)?.pce(w, ShiftPolicy::Search)
}
