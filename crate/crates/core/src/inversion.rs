//! Frame-wise inversion of the stabilization transform.
//!
//! [`Inverter::correction`] runs the shrinking (λ, θ) grid search that
//! maximizes PCE against the fingerprint, [`Inverter::coregistration`]
//! aligns a frame to the previously corrected one by keypoint homography,
//! and [`Inverter::run_window`] chains them over an analysis window.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::batcheval::{self, BatchBackend, CandidateBatch, ResidualStrategy};
use crate::error::{Error, Result};
use crate::features::{match_frames, MatchConfig};
use crate::imagecore::Image;
use crate::prnu::{self, PceReport, PreparedFingerprint, ShiftPolicy};
use crate::warp::{apply_transform, RestrictedParams, TransformParams};

/// Default decision threshold on the mean of γ.
pub const DEFAULT_TAU: f64 = 19.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchConfig {
    /// Half-width of the per-axis grid, in steps.
    pub alpha_range: usize,
    pub lambda_step0: f64,
    pub theta_step0: f64,
    /// Step multiplier between iterations.
    pub shrink: f64,
    pub max_iters: usize,
    /// First iteration sweeps θ densely over `±dense_theta_span`.
    pub dense_theta_first: bool,
    pub dense_theta_span: f64,
    pub residual_mode: String,
    /// Seed corrections of predicted frames from coregistration.
    pub coregistration_seeding: bool,
}

impl Default for SearchConfig {
    fn default() -> Self {
        Self {
            alpha_range: 5,
            lambda_step0: 0.01,
            theta_step0: 0.1,
            shrink: 0.1,
            max_iters: 3,
            dense_theta_first: true,
            dense_theta_span: 5.0,
            residual_mode: batcheval::DENOISE_PER_CANDIDATE.to_string(),
            coregistration_seeding: true,
        }
    }
}

impl SearchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.max_iters < 1 {
            return bad("max_iters must be at least 1");
        }
        if !(self.lambda_step0 > 0.0 && self.theta_step0 > 0.0) {
            return bad("grid steps must be positive");
        }
        if !(self.shrink > 0.0 && self.shrink < 1.0) {
            return bad("shrink must lie in (0, 1)");
        }
        if !(self.dense_theta_span >= 0.0) {
            return bad("dense_theta_span must be non-negative");
        }
        Ok(())
    }

    pub fn lambda_step(&self, iteration: usize) -> f64 {
        self.lambda_step0 * self.shrink.powi(iteration as i32 - 1)
    }

    pub fn theta_step(&self, iteration: usize) -> f64 {
        self.theta_step0 * self.shrink.powi(iteration as i32 - 1)
    }

    /// λ values of iteration `n` (1-based) around `center`.
    pub fn lambda_grid(&self, center: f64, iteration: usize) -> Vec<f64> {
        symmetric_grid(center, self.lambda_step(iteration), self.alpha_range)
    }

    /// θ values of iteration `n` around `center`; the dense sweep keeps the
    /// first-iteration step and widens the half-width to the span.
    pub fn theta_grid(&self, center: f64, iteration: usize) -> Vec<f64> {
        if iteration == 1 && self.dense_theta_first {
            let k = (self.dense_theta_span / self.theta_step0).round() as usize;
            symmetric_grid(center, self.theta_step0, k)
        } else {
            symmetric_grid(center, self.theta_step(iteration), self.alpha_range)
        }
    }
}

fn symmetric_grid(center: f64, step: f64, half: usize) -> Vec<f64> {
    let h = half as i64;
    (-h..=h).map(|a| center + a as f64 * step).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationTrace {
    pub iteration: usize,
    pub lambda_values: usize,
    pub theta_values: usize,
    pub evaluated: usize,
    pub failed: usize,
    pub best_lambda: f64,
    pub best_theta: f64,
    pub best_pce: f64,
}

#[derive(Debug, Clone)]
pub struct Correction {
    /// `T_{t_max}(I)`.
    pub corrected: Image,
    /// Largest PCE found.
    pub gamma: f64,
    pub t_max: TransformParams,
    pub params: RestrictedParams,
    /// PCE of the initial candidate, whose peak fixes the crop offset.
    pub initial: PceReport,
    pub trace: Vec<IterationTrace>,
}

#[derive(Debug, Clone)]
pub struct Coregistration {
    /// Homography `H` with `T_H(P) ≈ U`.
    pub h: TransformParams,
    pub registered: Image,
    pub inliers: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameOutcome {
    pub gamma: f64,
    pub t_max: TransformParams,
    pub params: RestrictedParams,
    pub seeded: bool,
    /// Whether coregistration produced a homography.
    pub coregistered: bool,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GammaVector {
    pub values: Vec<f64>,
    pub best_params: Vec<TransformParams>,
    pub frames: Vec<FrameOutcome>,
}

impl GammaVector {
    pub fn mean(&self) -> Option<f64> {
        (!self.values.is_empty()).then(|| self.values.iter().sum::<f64>() / self.values.len() as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Decision {
    pub decision: bool,
    pub mean_gamma: f64,
    pub tau: f64,
}

/// `mean(γ) > τ`.
pub fn decide(gamma: &GammaVector, tau: f64) -> Result<Decision> {
    let mean_gamma = gamma
        .mean()
        .ok_or_else(|| Error::InsufficientData("empty gamma vector".into()))?;
    Ok(Decision {
        decision: mean_gamma > tau,
        mean_gamma,
        tau,
    })
}

pub struct Inverter {
    fingerprint: Arc<PreparedFingerprint>,
    cfg: SearchConfig,
    sigma0_sq: f64,
    strategy: Arc<dyn ResidualStrategy>,
    backend: Arc<dyn BatchBackend>,
    matching: MatchConfig,
}

impl Inverter {
    pub fn new(
        fingerprint: &Image,
        cfg: SearchConfig,
        sigma0_sq: f64,
        backend: Arc<dyn BatchBackend>,
        matching: MatchConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let strategy = batcheval::residual_strategies().get(&cfg.residual_mode)?;
        Ok(Self {
            fingerprint: Arc::new(PreparedFingerprint::new(fingerprint)?),
            cfg,
            sigma0_sq,
            strategy,
            backend,
            matching,
        })
    }

    pub fn config(&self) -> &SearchConfig {
        &self.cfg
    }

    pub fn fingerprint(&self) -> &Arc<PreparedFingerprint> {
        &self.fingerprint
    }

    fn check_frame(&self, frame: &Image) -> Result<()> {
        let (m, n) = self.fingerprint.dims();
        if frame.height() > m || frame.width() > n {
            return Err(Error::DimensionMismatch {
                expected: (m, n),
                got: frame.dims(),
            });
        }
        Ok(())
    }

    /// PCE of the frame's own residual, peak searched.
    pub fn frame_pce(&self, frame: &Image) -> Result<PceReport> {
        self.check_frame(frame)?;
        let w = prnu::residual(frame, self.sigma0_sq)?;
        self.fingerprint.pce(&w, ShiftPolicy::Search)
    }

    /// Breadth-first grid search over (λ, θ) from `t_init` (or identity).
    pub fn correction(&self, frame: &Image, t_init: Option<&TransformParams>) -> Result<Correction> {
        self.check_frame(frame)?;
        let init = t_init.map_or(RestrictedParams::IDENTITY, |t| t.to_restricted());
        init.validate()?;
        let (dx, dy) = (init.dx, init.dy);
        let mut batch = CandidateBatch::new(
            frame,
            self.fingerprint.clone(),
            vec![init.to_matrix()],
            self.strategy.clone(),
            self.sigma0_sq,
        )?;
        let initial = batch.evaluate_one(&batch.candidates[0])?;
        batch.shift = ShiftPolicy::Fixed(initial.peak.0, initial.peak.1);

        let (mut lam, mut th) = (init.lambda, init.theta);
        let mut best_pce = initial.pce;
        let mut trace = Vec::new();
        for n in 1..=self.cfg.max_iters {
            let lambdas = self.cfg.lambda_grid(lam, n);
            let thetas = self.cfg.theta_grid(th, n);
            let mut params = Vec::with_capacity(lambdas.len() * thetas.len());
            for &l in &lambdas {
                if l <= 0.0 {
                    continue;
                }
                for &t in &thetas {
                    params.push((l, t));
                }
            }
            batch.candidates = params
                .iter()
                .map(|&(l, t)| RestrictedParams { lambda: l, theta: t, dx, dy }.to_matrix())
                .collect();
            let results = self.backend.evaluate(&batch);
            let (center_l, center_t) = (lam, th);
            let mut failed = 0;
            for (&(l, t), r) in params.iter().zip(&results) {
                match r {
                    Ok(rep) if rep.pce > best_pce => {
                        best_pce = rep.pce;
                        lam = l;
                        th = t;
                    }
                    Ok(_) => {}
                    Err(_) => failed += 1,
                }
            }
            trace.push(IterationTrace {
                iteration: n,
                lambda_values: lambdas.len(),
                theta_values: thetas.len(),
                evaluated: params.len(),
                failed,
                best_lambda: lam,
                best_theta: th,
                best_pce,
            });
            log::debug!("iteration {n}: λ={lam:.5} θ={th:.5} pce={best_pce:.2}");
            // The first grid always gets one refinement, even when the
            // seed itself wins it.
            if n > 1 && lam == center_l && th == center_t {
                break;
            }
        }
        let params = RestrictedParams { lambda: lam, theta: th, dx, dy };
        let t_max = params.to_matrix();
        let (h, w) = frame.dims();
        Ok(Correction {
            corrected: apply_transform(frame, &t_max, h, w)?,
            gamma: best_pce,
            t_max,
            params,
            initial,
            trace,
        })
    }

    /// Homography aligning `p` onto `u`, and `p` warped by it.
    pub fn coregistration(&self, u: &Image, p: &Image) -> Result<Coregistration> {
        let set = match_frames(u, p, &self.matching)?;
        let h = match (set.reliable, set.homography) {
            (true, Some(h)) => h,
            _ => {
                return Err(Error::InsufficientData(format!(
                    "coregistration found {} inliers among {} matches",
                    set.pairs().len(),
                    set.tentative.len()
                )))
            }
        };
        Ok(Coregistration {
            registered: apply_transform(p, &h, u.height(), u.width())?,
            inliers: set.pairs().len(),
            h,
        })
    }

    /// Corrects the anchor, then each following frame seeded by
    /// coregistration against the last corrected frame when that improves
    /// its PCE.
    pub fn run_window(&self, frames: &[Image]) -> Result<GammaVector> {
        let (first, rest) = frames
            .split_first()
            .ok_or_else(|| Error::InsufficientData("empty analysis window".into()))?;
        let anchor = self.correction(first, None)?;
        let mut out = GammaVector {
            values: vec![anchor.gamma],
            best_params: vec![anchor.t_max],
            frames: vec![FrameOutcome {
                gamma: anchor.gamma,
                t_max: anchor.t_max,
                params: anchor.params,
                seeded: false,
                coregistered: false,
                iterations: anchor.trace.len(),
            }],
        };
        let mut u = anchor.corrected;
        for p in rest {
            let mut seed = None;
            let mut coregistered = false;
            if self.cfg.coregistration_seeding {
                match self.coregistration(&u, p) {
                    Ok(co) => {
                        coregistered = true;
                        let registered = self.frame_pce(&co.registered).map(|r| r.pce);
                        let plain = self.frame_pce(p).map(|r| r.pce);
                        if let (Ok(a), Ok(b)) = (registered, plain) {
                            if a > b {
                                seed = Some(co.h);
                            }
                        }
                    }
                    Err(e) => log::debug!("coregistration failed: {e}"),
                }
            }
            let seeded_run = seed.as_ref().map(|h| self.correction(p, Some(h)));
            let (c, seeded) = match seeded_run {
                Some(Ok(c)) => (c, true),
                Some(Err(e)) => {
                    log::debug!("seeded correction failed: {e}");
                    (self.correction(p, None)?, false)
                }
                None => (self.correction(p, None)?, false),
            };
            out.values.push(c.gamma);
            out.best_params.push(c.t_max);
            out.frames.push(FrameOutcome {
                gamma: c.gamma,
                t_max: c.t_max,
                params: c.params,
                seeded,
                coregistered,
                iterations: c.trace.len(),
            });
            u = c.corrected;
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::batcheval::SequentialBackend;
    use crate::synth::{make_sequence, SynthSpec};

    fn inverter(k: &Image, cfg: SearchConfig) -> Inverter {
        Inverter::new(k, cfg, 9.0, Arc::new(SequentialBackend), MatchConfig::default()).unwrap()
    }

    #[test]
    fn grids_have_expected_sizes_and_contain_center() {
        let cfg = SearchConfig::default();
        let th = cfg.theta_grid(0.37, 1);
        assert_eq!(th.len(), 101);
        assert!(th.contains(&0.37));
        assert_eq!(cfg.lambda_grid(1.0, 1).len(), 11);
        assert_eq!(cfg.theta_grid(0.0, 2).len(), 11);
        assert!((cfg.lambda_step(3) - 1e-4).abs() < 1e-18);
        assert!((cfg.theta_step(2) - 0.01).abs() < 1e-15);
        let sparse = SearchConfig { dense_theta_first: false, ..cfg };
        assert_eq!(sparse.theta_grid(0.0, 1).len(), 11);
    }

    #[test]
    fn config_validation() {
        assert!(SearchConfig { max_iters: 0, ..Default::default() }.validate().is_err());
        assert!(SearchConfig { shrink: 1.0, ..Default::default() }.validate().is_err());
        assert!(SearchConfig { lambda_step0: 0.0, ..Default::default() }.validate().is_err());
        let bad_mode = SearchConfig { residual_mode: "nope".into(), ..Default::default() };
        assert!(Inverter::new(&Image::zeros(64, 64), bad_mode, 9.0, Arc::new(SequentialBackend), MatchConfig::default()).is_err());
    }

    #[test]
    fn decide_thresholds_mean() {
        let g = |v: Vec<f64>| GammaVector {
            best_params: vec![TransformParams::IDENTITY; v.len()],
            frames: vec![],
            values: v,
        };
        assert!(decide(&g(vec![40.0, 40.0, 40.0]), DEFAULT_TAU).unwrap().decision);
        assert!(!decide(&g(vec![0.0, 0.0]), DEFAULT_TAU).unwrap().decision);
        assert!(decide(&g(vec![]), DEFAULT_TAU).is_err());
        assert_eq!(DEFAULT_TAU, 19.5);
    }

    #[test]
    fn aligned_frame_keeps_identity_and_is_deterministic() {
        let seq = make_sequence(&SynthSpec { dims: (64, 64), seed: 2, ..Default::default() }).unwrap();
        let cfg = SearchConfig { dense_theta_first: false, ..Default::default() };
        let inv = inverter(&seq.frame_k, cfg);
        let c = inv.correction(&seq.frames[0], None).unwrap();
        let first = &c.trace[0];
        assert!((first.best_lambda - 1.0).abs() < 1e-12 && first.best_theta.abs() < 1e-12);
        assert_eq!(first.evaluated, 121);
        assert!(c.trace.len() >= 2);
        assert!((c.params.lambda - 1.0).abs() <= 0.005 && c.params.theta.abs() <= 0.05);
        assert!(c.gamma >= c.initial.pce);
        assert!((c.gamma - c.initial.pce).abs() <= 0.05 * c.initial.pce);
        let again = inv.correction(&seq.frames[0], None).unwrap();
        assert_eq!((again.gamma, again.t_max), (c.gamma, c.t_max));
    }

    #[test]
    fn window_of_one_equals_correction() {
        let seq = make_sequence(&SynthSpec { dims: (64, 64), seed: 5, ..Default::default() }).unwrap();
        let cfg = SearchConfig { dense_theta_first: false, max_iters: 1, ..Default::default() };
        let inv = inverter(&seq.frame_k, cfg);
        let g = inv.run_window(&seq.frames).unwrap();
        let c = inv.correction(&seq.frames[0], None).unwrap();
        assert_eq!(g.values, vec![c.gamma]);
        assert!(inv.run_window(&[]).is_err());
    }

    #[test]
    fn oversized_frame_is_rejected() {
        let inv = inverter(&crate::synth::gaussian_field(64, 64, 1), SearchConfig::default());
        assert!(matches!(
            inv.correction(&Image::filled(64, 80, 1.0), None),
            Err(Error::DimensionMismatch { .. })
        ));
    }
}
