//! Batch evaluation of transform candidates: warp, residual, PCE.
//!
//! How the residual of a warped frame is formed ([`ResidualStrategy`]) and
//! how a batch is scheduled ([`BatchBackend`]) are both pluggable and looked
//! up by name.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::imagecore::Image;
use crate::prnu::{self, PceReport, PreparedFingerprint, ShiftPolicy};
use crate::registry::Registry;
use crate::warp::{apply_transform, TransformParams};

pub const DENOISE_PER_CANDIDATE: &str = "denoise_per_candidate";
pub const WARP_RESIDUAL: &str = "warp_residual";
pub const SEQUENTIAL: &str = "sequential";
pub const PARALLEL: &str = "parallel";

/// Frame data shared by every candidate of a batch.
#[derive(Debug, Clone)]
pub struct PreparedFrame {
    pub frame: Image,
    /// Residual of the unwarped frame, for strategies that need it.
    pub residual: Option<Image>,
}

pub trait ResidualStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    fn prepare(&self, frame: &Image, sigma0_sq: f64) -> Result<PreparedFrame>;

    /// Residual of the frame as seen through candidate `t`.
    fn residual(&self, frame: &PreparedFrame, t: &TransformParams, sigma0_sq: f64) -> Result<Image>;
}

/// Warps the frame and extracts the residual for every candidate.
#[derive(Debug, Default, Clone, Copy)]
pub struct DenoisePerCandidate;

impl ResidualStrategy for DenoisePerCandidate {
    fn name(&self) -> &'static str {
        DENOISE_PER_CANDIDATE
    }

    fn prepare(&self, frame: &Image, _sigma0_sq: f64) -> Result<PreparedFrame> {
        Ok(PreparedFrame {
            frame: frame.clone(),
            residual: None,
        })
    }

    fn residual(&self, frame: &PreparedFrame, t: &TransformParams, sigma0_sq: f64) -> Result<Image> {
        let (h, w) = frame.frame.dims();
        let warped = apply_transform(&frame.frame, t, h, w)?;
        prnu::residual(&warped, sigma0_sq)
    }
}

/// Extracts the residual once and warps it per candidate. Faster, but the
/// interpolation smooths the residual, so PCE values differ slightly.
#[derive(Debug, Default, Clone, Copy)]
pub struct WarpResidual;

impl ResidualStrategy for WarpResidual {
    fn name(&self) -> &'static str {
        WARP_RESIDUAL
    }

    fn prepare(&self, frame: &Image, sigma0_sq: f64) -> Result<PreparedFrame> {
        Ok(PreparedFrame {
            frame: frame.clone(),
            residual: Some(prnu::residual(frame, sigma0_sq)?),
        })
    }

    fn residual(&self, frame: &PreparedFrame, t: &TransformParams, sigma0_sq: f64) -> Result<Image> {
        let (h, w) = frame.frame.dims();
        match &frame.residual {
            Some(r) => apply_transform(r, t, h, w),
            None => apply_transform(&prnu::residual(&frame.frame, sigma0_sq)?, t, h, w),
        }
    }
}

pub fn residual_strategies() -> Registry<dyn ResidualStrategy> {
    let mut r: Registry<dyn ResidualStrategy> = Registry::new("residual mode");
    r.register(DENOISE_PER_CANDIDATE, Arc::new(DenoisePerCandidate));
    r.register(WARP_RESIDUAL, Arc::new(WarpResidual));
    r
}

pub struct CandidateBatch {
    pub frame: Arc<PreparedFrame>,
    pub fingerprint: Arc<PreparedFingerprint>,
    pub candidates: Vec<TransformParams>,
    pub strategy: Arc<dyn ResidualStrategy>,
    pub sigma0_sq: f64,
    pub shift: ShiftPolicy,
}

impl CandidateBatch {
    pub fn new(
        frame: &Image,
        fingerprint: Arc<PreparedFingerprint>,
        candidates: Vec<TransformParams>,
        strategy: Arc<dyn ResidualStrategy>,
        sigma0_sq: f64,
    ) -> Result<Self> {
        Ok(Self {
            frame: Arc::new(strategy.prepare(frame, sigma0_sq)?),
            fingerprint,
            candidates,
            strategy,
            sigma0_sq,
            shift: ShiftPolicy::Search,
        })
    }

    /// The sequential warp → residual → PCE pipeline for one candidate.
    pub fn evaluate_one(&self, t: &TransformParams) -> Result<PceReport> {
        t.check_invertible()?;
        let w = self.strategy.residual(&self.frame, t, self.sigma0_sq)?;
        self.fingerprint.pce(&w, self.shift)
    }
}

pub trait BatchBackend: Send + Sync {
    fn name(&self) -> &'static str;

    /// One result per candidate, in candidate order.
    fn evaluate(&self, batch: &CandidateBatch) -> Vec<Result<PceReport>>;
}

#[derive(Debug, Default, Clone, Copy)]
pub struct SequentialBackend;

impl BatchBackend for SequentialBackend {
    fn name(&self) -> &'static str {
        SEQUENTIAL
    }

    fn evaluate(&self, batch: &CandidateBatch) -> Vec<Result<PceReport>> {
        batch.candidates.iter().map(|t| batch.evaluate_one(t)).collect()
    }
}

/// Spreads candidates over a dedicated worker pool.
pub struct ParallelBackend {
    pool: rayon::ThreadPool,
}

impl ParallelBackend {
    pub fn new(workers: usize) -> Result<Self> {
        if workers == 0 {
            return Err(Error::InvalidArgument("workers must be at least 1".into()));
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build()
            .map_err(|e| Error::InvalidArgument(format!("worker pool: {e}")))?;
        Ok(Self { pool })
    }

    pub fn workers(&self) -> usize {
        self.pool.current_num_threads()
    }
}

impl BatchBackend for ParallelBackend {
    fn name(&self) -> &'static str {
        PARALLEL
    }

    fn evaluate(&self, batch: &CandidateBatch) -> Vec<Result<PceReport>> {
        self.pool.install(|| {
            batch
                .candidates
                .par_iter()
                .map(|t| batch.evaluate_one(t))
                .collect()
        })
    }
}

pub fn backends(workers: usize) -> Result<Registry<dyn BatchBackend>> {
    let mut r: Registry<dyn BatchBackend> = Registry::new("batch backend");
    r.register(SEQUENTIAL, Arc::new(SequentialBackend));
    r.register(PARALLEL, Arc::new(ParallelBackend::new(workers)?));
    Ok(r)
}

pub fn evaluate_batch(batch: &CandidateBatch, backend: &dyn BatchBackend) -> Vec<Result<PceReport>> {
    backend.evaluate(batch)
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub candidates: usize,
    pub workers: usize,
    pub sequential_ms: f64,
    pub parallel_ms: f64,
    pub sequential_per_candidate_ms: f64,
    pub parallel_per_candidate_ms: f64,
    pub speedup: f64,
    /// Largest relative PCE difference between the two runs.
    pub max_rel_diff: f64,
}

/// Times the batch sequentially and on `workers` threads.
pub fn bench(batch: &CandidateBatch, workers: usize) -> Result<BenchReport> {
    if batch.candidates.is_empty() {
        return Err(Error::InvalidArgument("cannot bench an empty batch".into()));
    }
    let par = ParallelBackend::new(workers)?;
    let t0 = Instant::now();
    let seq = SequentialBackend.evaluate(batch);
    let seq_ms = t0.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();
    let parr = par.evaluate(batch);
    let par_ms = t1.elapsed().as_secs_f64() * 1e3;
    let max_rel_diff = seq
        .iter()
        .zip(&parr)
        .filter_map(|(a, b)| match (a, b) {
            (Ok(a), Ok(b)) => Some(rel_diff(a.pce, b.pce)),
            _ => None,
        })
        .fold(0.0, f64::max);
    let n = batch.candidates.len() as f64;
    Ok(BenchReport {
        candidates: batch.candidates.len(),
        workers,
        sequential_ms: seq_ms,
        parallel_ms: par_ms,
        sequential_per_candidate_ms: seq_ms / n,
        parallel_per_candidate_ms: par_ms / n,
        speedup: if par_ms > 0.0 { seq_ms / par_ms } else { f64::NAN },
        max_rel_diff,
    })
}

pub fn rel_diff(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::gaussian_field;
    use crate::warp::RestrictedParams;

    fn setup(strategy: &str) -> CandidateBatch {
        let k = gaussian_field(64, 64, 1);
        let frame = Image::from_fn(64, 64, |r, c| 128.0 * (1.0 + 0.05 * k.get(r, c)) + (r % 3) as f32);
        let fp = Arc::new(PreparedFingerprint::new(&k).unwrap());
        let strategy = residual_strategies().get(strategy).unwrap();
        let cands = [(1.0, 0.0), (1.01, 0.0), (0.99, 0.05), (1.0, -0.1)]
            .iter()
            .map(|&(l, t)| RestrictedParams::new(l, t, 0.0, 0.0).unwrap().to_matrix())
            .collect();
        CandidateBatch::new(&frame, fp, cands, strategy, 9.0).unwrap()
    }

    #[test]
    fn identity_candidate_equals_direct_pce() {
        let mut b = setup(DENOISE_PER_CANDIDATE);
        b.candidates.truncate(1);
        let got = SequentialBackend.evaluate(&b).pop().unwrap().unwrap();
        let w = prnu::residual(&b.frame.frame, 9.0).unwrap();
        let direct = b.fingerprint.pce(&w, ShiftPolicy::Search).unwrap();
        assert_eq!(got, direct);
    }

    #[test]
    fn parallel_equals_sequential_and_is_repeatable() {
        for mode in [DENOISE_PER_CANDIDATE, WARP_RESIDUAL] {
            let b = setup(mode);
            let seq = SequentialBackend.evaluate(&b);
            let par = ParallelBackend::new(3).unwrap().evaluate(&b);
            let again = ParallelBackend::new(3).unwrap().evaluate(&b);
            for ((s, p), a) in seq.iter().zip(&par).zip(&again) {
                let (s, p, a) = (s.as_ref().unwrap(), p.as_ref().unwrap(), a.as_ref().unwrap());
                assert!(rel_diff(s.pce, p.pce) <= 1e-9);
                assert_eq!(p, a);
            }
        }
    }

    #[test]
    fn permutation_equivariance() {
        let b = setup(DENOISE_PER_CANDIDATE);
        let fwd: Vec<f64> = SequentialBackend.evaluate(&b).into_iter().map(|r| r.unwrap().pce).collect();
        let mut rev = setup(DENOISE_PER_CANDIDATE);
        rev.candidates.reverse();
        let back: Vec<f64> = ParallelBackend::new(2).unwrap().evaluate(&rev).into_iter().map(|r| r.unwrap().pce).collect();
        let mut back_rev = back.clone();
        back_rev.reverse();
        assert_eq!(fwd, back_rev);
    }

    #[test]
    fn failing_candidate_keeps_its_slot() {
        let mut b = setup(DENOISE_PER_CANDIDATE);
        b.candidates.insert(1, TransformParams { t11: 0.0, t22: 0.0, ..TransformParams::IDENTITY });
        let out = ParallelBackend::new(2).unwrap().evaluate(&b);
        assert_eq!(out.len(), 5);
        assert!(out[1].is_err());
        assert!(out.iter().enumerate().all(|(i, r)| i == 1 || r.is_ok()));
    }

    #[test]
    fn bench_rules() {
        let mut b = setup(DENOISE_PER_CANDIDATE);
        let rep = bench(&b, 1).unwrap();
        assert_eq!(rep.candidates, 4);
        assert!(rep.max_rel_diff <= 1e-9);
        b.candidates.clear();
        assert!(bench(&b, 1).is_err());
        assert!(ParallelBackend::new(0).is_err());
    }

    #[test]
    fn registries_resolve_names() {
        assert_eq!(residual_strategies().names(), vec![DENOISE_PER_CANDIDATE, WARP_RESIDUAL]);
        let reg = backends(2).unwrap();
        assert_eq!(reg.get(PARALLEL).unwrap().name(), PARALLEL);
        assert!(reg.get("gpu").is_err());
    }
}
