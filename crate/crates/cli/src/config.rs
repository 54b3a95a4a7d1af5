use std::path::Path;

use serde::{Deserialize, Serialize};

use eisprnu::batcheval;
use eisprnu::features::MatchConfig;
use eisprnu::inversion::{SearchConfig, DEFAULT_TAU};
use eisprnu::prnu::DEFAULT_SIGMA0_SQ;

use crate::CliError;

/// Scale sweep used to calibrate an image fingerprint to video geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RegisterConfig {
    pub min_scale: f64,
    pub max_scale: f64,
    pub coarse_step: f64,
    pub fine_step: f64,
    /// Best PCE below this is reported as inconclusive.
    pub min_pce: f64,
}

impl Default for RegisterConfig {
    fn default() -> Self {
        Self {
            min_scale: 1.0,
            max_scale: 2.0,
            coarse_step: 0.01,
            fine_step: 0.001,
            min_pce: 50.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub sigma0_sq: f64,
    pub tau: f64,
    /// Absent means scaled to the frame diagonal.
    pub sanitize_threshold: Option<f64>,
    pub search: SearchConfig,
    pub seed: u64,
    pub workers: usize,
    pub backend: String,
    pub matching: MatchConfig,
    pub register: RegisterConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            sigma0_sq: DEFAULT_SIGMA0_SQ,
            tau: DEFAULT_TAU,
            sanitize_threshold: None,
            search: SearchConfig::default(),
            seed: 0,
            workers: std::thread::available_parallelism().map_or(1, |n| n.get()),
            backend: batcheval::PARALLEL.to_string(),
            matching: MatchConfig::default(),
            register: RegisterConfig::default(),
        }
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub workers: Option<usize>,
    pub tau: Option<f64>,
    pub residual_mode: Option<String>,
    pub backend: Option<String>,
    pub sanitize_threshold: Option<f64>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, over: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
                serde_json::from_str(&text)
                    .map_err(|e| CliError::Usage(format!("bad config {}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(v) = over.seed {
            cfg.seed = v;
        }
        if let Some(v) = over.workers {
            cfg.workers = v;
        }
        if let Some(v) = over.tau {
            cfg.tau = v;
        }
        if let Some(v) = &over.residual_mode {
            cfg.search.residual_mode = v.clone();
        }
        if let Some(v) = &over.backend {
            cfg.backend = v.clone();
        }
        if let Some(v) = over.sanitize_threshold {
            cfg.sanitize_threshold = Some(v);
        }
        cfg.matching.ransac.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let usage = |m: String| Err(CliError::Usage(m));
        if !(self.tau > 0.0) {
            return usage(format!("tau must be positive, got {}", self.tau));
        }
        if self.workers < 1 {
            return usage("workers must be at least 1".into());
        }
        if !(self.sigma0_sq > 0.0) {
            return usage(format!("sigma0_sq must be positive, got {}", self.sigma0_sq));
        }
        if let Some(t) = self.sanitize_threshold {
            if !(t > 0.0) {
                return usage(format!("sanitize threshold must be positive, got {t}"));
            }
        }
        let r = &self.register;
        if !(r.min_scale > 0.0 && r.max_scale >= r.min_scale && r.coarse_step > 0.0 && r.fine_step > 0.0) {
            return usage("register scale range or steps are invalid".into());
        }
        self.search
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        if !batcheval::residual_strategies().contains(&self.search.residual_mode) {
            return usage(format!(
                "unknown residual mode '{}' (available: {})",
                self.search.residual_mode,
                batcheval::residual_strategies().names().join(", ")
            ));
        }
        if ![batcheval::SEQUENTIAL, batcheval::PARALLEL].contains(&self.backend.as_str()) {
            return usage(format!(
                "unknown backend '{}' (available: {}, {})",
                self.backend,
                batcheval::PARALLEL,
                batcheval::SEQUENTIAL
            ));
        }
        Ok(())
    }
}
