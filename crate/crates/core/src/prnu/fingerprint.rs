use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::wavelet::residual;
use crate::error::{Error, Result};
use crate::imagecore::{read_fingerprint_bin, write_fingerprint_bin, CropRect, Image};

/// Down-scale and crop applied to an image-resolution fingerprint.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Adaptation {
    pub scale: f64,
    pub crop: CropRect,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fingerprint {
    pub k_hat: Image,
    pub n_images: usize,
    pub adaptation: Option<Adaptation>,
}

/// JSON written next to the binary fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub device_id: String,
    pub n_images: usize,
    pub sigma0_sq: f64,
    pub adaptation: Option<Adaptation>,
}

/// Running numerator/denominator sums of the maximum-likelihood estimator.
#[derive(Debug, Clone)]
pub struct FingerprintAccumulator {
    height: usize,
    width: usize,
    sigma0_sq: f64,
    num: Vec<f64>,
    den: Vec<f64>,
    count: usize,
}

impl FingerprintAccumulator {
    pub fn new(height: usize, width: usize, sigma0_sq: f64) -> Self {
        Self {
            height,
            width,
            sigma0_sq,
            num: vec![0.0; height * width],
            den: vec![0.0; height * width],
            count: 0,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    fn check(&self, img: &Image) -> Result<()> {
        if img.dims() != (self.height, self.width) {
            return Err(Error::DimensionMismatch {
                expected: (self.height, self.width),
                got: img.dims(),
            });
        }
        Ok(())
    }

    fn accumulate(&mut self, img: &Image, w: &Image) {
        for (((n, d), &i), &r) in self
            .num
            .iter_mut()
            .zip(self.den.iter_mut())
            .zip(img.pixels())
            .zip(w.pixels())
        {
            let i = i as f64;
            *n += i * r as f64;
            *d += i * i;
        }
        self.count += 1;
    }

    pub fn add(&mut self, img: &Image) -> Result<()> {
        self.check(img)?;
        let w = residual(img, self.sigma0_sq)?;
        self.accumulate(img, &w);
        Ok(())
    }

    /// Residuals are extracted in parallel; sums are still taken in input
    /// order so the result does not depend on the thread count.
    pub fn add_batch(&mut self, imgs: &[Image]) -> Result<()> {
        for img in imgs {
            self.check(img)?;
        }
        let sigma0_sq = self.sigma0_sq;
        let residuals = imgs
            .par_iter()
            .map(|img| residual(img, sigma0_sq))
            .collect::<Result<Vec<_>>>()?;
        for (img, w) in imgs.iter().zip(&residuals) {
            self.accumulate(img, w);
        }
        Ok(())
    }

    pub fn finish(self) -> Result<Fingerprint> {
        if self.count == 0 {
            return Err(Error::InsufficientData(
                "fingerprint needs at least one image".into(),
            ));
        }
        let data = self
            .num
            .iter()
            .zip(&self.den)
            .map(|(&n, &d)| if d == 0.0 { 0.0 } else { n / d })
            .collect::<Vec<_>>();
        Ok(Fingerprint {
            k_hat: Image::from_f64(self.height, self.width, &data)?,
            n_images: self.count,
            adaptation: None,
        })
    }
}

pub fn build_fingerprint(images: &[Image], sigma0_sq: f64) -> Result<Fingerprint> {
    let first = images.first().ok_or_else(|| {
        Error::InsufficientData("fingerprint needs at least one image".into())
    })?;
    let mut acc = FingerprintAccumulator::new(first.height(), first.width(), sigma0_sq);
    acc.add_batch(images)?;
    acc.finish()
}

fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

impl Fingerprint {
    pub fn new(k_hat: Image, n_images: usize) -> Result<Self> {
        if n_images == 0 {
            return Err(Error::InvalidArgument("n_images must be at least 1".into()));
        }
        Ok(Self {
            k_hat,
            n_images,
            adaptation: None,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        self.k_hat.dims()
    }

    /// Writes `path` (binary) and `path` with a `.json` extension (sidecar).
    pub fn save(&self, path: impl AsRef<Path>, device_id: &str, sigma0_sq: f64) -> Result<()> {
        let path = path.as_ref();
        write_fingerprint_bin(&self.k_hat, path)?;
        let side = Sidecar {
            device_id: device_id.to_string(),
            n_images: self.n_images,
            sigma0_sq,
            adaptation: self.adaptation,
        };
        let side_path = sidecar_path(path);
        let text = serde_json::to_string_pretty(&side)?;
        fs::write(&side_path, text + "\n").map_err(|e| Error::io(&side_path, e))
    }

    /// Loads the binary and, when present, its sidecar.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<Sidecar>)> {
        let path = path.as_ref();
        let k_hat = read_fingerprint_bin(path)?;
        let side_path = sidecar_path(path);
        let side = match fs::read_to_string(&side_path) {
            Ok(text) => Some(serde_json::from_str::<Sidecar>(&text)?),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(Error::io(&side_path, e)),
        };
        let fp = Fingerprint {
            k_hat,
            n_images: side.as_ref().map_or(1, |s| s.n_images.max(1)),
            adaptation: side.as_ref().and_then(|s| s.adaptation),
        };
        Ok((fp, side))
    }
}
