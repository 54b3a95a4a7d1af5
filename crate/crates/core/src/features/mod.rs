//! Keypoints, interframe matching, robust homographies and camera momentum.

pub mod homography;
pub mod sift;

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::Image;
use crate::warp::TransformParams;

pub use homography::{estimate_homography, HomographyFit, PointPair, RansacConfig};
pub use sift::{detect_keypoints, Keypoint, SiftConfig};

/// Sanitize threshold in pixels at 1920×1080.
pub const SANITIZE_PX_1080P: f64 = 30.0;

/// Sanitize threshold scaled to a frame's diagonal.
pub fn default_sanitize_threshold(height: usize, width: usize) -> f64 {
    let diag = (height as f64).hypot(width as f64);
    SANITIZE_PX_1080P * diag / 1080f64.hypot(1920.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchConfig {
    pub sift: SiftConfig,
    pub ratio: f64,
    pub ransac: RansacConfig,
    /// Fewer homography inliers than this flags the match as unreliable.
    pub min_inliers: usize,
}

impl Default for MatchConfig {
    fn default() -> Self {
        Self {
            sift: SiftConfig::default(),
            ratio: 0.8,
            ransac: RansacConfig::default(),
            min_inliers: 8,
        }
    }
}

/// Tentative correspondence between keypoint `a` of the first list and
/// keypoint `b` of the second.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Match {
    pub a: usize,
    pub b: usize,
    pub points: PointPair,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchSet {
    /// Ratio-test survivors.
    pub tentative: Vec<Match>,
    /// Homography inlier flags, parallel to `tentative`.
    pub inlier_mask: Vec<bool>,
    pub homography: Option<TransformParams>,
    /// False when too few tentative matches or inliers were found.
    pub reliable: bool,
}

impl MatchSet {
    /// The robustly filtered pairs.
    pub fn pairs(&self) -> Vec<PointPair> {
        self.tentative
            .iter()
            .zip(&self.inlier_mask)
            .filter(|(_, &m)| m)
            .map(|(m, _)| m.points)
            .collect()
    }

    pub fn inlier_ratio(&self) -> f64 {
        if self.tentative.is_empty() {
            return 0.0;
        }
        self.inlier_mask.iter().filter(|&&m| m).count() as f64 / self.tentative.len() as f64
    }

    /// Inlier pairs whose displacement does not exceed `threshold`.
    pub fn sanitized(&self, threshold: f64) -> Vec<PointPair> {
        self.pairs()
            .into_iter()
            .filter(|p| p.displacement() <= threshold)
            .collect()
    }

    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        #[derive(Serialize)]
        struct Row {
            x1: f64,
            y1: f64,
            x2: f64,
            y2: f64,
            inlier: bool,
        }
        let rows: Vec<Row> = self
            .tentative
            .iter()
            .zip(&self.inlier_mask)
            .map(|(m, &inlier)| Row {
                x1: m.points.from[0],
                y1: m.points.from[1],
                x2: m.points.to[0],
                y2: m.points.to[1],
                inlier,
            })
            .collect();
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(&rows)?)
            .map_err(|e| Error::io(path, e))
    }
}

fn dist2(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest-neighbour descriptor matches passing the ratio test.
pub fn ratio_matches(a: &[Keypoint], b: &[Keypoint], ratio: f64) -> Vec<Match> {
    if b.len() < 2 {
        return Vec::new();
    }
    let r2 = (ratio * ratio) as f32;
    a.par_iter()
        .enumerate()
        .filter_map(|(i, ka)| {
            let (mut best, mut second, mut bj) = (f32::INFINITY, f32::INFINITY, 0);
            for (j, kb) in b.iter().enumerate() {
                let d = dist2(&ka.descriptor, &kb.descriptor);
                if d < best {
                    second = best;
                    best = d;
                    bj = j;
                } else if d < second {
                    second = d;
                }
            }
            (best < r2 * second).then(|| Match {
                a: i,
                b: bj,
                points: PointPair::new([ka.x, ka.y], [b[bj].x, b[bj].y]),
            })
        })
        .collect()
}

/// Ratio-test matching followed by robust homography filtering.
pub fn match_keypoints(a: &[Keypoint], b: &[Keypoint], cfg: &MatchConfig) -> MatchSet {
    let tentative = ratio_matches(a, b, cfg.ratio);
    let n = tentative.len();
    if n < 4 {
        return MatchSet {
            inlier_mask: vec![false; n],
            tentative,
            ..Default::default()
        };
    }
    let pts: Vec<PointPair> = tentative.iter().map(|m| m.points).collect();
    match estimate_homography(&pts, &cfg.ransac) {
        Ok(fit) => {
            let reliable = fit.inlier_count() >= cfg.min_inliers;
            MatchSet {
                tentative,
                inlier_mask: fit.inliers,
                homography: Some(fit.h),
                reliable,
            }
        }
        Err(_) => MatchSet {
            inlier_mask: vec![false; n],
            tentative,
            ..Default::default()
        },
    }
}

/// Detects on both frames (concurrently) and matches them.
pub fn match_frames(x: &Image, y: &Image, cfg: &MatchConfig) -> Result<MatchSet> {
    let (ka, kb) = rayon::join(
        || detect_keypoints(x, &cfg.sift),
        || detect_keypoints(y, &cfg.sift),
    );
    Ok(match_keypoints(&ka?, &kb?, cfg))
}

/// Mean displacement of sanitized matched keypoints; `None` when nothing
/// reliable survives.
pub fn camera_momentum(
    i_u: &Image,
    i_v: &Image,
    sanitize_threshold: f64,
    cfg: &MatchConfig,
) -> Result<Option<f64>> {
    let set = match_frames(i_u, i_v, cfg)?;
    Ok(momentum_of(&set, sanitize_threshold))
}

pub fn momentum_of(set: &MatchSet, sanitize_threshold: f64) -> Option<f64> {
    if !set.reliable {
        return None;
    }
    let s = set.sanitized(sanitize_threshold);
    if s.is_empty() {
        return None;
    }
    Some(s.iter().map(PointPair::displacement).sum::<f64>() / s.len() as f64)
}
