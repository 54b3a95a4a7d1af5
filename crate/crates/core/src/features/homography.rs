//! Robust planar homography from point correspondences.

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::warp::TransformParams;

/// Minimum twice-area (px²) a triple of sample points must span.
const MIN_TRIPLE_AREA2: f64 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    /// Reprojection error (px) below which a pair counts as an inlier.
    pub threshold: f64,
    pub max_iters: usize,
    pub confidence: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        Self {
            threshold: 2.0,
            max_iters: 2000,
            confidence: 0.995,
            seed: 0,
        }
    }
}

/// Pair of corresponding points `(x, y)` in the first and second frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PointPair {
    pub from: [f64; 2],
    pub to: [f64; 2],
}

impl PointPair {
    pub fn new(from: [f64; 2], to: [f64; 2]) -> Self {
        Self { from, to }
    }

    pub fn displacement(&self) -> f64 {
        (self.to[0] - self.from[0]).hypot(self.to[1] - self.from[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HomographyFit {
    /// Maps first-frame points onto second-frame points.
    pub h: TransformParams,
    pub inliers: Vec<bool>,
}

impl HomographyFit {
    pub fn inlier_count(&self) -> usize {
        self.inliers.iter().filter(|&&b| b).count()
    }
}

fn area2(a: [f64; 2], b: [f64; 2], c: [f64; 2]) -> f64 {
    ((b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])).abs()
}

fn degenerate(pts: &[[f64; 2]; 4]) -> bool {
    const TRIPLES: [[usize; 3]; 4] = [[0, 1, 2], [0, 1, 3], [0, 2, 3], [1, 2, 3]];
    TRIPLES
        .iter()
        .any(|t| area2(pts[t[0]], pts[t[1]], pts[t[2]]) < MIN_TRIPLE_AREA2)
}

/// Similarity normalization moving the centroid to 0 and mean distance to √2.
fn normalizer(pts: impl Iterator<Item = [f64; 2]> + Clone) -> Matrix3<f64> {
    let n = pts.clone().count() as f64;
    let (sx, sy) = pts.clone().fold((0.0, 0.0), |a, p| (a.0 + p[0], a.1 + p[1]));
    let (mx, my) = (sx / n, sy / n);
    let md = pts.map(|p| (p[0] - mx).hypot(p[1] - my)).sum::<f64>() / n;
    let s = if md > 0.0 { std::f64::consts::SQRT_2 / md } else { 1.0 };
    Matrix3::new(s, 0.0, -s * mx, 0.0, s, -s * my, 0.0, 0.0, 1.0)
}

fn apply(m: &Matrix3<f64>, p: [f64; 2]) -> [f64; 2] {
    let v = m * Vector3::new(p[0], p[1], 1.0);
    [v[0] / v[2], v[1] / v[2]]
}

/// Normalized direct linear transform over all given pairs.
fn dlt(pairs: &[&PointPair]) -> Option<Matrix3<f64>> {
    let n = pairs.len();
    if n < 4 {
        return None;
    }
    let ta = normalizer(pairs.iter().map(|p| p.from));
    let tb = normalizer(pairs.iter().map(|p| p.to));
    let rows = (2 * n).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, p) in pairs.iter().enumerate() {
        let [x, y] = apply(&ta, p.from);
        let [u, v] = apply(&tb, p.to);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, u * x, u * y, u];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, v * x, v * y, v];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let vt = svd.v_t?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = vt.row(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let full = tb.try_inverse()? * hn * ta;
    if full[(2, 2)].abs() < 1e-12 {
        return None;
    }
    let full = full / full[(2, 2)];
    if full.iter().any(|v| !v.is_finite()) || full.determinant().abs() < 1e-12 {
        return None;
    }
    Some(full)
}

fn reprojection_error(h: &Matrix3<f64>, p: &PointPair) -> f64 {
    let q = h * Vector3::new(p.from[0], p.from[1], 1.0);
    if q[2].abs() < 1e-12 {
        return f64::INFINITY;
    }
    (q[0] / q[2] - p.to[0]).hypot(q[1] / q[2] - p.to[1])
}

fn score(h: &Matrix3<f64>, pairs: &[PointPair], thr: f64) -> (Vec<bool>, usize, f64) {
    let mut mask = Vec::with_capacity(pairs.len());
    let mut count = 0;
    let mut err = 0.0;
    for p in pairs {
        let e = reprojection_error(h, p);
        let inl = e < thr;
        if inl {
            count += 1;
            err += e;
        }
        mask.push(inl);
    }
    (mask, count, err)
}

/// RANSAC over 4-point hypotheses followed by a least-squares refit.
///
/// The returned matrix `H` satisfies `to ≈ H(from)`, so warping the second
/// frame by `H` (see [`crate::warp::apply_transform`]) aligns it to the first.
pub fn estimate_homography(pairs: &[PointPair], cfg: &RansacConfig) -> Result<HomographyFit> {
    let n = pairs.len();
    if n < 4 {
        return Err(Error::InsufficientData(format!(
            "homography needs 4 pairs, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<(Matrix3<f64>, usize, f64)> = None;
    let mut needed = cfg.max_iters;
    let mut iter = 0;
    while iter < needed.min(cfg.max_iters) {
        iter += 1;
        let idx = sample(&mut rng, n, 4);
        let sel: [&PointPair; 4] = std::array::from_fn(|i| &pairs[idx.index(i)]);
        if degenerate(&sel.map(|p| p.from)) || degenerate(&sel.map(|p| p.to)) {
            continue;
        }
        let Some(h) = dlt(&sel) else { continue };
        let (_, count, err) = score(&h, pairs, cfg.threshold);
        let better = match &best {
            None => count >= 4,
            Some((_, bc, be)) => count > *bc || (count == *bc && err < *be),
        };
        if better {
            best = Some((h, count, err));
            let w = count as f64 / n as f64;
            let p_fail = 1.0 - w.powi(4);
            needed = if p_fail <= f64::EPSILON {
                iter
            } else {
                let k = (1.0 - cfg.confidence).ln() / p_fail.ln();
                (k.ceil() as usize).max(iter)
            };
        }
    }
    let (mut h, _, _) = best.ok_or_else(|| {
        Error::Degenerate("no non-degenerate homography with 4 inliers".into())
    })?;
    let (mut mask, mut count, _) = score(&h, pairs, cfg.threshold);
    // Refit on the consensus set until it stops growing.
    for _ in 0..5 {
        let inl: Vec<&PointPair> = pairs.iter().zip(&mask).filter(|(_, &m)| m).map(|(p, _)| p).collect();
        let Some(refit) = dlt(&inl) else { break };
        let (m2, c2, _) = score(&refit, pairs, cfg.threshold);
        if c2 < count {
            break;
        }
        let stable = m2 == mask;
        h = refit;
        mask = m2;
        count = c2;
        if stable {
            break;
        }
    }
    if count < 4 {
        return Err(Error::Degenerate("consensus set below 4 pairs".into()));
    }
    let m = [
        [h[(0, 0)], h[(0, 1)], h[(0, 2)]],
        [h[(1, 0)], h[(1, 1)], h[(1, 2)]],
        [h[(2, 0)], h[(2, 1)], h[(2, 2)]],
    ];
    Ok(HomographyFit {
        h: TransformParams::from_matrix(m)?,
        inliers: mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn grid_pairs(h: &TransformParams, n: usize) -> Vec<PointPair> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        (0..n)
            .map(|_| {
                let p = [rng.random_range(0.0..400.0), rng.random_range(0.0..300.0)];
                let (u, v) = h.map_point(p[0], p[1]);
                PointPair::new(p, [u, v])
            })
            .collect()
    }

    #[test]
    fn exact_identity_from_four_pairs() {
        let pairs: Vec<PointPair> = [[0.0, 0.0], [100.0, 0.0], [0.0, 80.0], [120.0, 90.0]]
            .iter()
            .map(|&p| PointPair::new(p, p))
            .collect();
        let fit = estimate_homography(&pairs, &RansacConfig::default()).unwrap();
        let m = fit.h.matrix();
        for (i, row) in m.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((v - e).abs() < 1e-9, "{m:?}");
            }
        }
        assert_eq!(fit.inlier_count(), 4);
    }

    #[test]
    fn collinear_points_are_rejected() {
        let pairs: Vec<PointPair> = (0..20)
            .map(|i| {
                let p = [i as f64 * 5.0, i as f64 * 2.0];
                PointPair::new(p, [p[0] + 3.0, p[1]])
            })
            .collect();
        assert!(estimate_homography(&pairs, &RansacConfig::default()).is_err());
    }

    #[test]
    fn too_few_pairs() {
        let p = PointPair::new([0.0, 0.0], [1.0, 1.0]);
        assert!(matches!(
            estimate_homography(&[p; 3], &RansacConfig::default()),
            Err(Error::InsufficientData(_))
        ));
    }

    #[test]
    fn translation_of_second_points_shifts_translation_terms() {
        let h = TransformParams::from_matrix([[1.01, 0.02, 3.0], [-0.015, 0.99, -2.0], [0.0, 0.0, 1.0]])
            .unwrap();
        let pairs = grid_pairs(&h, 30);
        let base = estimate_homography(&pairs, &RansacConfig::default()).unwrap().h;
        let (dx, dy) = (7.5, -4.25);
        let moved: Vec<PointPair> = pairs
            .iter()
            .map(|p| PointPair::new(p.from, [p.to[0] + dx, p.to[1] + dy]))
            .collect();
        let shifted = estimate_homography(&moved, &RansacConfig::default()).unwrap().h;
        assert!((shifted.t13 - base.t13 - dx).abs() < 1e-6);
        assert!((shifted.t23 - base.t23 - dy).abs() < 1e-6);
        assert!((shifted.t11 - base.t11).abs() < 1e-9);
    }

    #[test]
    fn projective_model_recovered_despite_outliers() {
        let h = TransformParams::from_matrix([
            [0.98, 0.05, 12.0],
            [-0.03, 1.02, -6.0],
            [1e-5, -2e-5, 1.0],
        ])
        .unwrap();
        let mut pairs = grid_pairs(&h, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for p in pairs.iter_mut().take(30) {
            p.to = [rng.random_range(0.0..400.0), rng.random_range(0.0..300.0)];
        }
        let fit = estimate_homography(&pairs, &RansacConfig::default()).unwrap();
        assert!(fit.inlier_count() >= 70);
        for p in &pairs[30..] {
            let (u, v) = fit.h.map_point(p.from[0], p.from[1]);
            assert!((u - p.to[0]).hypot(v - p.to[1]) < 1e-6);
        }
    }

    #[test]
    fn same_seed_same_result() {
        let h = TransformParams::translation(4.0, 1.0);
        let mut pairs = grid_pairs(&h, 40);
        pairs[0].to = [0.0, 0.0];
        pairs[1].to = [50.0, 3.0];
        let cfg = RansacConfig { seed: 99, ..Default::default() };
        assert_eq!(
            estimate_homography(&pairs, &cfg).unwrap(),
            estimate_homography(&pairs, &cfg).unwrap()
        );
    }
}
