//! Eight-parameter stabilization homography and the bilinear warp that applies it.
//!
//! A [`TransformParams`] maps output (stabilized) pixel coordinates `(w', h')`
//! to source coordinates `(w, h)`: `[w h z]ᵀ = T·[w' h' 1]ᵀ`, followed by the
//! homogeneous divide. Coordinates address pixel centres, `w` is the column
//! and `h` the row, and the origin is the centre of the top-left pixel.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::Image;

/// Smallest admissible |det| of the 3×3 matrix.
pub const MIN_DET: f64 = 1e-12;

/// Source samples this close outside the raster are clamped onto it.
const EDGE_EPS: f64 = 1e-9;

/// The matrix entries of the stabilization model, with `t33 ≡ 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TransformParams {
    pub t11: f64,
    pub t12: f64,
    pub t13: f64,
    pub t21: f64,
    pub t22: f64,
    pub t23: f64,
    pub t31: f64,
    pub t32: f64,
}

/// Isotropic scale, rotation entry and translation: the subspace the
/// parameter search explores.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RestrictedParams {
    pub lambda: f64,
    pub theta: f64,
    pub dx: f64,
    pub dy: f64,
}

impl Default for RestrictedParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl RestrictedParams {
    pub const IDENTITY: Self = Self {
        lambda: 1.0,
        theta: 0.0,
        dx: 0.0,
        dy: 0.0,
    };

    pub fn new(lambda: f64, theta: f64, dx: f64, dy: f64) -> Result<Self> {
        let p = Self {
            lambda,
            theta,
            dx,
            dy,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda > 0.0)
            || !self.theta.is_finite()
            || !self.dx.is_finite()
            || !self.dy.is_finite()
        {
            return Err(Error::InvalidArgument(format!(
                "restricted parameters {self:?} need finite values and lambda > 0"
            )));
        }
        Ok(())
    }

    pub fn to_matrix(&self) -> TransformParams {
        to_matrix(self)
    }
}

/// `t11 = t22 = λ`, `t12 = θ`, `t21 = −θ`, translation in the third column.
pub fn to_matrix(p: &RestrictedParams) -> TransformParams {
    debug_assert!(p.lambda > 0.0);
    TransformParams {
        t11: p.lambda,
        t12: p.theta,
        t13: p.dx,
        t21: -p.theta,
        t22: p.lambda,
        t23: p.dy,
        t31: 0.0,
        t32: 0.0,
    }
}

impl Default for TransformParams {
    fn default() -> Self {
        Self::IDENTITY
    }
}

impl TransformParams {
    pub const IDENTITY: Self = Self {
        t11: 1.0,
        t12: 0.0,
        t13: 0.0,
        t21: 0.0,
        t22: 1.0,
        t23: 0.0,
        t31: 0.0,
        t32: 0.0,
    };

    pub fn scaling(s: f64) -> Self {
        Self {
            t11: s,
            t22: s,
            ..Self::IDENTITY
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self {
            t13: dx,
            t23: dy,
            ..Self::IDENTITY
        }
    }

    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        let s = m[2][2];
        if s.abs() < MIN_DET || !s.is_finite() {
            return Err(Error::Singular(s));
        }
        let t = Self {
            t11: m[0][0] / s,
            t12: m[0][1] / s,
            t13: m[0][2] / s,
            t21: m[1][0] / s,
            t22: m[1][1] / s,
            t23: m[1][2] / s,
            t31: m[2][0] / s,
            t32: m[2][1] / s,
        };
        t.check_invertible()?;
        Ok(t)
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        [
            [self.t11, self.t12, self.t13],
            [self.t21, self.t22, self.t23],
            [self.t31, self.t32, 1.0],
        ]
    }

    pub fn determinant(&self) -> f64 {
        let m = self.matrix();
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn check_invertible(&self) -> Result<()> {
        let det = self.determinant();
        if !det.is_finite() || det.abs() <= MIN_DET {
            return Err(Error::Singular(det));
        }
        Ok(())
    }

    /// Maps an output coordinate to its source coordinate.
    #[inline]
    pub fn map_point(&self, w: f64, h: f64) -> (f64, f64) {
        let z = self.t31 * w + self.t32 * h + 1.0;
        (
            (self.t11 * w + self.t12 * h + self.t13) / z,
            (self.t21 * w + self.t22 * h + self.t23) / z,
        )
    }

    /// Matrix product `self · other`: warping by `self` and then by `other`
    /// equals one warp by the product.
    pub fn compose(&self, other: &TransformParams) -> Result<TransformParams> {
        let a = self.matrix();
        let b = other.matrix();
        let mut m = [[0.0; 3]; 3];
        for (i, row) in m.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = (0..3).map(|k| a[i][k] * b[k][j]).sum();
            }
        }
        TransformParams::from_matrix(m)
    }

    /// Projects onto the restricted subspace by averaging the diagonal and
    /// antisymmetric parts; projective terms are dropped.
    pub fn to_restricted(&self) -> RestrictedParams {
        RestrictedParams {
            lambda: 0.5 * (self.t11 + self.t22),
            theta: 0.5 * (self.t12 - self.t21),
            dx: self.t13,
            dy: self.t23,
        }
    }
}

/// Matrix inverse, renormalized so the bottom-right entry is 1.
pub fn invert(t: &TransformParams) -> Result<TransformParams> {
    let det = t.determinant();
    if !det.is_finite() || det.abs() <= MIN_DET {
        return Err(Error::Singular(det));
    }
    let m = t.matrix();
    let cof = |r0: usize, r1: usize, c0: usize, c1: usize| m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0];
    let adj = [
        [cof(1, 2, 1, 2), -cof(0, 2, 1, 2), cof(0, 1, 1, 2)],
        [-cof(1, 2, 0, 2), cof(0, 2, 0, 2), -cof(0, 1, 0, 2)],
        [cof(1, 2, 0, 1), -cof(0, 2, 0, 1), cof(0, 1, 0, 1)],
    ];
    let inv = adj.map(|row| row.map(|v| v / det));
    TransformParams::from_matrix(inv)
}

/// Bilinear sample with zero outside the raster.
#[inline]
pub fn sample_bilinear(img: &Image, x: f64, y: f64) -> f64 {
    let (h, w) = img.dims();
    let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
    if !(x >= -EDGE_EPS && y >= -EDGE_EPS && x <= xmax + EDGE_EPS && y <= ymax + EDGE_EPS) {
        return 0.0;
    }
    let x = x.clamp(0.0, xmax);
    let y = y.clamp(0.0, ymax);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let x1 = if x0 + 1 < w { x0 + 1 } else { x0 };
    let y1 = if y0 + 1 < h { y0 + 1 } else { y0 };
    let p00 = img.get(y0, x0) as f64;
    if fx == 0.0 && fy == 0.0 {
        return p00;
    }
    let p01 = img.get(y0, x1) as f64;
    let p10 = img.get(y1, x0) as f64;
    let p11 = img.get(y1, x1) as f64;
    (1.0 - fy) * ((1.0 - fx) * p00 + fx * p01) + fy * ((1.0 - fx) * p10 + fx * p11)
}

/// `T_t(y)`: every output pixel samples `y` at its mapped source coordinate.
pub fn apply_transform(
    y: &Image,
    t: &TransformParams,
    out_h: usize,
    out_w: usize,
) -> Result<Image> {
    t.check_invertible()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::InvalidDimensions(format!(
            "warp output {out_h}x{out_w} is empty"
        )));
    }
    let mut data = Vec::with_capacity(out_h * out_w);
    let affine = t.t31 == 0.0 && t.t32 == 0.0;
    for r in 0..out_h {
        let hp = r as f64;
        for c in 0..out_w {
            let wp = c as f64;
            let (sx, sy) = if affine {
                (
                    t.t11 * wp + t.t12 * hp + t.t13,
                    t.t21 * wp + t.t22 * hp + t.t23,
                )
            } else {
                let z = t.t31 * wp + t.t32 * hp + 1.0;
                if z.abs() < 1e-12 {
                    data.push(0.0);
                    continue;
                }
                (
                    (t.t11 * wp + t.t12 * hp + t.t13) / z,
                    (t.t21 * wp + t.t22 * hp + t.t23) / z,
                )
            };
            data.push(sample_bilinear(y, sx, sy) as f32);
        }
    }
    Image::new(out_h, out_w, data)
}
