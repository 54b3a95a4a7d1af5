//! Difference-of-Gaussians keypoints with gradient-histogram descriptors.
//!
//! Follows Lowe's construction without the initial ×2 upsampling: octave
//! pyramid of Gaussian layers, DoG extrema with quadratic sub-pixel
//! refinement, contrast and edge rejection, 36-bin orientation histograms,
//! and the 4×4×8 descriptor clamped at 0.2.

use std::f64::consts::PI;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imagecore::Image;

pub const DESCRIPTOR_LEN: usize = 128;
const DESC_WIDTH: usize = 4;
const DESC_BINS: usize = 8;
const ORI_BINS: usize = 36;
const ORI_PEAK_RATIO: f64 = 0.8;
const ORI_SIGMA_FACTOR: f64 = 1.5;
const DESC_CLAMP: f32 = 0.2;
const MAX_REFINE_STEPS: usize = 5;
/// Blur assumed already present in the input.
const INPUT_SIGMA: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SiftConfig {
    pub sigma: f64,
    pub scales_per_octave: usize,
    pub contrast_threshold: f64,
    pub edge_ratio: f64,
    pub border: usize,
    /// Frames wider than this are detected at half resolution.
    pub max_width: usize,
}

impl Default for SiftConfig {
    fn default() -> Self {
        Self {
            sigma: 1.6,
            scales_per_octave: 3,
            contrast_threshold: 0.04,
            edge_ratio: 10.0,
            border: 5,
            max_width: 1920,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Keypoint {
    /// Column coordinate, pixel centres at integers.
    pub x: f64,
    /// Row coordinate.
    pub y: f64,
    pub scale: f64,
    /// Radians in `[0, 2π)`, measured from +x towards +y.
    pub orientation: f64,
    /// Unit-norm descriptor.
    pub descriptor: Vec<f32>,
}

#[derive(Clone)]
struct Plane {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Plane {
    #[inline]
    fn at(&self, r: usize, c: usize) -> f32 {
        self.data[r * self.w + c]
    }

    fn halve(&self) -> Plane {
        let (h, w) = (self.h / 2, self.w / 2);
        let mut data = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                data.push(self.at(2 * r, 2 * c));
            }
        }
        Plane { h, w, data }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f32> {
    let radius = (4.0 * sigma).ceil().max(1.0) as i64;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k.into_iter().map(|v| v as f32).collect()
}

#[inline]
fn reflect101(i: i64, n: usize) -> usize {
    let n = n as i64;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let mut i = i.rem_euclid(period);
    if i >= n {
        i = period - i;
    }
    i as usize
}

fn blur(src: &Plane, sigma: f64) -> Plane {
    let k = gaussian_kernel(sigma);
    let rad = (k.len() / 2) as i64;
    let (h, w) = (src.h, src.w);
    let mut tmp = vec![0f32; h * w];
    for r in 0..h {
        let row = &src.data[r * w..(r + 1) * w];
        for c in 0..w {
            let mut acc = 0f32;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * row[reflect101(c as i64 + t as i64 - rad, w)];
            }
            tmp[r * w + c] = acc;
        }
    }
    let mut out = vec![0f32; h * w];
    for (t, &kv) in k.iter().enumerate() {
        for r in 0..h {
            let sr = reflect101(r as i64 + t as i64 - rad, h);
            let src_row = &tmp[sr * w..(sr + 1) * w];
            let dst = &mut out[r * w..(r + 1) * w];
            for (d, &s) in dst.iter_mut().zip(src_row) {
                *d += kv * s;
            }
        }
    }
    Plane { h, w, data: out }
}

struct Octave {
    gauss: Vec<Plane>,
    dog: Vec<Plane>,
}

fn octave_count(h: usize, w: usize) -> usize {
    let min_side = h.min(w) as f64;
    (min_side.log2().floor() as i64 - 3).max(1) as usize
}

fn build_pyramid(base: Plane, cfg: &SiftConfig) -> Vec<Octave> {
    let s = cfg.scales_per_octave;
    let k = 2f64.powf(1.0 / s as f64);
    let mut incr = vec![cfg.sigma; s + 3];
    for (i, v) in incr.iter_mut().enumerate().skip(1) {
        let prev = cfg.sigma * k.powi(i as i32 - 1);
        let total = prev * k;
        *v = (total * total - prev * prev).sqrt();
    }
    let n_oct = octave_count(base.h, base.w);
    let mut octaves: Vec<Octave> = Vec::with_capacity(n_oct);
    for o in 0..n_oct {
        let first = if o == 0 {
            base.clone()
        } else {
            octaves[o - 1].gauss[s].halve()
        };
        let mut gauss = vec![first];
        for &sg in &incr[1..] {
            let next = blur(gauss.last().expect("non-empty"), sg);
            gauss.push(next);
        }
        let dog = gauss
            .windows(2)
            .map(|p| Plane {
                h: p[0].h,
                w: p[0].w,
                data: p[1].data.iter().zip(&p[0].data).map(|(a, b)| a - b).collect(),
            })
            .collect();
        octaves.push(Octave { gauss, dog });
    }
    octaves
}

fn is_extremum(dog: &[Plane], layer: usize, r: usize, c: usize, v: f32) -> bool {
    let positive = v > 0.0;
    for plane in &dog[layer - 1..=layer + 1] {
        for rr in r - 1..=r + 1 {
            for cc in c - 1..=c + 1 {
                let n = plane.at(rr, cc);
                if (positive && n > v) || (!positive && n < v) {
                    return false;
                }
            }
        }
    }
    true
}

struct Extremum {
    octave: usize,
    layer: usize,
    r: usize,
    c: usize,
    offset: Vector3<f64>,
}

fn refine(oct: &Octave, octave: usize, mut layer: usize, mut r: usize, mut c: usize, cfg: &SiftConfig) -> Option<Extremum> {
    let s = cfg.scales_per_octave;
    let (h, w) = (oct.dog[0].h, oct.dog[0].w);
    let b = cfg.border;
    let mut step = 0;
    let (offset, grad) = loop {
        let d = |l: usize, rr: usize, cc: usize| oct.dog[l].at(rr, cc) as f64;
        let v = d(layer, r, c);
        let g = Vector3::new(
            (d(layer, r, c + 1) - d(layer, r, c - 1)) * 0.5,
            (d(layer, r + 1, c) - d(layer, r - 1, c)) * 0.5,
            (d(layer + 1, r, c) - d(layer - 1, r, c)) * 0.5,
        );
        let dxx = d(layer, r, c + 1) + d(layer, r, c - 1) - 2.0 * v;
        let dyy = d(layer, r + 1, c) + d(layer, r - 1, c) - 2.0 * v;
        let dss = d(layer + 1, r, c) + d(layer - 1, r, c) - 2.0 * v;
        let dxy = (d(layer, r + 1, c + 1) - d(layer, r + 1, c - 1) - d(layer, r - 1, c + 1)
            + d(layer, r - 1, c - 1))
            * 0.25;
        let dxs = (d(layer + 1, r, c + 1) - d(layer + 1, r, c - 1) - d(layer - 1, r, c + 1)
            + d(layer - 1, r, c - 1))
            * 0.25;
        let dys = (d(layer + 1, r + 1, c) - d(layer + 1, r - 1, c) - d(layer - 1, r + 1, c)
            + d(layer - 1, r - 1, c))
            * 0.25;
        let hess = Matrix3::new(dxx, dxy, dxs, dxy, dyy, dys, dxs, dys, dss);
        let x = -hess.lu().solve(&g)?;
        if x.iter().all(|v| v.abs() < 0.5) {
            break (x, g);
        }
        if x.iter().any(|v| v.abs() > 1e6) {
            return None;
        }
        step += 1;
        if step >= MAX_REFINE_STEPS {
            return None;
        }
        let nc = c as i64 + x[0].round() as i64;
        let nr = r as i64 + x[1].round() as i64;
        let nl = layer as i64 + x[2].round() as i64;
        if nl < 1 || nl > s as i64 || nc < b as i64 || nc >= (w - b) as i64 || nr < b as i64 || nr >= (h - b) as i64 {
            return None;
        }
        c = nc as usize;
        r = nr as usize;
        layer = nl as usize;
    };

    let contrast = oct.dog[layer].at(r, c) as f64 + 0.5 * grad.dot(&offset);
    if contrast.abs() * (s as f64) < cfg.contrast_threshold {
        return None;
    }
    let p = &oct.dog[layer];
    let v = p.at(r, c) as f64;
    let dxx = p.at(r, c + 1) as f64 + p.at(r, c - 1) as f64 - 2.0 * v;
    let dyy = p.at(r + 1, c) as f64 + p.at(r - 1, c) as f64 - 2.0 * v;
    let dxy = (p.at(r + 1, c + 1) as f64 - p.at(r + 1, c - 1) as f64 - p.at(r - 1, c + 1) as f64
        + p.at(r - 1, c - 1) as f64)
        * 0.25;
    let tr = dxx + dyy;
    let det = dxx * dyy - dxy * dxy;
    let er = cfg.edge_ratio;
    if det <= 0.0 || tr * tr * er >= (er + 1.0) * (er + 1.0) * det {
        return None;
    }
    Some(Extremum {
        octave,
        layer,
        r,
        c,
        offset,
    })
}

fn orientations(g: &Plane, x: f64, y: f64, sigma_oct: f64) -> Vec<f64> {
    let sig = ORI_SIGMA_FACTOR * sigma_oct;
    let radius = (3.0 * sig).round() as i64;
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    let denom = 2.0 * sig * sig;
    let mut hist = [0f64; ORI_BINS];
    for i in -radius..=radius {
        let r = cy + i;
        if r <= 0 || r >= g.h as i64 - 1 {
            continue;
        }
        for j in -radius..=radius {
            let c = cx + j;
            if c <= 0 || c >= g.w as i64 - 1 {
                continue;
            }
            let (r, c) = (r as usize, c as usize);
            let dx = (g.at(r, c + 1) - g.at(r, c - 1)) as f64;
            let dy = (g.at(r + 1, c) - g.at(r - 1, c)) as f64;
            let wgt = (-((i * i + j * j) as f64) / denom).exp();
            let ang = dy.atan2(dx);
            let bin = ((ORI_BINS as f64 * ang / (2.0 * PI)).round() as i64).rem_euclid(ORI_BINS as i64);
            hist[bin as usize] += wgt * (dx * dx + dy * dy).sqrt();
        }
    }
    let n = ORI_BINS;
    let smooth: Vec<f64> = (0..n)
        .map(|i| {
            let at = |k: i64| hist[(i as i64 + k).rem_euclid(n as i64) as usize];
            (at(-2) + at(2)) / 16.0 + (at(-1) + at(1)) * 4.0 / 16.0 + at(0) * 6.0 / 16.0
        })
        .collect();
    let max = smooth.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut out = Vec::new();
    for i in 0..n {
        let l = smooth[(i + n - 1) % n];
        let rgt = smooth[(i + 1) % n];
        let v = smooth[i];
        if v > l && v > rgt && v >= ORI_PEAK_RATIO * max {
            let bin = i as f64 + 0.5 * (l - rgt) / (l - 2.0 * v + rgt);
            out.push((2.0 * PI * bin / n as f64).rem_euclid(2.0 * PI));
        }
    }
    out
}

fn descriptor(g: &Plane, x: f64, y: f64, sigma_oct: f64, ori: f64) -> Vec<f32> {
    let d = DESC_WIDTH as f64;
    let nb = DESC_BINS;
    let hist_width = 3.0 * sigma_oct;
    let radius = ((hist_width * std::f64::consts::SQRT_2 * (d + 1.0) * 0.5).round() as i64)
        .min(((g.h * g.h + g.w * g.w) as f64).sqrt() as i64);
    let (cos_t, sin_t) = (ori.cos() / hist_width, ori.sin() / hist_width);
    let (cx, cy) = (x.round() as i64, y.round() as i64);
    let exp_scale = -1.0 / (d * d * 0.5);
    let mut hist = vec![0f64; DESCRIPTOR_LEN];
    let dw = DESC_WIDTH;
    for i in -radius..=radius {
        for j in -radius..=radius {
            // Offsets expressed in the keypoint's rotated frame, in bin units.
            let c_rot = j as f64 * cos_t + i as f64 * sin_t;
            let r_rot = -(j as f64) * sin_t + i as f64 * cos_t;
            let rbin = r_rot + d / 2.0 - 0.5;
            let cbin = c_rot + d / 2.0 - 0.5;
            if rbin <= -1.0 || rbin >= d || cbin <= -1.0 || cbin >= d {
                continue;
            }
            let (r, c) = (cy + i, cx + j);
            if r <= 0 || r >= g.h as i64 - 1 || c <= 0 || c >= g.w as i64 - 1 {
                continue;
            }
            let (r, c) = (r as usize, c as usize);
            let dx = (g.at(r, c + 1) - g.at(r, c - 1)) as f64;
            let dy = (g.at(r + 1, c) - g.at(r - 1, c)) as f64;
            let mag = (dx * dx + dy * dy).sqrt() * ((c_rot * c_rot + r_rot * r_rot) * exp_scale).exp();
            let obin = (dy.atan2(dx) - ori).rem_euclid(2.0 * PI) * nb as f64 / (2.0 * PI);

            let (r0, c0, o0) = (rbin.floor(), cbin.floor(), obin.floor());
            let (fr, fc, fo) = (rbin - r0, cbin - c0, obin - o0);
            for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
                let rr = r0 as i64 + dr;
                if rr < 0 || rr >= dw as i64 {
                    continue;
                }
                for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
                    let cc = c0 as i64 + dc;
                    if cc < 0 || cc >= dw as i64 {
                        continue;
                    }
                    for (dq, wo) in [(0, 1.0 - fo), (1, fo)] {
                        let oo = (o0 as usize + dq) % nb;
                        hist[(rr as usize * dw + cc as usize) * nb + oo] += mag * wr * wc * wo;
                    }
                }
            }
        }
    }
    let norm = hist.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm == 0.0 {
        return vec![0.0; DESCRIPTOR_LEN];
    }
    let mut desc: Vec<f32> = hist.iter().map(|&v| ((v / norm) as f32).min(DESC_CLAMP)).collect();
    let norm2 = desc.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>().sqrt() as f32;
    desc.iter_mut().for_each(|v| *v /= norm2);
    desc
}

/// Detects keypoints and computes their descriptors.
pub fn detect_keypoints(img: &Image, cfg: &SiftConfig) -> Result<Vec<Keypoint>> {
    let (h, w) = img.dims();
    if h < 64 || w < 64 {
        return Err(Error::InvalidDimensions(format!(
            "{h}x{w} is below the 64x64 keypoint minimum"
        )));
    }
    let half = w > cfg.max_width;
    let base = if half {
        let (hh, hw) = (h / 2, w / 2);
        let mut data = Vec::with_capacity(hh * hw);
        for r in 0..hh {
            for c in 0..hw {
                let s = img.get(2 * r, 2 * c)
                    + img.get(2 * r, 2 * c + 1)
                    + img.get(2 * r + 1, 2 * c)
                    + img.get(2 * r + 1, 2 * c + 1);
                data.push(s / (4.0 * 255.0));
            }
        }
        Plane { h: hh, w: hw, data }
    } else {
        Plane {
            h,
            w,
            data: img.pixels().iter().map(|&v| v / 255.0).collect(),
        }
    };
    if img.is_constant() {
        return Ok(Vec::new());
    }
    let init = (cfg.sigma * cfg.sigma - INPUT_SIGMA * INPUT_SIGMA).max(0.01).sqrt();
    let octaves = build_pyramid(blur(&base, init), cfg);

    let s = cfg.scales_per_octave;
    let prelim = (0.5 * cfg.contrast_threshold / s as f64) as f32;
    let mut out = Vec::new();
    for (o, oct) in octaves.iter().enumerate() {
        let (oh, ow) = (oct.dog[0].h, oct.dog[0].w);
        let b = cfg.border;
        if oh <= 2 * b || ow <= 2 * b {
            continue;
        }
        for layer in 1..=s {
            for r in b..oh - b {
                for c in b..ow - b {
                    let v = oct.dog[layer].at(r, c);
                    if v.abs() <= prelim || !is_extremum(&oct.dog, layer, r, c, v) {
                        continue;
                    }
                    let Some(ext) = refine(oct, o, layer, r, c, cfg) else {
                        continue;
                    };
                    let oscale = (1u64 << ext.octave) as f64;
                    let xo = ext.c as f64 + ext.offset[0];
                    let yo = ext.r as f64 + ext.offset[1];
                    let sigma_oct =
                        cfg.sigma * 2f64.powf((ext.layer as f64 + ext.offset[2]) / s as f64);
                    let g = &oct.gauss[ext.layer];
                    let (mut kx, mut ky, mut ks) = (xo * oscale, yo * oscale, sigma_oct * oscale);
                    if half {
                        kx = 2.0 * kx + 0.5;
                        ky = 2.0 * ky + 0.5;
                        ks *= 2.0;
                    }
                    if kx < 0.0 || ky < 0.0 || kx > (w - 1) as f64 || ky > (h - 1) as f64 {
                        continue;
                    }
                    for ori in orientations(g, xo, yo, sigma_oct) {
                        out.push(Keypoint {
                            x: kx,
                            y: ky,
                            scale: ks,
                            orientation: ori,
                            descriptor: descriptor(g, xo, yo, sigma_oct, ori),
                        });
                    }
                }
            }
        }
    }
    out.retain(|k| k.descriptor.iter().any(|&v| v != 0.0));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(h: usize, w: usize, cy: f64, cx: f64, s: f64) -> Image {
        Image::from_fn(h, w, |r, c| {
            let d2 = (r as f64 - cy).powi(2) + (c as f64 - cx).powi(2);
            (20.0 + 200.0 * (-d2 / (2.0 * s * s)).exp()) as f32
        })
    }

    #[test]
    fn constant_image_has_no_keypoints() {
        let kps = detect_keypoints(&Image::filled(96, 96, 77.0), &SiftConfig::default()).unwrap();
        assert!(kps.is_empty());
    }

    #[test]
    fn too_small_is_rejected() {
        assert!(detect_keypoints(&Image::filled(63, 100, 1.0), &SiftConfig::default()).is_err());
    }

    #[test]
    fn blob_centre_is_found() {
        let img = blob(96, 96, 41.3, 52.6, 4.0);
        let kps = detect_keypoints(&img, &SiftConfig::default()).unwrap();
        assert!(!kps.is_empty());
        let best = kps
            .iter()
            .map(|k| ((k.x - 52.6).powi(2) + (k.y - 41.3).powi(2)).sqrt())
            .fold(f64::INFINITY, f64::min);
        assert!(best < 2.0, "nearest keypoint {best} px away");
    }

    #[test]
    fn descriptors_are_unit_norm() {
        let img = blob(96, 96, 48.0, 48.0, 5.0);
        for k in detect_keypoints(&img, &SiftConfig::default()).unwrap() {
            assert_eq!(k.descriptor.len(), DESCRIPTOR_LEN);
            let n: f64 = k.descriptor.iter().map(|&v| (v as f64).powi(2)).sum();
            assert!((n.sqrt() - 1.0).abs() < 1e-6);
            assert!(k.orientation >= 0.0 && k.orientation < 2.0 * PI);
        }
    }

    #[test]
    fn octave_counts() {
        assert_eq!(octave_count(64, 64), 3);
        assert_eq!(octave_count(1080, 1920), 7);
        assert_eq!(octave_count(8, 8), 1);
    }

    #[test]
    fn reflect_index() {
        let got: Vec<usize> = (-3..8).map(|i| reflect101(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
    }

    #[test]
    fn kernel_sums_to_one() {
        for s in [0.8, 1.6, 3.2] {
            let k = gaussian_kernel(s);
            assert!((k.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
}
