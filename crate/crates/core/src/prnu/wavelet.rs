//! Orthogonal periodized 2-D DWT and the locally adaptive wavelet-domain
//! Wiener denoiser used to extract noise residuals.

use crate::error::{Error, Result};
use crate::imagecore::Image;

/// Decomposition depth of the denoiser.
pub const LEVELS: usize = 4;

/// Square windows over which local signal variance is estimated.
pub const WINDOWS: [usize; 4] = [3, 5, 7, 9];

/// Smallest image side the denoiser accepts.
pub const MIN_SIDE: usize = 64;

/// Stationary noise variance matching σ = 3 grey levels.
pub const DEFAULT_SIGMA0_SQ: f64 = 9.0;

/// 8-tap Daubechies scaling filter (four vanishing moments).
const LOWPASS: [f64; 8] = [
    0.230_377_813_308_855_23,
    0.714_846_570_552_541_5,
    0.630_880_767_929_590_4,
    -0.027_983_769_416_983_85,
    -0.187_034_811_718_881_14,
    0.030_841_381_835_986_965,
    0.032_883_011_666_982_945,
    -0.010_597_401_784_997_278,
];

fn highpass() -> [f64; 8] {
    let n = LOWPASS.len();
    std::array::from_fn(|i| {
        let sign = if i % 2 == 0 { 1.0 } else { -1.0 };
        sign * LOWPASS[n - 1 - i]
    })
}

/// One analysis step on a strided line of even length `n`.
fn analyze_line(src: &[f64], lo: &mut [f64], hi: &mut [f64], g: &[f64; 8]) {
    let n = src.len();
    let half = n / 2;
    for k in 0..half {
        let mut a = 0.0;
        let mut d = 0.0;
        for (j, (&hj, &gj)) in LOWPASS.iter().zip(g.iter()).enumerate() {
            let v = src[(2 * k + j) % n];
            a += hj * v;
            d += gj * v;
        }
        lo[k] = a;
        hi[k] = d;
    }
}

fn synthesize_line(lo: &[f64], hi: &[f64], dst: &mut [f64], g: &[f64; 8]) {
    let n = dst.len();
    dst.iter_mut().for_each(|v| *v = 0.0);
    for k in 0..lo.len() {
        let (a, d) = (lo[k], hi[k]);
        for (j, (&hj, &gj)) in LOWPASS.iter().zip(g.iter()).enumerate() {
            dst[(2 * k + j) % n] += a * hj + d * gj;
        }
    }
}

/// In-place multi-level forward transform of a `h`×`w` row-major buffer in
/// Mallat layout. Both sides must be divisible by `2^levels`.
pub fn dwt2(buf: &mut [f64], h: usize, w: usize, levels: usize) {
    let g = highpass();
    let (mut ch, mut cw) = (h, w);
    let mut line = vec![0.0; h.max(w)];
    let mut lo = vec![0.0; h.max(w) / 2];
    let mut hi = vec![0.0; h.max(w) / 2];
    for _ in 0..levels {
        debug_assert!(ch % 2 == 0 && cw % 2 == 0);
        for r in 0..ch {
            let row = &mut buf[r * w..r * w + cw];
            line[..cw].copy_from_slice(row);
            analyze_line(&line[..cw], &mut lo[..cw / 2], &mut hi[..cw / 2], &g);
            row[..cw / 2].copy_from_slice(&lo[..cw / 2]);
            row[cw / 2..].copy_from_slice(&hi[..cw / 2]);
        }
        for c in 0..cw {
            for r in 0..ch {
                line[r] = buf[r * w + c];
            }
            analyze_line(&line[..ch], &mut lo[..ch / 2], &mut hi[..ch / 2], &g);
            for r in 0..ch / 2 {
                buf[r * w + c] = lo[r];
                buf[(r + ch / 2) * w + c] = hi[r];
            }
        }
        ch /= 2;
        cw /= 2;
    }
}

/// Inverse of [`dwt2`].
pub fn idwt2(buf: &mut [f64], h: usize, w: usize, levels: usize) {
    let g = highpass();
    let mut line = vec![0.0; h.max(w)];
    let mut lo = vec![0.0; h.max(w) / 2];
    let mut hi = vec![0.0; h.max(w) / 2];
    for level in (0..levels).rev() {
        let ch = h >> level;
        let cw = w >> level;
        for c in 0..cw {
            for r in 0..ch / 2 {
                lo[r] = buf[r * w + c];
                hi[r] = buf[(r + ch / 2) * w + c];
            }
            synthesize_line(&lo[..ch / 2], &hi[..ch / 2], &mut line[..ch], &g);
            for r in 0..ch {
                buf[r * w + c] = line[r];
            }
        }
        for r in 0..ch {
            let row = &mut buf[r * w..r * w + cw];
            lo[..cw / 2].copy_from_slice(&row[..cw / 2]);
            hi[..cw / 2].copy_from_slice(&row[cw / 2..]);
            synthesize_line(&lo[..cw / 2], &hi[..cw / 2], &mut line[..cw], &g);
            row.copy_from_slice(&line[..cw]);
        }
    }
}

/// Symmetric (half-sample) reflection of index `i` into `0..n`.
fn reflect(i: usize, n: usize) -> usize {
    let period = 2 * n;
    let m = i % period;
    if m < n {
        m
    } else {
        period - 1 - m
    }
}

/// Attenuates one detail subband in place.
fn wiener_subband(buf: &mut [f64], stride: usize, r0: usize, c0: usize, bh: usize, bw: usize, sigma0_sq: f64) {
    // Integral image of squared coefficients, (bh+1)×(bw+1).
    let iw = bw + 1;
    let mut integral = vec![0.0f64; (bh + 1) * iw];
    for r in 0..bh {
        let mut acc = 0.0;
        for c in 0..bw {
            let v = buf[(r0 + r) * stride + c0 + c];
            acc += v * v;
            integral[(r + 1) * iw + c + 1] = integral[r * iw + c + 1] + acc;
        }
    }
    for r in 0..bh {
        for c in 0..bw {
            let mut best = f64::INFINITY;
            for &win in &WINDOWS {
                let half = win / 2;
                let ra = r.saturating_sub(half);
                let rb = (r + half + 1).min(bh);
                let ca = c.saturating_sub(half);
                let cb = (c + half + 1).min(bw);
                let sum = integral[rb * iw + cb] - integral[ra * iw + cb] - integral[rb * iw + ca]
                    + integral[ra * iw + ca];
                let count = ((rb - ra) * (cb - ca)) as f64;
                let var = (sum / count - sigma0_sq).max(0.0);
                best = best.min(var);
            }
            let idx = (r0 + r) * stride + c0 + c;
            buf[idx] *= best / (best + sigma0_sq);
        }
    }
}

/// Denoised estimate `F(I)`.
///
/// Sides that are not multiples of `2^LEVELS` are extended by symmetric
/// reflection and cropped back afterwards.
pub fn denoise(img: &Image, sigma0_sq: f64) -> Result<Image> {
    let (h, w) = img.dims();
    if h < MIN_SIDE || w < MIN_SIDE {
        return Err(Error::InvalidDimensions(format!(
            "denoiser needs at least {MIN_SIDE}x{MIN_SIDE} for {LEVELS} levels, got {h}x{w}"
        )));
    }
    if !(sigma0_sq.is_finite() && sigma0_sq > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma0_sq must be positive, got {sigma0_sq}"
        )));
    }
    let block = 1usize << LEVELS;
    let ph = h.div_ceil(block) * block;
    let pw = w.div_ceil(block) * block;

    // Shifting by a pixel value keeps flat images exactly zero in the
    // transform domain.
    let offset = img.get(0, 0) as f64;
    let mut buf = vec![0.0f64; ph * pw];
    for r in 0..ph {
        let sr = reflect(r, h);
        let src = img.row(sr);
        let dst = &mut buf[r * pw..(r + 1) * pw];
        for (c, d) in dst.iter_mut().enumerate() {
            *d = src[reflect(c, w)] as f64 - offset;
        }
    }

    dwt2(&mut buf, ph, pw, LEVELS);
    for level in 0..LEVELS {
        let bh = ph >> (level + 1);
        let bw = pw >> (level + 1);
        wiener_subband(&mut buf, pw, 0, bw, bh, bw, sigma0_sq);
        wiener_subband(&mut buf, pw, bh, 0, bh, bw, sigma0_sq);
        wiener_subband(&mut buf, pw, bh, bw, bh, bw, sigma0_sq);
    }
    idwt2(&mut buf, ph, pw, LEVELS);

    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        out.extend(buf[r * pw..r * pw + w].iter().map(|&v| (v + offset) as f32));
    }
    Image::new(h, w, out)
}

/// Noise residual `W(I) = I − F(I)`.
pub fn residual(img: &Image, sigma0_sq: f64) -> Result<Image> {
    let f = denoise(img, sigma0_sq)?;
    let data = img
        .pixels()
        .iter()
        .zip(f.pixels())
        .map(|(&i, &d)| (i as f64 - d as f64) as f32)
        .collect();
    Image::new(img.height(), img.width(), data)
}
