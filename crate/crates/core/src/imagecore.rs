//! Pixel containers, raster I/O, padding and fingerprint geometry adaptation.
//!
//! [`Image`] is the single-channel `f32` container used everywhere in the
//! crate. Values are nominally on the 0–255 luminance scale; 16-bit sources
//! are rescaled onto it when loaded.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageFormat, ImageReader};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::warp::{self, TransformParams};

/// ITU-R BT.601 luma weights.
pub const BT601: [f32; 3] = [0.299, 0.587, 0.114];

/// Row-major single-channel image with finite pixel values.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidDimensions(format!(
                "{height}x{width} image has no pixels"
            )));
        }
        if data.len() != height * width {
            return Err(Error::InvalidDimensions(format!(
                "{height}x{width} image needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "non-finite pixel at ({}, {})",
                pos / width,
                pos % width
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    /// Panics on zero dimensions; use [`Image::new`] for fallible construction.
    pub fn zeros(height: usize, width: usize) -> Self {
        Self::filled(height, width, 0.0)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        assert!(value.is_finite());
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    /// Builds an image from `f(row, col)`.
    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f32) -> Self {
        assert!(height > 0 && width > 0, "image dimensions must be positive");
        let mut data = Vec::with_capacity(height * width);
        for r in 0..height {
            for c in 0..width {
                let v = f(r, c);
                assert!(v.is_finite(), "non-finite pixel at ({r}, {c})");
                data.push(v);
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Builds from `f64` samples, rounding to `f32`.
    pub fn from_f64(height: usize, width: usize, data: &[f64]) -> Result<Self> {
        Self::new(height, width, data.iter().map(|&v| v as f32).collect())
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: f32) {
        debug_assert!(value.is_finite());
        self.data[row * self.width + col] = value;
    }

    #[inline]
    pub fn pixels(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, row: usize) -> &[f32] {
        &self.data[row * self.width..(row + 1) * self.width]
    }

    pub fn into_pixels(self) -> Vec<f32> {
        self.data
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum::<f64>() / self.data.len() as f64
    }

    /// Population variance.
    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.data
            .iter()
            .map(|&v| {
                let d = v as f64 - m;
                d * d
            })
            .sum::<f64>()
            / self.data.len() as f64
    }

    pub fn sum_sq(&self) -> f64 {
        self.data.iter().map(|&v| (v as f64) * (v as f64)).sum()
    }

    pub fn is_constant(&self) -> bool {
        let first = self.data[0];
        self.data.iter().all(|&v| v == first)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Image {
        Image::from_fn(self.height, self.width, |r, c| f(self.get(r, c)))
    }

    pub fn rotate180(&self) -> Image {
        let mut data = self.data.clone();
        data.reverse();
        Image {
            height: self.height,
            width: self.width,
            data,
        }
    }

    pub fn crop(&self, rect: &CropRect) -> Result<Image> {
        rect.check_inside(self.height, self.width)?;
        let (h, w) = (rect.height(), rect.width());
        let mut data = Vec::with_capacity(h * w);
        for r in rect.h_tl..rect.h_br {
            data.extend_from_slice(&self.row(r)[rect.w_tl..rect.w_br]);
        }
        Ok(Image {
            height: h,
            width: w,
            data,
        })
    }
}

/// Rectangular crop given by its top-left and bottom-right (exclusive) corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub w_tl: usize,
    pub h_tl: usize,
    pub w_br: usize,
    pub h_br: usize,
}

impl CropRect {
    pub fn new(w_tl: usize, h_tl: usize, w_br: usize, h_br: usize) -> Result<Self> {
        if w_tl >= w_br || h_tl >= h_br {
            return Err(Error::InvalidArgument(format!(
                "crop ({w_tl},{h_tl})-({w_br},{h_br}) is empty or inverted"
            )));
        }
        Ok(Self {
            w_tl,
            h_tl,
            w_br,
            h_br,
        })
    }

    pub fn full(height: usize, width: usize) -> Self {
        Self {
            w_tl: 0,
            h_tl: 0,
            w_br: width,
            h_br: height,
        }
    }

    /// A `height`×`width` crop centred in a `outer_h`×`outer_w` plane.
    pub fn centered(outer_h: usize, outer_w: usize, height: usize, width: usize) -> Result<Self> {
        if height > outer_h || width > outer_w {
            return Err(Error::InvalidArgument(format!(
                "{height}x{width} crop does not fit in {outer_h}x{outer_w}"
            )));
        }
        let h_tl = (outer_h - height) / 2;
        let w_tl = (outer_w - width) / 2;
        Self::new(w_tl, h_tl, w_tl + width, h_tl + height)
    }

    pub fn height(&self) -> usize {
        self.h_br - self.h_tl
    }

    pub fn width(&self) -> usize {
        self.w_br - self.w_tl
    }

    pub fn check_inside(&self, height: usize, width: usize) -> Result<()> {
        if self.w_tl >= self.w_br || self.h_tl >= self.h_br {
            return Err(Error::InvalidArgument(format!("crop {self:?} is empty")));
        }
        if self.w_br > width || self.h_br > height {
            return Err(Error::InvalidArgument(format!(
                "crop ({},{})-({},{}) exceeds {height}x{width} image",
                self.w_tl, self.h_tl, self.w_br, self.h_br
            )));
        }
        Ok(())
    }
}

impl std::str::FromStr for CropRect {
    type Err = Error;

    /// Parses `w_tl,h_tl,w_br,h_br`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<usize> = s
            .split(',')
            .map(|p| p.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidArgument(format!("bad crop '{s}': {e}")))?;
        match parts[..] {
            [a, b, c, d] => CropRect::new(a, b, c, d),
            _ => Err(Error::InvalidArgument(format!(
                "crop '{s}' must have four comma-separated values"
            ))),
        }
    }
}

/// Loads a PNG or PGM file as luminance on the 0–255 scale.
pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .map_err(|e| Error::io(path, e))?
        .with_guessed_format()
        .map_err(|e| Error::io(path, e))?;
    match reader.format() {
        Some(ImageFormat::Png) | Some(ImageFormat::Pnm) => {}
        Some(other) => return Err(Error::UnsupportedFormat(format!("{other:?}"))),
        None => {
            return Err(Error::UnsupportedFormat(format!(
                "{} is not a PNG or PGM file",
                path.display()
            )))
        }
    }
    let decoded = reader.decode().map_err(|e| Error::Decode {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    dynamic_to_luma(decoded)
}

fn dynamic_to_luma(img: DynamicImage) -> Result<Image> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(Error::InvalidDimensions("zero-sized raster".into()));
    }
    let luma3 = |r: f32, g: f32, b: f32| BT601[0] * r + BT601[1] * g + BT601[2] * b;
    let scale16 = 255.0 / 65535.0;
    let data: Vec<f32> = match img {
        DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(f32::from).collect(),
        DynamicImage::ImageLumaA8(b) => b.pixels().map(|p| p.0[0] as f32).collect(),
        DynamicImage::ImageLuma16(b) => b
            .into_raw()
            .into_iter()
            .map(|v| v as f32 * scale16)
            .collect(),
        DynamicImage::ImageLumaA16(b) => b.pixels().map(|p| p.0[0] as f32 * scale16).collect(),
        DynamicImage::ImageRgb8(b) => b
            .pixels()
            .map(|p| luma3(p.0[0] as f32, p.0[1] as f32, p.0[2] as f32))
            .collect(),
        DynamicImage::ImageRgba8(b) => b
            .pixels()
            .map(|p| luma3(p.0[0] as f32, p.0[1] as f32, p.0[2] as f32))
            .collect(),
        DynamicImage::ImageRgb16(b) => b
            .pixels()
            .map(|p| luma3(p.0[0] as f32, p.0[1] as f32, p.0[2] as f32) * scale16)
            .collect(),
        DynamicImage::ImageRgba16(b) => b
            .pixels()
            .map(|p| luma3(p.0[0] as f32, p.0[1] as f32, p.0[2] as f32) * scale16)
            .collect(),
        other => {
            return Err(Error::UnsupportedFormat(format!(
                "color type {:?}",
                other.color()
            )))
        }
    };
    Image::new(h, w, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BitDepth {
    Eight,
    Sixteen,
}

fn quantize(img: &Image, depth: BitDepth) -> DynamicImage {
    let (w, h) = (img.width() as u32, img.height() as u32);
    match depth {
        BitDepth::Eight => {
            let raw: Vec<u8> = img
                .pixels()
                .iter()
                .map(|&v| v.round().clamp(0.0, 255.0) as u8)
                .collect();
            DynamicImage::ImageLuma8(image::GrayImage::from_raw(w, h, raw).expect("sized buffer"))
        }
        BitDepth::Sixteen => {
            let raw: Vec<u16> = img
                .pixels()
                .iter()
                .map(|&v| (v as f64 * 65535.0 / 255.0).round().clamp(0.0, 65535.0) as u16)
                .collect();
            DynamicImage::ImageLuma16(
                image::ImageBuffer::from_raw(w, h, raw).expect("sized buffer"),
            )
        }
    }
}

/// Writes a grayscale PNG, rounding and clamping to the target depth.
pub fn save_png(img: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    save_as(img, path.as_ref(), depth, ImageFormat::Png)
}

/// Writes a binary (P5) PGM, rounding and clamping to the target depth.
pub fn save_pgm(img: &Image, path: impl AsRef<Path>, depth: BitDepth) -> Result<()> {
    save_as(img, path.as_ref(), depth, ImageFormat::Pnm)
}

fn save_as(img: &Image, path: &Path, depth: BitDepth, format: ImageFormat) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let q = quantize(img, depth);
    if let (ImageFormat::Pnm, DynamicImage::ImageLuma16(buf)) = (format, &q) {
        // The pnm encoder only writes 8-bit graymaps; P5 with maxval 65535
        // stores big-endian samples.
        let mut bytes = format!("P5\n{} {}\n65535\n", buf.width(), buf.height()).into_bytes();
        bytes.extend(buf.as_raw().iter().flat_map(|v| v.to_be_bytes()));
        out.write_all(&bytes).map_err(|e| Error::io(path, e))?;
    } else if format == ImageFormat::Pnm {
        // The generic writer picks P5 for grayscale buffers.
        let enc = image::codecs::pnm::PnmEncoder::new(&mut out)
            .with_subtype(image::codecs::pnm::PnmSubtype::Graymap(
                image::codecs::pnm::SampleEncoding::Binary,
            ));
        q.write_with_encoder(enc).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    } else {
        q.write_to(&mut out, format).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Places `x` at the top-left of a zero `target_h`×`target_w` plane.
pub fn zero_pad(x: &Image, target_h: usize, target_w: usize) -> Result<Image> {
    if target_h < x.height() || target_w < x.width() {
        return Err(Error::InvalidArgument(format!(
            "cannot pad {}x{} down to {target_h}x{target_w}",
            x.height(),
            x.width()
        )));
    }
    let mut out = Image::zeros(target_h, target_w);
    for r in 0..x.height() {
        out.data[r * target_w..r * target_w + x.width()].copy_from_slice(x.row(r));
    }
    Ok(out)
}

/// Output size of a down-scaling by `scale`.
pub fn scaled_dims(height: usize, width: usize, scale: f64) -> (usize, usize) {
    (
        ((height as f64) / scale).floor() as usize,
        ((width as f64) / scale).floor() as usize,
    )
}

/// Down-scales `k` by `scale` with bilinear resampling, then crops.
///
/// Output pixel `(r, c)` of the scaled plane samples the source at
/// `(r·scale, c·scale)`, i.e. the same top-left pixel-centre convention as
/// [`warp::apply_transform`].
pub fn adapt_fingerprint(k: &Image, scale: f64, crop: &CropRect) -> Result<Image> {
    let scaled = downscale(k, scale)?;
    scaled.crop(crop)
}

pub fn downscale(k: &Image, scale: f64) -> Result<Image> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::InvalidArgument(format!("scale {scale} must be > 0")));
    }
    let (h, w) = scaled_dims(k.height(), k.width(), scale);
    if h == 0 || w == 0 {
        return Err(Error::InvalidDimensions(format!(
            "scale {scale} collapses {}x{} to nothing",
            k.height(),
            k.width()
        )));
    }
    if scale == 1.0 {
        return Ok(k.clone());
    }
    let t = TransformParams::scaling(scale);
    warp::apply_transform(k, &t, h, w)
}

const FP_MAGIC: &[u8; 4] = b"PRNU";

/// Writes the raw fingerprint format: `PRNU`, u32 height, u32 width, then
/// row-major little-endian `f32` values.
pub fn write_fingerprint_bin(img: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut buf = Vec::with_capacity(12 + 4 * img.len());
    buf.extend_from_slice(FP_MAGIC);
    buf.extend_from_slice(&(img.height() as u32).to_le_bytes());
    buf.extend_from_slice(&(img.width() as u32).to_le_bytes());
    for &v in img.pixels() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf).map_err(|e| Error::io(path, e))?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_fingerprint_bin(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Decode {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[..4] != FP_MAGIC {
        return Err(bad("missing PRNU header"));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let body = &bytes[12..];
    if body.len() != h * w * 4 {
        return Err(bad(&format!(
            "expected {} payload bytes for {h}x{w}, found {}",
            h * w * 4,
            body.len()
        )));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Image::new(h, w, data)
}
