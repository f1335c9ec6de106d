//! Pixel masks, COCO uncompressed RLE, IoU and the two instance-image
//! rendering strategies (mask-and-crop, mask-and-blur).
//!
//! RLE runs are column-major: pixel `(x, y)` is the `x * height + y`-th
//! element of the scan, and the first run always counts background pixels.

use image::{Rgb, RgbImage};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MaskError {
    #[error("rle counts sum to {actual}, expected {expected} ({width}x{height})")]
    CountsMismatch {
        width: u32,
        height: u32,
        expected: u64,
        actual: u64,
    },
    #[error("rle counts contain consecutive zero runs at index {index}")]
    NonCanonical { index: usize },
    #[error("mask dimensions must be positive, got {width}x{height}")]
    ZeroDimension { width: u32, height: u32 },
    #[error("mask has no foreground pixel")]
    EmptyMask,
    #[error("dimension mismatch: {left:?} vs {right:?}")]
    DimensionMismatch { left: (u32, u32), right: (u32, u32) },
    #[error("bit buffer holds {actual} cells, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
}

/// A pixel-exact binary mask, stored row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(width: u32, height: u32) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::ZeroDimension { width, height });
        }
        Ok(Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        })
    }

    pub fn full(width: u32, height: u32) -> Result<Self, MaskError> {
        let mut m = Self::new(width, height)?;
        m.bits.fill(true);
        Ok(m)
    }

    /// Builds a mask from a row-major bit buffer.
    pub fn from_row_major(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::ZeroDimension { width, height });
        }
        let expected = width as usize * height as usize;
        if bits.len() != expected {
            return Err(MaskError::BufferLength {
                expected,
                actual: bits.len(),
            });
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn from_fn(
        width: u32,
        height: u32,
        f: impl Fn(u32, u32) -> bool,
    ) -> Result<Self, MaskError> {
        let mut m = Self::new(width, height)?;
        for y in 0..height {
            for x in 0..width {
                m.set(x, y, f(x, y));
            }
        }
        Ok(m)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    #[inline]
    fn index(&self, x: u32, y: u32) -> usize {
        debug_assert!(x < self.width && y < self.height);
        y as usize * self.width as usize + x as usize
    }

    #[inline]
    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[self.index(x, y)]
    }

    #[inline]
    pub fn set(&mut self, x: u32, y: u32, value: bool) {
        let i = self.index(x, y);
        self.bits[i] = value;
    }

    /// Row-major view of the cells.
    pub fn as_row_major(&self) -> &[bool] {
        &self.bits
    }

    pub fn row(&self, y: u32) -> &[bool] {
        let w = self.width as usize;
        let start = y as usize * w;
        &self.bits[start..start + w]
    }

    pub fn area(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    fn check_dims(&self, other: &BinaryMask) -> Result<(), MaskError> {
        if self.dims() != other.dims() {
            return Err(MaskError::DimensionMismatch {
                left: self.dims(),
                right: other.dims(),
            });
        }
        Ok(())
    }

    /// Exact `(|a ∧ b|, |a ∨ b|)` pixel counts.
    pub fn overlap_counts(&self, other: &BinaryMask) -> Result<(u64, u64), MaskError> {
        self.check_dims(other)?;
        let mut inter = 0u64;
        let mut union = 0u64;
        for (&a, &b) in self.bits.iter().zip(&other.bits) {
            inter += u64::from(a & b);
            union += u64::from(a | b);
        }
        Ok((inter, union))
    }
}

/// COCO uncompressed RLE.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RleCounts {
    pub width: u32,
    pub height: u32,
    pub counts: Vec<u32>,
}

impl RleCounts {
    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| u64::from(c)).sum()
    }

    /// Checks the storage invariants: positive dimensions, runs summing to
    /// `width * height`, and no two consecutive zero runs.
    pub fn validate(&self) -> Result<(), MaskError> {
        if self.width == 0 || self.height == 0 {
            return Err(MaskError::ZeroDimension {
                width: self.width,
                height: self.height,
            });
        }
        let expected = u64::from(self.width) * u64::from(self.height);
        let actual = self.total();
        if actual != expected {
            return Err(MaskError::CountsMismatch {
                width: self.width,
                height: self.height,
                expected,
                actual,
            });
        }
        if let Some(i) = self
            .counts
            .windows(2)
            .position(|w| w[0] == 0 && w[1] == 0)
        {
            return Err(MaskError::NonCanonical { index: i + 1 });
        }
        Ok(())
    }

    /// Foreground area straight from the runs.
    pub fn area(&self) -> u64 {
        self.counts.iter().skip(1).step_by(2).map(|&c| u64::from(c)).sum()
    }
}

pub fn rle_decode(rle: &RleCounts) -> Result<BinaryMask, MaskError> {
    let expected = u64::from(rle.width) * u64::from(rle.height);
    let actual = rle.total();
    if actual != expected {
        return Err(MaskError::CountsMismatch {
            width: rle.width,
            height: rle.height,
            expected,
            actual,
        });
    }
    let mut mask = BinaryMask::new(rle.width, rle.height)?;
    let h = rle.height as usize;
    let w = rle.width as usize;
    let mut pos = 0usize;
    let mut value = false;
    for &c in &rle.counts {
        let end = pos + c as usize;
        if value {
            for i in pos..end {
                mask.bits[(i % h) * w + i / h] = true;
            }
        }
        pos = end;
        value = !value;
    }
    Ok(mask)
}

pub fn rle_encode(mask: &BinaryMask) -> RleCounts {
    let (w, h) = (mask.width, mask.height);
    let mut counts = Vec::new();
    let mut current = false;
    let mut run = 0u32;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(x, y);
            if v != current {
                counts.push(run);
                run = 0;
                current = v;
            }
            run += 1;
        }
    }
    counts.push(run);
    RleCounts {
        width: w,
        height: h,
        counts,
    }
}

/// Inclusive pixel box.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

impl BoundingBox {
    pub fn width(&self) -> u32 {
        self.x_max - self.x_min + 1
    }

    pub fn height(&self) -> u32 {
        self.y_max - self.y_min + 1
    }

    pub fn contains(&self, x: u32, y: u32) -> bool {
        (self.x_min..=self.x_max).contains(&x) && (self.y_min..=self.y_max).contains(&y)
    }
}

pub fn tight_bbox(mask: &BinaryMask) -> Result<BoundingBox, MaskError> {
    let mut bbox: Option<BoundingBox> = None;
    for y in 0..mask.height {
        for (x, _) in mask.row(y).iter().enumerate().filter(|(_, &b)| b) {
            let x = x as u32;
            bbox = Some(match bbox {
                None => BoundingBox {
                    x_min: x,
                    y_min: y,
                    x_max: x,
                    y_max: y,
                },
                Some(b) => BoundingBox {
                    x_min: b.x_min.min(x),
                    y_min: b.y_min.min(y),
                    x_max: b.x_max.max(x),
                    y_max: b.y_max.max(y),
                },
            });
        }
    }
    bbox.ok_or(MaskError::EmptyMask)
}

/// Intersection over union. Two empty masks agree perfectly (1.0).
pub fn iou(a: &BinaryMask, b: &BinaryMask) -> Result<f64, MaskError> {
    let (inter, union) = a.overlap_counts(b)?;
    Ok(ratio_or_one(inter, union))
}

pub(crate) fn ratio_or_one(num: u64, den: u64) -> f64 {
    if den == 0 {
        1.0
    } else {
        num as f64 / den as f64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Mask-and-blur: full frame, background blurred.
    #[serde(rename = "MB")]
    MaskBlur,
    /// Mask-and-crop: background filled, cropped to the object.
    #[serde(rename = "MC")]
    MaskCrop,
}

impl Strategy {
    pub fn tag(self) -> &'static str {
        match self {
            Strategy::MaskBlur => "MB",
            Strategy::MaskCrop => "MC",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RenderConfig {
    pub fill_color: [u8; 3],
    pub crop_pad_ratio: f64,
    pub blur_sigma: f64,
    pub encoder_resolution: u32,
}

impl Default for RenderConfig {
    fn default() -> Self {
        Self {
            fill_color: [127, 127, 127],
            crop_pad_ratio: 0.1,
            blur_sigma: 10.0,
            encoder_resolution: 224,
        }
    }
}

/// An encoder-ready rendering of one proposal.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceImage {
    pub pixels: RgbImage,
    pub strategy: Strategy,
}

impl InstanceImage {
    pub fn width(&self) -> u32 {
        self.pixels.width()
    }

    pub fn height(&self) -> u32 {
        self.pixels.height()
    }
}

fn check_image_mask(image: &RgbImage, mask: &BinaryMask) -> Result<(), MaskError> {
    if image.dimensions() != mask.dims() {
        return Err(MaskError::DimensionMismatch {
            left: image.dimensions(),
            right: mask.dims(),
        });
    }
    if mask.is_empty() {
        return Err(MaskError::EmptyMask);
    }
    Ok(())
}

/// Bbox grown by `round(ratio * max(w, h))` on every side, clamped to the
/// image.
pub fn crop_window(bbox: BoundingBox, ratio: f64, width: u32, height: u32) -> BoundingBox {
    let side = f64::from(bbox.width().max(bbox.height()));
    let pad = (ratio.max(0.0) * side).round() as u32;
    BoundingBox {
        x_min: bbox.x_min.saturating_sub(pad),
        y_min: bbox.y_min.saturating_sub(pad),
        x_max: bbox.x_max.saturating_add(pad).min(width - 1),
        y_max: bbox.y_max.saturating_add(pad).min(height - 1),
    }
}

/// Mask-and-crop before the final resize: background filled, cropped to the
/// padded window, then centered on a square canvas of `fill_color`.
pub fn compose_mc(
    image: &RgbImage,
    mask: &BinaryMask,
    cfg: &RenderConfig,
) -> Result<RgbImage, MaskError> {
    check_image_mask(image, mask)?;
    let window = crop_window(
        tight_bbox(mask)?,
        cfg.crop_pad_ratio,
        image.width(),
        image.height(),
    );
    let (cw, ch) = (window.width(), window.height());
    let side = cw.max(ch);
    let (ox, oy) = ((side - cw) / 2, (side - ch) / 2);
    let fill = Rgb(cfg.fill_color);
    let mut out = RgbImage::from_pixel(side, side, fill);
    for y in 0..ch {
        for x in 0..cw {
            let (sx, sy) = (window.x_min + x, window.y_min + y);
            if mask.get(sx, sy) {
                out.put_pixel(ox + x, oy + y, *image.get_pixel(sx, sy));
            }
        }
    }
    Ok(out)
}

/// Mask-and-blur before the final resize: foreground verbatim, background
/// taken from a Gaussian blur of the whole frame.
pub fn compose_mb(
    image: &RgbImage,
    mask: &BinaryMask,
    cfg: &RenderConfig,
) -> Result<RgbImage, MaskError> {
    check_image_mask(image, mask)?;
    let mut out = gaussian_blur(image, cfg.blur_sigma);
    for (x, y, px) in out.enumerate_pixels_mut() {
        if mask.get(x, y) {
            *px = *image.get_pixel(x, y);
        }
    }
    Ok(out)
}

pub fn render_mc(
    image: &RgbImage,
    mask: &BinaryMask,
    cfg: &RenderConfig,
) -> Result<InstanceImage, MaskError> {
    let square = compose_mc(image, mask, cfg)?;
    Ok(InstanceImage {
        pixels: resize_bilinear(&square, cfg.encoder_resolution, cfg.encoder_resolution),
        strategy: Strategy::MaskCrop,
    })
}

pub fn render_mb(
    image: &RgbImage,
    mask: &BinaryMask,
    cfg: &RenderConfig,
) -> Result<InstanceImage, MaskError> {
    let composed = compose_mb(image, mask, cfg)?;
    let square = pad_to_square(&composed, cfg.fill_color);
    Ok(InstanceImage {
        pixels: resize_bilinear(&square, cfg.encoder_resolution, cfg.encoder_resolution),
        strategy: Strategy::MaskBlur,
    })
}

pub fn render(
    strategy: Strategy,
    image: &RgbImage,
    mask: &BinaryMask,
    cfg: &RenderConfig,
) -> Result<InstanceImage, MaskError> {
    match strategy {
        Strategy::MaskBlur => render_mb(image, mask, cfg),
        Strategy::MaskCrop => render_mc(image, mask, cfg),
    }
}

pub fn pad_to_square(image: &RgbImage, fill: [u8; 3]) -> RgbImage {
    let (w, h) = image.dimensions();
    if w == h {
        return image.clone();
    }
    let side = w.max(h);
    let (ox, oy) = ((side - w) / 2, (side - h) / 2);
    let mut out = RgbImage::from_pixel(side, side, Rgb(fill));
    for (x, y, px) in image.enumerate_pixels() {
        out.put_pixel(ox + x, oy + y, *px);
    }
    out
}

/// Separable Gaussian blur, radius `ceil(3 sigma)`, edge-clamped.
/// A non-positive sigma returns the input unchanged.
pub fn gaussian_blur(image: &RgbImage, sigma: f64) -> RgbImage {
    if sigma <= 0.0 || !sigma.is_finite() {
        return image.clone();
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-((k * k) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= norm);

    let (w, h) = (image.width() as i64, image.height() as i64);
    let src: Vec<f64> = image.as_raw().iter().map(|&v| f64::from(v)).collect();
    let mut tmp = vec![0.0f64; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut acc = 0.0;
                for (k, weight) in kernel.iter().enumerate() {
                    let sx = (x + k as i64 - radius).clamp(0, w - 1);
                    acc += weight * src[((y * w + sx) * 3 + c) as usize];
                }
                tmp[((y * w + x) * 3 + c) as usize] = acc;
            }
        }
    }
    let mut out = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for (c, slot) in px.iter_mut().enumerate() {
                let mut acc = 0.0;
                for (k, weight) in kernel.iter().enumerate() {
                    let sy = (y + k as i64 - radius).clamp(0, h - 1);
                    acc += weight * tmp[((sy * w + x) * 3 + c as i64) as usize];
                }
                *slot = acc.round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    out
}

/// Bilinear resize with half-pixel centers and edge clamping.
pub fn resize_bilinear(image: &RgbImage, width: u32, height: u32) -> RgbImage {
    let (sw, sh) = image.dimensions();
    if (sw, sh) == (width, height) {
        return image.clone();
    }
    let sample_axis = |d: u32, src: u32, dst: u32| -> (u32, u32, f64) {
        let s = ((f64::from(d) + 0.5) * f64::from(src) / f64::from(dst) - 0.5)
            .clamp(0.0, f64::from(src - 1));
        let i0 = s.floor() as u32;
        let i1 = (i0 + 1).min(src - 1);
        (i0, i1, s - f64::from(i0))
    };
    let xs: Vec<_> = (0..width).map(|d| sample_axis(d, sw, width)).collect();
    let mut out = RgbImage::new(width, height);
    for dy in 0..height {
        let (y0, y1, fy) = sample_axis(dy, sh, height);
        for (dx, &(x0, x1, fx)) in xs.iter().enumerate() {
            let p00 = image.get_pixel(x0, y0).0;
            let p10 = image.get_pixel(x1, y0).0;
            let p01 = image.get_pixel(x0, y1).0;
            let p11 = image.get_pixel(x1, y1).0;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let top = f64::from(p00[c]) * (1.0 - fx) + f64::from(p10[c]) * fx;
                let bottom = f64::from(p01[c]) * (1.0 - fx) + f64::from(p11[c]) * fx;
                px[c] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(dx as u32, dy, Rgb(px));
        }
    }
    out
}
