//! The twelve image transformations and their magnitude-to-parameter table.
//!
//! The pool is the common fourteen-transform set minus Solarize and
//! Equalize, which distort face colors. The parameter table (version v1,
//! recorded in the policy sidecar) at shared magnitude M in 0..=30:
//!
//! | kind                               | parameter                          |
//! |------------------------------------|------------------------------------|
//! | Rotate                             | +-M degrees                        |
//! | ShearX / ShearY                    | +-0.01 * M shear factor            |
//! | TranslateX / TranslateY            | +-(M/30 * 0.33) of the dimension   |
//! | Posterize                          | 8 - round(M * 4/30) bits           |
//! | Color/Contrast/Brightness/Sharpness| factor 1 +- 0.03 * M               |
//! | Identity / AutoContrast            | parameterless                      |
//!
//! Geometric transforms sample bilinearly with black fill outside bounds
//! and preserve image dimensions.

use crate::error::{Error, Result};
use image::{Rgb, RgbImage};

/// Version tag for the magnitude table above.
pub const MAGNITUDE_TABLE_VERSION: &str = "v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TransformKind {
    Identity,
    AutoContrast,
    Rotate,
    Posterize,
    Color,
    Contrast,
    Brightness,
    Sharpness,
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
}

impl TransformKind {
    pub const ALL: [TransformKind; 12] = [
        TransformKind::Identity,
        TransformKind::AutoContrast,
        TransformKind::Rotate,
        TransformKind::Posterize,
        TransformKind::Color,
        TransformKind::Contrast,
        TransformKind::Brightness,
        TransformKind::Sharpness,
        TransformKind::ShearX,
        TransformKind::ShearY,
        TransformKind::TranslateX,
        TransformKind::TranslateY,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TransformKind::Identity => "identity",
            TransformKind::AutoContrast => "autocontrast",
            TransformKind::Rotate => "rotate",
            TransformKind::Posterize => "posterize",
            TransformKind::Color => "color",
            TransformKind::Contrast => "contrast",
            TransformKind::Brightness => "brightness",
            TransformKind::Sharpness => "sharpness",
            TransformKind::ShearX => "shear_x",
            TransformKind::ShearY => "shear_y",
            TransformKind::TranslateX => "translate_x",
            TransformKind::TranslateY => "translate_y",
        }
    }
}

/// Maps a shared magnitude and direction sign to the concrete parameter for
/// one transform kind. Translate parameters are fractions of the image
/// dimension; Posterize returns the bit count.
pub fn magnitude_map(kind: TransformKind, magnitude: u8, direction: i8) -> Result<f32> {
    if magnitude > 30 {
        return Err(Error::invalid(format!(
            "magnitude must be in 0..=30, got {magnitude}"
        )));
    }
    let m = magnitude as f32;
    let sign = if direction >= 0 { 1.0 } else { -1.0 };
    Ok(match kind {
        TransformKind::Identity | TransformKind::AutoContrast => 0.0,
        TransformKind::Rotate => sign * m,
        TransformKind::ShearX | TransformKind::ShearY => sign * 0.01 * m,
        TransformKind::TranslateX | TransformKind::TranslateY => sign * (m / 30.0) * 0.33,
        TransformKind::Posterize => 8.0 - (m as f64 * 4.0 / 30.0).round() as f32,
        TransformKind::Color
        | TransformKind::Contrast
        | TransformKind::Brightness
        | TransformKind::Sharpness => 1.0 + sign * 0.03 * m,
    })
}

/// Applies one transform. Output dimensions always equal the input's and
/// every channel stays within 8-bit range.
pub fn apply_transform(img: &RgbImage, kind: TransformKind, parameter: f32) -> RgbImage {
    match kind {
        TransformKind::Identity => img.clone(),
        TransformKind::AutoContrast => autocontrast(img),
        TransformKind::Rotate => {
            let theta = parameter.to_radians();
            let (sin, cos) = (theta.sin(), theta.cos());
            // Inverse-map each output pixel through the rotation about center.
            affine_sample(img, |x, y, cx, cy| {
                let (dx, dy) = (x - cx, y - cy);
                (cx + cos * dx + sin * dy, cy - sin * dx + cos * dy)
            })
        }
        TransformKind::ShearX => affine_sample(img, move |x, y, _cx, cy| {
            (x - parameter * (y - cy), y)
        }),
        TransformKind::ShearY => affine_sample(img, move |x, y, cx, _cy| {
            (x, y - parameter * (x - cx))
        }),
        TransformKind::TranslateX => {
            let dx = parameter * img.width() as f32;
            affine_sample(img, move |x, y, _cx, _cy| (x - dx, y))
        }
        TransformKind::TranslateY => {
            let dy = parameter * img.height() as f32;
            affine_sample(img, move |x, y, _cx, _cy| (x, y - dy))
        }
        TransformKind::Posterize => {
            let bits = (parameter as i32).clamp(1, 8) as u8;
            let mask = 0xFFu8 << (8 - bits);
            map_pixels(img, |v| v & mask)
        }
        TransformKind::Color => {
            let f = parameter;
            let mut out = img.clone();
            for px in out.pixels_mut() {
                let gray = luma(px.0);
                for c in 0..3 {
                    px.0[c] = blend(gray, px.0[c] as f32, f);
                }
            }
            out
        }
        TransformKind::Contrast => {
            let f = parameter;
            let n = (img.width() * img.height()) as f64;
            let mean =
                (img.pixels().map(|p| luma(p.0) as f64).sum::<f64>() / n) as f32;
            let mut out = img.clone();
            for px in out.pixels_mut() {
                for c in 0..3 {
                    px.0[c] = blend(mean, px.0[c] as f32, f);
                }
            }
            out
        }
        TransformKind::Brightness => {
            let f = parameter;
            map_pixels(img, |v| (v as f32 * f).round().clamp(0.0, 255.0) as u8)
        }
        TransformKind::Sharpness => sharpness(img, parameter),
    }
}

fn luma(px: [u8; 3]) -> f32 {
    0.299 * px[0] as f32 + 0.587 * px[1] as f32 + 0.114 * px[2] as f32
}

/// `base + f * (value - base)`, rounded and clamped to u8.
fn blend(base: f32, value: f32, f: f32) -> u8 {
    (base + f * (value - base)).round().clamp(0.0, 255.0) as u8
}

fn map_pixels(img: &RgbImage, f: impl Fn(u8) -> u8) -> RgbImage {
    let mut out = img.clone();
    for px in out.pixels_mut() {
        for c in 0..3 {
            px.0[c] = f(px.0[c]);
        }
    }
    out
}

/// Per-channel min/max stretch to the full 8-bit range.
fn autocontrast(img: &RgbImage) -> RgbImage {
    let mut lo = [255u8; 3];
    let mut hi = [0u8; 3];
    for px in img.pixels() {
        for c in 0..3 {
            lo[c] = lo[c].min(px.0[c]);
            hi[c] = hi[c].max(px.0[c]);
        }
    }
    let mut out = img.clone();
    for px in out.pixels_mut() {
        for c in 0..3 {
            if hi[c] > lo[c] {
                let v = (px.0[c] - lo[c]) as f32 * 255.0 / (hi[c] - lo[c]) as f32;
                px.0[c] = v.round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// 3x3 smoothing kernel (center 5, ring 1, /13) on interior pixels, then a
/// blend toward (factor > 1) or away from (factor < 1) the original.
fn sharpness(img: &RgbImage, factor: f32) -> RgbImage {
    let (w, h) = img.dimensions();
    let mut out = img.clone();
    if w < 3 || h < 3 {
        return out;
    }
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            for c in 0..3 {
                let mut acc = 0.0f32;
                for dy in 0..3 {
                    for dx in 0..3 {
                        let weight = if dx == 1 && dy == 1 { 5.0 } else { 1.0 };
                        acc += weight * img.get_pixel(x + dx - 1, y + dy - 1).0[c] as f32;
                    }
                }
                let smooth = acc / 13.0;
                out.get_pixel_mut(x, y).0[c] =
                    blend(smooth, img.get_pixel(x, y).0[c] as f32, factor);
            }
        }
    }
    out
}

/// Inverse-mapping affine sampler: for each output pixel, `src` gives the
/// source coordinates; values are sampled bilinearly with black outside.
fn affine_sample(
    img: &RgbImage,
    src: impl Fn(f32, f32, f32, f32) -> (f32, f32),
) -> RgbImage {
    let (w, h) = img.dimensions();
    let (cx, cy) = ((w as f32 - 1.0) / 2.0, (h as f32 - 1.0) / 2.0);
    let mut out = RgbImage::new(w, h);
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = src(x as f32, y as f32, cx, cy);
            out.put_pixel(x, y, Rgb(bilinear_black(img, sx, sy)));
        }
    }
    out
}

/// Bilinear sample treating everything outside the image as black.
fn bilinear_black(img: &RgbImage, x: f32, y: f32) -> [u8; 3] {
    let (w, h) = (img.width() as i64, img.height() as i64);
    let x0 = x.floor();
    let y0 = y.floor();
    let fx = x - x0;
    let fy = y - y0;
    let fetch = |xi: i64, yi: i64| -> [f32; 3] {
        if xi < 0 || yi < 0 || xi >= w || yi >= h {
            [0.0; 3]
        } else {
            let p = img.get_pixel(xi as u32, yi as u32).0;
            [p[0] as f32, p[1] as f32, p[2] as f32]
        }
    };
    let (x0i, y0i) = (x0 as i64, y0 as i64);
    let p00 = fetch(x0i, y0i);
    let p10 = fetch(x0i + 1, y0i);
    let p01 = fetch(x0i, y0i + 1);
    let p11 = fetch(x0i + 1, y0i + 1);
    let mut out = [0u8; 3];
    for c in 0..3 {
        let top = p00[c] * (1.0 - fx) + p10[c] * fx;
        let bottom = p01[c] * (1.0 - fx) + p11[c] * fx;
        out[c] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
    }
    out
}
