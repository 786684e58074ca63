//! Deterministic image preprocessing: bilinear resize to the model's input
//! size, scale to [0,1], per-channel standardization, channel-major layout.

use crate::autodiff::Tensor;
use crate::data::NormStats;
use crate::error::Result;
use image::RgbImage;

/// Bilinear sample in pixel units with half-pixel centers and edge clamping
/// (resize never introduces fill color).
fn resize_bilinear(img: &RgbImage, size: u32) -> Vec<[f32; 3]> {
    let (w, h) = img.dimensions();
    let sx = w as f32 / size as f32;
    let sy = h as f32 / size as f32;
    let mut out = Vec::with_capacity((size * size) as usize);
    for y in 0..size {
        for x in 0..size {
            let src_x = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f32);
            let src_y = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f32);
            let x0 = src_x.floor() as u32;
            let y0 = src_y.floor() as u32;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let fx = src_x - x0 as f32;
            let fy = src_y - y0 as f32;
            let mut px = [0.0f32; 3];
            for c in 0..3 {
                let p00 = img.get_pixel(x0, y0).0[c] as f32;
                let p10 = img.get_pixel(x1, y0).0[c] as f32;
                let p01 = img.get_pixel(x0, y1).0[c] as f32;
                let p11 = img.get_pixel(x1, y1).0[c] as f32;
                let top = p00 * (1.0 - fx) + p10 * fx;
                let bottom = p01 * (1.0 - fx) + p11 * fx;
                px[c] = top * (1.0 - fy) + bottom * fy;
            }
            out.push(px);
        }
    }
    out
}

/// Resize + normalize into a `[3, size, size]` tensor. Channels with zero
/// standard deviation are mean-centered only.
pub fn preprocess(img: &RgbImage, stats: &NormStats, size: u32) -> Result<Tensor> {
    let pixels = resize_bilinear(img, size);
    let n = (size * size) as usize;
    let mut values = vec![0.0f32; 3 * n];
    for c in 0..3 {
        let mean = stats.mean[c];
        let denom = if stats.std[c] > 0.0 { stats.std[c] } else { 1.0 };
        for (i, px) in pixels.iter().enumerate() {
            let v = px[c] as f64 / 255.0;
            values[c * n + i] = ((v - mean) / denom) as f32;
        }
    }
    Tensor::new(vec![3, size as usize, size as usize], values)
}
