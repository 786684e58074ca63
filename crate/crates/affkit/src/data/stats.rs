//! Per-channel normalization statistics of a training set, computed on
//! pixel values scaled to [0,1] with population standard deviation.

use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use rayon::prelude::*;
use std::path::Path;

/// Channel order R, G, B.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl NormStats {
    /// Identity statistics: mean 0, std 1 (no-op normalization).
    pub fn identity() -> Self {
        NormStats {
            mean: [0.0; 3],
            std: [1.0; 3],
        }
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, ch) in ["r", "g", "b"].iter().enumerate() {
            s.push_str(&format!("mean_{ch}={}\n", self.mean[i]));
        }
        for (i, ch) in ["r", "g", "b"].iter().enumerate() {
            s.push_str(&format!("std_{ch}={}\n", self.std[i]));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut mean = [f64::NAN; 3];
        let mut std = [f64::NAN; 3];
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::invalid(format!("bad stats line {line:?}")))?;
            let v: f64 = value
                .parse()
                .map_err(|_| Error::invalid(format!("bad stats value {value:?}")))?;
            match key {
                "mean_r" => mean[0] = v,
                "mean_g" => mean[1] = v,
                "mean_b" => mean[2] = v,
                "std_r" => std[0] = v,
                "std_g" => std[1] = v,
                "std_b" => std[2] = v,
                other => return Err(Error::invalid(format!("unknown stats key {other:?}"))),
            }
        }
        if mean.iter().chain(std.iter()).any(|v| v.is_nan()) {
            return Err(Error::invalid("stats file is missing channels"));
        }
        Ok(NormStats { mean, std })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_text().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

/// Loads an image as 8-bit RGB.
pub(crate) fn load_rgb(path: &Path) -> Result<image::RgbImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })?;
    Ok(img.to_rgb8())
}

/// Streams over the images accumulating per-channel sums and squared sums
/// in f64, then closes the population moments. Images are processed in
/// parallel; partial sums merge in path order so the result is deterministic.
pub fn normalization_stats<P: AsRef<Path> + Sync>(paths: &[P]) -> Result<NormStats> {
    if paths.is_empty() {
        return Err(Error::invalid("normalization_stats: no images"));
    }
    let partials: Vec<Result<([f64; 3], [f64; 3], u64)>> = paths
        .par_iter()
        .map(|p| {
            let img = load_rgb(p.as_ref())?;
            let mut sum = [0.0f64; 3];
            let mut sumsq = [0.0f64; 3];
            for px in img.pixels() {
                for c in 0..3 {
                    let v = px.0[c] as f64 / 255.0;
                    sum[c] += v;
                    sumsq[c] += v * v;
                }
            }
            Ok((sum, sumsq, (img.width() * img.height()) as u64))
        })
        .collect();

    let mut sum = [0.0f64; 3];
    let mut sumsq = [0.0f64; 3];
    let mut count = 0u64;
    for partial in partials {
        let (s, sq, n) = partial?;
        for c in 0..3 {
            sum[c] += s[c];
            sumsq[c] += sq[c];
        }
        count += n;
    }
    let n = count as f64;
    let mut mean = [0.0f64; 3];
    let mut std = [0.0f64; 3];
    for c in 0..3 {
        mean[c] = sum[c] / n;
        let var = (sumsq[c] / n - mean[c] * mean[c]).max(0.0);
        std[c] = var.sqrt();
    }
    Ok(NormStats { mean, std })
}

#[cfg(test)]
mod tests {
    use super::*;
    use image::{Rgb, RgbImage};

    fn save_png(dir: &Path, name: &str, img: &RgbImage) -> std::path::PathBuf {
        let p = dir.join(name);
        img.save(&p).unwrap();
        p
    }

    #[test]
    fn all_black_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_pixel(4, 4, Rgb([0, 0, 0]));
        let p = save_png(dir.path(), "black.png", &img);
        let stats = normalization_stats(&[p]).unwrap();
        assert_eq!(stats.mean, [0.0; 3]);
        assert_eq!(stats.std, [0.0; 3]);
    }

    #[test]
    fn constant_gray_128() {
        let dir = tempfile::tempdir().unwrap();
        let img = RgbImage::from_pixel(3, 5, Rgb([128, 128, 128]));
        let p = save_png(dir.path(), "gray.png", &img);
        let stats = normalization_stats(&[p]).unwrap();
        for c in 0..3 {
            assert!((stats.mean[c] - 128.0 / 255.0).abs() < 1e-12);
            assert!(stats.std[c] < 1e-9);
        }
    }

    #[test]
    fn two_image_set_matches_two_pass_oracle() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = RgbImage::new(2, 2);
        let mut b = RgbImage::new(2, 2);
        let pix_a = [[10u8, 20, 30], [40, 50, 60], [70, 80, 90], [100, 110, 120]];
        let pix_b = [[5u8, 200, 33], [255, 0, 128], [17, 99, 211], [66, 42, 7]];
        for (i, px) in pix_a.iter().enumerate() {
            a.put_pixel((i % 2) as u32, (i / 2) as u32, Rgb([px[0], px[1], px[2]]));
        }
        for (i, px) in pix_b.iter().enumerate() {
            b.put_pixel((i % 2) as u32, (i / 2) as u32, Rgb([px[0], px[1], px[2]]));
        }
        let pa = save_png(dir.path(), "a.png", &a);
        let pb = save_png(dir.path(), "b.png", &b);
        let stats = normalization_stats(&[pa, pb]).unwrap();

        // Independent two-pass computation.
        for c in 0..3 {
            let values: Vec<f64> = pix_a
                .iter()
                .chain(pix_b.iter())
                .map(|px| px[c] as f64 / 255.0)
                .collect();
            let mean = values.iter().sum::<f64>() / values.len() as f64;
            let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
                / values.len() as f64;
            assert!((stats.mean[c] - mean).abs() < 1e-9);
            assert!((stats.std[c] - var.sqrt()).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_missing_image() {
        let err = normalization_stats(&[Path::new("/nonexistent/x.png")]).unwrap_err();
        assert!(err.to_string().contains("x.png"));
    }

    #[test]
    fn text_round_trip() {
        let stats = NormStats {
            mean: [0.123456789012345, 0.5, 0.25],
            std: [0.111, 0.222, 0.333],
        };
        let parsed = NormStats::from_text(&stats.to_text()).unwrap();
        assert_eq!(stats, parsed);
    }
}
