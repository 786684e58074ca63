//! Synthetic desk-scale dataset generator.
//!
//! Each expression class gets a distinct geometric/texture signature
//! (stripes at different orientations, a disk, a gradient, a checkerboard, a
//! frame) plus a color tint, with per-sample jitter and pixel noise so the
//! classification task is nontrivial but solvable by a tiny backbone.
//! Multi-task labels: valence/arousal from class-dependent Gaussians clipped
//! to [-1,1], action units from class-dependent Bernoullis, and a fraction
//! of samples left unlabeled per task to exercise sentinel masking.
//!
//! Every byte is a pure function of (task, per_class, size, seed).

use super::manifest::{write_manifest, SampleRecord};
use super::{TaskKind, NUM_AUS, UNLABELED, VA_UNLABELED};
use crate::error::{Error, Result};
use crate::seeding::mix3;
use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use std::io::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    pub task: TaskKind,
    pub per_class: usize,
    pub size: u32,
    pub seed: u64,
}

/// (valence, arousal) prototypes per multi-task class.
const VA_PROTO: [(f32, f32); 8] = [
    (0.0, 0.0),   // neutral
    (-0.8, 0.7),  // anger
    (-0.6, 0.3),  // disgust
    (-0.7, 0.8),  // fear
    (0.8, 0.5),   // happiness
    (-0.7, -0.5), // sadness
    (0.3, 0.8),   // surprise
    (0.1, 0.1),   // other
];

const VA_SIGMA: f32 = 0.08;

/// Color tint per multi-task class (R, G, B multipliers).
const TINTS: [[f32; 3]; 8] = [
    [1.0, 1.0, 1.0],
    [1.0, 0.5, 0.5],
    [0.5, 1.0, 0.5],
    [0.5, 0.5, 1.0],
    [1.0, 1.0, 0.5],
    [0.6, 0.6, 0.9],
    [1.0, 0.6, 1.0],
    [0.6, 1.0, 1.0],
];

/// Fractions of samples left labeled for each task in multi-task manifests.
const P_VA_LABELED: f64 = 0.8;
const P_EXPR_LABELED: f64 = 0.85;
const P_AU_LABELED: f64 = 0.9;

/// Maps a task class index to its multi-task signature index. The six
/// synthetic-data classes reuse the anger..surprise signatures.
fn signature_index(task: TaskKind, class: usize) -> usize {
    match task {
        TaskKind::Mtl => class,
        TaskKind::Lsd => class + 1,
    }
}

struct MotifParams {
    phase: f32,
    cx: f32,
    cy: f32,
    radius: f32,
    bright: f32,
}

fn motif_value(signature: usize, x: u32, y: u32, s: u32, p: &MotifParams) -> f32 {
    let sf = s as f32;
    let (xf, yf) = (x as f32, y as f32);
    let period = (sf / 4.0).max(2.0);
    let wave = |t: f32| 0.5 + 0.42 * (std::f32::consts::TAU * (t + p.phase) / period).sin();
    match signature {
        0 => 0.5,
        1 => wave(yf),
        2 => wave(xf),
        3 => wave(xf + yf),
        4 => {
            let d = ((xf - p.cx).powi(2) + (yf - p.cy).powi(2)).sqrt();
            if d < p.radius {
                0.9
            } else {
                0.15
            }
        }
        5 => 0.15 + 0.7 * (yf / (sf - 1.0)),
        6 => {
            let cell = (sf / 4.0).max(2.0);
            let cx = ((xf + p.phase) / cell) as i32;
            let cy = ((yf + p.phase) / cell) as i32;
            if (cx + cy) % 2 == 0 {
                0.85
            } else {
                0.15
            }
        }
        _ => {
            let border = (sf / 6.0).max(1.0);
            let edge = xf.min(yf).min(sf - 1.0 - xf).min(sf - 1.0 - yf);
            if edge < border {
                0.85
            } else {
                0.2
            }
        }
    }
}

fn gaussian(rng: &mut ChaCha12Rng) -> f32 {
    // Box-Muller on two uniform draws.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    ((-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()) as f32
}

fn render(signature: usize, tint: [f32; 3], size: u32, rng: &mut ChaCha12Rng) -> RgbImage {
    let sf = size as f32;
    let params = MotifParams {
        phase: rng.gen_range(0.0..sf),
        cx: sf / 2.0 + rng.gen_range(-sf / 8.0..sf / 8.0),
        cy: sf / 2.0 + rng.gen_range(-sf / 8.0..sf / 8.0),
        radius: sf / 4.0 + rng.gen_range(-sf / 16.0..sf / 16.0),
        bright: rng.gen_range(0.9..1.1),
    };
    let mut img = RgbImage::new(size, size);
    for y in 0..size {
        for x in 0..size {
            let base = motif_value(signature, x, y, size, &params) * params.bright;
            let mut px = [0u8; 3];
            for c in 0..3 {
                let noise = gaussian(rng) * 10.0;
                let v = base * tint[c] * 255.0 + noise;
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x, y, Rgb(px));
        }
    }
    img
}

fn labels_for(task: TaskKind, class: usize, rng: &mut ChaCha12Rng, path: String) -> SampleRecord {
    match task {
        TaskKind::Lsd => SampleRecord::lsd(path, class),
        TaskKind::Mtl => {
            let (proto_v, proto_a) = VA_PROTO[class];
            let valence = (proto_v + VA_SIGMA * gaussian(rng)).clamp(-1.0, 1.0);
            let arousal = (proto_a + VA_SIGMA * gaussian(rng)).clamp(-1.0, 1.0);
            let mut aus = [0i8; NUM_AUS];
            for (i, au) in aus.iter_mut().enumerate() {
                let p_active: f64 = if (class + i) % 3 == 0 { 0.9 } else { 0.1 };
                *au = i8::from(rng.gen_bool(p_active));
            }
            // Knock out labels per task to exercise sentinel handling.
            let va_labeled = rng.gen_bool(P_VA_LABELED);
            let expr_labeled = rng.gen_bool(P_EXPR_LABELED);
            for au in aus.iter_mut() {
                if !rng.gen_bool(P_AU_LABELED) {
                    *au = UNLABELED as i8;
                }
            }
            SampleRecord {
                image_path: path,
                valence: if va_labeled { valence } else { VA_UNLABELED },
                arousal: if va_labeled { arousal } else { VA_UNLABELED },
                expression: if expr_labeled { class as i32 } else { UNLABELED },
                aus,
            }
        }
    }
}

/// Writes `<out_dir>/images/*.png` and `<out_dir>/manifest.csv`, returning
/// the manifest path and records. Balanced: `per_class` samples per class.
pub fn generate_synthetic(out_dir: &Path, cfg: &SynthConfig) -> Result<(PathBuf, Vec<SampleRecord>)> {
    if cfg.size < 8 {
        return Err(Error::invalid(format!(
            "synthetic image size must be >= 8, got {}",
            cfg.size
        )));
    }
    if cfg.per_class == 0 {
        return Err(Error::invalid("per_class must be positive"));
    }
    let images_dir = out_dir.join("images");
    std::fs::create_dir_all(&images_dir).map_err(|e| Error::io(&images_dir, e))?;

    let mut records = Vec::with_capacity(cfg.task.num_classes() * cfg.per_class);
    for class in 0..cfg.task.num_classes() {
        let name = cfg.task.class_names()[class];
        for idx in 0..cfg.per_class {
            let mut rng =
                ChaCha12Rng::seed_from_u64(mix3(cfg.seed, class as u64, idx as u64));
            let img = render(
                signature_index(cfg.task, class),
                TINTS[signature_index(cfg.task, class)],
                cfg.size,
                &mut rng,
            );
            let rel = format!("images/{name}_{idx:04}.png");
            save_png_atomic(&out_dir.join(&rel), &img)?;
            records.push(labels_for(cfg.task, class, &mut rng, rel));
        }
    }
    let manifest = out_dir.join("manifest.csv");
    write_manifest(&manifest, &records, cfg.task)?;
    Ok((manifest, records))
}

/// PNG encode to a buffer, then atomic write.
pub(crate) fn save_png_atomic(path: &Path, img: &RgbImage) -> Result<()> {
    let mut bytes = Vec::new();
    {
        let mut cursor = std::io::Cursor::new(&mut bytes);
        img.write_to(&mut cursor, image::ImageFormat::Png)
            .map_err(|e| Error::Image {
                path: path.to_path_buf(),
                msg: e.to_string(),
            })?;
        cursor.flush().ok();
    }
    crate::fsutil::write_atomic(path, &bytes)
}

#[cfg(test)]
mod tests {
    use super::super::{class_distribution, parse_manifest};
    use super::*;

    #[test]
    fn balanced_manifest_counts() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            task: TaskKind::Lsd,
            per_class: 4,
            size: 8,
            seed: 0,
        };
        let (manifest, records) = generate_synthetic(dir.path(), &cfg).unwrap();
        assert_eq!(records.len(), 24);
        let parsed = parse_manifest(&manifest, TaskKind::Lsd).unwrap();
        assert_eq!(parsed, records);
        let dist = class_distribution(&parsed, TaskKind::Lsd).unwrap();
        assert!(dist.counts().iter().all(|&c| c == 4));
    }

    #[test]
    fn deterministic_across_runs() {
        let cfg = SynthConfig {
            task: TaskKind::Mtl,
            per_class: 2,
            size: 12,
            seed: 7,
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        generate_synthetic(d1.path(), &cfg).unwrap();
        generate_synthetic(d2.path(), &cfg).unwrap();
        let m1 = std::fs::read(d1.path().join("manifest.csv")).unwrap();
        let m2 = std::fs::read(d2.path().join("manifest.csv")).unwrap();
        assert_eq!(m1, m2);
        for entry in std::fs::read_dir(d1.path().join("images")).unwrap() {
            let name = entry.unwrap().file_name();
            let a = std::fs::read(d1.path().join("images").join(&name)).unwrap();
            let b = std::fs::read(d2.path().join("images").join(&name)).unwrap();
            assert_eq!(a, b, "file {name:?} differs");
        }
    }

    #[test]
    fn different_seeds_differ() {
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let mut cfg = SynthConfig {
            task: TaskKind::Lsd,
            per_class: 1,
            size: 8,
            seed: 1,
        };
        generate_synthetic(d1.path(), &cfg).unwrap();
        cfg.seed = 2;
        generate_synthetic(d2.path(), &cfg).unwrap();
        let a = std::fs::read(d1.path().join("images/anger_0000.png")).unwrap();
        let b = std::fs::read(d2.path().join("images/anger_0000.png")).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn mtl_labels_cover_all_tasks() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            task: TaskKind::Mtl,
            per_class: 30,
            size: 8,
            seed: 0,
        };
        let (_, records) = generate_synthetic(dir.path(), &cfg).unwrap();
        let with_va = records.iter().filter(|r| r.has_va()).count();
        let with_expr = records.iter().filter(|r| r.expression >= 0).count();
        let unlabeled_aus = records
            .iter()
            .flat_map(|r| r.aus.iter())
            .filter(|&&a| a < 0)
            .count();
        assert!(with_va > records.len() / 2 && with_va < records.len());
        assert!(with_expr > records.len() / 2 && with_expr < records.len());
        assert!(unlabeled_aus > 0);
        // Every class keeps enough expression labels for weighting.
        let dist = class_distribution(&records, TaskKind::Mtl).unwrap();
        assert!(dist.counts().iter().all(|&c| c > 0), "{:?}", dist.counts());
        // Every action unit keeps at least one positive.
        assert!(super::super::au_pos_weights(&records).is_ok());
    }

    #[test]
    fn rejects_tiny_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            task: TaskKind::Lsd,
            per_class: 1,
            size: 4,
            seed: 0,
        };
        assert!(generate_synthetic(dir.path(), &cfg).is_err());
    }
}
