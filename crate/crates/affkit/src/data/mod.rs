//! Dataset handling: manifest ingestion, class statistics and loss weights,
//! normalization statistics, and the synthetic desk-scale generator.

mod manifest;
mod stats;
mod synth;
mod weights;

pub use manifest::{parse_manifest, write_manifest, SampleRecord};
pub use stats::{normalization_stats, NormStats};
pub use synth::{generate_synthetic, SynthConfig};

/// Decodes an image file as 8-bit RGB.
pub fn load_rgb_image(path: &std::path::Path) -> Result<image::RgbImage> {
    stats::load_rgb(path)
}

/// PNG-encodes and atomically writes an RGB image.
pub fn save_rgb_png(path: &std::path::Path, img: &image::RgbImage) -> Result<()> {
    synth::save_png_atomic(path, img)
}
pub use weights::{au_pos_weights, class_distribution, expr_class_weights, ClassDistribution};

use crate::error::{Error, Result};

/// Number of detected action units.
pub const NUM_AUS: usize = 12;

/// Sentinel for unlabeled valence/arousal.
pub const VA_UNLABELED: f32 = -5.0;

/// Sentinel for unlabeled expression or action unit.
pub const UNLABELED: i32 = -1;

/// Canonical multi-task expression order (8 classes).
pub const MTL_CLASSES: [&str; 8] = [
    "neutral",
    "anger",
    "disgust",
    "fear",
    "happiness",
    "sadness",
    "surprise",
    "other",
];

/// Canonical synthetic-data expression order (6 classes).
pub const LSD_CLASSES: [&str; 6] = [
    "anger",
    "disgust",
    "fear",
    "happiness",
    "sadness",
    "surprise",
];

/// Manifest column names for the action units.
pub const AU_NAMES: [&str; NUM_AUS] = [
    "au1", "au2", "au4", "au6", "au7", "au10", "au12", "au15", "au23", "au24", "au25", "au26",
];

/// Which challenge a dataset/model belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskKind {
    Mtl,
    Lsd,
}

impl TaskKind {
    pub fn num_classes(&self) -> usize {
        match self {
            TaskKind::Mtl => MTL_CLASSES.len(),
            TaskKind::Lsd => LSD_CLASSES.len(),
        }
    }

    pub fn class_names(&self) -> &'static [&'static str] {
        match self {
            TaskKind::Mtl => &MTL_CLASSES,
            TaskKind::Lsd => &LSD_CLASSES,
        }
    }
}

impl std::fmt::Display for TaskKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TaskKind::Mtl => "mtl",
            TaskKind::Lsd => "lsd",
        })
    }
}

impl std::str::FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mtl" => Ok(TaskKind::Mtl),
            "lsd" => Ok(TaskKind::Lsd),
            other => Err(Error::invalid(format!(
                "unknown task {other:?}; expected mtl or lsd"
            ))),
        }
    }
}
