//! Oversampling plan that brings every class up to the majority-class count,
//! and its materialization to disk as augmented PNG copies.

use super::policy::{rand_augment, AugmentPolicy};
use super::transform::MAGNITUDE_TABLE_VERSION;
use crate::data::{
    write_manifest, ClassDistribution, SampleRecord, TaskKind,
};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::seeding::mix2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use std::path::{Path, PathBuf};

/// One augmented copy to create: `source` indexes the input records,
/// `copy` is the per-source 1-based copy number used in the file name.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PlannedCopy {
    pub source: usize,
    pub copy: usize,
}

#[derive(Debug, Clone)]
pub struct BalancePlan {
    /// Copies to create per class: `max_count - n_i`.
    pub extras: Vec<u64>,
    pub copies: Vec<PlannedCopy>,
}

impl BalancePlan {
    pub fn is_empty(&self) -> bool {
        self.copies.is_empty()
    }
}

/// Plans `max_count - n_i` extra copies for each class. Sources cycle
/// through the class's records in seeded-shuffled order, so each original is
/// used floor(extra/n) or ceil(extra/n) times.
///
/// Records without an expression label have no class and pass through
/// unchanged (never duplicated).
pub fn balance_plan(
    dist: &ClassDistribution,
    records: &[SampleRecord],
    seed: u64,
) -> Result<BalancePlan> {
    if let Some(idx) = dist.counts().iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!(
            "cannot balance: class {:?} has no samples",
            dist.task().class_names()[idx]
        )));
    }
    let max_count = dist.max_count();
    let mut extras = Vec::with_capacity(dist.counts().len());
    let mut copies = Vec::new();
    for class in 0..dist.counts().len() {
        let members: Vec<usize> = records
            .iter()
            .enumerate()
            .filter(|(_, r)| r.expression_label() == Some(class))
            .map(|(i, _)| i)
            .collect();
        debug_assert_eq!(members.len() as u64, dist.counts()[class]);
        let extra = max_count - dist.counts()[class];
        extras.push(extra);
        if extra == 0 {
            continue;
        }
        let mut order = members;
        let mut rng = ChaCha12Rng::seed_from_u64(mix2(seed, class as u64));
        order.shuffle(&mut rng);
        let n = order.len();
        for k in 0..extra as usize {
            copies.push(PlannedCopy {
                source: order[k % n],
                copy: k / n + 1,
            });
        }
    }
    Ok(BalancePlan { extras, copies })
}

fn augmented_name(rel: &str, copy: usize) -> String {
    let p = Path::new(rel);
    let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("img");
    let parent = p.parent().and_then(|s| s.to_str()).unwrap_or("");
    if parent.is_empty() {
        format!("{stem}_aug{copy}.png")
    } else {
        format!("{parent}/{stem}_aug{copy}.png")
    }
}

/// Renders every planned copy with the policy and writes a self-contained
/// balanced dataset under `out_dir`: original images are copied byte-for-byte,
/// augmented copies are rendered with `sample_seed = mix(source, copy)`, and
/// the output manifest lists originals (input order) then copies (plan
/// order). A sidecar records the policy so results are reproducible.
pub fn materialize(
    plan: &BalancePlan,
    policy: &AugmentPolicy,
    records: &[SampleRecord],
    task: TaskKind,
    src_root: &Path,
    out_dir: &Path,
) -> Result<(PathBuf, Vec<SampleRecord>)> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    // Originals: byte-identical copies keep the output relocatable.
    for r in records {
        let from = src_root.join(&r.image_path);
        let to = out_dir.join(&r.image_path);
        if let Some(parent) = to.parent() {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        std::fs::copy(&from, &to).map_err(|e| Error::io(&from, e))?;
    }

    // Augmented copies render in parallel; the manifest order stays the
    // deterministic plan order.
    let augmented: Vec<Result<SampleRecord>> = plan
        .copies
        .par_iter()
        .map(|pc| {
            let source = &records[pc.source];
            let img = crate::data::load_rgb_image(&src_root.join(&source.image_path))?;
            let sample_seed = mix2(pc.source as u64, pc.copy as u64);
            let out_img = rand_augment(&img, policy, sample_seed)?;
            let rel = augmented_name(&source.image_path, pc.copy);
            crate::data::save_rgb_png(&out_dir.join(&rel), &out_img)?;
            let mut record = source.clone();
            record.image_path = rel;
            Ok(record)
        })
        .collect();

    let mut out_records: Vec<SampleRecord> = records.to_vec();
    for r in augmented {
        out_records.push(r?);
    }

    let manifest = out_dir.join("manifest.csv");
    write_manifest(&manifest, &out_records, task)?;

    let sidecar = format!(
        "seed={}\nnum_ops={}\nmagnitude={}\ntable_version={}\n",
        policy.seed, policy.num_ops, policy.magnitude, MAGNITUDE_TABLE_VERSION
    );
    write_atomic(&out_dir.join("augment_policy.txt"), sidecar.as_bytes())?;

    Ok((manifest, out_records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::class_distribution;

    fn lsd_records(counts: &[usize]) -> Vec<SampleRecord> {
        let mut records = Vec::new();
        for (class, &n) in counts.iter().enumerate() {
            for i in 0..n {
                records.push(SampleRecord::lsd(format!("images/c{class}_{i}.png"), class));
            }
        }
        records
    }

    #[test]
    fn balanced_input_yields_empty_plan() {
        let records = lsd_records(&[3, 3, 3, 3, 3, 3]);
        let dist = class_distribution(&records, TaskKind::Lsd).unwrap();
        let plan = balance_plan(&dist, &records, 0).unwrap();
        assert!(plan.is_empty());
        assert!(plan.extras.iter().all(|&e| e == 0));
    }

    #[test]
    fn five_ten_cycling_uses_each_source_once() {
        let records = lsd_records(&[5, 10, 10, 10, 10, 10]);
        let dist = class_distribution(&records, TaskKind::Lsd).unwrap();
        let plan = balance_plan(&dist, &records, 9).unwrap();
        assert_eq!(plan.extras[0], 5);
        assert_eq!(plan.copies.len(), 5);
        let mut sources: Vec<usize> = plan.copies.iter().map(|c| c.source).collect();
        sources.sort_unstable();
        assert_eq!(sources, vec![0, 1, 2, 3, 4]);
        assert!(plan.copies.iter().all(|c| c.copy == 1));
    }

    #[test]
    fn uneven_cycling_splits_floor_ceil() {
        // 3 sources, 7 extras: uses 3,2,2 (ceil/floor of 7/3).
        let records = lsd_records(&[3, 10, 10, 10, 10, 10]);
        let dist = class_distribution(&records, TaskKind::Lsd).unwrap();
        let plan = balance_plan(&dist, &records, 4).unwrap();
        assert_eq!(plan.copies.len(), 7);
        let mut uses = [0usize; 3];
        for c in &plan.copies {
            uses[c.source] += 1;
        }
        let mut sorted = uses.to_vec();
        sorted.sort_unstable();
        assert_eq!(sorted, vec![2, 2, 3]);
        assert!(plan.copies.iter().all(|c| c.copy <= 3));
    }

    #[test]
    fn paper_scale_extra_arithmetic() {
        // Majority 144631, fear at a tenth: extra = 130168.
        let counts = vec![140_000u64, 141_000, 14_463, 143_000, 144_631, 142_000];
        let dist = ClassDistribution::from_counts(TaskKind::Lsd, counts).unwrap();
        let extra = dist.max_count() - dist.counts()[2];
        assert_eq!(extra, 130_168);
    }

    #[test]
    fn plan_is_deterministic_per_seed() {
        let records = lsd_records(&[2, 5, 5, 5, 5, 5]);
        let dist = class_distribution(&records, TaskKind::Lsd).unwrap();
        let a = balance_plan(&dist, &records, 11).unwrap();
        let b = balance_plan(&dist, &records, 11).unwrap();
        assert_eq!(a.copies, b.copies);
    }

    #[test]
    fn rejects_empty_class() {
        let records = lsd_records(&[0, 5, 5, 5, 5, 5]);
        let dist = class_distribution(&records, TaskKind::Lsd).unwrap();
        assert!(balance_plan(&dist, &records, 0).is_err());
    }

    #[test]
    fn augmented_names_preserve_directories() {
        assert_eq!(augmented_name("images/a.png", 2), "images/a_aug2.png");
        assert_eq!(augmented_name("b.png", 1), "b_aug1.png");
    }
}
