//! Class statistics and the loss weights derived from them: expression
//! weights inversely proportional to class counts (normalized to mean 1),
//! and per-AU positive weights equal to the negative/positive count ratio.

use super::{SampleRecord, TaskKind};
use crate::error::{Error, Result};

/// Per-class labeled-sample counts for one task's expression labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassDistribution {
    task: TaskKind,
    counts: Vec<u64>,
}

impl ClassDistribution {
    pub fn from_counts(task: TaskKind, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != task.num_classes() {
            return Err(Error::invalid(format!(
                "{} classes expected for {task}, got {}",
                task.num_classes(),
                counts.len()
            )));
        }
        Ok(ClassDistribution { task, counts })
    }

    pub fn task(&self) -> TaskKind {
        self.task
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn max_class(&self) -> usize {
        self.counts
            .iter()
            .enumerate()
            .max_by_key(|(_, &c)| c)
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    pub fn max_count(&self) -> u64 {
        self.counts.iter().copied().max().unwrap_or(0)
    }

    pub fn min_count(&self) -> u64 {
        self.counts.iter().copied().min().unwrap_or(0)
    }

    /// Largest class count over smallest; infinite when a class is empty.
    pub fn imbalance_ratio(&self) -> f64 {
        let min = self.min_count();
        if min == 0 {
            f64::INFINITY
        } else {
            self.max_count() as f64 / min as f64
        }
    }
}

/// Counts expression labels per class, ignoring the -1 sentinel.
pub fn class_distribution(records: &[SampleRecord], task: TaskKind) -> Result<ClassDistribution> {
    if records.is_empty() {
        return Err(Error::invalid("class_distribution: no records"));
    }
    let mut counts = vec![0u64; task.num_classes()];
    for r in records {
        if let Some(label) = r.expression_label() {
            if label >= counts.len() {
                return Err(Error::invalid(format!(
                    "expression {label} out of range for {task}"
                )));
            }
            counts[label] += 1;
        }
    }
    ClassDistribution::from_counts(task, counts)
}

/// Expression class weights `w_i = (1/n_i) * C / sum_j (1/n_j)`: inversely
/// proportional to class counts, normalized so the mean weight is 1 (the
/// weight vector sums to C). Scale-invariant in the counts.
pub fn expr_class_weights(dist: &ClassDistribution) -> Result<Vec<f64>> {
    if let Some(idx) = dist.counts().iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!(
            "class {:?} has no samples; drop it or augment before weighting",
            dist.task().class_names()[idx]
        )));
    }
    let inv: Vec<f64> = dist.counts().iter().map(|&c| 1.0 / c as f64).collect();
    let total: f64 = inv.iter().sum();
    let c = inv.len() as f64;
    Ok(inv.iter().map(|&x| x * c / total).collect())
}

/// Per-AU positive weights: labeled negatives over labeled positives,
/// ignoring -1 entries.
pub fn au_pos_weights(records: &[SampleRecord]) -> Result<Vec<f64>> {
    let num_aus = super::NUM_AUS;
    let mut pos = vec![0u64; num_aus];
    let mut neg = vec![0u64; num_aus];
    for r in records {
        for (i, &a) in r.aus.iter().enumerate() {
            match a {
                1 => pos[i] += 1,
                0 => neg[i] += 1,
                _ => {}
            }
        }
    }
    let mut weights = Vec::with_capacity(num_aus);
    for i in 0..num_aus {
        if pos[i] == 0 {
            return Err(Error::invalid(format!(
                "{} has no positive samples; cannot form a negative/positive ratio",
                super::AU_NAMES[i]
            )));
        }
        weights.push(neg[i] as f64 / pos[i] as f64);
    }
    Ok(weights)
}

#[cfg(test)]
mod tests {
    use super::super::{NUM_AUS, UNLABELED, VA_UNLABELED};
    use super::*;

    fn rec(expr: i32, aus: [i8; NUM_AUS]) -> SampleRecord {
        SampleRecord {
            image_path: "x.png".into(),
            valence: VA_UNLABELED,
            arousal: VA_UNLABELED,
            expression: expr,
            aus,
        }
    }

    #[test]
    fn distribution_ignores_unlabeled() {
        let records = vec![
            rec(0, [0; NUM_AUS]),
            rec(0, [0; NUM_AUS]),
            rec(UNLABELED, [0; NUM_AUS]),
            rec(5, [0; NUM_AUS]),
        ];
        let dist = class_distribution(&records, TaskKind::Mtl).unwrap();
        assert_eq!(dist.counts()[0], 2);
        assert_eq!(dist.counts()[5], 1);
        assert_eq!(dist.counts().iter().sum::<u64>(), 3);
    }

    #[test]
    fn distribution_single_class() {
        let records = vec![rec(2, [0; NUM_AUS]); 7];
        let dist = class_distribution(&records, TaskKind::Lsd).unwrap();
        assert_eq!(dist.counts(), &[0, 0, 7, 0, 0, 0]);
        assert_eq!(dist.max_class(), 2);
        assert_eq!(dist.max_count(), 7);
    }

    #[test]
    fn balanced_lsd_toy_set() {
        let mut records = Vec::new();
        for class in 0..6 {
            for _ in 0..40 {
                records.push(rec(class, [0; NUM_AUS]));
            }
        }
        let dist = class_distribution(&records, TaskKind::Lsd).unwrap();
        assert!(dist.counts().iter().all(|&c| c == 40));
        assert_eq!(dist.imbalance_ratio(), 1.0);
    }

    #[test]
    fn paper_scale_imbalance_ratio() {
        // Sadness at 144631 with fear an order of magnitude smaller.
        let counts = vec![40_000, 50_000, 14_463, 120_000, 144_631, 60_000];
        let dist = ClassDistribution::from_counts(TaskKind::Lsd, counts).unwrap();
        assert_eq!(dist.max_count(), 144_631);
        assert!((dist.imbalance_ratio() - 10.0).abs() < 0.01);
    }

    #[test]
    fn equal_counts_give_unit_weights() {
        let dist = ClassDistribution::from_counts(TaskKind::Lsd, vec![25; 6]).unwrap();
        let w = expr_class_weights(&dist).unwrap();
        assert!(w.iter().all(|&x| (x - 1.0).abs() < 1e-12));
    }

    #[test]
    fn weights_match_normalization_formula() {
        let counts = vec![10u64, 20, 40];
        // Borrow the MTL task shape by padding is unnecessary; build ad hoc.
        let dist = ClassDistribution {
            task: TaskKind::Lsd,
            counts: counts.clone(),
        };
        let w = expr_class_weights(&dist).unwrap();
        assert!((w[0] - 1.7142857142857142).abs() < 1e-12, "{w:?}");
        assert!((w[1] - 0.8571428571428571).abs() < 1e-12);
        assert!((w[2] - 0.42857142857142855).abs() < 1e-12);
        // Sum equals the class count; smallest weight goes to largest class.
        assert!((w.iter().sum::<f64>() - 3.0).abs() < 1e-9);
        assert_eq!(w.len(), 3);
    }

    #[test]
    fn weights_are_count_scale_invariant() {
        let a = ClassDistribution {
            task: TaskKind::Lsd,
            counts: vec![10, 20, 40],
        };
        let b = ClassDistribution {
            task: TaskKind::Lsd,
            counts: vec![20, 40, 80],
        };
        let wa = expr_class_weights(&a).unwrap();
        let wb = expr_class_weights(&b).unwrap();
        for (x, y) in wa.iter().zip(&wb) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn weights_reject_empty_class() {
        let dist = ClassDistribution {
            task: TaskKind::Lsd,
            counts: vec![10, 0, 40, 1, 1, 1],
        };
        assert!(expr_class_weights(&dist).is_err());
    }

    #[test]
    fn au_weights_direct_ratio_and_masking() {
        let mut records = Vec::new();
        // au index 0: 100 negatives, 25 positives -> 4.0; the rest balanced.
        for i in 0..125 {
            let mut aus = [if i % 2 == 0 { 1 } else { 0 }; NUM_AUS];
            aus[0] = if i < 25 { 1 } else { 0 };
            records.push(rec(0, aus));
        }
        let w = au_pos_weights(&records).unwrap();
        assert!((w[0] - 4.0).abs() < 1e-9);

        // Unlabeled entries must not move any ratio.
        let mut with_unlabeled = records.clone();
        for _ in 0..50 {
            with_unlabeled.push(rec(0, [-1; NUM_AUS]));
        }
        let w2 = au_pos_weights(&with_unlabeled).unwrap();
        for (a, b) in w.iter().zip(&w2) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn au_weights_balanced_and_masked_example() {
        // neg 10, pos 5, unlabeled 50 -> 2.0
        let mut records = Vec::new();
        for _ in 0..5 {
            records.push(rec(0, [1; NUM_AUS]));
        }
        for _ in 0..10 {
            records.push(rec(0, [0; NUM_AUS]));
        }
        for _ in 0..50 {
            records.push(rec(0, [-1; NUM_AUS]));
        }
        let w = au_pos_weights(&records).unwrap();
        assert!(w.iter().all(|&x| (x - 2.0).abs() < 1e-9));
    }

    #[test]
    fn au_weights_reject_zero_positives() {
        let records = vec![rec(0, [0; NUM_AUS]); 4];
        let err = au_pos_weights(&records).unwrap_err().to_string();
        assert!(err.contains("au1"), "{err}");
    }
}
