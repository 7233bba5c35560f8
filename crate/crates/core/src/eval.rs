//! Fold construction and classification metrics.

use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Rgb8Image;
use crate::rng::{stream, STAGE_FOLDS};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold_id: usize,
    pub train: Vec<String>,
    pub test: Vec<String>,
}

/// Split a labeled cohort into `k` folds.
///
/// With `test_size = None` this is plain cross-validation: every slide
/// appears in exactly one test set and fold sizes differ by at most one.
/// With `test_size = Some(t)` each fold's test set is a disjoint block of
/// `t` slides (requires `k*t <= n`) and everything else trains — the
/// geometry used when a paper fixes its train/test counts directly.
pub fn make_folds(
    cohort: &[(String, u8)],
    k: usize,
    seed: u64,
    stratified: bool,
    test_size: Option<usize>,
) -> Result<Vec<FoldSplit>> {
    if k == 0 || cohort.len() < k {
        return Err(Error::Dataset(format!(
            "cannot make {k} folds from {} slides",
            cohort.len()
        )));
    }
    let n_pos = cohort.iter().filter(|(_, l)| *l == 1).count();
    if n_pos == 0 || n_pos == cohort.len() {
        return Err(Error::Dataset(
            "fold construction requires both classes".into(),
        ));
    }
    let shuffled_classes = || {
        let mut pos: Vec<&str> = cohort
            .iter()
            .filter(|(_, l)| *l == 1)
            .map(|(id, _)| id.as_str())
            .collect();
        let mut neg: Vec<&str> = cohort
            .iter()
            .filter(|(_, l)| *l == 0)
            .map(|(id, _)| id.as_str())
            .collect();
        pos.shuffle(&mut stream(seed, &[STAGE_FOLDS, 1]));
        neg.shuffle(&mut stream(seed, &[STAGE_FOLDS, 0]));
        (pos, neg)
    };
    // order with block-balanced labels, for the fixed-test-size geometry:
    // pick at every step from the class with the larger remaining share
    let order: Vec<&str> = if stratified {
        let (pos, neg) = shuffled_classes();
        match test_size {
            Some(_) => {
                let mut merged = Vec::with_capacity(cohort.len());
                let (mut i, mut j) = (0usize, 0usize);
                while i < pos.len() || j < neg.len() {
                    // proportional shares, cross-multiplied
                    let pos_share = (pos.len() - i) * neg.len().max(1);
                    let neg_share = (neg.len() - j) * pos.len().max(1);
                    if i < pos.len() && (j >= neg.len() || pos_share >= neg_share) {
                        merged.push(pos[i]);
                        i += 1;
                    } else {
                        merged.push(neg[j]);
                        j += 1;
                    }
                }
                merged
            }
            // plain concatenation; the round-robin below then deals each
            // class across folds evenly
            None => pos.into_iter().chain(neg).collect(),
        }
    } else {
        let mut all: Vec<&str> = cohort.iter().map(|(id, _)| id.as_str()).collect();
        all.shuffle(&mut stream(seed, &[STAGE_FOLDS, 2]));
        all
    };

    let mut folds = Vec::with_capacity(k);
    match test_size {
        None => {
            for fold_id in 0..k {
                let test: Vec<String> = order
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i % k == fold_id)
                    .map(|(_, id)| id.to_string())
                    .collect();
                let train: Vec<String> = order
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| i % k != fold_id)
                    .map(|(_, id)| id.to_string())
                    .collect();
                folds.push(FoldSplit {
                    fold_id,
                    train,
                    test,
                });
            }
        }
        Some(t) => {
            if t == 0 || k * t > cohort.len() {
                return Err(Error::Config(format!(
                    "test_size {t} with {k} folds exceeds cohort of {}",
                    cohort.len()
                )));
            }
            for fold_id in 0..k {
                let lo = fold_id * t;
                let hi = lo + t;
                let test: Vec<String> = order[lo..hi].iter().map(|s| s.to_string()).collect();
                let train: Vec<String> = order
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i < lo || *i >= hi)
                    .map(|(_, id)| id.to_string())
                    .collect();
                folds.push(FoldSplit {
                    fold_id,
                    train,
                    test,
                });
            }
        }
    }
    Ok(folds)
}

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<(f64, f64)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "metrics",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Numeric("metrics: non-finite score".into()));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let neg = labels.iter().filter(|&&l| l == 0).count() as f64;
    if pos == 0.0 || neg == 0.0 {
        return Err(Error::UndefinedMetric(
            "AUC needs both classes present".into(),
        ));
    }
    Ok((pos, neg))
}

/// Trapezoidal area under the ROC curve with tied scores grouped, which is
/// exactly the pairwise probability `P(s+ > s-) + 0.5 P(s+ = s-)`.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut area = 0.0;
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut dtp, mut dfp) = (0.0f64, 0.0f64);
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1 {
                dtp += 1.0;
            } else {
                dfp += 1.0;
            }
            j += 1;
        }
        let tpr_before = tp / pos;
        tp += dtp;
        fp += dfp;
        let tpr_after = tp / pos;
        area += (dfp / neg) * (tpr_before + tpr_after) / 2.0;
        i = j;
    }
    Ok(area)
}

/// ROC curve vertices as (fpr, tpr), from (0,0) to (1,1), tied scores
/// grouped.
pub fn roc_points(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0.0f64, 0.0f64);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j < idx.len() && scores[idx[j]] == scores[idx[i]] {
            if labels[idx[j]] == 1 {
                tp += 1.0;
            } else {
                fp += 1.0;
            }
            j += 1;
        }
        points.push((fp / neg, tp / pos));
        i = j;
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct ConfusionMatrix {
    #[serde(rename = "tp")]
    pub true_pos: u64,
    #[serde(rename = "fp")]
    pub false_pos: u64,
    #[serde(rename = "tn")]
    pub true_neg: u64,
    #[serde(rename = "fn")]
    pub false_neg: u64,
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.true_pos + self.false_pos + self.true_neg + self.false_neg
    }

    pub fn add(&self, other: &ConfusionMatrix) -> ConfusionMatrix {
        ConfusionMatrix {
            true_pos: self.true_pos + other.true_pos,
            false_pos: self.false_pos + other.false_pos,
            true_neg: self.true_neg + other.true_neg,
            false_neg: self.false_neg + other.false_neg,
        }
    }
}

/// Threshold scores at `threshold` (predict positive iff `score >= t`).
pub fn confusion(scores: &[f64], labels: &[u8], threshold: f64) -> Result<ConfusionMatrix> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            op: "confusion",
            lhs: vec![scores.len()],
            rhs: vec![labels.len()],
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&s, &l) in scores.iter().zip(labels) {
        let pred = s >= threshold;
        match (pred, l == 1) {
            (true, true) => cm.true_pos += 1,
            (true, false) => cm.false_pos += 1,
            (false, false) => cm.true_neg += 1,
            (false, true) => cm.false_neg += 1,
        }
    }
    Ok(cm)
}

/// `PPV = TP/(TP+FP)`, `NPV = TN/(TN+FN)`; `None` when the denominator is
/// zero.
pub fn ppv_npv(cm: &ConfusionMatrix) -> (Option<f64>, Option<f64>) {
    let ppv = (cm.true_pos + cm.false_pos > 0)
        .then(|| cm.true_pos as f64 / (cm.true_pos + cm.false_pos) as f64);
    let npv = (cm.true_neg + cm.false_neg > 0)
        .then(|| cm.true_neg as f64 / (cm.true_neg + cm.false_neg) as f64);
    (ppv, npv)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucSummary {
    pub per_fold: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation.
    pub std: f64,
    pub max: f64,
}

pub fn aggregate(aucs: &[f64]) -> Result<AucSummary> {
    if aucs.is_empty() {
        return Err(Error::UndefinedMetric("aggregate over zero folds".into()));
    }
    let n = aucs.len() as f64;
    let mean = aucs.iter().sum::<f64>() / n;
    let var = aucs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let max = aucs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(AucSummary {
        per_fold: aucs.to_vec(),
        mean,
        std: var.sqrt(),
        max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold_id: usize,
    pub auc: f64,
    pub ppv: Option<f64>,
    pub npv: Option<f64>,
    pub confusion: ConfusionMatrix,
}

/// The full evaluation report serialized to `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub folds: Vec<FoldMetrics>,
    pub auc_mean: f64,
    pub auc_std: f64,
    pub auc_max: f64,
    /// From the fold-summed confusion matrix.
    pub ppv_pooled: Option<f64>,
    pub npv_pooled: Option<f64>,
    pub threshold: f64,
}

impl MetricsReport {
    pub fn from_folds(folds: Vec<FoldMetrics>, threshold: f64) -> Result<MetricsReport> {
        let summary = aggregate(&folds.iter().map(|f| f.auc).collect::<Vec<_>>())?;
        let pooled = folds
            .iter()
            .fold(ConfusionMatrix::default(), |acc, f| acc.add(&f.confusion));
        let (ppv_pooled, npv_pooled) = ppv_npv(&pooled);
        Ok(MetricsReport {
            folds,
            auc_mean: summary.mean,
            auc_std: summary.std,
            auc_max: summary.max,
            ppv_pooled,
            npv_pooled,
            threshold,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("fold,auc,ppv,npv\n");
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for f in &self.folds {
            out.push_str(&format!(
                "{},{},{},{}\n",
                f.fold_id,
                f.auc,
                fmt(f.ppv),
                fmt(f.npv)
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| Error::io(path.display().to_string(), std::io::Error::other(e)))?;
        std::fs::write(path, json).map_err(|e| Error::io(path.display().to_string(), e))
    }
}

pub fn write_roc_csv(points: &[(f64, f64)], path: &Path) -> Result<()> {
    let mut out = String::from("fpr,tpr\n");
    for (fpr, tpr) in points {
        out.push_str(&format!("{fpr},{tpr}\n"));
    }
    std::fs::write(path, out).map_err(|e| Error::io(path.display().to_string(), e))
}

// 3x5 bitmap digits for the confusion-matrix PNG, one row per byte.
const DIGITS: [[u8; 5]; 10] = [
    [0b111, 0b101, 0b101, 0b101, 0b111],
    [0b010, 0b110, 0b010, 0b010, 0b111],
    [0b111, 0b001, 0b111, 0b100, 0b111],
    [0b111, 0b001, 0b111, 0b001, 0b111],
    [0b101, 0b101, 0b111, 0b001, 0b001],
    [0b111, 0b100, 0b111, 0b001, 0b111],
    [0b111, 0b100, 0b111, 0b101, 0b111],
    [0b111, 0b001, 0b010, 0b010, 0b010],
    [0b111, 0b101, 0b111, 0b101, 0b111],
    [0b111, 0b101, 0b111, 0b001, 0b111],
];

fn draw_number(img: &mut Rgb8Image, x0: usize, y0: usize, scale: usize, value: u64) {
    let digits: Vec<usize> = value
        .to_string()
        .bytes()
        .map(|b| (b - b'0') as usize)
        .collect();
    for (pos, &d) in digits.iter().enumerate() {
        let ox = x0 + pos * 4 * scale;
        for (ry, bits) in DIGITS[d].iter().enumerate() {
            for rx in 0..3 {
                if bits & (0b100 >> rx) != 0 {
                    for sy in 0..scale {
                        for sx in 0..scale {
                            let x = ox + rx * scale + sx;
                            let y = y0 + ry * scale + sy;
                            if x < img.width() && y < img.height() {
                                img.set_pixel(x, y, (20, 20, 20));
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Render the 2x2 confusion matrix as a PNG: rows are actual
/// (positive, negative), columns predicted (positive, negative), cell
/// shading scales with count.
pub fn render_confusion_png(cm: &ConfusionMatrix, path: &Path) -> Result<()> {
    const CELL: usize = 64;
    let mut img = Rgb8Image::new(2 * CELL, 2 * CELL);
    let total = cm.total().max(1);
    let cells = [
        [(0, 0, cm.true_pos), (0, 1, cm.false_neg)],
        [(1, 0, cm.false_pos), (1, 1, cm.true_neg)],
    ];
    for row in &cells {
        for &(r, c, count) in row {
            let weight = count as f64 / total as f64;
            let shade = (
                (255.0 - 160.0 * weight) as u8,
                (255.0 - 110.0 * weight) as u8,
                255u8,
            );
            for y in r * CELL..(r + 1) * CELL {
                for x in c * CELL..(c + 1) * CELL {
                    let border = y % CELL == 0 || x % CELL == 0;
                    img.set_pixel(x, y, if border { (90, 90, 90) } else { shade });
                }
            }
            draw_number(&mut img, c * CELL + 8, r * CELL + 8, 3, count);
        }
    }
    img.save_png(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn cohort(n_pos: usize, n_neg: usize) -> Vec<(String, u8)> {
        let mut v = Vec::new();
        for i in 0..n_pos {
            v.push((format!("p{i}"), 1));
        }
        for i in 0..n_neg {
            v.push((format!("n{i}"), 0));
        }
        v
    }

    #[test]
    fn folds_partition_the_cohort() {
        let c = cohort(30, 30);
        let folds = make_folds(&c, 4, 5, true, None).unwrap();
        assert_eq!(folds.len(), 4);
        let sizes: Vec<usize> = folds.iter().map(|f| f.test.len()).collect();
        assert_eq!(sizes, vec![15, 15, 15, 15]);
        let mut all_test: Vec<&String> = folds.iter().flat_map(|f| f.test.iter()).collect();
        all_test.sort();
        all_test.dedup();
        assert_eq!(all_test.len(), 60);
        for f in &folds {
            assert_eq!(f.train.len() + f.test.len(), 60);
            assert!(f.train.iter().all(|id| !f.test.contains(id)));
        }
    }

    #[test]
    fn stratified_folds_balance_positives() {
        let c = cohort(30, 30);
        let folds = make_folds(&c, 4, 5, true, None).unwrap();
        for f in &folds {
            let pos = f.test.iter().filter(|id| id.starts_with('p')).count();
            assert!(pos == 7 || pos == 8, "fold {} has {pos} positives", f.fold_id);
        }
    }

    #[test]
    fn paper_geometry_forced_test_size() {
        let c = cohort(91, 91);
        let folds = make_folds(&c, 4, 9, true, Some(22)).unwrap();
        for f in &folds {
            assert_eq!(f.test.len(), 22);
            assert_eq!(f.train.len(), 160);
        }
        // test sets pairwise disjoint
        let mut seen = std::collections::BTreeSet::new();
        for f in &folds {
            for id in &f.test {
                assert!(seen.insert(id.clone()), "{id} in two test sets");
            }
        }
    }

    #[test]
    fn single_class_cohort_is_dataset_error() {
        let c = cohort(10, 0);
        assert!(matches!(
            make_folds(&c, 2, 1, true, None).unwrap_err(),
            Error::Dataset(_)
        ));
    }

    #[test]
    fn auc_perfect_separation() {
        let auc = roc_auc(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(auc, 1.0);
    }

    #[test]
    fn auc_all_ties_is_half() {
        let auc = roc_auc(&[0.5, 0.5, 0.5, 0.5], &[1, 0, 1, 0]).unwrap();
        assert_abs_diff_eq!(auc, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn auc_hand_example() {
        let auc = roc_auc(&[0.8, 0.7, 0.6, 0.5], &[1, 0, 1, 0]).unwrap();
        assert_abs_diff_eq!(auc, 0.75, epsilon = 1e-12);
    }

    #[test]
    fn auc_single_class_undefined() {
        assert!(matches!(
            roc_auc(&[0.1, 0.2], &[1, 1]).unwrap_err(),
            Error::UndefinedMetric(_)
        ));
    }

    /// Exhaustive pairwise oracle with midpoint ties.
    fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut total = 0.0;
        for (i, (&si, &li)) in scores.iter().zip(labels).enumerate() {
            for (j, (&sj, &lj)) in scores.iter().zip(labels).enumerate() {
                if i == j || li != 1 || lj != 0 {
                    continue;
                }
                total += 1.0;
                if si > sj {
                    wins += 1.0;
                } else if si == sj {
                    wins += 0.5;
                }
            }
        }
        wins / total
    }

    #[test]
    fn auc_matches_pairwise_oracle_with_ties() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.random_range(2..50);
            let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
            labels[0] = 1;
            labels[if n > 1 { 1 } else { 0 }] = 0;
            // coarse scores force plenty of ties
            let scores: Vec<f64> = (0..n)
                .map(|_| (rng.random_range(0..8) as f64) / 8.0)
                .collect();
            let fast = roc_auc(&scores, &labels).unwrap();
            let slow = pairwise_auc(&scores, &labels);
            assert_abs_diff_eq!(fast, slow, epsilon = 1e-12);
        }
    }

    #[test]
    fn auc_negation_symmetry() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.8];
        let labels = [0, 0, 1, 1, 0];
        let auc = roc_auc(&scores, &labels).unwrap();
        let neg: Vec<f64> = scores.iter().map(|s| -s).collect();
        let auc_neg = roc_auc(&neg, &labels).unwrap();
        assert_abs_diff_eq!(auc, 1.0 - auc_neg, epsilon = 1e-12);
    }

    #[test]
    fn confusion_and_ppv_npv() {
        let cm = confusion(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!((cm.true_pos, cm.false_pos, cm.true_neg, cm.false_neg), (2, 0, 2, 0));

        // all predicted positive at threshold 0
        let cm0 = confusion(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0], 0.0).unwrap();
        assert_eq!(cm0.true_neg, 0);
        assert_eq!(cm0.false_neg, 0);

        let cm = ConfusionMatrix {
            true_pos: 21,
            false_pos: 4,
            true_neg: 10,
            false_neg: 3,
        };
        let (ppv, npv) = ppv_npv(&cm);
        assert_abs_diff_eq!(ppv.unwrap(), 0.84, epsilon = 1e-12);
        assert_abs_diff_eq!(npv.unwrap(), 10.0 / 13.0, epsilon = 1e-12);

        let (ppv, _) = ppv_npv(&ConfusionMatrix {
            true_pos: 5,
            false_pos: 0,
            true_neg: 1,
            false_neg: 1,
        });
        assert_eq!(ppv, Some(1.0));

        let (ppv, npv) = ppv_npv(&ConfusionMatrix {
            true_pos: 0,
            false_pos: 0,
            true_neg: 2,
            false_neg: 1,
        });
        assert_eq!(ppv, None);
        assert!(npv.is_some());
    }

    #[test]
    fn confusion_matches_hand_count() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let n = 40;
        let scores: Vec<f64> = (0..n).map(|_| rng.random()).collect();
        let labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2)).collect();
        let cm = confusion(&scores, &labels, 0.5).unwrap();
        let mut hand = ConfusionMatrix::default();
        for i in 0..n {
            match (scores[i] >= 0.5, labels[i]) {
                (true, 1) => hand.true_pos += 1,
                (true, 0) => hand.false_pos += 1,
                (false, 0) => hand.true_neg += 1,
                (false, 1) => hand.false_neg += 1,
                _ => unreachable!(),
            }
        }
        assert_eq!(cm, hand);
    }

    #[test]
    fn aggregate_mean_std_max() {
        let s = aggregate(&[0.83, 0.85, 0.86, 0.87]).unwrap();
        assert_abs_diff_eq!(s.mean, 0.8525, epsilon = 1e-12);
        assert_eq!(s.max, 0.87);
        // population std of the four values
        let expected = ((0.0225f64.powi(2) + 0.0025f64.powi(2) + 0.0075f64.powi(2)
            + 0.0175f64.powi(2))
            / 4.0)
            .sqrt();
        assert_abs_diff_eq!(s.std, expected, epsilon = 1e-12);

        let single = aggregate(&[0.8]).unwrap();
        assert_eq!(single.std, 0.0);
        let constant = aggregate(&[0.8; 4]).unwrap();
        assert_eq!(constant.mean, 0.8);
        assert_eq!(constant.std, 0.0);
    }

    #[test]
    fn roc_points_span_unit_square() {
        let pts = roc_points(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(pts.first(), Some(&(0.0, 0.0)));
        assert_eq!(pts.last(), Some(&(1.0, 1.0)));
    }

    #[test]
    fn confusion_png_renders_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let cm = ConfusionMatrix {
            true_pos: 21,
            false_pos: 4,
            true_neg: 10,
            false_neg: 3,
        };
        let p1 = dir.path().join("cm1.png");
        let p2 = dir.path().join("cm2.png");
        render_confusion_png(&cm, &p1).unwrap();
        render_confusion_png(&cm, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        let img = Rgb8Image::load_png(&p1).unwrap();
        assert_eq!((img.width(), img.height()), (128, 128));
    }
}
