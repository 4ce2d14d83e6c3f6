//! Core-level metrics: AUROC (Mann-Whitney, ties at half weight), balanced
//! accuracy, expected calibration error, the cancer-involvement filter, fold
//! evaluation, and probability heatmap export.

use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{sliding_windows, PatchSpec, RFFrame};
use crate::ensemble::EnsembleModel;
use crate::error::{Error, Result};

/// One core's score and ground truth.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorePrediction {
    pub core_id: String,
    pub score: f64,
    pub label_cancer: bool,
    pub involvement: f64,
    pub center_id: String,
}

impl CorePrediction {
    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.score) {
            return Err(Error::validation(format!(
                "core {}: score {} outside [0, 1]",
                self.core_id, self.score
            )));
        }
        Ok(())
    }
}

/// Remove cancer-labeled cores at or below the involvement threshold; benign
/// cores are always retained (their involvement is zero by construction, and
/// removing them would empty the negative class).
pub fn filter_involvement(preds: &[CorePrediction], threshold: f64) -> Vec<CorePrediction> {
    preds
        .iter()
        .filter(|p| !(p.label_cancer && p.involvement <= threshold))
        .cloned()
        .collect()
}

/// Probability that a random positive outranks a random negative, with ties
/// counted half. Computed via average ranks; exactly equal to tie-aware pair
/// counting.
pub fn auroc(preds: &[CorePrediction]) -> Result<f64> {
    for p in preds {
        p.validate()?;
    }
    let n_pos = preds.iter().filter(|p| p.label_cancer).count();
    let n_neg = preds.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::validation(
            "AUROC undefined: need both classes present",
        ));
    }
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| {
        preds[a]
            .score
            .partial_cmp(&preds[b].score)
            .expect("scores are finite")
    });
    // Average ranks within tie groups (ranks are 1-based).
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0usize;
    while i < preds.len() {
        let mut j = i;
        while j + 1 < preds.len() && preds[order[j + 1]].score == preds[order[i]].score {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &k in &order[i..=j] {
            if preds[k].label_cancer {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    let u = rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// (sensitivity + specificity) / 2 at the given decision threshold
/// (score >= threshold predicts cancer).
pub fn balanced_accuracy(preds: &[CorePrediction], decision_threshold: f64) -> Result<f64> {
    let n_pos = preds.iter().filter(|p| p.label_cancer).count();
    let n_neg = preds.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::validation(
            "balanced accuracy undefined: need both classes present",
        ));
    }
    let tp = preds
        .iter()
        .filter(|p| p.label_cancer && p.score >= decision_threshold)
        .count();
    let tn = preds
        .iter()
        .filter(|p| !p.label_cancer && p.score < decision_threshold)
        .count();
    let sens = tp as f64 / n_pos as f64;
    let spec = tn as f64 / n_neg as f64;
    Ok((sens + spec) / 2.0)
}

/// Pick the threshold maximizing balanced accuracy over candidate midpoints
/// of the sorted scores (plus the extremes). Used on validation predictions,
/// then frozen for test.
pub fn select_decision_threshold(preds: &[CorePrediction]) -> Result<f64> {
    let mut scores: Vec<f64> = preds.iter().map(|p| p.score).collect();
    scores.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    scores.dedup();
    let mut candidates = vec![0.0, 0.5, 1.0 + 1e-12];
    for w in scores.windows(2) {
        candidates.push((w[0] + w[1]) / 2.0);
    }
    candidates.extend(scores.iter().map(|&s| s));
    let mut best = (f64::NEG_INFINITY, 0.5);
    for &t in &candidates {
        let ba = balanced_accuracy(preds, t)?;
        if ba > best.0 {
            best = (ba, t);
        }
    }
    Ok(best.1)
}

/// Calibration summary over equal-width confidence bins.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibrationReport {
    pub bin_edges: Vec<f64>,
    pub bin_confidence: Vec<f64>,
    pub bin_accuracy: Vec<f64>,
    pub bin_count: Vec<usize>,
    pub ece: f64,
}

/// Expected calibration error with confidence = max-class probability and
/// prediction = score >= 0.5.
pub fn ece(preds: &[CorePrediction], n_bins: usize) -> Result<CalibrationReport> {
    if n_bins < 1 {
        return Err(Error::validation("need at least one calibration bin"));
    }
    if preds.is_empty() {
        return Err(Error::validation("need at least one prediction"));
    }
    for p in preds {
        p.validate()?;
    }
    let mut conf_sum = vec![0.0f64; n_bins];
    let mut acc_sum = vec![0.0f64; n_bins];
    let mut count = vec![0usize; n_bins];
    for p in preds {
        let confidence = p.score.max(1.0 - p.score);
        let predicted_cancer = p.score >= 0.5;
        let correct = predicted_cancer == p.label_cancer;
        let bin = ((confidence * n_bins as f64) as usize).min(n_bins - 1);
        conf_sum[bin] += confidence;
        acc_sum[bin] += correct as u8 as f64;
        count[bin] += 1;
    }
    let n = preds.len() as f64;
    let mut total = 0.0;
    let mut bin_confidence = vec![0.0; n_bins];
    let mut bin_accuracy = vec![0.0; n_bins];
    for b in 0..n_bins {
        if count[b] > 0 {
            bin_confidence[b] = conf_sum[b] / count[b] as f64;
            bin_accuracy[b] = acc_sum[b] / count[b] as f64;
            total += (count[b] as f64 / n) * (bin_accuracy[b] - bin_confidence[b]).abs();
        }
    }
    let bin_edges = (0..=n_bins).map(|b| b as f64 / n_bins as f64).collect();
    Ok(CalibrationReport {
        bin_edges,
        bin_confidence,
        bin_accuracy,
        bin_count: count,
        ece: total,
    })
}

/// Metric bundle for one leave-one-center-out fold.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldReport {
    pub test_center: String,
    pub auroc: f64,
    pub auroc_all: f64,
    pub balanced_acc: f64,
    pub ece: f64,
    pub n_cores_filtered: usize,
    pub n_cores_all: usize,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalThresholds {
    pub involvement_threshold: f64,
    pub decision_threshold: f64,
    pub ece_bins: usize,
}

impl Default for EvalThresholds {
    fn default() -> Self {
        EvalThresholds {
            involvement_threshold: 0.40,
            decision_threshold: 0.5,
            ece_bins: 10,
        }
    }
}

/// AUROC and balanced accuracy on the involvement-filtered set, AUROC-All
/// and ECE on the unfiltered set.
pub fn evaluate_fold(preds: &[CorePrediction], thresholds: &EvalThresholds) -> Result<FoldReport> {
    if preds.is_empty() {
        return Err(Error::validation("fold has no test cores"));
    }
    let center = &preds[0].center_id;
    if preds.iter().any(|p| &p.center_id != center) {
        return Err(Error::validation(
            "fold predictions must come from exactly one test center",
        ));
    }
    let filtered = filter_involvement(preds, thresholds.involvement_threshold);
    let auroc_all = auroc(preds)?;
    let auroc_f = auroc(&filtered)?;
    let ba = balanced_accuracy(&filtered, thresholds.decision_threshold)?;
    let cal = ece(preds, thresholds.ece_bins)?;
    Ok(FoldReport {
        test_center: center.clone(),
        auroc: auroc_f,
        auroc_all,
        balanced_acc: ba,
        ece: cal.ece,
        n_cores_filtered: filtered.len(),
        n_cores_all: preds.len(),
    })
}

/// Mean and sample standard deviation of each metric across folds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AggregateReport {
    pub mean: FoldMetrics,
    pub std: FoldMetrics,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub auroc: f64,
    pub auroc_all: f64,
    pub balanced_acc: f64,
    pub ece: f64,
}

pub fn aggregate(reports: &[FoldReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::validation("nothing to aggregate"));
    }
    let n = reports.len() as f64;
    let get = |f: &dyn Fn(&FoldReport) -> f64| -> (f64, f64) {
        let mean = reports.iter().map(|r| f(r)).sum::<f64>() / n;
        let var = if reports.len() > 1 {
            reports.iter().map(|r| (f(r) - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        (mean, var.sqrt())
    };
    let (am, asd) = get(&|r| r.auroc);
    let (aam, aasd) = get(&|r| r.auroc_all);
    let (bm, bsd) = get(&|r| r.balanced_acc);
    let (em, esd) = get(&|r| r.ece);
    Ok(AggregateReport {
        mean: FoldMetrics {
            auroc: am,
            auroc_all: aam,
            balanced_acc: bm,
            ece: em,
        },
        std: FoldMetrics {
            auroc: asd,
            auroc_all: aasd,
            balanced_acc: bsd,
            ece: esd,
        },
    })
}

// ---------------------------------------------------------------------------
// Heatmaps
// ---------------------------------------------------------------------------

/// Per-pixel cancer probability map from averaged overlapping patch
/// predictions, plus the rendering written to `path` as PNG (blue = benign,
/// red = cancer, alpha-blended over the log-compressed frame).
pub fn export_heatmap(
    model: &EnsembleModel,
    frame: &RFFrame,
    spec: &PatchSpec,
    path: &Path,
) -> Result<Array2<f64>> {
    let windows = sliding_windows(frame, spec)?;
    if windows.is_empty() {
        return Err(Error::validation("frame yields no sliding windows"));
    }
    let (ph, pw) = spec.resize_to;
    let mut batch = ndarray::Array4::<f32>::zeros((windows.len(), 1, ph, pw));
    for (i, (img, _)) in windows.iter().enumerate() {
        batch
            .index_axis_mut(ndarray::Axis(0), i)
            .index_axis_mut(ndarray::Axis(0), 0)
            .assign(img);
    }
    let probs = model.forward_marginal(&batch)?;

    let (h, w) = frame.samples.dim();
    let mut acc = Array2::<f64>::zeros((h, w));
    let mut cover = Array2::<f64>::zeros((h, w));
    for (i, (_, pos)) in windows.iter().enumerate() {
        let p = probs[(i, 1)];
        let (r0, c0, wh, ww) = pos.px;
        for r in r0..r0 + wh {
            for c in c0..c0 + ww {
                acc[(r, c)] += p;
                cover[(r, c)] += 1.0;
            }
        }
    }
    let map = Array2::from_shape_fn((h, w), |(r, c)| {
        if cover[(r, c)] > 0.0 {
            acc[(r, c)] / cover[(r, c)]
        } else {
            0.5
        }
    });

    // Log-compressed envelope as grayscale background.
    let max_abs = frame
        .samples
        .iter()
        .fold(0.0f32, |m, &v| m.max(v.abs()))
        .max(1e-6);
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for r in 0..h {
        for c in 0..w {
            let env = (1.0 + 40.0 * frame.samples[(r, c)].abs() / max_abs).ln() / (41.0f32).ln();
            let gray = (env * 255.0).clamp(0.0, 255.0);
            let p = map[(r, c)] as f32;
            let overlay = [p * 255.0, 32.0, (1.0 - p) * 255.0];
            let alpha = 0.55f32;
            let px = image::Rgb([
                ((1.0 - alpha) * gray + alpha * overlay[0]) as u8,
                ((1.0 - alpha) * gray + alpha * overlay[1]) as u8,
                ((1.0 - alpha) * gray + alpha * overlay[2]) as u8,
            ]);
            img.put_pixel(c as u32, r as u32, px);
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io_at(parent, e))?;
    }
    img.save(path)
        .map_err(|e| Error::Validation(format!("writing heatmap PNG: {e}")))?;
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn pred(score: f64, cancer: bool) -> CorePrediction {
        CorePrediction {
            core_id: format!("c-{score}-{cancer}"),
            score,
            label_cancer: cancer,
            involvement: if cancer { 0.8 } else { 0.0 },
            center_id: "center_x".into(),
        }
    }

    /// O(n^2) tie-aware pair-counting oracle.
    fn auroc_bruteforce(preds: &[CorePrediction]) -> f64 {
        let pos: Vec<f64> = preds.iter().filter(|p| p.label_cancer).map(|p| p.score).collect();
        let neg: Vec<f64> = preds.iter().filter(|p| !p.label_cancer).map(|p| p.score).collect();
        let mut acc = 0.0;
        for &s in &pos {
            for &t in &neg {
                acc += if s > t {
                    1.0
                } else if s == t {
                    0.5
                } else {
                    0.0
                };
            }
        }
        acc / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auroc_spec_example() {
        let preds = vec![
            pred(0.1, false),
            pred(0.4, false),
            pred(0.35, true),
            pred(0.8, true),
        ];
        assert_eq!(auroc(&preds).unwrap(), 0.75);
    }

    #[test]
    fn auroc_perfect_separation_and_all_ties() {
        let perfect = vec![pred(0.1, false), pred(0.2, false), pred(0.9, true)];
        assert_eq!(auroc(&perfect).unwrap(), 1.0);
        let ties = vec![pred(0.5, false), pred(0.5, true), pred(0.5, true)];
        assert_eq!(auroc(&ties).unwrap(), 0.5);
    }

    #[test]
    fn auroc_single_class_errors() {
        let preds = vec![pred(0.3, true), pred(0.7, true)];
        assert!(auroc(&preds).is_err());
    }

    #[test]
    fn auroc_matches_bruteforce_on_random_instances() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.random_range(2..50);
            let mut preds: Vec<CorePrediction> = (0..n)
                .map(|_| {
                    // Quantized scores force plenty of ties.
                    let s = (rng.random_range(0.0..1.0f64) * 8.0).round() / 8.0;
                    pred(s, rng.random_bool(0.5))
                })
                .collect();
            preds[0].label_cancer = true;
            preds[1].label_cancer = false;
            let fast = auroc(&preds).unwrap();
            let slow = auroc_bruteforce(&preds);
            assert_eq!(fast, slow, "rank-based and pair-counting AUROC must agree");
        }
    }

    #[test]
    fn auroc_invariant_under_monotone_transform() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let preds: Vec<CorePrediction> = (0..30)
            .map(|_| pred(rng.random_range(0.0..1.0), rng.random_bool(0.4)))
            .collect();
        if auroc(&preds).is_err() {
            return;
        }
        let a = auroc(&preds).unwrap();
        let squashed: Vec<CorePrediction> = preds
            .iter()
            .map(|p| CorePrediction {
                score: p.score.powi(3) * 0.5 + 0.25 * p.score,
                ..p.clone()
            })
            .collect();
        // p |-> 0.5 p^3 + 0.25 p is strictly increasing on [0, 1].
        assert!((a - auroc(&squashed).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn balanced_accuracy_examples() {
        // sens 1.0, spec 0.5 -> 0.75
        let preds = vec![pred(0.9, true), pred(0.8, false), pred(0.1, false)];
        assert_eq!(balanced_accuracy(&preds, 0.5).unwrap(), 0.75);
        // all correct -> 1.0
        let preds = vec![pred(0.9, true), pred(0.1, false)];
        assert_eq!(balanced_accuracy(&preds, 0.5).unwrap(), 1.0);
        // both misclassified -> 0.0
        let preds = vec![pred(0.9, false), pred(0.1, true)];
        assert_eq!(balanced_accuracy(&preds, 0.5).unwrap(), 0.0);
    }

    #[test]
    fn balanced_accuracy_permutation_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut preds: Vec<CorePrediction> = (0..20)
            .map(|_| pred(rng.random_range(0.0..1.0), rng.random_bool(0.5)))
            .collect();
        preds[0].label_cancer = true;
        preds[1].label_cancer = false;
        let a = balanced_accuracy(&preds, 0.4).unwrap();
        preds.shuffle(&mut rng);
        assert_eq!(a, balanced_accuracy(&preds, 0.4).unwrap());
    }

    #[test]
    fn ece_examples() {
        // All confidence 1.0, half correct -> 0.5.
        let preds = vec![
            pred(1.0, true),
            pred(1.0, false),
            pred(1.0, true),
            pred(1.0, false),
        ];
        let r = ece(&preds, 10).unwrap();
        assert!((r.ece - 0.5).abs() < 1e-12);
        // Single correct confident prediction -> 0.
        let r = ece(&[pred(1.0, true)], 10).unwrap();
        assert_eq!(r.ece, 0.0);
        // Perfectly calibrated per-bin predictions -> 0: three cores at 2/3
        // confidence, two of three correct.
        let preds = vec![
            pred(2.0 / 3.0, true),
            pred(2.0 / 3.0, true),
            pred(2.0 / 3.0, false),
        ];
        let r = ece(&preds, 3).unwrap();
        assert!(r.ece.abs() < 1e-12);
    }

    #[test]
    fn ece_rejects_zero_bins() {
        assert!(ece(&[pred(0.5, true)], 0).is_err());
    }

    #[test]
    fn ece_bins_partition_and_counts_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let preds: Vec<CorePrediction> = (0..200)
            .map(|_| pred(rng.random_range(0.0..=1.0), rng.random_bool(0.5)))
            .collect();
        let r = ece(&preds, 10).unwrap();
        assert_eq!(r.bin_edges.len(), 11);
        assert_eq!(r.bin_edges[0], 0.0);
        assert_eq!(*r.bin_edges.last().unwrap(), 1.0);
        assert_eq!(r.bin_count.iter().sum::<usize>(), 200);
        assert!(r.ece >= 0.0 && r.ece <= 1.0);
    }

    #[test]
    fn ece_of_true_posterior_scores_vanishes() {
        // Scores drawn as the true posterior: label ~ Bernoulli(score).
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let preds: Vec<CorePrediction> = (0..10_000)
            .map(|_| {
                let s: f64 = rng.random_range(0.0..1.0);
                pred(s, rng.random_bool(s))
            })
            .collect();
        let r = ece(&preds, 10).unwrap();
        assert!(r.ece < 0.03, "calibrated ECE {} should approach 0", r.ece);
    }

    #[test]
    fn involvement_filter_rules() {
        let mk = |inv: f64, cancer: bool| CorePrediction {
            core_id: format!("k{inv}"),
            score: 0.5,
            label_cancer: cancer,
            involvement: inv,
            center_id: "c".into(),
        };
        let preds = vec![mk(0.30, true), mk(0.0, false), mk(0.41, true), mk(0.40, true)];
        let kept = filter_involvement(&preds, 0.40);
        let ids: Vec<&str> = kept.iter().map(|p| p.core_id.as_str()).collect();
        assert!(ids.contains(&"k0")); // benign retained
        assert!(ids.contains(&"k0.41")); // strictly above threshold retained
        assert!(!ids.contains(&"k0.3")); // low involvement removed
        assert!(!ids.contains(&"k0.4")); // boundary inclusive: exactly 0.40 removed
    }

    proptest::proptest! {
        #[test]
        fn filter_never_drops_benign_or_keeps_low_involvement(seed in 0u64..u64::MAX) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let preds: Vec<CorePrediction> = (0..40)
                .map(|i| {
                    let cancer = rng.random_bool(0.5);
                    CorePrediction {
                        core_id: format!("k{i}"),
                        score: rng.random_range(0.0..1.0),
                        label_cancer: cancer,
                        involvement: if cancer { rng.random_range(0.0..1.0) } else { 0.0 },
                        center_id: "c".into(),
                    }
                })
                .collect();
            let kept = filter_involvement(&preds, 0.40);
            for p in &preds {
                let retained = kept.iter().any(|k| k.core_id == p.core_id);
                if !p.label_cancer {
                    proptest::prop_assert!(retained, "benign core dropped");
                } else if p.involvement <= 0.40 {
                    proptest::prop_assert!(!retained, "low-involvement cancer retained");
                } else {
                    proptest::prop_assert!(retained);
                }
            }
        }
    }

    #[test]
    fn evaluate_fold_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        // No low-involvement cancers: filtered == unfiltered.
        let preds: Vec<CorePrediction> = (0..30)
            .map(|i| {
                let cancer = i % 3 == 0;
                CorePrediction {
                    core_id: format!("k{i}"),
                    score: rng.random_range(0.0..1.0),
                    label_cancer: cancer,
                    involvement: if cancer { 0.9 } else { 0.0 },
                    center_id: "center_y".into(),
                }
            })
            .collect();
        let rep = evaluate_fold(&preds, &EvalThresholds::default()).unwrap();
        assert_eq!(rep.auroc, rep.auroc_all);
        assert_eq!(rep.n_cores_filtered, rep.n_cores_all);

        // Mixed-center input is rejected.
        let mut mixed = preds.clone();
        mixed[0].center_id = "other".into();
        assert!(evaluate_fold(&mixed, &EvalThresholds::default()).is_err());

        // Empty input is rejected.
        assert!(evaluate_fold(&[], &EvalThresholds::default()).is_err());
    }

    #[test]
    fn fold_auroc_tracks_generative_oracle() {
        // Scores generated from a known two-Gaussian latent: the closed-form
        // AUROC is Phi(delta / sqrt(2)).
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let delta = 1.5f64;
        let n = 4000;
        let preds: Vec<CorePrediction> = (0..n)
            .map(|i| {
                let cancer = i % 2 == 0;
                let mu = if cancer { delta } else { 0.0 };
                let z: f64 = rng.sample::<f64, _>(rand_distr::StandardNormal) + mu;
                CorePrediction {
                    core_id: format!("k{i}"),
                    score: 1.0 / (1.0 + (-z).exp()),
                    label_cancer: cancer,
                    involvement: if cancer { 0.9 } else { 0.0 },
                    center_id: "center_z".into(),
                }
            })
            .collect();
        let rep = evaluate_fold(&preds, &EvalThresholds::default()).unwrap();
        let oracle = normal_cdf(delta / 2.0f64.sqrt());
        assert!(
            (rep.auroc_all - oracle).abs() < 0.03,
            "{} vs oracle {}",
            rep.auroc_all,
            oracle
        );
    }

    fn normal_cdf(x: f64) -> f64 {
        // Abramowitz-Stegun style erf approximation is plenty here.
        let t = 1.0 / (1.0 + 0.2316419 * x.abs());
        let d = 0.3989423 * (-x * x / 2.0).exp();
        let p = d * t * (0.3193815 + t * (-0.3565638 + t * (1.781478 + t * (-1.821256 + t * 1.330274))));
        if x >= 0.0 {
            1.0 - p
        } else {
            p
        }
    }

    #[test]
    fn heatmap_dimensions_uniformity_and_overlap_averaging() {
        use crate::data::{PatchSpec, RFFrame};
        use crate::ensemble::{build_ensemble, MemberSpec, NormPolicy};
        use crate::nn::EncoderArch;
        use ndarray::Array2;

        let arch = EncoderArch {
            input_hw: 16,
            in_channels: 1,
            widths: [4, 8, 8, 8],
        };
        let model = build_ensemble(
            &[MemberSpec {
                arch,
                init_seed: 9,
            }],
            NormPolicy::group(4),
            2,
        )
        .unwrap();
        let (h, w) = (8 * 4, 11 * 4);
        let frame = RFFrame {
            samples: Array2::from_shape_fn((h, w), |(r, c)| ((r * w + c) % 53) as f32 * 0.02),
            physical_mm: (8.0, 11.0),
            needle_mask: Array2::from_elem((h, w), true),
        };
        let spec = PatchSpec {
            resize_to: (16, 16),
            ..PatchSpec::full()
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("map.png");
        let map = export_heatmap(&model, &frame, &spec, &path).unwrap();

        // Map dimensions equal frame dimensions; PNG exists.
        assert_eq!(map.dim(), (h, w));
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (w as u32, h as u32));

        // Brute-force overlap averaging at sampled pixels.
        let windows = crate::data::sliding_windows(&frame, &spec).unwrap();
        let probs: Vec<f64> = windows
            .iter()
            .map(|(img, _)| {
                let mut batch = ndarray::Array4::<f32>::zeros((1, 1, 16, 16));
                batch
                    .index_axis_mut(ndarray::Axis(0), 0)
                    .index_axis_mut(ndarray::Axis(0), 0)
                    .assign(img);
                model.forward_marginal(&batch).unwrap()[(0, 1)]
            })
            .collect();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..10 {
            let r = rng.random_range(0..h);
            let c = rng.random_range(0..w);
            let mut acc = 0.0;
            let mut k = 0.0;
            for ((_, pos), p) in windows.iter().zip(&probs) {
                let (r0, c0, wh, ww) = pos.px;
                if r >= r0 && r < r0 + wh && c >= c0 && c < c0 + ww {
                    acc += p;
                    k += 1.0;
                }
            }
            assert!(k > 0.0);
            assert!(
                (map[(r, c)] - acc / k).abs() < 1e-12,
                "pixel ({r},{c}): {} vs brute-force {}",
                map[(r, c)],
                acc / k
            );
        }
    }

    #[test]
    fn heatmap_constant_model_gives_uniform_map() {
        use crate::data::{PatchSpec, RFFrame};
        use crate::ensemble::{build_ensemble, MemberSpec, NormPolicy};
        use crate::nn::EncoderArch;
        use ndarray::Array2;

        let arch = EncoderArch {
            input_hw: 16,
            in_channels: 1,
            widths: [4, 8, 8, 8],
        };
        let mut model = build_ensemble(
            &[MemberSpec {
                arch,
                init_seed: 3,
            }],
            NormPolicy::group(4),
            2,
        )
        .unwrap();
        // Zeroing every parameter leaves only the (zero) fc bias: softmax is
        // uniform for every input.
        for v in model.member_params_mut(0).params.iter_mut() {
            *v = 0.0;
        }
        let (h, w) = (24, 28);
        let frame = RFFrame {
            samples: Array2::from_shape_fn((h, w), |(r, c)| (r as f32 - c as f32) * 0.05),
            physical_mm: (6.0, 7.0),
            needle_mask: Array2::from_elem((h, w), true),
        };
        let spec = PatchSpec {
            resize_to: (16, 16),
            ..PatchSpec::full()
        };
        let dir = tempfile::tempdir().unwrap();
        let map = export_heatmap(&model, &frame, &spec, &dir.path().join("u.png")).unwrap();
        for v in map.iter() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregate_uses_sample_std() {
        let mk = |a: f64| FoldReport {
            test_center: "c".into(),
            auroc: a,
            auroc_all: a,
            balanced_acc: a,
            ece: 0.1,
            n_cores_filtered: 10,
            n_cores_all: 12,
        };
        let agg = aggregate(&[mk(0.7), mk(0.8)]).unwrap();
        assert!((agg.mean.auroc - 0.75).abs() < 1e-12);
        // Sample std of {0.7, 0.8} is 0.0707..., population std would be 0.05.
        assert!((agg.std.auroc - (0.05f64 * 2.0f64.sqrt())).abs() < 1e-12);
    }
}
