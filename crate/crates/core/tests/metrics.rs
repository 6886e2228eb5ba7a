use fusmae::metrics::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

// Brute-force references written from the definitions.

/// 1-based rank with ties broken by lower index first.
fn naive_rank(scores: &[f64], i: usize) -> usize {
    1 + (0..scores.len())
        .filter(|&j| scores[j] > scores[i] || (scores[j] == scores[i] && j < i))
        .count()
}

fn naive_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let mut pos: Vec<usize> = (0..scores.len()).filter(|&i| labels[i]).collect();
    // Accumulate in rank order so float summation matches bit for bit.
    pos.sort_by_key(|&i| naive_rank(scores, i));
    if pos.is_empty() {
        return None;
    }
    let sum: f64 = pos
        .iter()
        .map(|&i| {
            let r = naive_rank(scores, i);
            let above = pos.iter().filter(|&&j| naive_rank(scores, j) <= r).count();
            above as f64 / r as f64
        })
        .sum();
    Some(sum / pos.len() as f64)
}

fn naive_topk(scores: &[Vec<f64>], truth: &[u16], k: usize) -> f64 {
    let hits = scores
        .iter()
        .zip(truth)
        .filter(|(row, &t)| naive_rank(row, t as usize) <= k)
        .count();
    hits as f64 / scores.len() as f64
}

fn naive_prf(scores: &[Vec<f64>], truth: &[u16]) -> (f64, f64, f64) {
    let k = scores[0].len();
    let n = scores.len() as f64;
    let pred: Vec<usize> = scores.iter().map(|r| (0..k).find(|&c| naive_rank(r, c) == 1).unwrap()).collect();
    let (mut p, mut r, mut f) = (0.0, 0.0, 0.0);
    for c in 0..k {
        let tp = (0..scores.len()).filter(|&i| pred[i] == c && truth[i] as usize == c).count() as f64;
        let fp = (0..scores.len()).filter(|&i| pred[i] == c && truth[i] as usize != c).count() as f64;
        let fneg = (0..scores.len()).filter(|&i| pred[i] != c && truth[i] as usize == c).count() as f64;
        let support = tp + fneg;
        if support == 0.0 {
            continue;
        }
        let pc = if tp + fp == 0.0 { 0.0 } else { tp / (tp + fp) };
        let rc = tp / support;
        let fc = if pc + rc == 0.0 { 0.0 } else { 2.0 * pc * rc / (pc + rc) };
        p += support / n * pc;
        r += support / n * rc;
        f += support / n * fc;
    }
    (p, r, f)
}

/// Scores drawn from a handful of levels so ties occur often.
fn tied_scores(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<Vec<f64>> {
    (0..n).map(|_| (0..k).map(|_| rng.random_range(0..4) as f64 / 4.0).collect()).collect()
}

#[test]
fn ap_worked_example() {
    let ap = average_precision(&[0.9, 0.8, 0.7], &[true, false, true]).unwrap();
    assert!((ap - 5.0 / 6.0).abs() < 1e-15);
    assert_eq!(average_precision(&[0.1, 0.9, 0.5], &[false, true, false]), Some(1.0));
    assert_eq!(average_precision(&[0.3, 0.2, 0.7], &[true, true, true]), Some(1.0));
    assert_eq!(average_precision(&[0.3, 0.2], &[false, false]), None);
}

#[test]
fn ap_matches_oracle_on_every_label_pattern() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for n in 1..=8 {
        for draw in 0..3 {
            let scores: Vec<f64> = if draw == 0 {
                (0..n).map(|_| rng.random::<f64>()).collect()
            } else {
                tied_scores(&mut rng, 1, n).remove(0)
            };
            for bits in 0u32..(1 << n) {
                let labels: Vec<bool> = (0..n).map(|i| bits >> i & 1 == 1).collect();
                assert_eq!(average_precision(&scores, &labels), naive_ap(&scores, &labels));
            }
        }
    }
}

#[test]
fn map_matches_oracle_exhaustively() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for k in 1..=3usize {
        // Enumerate all n·k label bits while that stays ≤ 2^12 patterns.
        for n in 1..=(12 / k).min(8) {
            let scores = tied_scores(&mut rng, n, k);
            for bits in 0u64..(1 << (n * k)) {
                let labels: Vec<Vec<bool>> =
                    (0..n).map(|i| (0..k).map(|c| bits >> (i * k + c) & 1 == 1).collect()).collect();
                let per: Vec<Option<f64>> = (0..k)
                    .map(|c| {
                        let col: Vec<f64> = scores.iter().map(|r| r[c]).collect();
                        let lab: Vec<bool> = labels.iter().map(|r| r[c]).collect();
                        naive_ap(&col, &lab)
                    })
                    .collect();
                let pred = PredictionSet::new(scores.clone(), Truth::Multilabel(labels)).unwrap();
                let got = mean_average_precision(&pred);
                let scored: Vec<f64> = per.iter().flatten().copied().collect();
                if scored.is_empty() {
                    assert!(got.is_err());
                    continue;
                }
                let got = got.unwrap();
                assert_eq!(got.per_class, per);
                assert_eq!(got.map, scored.iter().sum::<f64>() / scored.len() as f64);
            }
        }
    }
}

#[test]
fn topk_and_prf_match_oracle_exhaustively() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for k in 1..=3usize {
        for n in 1..=8usize {
            let scores = tied_scores(&mut rng, n, k);
            for code in 0..k.pow(n as u32) {
                let truth: Vec<u16> = (0..n).map(|i| (code / k.pow(i as u32) % k) as u16).collect();
                for kk in 1..=k {
                    assert_eq!(topk_accuracy(&scores, &truth, kk).unwrap(), naive_topk(&scores, &truth, kk));
                }
                let got = weighted_prf(&scores, &truth).unwrap();
                let (p, r, f) = naive_prf(&scores, &truth);
                assert_eq!((got.precision, got.recall, got.f1), (p, r, f));
                // Weighted recall is plain accuracy.
                assert!((got.recall - topk_accuracy(&scores, &truth, 1).unwrap()).abs() < 1e-15);
            }
        }
    }
}

#[test]
fn topk_examples() {
    assert_eq!(topk_accuracy(&[vec![0.2, 0.5, 0.3]], &[2], 2).unwrap(), 1.0);
    assert_eq!(topk_accuracy(&[vec![0.2, 0.5, 0.3]], &[2], 1).unwrap(), 0.0);
    assert_eq!(topk_accuracy(&[vec![0.9, 0.1]], &[0], 1).unwrap(), 1.0);
    assert_eq!(topk_accuracy(&[vec![0.1, 0.2, 0.3], vec![0.3, 0.2, 0.1]], &[0, 2], 3).unwrap(), 1.0);
    assert!(topk_accuracy(&[vec![0.1, 0.2]], &[0], 3).is_err());
}

#[test]
fn prf_examples() {
    // Supports {3, 1}; class 1 is never predicted correctly.
    let cm = vec![vec![3, 0], vec![1, 0]];
    let p = weighted_prf_from_confusion(&cm);
    // Class 0: P=3/4, R=1, F1=6/7. Class 1: everything 0.
    assert!((p.f1 - 0.75 * 6.0 / 7.0).abs() < 1e-15);
    let perfect = weighted_prf_from_confusion(&[vec![2, 0], vec![0, 5]]);
    assert_eq!((perfect.precision, perfect.recall, perfect.f1), (1.0, 1.0, 1.0));

    // The 3-class confusion matrix [[2,1,0],[0,2,0],[1,0,1]] as predictions.
    let cm = vec![vec![2u64, 1, 0], vec![0, 2, 0], vec![1, 0, 1]];
    let mut truth = Vec::new();
    let mut scores = Vec::new();
    for (t, row) in cm.iter().enumerate() {
        for (p, &count) in row.iter().enumerate() {
            for _ in 0..count {
                truth.push(t as u16);
                scores.push((0..3).map(|c| if c == p { 1.0 } else { 0.0 }).collect::<Vec<f64>>());
            }
        }
    }
    let got = weighted_prf(&scores, &truth).unwrap();
    let (p, r, f) = naive_prf(&scores, &truth);
    assert_eq!((got.precision, got.recall, got.f1), (p, r, f));
    assert_eq!(confusion_matrix(&truth, &scores.iter().map(|r| argmax(r)).collect::<Vec<_>>(), 3), cm);
}

#[test]
fn supports_weight_f1() {
    // Supports {3,1}, per-class F1 {1, 0}: class 1 predicted as a class that
    // has no samples, so class 0 keeps F1 1.
    let cm = vec![vec![3, 0, 0], vec![0, 0, 1], vec![0, 0, 0]];
    assert_eq!(weighted_prf_from_confusion(&cm).f1, 0.75);
}

#[test]
fn map_of_two_classes() {
    // Class 0 perfectly ranked (AP 1); class 1 positive at rank 2 (AP 1/2).
    let scores = vec![vec![0.9, 0.9], vec![0.1, 0.2]];
    let truth = Truth::Multilabel(vec![vec![true, false], vec![false, true]]);
    let r = mean_average_precision(&PredictionSet::new(scores, truth).unwrap()).unwrap();
    assert_eq!(r.per_class, vec![Some(1.0), Some(0.5)]);
    assert_eq!(r.map, 0.75);
}

#[test]
fn empty_classes_are_excluded() {
    let scores = vec![vec![0.9, 0.1, 0.3], vec![0.2, 0.8, 0.1]];
    let truth = Truth::Multilabel(vec![vec![true, false, false], vec![false, true, false]]);
    let report = MetricsReport::compute(&PredictionSet::new(scores, truth).unwrap()).unwrap();
    assert_eq!(report.map, 1.0);
    assert_eq!(report.excluded_classes(), vec![2]);
    assert_eq!(report.to_kv()["ap.2"], "excluded");
}

#[test]
fn random_scores_give_map_near_positive_rate() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (n, k) = (1000, 4);
    let scores: Vec<Vec<f64>> = (0..n).map(|_| (0..k).map(|_| rng.random()).collect()).collect();
    let labels: Vec<Vec<bool>> = (0..n).map(|_| (0..k).map(|_| rng.random_bool(0.5)).collect()).collect();
    let rate = labels.iter().flatten().filter(|&&b| b).count() as f64 / (n * k) as f64;
    let r = mean_average_precision(&PredictionSet::new(scores, Truth::Multilabel(labels)).unwrap()).unwrap();
    assert!((r.map - rate).abs() < 0.05, "map {} rate {rate}", r.map);
}

#[test]
fn report_serialization() {
    let scores = vec![vec![0.7, 0.2, 0.1], vec![0.1, 0.3, 0.6], vec![0.5, 0.4, 0.1]];
    let report = MetricsReport::compute(&PredictionSet::new(scores, Truth::Single(vec![0, 2, 1])).unwrap()).unwrap();
    assert_eq!(report.top3, Some(1.0));
    assert!((report.top1.unwrap() - 2.0 / 3.0).abs() < 1e-15);
    let row = report.csv_row();
    assert_eq!(row.split(',').count(), METRICS_CSV_HEADER.split(',').count());
    assert!(row.starts_with("single,3,"));
    assert!(report.to_text().contains("top1=0.666667"));
    let ml = MetricsReport::compute(
        &PredictionSet::new(vec![vec![0.4, 0.6]], Truth::Multilabel(vec![vec![true, true]])).unwrap(),
    )
    .unwrap();
    assert!(ml.csv_row().ends_with(",,,,,"));
}

#[test]
fn invalid_prediction_sets() {
    assert!(PredictionSet::new(vec![vec![f64::NAN]], Truth::Single(vec![0])).is_err());
    assert!(PredictionSet::new(vec![vec![0.1, 0.2]], Truth::Single(vec![2])).is_err());
    assert!(PredictionSet::new(vec![vec![0.1], vec![0.1, 0.2]], Truth::Single(vec![0, 0])).is_err());
    assert!(PredictionSet::new(vec![], Truth::Single(vec![])).is_err());
}

proptest! {
    #[test]
    fn metrics_are_invariant_under_monotone_transforms(
        raw in prop::collection::vec(prop::collection::vec(0u8..6, 3), 1..12),
        labels in prop::collection::vec(0u16..3, 12),
    ) {
        let n = raw.len();
        let scores: Vec<Vec<f64>> = raw.iter().map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        let warped: Vec<Vec<f64>> = scores.iter().map(|r| r.iter().map(|&v| (v * 0.7).exp() - 3.0).collect()).collect();
        let truth = Truth::Single(labels[..n].to_vec());
        let a = MetricsReport::compute(&PredictionSet::new(scores, truth.clone()).unwrap()).unwrap();
        let b = MetricsReport::compute(&PredictionSet::new(warped, truth).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }
}
