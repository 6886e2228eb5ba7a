//! Classification metrics: AP / mAP, top-k accuracy and support-weighted
//! precision, recall and F1. All rankings break ties by index.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::config::Task;
use crate::error::{Error, Result};

/// Ground truth for `n` samples over `k` classes.
#[derive(Debug, Clone, PartialEq)]
pub enum Truth {
    Multilabel(Vec<Vec<bool>>),
    Single(Vec<u16>),
}

impl Truth {
    pub fn len(&self) -> usize {
        match self {
            Truth::Multilabel(v) => v.len(),
            Truth::Single(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn task(&self) -> Task {
        match self {
            Truth::Multilabel(_) => Task::Multilabel,
            Truth::Single(_) => Task::Single,
        }
    }

    /// Indicator matrix (one-hot for single-label truth).
    pub fn indicators(&self, k: usize) -> Vec<Vec<bool>> {
        match self {
            Truth::Multilabel(v) => v.clone(),
            Truth::Single(v) => v.iter().map(|&c| (0..k).map(|j| j == c as usize).collect()).collect(),
        }
    }

    pub fn subset(&self, idx: &[usize]) -> Truth {
        match self {
            Truth::Multilabel(v) => Truth::Multilabel(idx.iter().map(|&i| v[i].clone()).collect()),
            Truth::Single(v) => Truth::Single(idx.iter().map(|&i| v[i]).collect()),
        }
    }
}

/// Scores `n × k` plus their ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionSet {
    pub scores: Vec<Vec<f64>>,
    pub truth: Truth,
    pub k: usize,
}

impl PredictionSet {
    pub fn new(scores: Vec<Vec<f64>>, truth: Truth) -> Result<Self> {
        if scores.len() != truth.len() {
            return Err(Error::Invalid(format!("{} score rows for {} labels", scores.len(), truth.len())));
        }
        let k = scores.first().map_or(0, Vec::len);
        if k == 0 {
            return Err(Error::Invalid("prediction set needs at least one sample and class".into()));
        }
        if scores.iter().any(|r| r.len() != k) {
            return Err(Error::Invalid("ragged score matrix".into()));
        }
        if scores.iter().flatten().any(|v| v.is_nan()) {
            return Err(Error::Invalid("NaN score".into()));
        }
        let ok = match &truth {
            Truth::Multilabel(v) => v.iter().all(|r| r.len() == k),
            Truth::Single(v) => v.iter().all(|&c| (c as usize) < k),
        };
        if !ok {
            return Err(Error::Invalid(format!("labels disagree with {k} classes")));
        }
        Ok(PredictionSet { scores, truth, k })
    }

    pub fn n(&self) -> usize {
        self.scores.len()
    }

    fn column(&self, c: usize) -> Vec<f64> {
        self.scores.iter().map(|r| r[c]).collect()
    }
}

/// Indices sorted by descending score, ties by ascending index.
pub fn rank_desc(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Mean of precision@rank over the ranks of the positives; `None` when there
/// are no positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels differ in length");
    let mut hits = 0usize;
    let mut total = 0.0;
    for (rank, &i) in rank_desc(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            total += hits as f64 / (rank + 1) as f64;
        }
    }
    (hits > 0).then(|| total / hits as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MapResult {
    pub map: f64,
    /// `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub excluded: Vec<usize>,
}

/// Macro mAP over classes that have at least one positive.
pub fn mean_average_precision(pred: &PredictionSet) -> Result<MapResult> {
    let ind = pred.truth.indicators(pred.k);
    let per_class: Vec<Option<f64>> = (0..pred.k)
        .map(|c| {
            let labels: Vec<bool> = ind.iter().map(|r| r[c]).collect();
            average_precision(&pred.column(c), &labels)
        })
        .collect();
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    if scored.is_empty() {
        return Err(Error::Invalid("no class has a positive label; mAP undefined".into()));
    }
    let excluded = per_class.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(c, _)| c).collect();
    Ok(MapResult {
        map: scored.iter().sum::<f64>() / scored.len() as f64,
        per_class,
        excluded,
    })
}

/// Fraction of samples whose true class is among the `k` best scores.
pub fn topk_accuracy(scores: &[Vec<f64>], truth: &[u16], k: usize) -> Result<f64> {
    if scores.is_empty() || scores.len() != truth.len() {
        return Err(Error::Invalid("top-k needs matching, non-empty scores and labels".into()));
    }
    let classes = scores[0].len();
    if k == 0 || k > classes {
        return Err(Error::Invalid(format!("top-{k} with {classes} classes")));
    }
    let hits = scores
        .iter()
        .zip(truth)
        .filter(|(row, &t)| rank_desc(row)[..k].contains(&(t as usize)))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

/// Highest-scoring class, lowest index on ties.
pub fn argmax(row: &[f64]) -> usize {
    rank_desc(row)[0]
}

/// `cm[true][pred]` counts.
pub fn confusion_matrix(truth: &[u16], pred: &[usize], k: usize) -> Vec<Vec<u64>> {
    let mut cm = vec![vec![0u64; k]; k];
    for (&t, &p) in truth.iter().zip(pred) {
        cm[t as usize][p] += 1;
    }
    cm
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-class P/R/F1 averaged with weights `support / n`. A class that is
/// never predicted has precision 0; F1 is 0 whenever P + R = 0.
pub fn weighted_prf_from_confusion(cm: &[Vec<u64>]) -> Prf {
    let k = cm.len();
    let n: u64 = cm.iter().flatten().sum();
    let mut out = Prf {
        precision: 0.0,
        recall: 0.0,
        f1: 0.0,
    };
    if n == 0 {
        return out;
    }
    for c in 0..k {
        let support: u64 = cm[c].iter().sum();
        if support == 0 {
            continue;
        }
        let tp = cm[c][c] as f64;
        let predicted: u64 = (0..k).map(|r| cm[r][c]).sum();
        let p = if predicted == 0 { 0.0 } else { tp / predicted as f64 };
        let r = tp / support as f64;
        let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        let w = support as f64 / n as f64;
        out.precision += w * p;
        out.recall += w * r;
        out.f1 += w * f;
    }
    out
}

pub fn weighted_prf(scores: &[Vec<f64>], truth: &[u16]) -> Result<Prf> {
    if scores.is_empty() || scores.len() != truth.len() {
        return Err(Error::Invalid("weighted P/R/F1 needs matching, non-empty scores and labels".into()));
    }
    let pred: Vec<usize> = scores.iter().map(|r| argmax(r)).collect();
    Ok(weighted_prf_from_confusion(&confusion_matrix(truth, &pred, scores[0].len())))
}

/// Everything reported for one evaluation. Single-label tasks fill the
/// accuracy and P/R/F1 fields and also score mAP against one-hot labels.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub task: Task,
    pub n: usize,
    pub map: f64,
    pub per_class_ap: Vec<Option<f64>>,
    pub top1: Option<f64>,
    pub top3: Option<f64>,
    pub prf: Option<Prf>,
}

pub const METRICS_CSV_HEADER: &str = "task,n,map,top1,top3,precision,recall,f1";

impl MetricsReport {
    pub fn compute(pred: &PredictionSet) -> Result<Self> {
        let map = mean_average_precision(pred)?;
        let (top1, top3, prf) = match &pred.truth {
            Truth::Single(t) => (
                Some(topk_accuracy(&pred.scores, t, 1)?),
                if pred.k >= 3 { Some(topk_accuracy(&pred.scores, t, 3)?) } else { None },
                Some(weighted_prf(&pred.scores, t)?),
            ),
            Truth::Multilabel(_) => (None, None, None),
        };
        if let (Some(a), Some(p)) = (top1, prf) {
            debug_assert!((a - p.recall).abs() < 1e-12, "weighted recall must equal accuracy");
        }
        Ok(MetricsReport {
            task: pred.truth.task(),
            n: pred.n(),
            map: map.map,
            per_class_ap: map.per_class,
            top1,
            top3,
            prf,
        })
    }

    /// Classes left out of mAP for lack of positives.
    pub fn excluded_classes(&self) -> Vec<usize> {
        self.per_class_ap.iter().enumerate().filter(|(_, a)| a.is_none()).map(|(c, _)| c).collect()
    }

    /// One row matching [`METRICS_CSV_HEADER`]; absent values are empty.
    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6},{},{},{},{},{}",
            self.task,
            self.n,
            self.map,
            opt(self.top1),
            opt(self.top3),
            opt(self.prf.map(|p| p.precision)),
            opt(self.prf.map(|p| p.recall)),
            opt(self.prf.map(|p| p.f1)),
        )
    }

    pub fn to_kv(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("task".into(), self.task.to_string());
        m.insert("n".into(), self.n.to_string());
        m.insert("map".into(), format!("{:.6}", self.map));
        for (c, ap) in self.per_class_ap.iter().enumerate() {
            let v = ap.map(|a| format!("{a:.6}")).unwrap_or_else(|| "excluded".into());
            m.insert(format!("ap.{c}"), v);
        }
        let mut put = |k: &str, v: Option<f64>| {
            if let Some(v) = v {
                m.insert(k.into(), format!("{v:.6}"));
            }
        };
        put("top1", self.top1);
        put("top3", self.top3);
        put("precision", self.prf.map(|p| p.precision));
        put("recall", self.prf.map(|p| p.recall));
        put("f1", self.prf.map(|p| p.f1));
        m
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in self.to_kv() {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
