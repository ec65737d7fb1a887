//! Per-frame mAP and action-conditional metrics.

use serde::Serialize;

use crate::data::DenseLabels;
use crate::error::{Error, Result};

/// Scores and ground truth of one video. Frames with a false mask entry
/// take no part in any metric.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoScores {
    pub video_id: String,
    /// Row-major `T × C`, each in `[0, 1]`.
    pub scores: Vec<f64>,
    pub labels: DenseLabels,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalRun {
    pub classes: usize,
    pub videos: Vec<VideoScores>,
}

impl EvalRun {
    pub fn new(classes: usize, videos: Vec<VideoScores>) -> Result<Self> {
        for v in &videos {
            let t = v.labels.frames;
            if v.labels.classes != classes || v.scores.len() != t * classes || v.mask.len() != t {
                return Err(Error::Bounds(format!(
                    "video `{}`: scores {} / mask {} do not fit {t} frames x {classes} classes",
                    v.video_id,
                    v.scores.len(),
                    v.mask.len()
                )));
            }
            if let Some(s) = v.scores.iter().find(|s| !(0.0..=1.0).contains(*s)) {
                return Err(Error::Bounds(format!("video `{}`: score {s} outside [0, 1]", v.video_id)));
            }
        }
        Ok(Self { classes, videos })
    }

    /// Scores and labels of one class over every valid frame, videos in order.
    pub fn class_column(&self, class: usize) -> (Vec<f64>, Vec<bool>) {
        let mut scores = Vec::new();
        let mut labels = Vec::new();
        for v in &self.videos {
            for t in (0..v.labels.frames).filter(|&t| v.mask[t]) {
                scores.push(v.scores[t * self.classes + class]);
                labels.push(v.labels.active(t, class));
            }
        }
        (scores, labels)
    }
}

/// Frame order by descending score; ties keep their original order.
fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Precision at the rank of each positive, in rank order.
pub fn precision_at_positives(scores: &[f64], labels: &[bool]) -> Vec<f64> {
    let mut hits = 0usize;
    let mut out = Vec::new();
    for (rank, &i) in ranking(scores).iter().enumerate() {
        if labels[i] {
            hits += 1;
            out.push(hits as f64 / (rank + 1) as f64);
        }
    }
    out
}

/// Mean precision at the ranks of the positives; `None` without positives.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let p = precision_at_positives(scores, labels);
    (!p.is_empty()).then(|| p.iter().sum::<f64>() / p.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapReport {
    pub map: f64,
    /// `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
    pub skipped_classes: Vec<usize>,
}

/// AP per class over all valid frames of all videos, averaged over the
/// classes that have at least one positive.
pub fn per_frame_map(run: &EvalRun) -> MapReport {
    let per_class: Vec<Option<f64>> = (0..run.classes)
        .map(|c| {
            let (s, l) = run.class_column(c);
            average_precision(&s, &l)
        })
        .collect();
    let scored: Vec<f64> = per_class.iter().flatten().copied().collect();
    MapReport {
        map: if scored.is_empty() {
            0.0
        } else {
            scored.iter().sum::<f64>() / scored.len() as f64
        },
        skipped_classes: (0..run.classes).filter(|&c| per_class[c].is_none()).collect(),
        per_class,
    }
}

/// Per-class precision values at each positive rank.
pub fn class_curves(run: &EvalRun) -> Vec<Vec<f64>> {
    (0..run.classes)
        .map(|c| {
            let (s, l) = run.class_column(c);
            precision_at_positives(&s, &l)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConditionalReport {
    pub tau: usize,
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map: f64,
    pub pairs_used: usize,
    pub pairs_skipped: usize,
}

/// `window[t]` is true when `class` is active at some valid frame within
/// `tau` of `t`.
fn condition_window(v: &VideoScores, class: usize, tau: usize) -> Vec<bool> {
    let t = v.labels.frames;
    let mut prefix = vec![0usize; t + 1];
    for f in 0..t {
        prefix[f + 1] = prefix[f] + usize::from(v.mask[f] && v.labels.active(f, class));
    }
    (0..t)
        .map(|f| prefix[(f + tau + 1).min(t)] > prefix[f.saturating_sub(tau)])
        .collect()
}

/// For every ordered class pair `(i, j)`, class `i` is evaluated only on
/// the valid frames within `tau` of a ground-truth frame of class `j` in
/// the same video. Precision, recall and F1 binarize scores at
/// `threshold`. Pairs whose restricted frames hold no positive of `i` are
/// skipped; the rest are averaged.
pub fn action_conditional_metrics(run: &EvalRun, tau: usize, threshold: f64) -> ConditionalReport {
    let c = run.classes;
    let windows: Vec<Vec<Vec<bool>>> = run
        .videos
        .iter()
        .map(|v| (0..c).map(|j| condition_window(v, j, tau)).collect())
        .collect();
    let (mut sp, mut sr, mut sf, mut sa) = (0.0, 0.0, 0.0, 0.0);
    let mut used = 0;
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for j in 0..c {
        for i in 0..c {
            scores.clear();
            labels.clear();
            for (v, w) in run.videos.iter().zip(&windows) {
                for t in (0..v.labels.frames).filter(|&t| v.mask[t] && w[j][t]) {
                    scores.push(v.scores[t * c + i]);
                    labels.push(v.labels.active(t, i));
                }
            }
            let Some(ap) = average_precision(&scores, &labels) else {
                continue;
            };
            let (mut tp, mut fp, mut fnn) = (0usize, 0usize, 0usize);
            for (&s, &y) in scores.iter().zip(&labels) {
                match (s >= threshold, y) {
                    (true, true) => tp += 1,
                    (true, false) => fp += 1,
                    (false, true) => fnn += 1,
                    (false, false) => {}
                }
            }
            let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
            let recall = tp as f64 / (tp + fnn) as f64;
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            sp += precision;
            sr += recall;
            sf += f1;
            sa += ap;
            used += 1;
        }
    }
    let mean = |s: f64| if used == 0 { 0.0 } else { s / used as f64 };
    ConditionalReport {
        tau,
        threshold,
        precision: mean(sp),
        recall: mean(sr),
        f1: mean(sf),
        map: mean(sa),
        pairs_used: used,
        pairs_skipped: c * c - used,
    }
}
