//! Video instance segmentation metrics and forgetting rates.
//!
//! IoU is spatio-temporal: intersections and unions are summed over all
//! frames of a video before dividing. AP is the area under the monotone
//! precision envelope, averaged over IoU thresholds 0.50:0.05:0.95. AR₁
//! keeps only the highest-scoring prediction of each class in each video.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// A predicted instance. `video` indexes the evaluated video list.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub video: usize,
    pub class: usize,
    pub score: f64,
    pub mask: Vec<bool>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub video: usize,
    pub class: usize,
    pub mask: Vec<bool>,
}

pub fn iou_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.5 + 0.05 * i as f64).collect()
}

pub fn mask_iou(a: &[bool], b: &[bool]) -> f64 {
    let (mut inter, mut union) = (0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Greedy matching in score order; returns the TP flag of each prediction
/// in that order. `preds` and `gts` are already filtered to one class.
fn match_ranked(preds: &[&Prediction], gts: &[&GroundTruth], threshold: f64) -> Vec<bool> {
    let mut used = vec![false; gts.len()];
    preds
        .iter()
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if used[g] || gt.video != p.video {
                    continue;
                }
                let iou = mask_iou(&p.mask, &gt.mask);
                if iou >= threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            match best {
                Some((g, _)) => {
                    used[g] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

fn ranked(preds: &[Prediction], class: usize) -> Vec<&Prediction> {
    let mut out: Vec<&Prediction> = preds.iter().filter(|p| p.class == class).collect();
    // Stable: ties keep input order.
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// AP of one class at one IoU threshold, `None` without ground truth.
pub fn average_precision(preds: &[Prediction], gts: &[GroundTruth], class: usize, threshold: f64) -> Option<f64> {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
    if gts.is_empty() {
        return None;
    }
    let preds = ranked(preds, class);
    let tp = match_ranked(&preds, &gts, threshold);
    let n = gts.len() as f64;
    let (mut hits, mut precision, mut recall) = (0usize, Vec::new(), Vec::new());
    for (i, &t) in tp.iter().enumerate() {
        hits += t as usize;
        precision.push(hits as f64 / (i + 1) as f64);
        recall.push(hits as f64 / n);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev) * p;
        prev = *r;
    }
    Some(ap)
}

/// Recall of one class at one threshold using the top prediction per video.
pub fn recall_at_one(preds: &[Prediction], gts: &[GroundTruth], class: usize, threshold: f64) -> Option<f64> {
    let gts: Vec<&GroundTruth> = gts.iter().filter(|g| g.class == class).collect();
    if gts.is_empty() {
        return None;
    }
    let mut top: BTreeMap<usize, &Prediction> = BTreeMap::new();
    for p in ranked(preds, class) {
        top.entry(p.video).or_insert(p);
    }
    let top: Vec<&Prediction> = top.into_values().collect();
    let hits = match_ranked(&top, &gts, threshold).into_iter().filter(|t| *t).count();
    Some(hits as f64 / gts.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub ap: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub ar1: f64,
}

pub fn class_metrics(preds: &[Prediction], gts: &[GroundTruth], class: usize) -> Option<ClassMetrics> {
    let th = iou_thresholds();
    let aps: Vec<f64> = th
        .iter()
        .map(|&t| average_precision(preds, gts, class, t))
        .collect::<Option<_>>()?;
    let ars: Vec<f64> = th
        .iter()
        .map(|&t| recall_at_one(preds, gts, class, t))
        .collect::<Option<_>>()?;
    Some(ClassMetrics {
        ap: aps.iter().sum::<f64>() / aps.len() as f64,
        ap50: aps[0],
        ap75: aps[5],
        ar1: ars.iter().sum::<f64>() / ars.len() as f64,
    })
}

/// Mean of each metric over the given classes; `None` if none is present.
pub fn aggregate<'a>(metrics: impl IntoIterator<Item = &'a ClassMetrics>) -> Option<ClassMetrics> {
    let all: Vec<&ClassMetrics> = metrics.into_iter().collect();
    if all.is_empty() {
        return None;
    }
    let n = all.len() as f64;
    let mean = |f: fn(&ClassMetrics) -> f64| all.iter().map(|m| f(m)).sum::<f64>() / n;
    Some(ClassMetrics {
        ap: mean(|m| m.ap),
        ap50: mean(|m| m.ap50),
        ap75: mean(|m| m.ap75),
        ar1: mean(|m| m.ar1),
    })
}

/// A metric's value for one class after each task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassHistory {
    pub class: usize,
    /// Task in which the class is first learned.
    pub task: usize,
    /// `values[t - 1]` is the value after task `t`; `None` before `task`.
    pub values: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forgetting {
    pub value: Option<f64>,
    /// Old classes left out because their first-learned value is 0.
    pub excluded: Vec<usize>,
}

/// Forgetting rate after `tasks` tasks:
/// `(1/|C|) Σ_{t<T} (1/(T−t)) Σ_{k ∈ task t} (A_k^t − A_k^T) / A_k^t`,
/// with `C` the old classes whose first-learned value is positive.
pub fn compute_fap(histories: &[ClassHistory], tasks: usize) -> Forgetting {
    let mut excluded = Vec::new();
    if tasks < 2 {
        return Forgetting { value: None, excluded };
    }
    let mut per_task: BTreeMap<usize, f64> = BTreeMap::new();
    let mut counted = 0usize;
    for h in histories.iter().filter(|h| h.task < tasks) {
        let first = h.values.get(h.task - 1).copied().flatten();
        let last = h.values.get(tasks - 1).copied().flatten();
        match (first, last) {
            (Some(a), Some(b)) if a > 0.0 => {
                *per_task.entry(h.task).or_insert(0.0) += (a - b) / a;
                counted += 1;
            }
            _ => excluded.push(h.class),
        }
    }
    if counted == 0 {
        return Forgetting { value: None, excluded };
    }
    let total: f64 = per_task.iter().map(|(&t, &s)| s / (tasks - t) as f64).sum();
    Forgetting {
        value: Some(total / counted as f64),
        excluded,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAggregate {
    pub task: usize,
    pub metrics: Option<ClassMetrics>,
}

/// Results of evaluating after one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub after_task: usize,
    pub per_class: BTreeMap<usize, ClassMetrics>,
    pub per_task: Vec<TaskAggregate>,
    pub overall: Option<ClassMetrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub evaluations: Vec<Evaluation>,
    pub ap_history: Vec<ClassHistory>,
    pub ar1_history: Vec<ClassHistory>,
    pub fap: Forgetting,
    pub far1: Forgetting,
}

impl MetricsReport {
    /// Builds histories and forgetting rates from per-task evaluations.
    /// `class_tasks[k]` is the task that introduces class `k`.
    pub fn from_evaluations(evaluations: Vec<Evaluation>, class_tasks: &[usize]) -> Self {
        let tasks = evaluations.len();
        let history = |f: fn(&ClassMetrics) -> f64| -> Vec<ClassHistory> {
            class_tasks
                .iter()
                .enumerate()
                .filter(|(_, &t)| t <= tasks)
                .map(|(k, &t)| ClassHistory {
                    class: k,
                    task: t,
                    values: evaluations
                        .iter()
                        .map(|e| if e.after_task < t { None } else { e.per_class.get(&k).map(f) })
                        .collect(),
                })
                .collect()
        };
        let ap_history = history(|m| m.ap);
        let ar1_history = history(|m| m.ar1);
        MetricsReport {
            fap: compute_fap(&ap_history, tasks),
            far1: compute_fap(&ar1_history, tasks),
            ap_history,
            ar1_history,
            evaluations,
        }
    }
}
