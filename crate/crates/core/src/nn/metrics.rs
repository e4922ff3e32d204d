//! Task metrics, in percent.

use super::data::{Dataset, NO_OBJECT};
use super::engine::EngineModel;
use super::exit::{DetectionSet, ExitPolicy, Prediction};
use super::TaskKind;
use serde::{Deserialize, Serialize};

/// Top-1 accuracy over `(prediction, label)` pairs.
pub fn accuracy(preds: &[Prediction], labels: &[u8]) -> f64 {
    if preds.is_empty() {
        return 0.0;
    }
    let hit = preds
        .iter()
        .zip(labels)
        .filter(|(p, &l)| matches!(p, Prediction::Class { class, .. } if *class == l as usize))
        .count();
    100.0 * hit as f64 / preds.len() as f64
}

/// Area under the precision/recall curve with all-point interpolation.
/// `scored` holds `(score, is_true_positive)`; `positives` is the number of
/// ground-truth objects.
pub fn average_precision(scored: &mut [(f32, bool)], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut tp = 0usize;
    let mut prec = Vec::with_capacity(scored.len());
    let mut rec = Vec::with_capacity(scored.len());
    for (k, &(_, hit)) in scored.iter().enumerate() {
        tp += usize::from(hit);
        prec.push(tp as f64 / (k + 1) as f64);
        rec.push(tp as f64 / positives as f64);
    }
    for k in (0..prec.len().saturating_sub(1)).rev() {
        prec[k] = prec[k].max(prec[k + 1]);
    }
    let mut ap = 0.0;
    let mut last_r = 0.0;
    for (p, r) in prec.iter().zip(&rec) {
        ap += (r - last_r) * p;
        last_r = *r;
    }
    ap
}

/// Mean AP over classes that occur in the ground truth. A predicted cell
/// matches only its own grid cell (IoU taken as 1), so every cell is one
/// candidate scored by `objectness × confidence`.
pub fn mean_average_precision(dets: &[DetectionSet], targets: &[&[u8]], classes: usize) -> f64 {
    let mut per_class: Vec<Vec<(f32, bool)>> = vec![Vec::new(); classes];
    let mut positives = vec![0usize; classes];
    for (set, truth) in dets.iter().zip(targets) {
        for &t in truth.iter() {
            if t != NO_OBJECT {
                positives[t as usize] += 1;
            }
        }
        for b in &set.boxes {
            if b.class < classes {
                let hit = truth.get(b.cell).is_some_and(|&t| t as usize == b.class);
                per_class[b.class].push((b.objectness * b.confidence, hit));
            }
        }
    }
    let mut sum = 0.0;
    let mut n = 0;
    for c in 0..classes {
        if positives[c] > 0 {
            sum += average_precision(&mut per_class[c], positives[c]);
            n += 1;
        }
    }
    if n == 0 {
        0.0
    } else {
        100.0 * sum / n as f64
    }
}

/// Task metric plus exit statistics of an engine over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    /// Accuracy or mAP, percent.
    pub performance: f64,
    pub mean_layers: f64,
    /// How many samples left at each exit; the last slot is the final layer.
    pub exit_counts: Vec<usize>,
}

pub fn evaluate(model: &EngineModel, data: &Dataset, policy: &ExitPolicy) -> Evaluation {
    let mut preds = Vec::with_capacity(data.len());
    let mut layers = 0usize;
    let mut exit_counts = vec![0usize; model.exits.len() + 1];
    for i in 0..data.len() {
        let r = model.forward(data.input(i), policy);
        layers += r.layers_executed;
        let slot = model.exits.iter().position(|e| e.attach == r.exit_index).unwrap_or(model.exits.len());
        exit_counts[slot] += 1;
        preds.push(r.prediction);
    }
    Evaluation {
        performance: score(model.task, model.classes, preds, data),
        mean_layers: layers as f64 / data.len().max(1) as f64,
        exit_counts,
    }
}

/// Accuracy or mAP of predictions against `data`'s targets.
pub fn score(task: TaskKind, classes: usize, preds: Vec<Prediction>, data: &Dataset) -> f64 {
    match task {
        TaskKind::Classification => {
            let labels: Vec<u8> = (0..data.len()).map(|i| data.target(i)[0]).collect();
            accuracy(&preds, &labels)
        }
        TaskKind::Detection => {
            let dets: Vec<DetectionSet> = preds
                .into_iter()
                .map(|p| match p {
                    Prediction::Detections(d) => d,
                    Prediction::Class { .. } => DetectionSet::default(),
                })
                .collect();
            let targets: Vec<&[u8]> = (0..data.len()).map(|i| data.target(i)).collect();
            mean_average_precision(&dets, &targets, classes)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::exit::Detection;

    #[test]
    fn perfect_ranking_gives_full_ap() {
        let mut s = vec![(0.9, true), (0.8, true), (0.1, false)];
        assert!((average_precision(&mut s, 2) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_ap() {
        // ranks: T F T, 2 positives -> precision 1, 1/2, 2/3 at recall 0.5, 0.5, 1
        // interpolated: 1 at r=.5, 2/3 at r=1 -> 0.5 + 0.5*2/3
        let mut s = vec![(0.9, true), (0.8, false), (0.7, true)];
        assert!((average_precision(&mut s, 2) - (0.5 + 1.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn map_on_exact_grid() {
        let truth: Vec<u8> = vec![0, NO_OBJECT, 1, NO_OBJECT];
        let set = DetectionSet {
            boxes: (0..4)
                .map(|cell| Detection {
                    cell,
                    objectness: if truth[cell] == NO_OBJECT { 0.1 } else { 0.9 },
                    confidence: 1.0,
                    class: if truth[cell] == NO_OBJECT { 0 } else { truth[cell] as usize },
                })
                .collect(),
        };
        assert!((mean_average_precision(&[set], &[&truth], 2) - 100.0).abs() < 1e-9);
    }
}
