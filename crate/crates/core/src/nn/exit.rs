//! Early-exit decisions for classifier and detector heads.

use super::TaskKind;
use serde::{Deserialize, Serialize};

/// `threshold` is T; `presence` is the object-presence cutoff used by
/// detector exits (unrelated to the activation clip bound).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExitPolicy {
    pub enabled: bool,
    pub threshold: f32,
    #[serde(default = "default_presence")]
    pub presence: f32,
}

fn default_presence() -> f32 {
    0.5
}

impl ExitPolicy {
    pub const DISABLED: ExitPolicy = ExitPolicy { enabled: false, threshold: 1.0, presence: 0.5 };

    pub fn at(threshold: f32) -> Self {
        ExitPolicy { enabled: true, threshold, presence: 0.5 }
    }
}

impl Default for ExitPolicy {
    fn default() -> Self {
        Self::DISABLED
    }
}

/// One grid cell's prediction, before any suppression.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub cell: usize,
    pub objectness: f32,
    /// Highest class probability.
    pub confidence: f32,
    pub class: usize,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectionSet {
    pub boxes: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Prediction {
    Class { scores: Vec<f32>, class: usize },
    Detections(DetectionSet),
}

impl Prediction {
    pub fn from_output(task: TaskKind, classes: usize, out: &[f32]) -> Self {
        match task {
            TaskKind::Classification => {
                let scores = softmax(out);
                let class = argmax(&scores);
                Prediction::Class { scores, class }
            }
            TaskKind::Detection => Prediction::Detections(decode_grid(out, classes)),
        }
    }

    pub fn should_exit(&self, policy: &ExitPolicy) -> bool {
        match self {
            Prediction::Class { scores, .. } => should_exit_classifier(scores, policy.threshold),
            Prediction::Detections(d) => should_exit_detector(d, policy.presence, policy.threshold),
        }
    }
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] || v[best].is_nan() {
            best = i;
        }
    }
    best
}

pub fn softmax(logits: &[f32]) -> Vec<f32> {
    let m = logits.iter().cloned().filter(|x| !x.is_nan()).fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f32> = logits.iter().map(|&x| if x.is_nan() { 0.0 } else { (x - m).exp() }).collect();
    let s: f32 = e.iter().sum();
    if s.is_finite() && s > 0.0 {
        e.iter().map(|v| v / s).collect()
    } else {
        vec![1.0 / logits.len() as f32; logits.len()]
    }
}

pub fn sigmoid(x: f32) -> f32 {
    if x.is_nan() {
        0.5
    } else {
        1.0 / (1.0 + (-x).exp())
    }
}

/// Splits a `(1 + classes) × G × G` output into per-cell detections:
/// channel 0 is the objectness logit, the rest class logits.
pub fn decode_grid(out: &[f32], classes: usize) -> DetectionSet {
    let cells = out.len() / (classes + 1);
    let mut boxes = Vec::with_capacity(cells);
    let mut logits = vec![0.0; classes];
    for cell in 0..cells {
        for (k, l) in logits.iter_mut().enumerate() {
            *l = out[(k + 1) * cells + cell];
        }
        let p = softmax(&logits);
        let class = argmax(&p);
        boxes.push(Detection { cell, objectness: sigmoid(out[cell]), confidence: p[class], class });
    }
    DetectionSet { boxes }
}

/// Exit when the top class probability is strictly above `t`.
pub fn should_exit_classifier(scores: &[f32], t: f32) -> bool {
    scores.iter().cloned().fold(f32::NEG_INFINITY, f32::max) > t
}

/// Exit when boxes with objectness above `presence` exist and their mean
/// `objectness × confidence` is strictly above `t`. No such boxes: no exit.
pub fn should_exit_detector(dets: &DetectionSet, presence: f32, t: f32) -> bool {
    let (mut n, mut sum) = (0usize, 0.0f32);
    for b in &dets.boxes {
        if b.objectness > presence {
            n += 1;
            sum += b.objectness * b.confidence;
        }
    }
    n > 0 && sum / n as f32 > t
}
