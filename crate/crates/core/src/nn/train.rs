//! Float training: backbone, frozen-backbone exit fine-tuning, and clip
//! bound calibration.

use super::data::{Dataset, NO_OBJECT};
use super::engine::Theta;
use super::exit::{sigmoid, softmax, Prediction};
use super::metrics::score;
use super::model::{backward, trace, Model, Trace};
use super::{NnError, TaskKind};
use crate::rng::rng_from_seed;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig { epochs: 12, batch_size: 32, learning_rate: 3e-3, seed: 7 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean training loss per epoch.
    pub epoch_loss: Vec<f32>,
}

struct Adam {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
}

impl Adam {
    fn new(shapes: &[usize]) -> Self {
        Adam { m: shapes.iter().map(|&n| vec![0.0; n]).collect(), v: shapes.iter().map(|&n| vec![0.0; n]).collect(), t: 0 }
    }

    fn step(&mut self, params: &mut [&mut Vec<f32>], grads: &[Vec<f32>], lr: f32, scale: f32) {
        const B1: f32 = 0.9;
        const B2: f32 = 0.999;
        self.t += 1;
        let c1 = 1.0 - B1.powi(self.t);
        let c2 = 1.0 - B2.powi(self.t);
        for (k, p) in params.iter_mut().enumerate() {
            for (j, w) in p.iter_mut().enumerate() {
                let g = grads[k][j] * scale;
                self.m[k][j] = B1 * self.m[k][j] + (1.0 - B1) * g;
                self.v[k][j] = B2 * self.v[k][j] + (1.0 - B2) * g * g;
                *w -= lr * (self.m[k][j] / c1) / ((self.v[k][j] / c2).sqrt() + 1e-8);
            }
        }
    }
}

/// Loss of one output against its target; writes d(loss)/d(output).
///
/// Classification: softmax cross-entropy. Detection: per cell, binary
/// cross-entropy on the objectness logit plus softmax cross-entropy on the
/// class logits of occupied cells, averaged over cells.
pub fn task_loss(task: TaskKind, classes: usize, out: &[f32], target: &[u8], grad: &mut [f32]) -> f32 {
    match task {
        TaskKind::Classification => {
            let p = softmax(out);
            let y = target[0] as usize;
            for (k, g) in grad.iter_mut().enumerate() {
                *g = p[k] - f32::from(k == y);
            }
            -(p[y].max(1e-12)).ln()
        }
        TaskKind::Detection => {
            let cells = target.len();
            let norm = 1.0 / cells as f32;
            let mut loss = 0.0;
            let mut logits = vec![0.0; classes];
            for (cell, &t) in target.iter().enumerate() {
                let z = out[cell];
                let obj = f32::from(t != NO_OBJECT);
                loss += (z.max(0.0) + (-z.abs()).exp().ln_1p() - obj * z) * norm;
                grad[cell] = (sigmoid(z) - obj) * norm;
                for (k, l) in logits.iter_mut().enumerate() {
                    *l = out[(k + 1) * cells + cell];
                    grad[(k + 1) * cells + cell] = 0.0;
                }
                if t != NO_OBJECT {
                    let p = softmax(&logits);
                    loss -= p[t as usize].max(1e-12).ln() * norm;
                    for k in 0..classes {
                        grad[(k + 1) * cells + cell] = (p[k] - f32::from(k == t as usize)) * norm;
                    }
                }
            }
            loss
        }
    }
}

fn check(loss: f32, epoch: usize, step: usize) -> Result<(), NnError> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(NnError::Diverged { epoch, step, loss })
    }
}

/// Trains the backbone in place with Adam on mini-batches.
pub fn train_backbone(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, NnError> {
    if data.is_empty() {
        return Err(NnError::Empty("training set"));
    }
    let mut rng = rng_from_seed(cfg.seed);
    let sizes: Vec<usize> = model.backbone.iter().map(|l| l.params.len()).collect();
    let mut adam = Adam::new(&sizes);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let out_len = model.trace_backbone(data.input(0)).output().len();
    let mut gout = vec![0.0; out_len];
    let mut report = TrainReport { epoch_loss: Vec::new() };
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = if epoch * 4 >= cfg.epochs * 3 { cfg.learning_rate * 0.3 } else { cfg.learning_rate };
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut grads: Vec<Vec<f32>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let t = trace(&model.backbone, data.input(i), model.input);
                batch_loss += task_loss(model.task, model.classes, t.output(), data.target(i), &mut gout);
                backward(&model.backbone, &t, &gout, &mut grads, false);
            }
            check(batch_loss, epoch, step)?;
            total += batch_loss;
            let mut params: Vec<&mut Vec<f32>> = model.backbone.iter_mut().map(|l| &mut l.params).collect();
            adam.step(&mut params, &grads, lr, 1.0 / batch.len() as f32);
            if params.iter().any(|p| p.iter().any(|w| !w.is_finite())) {
                return Err(NnError::Diverged { epoch, step, loss: f32::NAN });
            }
        }
        report.epoch_loss.push(total / data.len() as f32);
    }
    Ok(report)
}

/// Mean loss of each exit head over `data`. Their sum is the fine-tuning
/// objective.
pub fn exit_losses(model: &Model, data: &Dataset) -> Vec<f64> {
    let mut sums = vec![0.0f64; model.exits.len()];
    for i in 0..data.len() {
        let bt = model.trace_backbone(data.input(i));
        for (e, s) in sums.iter_mut().enumerate() {
            let ht = model.trace_exit(e, &bt);
            let mut g = vec![0.0; ht.output().len()];
            *s += f64::from(task_loss(model.task, model.classes, ht.output(), data.target(i), &mut g));
        }
    }
    sums.iter().map(|s| s / data.len().max(1) as f64).collect()
}

/// Trains the exit heads with the backbone frozen, minimising the sum of
/// per-exit losses.
pub fn finetune_exits(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport, NnError> {
    if data.is_empty() {
        return Err(NnError::Empty("training set"));
    }
    let mut report = TrainReport { epoch_loss: Vec::new() };
    if model.exits.is_empty() {
        return Ok(report);
    }
    // Frozen backbone: cache each head's input once.
    let feats: Vec<Vec<Vec<f32>>> = (0..data.len())
        .map(|i| {
            let bt = model.trace_backbone(data.input(i));
            model.exits.iter().map(|e| bt.inputs[e.attach].clone()).collect()
        })
        .collect();
    let shapes = model.backbone_shapes();
    let mut rng = rng_from_seed(cfg.seed);
    let sizes: Vec<usize> = model.exits.iter().flat_map(|e| e.layers.iter().map(|l| l.params.len())).collect();
    let mut adam = Adam::new(&sizes);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let lr = if epoch * 4 >= cfg.epochs * 3 { cfg.learning_rate * 0.3 } else { cfg.learning_rate };
        let mut total = 0.0;
        for (step, batch) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let mut grads: Vec<Vec<f32>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
            let mut batch_loss = 0.0;
            for &i in batch {
                let mut off = 0;
                for (e, head) in model.exits.iter().enumerate() {
                    let t: Trace = trace(&head.layers, &feats[i][e], shapes[head.attach]);
                    let mut g = vec![0.0; t.output().len()];
                    batch_loss += task_loss(model.task, model.classes, t.output(), data.target(i), &mut g);
                    let n = head.layers.len();
                    backward(&head.layers, &t, &g, &mut grads[off..off + n], false);
                    off += n;
                }
            }
            check(batch_loss, epoch, step)?;
            total += batch_loss;
            let mut params: Vec<&mut Vec<f32>> =
                model.exits.iter_mut().flat_map(|e| e.layers.iter_mut().map(|l| &mut l.params)).collect();
            adam.step(&mut params, &grads, lr, 1.0 / batch.len() as f32);
            if params.iter().any(|p| p.iter().any(|w| !w.is_finite())) {
                return Err(NnError::Diverged { epoch, step, loss: f32::NAN });
            }
        }
        report.epoch_loss.push(total / data.len() as f32);
    }
    Ok(report)
}

/// Largest pre-activation per layer over `data`, with clip bounds lifted.
pub fn calibrate_theta(model: &Model, data: &Dataset) -> Result<Theta, NnError> {
    if data.is_empty() {
        return Err(NnError::Empty("calibration set"));
    }
    let mut open = model.clone();
    for l in open.backbone.iter_mut().chain(open.exits.iter_mut().flat_map(|e| e.layers.iter_mut())) {
        l.spec.activation.theta = f32::INFINITY;
    }
    let max = |v: &[f32], cur: f32| v.iter().cloned().fold(cur, f32::max);
    let mut theta = Theta {
        backbone: vec![f32::NEG_INFINITY; open.backbone.len()],
        exits: open.exits.iter().map(|e| vec![f32::NEG_INFINITY; e.layers.len()]).collect(),
    };
    for i in 0..data.len() {
        let bt = open.trace_backbone(data.input(i));
        for (k, pre) in bt.pre.iter().enumerate() {
            theta.backbone[k] = max(pre, theta.backbone[k]);
        }
        for e in 0..open.exits.len() {
            let ht = open.trace_exit(e, &bt);
            for (k, pre) in ht.pre.iter().enumerate() {
                theta.exits[e][k] = max(pre, theta.exits[e][k]);
            }
        }
    }
    Ok(theta)
}

pub fn apply_theta(model: &mut Model, theta: &Theta) {
    for (l, &t) in model.backbone.iter_mut().zip(&theta.backbone) {
        l.spec.activation.theta = t.max(0.0);
    }
    for (e, ts) in model.exits.iter_mut().zip(&theta.exits) {
        for (l, &t) in e.layers.iter_mut().zip(ts) {
            l.spec.activation.theta = t.max(0.0);
        }
    }
}

/// Task metric (percent) of raw outputs.
pub fn score_outputs(task: TaskKind, classes: usize, outs: &[Vec<f32>], data: &Dataset) -> f64 {
    let preds = outs.iter().map(|o| Prediction::from_output(task, classes, o)).collect();
    score(task, classes, preds, data)
}

/// Float backbone metric.
pub fn evaluate_float(model: &Model, data: &Dataset) -> f64 {
    let outs: Vec<Vec<f32>> = (0..data.len()).map(|i| model.predict(data.input(i))).collect();
    score_outputs(model.task, model.classes, &outs, data)
}

/// Float metric of exit head `e` alone.
pub fn evaluate_float_exit(model: &Model, e: usize, data: &Dataset) -> f64 {
    let outs: Vec<Vec<f32>> = (0..data.len())
        .map(|i| {
            let bt = model.trace_backbone(data.input(i));
            model.trace_exit(e, &bt).output().to_vec()
        })
        .collect();
    score_outputs(model.task, model.classes, &outs, data)
}
