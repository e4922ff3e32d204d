//! Float model: layer algebra, forward/backward passes, and architecture specs.

use super::activation::{ActivationKind, ActivationSpec};
use super::{NnError, Shape, TaskKind};
use crate::rng::{rng_from_seed, Rng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Layer shapes. Parameters are stored weights first, then bias
/// (for batch norm: per-channel scale, then shift).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum LayerKind {
    Dense { inputs: usize, outputs: usize },
    /// Square kernel, zero padding `kernel / 2`.
    Conv { in_channels: usize, out_channels: usize, kernel: usize, stride: usize },
    /// Inference-form batch norm: a per-channel affine map.
    BatchNorm { channels: usize },
    /// Average pooling; `window == 0` pools globally.
    Pool { window: usize, stride: usize },
}

impl LayerKind {
    pub fn code(&self) -> u8 {
        match self {
            LayerKind::Dense { .. } => 1,
            LayerKind::Conv { .. } => 2,
            LayerKind::BatchNorm { .. } => 3,
            LayerKind::Pool { .. } => 4,
        }
    }

    pub fn dims(&self) -> [u32; 4] {
        let d = match *self {
            LayerKind::Dense { inputs, outputs } => [outputs, inputs, 0, 0],
            LayerKind::Conv { in_channels, out_channels, kernel, stride } => [out_channels, in_channels, kernel, stride],
            LayerKind::BatchNorm { channels } => [channels, 0, 0, 0],
            LayerKind::Pool { window, stride } => [window, stride, 0, 0],
        };
        d.map(|v| v as u32)
    }

    pub fn from_code(code: u8, d: [u32; 4]) -> Option<Self> {
        let d = d.map(|v| v as usize);
        Some(match code {
            1 if d[2] == 0 && d[3] == 0 => LayerKind::Dense { inputs: d[1], outputs: d[0] },
            2 => LayerKind::Conv { in_channels: d[1], out_channels: d[0], kernel: d[2], stride: d[3] },
            3 if d[1..] == [0, 0, 0] => LayerKind::BatchNorm { channels: d[0] },
            4 if d[2] == 0 && d[3] == 0 => LayerKind::Pool { window: d[0], stride: d[1] },
            _ => return None,
        })
    }

    /// Saturates, so damaged dims read from an image can't overflow.
    pub fn weight_count(&self) -> usize {
        match *self {
            LayerKind::Dense { inputs, outputs } => inputs.saturating_mul(outputs),
            LayerKind::Conv { in_channels, out_channels, kernel, .. } => {
                out_channels.saturating_mul(in_channels).saturating_mul(kernel).saturating_mul(kernel)
            }
            LayerKind::BatchNorm { channels } => channels,
            LayerKind::Pool { .. } => 0,
        }
    }

    /// Dense and conv biases, kept in f32 by the engine.
    pub fn bias_count(&self) -> usize {
        match *self {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv { out_channels, .. } => out_channels,
            _ => 0,
        }
    }

    /// Bytes of the engine blob: INT8 codes then f32 biases.
    pub fn blob_len(&self) -> usize {
        self.param_count().saturating_add(3usize.saturating_mul(self.bias_count()))
    }

    pub fn param_count(&self) -> usize {
        self.weight_count().saturating_add(match *self {
            LayerKind::Dense { outputs, .. } => outputs,
            LayerKind::Conv { out_channels, .. } => out_channels,
            LayerKind::BatchNorm { channels } => channels,
            LayerKind::Pool { .. } => 0,
        })
    }

    /// Multiply-accumulates per forward pass.
    pub fn macs(&self, input: Shape) -> usize {
        match self.output_shape(input) {
            Ok(out) => match *self {
                LayerKind::Dense { inputs, outputs } => inputs * outputs,
                LayerKind::Conv { in_channels, kernel, .. } => out.0 * out.1 * out.2 * in_channels * kernel * kernel,
                _ => out.0 * out.1 * out.2,
            },
            Err(_) => 0,
        }
    }

    pub fn output_shape(&self, (c, h, w): Shape) -> Result<Shape, String> {
        match *self {
            LayerKind::Dense { inputs, outputs } => {
                if c.saturating_mul(h).saturating_mul(w) != inputs || outputs == 0 {
                    return Err(format!("dense expects {inputs} inputs, got {c}x{h}x{w}"));
                }
                Ok((outputs, 1, 1))
            }
            LayerKind::Conv { in_channels, out_channels, kernel, stride } => {
                if c != in_channels || kernel == 0 || kernel % 2 == 0 || stride == 0 || out_channels == 0 {
                    return Err(format!(
                        "conv {in_channels}->{out_channels} k{kernel} s{stride} cannot take {c} channels"
                    ));
                }
                if h == 0 || w == 0 {
                    return Err(format!("conv cannot take an empty {h}x{w} map"));
                }
                // Odd kernel, padding kernel / 2: h + 2p - k == h - 1.
                Ok((out_channels, (h - 1) / stride + 1, (w - 1) / stride + 1))
            }
            LayerKind::BatchNorm { channels } => {
                if channels != c {
                    return Err(format!("batch norm over {channels} channels cannot take {c}"));
                }
                Ok((c, h, w))
            }
            LayerKind::Pool { window: 0, stride: 0 } => Ok((c, 1, 1)),
            LayerKind::Pool { window, stride } => {
                if window == 0 || stride == 0 || window > h || window > w {
                    return Err(format!("pool w{window} s{stride} cannot take {h}x{w}"));
                }
                Ok((c, (h - window) / stride + 1, (w - window) / stride + 1))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    #[serde(flatten)]
    pub kind: LayerKind,
    pub activation: ActivationSpec,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, activation: ActivationSpec) -> Self {
        LayerSpec { kind, activation }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitSpec {
    /// Hidden layer (1-based) whose output feeds the head.
    pub attach: usize,
    pub layers: Vec<LayerSpec>,
}

/// Structural description of a model (the JSON model config).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub task: TaskKind,
    pub classes: usize,
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
    #[serde(default)]
    pub internal_exits: Vec<ExitSpec>,
}

fn conv(i: usize, o: usize, k: usize, s: usize, act: ActivationSpec) -> LayerSpec {
    LayerSpec::new(LayerKind::Conv { in_channels: i, out_channels: o, kernel: k, stride: s }, act)
}

fn dense(i: usize, o: usize, act: ActivationSpec) -> LayerSpec {
    LayerSpec::new(LayerKind::Dense { inputs: i, outputs: o }, act)
}

fn gap() -> LayerSpec {
    LayerSpec::new(LayerKind::Pool { window: 0, stride: 0 }, ActivationSpec::IDENTITY)
}

impl ModelSpec {
    /// The 12x12 shape classifier: four convolutions, global pooling and a
    /// two-layer dense classifier.
    pub fn toy_classifier() -> Self {
        let r = ActivationSpec::RELU;
        ModelSpec {
            task: TaskKind::Classification,
            classes: 4,
            input: [1, 12, 12],
            layers: vec![
                conv(1, 8, 3, 1, r),
                conv(8, 16, 3, 2, r),
                conv(16, 16, 3, 1, r),
                conv(16, 32, 3, 2, r),
                gap(),
                dense(32, 16, r),
                dense(16, 4, ActivationSpec::IDENTITY),
            ],
            internal_exits: Vec::new(),
        }
    }

    /// 16x16 scenes on a 4x4 grid, three object classes.
    pub fn toy_detector() -> Self {
        let r = ActivationSpec::RELU;
        ModelSpec {
            task: TaskKind::Detection,
            classes: 3,
            input: [1, 16, 16],
            layers: vec![
                conv(1, 8, 3, 1, r),
                conv(8, 16, 3, 2, r),
                conv(16, 16, 3, 1, r),
                conv(16, 24, 3, 2, r),
                conv(24, 4, 1, 1, ActivationSpec::IDENTITY),
            ],
            internal_exits: Vec::new(),
        }
    }

    pub fn input_shape(&self) -> Shape {
        (self.input[0], self.input[1], self.input[2])
    }

    /// Number of hidden layers N (all but the output layer).
    pub fn hidden(&self) -> usize {
        self.layers.len().saturating_sub(1)
    }

    /// Input shape of every backbone layer, plus the final output shape.
    pub fn shapes(&self) -> Result<Vec<Shape>, NnError> {
        chain_shapes(&self.layers, self.input_shape())
    }

    pub fn output_len(&self) -> usize {
        match self.task {
            TaskKind::Classification => self.classes,
            TaskKind::Detection => {
                let s = self.shapes().ok().and_then(|v| v.last().copied()).unwrap_or((0, 0, 0));
                s.0 * s.1 * s.2
            }
        }
    }

    /// Replaces every activation but the output layer's with `kind`.
    pub fn with_hidden_activation(mut self, kind: ActivationKind) -> Self {
        let n = self.layers.len();
        for (i, l) in self.layers.iter_mut().enumerate() {
            if i + 1 < n && l.activation.kind != ActivationKind::Identity {
                l.activation = ActivationSpec::new(kind, f32::INFINITY);
            }
        }
        for e in &mut self.internal_exits {
            for l in &mut e.layers {
                if l.activation.kind != ActivationKind::Identity {
                    l.activation = ActivationSpec::new(kind, f32::INFINITY);
                }
            }
        }
        self
    }

    /// Adds a standard exit head at each hidden layer in `attach`.
    ///
    /// Classifier heads: 1x1 conv, batch norm + activation, global pooling,
    /// dense. Detector heads pool down to the output grid instead and end in
    /// a 1x1 conv producing the same channels as the output layer.
    pub fn with_exits(mut self, attach: &[usize], width: usize, act: ActivationKind) -> Result<Self, NnError> {
        let shapes = self.shapes()?;
        let out = *shapes.last().ok_or(NnError::Empty("model"))?;
        let a = ActivationSpec::new(act, f32::INFINITY);
        for &l in attach {
            if l == 0 || l > self.hidden() {
                return Err(NnError::Invalid(format!("exit attach index {l} outside 1..={}", self.hidden())));
            }
            let (c, h, w) = shapes[l];
            let mut layers = vec![
                conv(c, width, 1, 1, ActivationSpec::IDENTITY),
                LayerSpec::new(LayerKind::BatchNorm { channels: width }, a),
            ];
            match self.task {
                TaskKind::Classification => {
                    layers.push(gap());
                    layers.push(dense(width, self.classes, ActivationSpec::IDENTITY));
                }
                TaskKind::Detection => {
                    if h % out.1 != 0 || w % out.2 != 0 {
                        return Err(NnError::Shape(format!("{h}x{w} feature map does not tile a {}x{} grid", out.1, out.2)));
                    }
                    if h != out.1 {
                        let win = h / out.1;
                        layers.push(LayerSpec::new(LayerKind::Pool { window: win, stride: win }, ActivationSpec::IDENTITY));
                    }
                    layers.push(conv(width, out.0, 1, 1, ActivationSpec::IDENTITY));
                }
            }
            self.internal_exits.push(ExitSpec { attach: l, layers });
        }
        self.internal_exits.sort_by_key(|e| e.attach);
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), NnError> {
        if self.layers.is_empty() {
            return Err(NnError::Empty("layer list"));
        }
        let shapes = self.shapes()?;
        let out = *shapes.last().unwrap();
        match self.task {
            TaskKind::Classification if out != (self.classes, 1, 1) => {
                return Err(NnError::Shape(format!("classifier output {out:?} vs {} classes", self.classes)))
            }
            TaskKind::Detection if out.0 != self.classes + 1 => {
                return Err(NnError::Shape(format!("detector output has {} channels, want {}", out.0, self.classes + 1)))
            }
            _ => {}
        }
        let mut prev = 0;
        for e in &self.internal_exits {
            if e.attach <= prev || e.attach > self.hidden() {
                return Err(NnError::Invalid(format!(
                    "exit attach indices must increase strictly within 1..={}",
                    self.hidden()
                )));
            }
            prev = e.attach;
            let head = chain_shapes(&e.layers, shapes[e.attach])?;
            if *head.last().unwrap() != out {
                return Err(NnError::Shape(format!("exit at {} produces {:?}, want {out:?}", e.attach, head.last())));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().chain(self.internal_exits.iter().flat_map(|e| e.layers.iter())).map(|l| l.kind.param_count()).sum()
    }

    pub fn backbone_macs(&self) -> usize {
        let shapes = self.shapes().unwrap_or_default();
        self.layers.iter().zip(&shapes).map(|(l, s)| l.kind.macs(*s)).sum()
    }
}

pub fn chain_shapes(layers: &[LayerSpec], input: Shape) -> Result<Vec<Shape>, NnError> {
    let mut shapes = vec![input];
    for (i, l) in layers.iter().enumerate() {
        let next = l.kind.output_shape(*shapes.last().unwrap()).map_err(|e| NnError::Shape(format!("layer {i}: {e}")))?;
        shapes.push(next);
    }
    Ok(shapes)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub spec: LayerSpec,
    pub params: Vec<f32>,
}

impl Layer {
    pub fn init(spec: LayerSpec, rng: &mut Rng) -> Self {
        let mut params = vec![0.0; spec.kind.param_count()];
        let fan = match spec.kind {
            LayerKind::Dense { inputs, .. } => inputs,
            LayerKind::Conv { in_channels, kernel, .. } => in_channels * kernel * kernel,
            LayerKind::BatchNorm { channels } => {
                params[..channels].fill(1.0);
                0
            }
            LayerKind::Pool { .. } => 0,
        };
        if fan > 0 {
            let he = Normal::new(0.0, (2.0 / fan as f32).sqrt()).expect("positive std");
            for p in params.iter_mut().take(spec.kind.weight_count()) {
                *p = he.sample(rng);
            }
        }
        Layer { spec, params }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitHead {
    pub attach: usize,
    pub layers: Vec<Layer>,
}

/// Trained (or trainable) float model G, or Ĝ once exits are attached.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub task: TaskKind,
    pub classes: usize,
    pub input: Shape,
    pub backbone: Vec<Layer>,
    pub exits: Vec<ExitHead>,
}

impl Model {
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<Self, NnError> {
        spec.validate()?;
        let mut rng = rng_from_seed(seed);
        let backbone = spec.layers.iter().map(|l| Layer::init(*l, &mut rng)).collect();
        let exits = spec
            .internal_exits
            .iter()
            .map(|e| ExitHead { attach: e.attach, layers: e.layers.iter().map(|l| Layer::init(*l, &mut rng)).collect() })
            .collect();
        Ok(Model { task: spec.task, classes: spec.classes, input: spec.input_shape(), backbone, exits })
    }

    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            task: self.task,
            classes: self.classes,
            input: [self.input.0, self.input.1, self.input.2],
            layers: self.backbone.iter().map(|l| l.spec).collect(),
            internal_exits: self
                .exits
                .iter()
                .map(|e| ExitSpec { attach: e.attach, layers: e.layers.iter().map(|l| l.spec).collect() })
                .collect(),
        }
    }

    /// Replaces the exit heads with freshly initialized ones from `spec`,
    /// keeping backbone weights. `spec` must share the backbone topology.
    pub fn attach_exits(&mut self, spec: &ModelSpec, seed: u64) -> Result<(), NnError> {
        spec.validate()?;
        let mine: Vec<LayerKind> = self.backbone.iter().map(|l| l.spec.kind).collect();
        let theirs: Vec<LayerKind> = spec.layers.iter().map(|l| l.kind).collect();
        if mine != theirs {
            return Err(NnError::Invalid("exit spec backbone differs from the model".into()));
        }
        let mut rng = rng_from_seed(seed);
        self.exits = spec
            .internal_exits
            .iter()
            .map(|e| ExitHead { attach: e.attach, layers: e.layers.iter().map(|l| Layer::init(*l, &mut rng)).collect() })
            .collect();
        Ok(())
    }

    pub fn set_hidden_activation(&mut self, kind: ActivationKind) {
        let n = self.backbone.len();
        for (i, l) in self.backbone.iter_mut().enumerate() {
            if i + 1 < n && l.spec.activation.kind != ActivationKind::Identity {
                l.spec.activation.kind = kind;
            }
        }
        for e in &mut self.exits {
            for l in &mut e.layers {
                if l.spec.activation.kind != ActivationKind::Identity {
                    l.spec.activation.kind = kind;
                }
            }
        }
    }

    pub fn backbone_shapes(&self) -> Vec<Shape> {
        chain_shapes(&self.backbone.iter().map(|l| l.spec).collect::<Vec<_>>(), self.input).expect("validated model")
    }

    /// Float forward of the backbone, keeping every intermediate.
    pub fn trace_backbone(&self, x: &[f32]) -> Trace {
        trace(&self.backbone, x, self.input)
    }

    pub fn trace_exit(&self, exit: usize, backbone: &Trace) -> Trace {
        let e = &self.exits[exit];
        trace(&e.layers, &backbone.inputs[e.attach], backbone.shapes[e.attach])
    }

    /// Backbone output only.
    pub fn predict(&self, x: &[f32]) -> Vec<f32> {
        self.trace_backbone(x).output().to_vec()
    }
}

/// Intermediates of one forward pass through a layer sequence.
/// `inputs[i]` is the input of layer `i`; `inputs[n]` is the final output.
#[derive(Debug, Clone)]
pub struct Trace {
    pub inputs: Vec<Vec<f32>>,
    pub pre: Vec<Vec<f32>>,
    pub shapes: Vec<Shape>,
}

impl Trace {
    pub fn output(&self) -> &[f32] {
        self.inputs.last().expect("non-empty trace")
    }
}

pub fn trace(layers: &[Layer], x: &[f32], shape: Shape) -> Trace {
    let mut t = Trace { inputs: vec![x.to_vec()], pre: Vec::with_capacity(layers.len()), shapes: vec![shape] };
    for l in layers {
        let s = *t.shapes.last().unwrap();
        let (pre, out_shape) = layer_forward(&l.spec.kind, &l.params, t.inputs.last().unwrap(), s);
        let act = l.spec.activation;
        let post = pre.iter().map(|&v| act.apply(v)).collect();
        t.pre.push(pre);
        t.inputs.push(post);
        t.shapes.push(out_shape);
    }
    t
}

/// Pre-activation output of one layer.
pub fn layer_forward(kind: &LayerKind, params: &[f32], x: &[f32], (c, h, w): Shape) -> (Vec<f32>, Shape) {
    let out_shape = kind.output_shape((c, h, w)).expect("validated shapes");
    let (oc, oh, ow) = out_shape;
    let mut out = vec![0.0f32; oc * oh * ow];
    match *kind {
        LayerKind::Dense { inputs, outputs } => {
            let (wts, bias) = params.split_at(inputs * outputs);
            for o in 0..outputs {
                let row = &wts[o * inputs..(o + 1) * inputs];
                out[o] = bias[o] + row.iter().zip(x).map(|(a, b)| a * b).sum::<f32>();
            }
        }
        LayerKind::Conv { in_channels, out_channels, kernel: k, stride: s } => {
            let (wts, bias) = params.split_at(out_channels * in_channels * k * k);
            let p = k / 2;
            for o in 0..oc {
                let plane = &mut out[o * oh * ow..(o + 1) * oh * ow];
                plane.fill(bias[o]);
                for i in 0..in_channels {
                    let xin = &x[i * h * w..(i + 1) * h * w];
                    for ky in 0..k {
                        for kx in 0..k {
                            let wv = wts[((o * in_channels + i) * k + ky) * k + kx];
                            for oy in 0..oh {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = &xin[iy as usize * w..(iy as usize + 1) * w];
                                for ox in 0..ow {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if ix >= 0 && ix < w as isize {
                                        plane[oy * ow + ox] += wv * row[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        LayerKind::BatchNorm { channels } => {
            for ch in 0..channels {
                let (g, b) = (params[ch], params[channels + ch]);
                for j in 0..h * w {
                    out[ch * h * w + j] = g * x[ch * h * w + j] + b;
                }
            }
        }
        LayerKind::Pool { window, stride } => pool_forward(x, (c, h, w), window, stride, &mut out, (oh, ow)),
    }
    (out, out_shape)
}

fn pool_forward(x: &[f32], (c, h, w): Shape, window: usize, stride: usize, out: &mut [f32], (oh, ow): (usize, usize)) {
    if window == 0 {
        for ch in 0..c {
            out[ch] = x[ch * h * w..(ch + 1) * h * w].iter().sum::<f32>() / (h * w) as f32;
        }
        return;
    }
    let norm = 1.0 / (window * window) as f32;
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0;
                for ky in 0..window {
                    for kx in 0..window {
                        acc += x[ch * h * w + (oy * stride + ky) * w + ox * stride + kx];
                    }
                }
                out[ch * oh * ow + oy * ow + ox] = acc * norm;
            }
        }
    }
}

/// Backpropagates `grad_out` (w.r.t. the sequence's final output) through
/// `layers`, accumulating parameter gradients into `grads`. Returns the
/// gradient w.r.t. the sequence input when `want_input` is set.
pub fn backward(layers: &[Layer], t: &Trace, grad_out: &[f32], grads: &mut [Vec<f32>], want_input: bool) -> Option<Vec<f32>> {
    let mut g = grad_out.to_vec();
    for i in (0..layers.len()).rev() {
        let l = &layers[i];
        let act = l.spec.activation;
        for (gv, &pv) in g.iter_mut().zip(&t.pre[i]) {
            *gv *= act.grad(pv);
        }
        let need = want_input || i > 0;
        g = layer_backward(&l.spec.kind, &l.params, &t.inputs[i], t.shapes[i], t.shapes[i + 1], &g, &mut grads[i], need);
    }
    want_input.then_some(g)
}

#[allow(clippy::too_many_arguments)]
fn layer_backward(
    kind: &LayerKind,
    params: &[f32],
    x: &[f32],
    (c, h, w): Shape,
    (oc, oh, ow): Shape,
    g: &[f32],
    gp: &mut [f32],
    need_input: bool,
) -> Vec<f32> {
    let mut gx = if need_input { vec![0.0f32; c * h * w] } else { Vec::new() };
    match *kind {
        LayerKind::Dense { inputs, outputs } => {
            let (gw, gb) = gp.split_at_mut(inputs * outputs);
            for o in 0..outputs {
                let go = g[o];
                if go == 0.0 {
                    continue;
                }
                gb[o] += go;
                let row = &mut gw[o * inputs..(o + 1) * inputs];
                for (r, xv) in row.iter_mut().zip(x) {
                    *r += go * xv;
                }
                if need_input {
                    let wrow = &params[o * inputs..(o + 1) * inputs];
                    for (gxv, wv) in gx.iter_mut().zip(wrow) {
                        *gxv += go * wv;
                    }
                }
            }
        }
        LayerKind::Conv { in_channels, out_channels, kernel: k, stride: s } => {
            let nw = out_channels * in_channels * k * k;
            let (gw, gb) = gp.split_at_mut(nw);
            let p = k / 2;
            for o in 0..oc {
                let gplane = &g[o * oh * ow..(o + 1) * oh * ow];
                gb[o] += gplane.iter().sum::<f32>();
                for i in 0..in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let widx = ((o * in_channels + i) * k + ky) * k + kx;
                            let wv = params[widx];
                            let mut acc = 0.0;
                            for oy in 0..oh {
                                let iy = (oy * s + ky) as isize - p as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let base = i * h * w + iy as usize * w;
                                for ox in 0..ow {
                                    let ix = (ox * s + kx) as isize - p as isize;
                                    if ix >= 0 && ix < w as isize {
                                        let gv = gplane[oy * ow + ox];
                                        acc += gv * x[base + ix as usize];
                                        if need_input {
                                            gx[base + ix as usize] += gv * wv;
                                        }
                                    }
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
        }
        LayerKind::BatchNorm { channels } => {
            for ch in 0..channels {
                let plane = ch * h * w..(ch + 1) * h * w;
                let gamma = params[ch];
                let mut gg = 0.0;
                let mut gbeta = 0.0;
                for j in plane {
                    gg += g[j] * x[j];
                    gbeta += g[j];
                    if need_input {
                        gx[j] = g[j] * gamma;
                    }
                }
                gp[ch] += gg;
                gp[channels + ch] += gbeta;
            }
        }
        LayerKind::Pool { window, stride } => {
            if need_input {
                if window == 0 {
                    let n = (h * w) as f32;
                    for ch in 0..c {
                        for j in 0..h * w {
                            gx[ch * h * w + j] = g[ch] / n;
                        }
                    }
                } else {
                    let norm = 1.0 / (window * window) as f32;
                    for ch in 0..c {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[ch * oh * ow + oy * ow + ox] * norm;
                                for ky in 0..window {
                                    for kx in 0..window {
                                        gx[ch * h * w + (oy * stride + ky) * w + ox * stride + kx] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_specs_validate() {
        ModelSpec::toy_classifier().validate().unwrap();
        ModelSpec::toy_detector().validate().unwrap();
        let s = ModelSpec::toy_classifier().with_exits(&[2, 3], 8, ActivationKind::LogClip).unwrap();
        assert_eq!(s.internal_exits.len(), 2);
        let d = ModelSpec::toy_detector().with_exits(&[2], 8, ActivationKind::LogClip).unwrap();
        assert_eq!(d.internal_exits[0].layers.len(), 4);
    }

    #[test]
    fn bad_exit_attach_rejected() {
        assert!(ModelSpec::toy_classifier().with_exits(&[0], 8, ActivationKind::Relu).is_err());
        assert!(ModelSpec::toy_classifier().with_exits(&[7], 8, ActivationKind::Relu).is_err());
    }

    #[test]
    fn codes_roundtrip() {
        for l in ModelSpec::toy_classifier().layers {
            assert_eq!(LayerKind::from_code(l.kind.code(), l.kind.dims()), Some(l.kind));
        }
    }

    fn numeric_grad_check(spec: LayerSpec, shape: Shape) {
        let mut rng = rng_from_seed(3);
        let mut layer = Layer::init(spec, &mut rng);
        for (i, p) in layer.params.iter_mut().enumerate() {
            *p += 0.01 * (i as f32).sin();
        }
        let n = shape.0 * shape.1 * shape.2;
        let x: Vec<f32> = (0..n).map(|i| ((i * 7) as f32).cos()).collect();
        let layers = vec![layer.clone()];
        let t = trace(&layers, &x, shape);
        let gout: Vec<f32> = (0..t.output().len()).map(|i| 1.0 + i as f32 * 0.1).collect();
        let mut grads = vec![vec![0.0; layer.params.len()]];
        let gx = backward(&layers, &t, &gout, &mut grads, true).unwrap();
        let loss = |ls: &[Layer], xi: &[f32]| -> f32 {
            trace(ls, xi, shape).output().iter().zip(&gout).map(|(a, b)| a * b).sum()
        };
        let eps = 1e-2;
        for pi in (0..layer.params.len()).step_by(3) {
            let mut lp = layers.clone();
            lp[0].params[pi] += eps;
            let mut lm = layers.clone();
            lm[0].params[pi] -= eps;
            let num = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * eps);
            assert!((num - grads[0][pi]).abs() < 2e-2 * (1.0 + num.abs()), "param {pi}: {num} vs {}", grads[0][pi]);
        }
        for xi in (0..n).step_by(5) {
            let mut xp = x.clone();
            xp[xi] += eps;
            let mut xm = x.clone();
            xm[xi] -= eps;
            let num = (loss(&layers, &xp) - loss(&layers, &xm)) / (2.0 * eps);
            assert!((num - gx[xi]).abs() < 2e-2 * (1.0 + num.abs()), "input {xi}: {num} vs {}", gx[xi]);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        let id = ActivationSpec::IDENTITY;
        numeric_grad_check(LayerSpec::new(LayerKind::Conv { in_channels: 2, out_channels: 3, kernel: 3, stride: 2 }, id), (2, 5, 5));
        numeric_grad_check(LayerSpec::new(LayerKind::Dense { inputs: 12, outputs: 4 }, id), (3, 2, 2));
        numeric_grad_check(LayerSpec::new(LayerKind::BatchNorm { channels: 2 }, id), (2, 3, 3));
        numeric_grad_check(LayerSpec::new(LayerKind::Pool { window: 2, stride: 2 }, id), (2, 4, 4));
        numeric_grad_check(LayerSpec::new(LayerKind::Pool { window: 0, stride: 0 }, id), (2, 3, 3));
    }
}
