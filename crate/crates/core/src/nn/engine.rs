//! The serialized INT8 engine image and the inference engine that runs it.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |---|---|
//! | 32 | header: `"RDNT"`, version u16, layer count u16, task u8, exit count u8, classes u16, input c/h/w u16×3, backbone layer count u16, 12 reserved |
//! | 8 × exits | exit table: attach u16, first record u16, record count u16, reserved u16 |
//! | 48 × layers | layer records: kind u8, dims u32×4, activation u8, θ f32, scale f32, zero point i32, blob offset u64, blob length u64, 2 reserved |
//! | … | parameter blobs in record order, back to back: INT8 codes, then dense/conv biases as f32 |
//!
//! Records list the backbone first, then each exit head in table order.
//! Reserved bytes are written as zero and ignored when parsing.

use super::activation::{ActivationKind, ActivationSpec};
use super::exit::{ExitPolicy, Prediction};
use super::model::{chain_shapes, ExitSpec, LayerKind, LayerSpec, Model, ModelSpec};
use super::quant::{quantize_tensor, QuantParams};
use super::{NnError, Shape, TaskKind};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: [u8; 4] = *b"RDNT";
pub const VERSION: u16 = 1;
pub const HEADER_LEN: usize = 32;
pub const EXIT_ENTRY_LEN: usize = 8;
pub const RECORD_LEN: usize = 48;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("image truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("bad magic")]
    BadMagic,
    #[error("unsupported version {0}")]
    BadVersion(u16),
    #[error("bad header field: {0}")]
    Header(String),
    #[error("bad exit table: {0}")]
    ExitTable(String),
    #[error("bad layer record {index}: {reason}")]
    Record { index: usize, reason: String },
    #[error("model structure invalid: {0}")]
    Structure(String),
}

/// A component of the image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Region {
    Header,
    ExitTable,
    /// Layer record `r` (record order: backbone, then exit heads).
    Record(usize),
    /// Parameter blob of record `r`.
    Params(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayoutEntry {
    pub region: Region,
    pub start: usize,
    pub len: usize,
}

/// Byte ranges of every image component, sorted and covering every byte.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct LayoutIndex {
    pub entries: Vec<LayoutEntry>,
}

impl LayoutIndex {
    pub fn region_at(&self, offset: usize) -> Option<&LayoutEntry> {
        let i = self.entries.partition_point(|e| e.start <= offset);
        let e = self.entries.get(i.checked_sub(1)?)?;
        (offset < e.start + e.len).then_some(e)
    }

    /// `[start, end)` of the parameter blob section.
    pub fn params_range(&self) -> (usize, usize) {
        let mut it = self.entries.iter().filter(|e| matches!(e.region, Region::Params(_)));
        match it.next() {
            None => (0, 0),
            Some(first) => {
                let end = self.entries.iter().map(|e| e.start + e.len).max().unwrap_or(first.start);
                (first.start, end)
            }
        }
    }

    pub fn params_of(&self, record: usize) -> Option<(usize, usize)> {
        self.entries
            .iter()
            .find(|e| e.region == Region::Params(record))
            .map(|e| (e.start, e.start + e.len))
    }

    pub fn total_len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.start + e.len)
    }
}

/// Which layer a record describes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerRef {
    Backbone(usize),
    Exit { exit: usize, layer: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct QLayer {
    pub kind: LayerKind,
    pub act: ActivationSpec,
    pub qp: QuantParams,
    /// INT8 codes: weights, or scale then shift for batch norm.
    pub weights: Vec<i8>,
    /// Dense and conv biases, added after the integer accumulation.
    pub bias: Vec<f32>,
}

impl QLayer {
    pub fn spec(&self) -> LayerSpec {
        LayerSpec::new(self.kind, self.act)
    }

    /// Float parameters in model order (weights, then biases).
    pub fn dequantized(&self) -> Vec<f32> {
        let w = self.weights.iter().map(|&q| self.qp.dequantize(i32::from(q)));
        w.chain(self.bias.iter().copied()).collect()
    }

    pub fn blob_len(&self) -> usize {
        self.weights.len() + 4 * self.bias.len()
    }

    pub fn write_blob(&self, b: &mut Vec<u8>) {
        b.extend(self.weights.iter().map(|&q| q as u8));
        for v in &self.bias {
            b.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Re-reads the parameter holding byte `j` of `blob`.
    pub fn reload_byte(&mut self, blob: &[u8], j: usize) {
        let nw = self.weights.len();
        if j < nw {
            self.weights[j] = blob[j] as i8;
        } else {
            let k = (j - nw) / 4;
            let o = nw + 4 * k;
            self.bias[k] = f32::from_le_bytes(blob[o..o + 4].try_into().unwrap());
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QExit {
    pub attach: usize,
    pub layers: Vec<QLayer>,
}

/// A quantized model, as read from (or about to be written to) an image.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineModel {
    pub task: TaskKind,
    pub classes: usize,
    pub input: Shape,
    pub backbone: Vec<QLayer>,
    pub exits: Vec<QExit>,
    shapes: Vec<Shape>,
}

/// Outcome of one inference.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardResult {
    pub prediction: Prediction,
    /// Raw output of the head that answered.
    pub output: Vec<f32>,
    /// Hidden-layer index of the exit that fired, or `N + 1` for the final layer.
    pub exit_index: usize,
    /// Backbone layers plus exit-head layers evaluated.
    pub layers_executed: usize,
}

/// Per-layer clip bounds: backbone, then one vector per exit head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theta {
    pub backbone: Vec<f32>,
    pub exits: Vec<Vec<f32>>,
}

impl Theta {
    /// Elementwise maximum.
    pub fn merge(&mut self, other: &Theta) {
        for (a, b) in self.backbone.iter_mut().zip(&other.backbone) {
            *a = a.max(*b);
        }
        for (ea, eb) in self.exits.iter_mut().zip(&other.exits) {
            for (a, b) in ea.iter_mut().zip(eb) {
                *a = a.max(*b);
            }
        }
    }
}

/// Post-training per-tensor INT8 quantization of every layer.
pub fn quantize(model: &Model) -> EngineModel {
    let q = |l: &super::model::Layer| {
        let nb = l.spec.kind.bias_count();
        let (w, b) = l.params.split_at(l.params.len() - nb);
        let (qp, weights) = quantize_tensor(w);
        QLayer { kind: l.spec.kind, act: l.spec.activation, qp, weights, bias: b.to_vec() }
    };
    let mut m = EngineModel {
        task: model.task,
        classes: model.classes,
        input: model.input,
        backbone: model.backbone.iter().map(q).collect(),
        exits: model.exits.iter().map(|e| QExit { attach: e.attach, layers: e.layers.iter().map(q).collect() }).collect(),
        shapes: Vec::new(),
    };
    m.shapes = m.compute_shapes().expect("float model was validated");
    m
}

fn put_u16(b: &mut Vec<u8>, v: usize) {
    b.extend_from_slice(&(v as u16).to_le_bytes());
}

fn u16_at(b: &[u8], o: usize) -> usize {
    usize::from(u16::from_le_bytes([b[o], b[o + 1]]))
}

fn u32_at(b: &[u8], o: usize) -> u32 {
    u32::from_le_bytes(b[o..o + 4].try_into().unwrap())
}

fn u64_at(b: &[u8], o: usize) -> u64 {
    u64::from_le_bytes(b[o..o + 8].try_into().unwrap())
}

impl EngineModel {
    pub fn spec(&self) -> ModelSpec {
        ModelSpec {
            task: self.task,
            classes: self.classes,
            input: [self.input.0, self.input.1, self.input.2],
            layers: self.backbone.iter().map(QLayer::spec).collect(),
            internal_exits: self
                .exits
                .iter()
                .map(|e| ExitSpec { attach: e.attach, layers: e.layers.iter().map(QLayer::spec).collect() })
                .collect(),
        }
    }

    fn compute_shapes(&self) -> Result<Vec<Shape>, NnError> {
        let spec = self.spec();
        spec.validate()?;
        spec.shapes()
    }

    /// Input shape of every backbone layer and the output shape.
    pub fn shapes(&self) -> &[Shape] {
        &self.shapes
    }

    /// Record order: backbone layers, then exit heads.
    pub fn records(&self) -> Vec<LayerRef> {
        let mut v: Vec<LayerRef> = (0..self.backbone.len()).map(LayerRef::Backbone).collect();
        for (e, x) in self.exits.iter().enumerate() {
            v.extend((0..x.layers.len()).map(|layer| LayerRef::Exit { exit: e, layer }));
        }
        v
    }

    pub fn layer(&self, r: LayerRef) -> &QLayer {
        match r {
            LayerRef::Backbone(i) => &self.backbone[i],
            LayerRef::Exit { exit, layer } => &self.exits[exit].layers[layer],
        }
    }

    pub fn layer_mut(&mut self, r: LayerRef) -> &mut QLayer {
        match r {
            LayerRef::Backbone(i) => &mut self.backbone[i],
            LayerRef::Exit { exit, layer } => &mut self.exits[exit].layers[layer],
        }
    }

    /// Earliest backbone layer whose recomputation covers a change to `r`.
    pub fn resume_point(&self, r: LayerRef) -> usize {
        match r {
            LayerRef::Backbone(i) => i,
            LayerRef::Exit { exit, .. } => self.exits[exit].attach - 1,
        }
    }

    /// `N`, the number of hidden layers.
    pub fn hidden(&self) -> usize {
        self.backbone.len() - 1
    }

    pub fn serialize(&self) -> EngineImage {
        let records = self.records();
        let n_exit = self.exits.len();
        let mut b = Vec::new();
        b.extend_from_slice(&MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        put_u16(&mut b, records.len());
        b.push(match self.task {
            TaskKind::Classification => 0,
            TaskKind::Detection => 1,
        });
        b.push(n_exit as u8);
        put_u16(&mut b, self.classes);
        put_u16(&mut b, self.input.0);
        put_u16(&mut b, self.input.1);
        put_u16(&mut b, self.input.2);
        put_u16(&mut b, self.backbone.len());
        b.resize(HEADER_LEN, 0);

        let mut entries = vec![LayoutEntry { region: Region::Header, start: 0, len: HEADER_LEN }];
        if n_exit > 0 {
            entries.push(LayoutEntry { region: Region::ExitTable, start: HEADER_LEN, len: n_exit * EXIT_ENTRY_LEN });
        }
        let mut first = self.backbone.len();
        for e in &self.exits {
            put_u16(&mut b, e.attach);
            put_u16(&mut b, first);
            put_u16(&mut b, e.layers.len());
            put_u16(&mut b, 0);
            first += e.layers.len();
        }
        let rec_start = b.len();
        let mut offset = rec_start + records.len() * RECORD_LEN;
        for (ri, &r) in records.iter().enumerate() {
            let l = self.layer(r);
            entries.push(LayoutEntry { region: Region::Record(ri), start: b.len(), len: RECORD_LEN });
            b.push(l.kind.code());
            for d in l.kind.dims() {
                b.extend_from_slice(&d.to_le_bytes());
            }
            b.push(l.act.kind.code());
            b.extend_from_slice(&l.act.theta.to_le_bytes());
            b.extend_from_slice(&l.qp.scale.to_le_bytes());
            b.extend_from_slice(&l.qp.zero_point.to_le_bytes());
            b.extend_from_slice(&(offset as u64).to_le_bytes());
            b.extend_from_slice(&(l.blob_len() as u64).to_le_bytes());
            b.extend_from_slice(&[0, 0]);
            offset += l.blob_len();
        }
        for (ri, &r) in records.iter().enumerate() {
            let l = self.layer(r);
            if l.blob_len() > 0 {
                entries.push(LayoutEntry { region: Region::Params(ri), start: b.len(), len: l.blob_len() });
            }
            l.write_blob(&mut b);
        }
        EngineImage { bytes: b, layout: LayoutIndex { entries } }
    }

    /// Parses an image. Structural damage is an error; parameter bytes and
    /// numeric record fields (θ, scale, zero point) are taken verbatim.
    pub fn deserialize(b: &[u8]) -> Result<EngineModel, ParseError> {
        let need = |n: usize| if b.len() < n { Err(ParseError::Truncated { need: n, have: b.len() }) } else { Ok(()) };
        need(HEADER_LEN)?;
        if b[0..4] != MAGIC {
            return Err(ParseError::BadMagic);
        }
        let version = u16_at(b, 4) as u16;
        if version != VERSION {
            return Err(ParseError::BadVersion(version));
        }
        let n_layers = u16_at(b, 6);
        let task = match b[8] {
            0 => TaskKind::Classification,
            1 => TaskKind::Detection,
            t => return Err(ParseError::Header(format!("task code {t}"))),
        };
        let n_exit = usize::from(b[9]);
        let classes = u16_at(b, 10);
        let input = (u16_at(b, 12), u16_at(b, 14), u16_at(b, 16));
        let n_backbone = u16_at(b, 18);
        if n_backbone == 0 || n_backbone > n_layers {
            return Err(ParseError::Header(format!("{n_backbone} backbone layers of {n_layers}")));
        }
        let rec_start = HEADER_LEN + n_exit * EXIT_ENTRY_LEN;
        need(rec_start + n_layers * RECORD_LEN)?;

        let mut exit_ranges = Vec::with_capacity(n_exit);
        let mut next = n_backbone;
        for e in 0..n_exit {
            let o = HEADER_LEN + e * EXIT_ENTRY_LEN;
            let (attach, first, count) = (u16_at(b, o), u16_at(b, o + 2), u16_at(b, o + 4));
            if first != next || count == 0 {
                return Err(ParseError::ExitTable(format!("exit {e} records {first}+{count}, expected start {next}")));
            }
            next += count;
            exit_ranges.push((attach, first, count));
        }
        if next != n_layers {
            return Err(ParseError::ExitTable(format!("records cover {next} of {n_layers} layers")));
        }

        let mut offset = rec_start + n_layers * RECORD_LEN;
        let mut layers = Vec::with_capacity(n_layers);
        for ri in 0..n_layers {
            let o = rec_start + ri * RECORD_LEN;
            let bad = |reason: String| ParseError::Record { index: ri, reason };
            let dims = [u32_at(b, o + 1), u32_at(b, o + 5), u32_at(b, o + 9), u32_at(b, o + 13)];
            let kind = LayerKind::from_code(b[o], dims).ok_or_else(|| bad(format!("kind {} dims {dims:?}", b[o])))?;
            let act_kind = ActivationKind::from_code(b[o + 17]).ok_or_else(|| bad(format!("activation {}", b[o + 17])))?;
            let theta = f32::from_le_bytes(b[o + 18..o + 22].try_into().unwrap());
            let scale = f32::from_le_bytes(b[o + 22..o + 26].try_into().unwrap());
            let zero_point = i32::from_le_bytes(b[o + 26..o + 30].try_into().unwrap());
            let (blob, len) = (u64_at(b, o + 30), u64_at(b, o + 38));
            let want = kind.blob_len() as u64;
            if blob != offset as u64 || len != want {
                return Err(bad(format!("blob at {blob}+{len}, expected {offset}+{want}")));
            }
            need(offset.checked_add(want as usize).ok_or_else(|| bad(format!("blob length {want}")))?)?;
            let nq = kind.param_count() - kind.bias_count();
            let weights = b[offset..offset + nq].iter().map(|&v| v as i8).collect();
            let bias = b[offset + nq..offset + want as usize]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += want as usize;
            let (act, qp) = (ActivationSpec::new(act_kind, theta), QuantParams { scale, zero_point });
            layers.push(QLayer { kind, act, qp, weights, bias });
        }
        if offset != b.len() {
            return Err(ParseError::Truncated { need: offset, have: b.len() });
        }
        let mut rest = layers.split_off(n_backbone).into_iter();
        let exits = exit_ranges
            .into_iter()
            .map(|(attach, _, count)| QExit { attach, layers: rest.by_ref().take(count).collect() })
            .collect();
        let mut m = EngineModel { task, classes, input, backbone: layers, exits, shapes: Vec::new() };
        m.shapes = m.compute_shapes().map_err(|e| ParseError::Structure(e.to_string()))?;
        Ok(m)
    }

    /// Pre-activation output of one quantized layer.
    ///
    /// Dense and conv layers quantize their input per tensor to unsigned
    /// 8 bits and accumulate in `i32`; batch norm and pooling run on the
    /// dequantized values.
    pub fn layer_pre(l: &QLayer, x: &[f32], shape: Shape) -> (Vec<f32>, Shape) {
        let (c, h, w) = shape;
        let out_shape = l.kind.output_shape(shape).expect("validated shapes");
        let (oc, oh, ow) = out_shape;
        let sw = l.qp.scale;
        let zw = l.qp.zero_point;
        match l.kind {
            LayerKind::Dense { inputs, outputs } => {
                let qa = QuantParams::for_activations(x);
                let a: Vec<i32> = x.iter().map(|&v| i32::from(qa.quantize_u8(v)) - qa.zero_point).collect();
                let mut out = vec![0.0; outputs];
                for (o, ov) in out.iter_mut().enumerate() {
                    let row = &l.weights[o * inputs..(o + 1) * inputs];
                    let acc = row
                        .iter()
                        .zip(&a)
                        .fold(0i32, |acc, (&q, &av)| acc.wrapping_add(i32::from(q).wrapping_sub(zw).wrapping_mul(av)));
                    *ov = sw * qa.scale * acc as f32 + l.bias[o];
                }
                (out, out_shape)
            }
            LayerKind::Conv { in_channels, out_channels, kernel: k, stride: s } => {
                let qa = QuantParams::for_activations(x);
                let a: Vec<i32> = x.iter().map(|&v| i32::from(qa.quantize_u8(v)) - qa.zero_point).collect();
                let nw = out_channels * in_channels * k * k;
                let p = k / 2;
                // im2col: one row of centred inputs per output position,
                // zero where the kernel hangs over the border.
                let kk = in_channels * k * k;
                let mut cols = vec![0i32; oh * ow * kk];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let col = &mut cols[(oy * ow + ox) * kk..(oy * ow + ox + 1) * kk];
                        for ky in 0..k {
                            let Some(iy) = (oy * s + ky).checked_sub(p).filter(|&y| y < h) else { continue };
                            for kx in 0..k {
                                let Some(ix) = (ox * s + kx).checked_sub(p).filter(|&x| x < w) else { continue };
                                for i in 0..in_channels {
                                    col[(i * k + ky) * k + kx] = a[(i * h + iy) * w + ix];
                                }
                            }
                        }
                    }
                }
                // i32 accumulators wrap as on hardware; a flipped zero point
                // can push them out of range.
                let wc: Vec<i32> = l.weights[..nw].iter().map(|&q| i32::from(q).wrapping_sub(zw)).collect();
                let mut out = vec![0.0; oc * oh * ow];
                for o in 0..oc {
                    let wrow = &wc[o * kk..(o + 1) * kk];
                    let (bias, ss) = (l.bias[o], sw * qa.scale);
                    let dst = &mut out[o * oh * ow..(o + 1) * oh * ow];
                    for (pos, d) in dst.iter_mut().enumerate() {
                        let acc = wrow
                            .iter()
                            .zip(&cols[pos * kk..(pos + 1) * kk])
                            .fold(0i32, |acc, (x, y)| acc.wrapping_add(x.wrapping_mul(*y)));
                        *d = ss * acc as f32 + bias;
                    }
                }
                (out, out_shape)
            }
            LayerKind::BatchNorm { .. } | LayerKind::Pool { .. } => {
                let deq = l.dequantized();
                super::model::layer_forward(&l.kind, &deq, x, (c, h, w))
            }
        }
    }

    fn run_layer(l: &QLayer, x: &[f32], shape: Shape) -> (Vec<f32>, Shape) {
        let (mut v, s) = Self::layer_pre(l, x, shape);
        for e in v.iter_mut() {
            *e = l.act.apply(*e);
        }
        (v, s)
    }

    fn run_head(&self, e: usize, x: &[f32]) -> Vec<f32> {
        let head = &self.exits[e];
        let mut shape = self.shapes[head.attach];
        let mut cur = x.to_vec();
        for l in &head.layers {
            let (next, s) = Self::run_layer(l, &cur, shape);
            cur = next;
            shape = s;
        }
        cur
    }

    /// Post-activation output of every backbone layer; `[0]` is the input.
    pub fn trace(&self, x: &[f32]) -> Vec<Vec<f32>> {
        let mut acts = Vec::with_capacity(self.backbone.len() + 1);
        acts.push(x.to_vec());
        for (i, l) in self.backbone.iter().enumerate() {
            let (next, _) = Self::run_layer(l, &acts[i], self.shapes[i]);
            acts.push(next);
        }
        acts
    }

    /// Backbone-only forward (no exit heads).
    pub fn forward_backbone(&self, x: &[f32]) -> Vec<f32> {
        self.trace(x).pop().expect("non-empty")
    }

    pub fn forward(&self, x: &[f32], policy: &ExitPolicy) -> ForwardResult {
        self.forward_from(x, 0, policy)
    }

    /// Runs from backbone layer `start`, whose input is `x`. Exit heads
    /// attached at or before `start` are skipped.
    pub fn forward_from(&self, x: &[f32], start: usize, policy: &ExitPolicy) -> ForwardResult {
        let n = self.backbone.len();
        let mut cur = x.to_vec();
        for i in start..n {
            let (next, _) = Self::run_layer(&self.backbone[i], &cur, self.shapes[i]);
            cur = next;
            let depth = i + 1;
            if !policy.enabled || depth == n {
                continue;
            }
            if let Some(e) = self.exits.iter().position(|e| e.attach == depth) {
                let out = self.run_head(e, &cur);
                let prediction = Prediction::from_output(self.task, self.classes, &out);
                if prediction.should_exit(policy) {
                    return ForwardResult {
                        prediction,
                        output: out,
                        exit_index: depth,
                        layers_executed: self.executed(depth, policy),
                    };
                }
            }
        }
        ForwardResult {
            prediction: Prediction::from_output(self.task, self.classes, &cur),
            output: cur,
            exit_index: n,
            layers_executed: self.executed(n, policy),
        }
    }

    fn executed(&self, depth: usize, policy: &ExitPolicy) -> usize {
        let heads: usize = if policy.enabled {
            self.exits.iter().filter(|e| e.attach <= depth && e.attach < self.backbone.len()).map(|e| e.layers.len()).sum()
        } else {
            0
        };
        depth + heads
    }

    /// Output of exit head `e` for input `x` (runs the backbone up to it).
    pub fn exit_output(&self, e: usize, x: &[f32]) -> Vec<f32> {
        let acts = self.trace(x);
        self.run_head(e, &acts[self.exits[e].attach])
    }

    /// Largest pre-activation value of every layer over `inputs`, computed
    /// with all clip bounds lifted.
    pub fn calibrate_theta<'a>(&self, inputs: impl IntoIterator<Item = &'a [f32]>) -> Result<Theta, NnError> {
        let mut open = self.clone();
        open.set_theta(f32::INFINITY);
        let mut theta = Theta {
            backbone: vec![f32::NEG_INFINITY; self.backbone.len()],
            exits: self.exits.iter().map(|e| vec![f32::NEG_INFINITY; e.layers.len()]).collect(),
        };
        let mut seen = 0;
        for x in inputs {
            seen += 1;
            let mut cur = x.to_vec();
            let mut acts = vec![cur.clone()];
            for (i, l) in open.backbone.iter().enumerate() {
                let (pre, _) = Self::layer_pre(l, &cur, open.shapes[i]);
                theta.backbone[i] = pre.iter().cloned().fold(theta.backbone[i], f32::max);
                cur = pre.iter().map(|&v| l.act.apply(v)).collect();
                acts.push(cur.clone());
            }
            for (e, head) in open.exits.iter().enumerate() {
                let mut h = acts[head.attach].clone();
                let mut shape = open.shapes[head.attach];
                for (j, l) in head.layers.iter().enumerate() {
                    let (pre, s) = Self::layer_pre(l, &h, shape);
                    theta.exits[e][j] = pre.iter().cloned().fold(theta.exits[e][j], f32::max);
                    h = pre.iter().map(|&v| l.act.apply(v)).collect();
                    shape = s;
                }
            }
        }
        if seen == 0 {
            return Err(NnError::Empty("calibration set"));
        }
        Ok(theta)
    }

    pub fn set_theta(&mut self, t: f32) {
        for l in self.backbone.iter_mut().chain(self.exits.iter_mut().flat_map(|e| e.layers.iter_mut())) {
            l.act.theta = t;
        }
    }

    /// Installs calibrated bounds on layers that use a clipped activation.
    pub fn apply_theta(&mut self, theta: &Theta) {
        for (l, &t) in self.backbone.iter_mut().zip(&theta.backbone) {
            if l.act.kind != ActivationKind::Identity {
                l.act.theta = t.max(0.0);
            }
        }
        for (e, ts) in self.exits.iter_mut().zip(&theta.exits) {
            for (l, &t) in e.layers.iter_mut().zip(ts) {
                if l.act.kind != ActivationKind::Identity {
                    l.act.theta = t.max(0.0);
                }
            }
        }
    }

    pub fn set_hidden_activation(&mut self, kind: ActivationKind) {
        for l in self.backbone.iter_mut().chain(self.exits.iter_mut().flat_map(|e| e.layers.iter_mut())) {
            if l.act.kind != ActivationKind::Identity {
                l.act.kind = kind;
            }
        }
    }

    pub fn without_exits(&self) -> EngineModel {
        EngineModel { exits: Vec::new(), ..self.clone() }
    }
}

/// Serialized engine plus its byte layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EngineImage {
    pub bytes: Vec<u8>,
    pub layout: LayoutIndex,
}

impl EngineImage {
    /// Parses `bytes` and rebuilds the layout index.
    pub fn from_bytes(bytes: Vec<u8>) -> Result<(EngineImage, EngineModel), ParseError> {
        let model = EngineModel::deserialize(&bytes)?;
        let layout = model.serialize().layout;
        Ok((EngineImage { bytes, layout }, model))
    }

    pub fn parse(&self) -> Result<EngineModel, ParseError> {
        EngineModel::deserialize(&self.bytes)
    }

    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// Parameter payload bytes (the default injection area).
    pub fn params_range(&self) -> (usize, usize) {
        self.layout.params_range()
    }
}

/// Shapes of a layer chain, re-exported for head construction.
pub fn head_shapes(layers: &[LayerSpec], input: Shape) -> Result<Vec<Shape>, NnError> {
    chain_shapes(layers, input)
}
