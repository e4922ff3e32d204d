//! Procedurally generated toy datasets and their on-disk layout.
//!
//! A dataset directory holds `manifest.json`, `inputs.f32` (little-endian
//! `f32`, samples back to back in CHW order) and `targets.u8` (one byte per
//! sample for classification; one byte per grid cell for detection, `255`
//! meaning "no object").

use super::{NnError, Shape, TaskKind};
use crate::rng::{rng_from_seed, Rng};
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const NO_OBJECT: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub task: TaskKind,
    pub classes: usize,
    pub shape: Shape,
    /// Detection grid side; 0 for classification.
    pub grid: usize,
    pub inputs: Vec<f32>,
    pub targets: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub name: String,
    pub task: TaskKind,
    pub classes: usize,
    pub shape: [usize; 3],
    pub grid: usize,
    pub count: usize,
    pub inputs: String,
    pub targets: String,
}

impl Dataset {
    pub fn input_len(&self) -> usize {
        self.shape.0 * self.shape.1 * self.shape.2
    }

    pub fn target_len(&self) -> usize {
        match self.task {
            TaskKind::Classification => 1,
            TaskKind::Detection => self.grid * self.grid,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len() / self.input_len().max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input(&self, i: usize) -> &[f32] {
        let n = self.input_len();
        &self.inputs[i * n..(i + 1) * n]
    }

    pub fn target(&self, i: usize) -> &[u8] {
        let n = self.target_len();
        &self.targets[i * n..(i + 1) * n]
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        let mut d = Dataset { inputs: Vec::new(), targets: Vec::new(), ..self.clone_meta() };
        for &i in idx {
            d.inputs.extend_from_slice(self.input(i));
            d.targets.extend_from_slice(self.target(i));
        }
        d
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            name: self.name.clone(),
            task: self.task,
            classes: self.classes,
            shape: self.shape,
            grid: self.grid,
            inputs: Vec::new(),
            targets: Vec::new(),
        }
    }

    pub fn head(&self, n: usize) -> Dataset {
        self.subset(&(0..n.min(self.len())).collect::<Vec<_>>())
    }

    /// `n` samples with classes interleaved round-robin (by first-object
    /// class for detection), in dataset order within each class.
    pub fn stratified(&self, n: usize) -> Dataset {
        let key = |i: usize| -> usize {
            match self.task {
                TaskKind::Classification => self.target(i)[0] as usize,
                TaskKind::Detection => {
                    self.target(i).iter().find(|&&t| t != NO_OBJECT).map_or(self.classes, |&t| t as usize)
                }
            }
        };
        let mut buckets: Vec<Vec<usize>> = vec![Vec::new(); self.classes + 1];
        for i in 0..self.len() {
            buckets[key(i)].push(i);
        }
        let mut picked = Vec::with_capacity(n);
        let mut round = 0;
        while picked.len() < n.min(self.len()) {
            for b in &buckets {
                if let Some(&i) = b.get(round) {
                    if picked.len() < n {
                        picked.push(i);
                    }
                }
            }
            round += 1;
        }
        self.subset(&picked)
    }

    pub fn save(&self, dir: &Path) -> Result<(), NnError> {
        std::fs::create_dir_all(dir)?;
        let manifest = DatasetManifest {
            name: self.name.clone(),
            task: self.task,
            classes: self.classes,
            shape: [self.shape.0, self.shape.1, self.shape.2],
            grid: self.grid,
            count: self.len(),
            inputs: "inputs.f32".into(),
            targets: "targets.u8".into(),
        };
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        let bytes: Vec<u8> = self.inputs.iter().flat_map(|v| v.to_le_bytes()).collect();
        std::fs::write(dir.join(&manifest.inputs), bytes)?;
        std::fs::write(dir.join(&manifest.targets), &self.targets)?;
        Ok(())
    }

    /// Loads a dataset directory (or the directory containing a
    /// `manifest.json` path).
    pub fn load(path: &Path) -> Result<Dataset, NnError> {
        let (dir, manifest_path) = if path.is_dir() {
            (path.to_path_buf(), path.join("manifest.json"))
        } else {
            (path.parent().unwrap_or(Path::new(".")).to_path_buf(), path.to_path_buf())
        };
        let m: DatasetManifest = serde_json::from_slice(&std::fs::read(manifest_path)?)?;
        let raw = std::fs::read(dir.join(&m.inputs))?;
        let inputs: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        let targets = std::fs::read(dir.join(&m.targets))?;
        let d = Dataset {
            name: m.name,
            task: m.task,
            classes: m.classes,
            shape: (m.shape[0], m.shape[1], m.shape[2]),
            grid: m.grid,
            inputs,
            targets,
        };
        if d.len() != m.count || d.targets.len() != m.count * d.target_len() || raw.len() != m.count * d.input_len() * 4 {
            return Err(NnError::Shape(format!("dataset files do not hold {} samples", m.count)));
        }
        Ok(d)
    }
}

/// Two Gaussian blobs in the plane, far apart: a linearly separable set.
pub fn linearly_separable(n: usize, seed: u64) -> Dataset {
    let mut rng = rng_from_seed(seed);
    let mut d = Dataset {
        name: "separable".into(),
        task: TaskKind::Classification,
        classes: 2,
        shape: (2, 1, 1),
        grid: 0,
        inputs: Vec::with_capacity(2 * n),
        targets: Vec::with_capacity(n),
    };
    for i in 0..n {
        let label = (i % 2) as u8;
        let c = if label == 0 { -1.0 } else { 1.0 };
        d.inputs.push(c + rng.random_range(-0.6..0.6));
        d.inputs.push(c + rng.random_range(-0.6..0.6));
        d.targets.push(label);
    }
    d
}

fn noise_fill(img: &mut [f32], rng: &mut Rng, amp: f32) {
    for v in img.iter_mut() {
        *v = rng.random_range(0.0..amp);
    }
}

fn put(img: &mut [f32], w: usize, x: usize, y: usize, v: f32) {
    if x < w && y * w + x < img.len() {
        img[y * w + x] = img[y * w + x].max(v);
    }
}

/// 12x12 grey images of one shape each: block, plus, X, ring.
pub fn shapes_classification(n: usize, seed: u64) -> Dataset {
    const S: usize = 12;
    let mut rng = rng_from_seed(seed);
    let mut d = Dataset {
        name: "shapes".into(),
        task: TaskKind::Classification,
        classes: 4,
        shape: (1, S, S),
        grid: 0,
        inputs: Vec::with_capacity(n * S * S),
        targets: Vec::with_capacity(n),
    };
    let mut img = vec![0.0f32; S * S];
    for _ in 0..n {
        let label = rng.random_range(0..4u8);
        noise_fill(&mut img, &mut rng, 0.3);
        let v = rng.random_range(0.55..1.0f32);
        match label {
            0 => {
                let (bw, bh) = (rng.random_range(3..=6), rng.random_range(3..=6));
                let (x0, y0) = (rng.random_range(0..=S - bw), rng.random_range(0..=S - bh));
                for y in y0..y0 + bh {
                    for x in x0..x0 + bw {
                        put(&mut img, S, x, y, v);
                    }
                }
            }
            1 => {
                let a = rng.random_range(2..=4);
                let (cx, cy) = (rng.random_range(a..S - a), rng.random_range(a..S - a));
                for t in 0..=2 * a {
                    put(&mut img, S, cx + t - a, cy, v);
                    put(&mut img, S, cx, cy + t - a, v);
                }
            }
            2 => {
                let a = rng.random_range(2..=4);
                let (cx, cy) = (rng.random_range(a..S - a), rng.random_range(a..S - a));
                for t in 0..=2 * a {
                    put(&mut img, S, cx + t - a, cy + t - a, v);
                    put(&mut img, S, cx + t - a, cy + a - t, v);
                }
            }
            _ => {
                let (bw, bh) = (rng.random_range(5..=9), rng.random_range(5..=9));
                let (x0, y0) = (rng.random_range(0..=S - bw), rng.random_range(0..=S - bh));
                for x in x0..x0 + bw {
                    put(&mut img, S, x, y0, v);
                    put(&mut img, S, x, y0 + bh - 1, v);
                }
                for y in y0..y0 + bh {
                    put(&mut img, S, x0, y, v);
                    put(&mut img, S, x0 + bw - 1, y, v);
                }
            }
        }
        d.inputs.extend_from_slice(&img);
        d.targets.push(label);
    }
    d
}

/// 16x16 scenes on a 4x4 grid; each cell holds at most one 3x3 glyph
/// (block, plus, X) with one pixel of jitter.
pub fn grid_detection(n: usize, seed: u64) -> Dataset {
    const S: usize = 16;
    const G: usize = 4;
    const CELL: usize = S / G;
    let glyphs: [[u8; 9]; 3] = [[1, 1, 1, 1, 1, 1, 1, 1, 1], [0, 1, 0, 1, 1, 1, 0, 1, 0], [1, 0, 1, 0, 1, 0, 1, 0, 1]];
    let mut rng = rng_from_seed(seed);
    let mut d = Dataset {
        name: "grid".into(),
        task: TaskKind::Detection,
        classes: 3,
        shape: (1, S, S),
        grid: G,
        inputs: Vec::with_capacity(n * S * S),
        targets: Vec::with_capacity(n * G * G),
    };
    let mut img = vec![0.0f32; S * S];
    for _ in 0..n {
        noise_fill(&mut img, &mut rng, 0.25);
        for cell in 0..G * G {
            if rng.random::<f32>() >= 0.35 {
                d.targets.push(NO_OBJECT);
                continue;
            }
            let class = rng.random_range(0..3usize);
            let v = rng.random_range(0.55..1.0f32);
            let (jx, jy) = (rng.random_range(0..=CELL - 3), rng.random_range(0..=CELL - 3));
            let (x0, y0) = ((cell % G) * CELL + jx, (cell / G) * CELL + jy);
            for (k, &on) in glyphs[class].iter().enumerate() {
                if on == 1 {
                    put(&mut img, S, x0 + k % 3, y0 + k / 3, v);
                }
            }
            d.targets.push(class as u8);
        }
        d.inputs.extend_from_slice(&img);
    }
    d
}
