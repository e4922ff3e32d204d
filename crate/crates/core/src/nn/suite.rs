//! The three engines compared in campaigns.
//!
//! * `clean`: ReLU backbone, no exits.
//! * `clip`: the same weights with every ReLU clipped at its calibrated bound.
//! * `protected`: a LogClip backbone trained from the same seed, with exit
//!   heads fine-tuned on the frozen backbone and bounds recalibrated after
//!   quantization.

use super::data::{grid_detection, shapes_classification, Dataset};
use super::engine::{quantize, EngineModel};
use super::exit::ExitPolicy;
use super::metrics::{evaluate, Evaluation};
use super::model::{Model, ModelSpec};
use super::train::{
    apply_theta, calibrate_theta, evaluate_float, evaluate_float_exit, finetune_exits, train_backbone, TrainConfig,
    TrainReport,
};
use super::{ActivationKind, NnError, TaskKind};
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Clean,
    Clip,
    Protected,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Clean, Variant::Clip, Variant::Protected];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Clean => "clean",
            Variant::Clip => "clip",
            Variant::Protected => "protected",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = NnError;

    fn from_str(s: &str) -> Result<Self, NnError> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| NnError::Invalid(format!("unknown variant {s:?}")))
    }
}

/// Everything needed to rebuild the suite bit for bit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuiteConfig {
    pub task: TaskKind,
    pub data_seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    /// Leading training samples used for bound calibration.
    pub calib_samples: usize,
    pub model_seed: u64,
    pub train: TrainConfig,
    pub exit_train: TrainConfig,
    /// Hidden layers (1-based) that get an exit head.
    pub exit_attach: Vec<usize>,
    pub exit_width: usize,
    pub policy: ExitPolicy,
}

impl SuiteConfig {
    pub fn classification() -> Self {
        SuiteConfig {
            task: TaskKind::Classification,
            data_seed: 11,
            train_samples: 2000,
            test_samples: 400,
            calib_samples: 500,
            model_seed: 5,
            train: TrainConfig { epochs: 12, batch_size: 32, learning_rate: 3e-3, seed: 7 },
            exit_train: TrainConfig { epochs: 10, batch_size: 32, learning_rate: 5e-3, seed: 8 },
            exit_attach: vec![2, 3],
            exit_width: 8,
            policy: ExitPolicy::at(0.9),
        }
    }

    pub fn detection() -> Self {
        SuiteConfig {
            task: TaskKind::Detection,
            data_seed: 12,
            train_samples: 1500,
            test_samples: 200,
            calib_samples: 300,
            model_seed: 6,
            train: TrainConfig { epochs: 15, batch_size: 32, learning_rate: 3e-3, seed: 9 },
            exit_train: TrainConfig { epochs: 10, batch_size: 32, learning_rate: 5e-3, seed: 10 },
            exit_attach: vec![2],
            exit_width: 8,
            policy: ExitPolicy { enabled: true, threshold: 0.9, presence: 0.5 },
        }
    }

    pub fn for_task(task: TaskKind) -> Self {
        match task {
            TaskKind::Classification => Self::classification(),
            TaskKind::Detection => Self::detection(),
        }
    }

    pub fn base_spec(&self) -> ModelSpec {
        match self.task {
            TaskKind::Classification => ModelSpec::toy_classifier(),
            TaskKind::Detection => ModelSpec::toy_detector(),
        }
    }

    /// Train and test sets, generated from disjoint seeds.
    pub fn datasets(&self) -> (Dataset, Dataset) {
        let gen = match self.task {
            TaskKind::Classification => shapes_classification,
            TaskKind::Detection => grid_detection,
        };
        (gen(self.train_samples, self.data_seed), gen(self.test_samples, self.data_seed ^ 0x7e57))
    }
}

/// Training record kept next to the engine images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config: SuiteConfig,
    pub relu_training: TrainReport,
    pub logclip_training: TrainReport,
    pub exit_training: TrainReport,
    pub float_relu: f64,
    pub float_logclip: f64,
    /// Float metric of each exit head on its own.
    pub float_exits: Vec<f64>,
    pub clean: Evaluation,
    pub clip: Evaluation,
    pub protected: Evaluation,
    pub image_bytes: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct Suite {
    pub config: SuiteConfig,
    pub clean: EngineModel,
    pub clip: EngineModel,
    pub protected: EngineModel,
    pub provenance: Provenance,
}

impl Suite {
    pub fn engine(&self, v: Variant) -> &EngineModel {
        match v {
            Variant::Clean => &self.clean,
            Variant::Clip => &self.clip,
            Variant::Protected => &self.protected,
        }
    }

    /// Exits only run on the protected engine.
    pub fn policy(&self, v: Variant) -> ExitPolicy {
        match v {
            Variant::Protected => self.config.policy,
            _ => ExitPolicy::DISABLED,
        }
    }
}

fn calibrated(mut q: EngineModel, calib: &Dataset) -> Result<EngineModel, NnError> {
    let theta = q.calibrate_theta((0..calib.len()).map(|i| calib.input(i)))?;
    q.apply_theta(&theta);
    Ok(q)
}

/// Trains and quantizes all three variants.
pub fn build_suite(cfg: &SuiteConfig) -> Result<Suite, NnError> {
    let (train, test) = cfg.datasets();
    build_suite_on(cfg, &train, &test)
}

pub fn build_suite_on(cfg: &SuiteConfig, train: &Dataset, test: &Dataset) -> Result<Suite, NnError> {
    let spec = cfg.base_spec();
    let calib = train.head(cfg.calib_samples);

    let mut relu = Model::init(&spec, cfg.model_seed)?;
    let relu_training = train_backbone(&mut relu, train, &cfg.train)?;
    let clean = quantize(&relu);
    let mut clip = clean.clone();
    clip.set_hidden_activation(ActivationKind::Clip);
    let clip = calibrated(clip, &calib)?;

    let log_spec = spec.with_hidden_activation(ActivationKind::LogClip);
    let mut logclip = Model::init(&log_spec, cfg.model_seed)?;
    let logclip_training = train_backbone(&mut logclip, train, &cfg.train)?;
    let float_logclip = evaluate_float(&logclip, test);
    let theta = calibrate_theta(&logclip, &calib)?;
    apply_theta(&mut logclip, &theta);
    let exit_spec = logclip.spec().with_exits(&cfg.exit_attach, cfg.exit_width, ActivationKind::LogClip)?;
    logclip.attach_exits(&exit_spec, cfg.model_seed.wrapping_add(1))?;
    let exit_training = finetune_exits(&mut logclip, train, &cfg.exit_train)?;
    let float_exits = (0..logclip.exits.len()).map(|e| evaluate_float_exit(&logclip, e, test)).collect();
    let protected = calibrated(quantize(&logclip), &calib)?;

    let provenance = Provenance {
        config: cfg.clone(),
        relu_training,
        logclip_training,
        exit_training,
        float_relu: evaluate_float(&relu, test),
        float_logclip,
        float_exits,
        clean: evaluate(&clean, test, &ExitPolicy::DISABLED),
        clip: evaluate(&clip, test, &ExitPolicy::DISABLED),
        protected: evaluate(&protected, test, &cfg.policy),
        image_bytes: [clean.serialize().len(), clip.serialize().len(), protected.serialize().len()],
    };
    Ok(Suite { config: cfg.clone(), clean, clip, protected, provenance })
}
