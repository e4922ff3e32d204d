//! Activation functions.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ActivationKind {
    Identity,
    Relu,
    Clip,
    LogClip,
}

impl ActivationKind {
    pub fn code(self) -> u8 {
        match self {
            ActivationKind::Identity => 0,
            ActivationKind::Relu => 1,
            ActivationKind::Clip => 2,
            ActivationKind::LogClip => 3,
        }
    }

    pub fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ActivationKind::Identity,
            1 => ActivationKind::Relu,
            2 => ActivationKind::Clip,
            3 => ActivationKind::LogClip,
            _ => return None,
        })
    }

    /// Uses a clip bound.
    pub fn clipped(self) -> bool {
        matches!(self, ActivationKind::Clip | ActivationKind::LogClip)
    }
}

/// An activation and its clip bound θ (ignored by identity and ReLU).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ActivationSpec {
    pub kind: ActivationKind,
    pub theta: f32,
}

impl ActivationSpec {
    pub const IDENTITY: ActivationSpec = ActivationSpec { kind: ActivationKind::Identity, theta: 0.0 };
    pub const RELU: ActivationSpec = ActivationSpec { kind: ActivationKind::Relu, theta: 0.0 };

    pub fn new(kind: ActivationKind, theta: f32) -> Self {
        ActivationSpec { kind, theta }
    }

    pub fn apply(&self, x: f32) -> f32 {
        match self.kind {
            ActivationKind::Identity => x,
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Clip => relu_clip(x, self.theta),
            ActivationKind::LogClip => logclip(x, self.theta),
        }
    }

    /// Derivative with respect to the pre-activation.
    pub fn grad(&self, x: f32) -> f32 {
        match self.kind {
            ActivationKind::Identity => 1.0,
            ActivationKind::Relu => f32::from(x > 0.0),
            ActivationKind::Clip => f32::from(x > 0.0 && x < self.theta),
            ActivationKind::LogClip => {
                if x > 0.0 && x <= self.theta {
                    1.0 / (x + 1.0)
                } else {
                    0.0
                }
            }
        }
    }
}

/// `ln(x + 1)` on `(0, θ]`, zero elsewhere. NaN maps to zero.
///
/// ```
/// use radflip::nn::logclip;
/// assert_eq!(logclip(-3.0, 5.0), 0.0);
/// assert!((logclip(std::f32::consts::E - 1.0, 5.0) - 1.0).abs() < 1e-6);
/// assert_eq!(logclip(6.0, 5.0), 0.0);
/// ```
pub fn logclip(x: f32, theta: f32) -> f32 {
    if x > 0.0 && x <= theta {
        x.ln_1p()
    } else {
        0.0
    }
}

/// `min(max(x, 0), θ)`. NaN maps to zero.
pub fn relu_clip(x: f32, theta: f32) -> f32 {
    if x > 0.0 {
        x.min(theta)
    } else {
        0.0
    }
}
