//! Bundled 1-D architectures.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::init::init_model;
use super::layer::{BatchNorm1d, Conv1d, Dense, PrimitiveLayer};
use super::model::{ModelGraph, Skip, Unit, INPUT_CHANNELS};
use crate::error::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Preset {
    /// 4 plain units, 8-16-16-32 channels, two stride-2 units.
    #[serde(rename = "vgg1d-4")]
    Vgg4,
    /// 8 plain units, 16 channels throughout, stride 1.
    #[serde(rename = "vgg1d-8")]
    Vgg8,
    /// Plain stem unit plus 5 residual units (16, 16, 32↓, 32, 32).
    #[serde(rename = "resnet1d-6")]
    Resnet6,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Vgg4, Preset::Vgg8, Preset::Resnet6];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Vgg4 => "vgg1d-4",
            Preset::Vgg8 => "vgg1d-8",
            Preset::Resnet6 => "resnet1d-6",
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig {
                key: "architecture".into(),
                message: format!(
                    "unknown architecture {s:?} (expected one of {})",
                    Preset::ALL.map(Preset::name).join(", ")
                ),
            })
    }
}

fn conv(in_ch: usize, out_ch: usize, stride: usize) -> PrimitiveLayer {
    PrimitiveLayer::Conv1d(Conv1d::new(in_ch, out_ch, 3, stride, 1, false))
}

fn bn(ch: usize) -> PrimitiveLayer {
    PrimitiveLayer::BatchNorm1d(BatchNorm1d::new(ch))
}

/// conv(k=3, pad 1, no bias) + BatchNorm + ReLU
pub fn plain_unit(id: usize, in_ch: usize, out_ch: usize, stride: usize) -> Unit {
    Unit {
        id,
        body: vec![conv(in_ch, out_ch, stride), bn(out_ch), PrimitiveLayer::Relu],
        skip: Skip::None,
        post_relu: false,
    }
}

/// Basic residual block; projects the shortcut with a biased 1×1 conv when
/// the shape changes.
pub fn residual_unit(id: usize, in_ch: usize, out_ch: usize, stride: usize) -> Unit {
    let skip = if in_ch == out_ch && stride == 1 {
        Skip::Identity
    } else {
        Skip::Projection(PrimitiveLayer::Conv1d(Conv1d::new(in_ch, out_ch, 1, stride, 0, true)))
    };
    Unit {
        id,
        body: vec![
            conv(in_ch, out_ch, stride),
            bn(out_ch),
            PrimitiveLayer::Relu,
            conv(out_ch, out_ch, 1),
            bn(out_ch),
        ],
        skip,
        post_relu: true,
    }
}

fn head(channels: usize, num_classes: usize) -> Vec<PrimitiveLayer> {
    vec![
        PrimitiveLayer::GlobalAvgPool1d,
        PrimitiveLayer::Dense(Dense::new(channels, num_classes, true)),
    ]
}

/// Architecture with zeroed weights.
pub fn architecture(preset: Preset, num_classes: usize) -> ModelGraph {
    let (units, last) = match preset {
        Preset::Vgg4 => (
            vec![
                plain_unit(0, INPUT_CHANNELS, 8, 1),
                plain_unit(1, 8, 16, 2),
                plain_unit(2, 16, 16, 1),
                plain_unit(3, 16, 32, 2),
            ],
            32,
        ),
        Preset::Vgg8 => (
            std::iter::once(plain_unit(0, INPUT_CHANNELS, 16, 1))
                .chain((1..8).map(|i| plain_unit(i, 16, 16, 1)))
                .collect(),
            16,
        ),
        Preset::Resnet6 => (
            vec![
                plain_unit(0, INPUT_CHANNELS, 16, 1),
                residual_unit(1, 16, 16, 1),
                residual_unit(2, 16, 16, 1),
                residual_unit(3, 16, 32, 2),
                residual_unit(4, 32, 32, 1),
                residual_unit(5, 32, 32, 1),
            ],
            32,
        ),
    };
    ModelGraph {
        units,
        head: head(last, num_classes),
        num_classes,
    }
}

/// Kaiming-initialised instance of `preset`.
pub fn build<R: Rng + ?Sized>(preset: Preset, num_classes: usize, rng: &mut R) -> ModelGraph {
    let mut model = architecture(preset, num_classes);
    init_model(&mut model, rng);
    model
}
