//! Named bundles of render, training and compositing settings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::AugmentConfig;
use crate::error::{Error, Result};
use crate::image::CompositeOp;
use crate::nn::ProfileKind;
use crate::synth::RenderConfig;
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// 32x32 synthetic scenes, 200 of them, 500 steps.
    Smoke,
    /// Full synthetic dataset at 128x128.
    Synthetic,
    /// Albedo and shading, log-additive, real-image profile.
    Intrinsic,
    /// Background and reflection, additive, real-image profile.
    Reflection,
}

/// Everything a preset pins down.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub render: RenderConfig,
    pub train: TrainConfig,
    pub composite: CompositeOp,
}

impl Default for Settings {
    fn default() -> Self {
        Preset::Synthetic.settings()
    }
}

impl Preset {
    pub fn settings(self) -> Settings {
        let base = TrainConfig {
            max_steps: 50_000,
            ..TrainConfig::default()
        };
        match self {
            Preset::Smoke => Settings {
                render: RenderConfig {
                    image_size: 32,
                    n_train: 200,
                    n_test: 20,
                    size_range: (6, 16),
                    ..RenderConfig::default()
                },
                train: TrainConfig {
                    max_steps: 500,
                    checkpoint_every: 500,
                    ..TrainConfig::default()
                },
                composite: CompositeOp::AdditiveClipped,
            },
            Preset::Synthetic => Settings {
                render: RenderConfig::default(),
                train: base,
                composite: CompositeOp::AdditiveClipped,
            },
            Preset::Intrinsic | Preset::Reflection => Settings {
                render: RenderConfig::default(),
                train: TrainConfig {
                    profile: ProfileKind::Real,
                    augment: AugmentConfig {
                        enabled: true,
                        ..AugmentConfig::default()
                    },
                    ..base
                },
                composite: if self == Preset::Intrinsic {
                    CompositeOp::LogAdditive
                } else {
                    CompositeOp::AdditiveClipped
                },
            },
        }
    }
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Smoke, Preset::Synthetic, Preset::Intrinsic, Preset::Reflection];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Smoke => "smoke",
            Preset::Synthetic => "synthetic",
            Preset::Intrinsic => "intrinsic",
            Preset::Reflection => "reflection",
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

    fn from_str(s: &str) -> Result<Preset> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset {s:?}; expected smoke, synthetic, intrinsic or reflection")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn smoke_preset_is_small() {
        let s = Preset::Smoke.settings();
        assert_eq!((s.render.image_size, s.render.n_train, s.train.max_steps), (32, 200, 500));
        assert!(s.train.validate().is_ok());
    }

    #[test]
    fn real_presets_differ_in_compositing() {
        assert_eq!(Preset::Intrinsic.settings().composite, CompositeOp::LogAdditive);
        assert_eq!(Preset::Reflection.settings().composite, CompositeOp::AdditiveClipped);
        assert!(Preset::Reflection.settings().train.augment.enabled);
        assert!(!Preset::Synthetic.settings().train.augment.enabled);
    }

    #[test]
    fn names_round_trip() {
        for p in Preset::ALL {
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("fast".parse::<Preset>().is_err());
    }
}
