use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const LEAKY_SLOPE: f64 = 0.2;
pub const INIT_STD: f64 = 0.02;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProfileKind {
    Synthetic,
    Real,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Norm {
    None,
    Batch,
    Instance,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum EncoderProfile {
    /// Stride-2 convolutions, each halving the resolution. Every layer but
    /// the last is a skip tap.
    Strided {
        widths: Vec<usize>,
        kernel: usize,
        norm: Norm,
    },
    /// VGG-style stages of 3x3 convs separated by 2x2 max pooling.
    /// `taps` are `(stage, conv)` pairs, 1-based as in `conv2_2`.
    Vgg {
        stages: Vec<(usize, usize)>,
        taps: Vec<(usize, usize)>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum DecoderProfile {
    /// Transposed convs mirroring a strided encoder, each followed by the
    /// same-resolution encoder tap, then a 3x3 conv to the output channels.
    Mirror {
        widths: Vec<usize>,
        kernel: usize,
        norm: Norm,
    },
    /// Blocks of (conv 3x3, leaky ReLU, nearest 2x upsample), then a tail of
    /// dilated 3x3 convs with instance norm, then a 1x1 output conv.
    Dilated {
        block_widths: Vec<usize>,
        tail_width: usize,
        dilations: Vec<usize>,
    },
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorProfile {
    pub n_branches: usize,
    pub widths: Vec<usize>,
    pub kernel: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutputHead {
    Sigmoid,
    Identity,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkProfile {
    pub kind: ProfileKind,
    pub channels: usize,
    pub encoder: EncoderProfile,
    pub decoder: DecoderProfile,
    pub discriminator: DiscriminatorProfile,
    pub head: OutputHead,
}

impl NetworkProfile {
    pub fn synthetic() -> Self {
        NetworkProfile {
            kind: ProfileKind::Synthetic,
            channels: 3,
            encoder: EncoderProfile::Strided {
                widths: vec![16, 32, 64, 128, 256],
                kernel: 4,
                norm: Norm::Batch,
            },
            decoder: DecoderProfile::Mirror {
                widths: vec![128, 64, 32, 16, 16],
                kernel: 4,
                norm: Norm::Batch,
            },
            discriminator: DiscriminatorProfile {
                n_branches: 1,
                widths: vec![32, 64, 128, 32],
                kernel: 4,
            },
            head: OutputHead::Sigmoid,
        }
    }

    pub fn real() -> Self {
        NetworkProfile {
            kind: ProfileKind::Real,
            channels: 3,
            encoder: EncoderProfile::Vgg {
                stages: vec![(2, 64), (2, 128), (4, 256), (4, 512), (4, 512)],
                taps: vec![(1, 2), (2, 2), (3, 2)],
            },
            decoder: DecoderProfile::Dilated {
                block_widths: vec![256, 128, 64, 64],
                tail_width: 64,
                dilations: vec![2, 4, 8, 16, 32, 1],
            },
            discriminator: DiscriminatorProfile {
                n_branches: 3,
                widths: vec![32, 64, 128, 32],
                kernel: 4,
            },
            head: OutputHead::Identity,
        }
    }

    /// Same topology as [`NetworkProfile::synthetic`] with tiny widths.
    pub fn synthetic_mini() -> Self {
        NetworkProfile {
            encoder: EncoderProfile::Strided {
                widths: vec![2, 3, 4],
                kernel: 4,
                norm: Norm::Batch,
            },
            decoder: DecoderProfile::Mirror {
                widths: vec![3, 2, 2],
                kernel: 4,
                norm: Norm::Batch,
            },
            discriminator: DiscriminatorProfile {
                n_branches: 1,
                widths: vec![2, 3],
                kernel: 4,
            },
            ..NetworkProfile::synthetic()
        }
    }

    /// Same topology as [`NetworkProfile::real`] with tiny widths.
    pub fn real_mini() -> Self {
        NetworkProfile {
            encoder: EncoderProfile::Vgg {
                stages: vec![(2, 2), (2, 2), (2, 3), (1, 3), (1, 3)],
                taps: vec![(1, 2), (2, 2), (3, 2)],
            },
            decoder: DecoderProfile::Dilated {
                block_widths: vec![3, 2, 2, 2],
                tail_width: 2,
                dilations: vec![2, 4, 8, 16, 32, 1],
            },
            discriminator: DiscriminatorProfile {
                n_branches: 3,
                widths: vec![2, 2],
                kernel: 4,
            },
            ..NetworkProfile::real()
        }
    }

    pub fn with_head(mut self, head: OutputHead) -> Self {
        self.head = head;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.channels == 0 {
            return bad("profile needs at least one channel".into());
        }
        match (&self.encoder, &self.decoder) {
            (
                EncoderProfile::Strided { widths, kernel, .. },
                DecoderProfile::Mirror {
                    widths: dw,
                    kernel: dk,
                    ..
                },
            ) => {
                if widths.is_empty() || widths.contains(&0) {
                    return bad("strided encoder needs non-zero widths".into());
                }
                if dw.len() != widths.len() || dw.contains(&0) {
                    return bad(format!(
                        "mirror decoder needs {} non-zero widths, got {:?}",
                        widths.len(),
                        dw
                    ));
                }
                if *kernel != 4 || *dk != 4 {
                    return bad("strided encoder and mirror decoder use 4x4 kernels".into());
                }
            }
            (EncoderProfile::Vgg { stages, taps }, DecoderProfile::Dilated { block_widths, tail_width, dilations }) => {
                if stages.len() < 2 || stages.iter().any(|&(n, w)| n == 0 || w == 0) {
                    return bad("vgg encoder needs at least two non-empty stages".into());
                }
                for &(s, c) in taps {
                    if s == 0 || s > stages.len() || c == 0 || c > stages[s - 1].0 {
                        return bad(format!("tap conv{s}_{c} is not in the encoder"));
                    }
                }
                if block_widths.len() != stages.len() - 1 {
                    return bad(format!(
                        "dilated decoder needs {} blocks to undo the pooling, got {}",
                        stages.len() - 1,
                        block_widths.len()
                    ));
                }
                if block_widths.contains(&0) || *tail_width == 0 || dilations.contains(&0) {
                    return bad("dilated decoder widths and dilations must be positive".into());
                }
            }
            _ => return bad("encoder and decoder profiles do not pair".into()),
        }
        let d = &self.discriminator;
        if d.n_branches == 0 || d.widths.is_empty() || d.widths.contains(&0) || d.kernel != 4 {
            return bad("discriminator needs branches, widths and 4x4 kernels".into());
        }
        Ok(())
    }

    /// Smallest input side length and the factor every side must divide by.
    pub fn size_requirement(&self) -> usize {
        let enc = match &self.encoder {
            EncoderProfile::Strided { widths, .. } => 1 << widths.len(),
            EncoderProfile::Vgg { stages, .. } => 1 << (stages.len() - 1),
        };
        let disc = 1 << (self.discriminator.n_branches - 1 + self.discriminator.widths.len());
        enc.max(disc)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.size_requirement();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "input {h}x{w} must be a positive multiple of {m} for this profile"
            )));
        }
        Ok(())
    }
}
