//! Trajectory-stream and image-stream encoders.
//!
//! Both streams downsample time (or width) by 8 and produce `frames × d`
//! features: a convolutional front end followed by a two-layer
//! bidirectional GRU.

mod bigru;
mod cnn2d;
mod traj;

pub use bigru::BiGru;
pub use cnn2d::ImageCnn;
pub use traj::{frame_positions, trajectory_input, TrajConv};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Scalar, Var};
use crate::data::RenderedImage;
use crate::nn::{ModelError, ParamBuilder, Result};

/// Frames of encoded features inside a graph.
#[derive(Debug, Clone)]
pub struct FeatureSequence {
    /// `[frames, width]`.
    pub values: Var,
    pub frames: usize,
    pub width: usize,
    /// Mean pen position `(x, y)` of each frame's input window, in pixels.
    /// Only trajectory-stream features carry positions.
    pub positions: Option<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Conv1dSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub channels: usize,
    /// (height, width) stride of the first block.
    pub stride: (usize, usize),
    pub blocks: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cnn2dSpec {
    pub stem_channels: usize,
    pub stem_stride: (usize, usize),
    pub stages: Vec<StageSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    /// Feature width of every encoder output.
    pub d: usize,
    pub conv1d: Vec<Conv1dSpec>,
    pub cnn2d: Cnn2dSpec,
    pub gru_layers: usize,
    /// Multiplier applied to pixel coordinates before the 1D convolutions.
    pub coord_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self::with_width(320)
    }
}

impl EncoderConfig {
    /// Default architecture at feature width `d`.
    pub fn with_width(d: usize) -> Self {
        let conv1d = [64, 64, 128, 128, 256, d]
            .iter()
            .zip([1, 2, 1, 2, 1, 2])
            .map(|(&channels, stride)| Conv1dSpec {
                channels,
                kernel: 3,
                stride,
            })
            .collect();
        let stage = |channels, stride| StageSpec {
            channels,
            stride,
            blocks: 1,
        };
        let cnn2d = Cnn2dSpec {
            stem_channels: (d / 4).max(4),
            stem_stride: (2, 1),
            stages: vec![
                stage((d / 4).max(4), (2, 2)),
                stage((d / 2).max(4), (2, 2)),
                stage(d, (2, 2)),
                stage(d, (2, 1)),
            ],
        };
        EncoderConfig {
            d,
            conv1d,
            cnn2d,
            gru_layers: 2,
            coord_scale: 1.0 / 32.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if self.d == 0 || !self.d.is_multiple_of(4) {
            return bad(format!(
                "d must be a positive multiple of 4, got {}",
                self.d
            ));
        }
        if self.conv1d.is_empty() || self.conv1d.last().map(|c| c.channels) != Some(self.d) {
            return bad("last conv1d layer must output d channels".into());
        }
        if self
            .conv1d
            .iter()
            .any(|c| c.kernel % 2 == 0 || c.stride == 0 || c.channels == 0)
        {
            return bad("conv1d layers need odd kernels and positive strides/channels".into());
        }
        let s1: usize = self.conv1d.iter().map(|c| c.stride).product();
        if s1 != 8 {
            return bad(format!("conv1d strides multiply to {s1}, expected 8"));
        }
        let cnn = &self.cnn2d;
        if cnn.stages.last().map(|s| s.channels) != Some(self.d) {
            return bad("last cnn2d stage must output d channels".into());
        }
        if cnn.stages.iter().any(|s| s.blocks == 0 || s.channels == 0) || cnn.stem_channels == 0 {
            return bad("cnn2d stages need at least one block and positive channels".into());
        }
        let (sh, sw) = cnn.stages.iter().fold(cnn.stem_stride, |(h, w), s| {
            (h * s.stride.0, w * s.stride.1)
        });
        if (sh, sw) != (32, 8) {
            return bad(format!(
                "cnn2d total stride is ({sh}, {sw}), expected (32, 8)"
            ));
        }
        if self.gru_layers == 0 {
            return bad("gru_layers must be at least 1".into());
        }
        if !(self.coord_scale.is_finite() && self.coord_scale > 0.0) {
            return bad("coord_scale must be positive".into());
        }
        Ok(())
    }
}

/// Image stream: residual CNN followed by its own BiGRU stack.
#[derive(Debug, Clone)]
pub struct ImageEncoder {
    pub cnn: ImageCnn,
    pub gru: BiGru,
}

impl ImageEncoder {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        Ok(ImageEncoder {
            cnn: ImageCnn::new(&mut pb.scope("cnn"), cfg)?,
            gru: BiGru::new(&mut pb.scope("gru"), cfg.d, cfg.gru_layers)?,
        })
    }

    /// `(F2d_conv, F2d_gru)`, both `(W/8) × d`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        img: &RenderedImage,
    ) -> Result<(FeatureSequence, FeatureSequence)> {
        let conv = self.cnn.forward(g, img)?;
        let gru = self.gru.forward(g, &conv)?;
        Ok((conv, gru))
    }
}
