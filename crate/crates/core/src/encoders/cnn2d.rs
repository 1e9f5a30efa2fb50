use crate::autodiff::{Array, Graph, Scalar, Var};
use crate::data::{RenderedImage, IMAGE_HEIGHT};
use crate::nn::{Conv2dLayer, LayerNorm, ModelError, ParamBuilder, Result};

use super::{EncoderConfig, FeatureSequence};

/// Two 3×3 convolutions with a projected shortcut whenever the shape changes.
#[derive(Debug, Clone)]
struct ResBlock {
    conv_a: Conv2dLayer,
    conv_b: Conv2dLayer,
    shortcut: Option<Conv2dLayer>,
}

impl ResBlock {
    fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        c_in: usize,
        c_out: usize,
        stride: (usize, usize),
    ) -> Result<Self> {
        let conv_a = Conv2dLayer::new(&mut pb.scope("a"), c_in, c_out, 3, stride)?;
        let conv_b = Conv2dLayer::new(&mut pb.scope("b"), c_out, c_out, 3, (1, 1))?;
        let shortcut = if stride != (1, 1) || c_in != c_out {
            Some(Conv2dLayer::new(
                &mut pb.scope("proj"),
                c_in,
                c_out,
                1,
                stride,
            )?)
        } else {
            None
        };
        Ok(ResBlock {
            conv_a,
            conv_b,
            shortcut,
        })
    }

    fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.conv_a.forward(g, x)?;
        let h = g.relu(h)?;
        let h = self.conv_b.forward(g, h)?;
        let skip = match &self.shortcut {
            Some(p) => p.forward(g, x)?,
            None => x,
        };
        let y = g.add(h, skip)?;
        Ok(g.relu(y)?)
    }
}

/// Residual CNN collapsing the 32-pixel height and striding width by 8,
/// with a per-column layer norm on the output.
#[derive(Debug, Clone)]
pub struct ImageCnn {
    stem: Conv2dLayer,
    blocks: Vec<ResBlock>,
    norm: LayerNorm,
    d: usize,
}

impl ImageCnn {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        let spec = &cfg.cnn2d;
        let stem = Conv2dLayer::new(
            &mut pb.scope("stem"),
            1,
            spec.stem_channels,
            3,
            spec.stem_stride,
        )?;
        let mut blocks = Vec::new();
        let mut c_in = spec.stem_channels;
        for (i, stage) in spec.stages.iter().enumerate() {
            for j in 0..stage.blocks {
                let stride = if j == 0 { stage.stride } else { (1, 1) };
                blocks.push(ResBlock::new(
                    &mut pb.scope(&format!("{i}.{j}")),
                    c_in,
                    stage.channels,
                    stride,
                )?);
                c_in = stage.channels;
            }
        }
        let norm = LayerNorm::new(&mut pb.scope("norm"), cfg.d)?;
        Ok(ImageCnn {
            stem,
            blocks,
            norm,
            d: cfg.d,
        })
    }

    /// `F2d_conv`: `(W/8) × d`.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        img: &RenderedImage,
    ) -> Result<FeatureSequence> {
        if img.height() != IMAGE_HEIGHT || !img.width().is_multiple_of(8) || img.width() == 0 {
            return Err(ModelError::Input(format!(
                "image must be {IMAGE_HEIGHT} px high with width a positive multiple of 8, got {}×{}",
                img.height(),
                img.width()
            )));
        }
        let pixels = img.pixels().iter().map(|p| T::of(*p as f64)).collect();
        let x = g.constant(Array::new(vec![IMAGE_HEIGHT, img.width(), 1], pixels)?);
        let x = self.stem.forward(g, x)?;
        let mut x = g.relu(x)?;
        for block in &self.blocks {
            x = block.forward(g, x)?;
        }
        let shape = g.shape(x).to_vec();
        if shape[0] != 1 || shape[2] != self.d {
            return Err(ModelError::Config(format!(
                "cnn2d produced shape {shape:?}, expected [1, W/8, {}]",
                self.d
            )));
        }
        let frames = shape[1];
        let values = g.reshape(x, &[frames, self.d])?;
        let values = self.norm.forward(g, values)?;
        Ok(FeatureSequence {
            values,
            frames,
            width: self.d,
            positions: None,
        })
    }
}
