use crate::autodiff::{Array, Graph, Scalar};
use crate::data::TrajectorySequence;
use crate::nn::{Conv1dLayer, ModelError, ParamBuilder, Result};

use super::{EncoderConfig, FeatureSequence};

/// Temporal downsampling of the trajectory stream.
pub const TIME_STRIDE: usize = 8;

/// Sequence length after right-padding to a multiple of the stride.
fn padded_len(len: usize) -> usize {
    len.div_ceil(TIME_STRIDE) * TIME_STRIDE
}

/// `[T_pad, 3]` network input `(x·scale, y·scale, pen)`, right-padded by
/// repeating the last sample.
pub fn trajectory_input<T: Scalar>(seq: &TrajectorySequence, coord_scale: f64) -> Result<Array<T>> {
    if seq.len() < 2 {
        return Err(ModelError::Input(format!(
            "sequence {} has {} points, need 2",
            seq.id,
            seq.len()
        )));
    }
    let last = *seq.points.last().unwrap();
    let mut data = Vec::with_capacity(padded_len(seq.len()) * 3);
    for p in seq
        .points
        .iter()
        .chain(std::iter::repeat(&last))
        .take(padded_len(seq.len()))
    {
        data.push(T::of(p.x * coord_scale));
        data.push(T::of(p.y * coord_scale));
        data.push(if p.down { T::one() } else { T::zero() });
    }
    Ok(Array::new(vec![padded_len(seq.len()), 3], data)?)
}

/// Mean `(x, y)` over each 8-sample window of the padded sequence.
pub fn frame_positions(seq: &TrajectorySequence) -> Vec<[f64; 2]> {
    let Some(last) = seq.points.last() else {
        return Vec::new();
    };
    let padded: Vec<_> = seq
        .points
        .iter()
        .chain(std::iter::repeat(last))
        .take(padded_len(seq.len()))
        .collect();
    padded
        .chunks(TIME_STRIDE)
        .map(|w| {
            let n = w.len() as f64;
            [
                w.iter().map(|p| p.x).sum::<f64>() / n,
                w.iter().map(|p| p.y).sum::<f64>() / n,
            ]
        })
        .collect()
}

/// Stack of strided 1D convolutions with ReLU.
#[derive(Debug, Clone)]
pub struct TrajConv {
    layers: Vec<Conv1dLayer>,
    coord_scale: f64,
    d: usize,
}

impl TrajConv {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        let mut c_in = 3;
        let mut layers = Vec::with_capacity(cfg.conv1d.len());
        for (i, spec) in cfg.conv1d.iter().enumerate() {
            layers.push(Conv1dLayer::new(
                &mut pb.scope(&i.to_string()),
                c_in,
                spec.channels,
                spec.kernel,
                spec.stride,
            )?);
            c_in = spec.channels;
        }
        Ok(TrajConv {
            layers,
            coord_scale: cfg.coord_scale,
            d: cfg.d,
        })
    }

    /// Local temporal features, `ceil(T/8) × d`, with per-frame positions.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        seq: &TrajectorySequence,
    ) -> Result<FeatureSequence> {
        let input = trajectory_input::<T>(seq, self.coord_scale)?;
        let mut x = g.constant(input);
        for layer in &self.layers {
            x = layer.forward(g, x)?;
            x = g.relu(x)?;
        }
        let frames = g.shape(x)[0];
        let positions = frame_positions(seq);
        debug_assert_eq!(positions.len(), frames);
        Ok(FeatureSequence {
            values: x,
            frames,
            width: self.d,
            positions: Some(positions),
        })
    }
}
