use crate::autodiff::{Graph, Scalar, Var};
use crate::nn::{GruCell, ModelError, ParamBuilder, Result};

use super::FeatureSequence;

/// Stacked bidirectional GRU; each direction has `d/2` units so the
/// concatenated output keeps width `d`.
#[derive(Debug, Clone)]
pub struct BiGru {
    layers: Vec<[GruCell; 2]>,
    d: usize,
}

impl BiGru {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, d: usize, layers: usize) -> Result<Self> {
        if !d.is_multiple_of(2) {
            return Err(ModelError::Config(format!("BiGRU width {d} is odd")));
        }
        let layers = (0..layers)
            .map(|i| {
                let mut s = pb.scope(&i.to_string());
                Ok([
                    GruCell::new(&mut s.scope("fwd"), d, d / 2)?,
                    GruCell::new(&mut s.scope("bwd"), d, d / 2)?,
                ])
            })
            .collect::<Result<_>>()?;
        Ok(BiGru { layers, d })
    }

    pub fn layers(&self) -> &[[GruCell; 2]] {
        &self.layers
    }

    /// Runs every layer over `x` (`[frames, d]`).
    pub fn forward_var<T: Scalar>(&self, g: &mut Graph<'_, T>, mut x: Var) -> Result<Var> {
        let width = g.shape(x).get(1).copied().unwrap_or(0);
        if width != self.d {
            return Err(ModelError::Input(format!(
                "BiGRU expects width {}, got {width}",
                self.d
            )));
        }
        for [fwd, bwd] in &self.layers {
            let f = fwd.run(g, x, false)?;
            let b = bwd.run(g, x, true)?;
            x = g.concat(&[f, b], 1)?;
        }
        Ok(x)
    }

    /// Same frames and width; positions carried through.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        feat: &FeatureSequence,
    ) -> Result<FeatureSequence> {
        let values = self.forward_var(g, feat.values)?;
        Ok(FeatureSequence {
            values,
            ..feat.clone()
        })
    }
}
