//! Point-to-spatial alignment: position embedding of trajectory frames,
//! self-attention over them, point-level sampling of image features, the
//! alignment loss and the merge back into the trajectory stream.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, Scalar, Var};
use crate::encoders::{BiGru, FeatureSequence};
use crate::nn::{LayerNorm, Linear, ModelError, ParamBuilder, Result};

/// Width stride of the image stream in pixels per feature column.
pub const COLUMN_STRIDE: f64 = 8.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct P2saConfig {
    pub layers: usize,
    pub heads: usize,
    /// Feed-forward width; `None` means `2·d`.
    pub ff_width: Option<usize>,
    pub rope_base: f64,
    pub use_transformer: bool,
    pub use_rope: bool,
    pub use_align_loss: bool,
    pub use_stop_gradient: bool,
}

impl Default for P2saConfig {
    fn default() -> Self {
        P2saConfig {
            layers: 3,
            heads: 8,
            ff_width: None,
            rope_base: 10000.0,
            use_transformer: true,
            use_rope: true,
            use_align_loss: true,
            use_stop_gradient: true,
        }
    }
}

impl P2saConfig {
    /// Baseline: no alignment module at all.
    pub fn disabled() -> Self {
        P2saConfig {
            use_transformer: false,
            use_rope: false,
            use_align_loss: false,
            use_stop_gradient: false,
            ..Self::default()
        }
    }

    /// Cumulative ablation ladder: 1 has no module, 2 adds the transformer,
    /// 3 RoPE, 4 the alignment loss and 5 the stop-gradient.
    pub fn ablation(level: u8) -> Option<Self> {
        if !(1..=5).contains(&level) {
            return None;
        }
        Some(P2saConfig {
            use_transformer: level >= 2,
            use_rope: level >= 3,
            use_align_loss: level >= 4,
            use_stop_gradient: level >= 5,
            ..Self::default()
        })
    }

    /// The module exists when any of its parts is switched on. Stop-gradient
    /// alone only modifies the alignment loss.
    pub fn enabled(&self) -> bool {
        self.use_transformer || self.use_rope || self.use_align_loss
    }

    pub fn ff_width(&self, d: usize) -> usize {
        self.ff_width.unwrap_or(2 * d)
    }

    pub fn validate(&self, d: usize) -> Result<()> {
        let bad = |m: String| Err(ModelError::Config(m));
        if !d.is_multiple_of(4) {
            return bad(format!("RoPE needs d divisible by 4, got {d}"));
        }
        if self.use_transformer {
            if self.heads == 0 || !d.is_multiple_of(2 * self.heads) {
                return bad(format!(
                    "d={d} is not divisible by 2·heads={}",
                    2 * self.heads
                ));
            }
            if self.layers == 0 || self.ff_width(d) == 0 {
                return bad("transformer needs at least one layer and a positive ff width".into());
            }
        }
        if !(self.rope_base.is_finite() && self.rope_base > 1.0) {
            return bad(format!("rope_base must exceed 1, got {}", self.rope_base));
        }
        Ok(())
    }
}

/// Sinusoidal 2D embedding `[frames, d]`. The first `d/2` lanes encode x and
/// the last `d/2` encode y; pair `j` of a half is `(cos θ, sin θ)` with
/// `θ = pos / base^(2j / (d/2))`.
pub fn rope2d<T: Scalar>(positions: &[[f64; 2]], d: usize, base: f64) -> Result<Array<T>> {
    if d == 0 || !d.is_multiple_of(4) {
        return Err(ModelError::Config(format!(
            "RoPE needs d divisible by 4, got {d}"
        )));
    }
    let half = d / 2;
    let mut data = Vec::with_capacity(positions.len() * d);
    for pos in positions {
        for &p in pos {
            for j in 0..half / 2 {
                let theta = p / base.powf(2.0 * j as f64 / half as f64);
                data.push(T::of(theta.cos()));
                data.push(T::of(theta.sin()));
            }
        }
    }
    Ok(Array::new(vec![positions.len(), d], data)?)
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
    d: usize,
}

impl MultiHeadAttention {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, d: usize, heads: usize) -> Result<Self> {
        if heads == 0 || !d.is_multiple_of(heads) {
            return Err(ModelError::Config(format!(
                "width {d} does not split into {heads} heads"
            )));
        }
        Ok(MultiHeadAttention {
            q: Linear::new(&mut pb.scope("q"), d, d, true)?,
            k: Linear::new(&mut pb.scope("k"), d, d, true)?,
            v: Linear::new(&mut pb.scope("v"), d, d, true)?,
            out: Linear::new(&mut pb.scope("out"), d, d, true)?,
            heads,
            d,
        })
    }

    /// Self-attention over the rows of `x`; also returns each head's
    /// `[frames, frames]` weight matrix.
    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let dh = self.d / self.heads;
        let q = self.q.forward(g, x)?;
        let k = self.k.forward(g, x)?;
        let v = self.v.forward(g, x)?;
        let scale = T::of(1.0 / (dh as f64).sqrt());
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = g.narrow(q, 1, h * dh, dh)?;
            let kh = g.narrow(k, 1, h * dh, dh)?;
            let vh = g.narrow(v, 1, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scores = g.scale(scores, scale)?;
            let w = g.softmax(scores)?;
            outs.push(g.matmul(w, vh)?);
            weights.push(w);
        }
        let joined = g.concat(&outs, 1)?;
        Ok((self.out.forward(g, joined)?, weights))
    }
}

/// Pre-norm encoder layer: `x + MHA(LN(x))`, then `x + FF(LN(x))`.
#[derive(Debug, Clone)]
pub struct TransformerLayer {
    norm_attn: LayerNorm,
    attn: MultiHeadAttention,
    norm_ff: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl TransformerLayer {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        d: usize,
        heads: usize,
        ff: usize,
    ) -> Result<Self> {
        Ok(TransformerLayer {
            norm_attn: LayerNorm::new(&mut pb.scope("ln1"), d)?,
            attn: MultiHeadAttention::new(&mut pb.scope("attn"), d, heads)?,
            norm_ff: LayerNorm::new(&mut pb.scope("ln2"), d)?,
            ff_in: Linear::new(&mut pb.scope("ff1"), d, ff, true)?,
            ff_out: Linear::new(&mut pb.scope("ff2"), ff, d, true)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<(Var, Vec<Var>)> {
        let h = self.norm_attn.forward(g, x)?;
        let (a, weights) = self.attn.forward(g, h)?;
        let x = g.add(x, a)?;
        Ok((self.feed_forward(g, x)?, weights))
    }

    /// The residual feed-forward half on its own.
    pub fn feed_forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let h = self.norm_ff.forward(g, x)?;
        let h = self.ff_in.forward(g, h)?;
        let h = g.relu(h)?;
        let h = self.ff_out.forward(g, h)?;
        Ok(g.add(x, h)?)
    }
}

#[derive(Debug, Clone)]
pub struct P2sa {
    cfg: P2saConfig,
    layers: Vec<TransformerLayer>,
    d: usize,
}

impl P2sa {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        cfg: &P2saConfig,
        d: usize,
    ) -> Result<Self> {
        cfg.validate(d)?;
        let layers = if cfg.use_transformer {
            (0..cfg.layers)
                .map(|i| {
                    TransformerLayer::new(
                        &mut pb.scope(&i.to_string()),
                        d,
                        cfg.heads,
                        cfg.ff_width(d),
                    )
                })
                .collect::<Result<_>>()?
        } else {
            Vec::new()
        };
        Ok(P2sa {
            cfg: cfg.clone(),
            layers,
            d,
        })
    }

    pub fn config(&self) -> &P2saConfig {
        &self.cfg
    }

    pub fn layers(&self) -> &[TransformerLayer] {
        &self.layers
    }

    /// `F_p2s`: RoPE added to the conv features, then the transformer stack.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        f1d_conv: &FeatureSequence,
    ) -> Result<FeatureSequence> {
        Ok(self.forward_with_attention(g, f1d_conv)?.0)
    }

    /// Like [`P2sa::forward`], also returning attention weights per layer and head.
    pub fn forward_with_attention<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        f1d_conv: &FeatureSequence,
    ) -> Result<(FeatureSequence, Vec<Vec<Var>>)> {
        if f1d_conv.width != self.d {
            return Err(ModelError::Input(format!(
                "P2SA expects width {}, got {}",
                self.d, f1d_conv.width
            )));
        }
        let mut x = f1d_conv.values;
        if self.cfg.use_rope {
            let positions = f1d_conv
                .positions
                .as_deref()
                .ok_or_else(|| ModelError::Input("P2SA needs frame positions".into()))?;
            let pe = g.constant(rope2d(positions, self.d, self.cfg.rope_base)?);
            x = g.add(x, pe)?;
        }
        let mut weights = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, w) = layer.forward(g, x)?;
            x = y;
            weights.push(w);
        }
        Ok((
            FeatureSequence {
                values: x,
                ..f1d_conv.clone()
            },
            weights,
        ))
    }
}

/// Feature-column coordinate `px / 8` for each trajectory frame.
pub fn sample_coords(positions: &[[f64; 2]]) -> Vec<f64> {
    positions.iter().map(|p| p[0] / COLUMN_STRIDE).collect()
}

/// `F2d_sample`: image features linearly interpolated along width at each
/// trajectory frame's x position, clamped to the valid column range.
pub fn sample_image_features<T: Scalar>(
    g: &mut Graph<'_, T>,
    f2d_conv: &FeatureSequence,
    positions: &[[f64; 2]],
) -> Result<FeatureSequence> {
    let coords: Vec<T> = sample_coords(positions).into_iter().map(T::of).collect();
    let values = g.interp_rows(f2d_conv.values, &coords)?;
    Ok(FeatureSequence {
        values,
        frames: positions.len(),
        width: f2d_conv.width,
        positions: Some(positions.to_vec()),
    })
}

/// Mean squared error between `F_p2s` and the sampled image features; with
/// `stop_gradient` the image branch is a fixed target.
pub fn align_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    f_p2s: Var,
    f2d_sample: Var,
    stop_gradient: bool,
) -> Result<Var> {
    let target = if stop_gradient {
        g.stop_gradient(f2d_sample)
    } else {
        f2d_sample
    };
    Ok(g.mse(f_p2s, target)?)
}

/// `F1d_gru*`: conv features plus `F_p2s`, through the trajectory BiGRU.
pub fn merge<T: Scalar>(
    g: &mut Graph<'_, T>,
    f1d_conv: &FeatureSequence,
    f_p2s: &FeatureSequence,
    gru: &BiGru,
) -> Result<FeatureSequence> {
    let sum = g.add(f1d_conv.values, f_p2s.values)?;
    gru.forward(
        g,
        &FeatureSequence {
            values: sum,
            ..f1d_conv.clone()
        },
    )
}
