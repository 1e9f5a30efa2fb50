//! Parameterized layers shared by the encoders, the alignment module and the
//! decoders. Layers only hold [`ParamId`]s; values live in a [`ParamStore`]
//! and are bound into a [`Graph`] on use.

use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{Array, AutodiffError, Graph, Init, ParamId, ParamStore, Scalar, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("parameter {name}: {reason}")]
    Param { name: String, reason: String },
    #[error("invalid input: {0}")]
    Input(String),
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// Registers parameters under a dotted name prefix. With an RNG it creates
/// freshly initialized parameters; without one it looks up existing ones
/// (e.g. after loading a checkpoint) and checks their shapes.
pub struct ParamBuilder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: Option<&'a mut ChaCha8Rng>,
    prefix: String,
}

impl<'a, T: Scalar> ParamBuilder<'a, T> {
    pub fn init(store: &'a mut ParamStore<T>, rng: &'a mut ChaCha8Rng) -> Self {
        ParamBuilder {
            store,
            rng: Some(rng),
            prefix: String::new(),
        }
    }

    pub fn bind(store: &'a mut ParamStore<T>) -> Self {
        ParamBuilder {
            store,
            rng: None,
            prefix: String::new(),
        }
    }

    pub fn scope(&mut self, name: &str) -> ParamBuilder<'_, T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        ParamBuilder {
            store: self.store,
            rng: self.rng.as_deref_mut(),
            prefix,
        }
    }

    pub fn param(&mut self, name: &str, shape: &[usize], init: Init) -> Result<ParamId> {
        let full = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        match self.rng.as_deref_mut() {
            Some(rng) => Ok(self.store.init(&full, shape, init, rng)?),
            None => {
                let id = self.store.id(&full).ok_or_else(|| ModelError::Param {
                    name: full.clone(),
                    reason: "missing".into(),
                })?;
                let got = self.store.get(id).shape();
                if got != shape {
                    return Err(ModelError::Param {
                        name: full,
                        reason: format!("shape {got:?}, expected {shape:?}"),
                    });
                }
                Ok(id)
            }
        }
    }
}

/// `x·W + b` on row vectors.
#[derive(Debug, Clone)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        d_in: usize,
        d_out: usize,
        bias: bool,
    ) -> Result<Self> {
        let w = pb.param(
            "w",
            &[d_in, d_out],
            Init::Xavier {
                fan_in: d_in,
                fan_out: d_out,
            },
        )?;
        let b = if bias {
            Some(pb.param("b", &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Linear { w, b })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        Ok(match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add_bias(y, b)?
            }
            None => y,
        })
    }
}

/// Time-major 1D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv1dLayer {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

impl Conv1dLayer {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let w = pb.param(
            "w",
            &[kernel, c_in, c_out],
            Init::He {
                fan_in: kernel * c_in,
            },
        )?;
        let b = pb.param("b", &[c_out], Init::Zeros)?;
        Ok(Conv1dLayer {
            w,
            b,
            stride,
            pad: kernel / 2,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        Ok(g.conv1d(x, w, b, self.stride, self.pad)?)
    }
}

/// HWC 2D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    w: ParamId,
    b: ParamId,
    stride: (usize, usize),
    pad: (usize, usize),
}

impl Conv2dLayer {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: (usize, usize),
    ) -> Result<Self> {
        let w = pb.param(
            "w",
            &[kernel, kernel, c_in, c_out],
            Init::He {
                fan_in: kernel * kernel * c_in,
            },
        )?;
        let b = pb.param("b", &[c_out], Init::Zeros)?;
        Ok(Conv2dLayer {
            w,
            b,
            stride,
            pad: (kernel / 2, kernel / 2),
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (w, b) = (g.param(self.w), g.param(self.b));
        Ok(g.conv2d(x, w, b, self.stride, self.pad)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, d: usize) -> Result<Self> {
        Ok(LayerNorm {
            gamma: pb.param("gamma", &[d], Init::Ones)?,
            beta: pb.param("beta", &[d], Init::Zeros)?,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let (gamma, beta) = (g.param(self.gamma), g.param(self.beta));
        Ok(g.layer_norm(x, gamma, beta)?)
    }
}

/// Gated recurrent unit with gate order (reset, update, candidate):
///
/// ```text
/// r  = σ(x·W_ir + b_ir + h·W_hr + b_hr)
/// z  = σ(x·W_iz + b_iz + h·W_hz + b_hz)
/// n  = tanh(x·W_in + b_in + r ⊙ (h·W_hn + b_hn))
/// h' = (1 − z) ⊙ n + z ⊙ h
/// ```
#[derive(Debug, Clone)]
pub struct GruCell {
    input: Linear,
    hidden: Linear,
    width: usize,
}

impl GruCell {
    pub fn new<T: Scalar>(pb: &mut ParamBuilder<'_, T>, d_in: usize, width: usize) -> Result<Self> {
        let bound = 1.0 / (width as f64).sqrt();
        let gate = |pb: &mut ParamBuilder<'_, T>, name: &str, d: usize| -> Result<Linear> {
            let mut s = pb.scope(name);
            let w = s.param("w", &[d, 3 * width], Init::Uniform(bound))?;
            let b = s.param("b", &[3 * width], Init::Zeros)?;
            Ok(Linear { w, b: Some(b) })
        };
        let input = gate(pb, "input", d_in)?;
        let hidden = gate(pb, "hidden", width)?;
        Ok(GruCell {
            input,
            hidden,
            width,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Input projections `x·W_i + b_i` for every row of `x` at once.
    pub fn project_inputs<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        self.input.forward(g, x)
    }

    /// One step from a projected input row `gi` (`[1, 3H]`) and state `h` (`[1, H]`).
    pub fn step<T: Scalar>(&self, g: &mut Graph<'_, T>, gi: Var, h: Var) -> Result<Var> {
        let w = self.width;
        let gh = self.hidden.forward(g, h)?;
        let gate = |g: &mut Graph<'_, T>, v: Var, k: usize| g.narrow(v, 1, k * w, w);
        let (ir, iz, inn) = (gate(g, gi, 0)?, gate(g, gi, 1)?, gate(g, gi, 2)?);
        let (hr, hz, hn) = (gate(g, gh, 0)?, gate(g, gh, 1)?, gate(g, gh, 2)?);
        let r = g.add(ir, hr)?;
        let r = g.sigmoid(r)?;
        let z = g.add(iz, hz)?;
        let z = g.sigmoid(z)?;
        let rn = g.mul(r, hn)?;
        let n = g.add(inn, rn)?;
        let n = g.tanh(n)?;
        // (1 - z)·n + z·h == n + z·(h - n)
        let diff = g.sub(h, n)?;
        let zd = g.mul(z, diff)?;
        Ok(g.add(n, zd)?)
    }

    /// Runs the cell over all rows of `x` (`[T, d_in]`) from a zero state;
    /// outputs `[T, H]` in input order regardless of direction.
    pub fn run<T: Scalar>(&self, g: &mut Graph<'_, T>, x: Var, reverse: bool) -> Result<Var> {
        let steps = g.shape(x)[0];
        let gi = self.project_inputs(g, x)?;
        let mut h = g.constant(Array::zeros(&[1, self.width]));
        let mut outs = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let row = g.narrow(gi, 0, t, 1)?;
            h = self.step(g, row, h)?;
            outs[t] = h;
        }
        Ok(g.concat(&outs, 0)?)
    }
}
