//! Attention GRU decoder shared in shape by both streams: embed the previous
//! token, attend over encoder frames, update a GRU state, project to the
//! vocabulary.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Array, Graph, Init, ParamId, Scalar, Var};
use crate::data::{EOS, PAD, SOS};
use crate::nn::{GruCell, Linear, ModelError, ParamBuilder, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderConfig {
    /// Longest transcript greedy decoding will emit.
    pub max_len: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        DecoderConfig { max_len: 256 }
    }
}

/// One decoding step's outputs.
#[derive(Debug, Clone, Copy)]
pub struct Step {
    /// `[1, V]`.
    pub logits: Var,
    /// `[1, frames]`.
    pub attention: Var,
    /// `[1, d]`.
    pub state: Var,
}

/// Encoder frames with their key projection computed once per sequence.
#[derive(Debug, Clone, Copy)]
pub struct Memory {
    values: Var,
    keys_t: Var,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    embed: ParamId,
    query: Linear,
    key: Linear,
    cell: GruCell,
    out: Linear,
    vocab_size: usize,
    d: usize,
}

impl Decoder {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        vocab_size: usize,
        d: usize,
    ) -> Result<Self> {
        if vocab_size <= EOS {
            return Err(ModelError::Config(format!(
                "vocabulary of {vocab_size} has no room for symbols"
            )));
        }
        Ok(Decoder {
            embed: pb.param(
                "embed",
                &[vocab_size, d],
                Init::Uniform((3.0 / d as f64).sqrt()),
            )?,
            query: Linear::new(&mut pb.scope("query"), d, d, false)?,
            key: Linear::new(&mut pb.scope("key"), d, d, false)?,
            cell: GruCell::new(&mut pb.scope("gru"), d, d)?,
            out: Linear::new(&mut pb.scope("out"), d, vocab_size, true)?,
            vocab_size,
            d,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Projects encoder features (`[frames, d]`) into attention keys.
    pub fn memory<T: Scalar>(&self, g: &mut Graph<'_, T>, f_enc: Var) -> Result<Memory> {
        let shape = g.shape(f_enc);
        if shape.len() != 2 || shape[0] == 0 || shape[1] != self.d {
            return Err(ModelError::Input(format!(
                "decoder expects [frames>0, {}] features, got {shape:?}",
                self.d
            )));
        }
        let keys = self.key.forward(g, f_enc)?;
        Ok(Memory {
            values: f_enc,
            keys_t: g.transpose(keys)?,
        })
    }

    pub fn initial_state<T: Scalar>(&self, g: &mut Graph<'_, T>) -> Var {
        g.constant(Array::zeros(&[1, self.d]))
    }

    /// Embeds `prev`, attends with query `y + s`, updates the state from
    /// `y + a` and scores the vocabulary.
    pub fn step<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        mem: &Memory,
        prev: usize,
        state: Var,
    ) -> Result<Step> {
        if prev >= self.vocab_size {
            return Err(ModelError::Input(format!(
                "token {prev} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let table = g.param(self.embed);
        let y = g.embedding(table, &[prev])?;
        self.step_embedded(g, mem, y, state)
    }

    fn step_embedded<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        mem: &Memory,
        y: Var,
        state: Var,
    ) -> Result<Step> {
        let ys = g.add(y, state)?;
        let q = self.query.forward(g, ys)?;
        let scores = g.matmul(q, mem.keys_t)?;
        let scores = g.scale(scores, T::of(1.0 / (self.d as f64).sqrt()))?;
        let attention = g.softmax(scores)?;
        let a = g.matmul(attention, mem.values)?;
        let ya = g.add(y, a)?;
        let gi = self.cell.project_inputs(g, ya)?;
        let state = self.cell.step(g, gi, state)?;
        let logits = self.out.forward(g, state)?;
        Ok(Step {
            logits,
            attention,
            state,
        })
    }

    /// Teacher-forced logits `[targets.len(), V]`: step `t` consumes
    /// `targets[t-1]` (`SOS` first).
    pub fn teacher_forced_logits<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        f_enc: Var,
        targets: &[usize],
    ) -> Result<Var> {
        if targets.is_empty() {
            return Err(ModelError::Input("empty target sequence".into()));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= self.vocab_size) {
            return Err(ModelError::Input(format!(
                "token {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        let mem = self.memory(g, f_enc)?;
        let inputs: Vec<usize> = std::iter::once(SOS)
            .chain(targets[..targets.len() - 1].iter().copied())
            .collect();
        let table = g.param(self.embed);
        let embedded = g.embedding(table, &inputs)?;
        let mut state = self.initial_state(g);
        let mut rows = Vec::with_capacity(targets.len());
        for t in 0..targets.len() {
            let y = g.narrow(embedded, 0, t, 1)?;
            let step = self.step_embedded(g, &mem, y, state)?;
            state = step.state;
            rows.push(step.logits);
        }
        Ok(g.concat(&rows, 0)?)
    }

    /// Mean per-step cross-entropy under teacher forcing. `targets` must end
    /// with `EOS`.
    pub fn ce_loss<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        f_enc: Var,
        targets: &[usize],
    ) -> Result<Var> {
        if targets.last() != Some(&EOS) {
            return Err(ModelError::Input(
                "target sequence must end with EOS".into(),
            ));
        }
        let logits = self.teacher_forced_logits(g, f_enc, targets)?;
        Ok(g.cross_entropy(logits, targets)?)
    }

    /// Greedy decoding from `SOS` and a zero state. Stops at `EOS` or after
    /// `max_len` symbols; `PAD` and `SOS` are never emitted.
    pub fn greedy<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        f_enc: Var,
        max_len: usize,
    ) -> Result<Vec<usize>> {
        let mem = self.memory(g, f_enc)?;
        let mut state = self.initial_state(g);
        let mut prev = SOS;
        let mut out = Vec::new();
        while out.len() < max_len {
            let step = self.step(g, &mem, prev, state)?;
            state = step.state;
            let token = argmax_token(g.value(step.logits).data());
            if token == EOS {
                break;
            }
            out.push(token);
            prev = token;
        }
        Ok(out)
    }
}

/// Index of the largest logit among `EOS` and the symbols; the first wins ties.
pub fn argmax_token<T: Scalar>(logits: &[T]) -> usize {
    let mut best = EOS;
    for (i, v) in logits.iter().enumerate() {
        if i != PAD && i != SOS && *v > logits[best] {
            best = i;
        }
    }
    best
}
