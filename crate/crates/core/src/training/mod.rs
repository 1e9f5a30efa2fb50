//! Two-stream collaborative training and single-stream inference.
//!
//! Training runs the trajectory stream, the image stream and the alignment
//! module together and minimizes `L_all = L_1d + L_2d + λ·L_align`.
//! Inference only runs the trajectory stream and the alignment module.

mod checkpoint;

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointError,
};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{
    clip_global_norm, cosine_lr, AdamConfig, AdamState, AutodiffError, Graph, ParamStore, Scalar,
    Var,
};
use crate::data::{
    augment, normalize, render, AugmentConfig, DataError, TrajectorySequence, Vocabulary, EOS,
};
use crate::decoder::{Decoder, DecoderConfig};
use crate::encoders::{BiGru, EncoderConfig, FeatureSequence, ImageEncoder, TrajConv};
use crate::metrics::{MetricsError, MetricsReport};
use crate::nn::{ModelError, ParamBuilder};
use crate::p2sa::{align_loss, merge, sample_image_features, P2sa, P2saConfig};

/// Parameter-name prefixes of each component.
pub mod prefix {
    pub const TRAJ_CONV: &str = "traj.conv";
    pub const TRAJ_GRU: &str = "traj.gru";
    pub const P2SA: &str = "p2sa";
    pub const TRAJ_DEC: &str = "traj.dec";
    pub const IMG_CNN: &str = "img.cnn";
    pub const IMG_GRU: &str = "img.gru";
    pub const IMG_DEC: &str = "img.dec";
    pub const ALL: [&str; 7] = [
        TRAJ_CONV, TRAJ_GRU, P2SA, TRAJ_DEC, IMG_CNN, IMG_GRU, IMG_DEC,
    ];
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("training diverged at step {step}: {component} is not finite")]
    Diverged { step: usize, component: String },
}

impl From<AutodiffError> for TrainError {
    fn from(e: AutodiffError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub p2sa: P2saConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    /// Default architecture at feature width `d`.
    pub fn with_width(d: usize) -> Self {
        ModelConfig {
            encoder: EncoderConfig::with_width(d),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.encoder.validate()?;
        self.p2sa.validate(self.encoder.d)?;
        if self.decoder.max_len == 0 {
            return Err(ModelError::Config(
                "decoder max_len must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Layer structure of both streams; parameter values live in a store.
#[derive(Debug, Clone)]
pub struct Model {
    pub traj_conv: TrajConv,
    pub traj_gru: BiGru,
    pub p2sa: Option<P2sa>,
    pub traj_dec: Decoder,
    pub image: ImageEncoder,
    pub img_dec: Decoder,
    pub config: ModelConfig,
}

/// Graph handles of one forward pass over a batch.
#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub all: Var,
    pub l1d: Var,
    pub l2d: Var,
    pub align: Var,
}

/// Scalar values of [`LossParts`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValues {
    #[serde(rename = "L_1d")]
    pub l1d: f64,
    #[serde(rename = "L_2d")]
    pub l2d: f64,
    #[serde(rename = "L_align")]
    pub align: f64,
    #[serde(rename = "L_all")]
    pub all: f64,
}

impl LossParts {
    pub fn values<T: Scalar>(&self, g: &Graph<'_, T>) -> LossValues {
        let v = |x: Var| g.value(x).item().as_f64();
        LossValues {
            l1d: v(self.l1d),
            l2d: v(self.l2d),
            align: v(self.align),
            all: v(self.all),
        }
    }
}

/// A normalized training example with its target tokens (ending in `EOS`).
#[derive(Debug, Clone)]
pub struct Example {
    pub seq: TrajectorySequence,
    pub targets: Vec<usize>,
}

impl Example {
    pub fn new(seq: &TrajectorySequence, vocab: &Vocabulary) -> Result<Self, TrainError> {
        let mut targets = vocab.encode(&seq.text)?;
        targets.push(EOS);
        Ok(Example {
            seq: normalize(seq)?,
            targets,
        })
    }
}

impl Model {
    pub fn new<T: Scalar>(
        pb: &mut ParamBuilder<'_, T>,
        config: &ModelConfig,
        vocab_size: usize,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let enc = &config.encoder;
        let traj_conv = TrajConv::new(&mut pb.scope(prefix::TRAJ_CONV), enc)?;
        let traj_gru = BiGru::new(&mut pb.scope(prefix::TRAJ_GRU), enc.d, enc.gru_layers)?;
        let p2sa = if config.p2sa.enabled() {
            Some(P2sa::new(&mut pb.scope(prefix::P2SA), &config.p2sa, enc.d)?)
        } else {
            None
        };
        let traj_dec = Decoder::new(&mut pb.scope(prefix::TRAJ_DEC), vocab_size, enc.d)?;
        let image = ImageEncoder::new(&mut pb.scope("img"), enc)?;
        let img_dec = Decoder::new(&mut pb.scope(prefix::IMG_DEC), vocab_size, enc.d)?;
        Ok(Model {
            traj_conv,
            traj_gru,
            p2sa,
            traj_dec,
            image,
            img_dec,
            config: config.clone(),
        })
    }

    /// Trajectory stream up to the decoder input: `F1d_gru*` and, when the
    /// alignment module is on, `F_p2s`.
    pub fn trajectory_features<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        seq: &TrajectorySequence,
    ) -> Result<(FeatureSequence, FeatureSequence, Option<FeatureSequence>), ModelError> {
        let conv = self.traj_conv.forward(g, seq)?;
        match &self.p2sa {
            Some(p2sa) => {
                let f_p2s = p2sa.forward(g, &conv)?;
                let merged = merge(g, &conv, &f_p2s, &self.traj_gru)?;
                Ok((conv, merged, Some(f_p2s)))
            }
            None => {
                let gru = self.traj_gru.forward(g, &conv)?;
                Ok((conv, gru, None))
            }
        }
    }

    /// Per-sample losses `(L_1d, L_2d, L_align)`; `L_align` is `None` when
    /// the alignment loss is off.
    pub fn sample_losses<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        example: &Example,
    ) -> Result<(Var, Var, Option<Var>), ModelError> {
        let (conv, merged, f_p2s) = self.trajectory_features(g, &example.seq)?;
        let l1d = self.traj_dec.ce_loss(g, merged.values, &example.targets)?;
        let image = render(&example.seq);
        let (f2d_conv, f2d_gru) = self.image.forward(g, &image)?;
        let l2d = self.img_dec.ce_loss(g, f2d_gru.values, &example.targets)?;
        let align = match f_p2s {
            Some(f_p2s) if self.config.p2sa.use_align_loss => {
                let positions = conv.positions.as_deref().unwrap_or_default();
                let sampled = sample_image_features(g, &f2d_conv, positions)?;
                Some(align_loss(
                    g,
                    f_p2s.values,
                    sampled.values,
                    self.config.p2sa.use_stop_gradient,
                )?)
            }
            _ => None,
        };
        Ok((l1d, l2d, align))
    }

    /// Batch means of each component and `L_all = L_1d + L_2d + λ·L_align`.
    pub fn total_loss<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        batch: &[Example],
        lambda: f64,
    ) -> Result<LossParts, ModelError> {
        if batch.is_empty() {
            return Err(ModelError::Input("empty batch".into()));
        }
        let (mut l1d, mut l2d, mut align) = (Vec::new(), Vec::new(), Vec::new());
        for example in batch {
            let (a, b, c) = self.sample_losses(g, example)?;
            l1d.push(a);
            l2d.push(b);
            align.extend(c);
        }
        let l1d = batch_mean(g, &l1d)?;
        let l2d = batch_mean(g, &l2d)?;
        let align = if align.is_empty() {
            g.constant(crate::autodiff::Array::scalar(T::zero()))
        } else {
            batch_mean(g, &align)?
        };
        let weighted = g.scale(align, T::of(lambda))?;
        let both = g.add(l1d, l2d)?;
        let all = g.add(both, weighted)?;
        Ok(LossParts {
            all,
            l1d,
            l2d,
            align,
        })
    }

    /// Greedy transcript token ids from the trajectory stream alone.
    pub fn infer_tokens<T: Scalar>(
        &self,
        g: &mut Graph<'_, T>,
        seq: &TrajectorySequence,
    ) -> Result<Vec<usize>, ModelError> {
        let (_, merged, _) = self.trajectory_features(g, seq)?;
        self.traj_dec
            .greedy(g, merged.values, self.config.decoder.max_len)
    }
}

fn batch_mean<T: Scalar>(g: &mut Graph<'_, T>, losses: &[Var]) -> Result<Var, AutodiffError> {
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    g.scale(total, T::of(1.0 / losses.len() as f64))
}

/// Everything needed to train, evaluate or serve a model.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore<f32>,
    pub model: Model,
    pub seed: u64,
}

impl ModelState {
    /// Fresh parameters drawn from a generator seeded with `seed`.
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self, ModelError> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let model = Model::new(
            &mut ParamBuilder::init(&mut params, &mut rng),
            &config,
            vocab.len(),
        )?;
        Ok(ModelState {
            config,
            vocab,
            params,
            model,
            seed,
        })
    }

    /// Total number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        self.params.numel()
    }

    pub fn example(&self, seq: &TrajectorySequence) -> Result<Example, TrainError> {
        Example::new(seq, &self.vocab)
    }

    /// Transcript from the trajectory stream and alignment module only.
    pub fn infer(&self, seq: &TrajectorySequence) -> Result<String, TrainError> {
        let seq = normalize(seq)?;
        let mut g = Graph::with_params(&self.params);
        let tokens = self.model.infer_tokens(&mut g, &seq)?;
        Ok(self.vocab.decode(&tokens))
    }

    /// Corpus metrics of [`ModelState::infer`] against the transcripts.
    pub fn evaluate(&self, dataset: &[TrajectorySequence]) -> Result<MetricsReport, TrainError> {
        let hyps = dataset
            .iter()
            .map(|s| self.infer(s))
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&str> = dataset.iter().map(|s| s.text.as_str()).collect();
        Ok(MetricsReport::compute(&refs, &hyps)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    pub lr_max: f64,
    pub lr_min: f64,
    pub lambda_align: f64,
    pub augment: bool,
    pub augmentation: AugmentConfig,
    pub seed: u64,
    /// Share of the dataset held out for per-epoch validation CER.
    pub val_fraction: f64,
    pub clip_norm: f64,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            epochs: 50,
            max_steps: None,
            lr_max: 2e-4,
            lr_min: 2e-7,
            lambda_align: 2.0,
            augment: true,
            augmentation: AugmentConfig::default(),
            seed: 0,
            val_fraction: 0.1,
            clip_norm: 5.0,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 || self.epochs == 0 || self.max_steps == Some(0) {
            return bad("batch_size, epochs and max_steps must be positive");
        }
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return bad("learning rates must satisfy 0 < lr_min <= lr_max");
        }
        if !(self.lambda_align >= 0.0 && self.lambda_align.is_finite()) {
            return bad("lambda_align must be a finite non-negative number");
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return bad("val_fraction must lie in [0, 1)");
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return bad("clip_norm must be positive");
        }
        if !(0.0..=1.0).contains(&self.augmentation.fraction) || self.augmentation.magnitude < 0.0 {
            return bad("augmentation fraction must lie in [0, 1] and magnitude be non-negative");
        }
        Ok(())
    }
}

/// One line of the JSONL training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: usize,
    pub lr: f64,
    #[serde(flatten)]
    pub losses: LossValues,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    #[serde(flatten)]
    pub mean_losses: LossValues,
    pub val_cer: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub steps: usize,
    pub log: Vec<LogRecord>,
    pub epochs: Vec<EpochSummary>,
}

/// Deterministic `(train, validation)` split by `seed`.
pub fn split_dataset(
    dataset: &[TrajectorySequence],
    val_fraction: f64,
    seed: u64,
) -> (Vec<TrajectorySequence>, Vec<TrajectorySequence>) {
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // separate stream from the one that drives training
    rng.set_stream(1);
    order.shuffle(&mut rng);
    let n_val = (dataset.len() as f64 * val_fraction).floor() as usize;
    let pick = |ids: &[usize]| ids.iter().map(|&i| dataset[i].clone()).collect();
    (pick(&order[n_val..]), pick(&order[..n_val]))
}

/// Trains `state` in place. Parameters only change after a fully finite
/// step, so on [`TrainError::Diverged`] `state` holds the last good values.
pub fn train(
    state: &mut ModelState,
    train_set: &[TrajectorySequence],
    val_set: &[TrajectorySequence],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&LogRecord),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(DataError::EmptyDataset.into());
    }
    let examples = train_set
        .iter()
        .map(|s| state.example(s))
        .collect::<Result<Vec<_>, _>>()?;
    let batches_per_epoch = examples.len().div_ceil(cfg.batch_size);
    let planned = cfg.epochs * batches_per_epoch;
    let total = cfg.max_steps.map_or(planned, |m| m.min(planned));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(&state.params, cfg.adam);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..examples.len()).collect();

    'epochs: for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = [0.0f64; 4];
        let mut epoch_steps = 0;
        for chunk in order.chunks(cfg.batch_size) {
            if report.steps >= total {
                break 'epochs;
            }
            let batch = chunk
                .iter()
                .map(|&i| {
                    let ex = &examples[i];
                    if cfg.augment {
                        Ok(Example {
                            seq: augment(&ex.seq, &cfg.augmentation, &mut rng)?,
                            targets: ex.targets.clone(),
                        })
                    } else {
                        Ok(ex.clone())
                    }
                })
                .collect::<Result<Vec<_>, DataError>>()?;
            let lr = cosine_lr(report.steps as u64, total as u64, cfg.lr_max, cfg.lr_min);
            let (losses, mut grads) = {
                let mut g = Graph::with_params(&state.params);
                let parts = state.model.total_loss(&mut g, &batch, cfg.lambda_align)?;
                let losses = parts.values(&g);
                check_finite(&losses, report.steps)?;
                (
                    losses,
                    g.backward(parts.all)?.into_param_grads(state.params.len()),
                )
            };
            clip_global_norm(&mut grads, cfg.clip_norm);
            adam.step(&mut state.params, &grads, lr)
                .map_err(|e| match e {
                    AutodiffError::NonFiniteGradient(name) => TrainError::Diverged {
                        step: report.steps,
                        component: format!("gradient of {name}"),
                    },
                    e => e.into(),
                })?;
            let record = LogRecord {
                step: report.steps,
                lr,
                losses,
            };
            on_step(&record);
            report.log.push(record);
            report.steps += 1;
            epoch_steps += 1;
            for (s, v) in sums
                .iter_mut()
                .zip([losses.l1d, losses.l2d, losses.align, losses.all])
            {
                *s += v;
            }
        }
        if epoch_steps == 0 {
            break;
        }
        let n = epoch_steps as f64;
        let val_cer = if val_set.is_empty() {
            None
        } else {
            Some(state.evaluate(val_set)?.cer)
        };
        report.epochs.push(EpochSummary {
            epoch,
            steps: epoch_steps,
            mean_losses: LossValues {
                l1d: sums[0] / n,
                l2d: sums[1] / n,
                align: sums[2] / n,
                all: sums[3] / n,
            },
            val_cer,
        });
    }
    Ok(report)
}

fn check_finite(l: &LossValues, step: usize) -> Result<(), TrainError> {
    for (name, v) in [
        ("L_1d", l.l1d),
        ("L_2d", l.l2d),
        ("L_align", l.align),
        ("L_all", l.all),
    ] {
        if !v.is_finite() {
            return Err(TrainError::Diverged {
                step,
                component: name.into(),
            });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests;
