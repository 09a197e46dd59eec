//! Sample drawing, AdamW and the training loop.

use std::collections::BTreeMap;

use ndarray::Array2;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::{loss_on, LossBreakdown, LossTarget, LossWeights};
use super::model::{ModalitySet, ModelConfig, PatchInputs, TrackerModel};
use crate::data_model::{BoundingBox, Sequence};
use crate::error::{Error, Result};
use crate::params::{Graph, ParamId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub samples_per_epoch: usize,
    pub learning_rate: f64,
    /// First epoch (0-based) trained at the reduced rate; `epochs` or more
    /// means the rate never drops.
    pub lr_drop_epoch: usize,
    pub lr_drop_factor: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub max_grad_norm: f64,
    /// Largest frame distance between template and search samples.
    pub max_frame_gap: usize,
    /// Search-center jitter as a fraction of the search side.
    pub center_jitter: f64,
    /// Search-side jitter: the side is scaled by `exp(U(-s, s))`.
    pub scale_jitter: f64,
    pub loss: LossWeights,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            samples_per_epoch: 256,
            learning_rate: 1e-3,
            lr_drop_epoch: 8,
            lr_drop_factor: 0.1,
            batch_size: 8,
            seed: 0,
            weight_decay: 1e-4,
            max_grad_norm: 1.0,
            max_frame_gap: 30,
            center_jitter: 0.2,
            scale_jitter: 0.2,
            loss: LossWeights::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.samples_per_epoch == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs, samples_per_epoch and batch_size must be positive".into()));
        }
        if !(self.learning_rate > 0.0) || !(self.lr_drop_factor > 0.0) {
            return Err(Error::Config("learning_rate and lr_drop_factor must be positive".into()));
        }
        if !(0.0..0.5).contains(&self.center_jitter) || self.scale_jitter < 0.0 {
            return Err(Error::Config("center_jitter must lie in [0, 0.5) and scale_jitter be non-negative".into()));
        }
        self.loss.validate()
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        if epoch >= self.lr_drop_epoch {
            self.learning_rate * self.lr_drop_factor
        } else {
            self.learning_rate
        }
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.samples_per_epoch.div_ceil(self.batch_size)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

/// AdamW state, keyed by parameter name so it survives checkpointing.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_completed: usize,
    pub step: u64,
    pub moments: BTreeMap<String, Moments>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl TrainState {
    /// One AdamW update of every parameter in `grads`.
    fn apply(&mut self, model: &mut TrackerModel, grads: &[(ParamId, Array2<f64>)], lr: f64, wd: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        for (id, g) in grads {
            let param = model.store.get_mut(*id);
            debug_assert!(param.trainable);
            let mom = self.moments.entry(param.name.clone()).or_insert_with(|| Moments {
                m: vec![0.0; g.len()],
                v: vec![0.0; g.len()],
            });
            let value = param.value.as_slice_mut().expect("standard layout");
            for (i, (&gi, w)) in g.iter().zip(value.iter_mut()).enumerate() {
                let m = BETA1 * mom.m[i] + (1.0 - BETA1) * gi;
                let v = BETA2 * mom.v[i] + (1.0 - BETA2) * gi * gi;
                mom.m[i] = m;
                mom.v[i] = v;
                *w -= lr * ((m / c1) / ((v / c2).sqrt() + ADAM_EPS) + wd * *w);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub cls: f64,
    pub giou: f64,
    pub l1: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    /// Samples whose target center fell outside the search crop.
    pub rejected: usize,
}

/// One training example: crop inputs plus the loss target.
pub struct Sample {
    pub inputs: PatchInputs,
    pub target: LossTarget,
}

/// Draws a template/search pair from annotated frames. `None` means the
/// jittered search crop lost the target center.
pub fn draw_sample<R: Rng + ?Sized>(
    model: &TrackerModel,
    sequences: &[Sequence],
    cfg: &TrainConfig,
    rng: &mut R,
) -> Result<Option<Sample>> {
    let seq = &sequences[rng.random_range(0..sequences.len())];
    let annotated: Vec<(usize, BoundingBox)> = seq.annotations.iter().map(|(&i, &b)| (i, b)).collect();
    let (fi, search_box) = annotated[rng.random_range(0..annotated.len())];
    let near: Vec<&(usize, BoundingBox)> = annotated.iter().filter(|(i, _)| i.abs_diff(fi) <= cfg.max_frame_gap).collect();
    let &(ti, template_box) = near[rng.random_range(0..near.len())];

    let z_window = model.template_window(&template_box);
    let mut x_window = model.search_window(&search_box);
    if cfg.scale_jitter > 0.0 {
        x_window.side *= rng.random_range(-cfg.scale_jitter..=cfg.scale_jitter).exp();
    }
    if cfg.center_jitter > 0.0 {
        let j = cfg.center_jitter * x_window.side;
        x_window.cx += rng.random_range(-j..=j);
        x_window.cy += rng.random_range(-j..=j);
    }
    let gt = x_window.to_crop(&search_box);
    let p = &model.config.patch;
    let Some(target) = LossTarget::new(&gt, p.search_size as f64, p.search_grid()) else {
        return Ok(None);
    };
    let inputs = model.crop_inputs(&seq.frames[ti], &z_window, &seq.frames[fi], &x_window)?;
    Ok(Some(Sample { inputs, target }))
}

/// Loss and per-parameter gradients of one sample.
pub fn sample_gradients(
    model: &TrackerModel,
    sample: &Sample,
    weights: &LossWeights,
) -> Result<(LossBreakdown, Vec<(ParamId, Array2<f64>)>)> {
    let mut g = Graph::new(&model.store);
    let head = model.forward_on(&mut g, &sample.inputs)?;
    let loss = loss_on(&mut g.tape, head, &sample.target, weights);
    let grads = g.tape.backward(loss.total);
    Ok((LossBreakdown::from_tape(&g.tape, loss), g.param_grads(&grads)))
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng
}

/// Trains every parameter not frozen in `model.store`, continuing from
/// `state.epochs_completed` up to `cfg.epochs`.
pub fn train(
    model: &mut TrackerModel,
    sequences: &[Sequence],
    cfg: &TrainConfig,
    state: &mut TrainState,
) -> Result<TrainReport> {
    train_with_progress(model, sequences, cfg, state, |_| {})
}

pub fn train_with_progress(
    model: &mut TrackerModel,
    sequences: &[Sequence],
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    cfg.validate()?;
    if sequences.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    if model.store.trainable_count() == 0 {
        return Err(Error::Argument("model has no trainable parameters".into()));
    }
    let mut report = TrainReport::default();
    for epoch in state.epochs_completed..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        let mut rng = epoch_rng(cfg.seed, epoch);
        let mut sums = [0.0; 4];
        let mut count = 0usize;
        for _ in 0..cfg.steps_per_epoch() {
            let mut acc: BTreeMap<ParamId, Array2<f64>> = BTreeMap::new();
            let mut batch_loss = 0.0;
            let mut used = 0usize;
            let mut attempts = 0usize;
            while used < cfg.batch_size {
                attempts += 1;
                if attempts > 20 * cfg.batch_size {
                    return Err(Error::Argument(
                        "could not draw training samples: target centers keep leaving the search crop".into(),
                    ));
                }
                let Some(sample) = draw_sample(model, sequences, cfg, &mut rng)? else {
                    report.rejected += 1;
                    continue;
                };
                let (loss, grads) = sample_gradients(model, &sample, &cfg.loss)?;
                for (id, g) in grads {
                    match acc.get_mut(&id) {
                        Some(a) => *a += &g,
                        None => {
                            acc.insert(id, g);
                        }
                    }
                }
                batch_loss += loss.total;
                for (s, v) in sums.iter_mut().zip([loss.total, loss.cls, loss.giou, loss.l1]) {
                    *s += v;
                }
                used += 1;
            }
            count += used;
            let inv = 1.0 / used as f64;
            let mut grads: Vec<(ParamId, Array2<f64>)> = acc.into_iter().map(|(id, g)| (id, g * inv)).collect();
            clip_global_norm(&mut grads, cfg.max_grad_norm);
            state.apply(model, &grads, lr, cfg.weight_decay);
            report.steps.push(StepRecord {
                epoch,
                step: state.step,
                lr,
                loss: batch_loss * inv,
            });
        }
        let n = count as f64;
        let record = EpochRecord {
            epoch,
            lr,
            loss: sums[0] / n,
            cls: sums[1] / n,
            giou: sums[2] / n,
            l1: sums[3] / n,
        };
        on_epoch(&record);
        report.epochs.push(record);
        state.epochs_completed = epoch + 1;
    }
    Ok(report)
}

fn clip_global_norm(grads: &mut [(ParamId, Array2<f64>)], max_norm: f64) {
    if max_norm <= 0.0 {
        return;
    }
    let norm = grads.iter().map(|(_, g)| g.iter().map(|v| v * v).sum::<f64>()).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.mapv_inplace(|v| v * s);
        }
    }
}

/// Trains an RGB-only model end to end; its weights serve as the frozen
/// backbone of prompted models.
pub fn pretrain_backbone(
    config: &ModelConfig,
    sequences: &[Sequence],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(TrackerModel, TrainReport)> {
    let rgb_config = ModelConfig {
        modalities: ModalitySet::Rgb,
        ..config.clone()
    };
    let mut model = TrackerModel::new(rgb_config, seed)?;
    let report = train(&mut model, sequences, cfg, &mut TrainState::default())?;
    Ok((model, report))
}

/// A prompted model on top of `backbone`, with only fusion and prompt
/// parameters left trainable.
pub fn prompted_from_backbone(config: &ModelConfig, backbone: &TrackerModel, seed: u64) -> Result<TrackerModel> {
    let mut model = TrackerModel::new(config.clone(), seed)?;
    model.load_backbone_from(backbone);
    if config.modalities.uses_prompts() {
        model.freeze_backbone();
    }
    Ok(model)
}
