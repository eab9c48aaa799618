//! The fine-tuning loop.
//!
//! Each micro-batch runs one tape per sample: encode image and prompt, read the
//! soft-argmax hazard point off the vision attention map, decode the caption
//! with teacher forcing, and backpropagate the weighted loss. Per-sample
//! gradients may be computed concurrently but are always averaged in sample
//! order, so results do not depend on the thread count. Every
//! `grad_accum_steps` micro-batches the accumulated gradient is averaged,
//! clipped and applied with AdamW at the scheduled learning rate.

mod checkpoint;

use std::fmt::Write as _;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CheckpointMeta, MAGIC, VERSION,
};

use crate::data::{AnnotatedSample, Vocabulary, END_ID, PAD_ID, PROMPT, START_ID};
use crate::localization::{
    grid_to_pixel, hard_argmax, hazard_point_var, pixel_to_grid, GridPoint, PixelPoint,
};
use crate::metrics::{corpus_report, EvalRecord, MetricError, MetricsReport};
use crate::model::{FineTuneMode, Model, ModelError, SamplingParams};
use crate::objective::{
    coord_loss_var, text_loss_var, total_loss_var, LossBreakdown, LossWeights, ObjectiveError,
};
use crate::optim::{
    adamw_step, clip_grad_norm, lr_at, AdamWConfig, AdamWState, OptimError, ScheduleConfig,
};
use crate::tensor::{Tape, Tensor};
use crate::Exec;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("empty dataset")]
    Empty,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error("training diverged at step {step}: loss {loss} (initial {initial})")]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
    },
    #[error("{0}")]
    Io(String),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainMode {
    /// Every parameter trainable.
    Pretrain,
    /// Base frozen; adapters attached if missing.
    LoraFinetune,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum_steps: usize,
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    /// Share of the total optimizer steps spent warming up.
    pub warmup_fraction: f64,
    pub loss_weights: LossWeights,
    pub clip_max_norm: f64,
    pub adamw: AdamWConfig,
    pub seed: u64,
    pub mode: TrainMode,
    pub checkpoint_path: Option<PathBuf>,
    pub log_path: Option<PathBuf>,
    /// Validate after every epoch.
    pub validate: bool,
    pub exec: Exec,
}

impl Default for TrainConfig {
    /// Three epochs, single-image batches, 8-step accumulation, peak rate 1e-4
    /// warmed up from 3e-5, clipping at norm 1.
    fn default() -> Self {
        Self {
            epochs: 3,
            batch_size: 1,
            grad_accum_steps: 8,
            base_lr: 1e-4,
            warmup_start_lr: 3e-5,
            warmup_fraction: 0.1,
            loss_weights: LossWeights::default(),
            clip_max_norm: 1.0,
            adamw: AdamWConfig::default(),
            seed: 0,
            mode: TrainMode::LoraFinetune,
            checkpoint_path: None,
            log_path: None,
            validate: true,
            exec: Exec::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.grad_accum_steps == 0 {
            return Err(TrainError::Config(
                "epochs, batch_size and grad_accum_steps must be ≥ 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return Err(TrainError::Config(format!(
                "warmup_fraction {}",
                self.warmup_fraction
            )));
        }
        if !(self.clip_max_norm > 0.0) {
            return Err(TrainError::Config(format!(
                "clip_max_norm {}",
                self.clip_max_norm
            )));
        }
        self.loss_weights.validate()?;
        self.adamw.validate()?;
        Ok(())
    }

    /// Optimizer steps for `n` training samples:
    /// `epochs · ceil(ceil(n / batch) / accum)`.
    pub fn total_steps(&self, n: usize) -> usize {
        self.epochs * self.steps_per_epoch(n)
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size).div_ceil(self.grad_accum_steps)
    }

    pub fn schedule(&self, n: usize) -> Result<ScheduleConfig> {
        let total = self.total_steps(n);
        let warmup = (total as f64 * self.warmup_fraction).floor() as usize;
        Ok(ScheduleConfig::new(
            self.base_lr,
            self.warmup_start_lr.min(self.base_lr),
            warmup,
            total,
        )?)
    }
}

/// A sample in model-ready form.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSample {
    pub image: Tensor,
    pub prompt: Vec<usize>,
    /// Decoder targets: caption ids followed by the end token.
    pub target: Vec<usize>,
    pub hazard: PixelPoint,
    pub hazard_grid: GridPoint,
}

impl EncodedSample {
    /// Caption ids without start/end, as scored by the text metrics.
    pub fn caption_ids(&self) -> &[usize] {
        &self.target[..self.target.len() - 1]
    }
}

pub fn encode_sample(
    s: &AnnotatedSample,
    vocab: &Vocabulary,
    model: &Model,
) -> Result<EncodedSample> {
    let cfg = model.config();
    if s.image.shape() != cfg.image_shape() {
        return Err(TrainError::Data(format!(
            "image shape {:?} does not match model {:?}",
            s.image.shape(),
            cfg.image_shape()
        )));
    }
    let prompt = vocab.tokenize(PROMPT);
    let target = vocab.tokenize(&s.caption)[1..].to_vec();
    if target.len() > cfg.max_caption_len {
        return Err(TrainError::Data(format!(
            "caption of {} tokens exceeds max_caption_len {}",
            target.len(),
            cfg.max_caption_len
        )));
    }
    Ok(EncodedSample {
        image: s.image.clone(),
        prompt,
        target,
        hazard: s.hazard,
        hazard_grid: pixel_to_grid(s.hazard, cfg.patch_size),
    })
}

pub fn encode_dataset(
    samples: &[AnnotatedSample],
    vocab: &Vocabulary,
    model: &Model,
) -> Result<Vec<EncodedSample>> {
    samples
        .iter()
        .map(|s| encode_sample(s, vocab, model))
        .collect()
}

/// Builds `Σ_i scale·L_total(sample_i)` on one tape and returns the root and the
/// per-sample unweighted breakdown.
fn build_loss(
    model: &Model,
    tape: &mut Tape,
    samples: &[&EncodedSample],
    weights: &LossWeights,
    scale: f64,
) -> Result<(crate::Var, Vec<crate::Var>, Vec<LossBreakdown>)> {
    let bound = model.bind(tape);
    let mut root = None;
    let mut parts = Vec::with_capacity(samples.len());
    for s in samples {
        let img = tape.constant(&s.image);
        let ctx = model.context(tape, &bound, img, &s.prompt)?;
        let point = hazard_point_var(tape, ctx.image.attention, model.sharpness())
            .map_err(|e| TrainError::Data(e.to_string()))?;
        let truth = PixelPoint::new(s.hazard_grid.x, s.hazard_grid.y);
        let coord = coord_loss_var(tape, point, &[truth])?;
        let logits = model.decode_teacher_forced(tape, &bound, ctx.fused, &s.target)?;
        let text = text_loss_var(tape, logits, &s.target)?;
        let total = total_loss_var(tape, coord, text, weights)?;
        parts.push(LossBreakdown {
            coord: tape.scalar(coord),
            text: tape.scalar(text),
            total: tape.scalar(total),
        });
        let scaled = tape.scale(total, scale);
        root = Some(match root {
            None => scaled,
            Some(r) => tape.add(r, scaled).map_err(ModelError::from)?,
        });
    }
    let root = root.ok_or(TrainError::Empty)?;
    Ok((root, bound.vars().to_vec(), parts))
}

/// Gradients for the trainable parameters, in store order.
pub type Grads = Vec<Vec<f64>>;

fn trainable_indices(model: &Model) -> Vec<usize> {
    (0..model.params().len())
        .filter(|&i| model.params().by_index(i).trainable())
        .collect()
}

fn collect(model: &Model, tape: &Tape, root: crate::Var, vars: &[crate::Var]) -> Result<Grads> {
    let g = tape.backward(root).map_err(ModelError::from)?;
    Ok(trainable_indices(model)
        .into_iter()
        .map(|i| g.get_or_zeros(vars[i]))
        .collect())
}

fn mean_breakdown(parts: &[LossBreakdown]) -> LossBreakdown {
    let n = parts.len() as f64;
    LossBreakdown {
        coord: parts.iter().map(|p| p.coord).sum::<f64>() / n,
        text: parts.iter().map(|p| p.text).sum::<f64>() / n,
        total: parts.iter().map(|p| p.total).sum::<f64>() / n,
    }
}

/// Mean-loss gradient of a batch, with every sample on one shared tape.
pub fn batch_gradients(
    model: &Model,
    batch: &[&EncodedSample],
    weights: &LossWeights,
) -> Result<(Grads, LossBreakdown)> {
    if batch.is_empty() {
        return Err(TrainError::Empty);
    }
    let mut tape = Tape::new();
    let (root, vars, parts) =
        build_loss(model, &mut tape, batch, weights, 1.0 / batch.len() as f64)?;
    Ok((collect(model, &tape, root, &vars)?, mean_breakdown(&parts)))
}

/// Mean-loss gradient of a batch with one tape per sample, possibly in
/// parallel, averaged in sample order.
pub fn micro_batch_gradients(
    model: &Model,
    batch: &[&EncodedSample],
    weights: &LossWeights,
    exec: Exec,
) -> Result<(Grads, LossBreakdown)> {
    if batch.is_empty() {
        return Err(TrainError::Empty);
    }
    let per = exec.map(batch, |s| batch_gradients(model, &[*s], weights));
    let per: Vec<(Grads, LossBreakdown)> = per.into_iter().collect::<Result<_>>()?;
    let (grads, parts): (Vec<Grads>, Vec<LossBreakdown>) = per.into_iter().unzip();
    Ok((accumulate_gradients(&grads)?, mean_breakdown(&parts)))
}

/// Elementwise mean of several gradient sets.
pub fn accumulate_gradients(micro: &[Grads]) -> Result<Grads> {
    let first = micro.first().ok_or(TrainError::Empty)?;
    let mut acc: Grads = first.iter().map(|g| vec![0.0; g.len()]).collect();
    for m in micro {
        if m.len() != acc.len() || m.iter().zip(&acc).any(|(a, b)| a.len() != b.len()) {
            return Err(OptimError::ShapeMismatch("accumulate_gradients").into());
        }
        for (a, g) in acc.iter_mut().zip(m) {
            for (x, y) in a.iter_mut().zip(g) {
                *x += y;
            }
        }
    }
    let n = micro.len() as f64;
    acc.iter_mut().flatten().for_each(|x| *x /= n);
    Ok(acc)
}

/// Clips `grads` and applies one AdamW update to the trainable parameters.
/// Returns the pre-clip norm.
pub fn apply_update(
    model: &mut Model,
    mut grads: Grads,
    state: &mut AdamWState,
    adamw: &AdamWConfig,
    clip: f64,
    lr: f64,
) -> Result<f64> {
    let norm = clip_grad_norm(&mut grads, clip)?;
    let idx = trainable_indices(model);
    let store = model.params_mut();
    let mut params: Vec<&mut Tensor> = store
        .iter_mut()
        .enumerate()
        .filter(|(i, _)| idx.binary_search(i).is_ok())
        .map(|(_, p)| &mut p.tensor)
        .collect();
    adamw_step(&mut params, &grads, state, adamw, lr)?;
    Ok(norm)
}

pub fn fresh_state(model: &Model) -> AdamWState {
    AdamWState::new(
        model
            .params()
            .iter()
            .filter(|p| p.trainable())
            .map(|p| &p.tensor),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    /// 1-based optimizer step.
    pub step: usize,
    pub loss: f64,
    pub loss_smooth: f64,
    pub coord_loss: f64,
    pub text_loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub const LOG_HEADER: &str = "step,loss,loss_smooth,coord_loss,text_loss,lr,grad_norm";

/// Exponential moving average weight for the smoothed loss column.
pub const SMOOTHING: f64 = 0.1;

/// Abort when the raw loss exceeds this multiple of the first loss.
pub const DIVERGENCE_FACTOR: f64 = 100.0;

pub fn logs_to_csv(logs: &[StepLog]) -> String {
    let mut s = String::from(LOG_HEADER);
    s.push('\n');
    for l in logs {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            l.step, l.loss, l.loss_smooth, l.coord_loss, l.text_loss, l.lr, l.grad_norm
        );
    }
    s
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub logs: Vec<StepLog>,
    /// Validation report after each epoch (empty when validation is off).
    pub epoch_reports: Vec<MetricsReport>,
    pub state: AdamWState,
    pub steps: usize,
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mix = seed ^ (epoch as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix));
    order
}

/// Moments keyed by parameter name, for checkpoints.
pub fn named_moments(model: &Model, state: &AdamWState) -> Vec<(String, Tensor)> {
    let names = model
        .params()
        .iter()
        .filter(|p| p.trainable())
        .map(|p| p.name.clone());
    names
        .zip(state.m.iter().zip(&state.v))
        .flat_map(|(n, (m, v))| [(format!("{n}.m"), m.clone()), (format!("{n}.v"), v.clone())])
        .collect()
}

/// Optimizer state from checkpoint moments; fresh when they do not cover the
/// current trainable set (e.g. after switching to LoRA).
pub fn restore_state(model: &Model, moments: &[(String, Tensor)], step: u64) -> AdamWState {
    let lookup = |k: String| {
        moments
            .iter()
            .find(|(n, _)| *n == k)
            .map(|(_, t)| t.clone())
    };
    let mut state = fresh_state(model);
    let trainable: Vec<_> = model.params().iter().filter(|p| p.trainable()).collect();
    let mut restored = Vec::with_capacity(trainable.len());
    for p in &trainable {
        match (
            lookup(format!("{}.m", p.name)),
            lookup(format!("{}.v", p.name)),
        ) {
            (Some(m), Some(v))
                if m.shape() == p.tensor.shape() && v.shape() == p.tensor.shape() =>
            {
                restored.push((m, v))
            }
            _ => return state,
        }
    }
    let (m, v) = restored.into_iter().unzip();
    state.m = m;
    state.v = v;
    state.t = step;
    state
}

pub fn make_checkpoint(model: &Model, state: &AdamWState, epoch: u64, seed: u64) -> Checkpoint {
    Checkpoint {
        params: model.named_tensors(),
        moments: named_moments(model, state),
        meta: CheckpointMeta {
            step: state.t,
            epoch,
            seed,
        },
    }
}

/// Runs the full loop and returns the final-epoch model state in place.
pub fn train(
    model: &mut Model,
    train_set: &[EncodedSample],
    val_set: &[EncodedSample],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::Empty);
    }
    match cfg.mode {
        TrainMode::LoraFinetune if model.mode() == FineTuneMode::Full => {
            model.enable_lora(cfg.seed)?
        }
        TrainMode::Pretrain if model.mode() == FineTuneMode::Lora => {
            return Err(TrainError::Config(
                "pretraining needs a model without adapters".into(),
            ))
        }
        _ => {}
    }
    let sched = cfg.schedule(train_set.len())?;
    let mut state = fresh_state(model);
    let mut logs = Vec::with_capacity(sched.total_steps);
    let mut reports = Vec::new();
    let mut initial: Option<f64> = None;
    let mut smooth = 0.0;
    let mut step = 0usize;

    for epoch in 0..cfg.epochs {
        let order = epoch_order(train_set.len(), cfg.seed, epoch);
        let micro: Vec<Vec<&EncodedSample>> = order
            .chunks(cfg.batch_size)
            .map(|c| c.iter().map(|&i| &train_set[i]).collect())
            .collect();
        for group in micro.chunks(cfg.grad_accum_steps) {
            let mut grads = Vec::with_capacity(group.len());
            let mut parts = Vec::with_capacity(group.len());
            for batch in group {
                let (g, l) = micro_batch_gradients(model, batch, &cfg.loss_weights, cfg.exec)?;
                let init = *initial.get_or_insert(l.total);
                if !l.total.is_finite() || l.total > DIVERGENCE_FACTOR * init {
                    return Err(TrainError::Diverged {
                        step: step + 1,
                        loss: l.total,
                        initial: init,
                    });
                }
                grads.push(g);
                parts.push(l);
            }
            let avg = accumulate_gradients(&grads)?;
            let loss = mean_breakdown(&parts);
            let lr = lr_at(&sched, step)?;
            let norm = apply_update(model, avg, &mut state, &cfg.adamw, cfg.clip_max_norm, lr)?;
            step += 1;
            smooth = if step == 1 {
                loss.total
            } else {
                SMOOTHING * loss.total + (1.0 - SMOOTHING) * smooth
            };
            logs.push(StepLog {
                step,
                loss: loss.total,
                loss_smooth: smooth,
                coord_loss: loss.coord,
                text_loss: loss.text,
                lr,
                grad_norm: norm,
            });
        }
        if cfg.validate && !val_set.is_empty() {
            reports.push(evaluate(model, val_set, None, cfg.exec)?);
        }
    }

    if let Some(p) = &cfg.log_path {
        std::fs::write(p, logs_to_csv(&logs))
            .map_err(|e| TrainError::Io(format!("{}: {e}", p.display())))?;
    }
    if let Some(p) = &cfg.checkpoint_path {
        save_checkpoint(
            p,
            &make_checkpoint(model, &state, cfg.epochs as u64, cfg.seed),
        )?;
    }
    Ok(TrainOutcome {
        logs,
        epoch_reports: reports,
        state,
        steps: step,
    })
}

/// Greedy caption and hard-argmax point for one sample.
pub fn predict(model: &Model, sample: &EncodedSample) -> Result<EvalRecord<usize>> {
    let caption = model.caption(
        &sample.image,
        &sample.prompt,
        model.config().max_caption_len,
        &SamplingParams::GREEDY,
        0,
    )?;
    let map = model.attention_map(&sample.image)?;
    let cfg = model.config();
    let point = grid_to_pixel(
        GridPoint::from(hard_argmax(&map)),
        cfg.patch_size,
        cfg.image_size,
    );
    Ok(EvalRecord { caption, point })
}

/// Greedy decoding plus hard-argmax localization over a validation set.
pub fn evaluate(
    model: &Model,
    samples: &[EncodedSample],
    max_samples: Option<usize>,
    exec: Exec,
) -> Result<MetricsReport> {
    let n = max_samples.map_or(samples.len(), |m| m.min(samples.len()));
    if n == 0 {
        return Err(TrainError::Empty);
    }
    let subset = &samples[..n];
    let predicted: Vec<EvalRecord<usize>> = exec
        .map(subset, |s| predict(model, s))
        .into_iter()
        .collect::<Result<_>>()?;
    let truth: Vec<EvalRecord<usize>> = subset
        .iter()
        .map(|s| EvalRecord {
            caption: s.caption_ids().to_vec(),
            point: s.hazard,
        })
        .collect();
    Ok(corpus_report(&truth, &predicted, None, exec)?)
}

/// Strips reserved ids a decoder may emit before scoring.
pub fn content_ids(ids: &[usize]) -> Vec<usize> {
    ids.iter()
        .copied()
        .take_while(|&t| t != END_ID)
        .filter(|&t| t != PAD_ID && t != START_ID)
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_generate, SynthConfig};
    use crate::model::ModelConfig;

    fn setup(n: usize) -> (Model, Vec<EncodedSample>) {
        let synth = SynthConfig {
            image_size: 8,
            patch_size: 4,
            blob_radius: 2.0,
            ..Default::default()
        };
        let samples = synth_generate(n, &synth, 5, Exec::Sequential).unwrap();
        let mut corpus: Vec<&str> = samples.iter().map(|s| s.caption.as_str()).collect();
        corpus.push(PROMPT);
        let vocab = Vocabulary::build(&corpus);
        let mut mc = ModelConfig::tiny(vocab.len());
        mc.max_caption_len = 12;
        mc.max_prompt_len = 6;
        let model = Model::new(mc, 1).unwrap();
        let enc = encode_dataset(&samples, &vocab, &model).unwrap();
        (model, enc)
    }

    #[test]
    fn accumulation_examples() {
        let g = vec![vec![1.0, -2.0], vec![0.5]];
        assert_eq!(accumulate_gradients(&vec![g.clone(); 8]).unwrap(), g);
        let neg: Grads = g.iter().map(|v| v.iter().map(|x| -x).collect()).collect();
        assert!(accumulate_gradients(&[g.clone(), neg])
            .unwrap()
            .iter()
            .flatten()
            .all(|&x| x == 0.0));
        assert!(accumulate_gradients(&[g, vec![vec![1.0]]]).is_err());
        assert!(accumulate_gradients(&[]).is_err());
    }

    #[test]
    fn step_counts() {
        let cfg = TrainConfig {
            epochs: 2,
            batch_size: 2,
            grad_accum_steps: 3,
            ..Default::default()
        };
        // 11 samples → 6 micro-batches → 2 steps per epoch.
        assert_eq!(cfg.steps_per_epoch(11), 2);
        assert_eq!(cfg.total_steps(11), 4);
        let one = TrainConfig {
            grad_accum_steps: 1,
            ..Default::default()
        };
        assert_eq!(one.total_steps(5), 15);
    }

    #[test]
    fn per_sample_and_shared_tape_agree() {
        let (model, data) = setup(4);
        let batch: Vec<&EncodedSample> = data.iter().collect();
        let w = LossWeights::default();
        let (a, la) = batch_gradients(&model, &batch, &w).unwrap();
        let (b, lb) = micro_batch_gradients(&model, &batch, &w, Exec::Parallel).unwrap();
        assert!((la.total - lb.total).abs() < 1e-12);
        for (x, y) in a.iter().flatten().zip(b.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn logs_match_schedule_and_lora_freezes_base() {
        let (mut model, data) = setup(6);
        let before = model.clone();
        let cfg = TrainConfig {
            epochs: 2,
            grad_accum_steps: 2,
            base_lr: 1e-3,
            validate: false,
            ..Default::default()
        };
        let out = train(&mut model, &data, &[], &cfg).unwrap();
        assert_eq!(out.steps, 6);
        let sched = cfg.schedule(data.len()).unwrap();
        for (i, l) in out.logs.iter().enumerate() {
            assert_eq!(l.step, i + 1);
            assert_eq!(l.lr, lr_at(&sched, i).unwrap());
        }
        for p in before.params().iter() {
            assert!(
                model.params().tensor(&p.name).unwrap().bit_eq(&p.tensor),
                "{}",
                p.name
            );
        }
        assert!(model
            .params()
            .iter()
            .any(|p| p.kind != crate::model::ParamKind::Base));
        let csv = logs_to_csv(&out.logs);
        assert!(csv.starts_with(LOG_HEADER));
        assert_eq!(csv.lines().count(), 7);
    }

    #[test]
    fn checkpoint_mode_transition() {
        let (model, _) = setup(2);
        let state = fresh_state(&model);
        let ck = make_checkpoint(&model, &state, 1, 9);
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        let mut m = Model::from_named(model.config().clone(), back.params).unwrap();
        assert_eq!(m.mode(), FineTuneMode::Full);
        m.enable_lora(3).unwrap();
        let st = restore_state(&m, &back.moments, back.meta.step);
        assert_eq!(
            st.m.len(),
            m.params().iter().filter(|p| p.trainable()).count()
        );
        assert!(st.m.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        let ck2 = make_checkpoint(&m, &st, 1, 9);
        let m2 = Model::from_named(model.config().clone(), ck2.params).unwrap();
        assert_eq!(m2.mode(), FineTuneMode::Lora);
        assert_eq!(m2, m);
    }

    #[test]
    fn evaluate_reports_everything() {
        let (model, data) = setup(5);
        let r = evaluate(&model, &data, Some(3), Exec::default()).unwrap();
        assert_eq!(r.count, 3);
        assert!(r.mse_pixels >= 0.0);
        assert!(evaluate(&model, &[], None, Exec::default()).is_err());
    }
}
