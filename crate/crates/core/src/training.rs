//! Schedule, momentum SGD, the training loop, evaluation and score fusion.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::{derive_modalities, normalize, SkeletonSequence};
use crate::error::{Error, Result};
use crate::model::{decays, forward_sample, init_params, save_model, ModelConfig, ModelParams};
use crate::rng::Rng;
use crate::tensor::checkpoint::Precision;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig { base_lr: 0.1, warmup_epochs: 5, decay_epochs: vec![35, 55, 75], decay_factor: 0.1 }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base learning rate {}", self.base_lr)));
        }
        if !self.decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(format!("decay epochs {:?} must strictly increase", self.decay_epochs)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor.is_finite()) {
            return Err(Error::Config(format!("decay factor {}", self.decay_factor)));
        }
        Ok(())
    }
}

/// Linear warmup `base·(e+1)/w` for `e < w`, then `base` divided by
/// `(1/decay_factor)^n` where `n` counts decay epochs at or before `e`.
/// Dividing by the reciprocal keeps decimal factors on decimal rates
/// (0.1 → 0.01 → 0.001) exactly.
pub fn lr_schedule(epoch: usize, cfg: &ScheduleConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        return cfg.base_lr * (epoch + 1) as f64 / cfg.warmup_epochs as f64;
    }
    let passed = cfg.decay_epochs.iter().filter(|&&d| epoch >= d).count();
    cfg.base_lr / (1.0 / cfg.decay_factor).powi(passed as i32)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub momentum: f64,
    pub weight_decay: f64,
    /// Apply weight decay to biases and positional tables too.
    pub decay_all: bool,
    /// One buffer per parameter, same length.
    pub buffers: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(params: &[(String, Tensor)], momentum: f64, weight_decay: f64) -> OptimizerState {
        OptimizerState {
            momentum,
            weight_decay,
            decay_all: false,
            buffers: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
        }
    }
}

/// `v ← m·v + g + wd·p`, `p ← p − lr·v`. Returns the updated parameters as
/// fresh trainable leaves, in input order.
pub fn sgd_step(
    params: &[(String, Tensor)],
    grads: &[Vec<f64>],
    state: &mut OptimizerState,
    lr: f64,
) -> Result<Vec<Tensor>> {
    if grads.len() != params.len() || state.buffers.len() != params.len() {
        return Err(Error::dim(
            "sgd_step",
            format!("{} parameters, {} gradients, {} buffers", params.len(), grads.len(), state.buffers.len()),
        ));
    }
    let mut out = Vec::with_capacity(params.len());
    for (((name, p), g), v) in params.iter().zip(grads).zip(state.buffers.iter_mut()) {
        if g.len() != p.numel() || v.len() != p.numel() {
            return Err(Error::dim(
                "sgd_step",
                format!("{name}: {} values, gradient {}, buffer {}", p.numel(), g.len(), v.len()),
            ));
        }
        let wd = if state.decay_all || decays(name) { state.weight_decay } else { 0.0 };
        let data = p
            .data()
            .iter()
            .zip(g)
            .zip(v.iter_mut())
            .map(|((pi, gi), vi)| {
                *vi = state.momentum * *vi + gi + wd * pi;
                pi - lr * *vi
            })
            .collect();
        out.push(Tensor::param(p.shape(), data)?);
    }
    Ok(out)
}

/// A normalized model input and its label.
#[derive(Clone, Debug)]
pub struct Example {
    pub x: Tensor,
    pub label: usize,
}

/// Which of the four skeleton streams to train on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    #[default]
    Joint,
    Bone,
    JointMotion,
    BoneMotion,
}

impl Modality {
    pub const ALL: [Modality; 4] = [Modality::Joint, Modality::Bone, Modality::JointMotion, Modality::BoneMotion];

    pub fn parse(s: &str) -> Result<Modality> {
        match s {
            "joint" => Ok(Modality::Joint),
            "bone" => Ok(Modality::Bone),
            "joint_motion" | "joint-motion" => Ok(Modality::JointMotion),
            "bone_motion" | "bone-motion" => Ok(Modality::BoneMotion),
            _ => Err(Error::Config(format!("unknown modality {s:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Joint => "joint",
            Modality::Bone => "bone",
            Modality::JointMotion => "joint_motion",
            Modality::BoneMotion => "bone_motion",
        }
    }
}

/// Derive the stream (bones over a chain skeleton) and normalize to
/// `frames`. Degenerate sequences come through as zeros.
pub fn prepare(seqs: &[SkeletonSequence], frames: usize, modality: Modality) -> Result<Vec<Example>> {
    seqs.iter()
        .map(|s| {
            let stream = if modality == Modality::Joint {
                s.clone()
            } else {
                let m = derive_modalities(s, &crate::data::chain_parents(s.joints))?;
                match modality {
                    Modality::Bone => m.bone,
                    Modality::JointMotion => m.joint_motion,
                    _ => m.bone_motion,
                }
            };
            Ok(Example { x: normalize(&stream, frames)?.tensor, label: s.label })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Shuffling seed; initial weights come from the model config's seed.
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub momentum: f64,
    pub weight_decay: f64,
    pub decay_all: bool,
    pub threads: usize,
    /// Written whenever test accuracy improves.
    pub checkpoint: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 16,
            seed: 0,
            schedule: ScheduleConfig::default(),
            momentum: 0.9,
            weight_decay: 5e-4,
            decay_all: false,
            threads: 1,
            checkpoint: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub test_acc: Option<f64>,
}

impl EpochMetrics {
    pub fn line(&self) -> String {
        let test = self.test_acc.map_or("-".to_string(), |a| format!("{a:.4}"));
        format!(
            "epoch={} lr={} train_loss={:.6} train_acc={:.4} test_acc={test}",
            self.epoch, self.lr, self.train_loss, self.train_acc
        )
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub initial: ModelParams,
    pub params: ModelParams,
    /// Parameters at the epoch with the highest test accuracy (first such
    /// epoch); the final parameters when there is no test split.
    pub best: ModelParams,
    pub best_epoch: Option<usize>,
    pub metrics: Vec<EpochMetrics>,
}

struct SampleResult {
    loss: f64,
    correct: bool,
    grads: Vec<Vec<f64>>,
}

fn sample_grads(ex: &Example, params: &ModelParams, leaves: &[Tensor], cfg: &ModelConfig) -> Result<SampleResult> {
    let logits = forward_sample(&ex.x, params, cfg)?.logits;
    let correct = argmax(logits.data()) == ex.label;
    let loss = logits.cross_entropy(&[ex.label])?;
    let grads = loss.gradients()?;
    Ok(SampleResult {
        loss: loss.item()?,
        correct,
        grads: leaves.iter().map(|t| grads.get(t).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec)).collect(),
    })
}

// Per-sample work in input order, whatever the thread count.
fn map_ordered<T, F>(items: &[Example], threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(&Example) -> Result<T> + Sync,
{
    let threads = threads.max(1).min(items.len().max(1));
    if threads == 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    let parts: Vec<Result<Vec<T>>> = std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|part| s.spawn(|| part.iter().map(&f).collect::<Result<Vec<T>>>())).collect();
        handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Logit rows for every example.
pub fn predict(params: &ModelParams, cfg: &ModelConfig, examples: &[Example], threads: usize) -> Result<Vec<Vec<f64>>> {
    let frozen = params.detached();
    map_ordered(examples, threads, |ex| Ok(forward_sample(&ex.x, &frozen, cfg)?.logits.data().to_vec()))
}

/// Fraction of rows whose argmax equals the label.
pub fn top1_accuracy(scores: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Contract(format!("{} score rows for {} labels", scores.len(), labels.len())));
    }
    if scores.is_empty() {
        return Err(Error::Contract("accuracy of an empty split".into()));
    }
    if let Some(r) = scores.iter().position(|r| r.is_empty()) {
        return Err(Error::Contract(format!("score row {r} is empty")));
    }
    let hits = scores.iter().zip(labels).filter(|(r, &l)| argmax(r) == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

pub fn evaluate(params: &ModelParams, cfg: &ModelConfig, examples: &[Example], threads: usize) -> Result<f64> {
    let scores = predict(params, cfg, examples, threads)?;
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    top1_accuracy(&scores, &labels)
}

/// Train from `init_params(model_cfg, model_cfg.seed)`. `on_epoch` sees each
/// epoch's metrics as soon as they are computed.
pub fn train_loop(
    train: &[Example],
    test: &[Example],
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochMetrics),
) -> Result<TrainOutcome> {
    model_cfg.validate()?;
    cfg.schedule.validate()?;
    if train.is_empty() {
        return Err(Error::Contract("training split is empty".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if let Some(ex) = train.iter().chain(test).find(|e| e.label >= model_cfg.num_classes) {
        return Err(Error::Contract(format!("label {} with {} classes", ex.label, model_cfg.num_classes)));
    }
    let initial = init_params(model_cfg, model_cfg.seed)?;
    let mut params = initial.clone();
    let mut best = initial.clone();
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_epoch = None;
    let mut opt = OptimizerState::new(&params.named(), cfg.momentum, cfg.weight_decay);
    opt.decay_all = cfg.decay_all;
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, &cfg.schedule);
        Rng::derive(cfg.seed, epoch as u64).shuffle(&mut order);
        let (mut loss_sum, mut hits) = (0.0, 0usize);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Example> = idx.iter().map(|&i| train[i].clone()).collect();
            let named = params.named();
            let leaves: Vec<Tensor> = named.iter().map(|(_, t)| t.clone()).collect();
            let results = map_ordered(&batch, cfg.threads, |ex| sample_grads(ex, &params, &leaves, model_cfg))?;
            let mut grads: Vec<Vec<f64>> = leaves.iter().map(|t| vec![0.0; t.numel()]).collect();
            let mut batch_loss = 0.0;
            for r in &results {
                batch_loss += r.loss;
                hits += usize::from(r.correct);
                for (acc, g) in grads.iter_mut().zip(&r.grads) {
                    acc.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            let scale = 1.0 / batch.len() as f64;
            if !(batch_loss * scale).is_finite() {
                return Err(Error::Diverged { epoch, step, loss: batch_loss * scale });
            }
            grads.iter_mut().for_each(|g| g.iter_mut().for_each(|v| *v *= scale));
            loss_sum += batch_loss;
            params = params.with_tensors(sgd_step(&named, &grads, &mut opt, lr)?)?;
        }
        let test_acc = if test.is_empty() { None } else { Some(evaluate(&params, model_cfg, test, cfg.threads)?) };
        let m = EpochMetrics {
            epoch,
            lr,
            train_loss: loss_sum / train.len() as f64,
            train_acc: hits as f64 / train.len() as f64,
            test_acc,
        };
        on_epoch(&m);
        if let Some(acc) = test_acc {
            if acc > best_acc {
                best_acc = acc;
                best_epoch = Some(epoch);
                best = params.clone();
                if let Some(path) = &cfg.checkpoint {
                    save_model(path, model_cfg, &best, Precision::F64)?;
                }
            }
        }
        metrics.push(m);
    }
    if best_epoch.is_none() {
        best = params.clone();
        if let Some(path) = &cfg.checkpoint {
            save_model(path, model_cfg, &best, Precision::F64)?;
        }
    }
    Ok(TrainOutcome { initial, params, best, best_epoch, metrics })
}

/// Weighted sum of equally shaped score tables, then the row argmax.
pub fn ensemble_fuse(score_sets: &[Vec<Vec<f64>>], weights: &[f64]) -> Result<Vec<usize>> {
    Ok(fuse_scores(score_sets, weights)?.iter().map(|r| argmax(r)).collect())
}

/// The fused score table itself; streams are added in order.
pub fn fuse_scores(score_sets: &[Vec<Vec<f64>>], weights: &[f64]) -> Result<Vec<Vec<f64>>> {
    let first = score_sets.first().ok_or_else(|| Error::Contract("no score sets to fuse".into()))?;
    if weights.len() != score_sets.len() {
        return Err(Error::dim("ensemble", format!("{} weights for {} score sets", weights.len(), score_sets.len())));
    }
    for (s, set) in score_sets.iter().enumerate() {
        let same = set.len() == first.len() && set.iter().zip(first).all(|(a, b)| a.len() == b.len());
        if !same {
            return Err(Error::dim("ensemble", format!("score set {s} does not match the shape of set 0")));
        }
    }
    Ok((0..first.len())
        .map(|r| {
            (0..first[r].len())
                .map(|c| {
                    let mut acc = 0.0;
                    for (set, w) in score_sets.iter().zip(weights) {
                        acc += w * set[r][c];
                    }
                    acc
                })
                .collect()
        })
        .collect())
}
