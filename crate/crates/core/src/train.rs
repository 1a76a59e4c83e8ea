//! Per-(fold, view) training: AdamW on a class-weighted cross-entropy,
//! global-norm gradient clipping, optional reduced precision with dynamic
//! loss scaling, plateau learning-rate halving, early stopping on
//! validation accuracy and the overfit guard.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use vol3d::{clip_grad_norm, grad_norm, AdamW, AdamWConfig, Ctx, GradScaler, Precision, Scalar, Tensor};

use crate::augment::{AugmentConfig, Augmenter};
use crate::corpus::{PacingClass, VideoTensor, ViewLabel};
use crate::dataset::{key_patient, Sample};
use crate::error::{Error, Result};
use crate::evaluate::SamplePrediction;
use crate::folds::FoldSpec;
use crate::model::{build_model, load_checkpoint_for, save_checkpoint, CheckpointMeta, IceNet, ModelConfig, RngState};
use crate::seed::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub class_weights: [f64; 3],
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub batch_size: usize,
    pub grad_clip_norm: f64,
    pub use_plateau_scheduler: bool,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    /// Training accuracy (fraction) above which the overfit guard arms.
    pub overfit_train_acc: f64,
    pub overfit_patience: usize,
    /// Half-precision convolution/affine operands with dynamic loss
    /// scaling.
    pub mixed_precision: bool,
    pub seed: u64,
    pub eval_batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-5,
            weight_decay: 1e-3,
            class_weights: [1.0; 3],
            max_epochs: 150,
            early_stop_patience: 20,
            batch_size: 8,
            grad_clip_norm: 1.0,
            use_plateau_scheduler: false,
            plateau_patience: 5,
            plateau_factor: 0.5,
            overfit_train_acc: 0.90,
            overfit_patience: 10,
            mixed_precision: false,
            seed: 0,
            eval_batch_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("grad_clip_norm", self.grad_clip_norm),
            ("plateau_factor", self.plateau_factor),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if self.class_weights.iter().any(|w| !(*w > 0.0 && w.is_finite())) {
            return Err(Error::Config(format!("class weights must be positive, got {:?}", self.class_weights)));
        }
        let counts = [
            ("max_epochs", self.max_epochs),
            ("early_stop_patience", self.early_stop_patience),
            ("batch_size", self.batch_size),
            ("plateau_patience", self.plateau_patience),
            ("overfit_patience", self.overfit_patience),
            ("eval_batch_size", self.eval_batch_size),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }

    pub fn precision(&self) -> Precision {
        if self.mixed_precision {
            Precision::Half
        } else {
            Precision::Full
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    #[default]
    None,
    EarlyStop,
    OverfitGuard,
    MaxEpochs,
}

impl fmt::Display for StopReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StopReason::None => "none",
            StopReason::EarlyStop => "early_stop",
            StopReason::OverfitGuard => "overfit_guard",
            StopReason::MaxEpochs => "max_epochs",
        })
    }
}

/// Optimizer-independent training bookkeeping. Accuracies are fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    /// Epochs completed.
    pub epoch: usize,
    pub best_val_acc: f64,
    /// 1-based epoch of `best_val_acc` (0 before the first epoch).
    pub best_epoch: usize,
    pub epochs_since_best: usize,
    /// Whether the most recent validation accuracy was a strict improvement.
    pub last_improved: bool,
    pub lr_current: f64,
    pub stop_reason: StopReason,
    /// Consecutive epochs with training accuracy above the guard threshold
    /// and no validation improvement.
    pub overfit_streak: usize,
    pub best_val_loss: f64,
    pub plateau_bad_epochs: usize,
}

impl TrainState {
    pub fn new(lr: f64) -> Self {
        Self {
            epoch: 0,
            best_val_acc: f64::NEG_INFINITY,
            best_epoch: 0,
            epochs_since_best: 0,
            last_improved: false,
            lr_current: lr,
            stop_reason: StopReason::None,
            overfit_streak: 0,
            best_val_loss: f64::INFINITY,
            plateau_bad_epochs: 0,
        }
    }

    pub fn stopped(&self) -> bool {
        self.stop_reason != StopReason::None
    }
}

/// Records one epoch's validation accuracy: a strict improvement resets the
/// patience counter, anything else counts towards early stopping.
pub fn early_stop_step(mut s: TrainState, val_acc: f64, cfg: &TrainConfig) -> TrainState {
    s.epoch += 1;
    if val_acc > s.best_val_acc {
        s.best_val_acc = val_acc;
        s.best_epoch = s.epoch;
        s.epochs_since_best = 0;
        s.last_improved = true;
    } else {
        s.epochs_since_best += 1;
        s.last_improved = false;
        if s.epochs_since_best >= cfg.early_stop_patience && !s.stopped() {
            s.stop_reason = StopReason::EarlyStop;
        }
    }
    s
}

/// Stops once training accuracy has exceeded the threshold for
/// `overfit_patience` consecutive epochs without a validation improvement.
pub fn overfit_guard_step(mut s: TrainState, train_acc: f64, val_improved: bool, cfg: &TrainConfig) -> TrainState {
    if train_acc > cfg.overfit_train_acc && !val_improved {
        s.overfit_streak += 1;
    } else {
        s.overfit_streak = 0;
    }
    if s.overfit_streak >= cfg.overfit_patience && !s.stopped() {
        s.stop_reason = StopReason::OverfitGuard;
    }
    s
}

/// Multiplies the learning rate by `plateau_factor` after
/// `plateau_patience` epochs without a strict validation-loss improvement,
/// then starts counting again.
pub fn plateau_scheduler_step(mut s: TrainState, val_loss: f64, cfg: &TrainConfig) -> TrainState {
    if val_loss < s.best_val_loss {
        s.best_val_loss = val_loss;
        s.plateau_bad_epochs = 0;
    } else {
        s.plateau_bad_epochs += 1;
        if s.plateau_bad_epochs >= cfg.plateau_patience {
            s.lr_current *= cfg.plateau_factor;
            s.plateau_bad_epochs = 0;
        }
    }
    s
}

/// Mean of `w[y] * -log softmax(logits)[y]` over the batch, divided by the
/// mean weight of the batch's targets. Returns the loss and its gradient
/// w.r.t. the logits.
pub fn weighted_cross_entropy<S: Scalar>(logits: &Tensor<S>, targets: &[usize], weights: &[f64; 3]) -> Result<(f64, Tensor<S>)> {
    let (b, k) = (logits.dim(0), logits.dim(1));
    if logits.ndim() != 2 || b != targets.len() || b == 0 {
        return Err(Error::InvalidArgument(format!("logits {:?} for {} targets", logits.shape(), targets.len())));
    }
    if k != weights.len() {
        return Err(Error::InvalidArgument(format!("{k} logits per row for {} class weights", weights.len())));
    }
    if let Some(t) = targets.iter().find(|t| **t >= k) {
        return Err(Error::InvalidArgument(format!("target {t} outside 0..{k}")));
    }
    let wsum: f64 = targets.iter().map(|t| weights[*t]).sum();
    let mut loss = 0.0;
    let mut grad = vec![S::zero(); b * k];
    for (i, &t) in targets.iter().enumerate() {
        let row: Vec<f64> = logits.outer(i).iter().map(|v| v.as_f64()).collect();
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        let w = weights[t] / wsum;
        loss += w * (lse - row[t]);
        for j in 0..k {
            let p = (row[j] - lse).exp();
            grad[i * k + j] = S::lit(w * (p - if j == t { 1.0 } else { 0.0 }));
        }
    }
    Ok((loss, Tensor::from_vec(&[b, k], grad)?))
}

pub fn softmax_row(logits: &[f32]) -> [f32; 3] {
    let m = logits.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f64> = logits.iter().map(|v| ((v - m) as f64).exp()).collect();
    let s: f64 = e.iter().sum();
    [(e[0] / s) as f32, (e[1] / s) as f32, (e[2] / s) as f32]
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

/// Stacks `(1, T, H, W)` videos into a `(B, 1, T, H, W)` batch.
pub fn stack_videos(videos: &[&VideoTensor]) -> Result<Tensor<f32>> {
    let first = videos.first().ok_or_else(|| Error::InvalidArgument("empty batch".into()))?;
    let [_, t, h, w] = first.shape();
    let mut data = Vec::with_capacity(videos.len() * t * h * w);
    for v in videos {
        if v.shape() != first.shape() {
            return Err(Error::InvalidArgument(format!("batch mixes shapes {:?} and {:?}", first.shape(), v.shape())));
        }
        data.extend_from_slice(v.data());
    }
    Ok(Tensor::from_vec(&[videos.len(), 1, t, h, w], data)?)
}

/// Evaluation-mode logits for each sample, in order.
pub fn predict_logits(model: &mut IceNet<f32>, videos: &[&VideoTensor], batch: usize, precision: Precision) -> Result<Vec<[f32; 3]>> {
    let mut out = Vec::with_capacity(videos.len());
    for chunk in videos.chunks(batch.max(1)) {
        let x = stack_videos(chunk)?;
        let y = model.forward(&x, &mut Ctx::eval().with_precision(precision))?;
        for i in 0..chunk.len() {
            let r = y.outer(i);
            out.push([r[0], r[1], r[2]]);
        }
    }
    Ok(out)
}

/// Sample-level predictions (with softmax probabilities) for `samples`.
pub fn predict_samples(model: &mut IceNet<f32>, samples: &[&Sample], batch: usize, precision: Precision) -> Result<Vec<SamplePrediction>> {
    let videos: Vec<&VideoTensor> = samples.iter().map(|s| &s.video).collect();
    let logits = predict_logits(model, &videos, batch, precision)?;
    Ok(samples
        .iter()
        .zip(logits)
        .map(|(s, l)| SamplePrediction {
            patient_id: s.patient_id.clone(),
            clip_id: s.clip_id.clone(),
            view: s.view,
            true_pacing: s.pacing,
            predicted_pacing: PacingClass::from_id(argmax(&l)).expect("three logits"),
            probs: Some(softmax_row(&l)),
        })
        .collect())
}

/// One row of the per-epoch metrics file. Accuracies are fractions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
    pub stop_reason: StopReason,
    /// Largest global gradient norm seen by the optimizer after clipping.
    pub max_clipped_grad_norm: f64,
    /// Steps skipped because scaled gradients overflowed.
    pub skipped_steps: usize,
}

/// What the run touched, for leakage audits.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainAudit {
    /// Patients of every sample that entered an optimizer batch.
    pub optimizer_patients: BTreeSet<String>,
    pub optimizer_samples: usize,
    /// Keys handed to the augmenter, in call order.
    pub augmented_keys: Vec<String>,
    /// Patients whose samples were only ever evaluated (validation).
    pub validation_patients: BTreeSet<String>,
}

impl TrainAudit {
    /// Violations of the train-only rules for `fold`; empty when clean.
    pub fn violations(&self, fold: &FoldSpec) -> Vec<String> {
        let mut out = Vec::new();
        for p in &self.optimizer_patients {
            if !fold.is_train(p) {
                out.push(format!("optimizer saw samples of non-training patient {p}"));
            }
        }
        for k in &self.augmented_keys {
            if !fold.is_train(key_patient(k)) {
                out.push(format!("augmentation applied to non-training sample {k}"));
            }
        }
        out
    }
}

/// Everything one (fold, view) training run needs.
pub struct TrainJob<'a> {
    pub fold: &'a FoldSpec,
    pub view: ViewLabel,
    pub samples: &'a [Sample],
    pub model: &'a ModelConfig,
    pub train: &'a TrainConfig,
    pub augment: &'a AugmentConfig,
    pub out_dir: &'a Path,
}

pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub best: CheckpointMeta,
    pub epochs: Vec<EpochMetrics>,
    pub state: TrainState,
    pub audit: TrainAudit,
    /// Predictions of the best checkpoint on this view's validation and
    /// test samples.
    pub val_predictions: Vec<SamplePrediction>,
    pub test_predictions: Vec<SamplePrediction>,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const EPOCHS_FILE: &str = "epochs.csv";

fn write_epochs_csv(path: &Path, rows: &[EpochMetrics]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Runtime(e.to_string()))?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_epochs_csv(path: &Path) -> Result<Vec<EpochMetrics>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))?;
    r.deserialize().map(|row| row.map_err(|e| Error::Runtime(format!("{}: {e}", path.display())))).collect()
}

/// Mean weighted loss and accuracy (fraction) of `logits` against `truth`.
fn score(logits: &[[f32; 3]], truth: &[usize], weights: &[f64; 3]) -> Result<(f64, f64)> {
    let flat: Vec<f32> = logits.iter().flatten().copied().collect();
    let t = Tensor::from_vec(&[logits.len(), 3], flat)?;
    let (loss, _) = weighted_cross_entropy(&t, truth, weights)?;
    let correct = logits.iter().zip(truth).filter(|(l, y)| argmax(&l[..]) == **y).count();
    Ok((loss, correct as f64 / truth.len() as f64))
}

/// Trains one model for `job.view` on `job.fold`'s training patients,
/// selecting the checkpoint with the best sample-level validation accuracy
/// (the earliest one on ties).
pub fn train_fold_view(job: &TrainJob<'_>) -> Result<TrainOutcome> {
    let cfg = job.train;
    cfg.validate()?;
    let of_view = |ids: &[String]| -> Vec<&Sample> {
        job.samples.iter().filter(|s| s.view == job.view && ids.contains(&s.patient_id)).collect()
    };
    let train_set = of_view(&job.fold.train_ids);
    let val_set = of_view(&job.fold.val_ids);
    let test_set = of_view(&job.fold.test_ids);
    let tag = format!("fold {} view {}", job.fold.fold_index, job.view);
    for c in PacingClass::ALL {
        if !train_set.iter().any(|s| s.pacing == c) {
            return Err(Error::Config(format!("{tag}: no {c} training samples")));
        }
    }
    if val_set.is_empty() {
        return Err(Error::Config(format!("{tag}: no validation samples")));
    }
    std::fs::create_dir_all(job.out_dir).map_err(|e| Error::io(job.out_dir, e))?;

    let mut audit = TrainAudit {
        validation_patients: val_set.iter().map(|s| s.patient_id.clone()).collect(),
        ..TrainAudit::default()
    };
    // Offline expansion: originals plus A variants each.
    let mut augmenter = Augmenter::new(job.augment.clone())?;
    let mut pool: Vec<(&Sample, Option<VideoTensor>)> = Vec::new();
    for s in &train_set {
        pool.push((s, None));
        for v in augmenter.variants(&s.video, &s.key) {
            pool.push((s, Some(v)));
        }
    }
    audit.augmented_keys = augmenter.calls().to_vec();

    let run = |parts: &[&str]| {
        let mut all = vec![job.fold.fold_index.to_string(), job.view.to_string()];
        all.extend(parts.iter().map(|p| p.to_string()));
        let refs: Vec<&str> = all.iter().map(String::as_str).collect();
        derive_seed(cfg.seed, &refs)
    };
    let mut model = build_model::<f32>(job.model, run(&["init"]))?;
    let mut opt = AdamW::<f32>::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() });
    let mut scaler = GradScaler::default();
    let precision = cfg.precision();
    let val_videos: Vec<&VideoTensor> = val_set.iter().map(|s| &s.video).collect();
    let val_truth: Vec<usize> = val_set.iter().map(|s| s.pacing.id()).collect();
    let ckpt_path = job.out_dir.join(CHECKPOINT_FILE);
    let csv_path = job.out_dir.join(EPOCHS_FILE);

    let mut state = TrainState::new(cfg.lr);
    let mut epochs = Vec::new();
    let mut best_meta = None;
    while !state.stopped() {
        let epoch = state.epoch + 1;
        let lr = state.lr_current;
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(run(&["shuffle", &epoch.to_string()])));
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let (mut max_norm, mut skipped) = (0.0f64, 0usize);
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let videos: Vec<&VideoTensor> = chunk.iter().map(|&i| pool[i].1.as_ref().unwrap_or(&pool[i].0.video)).collect();
            let targets: Vec<usize> = chunk.iter().map(|&i| pool[i].0.pacing.id()).collect();
            for &i in chunk {
                audit.optimizer_patients.insert(pool[i].0.patient_id.clone());
            }
            audit.optimizer_samples += chunk.len();
            let x = stack_videos(&videos)?;
            let mut ctx = Ctx::train(run(&["dropout", &epoch.to_string(), &bi.to_string()])).with_precision(precision);
            model.zero_grad();
            let y = model.forward(&x, &mut ctx)?;
            let (loss, mut g) = weighted_cross_entropy(&y, &targets, &cfg.class_weights)?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            correct += (0..chunk.len()).filter(|&i| argmax(y.outer(i)) == targets[i]).count();
            if cfg.mixed_precision {
                g.scale(scaler.scale as f32);
            }
            model.backward(&g)?;
            if cfg.mixed_precision {
                let finite = scaler.unscale(&mut model);
                scaler.update(!finite);
                if !finite {
                    skipped += 1;
                    continue;
                }
            }
            clip_grad_norm(&mut model, cfg.grad_clip_norm);
            max_norm = max_norm.max(grad_norm(&mut model));
            opt.step(&mut model, lr);
        }
        let train_loss = loss_sum / seen as f64;
        let train_acc = correct as f64 / seen as f64;

        let val_logits = predict_logits(&mut model, &val_videos, cfg.eval_batch_size, precision)?;
        let (val_loss, val_acc) = score(&val_logits, &val_truth, &cfg.class_weights)?;
        state = early_stop_step(state, val_acc, cfg);
        if state.last_improved {
            let meta = CheckpointMeta {
                config: job.model.clone(),
                epoch,
                val_accuracy: 100.0 * val_acc,
                rng_state: RngState { seed: cfg.seed, next_epoch: epoch + 1 },
            };
            save_checkpoint(&mut model, &meta, &ckpt_path)?;
            best_meta = Some(meta);
        }
        let improved = state.last_improved;
        state = overfit_guard_step(state, train_acc, improved, cfg);
        if cfg.use_plateau_scheduler {
            state = plateau_scheduler_step(state, val_loss, cfg);
        }
        if !state.stopped() && state.epoch >= cfg.max_epochs {
            state.stop_reason = StopReason::MaxEpochs;
        }
        epochs.push(EpochMetrics {
            epoch,
            train_loss,
            train_acc,
            val_loss,
            val_acc,
            lr,
            stop_reason: state.stop_reason,
            max_clipped_grad_norm: max_norm,
            skipped_steps: skipped,
        });
        write_epochs_csv(&csv_path, &epochs)?;
    }

    let best = best_meta.expect("the first epoch always improves on -inf");
    let (mut best_model, _) = load_checkpoint_for::<f32>(&ckpt_path, job.model)?;
    let val_predictions = predict_samples(&mut best_model, &val_set, cfg.eval_batch_size, precision)?;
    let test_predictions = predict_samples(&mut best_model, &test_set, cfg.eval_batch_size, precision)?;
    Ok(TrainOutcome { checkpoint: ckpt_path, best, epochs, state, audit, val_predictions, test_predictions })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn cross_entropy_examples() {
        let w = [1.0; 3];
        for t in 0..3 {
            let (l, _) = weighted_cross_entropy(&Tensor::<f64>::zeros(&[1, 3]), &[t], &w).unwrap();
            assert!((l - 3f64.ln()).abs() < 1e-12);
        }
        let sat = Tensor::from_vec(&[1, 3], vec![30.0, -30.0, -30.0]).unwrap();
        assert!(weighted_cross_entropy::<f64>(&sat, &[0], &w).unwrap().0 < 1e-20);
        let (l, _) = weighted_cross_entropy(&Tensor::<f64>::zeros(&[1, 3]), &[1], &[1.0, 2.0, 1.0]).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-12);
        assert!(weighted_cross_entropy(&Tensor::<f64>::zeros(&[1, 3]), &[3], &w).is_err());
    }

    #[test]
    fn cross_entropy_weights_and_gradient() {
        // Two samples, weights (1, 2, 1): loss = (1*l0 + 2*l1) / 3.
        let logits = Tensor::from_vec(&[2, 3], vec![0.2, -0.4, 1.1, 0.7, 0.1, -0.3]).unwrap();
        let w = [1.0, 2.0, 1.0];
        let nll = |row: &[f64], t: usize| {
            let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
            lse - row[t]
        };
        let want = (nll(&[0.2, -0.4, 1.1], 0) + 2.0 * nll(&[0.7, 0.1, -0.3], 1)) / 3.0;
        let (l, g) = weighted_cross_entropy::<f64>(&logits, &[0, 1], &w).unwrap();
        assert!((l - want).abs() < 1e-12);
        for i in 0..6 {
            let h = 1e-6;
            let mut p = logits.clone();
            p.data_mut()[i] += h;
            let mut m = logits.clone();
            m.data_mut()[i] -= h;
            let fd = (weighted_cross_entropy::<f64>(&p, &[0, 1], &w).unwrap().0
                - weighted_cross_entropy::<f64>(&m, &[0, 1], &w).unwrap().0)
                / (2.0 * h);
            assert!((fd - g.data()[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn early_stop_after_patience() {
        let c = cfg();
        let mut s = TrainState::new(c.lr);
        s = early_stop_step(s, 0.5, &c);
        for e in 2..=21 {
            assert!(!s.stopped(), "stopped before epoch {e}");
            s = early_stop_step(s, if e % 2 == 0 { 0.5 } else { 0.3 }, &c);
        }
        assert_eq!(s.stop_reason, StopReason::EarlyStop);
        assert_eq!((s.epoch, s.best_epoch, s.best_val_acc), (21, 1, 0.5));

        let mut s = TrainState::new(c.lr);
        for e in 0..150 {
            s = early_stop_step(s, e as f64 / 150.0, &c);
            assert!(!s.stopped());
        }
    }

    #[test]
    fn overfit_guard_examples() {
        let c = cfg();
        let mut s = TrainState::new(c.lr);
        for e in 1..=10 {
            assert!(!s.stopped());
            s = overfit_guard_step(s, 0.95, false, &c);
            assert_eq!(s.stopped(), e == 10);
        }
        let mut s = TrainState::new(c.lr);
        for _ in 0..50 {
            s = overfit_guard_step(s, 0.85, false, &c);
        }
        assert!(!s.stopped());
        let mut s = TrainState::new(c.lr);
        for e in 1..=12 {
            s = overfit_guard_step(s, 0.95, e == 9, &c);
        }
        assert!(!s.stopped());
        assert_eq!(s.overfit_streak, 3);
    }

    #[test]
    fn plateau_examples() {
        let c = cfg();
        let mut s = TrainState::new(1e-5);
        s = plateau_scheduler_step(s, 1.0, &c);
        for _ in 0..5 {
            assert_eq!(s.lr_current, 1e-5);
            s = plateau_scheduler_step(s, 1.0, &c);
        }
        assert_eq!(s.lr_current, 5e-6);
        for _ in 0..5 {
            s = plateau_scheduler_step(s, 1.2, &c);
        }
        assert_eq!(s.lr_current, 2.5e-6);
        let mut s = TrainState::new(1e-5);
        for e in 0..20 {
            s = plateau_scheduler_step(s, 1.0 / (e + 1) as f64, &c);
        }
        assert_eq!(s.lr_current, 1e-5);
    }

    #[test]
    fn audit_flags_leaks() {
        let fold = FoldSpec {
            fold_index: 0,
            test_ids: vec!["A".into()],
            val_ids: vec!["B".into()],
            train_ids: vec!["C".into()],
        };
        let mut a = TrainAudit::default();
        a.optimizer_patients.insert("C".into());
        a.augmented_keys.push("C/C_TV_NSR#0".into());
        assert!(a.violations(&fold).is_empty());
        a.augmented_keys.push("B/B_TV_NSR#1".into());
        a.optimizer_patients.insert("A".into());
        assert_eq!(a.violations(&fold).len(), 2);
    }
}
