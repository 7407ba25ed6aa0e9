//! Backbone pretraining, threshold fine-tuning, and evaluation.
//!
//! Training happens in two phases. First the backbone is pretrained with
//! Adam on cross-entropy alone, with reduction disabled — the stand-in for
//! downloading a pretrained checkpoint. Then [`ltmp_finetune`] runs exactly
//! one epoch of plain SGD (no momentum) on the 2L thresholds while every
//! backbone weight stays bit-identical; the loss couples cross-entropy with
//! the FLOPs-budget penalty `lambda * (r_target - r_FLOPs)^2`, computed per
//! sample and averaged over the batch.
//!
//! The merge and prune thresholds get separate learning rates: similarity
//! and importance scores live on very different scales, and the reference
//! setting keeps a 1000x ratio between the two.

use crate::data::Dataset;
use crate::flops::{r_flops_node, reg_loss_node, total_loss_node};
use crate::model::{
    model_forward, Checkpoint, ExecMode, ModelConfig, ModelError, ReductionOrder, TrainableSet,
    VitParams,
};
use crate::reduction::ThresholdSet;
use crate::rng::{derive_seed, Rng};
use crate::tape::{Gradients, MaskMode, TapeError};
use crate::tensor::{Tensor, TensorError};
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("train config: {0}")]
    Config(String),
    #[error("loss diverged to {loss} at step {step}")]
    Diverged { step: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tape(#[from] TapeError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Hyperparameters shared by both phases.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainConfig {
    /// Pretraining epochs; the threshold phase always runs exactly one.
    pub epochs: usize,
    pub batch_size: usize,
    /// Adam rate for the backbone phase.
    pub lr_backbone: f64,
    /// SGD rate for the merge thresholds.
    pub lr_merge: f64,
    /// SGD rate for the prune thresholds (reference setting keeps the
    /// 1000x merge:prune ratio).
    pub lr_prune: f64,
    /// Budget-loss weight.
    pub lambda: f64,
    /// Desired fraction of baseline block FLOPs, in (0, 1].
    pub r_target: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            lr_backbone: 1e-3,
            lr_merge: 5e-3,
            lr_prune: 5e-6,
            lambda: 10.0,
            r_target: 0.7,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch_size must be positive".into()));
        }
        for (name, v) in [
            ("lr_backbone", self.lr_backbone),
            ("lr_merge", self.lr_merge),
            ("lr_prune", self.lr_prune),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TrainError::Config(format!("{name} must be positive")));
            }
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(TrainError::Config("lambda must be non-negative".into()));
        }
        Ok(())
    }

    fn validate_r_target(&self) -> Result<(), TrainError> {
        if !(self.r_target > 0.0 && self.r_target <= 1.0) {
            return Err(TrainError::Config(format!(
                "r_target must lie in (0, 1], got {}",
                self.r_target
            )));
        }
        Ok(())
    }
}

/// Adam with the usual bias correction; state per parameter slot.
struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    fn new(lr: f64, params: &[&Tensor]) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
            v: params.iter().map(|p| Tensor::zeros(p.shape())).collect(),
        }
    }

    fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for i in 0..pd.len() {
                let gi = g.data()[i];
                md[i] = self.beta1 * md[i] + (1.0 - self.beta1) * gi;
                vd[i] = self.beta2 * vd[i] + (1.0 - self.beta2) * gi * gi;
                let mhat = md[i] / bc1;
                let vhat = vd[i] / bc2;
                pd[i] -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Accumulates per-slot gradients over a batch.
struct GradAccum {
    sums: Vec<Tensor>,
}

impl GradAccum {
    fn new(shapes: &[&Tensor]) -> Self {
        GradAccum {
            sums: shapes.iter().map(|t| Tensor::zeros(t.shape())).collect(),
        }
    }

    fn add(&mut self, grads: &Gradients) -> Result<(), TrainError> {
        for (slot, sum) in self.sums.iter_mut().enumerate() {
            if let Some(g) = grads.get(slot) {
                *sum = sum.add(g)?;
            }
        }
        Ok(())
    }

    fn into_means(self, count: usize) -> Vec<Tensor> {
        let inv = 1.0 / count as f64;
        self.sums.into_iter().map(|t| t.scale(inv)).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
}

pub struct PretrainResult {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochStats>,
}

/// Trains all backbone weights with cross-entropy; reduction must be
/// disabled. The returned checkpoint holds the epoch with the best (earliest
/// on ties) validation accuracy, or the final epoch when no validation set is
/// given. Deterministic for a fixed seed: initialisation, shuffling, and
/// arithmetic all flow from splitmix-derived streams.
pub fn pretrain_backbone(
    train: &Dataset,
    val: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<PretrainResult, TrainError> {
    cfg.validate()?;
    model_cfg.validate()?;
    if model_cfg.reduction_order != ReductionOrder::None {
        return Err(TrainError::Config(
            "pretraining requires reduction_order = none".into(),
        ));
    }
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let mut init_rng = Rng::seeded(derive_seed(cfg.seed, 0xB0));
    let mut params = VitParams::init(model_cfg, &mut init_rng);
    let thresholds = ThresholdSet::init(model_cfg.blocks);
    let mut shuffle_rng = Rng::seeded(derive_seed(cfg.seed, 0xDA));

    let mut adam = Adam::new(cfg.lr_backbone, &params.tensors());
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0usize;
    let mut best: Option<(u64, EpochStats, VitParams)> = None;

    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        shuffle_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_samples = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut accum = GradAccum::new(&params.tensors());
            let mut batch_loss = 0.0;
            for &idx in batch {
                let image = train.image_tensor(idx);
                let fwd = model_forward(
                    &image,
                    model_cfg,
                    &params,
                    &thresholds,
                    ExecMode::Train,
                    MaskMode::Hard,
                    TrainableSet::Backbone,
                )?;
                let mut tape = fwd.tape;
                let ce = tape.cross_entropy(fwd.logits, train.label(idx))?;
                let loss = tape.value(ce).item();
                batch_loss += loss;
                accum.add(&tape.backward(ce)?)?;
            }
            let mean_loss = batch_loss / batch.len() as f64;
            if !mean_loss.is_finite() {
                return Err(TrainError::Diverged {
                    step,
                    loss: mean_loss,
                });
            }
            let grads = accum.into_means(batch.len());
            adam.step(&mut params.tensors_mut(), &grads);
            epoch_loss += batch_loss;
            epoch_samples += batch.len();
            step += 1;
        }
        let train_loss = epoch_loss / epoch_samples as f64;
        let partial = Checkpoint {
            config: model_cfg.clone(),
            params: params.clone(),
            thresholds: thresholds.clone(),
            seed: cfg.seed,
            step: step as u64,
            metrics: vec![],
        };
        let val_acc = if val.is_empty() {
            f64::NAN
        } else {
            evaluate(&partial, val, ExecMode::Train)?.top1
        };
        log::info!(
            "pretrain epoch {epoch}/{}: train_loss {train_loss:.4}, val_acc {val_acc:.4}",
            cfg.epochs
        );
        let stats = EpochStats {
            epoch,
            train_loss,
            val_acc,
        };
        if val_acc.is_finite() && best.as_ref().is_none_or(|(_, b, _)| val_acc > b.val_acc) {
            best = Some((step as u64, stats.clone(), partial.params));
        }
        history.push(stats);
    }

    let (step, stats, params) = match best {
        Some((s, stats, p)) => (s, Some(stats), p),
        None => (step as u64, history.last().cloned(), params),
    };
    let mut metrics = Vec::new();
    if let Some(stats) = stats {
        log::info!(
            "pretrain kept epoch {}: train_loss {:.4}, val_acc {:.4}",
            stats.epoch,
            stats.train_loss,
            stats.val_acc
        );
        metrics.push(("train_loss".to_string(), stats.train_loss));
        metrics.push(("val_acc".to_string(), stats.val_acc));
    }
    Ok(PretrainResult {
        checkpoint: Checkpoint {
            config: model_cfg.clone(),
            params,
            thresholds,
            seed: cfg.seed,
            step,
            metrics,
        },
        history,
    })
}

pub struct FinetuneResult {
    pub checkpoint: Checkpoint,
    /// Batch-mean r_FLOPs after every SGD step, in step order.
    pub r_trajectory: Vec<f64>,
}

/// One epoch of SGD (no momentum) on the 2L thresholds; the backbone is
/// never touched — its weights enter the tape as constants, so no weight
/// gradient is even materialised.
pub fn ltmp_finetune(
    ckpt: &Checkpoint,
    train: &Dataset,
    cfg: &TrainConfig,
) -> Result<FinetuneResult, TrainError> {
    cfg.validate()?;
    cfg.validate_r_target()?;
    if train.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let model_cfg = &ckpt.config;
    if !model_cfg.reduction_order.merges() && !model_cfg.reduction_order.prunes() {
        return Err(TrainError::Config(format!(
            "reduction_order {} has nothing to train",
            model_cfg.reduction_order
        )));
    }
    if model_cfg.reduction_order.is_topk() {
        return Err(TrainError::Config(
            "topk reduction has no learnable thresholds".into(),
        ));
    }

    let mut thresholds = ckpt.thresholds.clone();
    let n = model_cfg.n_tokens();
    let d = model_cfg.embed_dim;
    let mut shuffle_rng = Rng::seeded(derive_seed(cfg.seed, 0x17));
    let mut order: Vec<usize> = (0..train.len()).collect();
    shuffle_rng.shuffle(&mut order);

    let mut r_trajectory = Vec::new();
    let mut step = 0usize;
    for batch in order.chunks(cfg.batch_size) {
        let blocks = model_cfg.blocks;
        let mut grad_m = vec![0.0; blocks];
        let mut grad_p = vec![0.0; blocks];
        let mut batch_r = 0.0;
        let mut batch_loss = 0.0;
        for &idx in batch {
            let image = train.image_tensor(idx);
            let fwd = model_forward(
                &image,
                model_cfg,
                &ckpt.params,
                &thresholds,
                ExecMode::Train,
                MaskMode::Hard,
                TrainableSet::Thresholds,
            )?;
            let mut tape = fwd.tape;
            let ce = tape.cross_entropy(fwd.logits, train.label(idx))?;
            let r = r_flops_node(&mut tape, &fwd.mask_means, n, d)?;
            let reg = reg_loss_node(&mut tape, r, cfg.r_target)?;
            let loss = total_loss_node(&mut tape, ce, reg, cfg.lambda)?;
            let loss_value = tape.value(loss).item();
            if !loss_value.is_finite() {
                return Err(TrainError::Diverged {
                    step,
                    loss: loss_value,
                });
            }
            batch_loss += loss_value;
            batch_r += tape.value(r).item();
            let grads = tape.backward(loss)?;
            for l in 0..blocks {
                if let Some(g) = grads.get(2 * l) {
                    grad_m[l] += g.item();
                }
                if let Some(g) = grads.get(2 * l + 1) {
                    grad_p[l] += g.item();
                }
            }
        }
        let inv = 1.0 / batch.len() as f64;
        for l in 0..blocks {
            thresholds.theta_merge[l] -= cfg.lr_merge * grad_m[l] * inv;
            thresholds.theta_prune[l] -= cfg.lr_prune * grad_p[l] * inv;
        }
        let mean_r = batch_r * inv;
        r_trajectory.push(mean_r);
        step += 1;
        log::debug!(
            "ltmp step {step}: loss {:.4}, batch mean r {:.4}",
            batch_loss * inv,
            mean_r
        );
    }

    let final_r = r_trajectory.last().copied().unwrap_or(1.0);
    log::info!(
        "ltmp finetune: {} steps, r_target {}, final batch r {final_r:.4}",
        r_trajectory.len(),
        cfg.r_target
    );
    Ok(FinetuneResult {
        checkpoint: Checkpoint {
            config: model_cfg.clone(),
            params: ckpt.params.clone(),
            thresholds,
            seed: cfg.seed,
            step: ckpt.step + step as u64,
            metrics: vec![
                ("r_target".to_string(), cfg.r_target),
                ("final_batch_r".to_string(), final_r),
            ],
        },
        r_trajectory,
    })
}

/// Evaluation metrics over one split.
#[derive(Clone, Debug, Serialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub top1: f64,
    pub mean_r_flops: f64,
    /// Mean kept-token count after each block.
    pub mean_tokens_per_layer: Vec<f64>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Runs the model over a split and reports accuracy, the mean FLOPs
/// reduction factor, and mean kept tokens per layer. Inference mode gathers
/// tokens sample by sample (batch 1); train mode carries masks — both give
/// the same numbers, which is itself a tested invariant.
pub fn evaluate(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    mode: ExecMode,
) -> Result<EvalMetrics, TrainError> {
    if dataset.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let cfg = &ckpt.config;
    let mut correct = 0usize;
    let mut r_sum = 0.0;
    let mut tokens = vec![0.0; cfg.blocks];
    for idx in 0..dataset.len() {
        let image = dataset.image_tensor(idx);
        let fwd = model_forward(
            &image,
            cfg,
            &ckpt.params,
            &ckpt.thresholds,
            mode,
            MaskMode::Hard,
            TrainableSet::Frozen,
        )?;
        if argmax(fwd.tape.value(fwd.logits).data()) == dataset.label(idx) {
            correct += 1;
        }
        r_sum += crate::flops::r_flops_value(&fwd.mask_mean_values, cfg.n_tokens(), cfg.embed_dim);
        for (l, layer) in fwd.trace.layers.iter().enumerate() {
            tokens[l] += layer.kept_after.len() as f64;
        }
    }
    let n = dataset.len() as f64;
    Ok(EvalMetrics {
        samples: dataset.len(),
        top1: correct as f64 / n,
        mean_r_flops: r_sum / n,
        mean_tokens_per_layer: tokens.into_iter().map(|t| t / n).collect(),
    })
}

/// Appendix-style robustness harness: repeats the threshold phase across
/// seeds and reports the accuracy and r spread. Nothing is asserted — the
/// point is the report.
#[derive(Clone, Debug, Serialize)]
pub struct SeedVariance {
    pub seeds: Vec<u64>,
    pub accuracies: Vec<f64>,
    pub r_values: Vec<f64>,
    pub acc_range: f64,
    pub r_range: f64,
}

pub fn seed_variance(
    ckpt: &Checkpoint,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    seeds: &[u64],
) -> Result<SeedVariance, TrainError> {
    let mut accuracies = Vec::with_capacity(seeds.len());
    let mut r_values = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let run_cfg = TrainConfig { seed, ..cfg.clone() };
        let tuned = ltmp_finetune(ckpt, train, &run_cfg)?;
        let metrics = evaluate(&tuned.checkpoint, val, ExecMode::Inference)?;
        accuracies.push(metrics.top1);
        r_values.push(metrics.mean_r_flops);
    }
    let range = |v: &[f64]| {
        v.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
            - v.iter().cloned().fold(f64::INFINITY, f64::min)
    };
    Ok(SeedVariance {
        seeds: seeds.to_vec(),
        acc_range: range(&accuracies),
        r_range: range(&r_values),
        accuracies,
        r_values,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, Split, SynthDatasetSpec};
    use crate::model::ImportanceKind;
    use crate::reduction::MergeWeighting;

    fn tiny_model() -> ModelConfig {
        ModelConfig {
            image_size: 16,
            patch_size: 4,
            channels: 3,
            embed_dim: 16,
            heads: 2,
            blocks: 2,
            mlp_ratio: 2,
            classes: 4,
            reduction_order: ReductionOrder::None,
            importance_score: ImportanceKind::MeanColumn,
            topk_k: 2,
            merge_weighting: MergeWeighting::SizeWeighted,
        }
    }

    fn tiny_data(samples: usize, seed: u64) -> Dataset {
        generate(
            &SynthDatasetSpec {
                classes: 4,
                image_size: 16,
                samples,
                noise: 0.1,
                seed,
            },
            Split::Train,
        )
        .unwrap()
    }

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr_backbone: 1e-3,
            lr_merge: 1e-2,
            lr_prune: 1e-5,
            lambda: 10.0,
            r_target: 0.7,
            seed: 3,
        }
    }

    #[test]
    fn zero_epochs_returns_untouched_init() {
        let data = tiny_data(8, 1);
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny_train_cfg()
        };
        let out = pretrain_backbone(&data, &data, &tiny_model(), &cfg).unwrap();
        let mut rng = Rng::seeded(derive_seed(cfg.seed, 0xB0));
        let fresh = VitParams::init(&tiny_model(), &mut rng);
        assert_eq!(out.checkpoint.params.checksum(), fresh.checksum());
        assert_eq!(out.checkpoint.step, 0);
        assert!(out.history.is_empty());
    }

    #[test]
    fn pretrain_is_deterministic_and_learns() {
        let data = tiny_data(24, 2);
        let cfg = TrainConfig {
            epochs: 2,
            ..tiny_train_cfg()
        };
        let a = pretrain_backbone(&data, &data, &tiny_model(), &cfg).unwrap();
        let b = pretrain_backbone(&data, &data, &tiny_model(), &cfg).unwrap();
        assert_eq!(
            a.checkpoint.params.checksum(),
            b.checkpoint.params.checksum()
        );
        assert_eq!(a.history.len(), 2);
        assert_eq!(
            a.history.last().unwrap().train_loss,
            b.history.last().unwrap().train_loss
        );
        // Two epochs of Adam on 24 samples must at least move the loss.
        assert!(a.history[1].train_loss < a.history[0].train_loss);
    }

    #[test]
    fn pretrain_rejects_reduction() {
        let data = tiny_data(8, 1);
        let mut cfg = tiny_model();
        cfg.reduction_order = ReductionOrder::Ltmp;
        assert!(pretrain_backbone(&data, &data, &cfg, &tiny_train_cfg()).is_err());
    }

    #[test]
    fn pretrain_keeps_best_validation_epoch() {
        let data = tiny_data(24, 2);
        let cfg = TrainConfig {
            epochs: 3,
            ..tiny_train_cfg()
        };
        let out = pretrain_backbone(&data, &data, &tiny_model(), &cfg).unwrap();
        let best = out
            .history
            .iter()
            .map(|s| s.val_acc)
            .fold(f64::NEG_INFINITY, f64::max);
        let kept = out
            .checkpoint
            .metrics
            .iter()
            .find(|(k, _)| k == "val_acc")
            .map(|(_, v)| *v)
            .unwrap();
        assert_eq!(kept, best);
        // The kept weights must reproduce the kept metric when re-evaluated.
        let again = evaluate(&out.checkpoint, &data, ExecMode::Train).unwrap();
        assert_eq!(again.top1, kept);
    }

    #[test]
    fn finetune_validates_r_target() {
        let data = tiny_data(8, 1);
        let pre = pretrain_backbone(
            &data,
            &data,
            &tiny_model(),
            &TrainConfig {
                epochs: 0,
                ..tiny_train_cfg()
            },
        )
        .unwrap();
        let mut ckpt = pre.checkpoint;
        ckpt.config.reduction_order = ReductionOrder::Ltmp;
        for bad in [0.0, -0.5, 1.2] {
            let cfg = TrainConfig {
                r_target: bad,
                ..tiny_train_cfg()
            };
            assert!(ltmp_finetune(&ckpt, &data, &cfg).is_err(), "r_target {bad}");
        }
    }

    #[test]
    fn finetune_touches_only_thresholds() {
        let data = tiny_data(16, 4);
        let pre = pretrain_backbone(&data, &data, &tiny_model(), &tiny_train_cfg()).unwrap();
        let mut ckpt = pre.checkpoint;
        ckpt.config.reduction_order = ReductionOrder::Ltmp;
        let before = ckpt.params.checksum();
        let cfg = TrainConfig {
            r_target: 0.6,
            lr_merge: 0.05,
            lr_prune: 5e-5,
            ..tiny_train_cfg()
        };
        let out = ltmp_finetune(&ckpt, &data, &cfg).unwrap();
        assert_eq!(
            out.checkpoint.params.checksum(),
            before,
            "backbone is bit-identical"
        );
        assert_eq!(out.r_trajectory.len(), 2, "16 samples / batch 8");
        assert_ne!(
            out.checkpoint.thresholds,
            ckpt.thresholds,
            "thresholds moved"
        );
    }

    #[test]
    fn finetune_at_full_budget_stays_near_init() {
        let data = tiny_data(16, 5);
        let pre = pretrain_backbone(&data, &data, &tiny_model(), &tiny_train_cfg()).unwrap();
        let mut ckpt = pre.checkpoint;
        ckpt.config.reduction_order = ReductionOrder::Ltmp;
        let cfg = TrainConfig {
            r_target: 1.0,
            ..tiny_train_cfg()
        };
        let out = ltmp_finetune(&ckpt, &data, &cfg).unwrap();
        let metrics = evaluate(&out.checkpoint, &data, ExecMode::Inference).unwrap();
        assert!(
            metrics.mean_r_flops >= 0.98,
            "full budget keeps r at {}",
            metrics.mean_r_flops
        );
    }

    #[test]
    fn finetune_rejects_untrainable_orders() {
        let data = tiny_data(8, 1);
        let pre = pretrain_backbone(
            &data,
            &data,
            &tiny_model(),
            &TrainConfig {
                epochs: 0,
                ..tiny_train_cfg()
            },
        )
        .unwrap();
        for order in [ReductionOrder::None, ReductionOrder::TopkBoth] {
            let mut ckpt = pre.checkpoint.clone();
            ckpt.config.reduction_order = order;
            assert!(
                ltmp_finetune(&ckpt, &data, &tiny_train_cfg()).is_err(),
                "{order}"
            );
        }
    }

    #[test]
    fn evaluate_baseline_has_unit_r_and_full_tokens() {
        let data = tiny_data(12, 6);
        let pre = pretrain_backbone(&data, &data, &tiny_model(), &tiny_train_cfg()).unwrap();
        let metrics = evaluate(&pre.checkpoint, &data, ExecMode::Inference).unwrap();
        assert_eq!(metrics.mean_r_flops, 1.0);
        let n = tiny_model().n_tokens() as f64;
        assert!(metrics.mean_tokens_per_layer.iter().all(|&t| t == n));
        assert_eq!(metrics.samples, 12);
    }

    #[test]
    fn evaluate_agrees_between_masked_and_dropped_modes() {
        let data = tiny_data(10, 8);
        let pre = pretrain_backbone(&data, &data, &tiny_model(), &tiny_train_cfg()).unwrap();
        let mut ckpt = pre.checkpoint;
        ckpt.config.reduction_order = ReductionOrder::Ltmp;
        for l in 0..ckpt.config.blocks {
            ckpt.thresholds.theta_merge[l] = 0.6;
            ckpt.thresholds.theta_prune[l] = 0.04;
        }
        let masked = evaluate(&ckpt, &data, ExecMode::Train).unwrap();
        let dropped = evaluate(&ckpt, &data, ExecMode::Inference).unwrap();
        assert_eq!(masked.top1, dropped.top1);
        assert_eq!(masked.mean_r_flops, dropped.mean_r_flops);
        assert_eq!(
            masked.mean_tokens_per_layer,
            dropped.mean_tokens_per_layer
        );
    }

    #[test]
    fn evaluate_rejects_empty_dataset() {
        let data = tiny_data(4, 1);
        let empty = Dataset {
            height: 16,
            width: 16,
            channels: 3,
            pixels: vec![],
            labels: vec![],
        };
        let pre = pretrain_backbone(
            &data,
            &data,
            &tiny_model(),
            &TrainConfig {
                epochs: 0,
                ..tiny_train_cfg()
            },
        )
        .unwrap();
        assert!(matches!(
            evaluate(&pre.checkpoint, &empty, ExecMode::Train),
            Err(TrainError::EmptyDataset)
        ));
    }

    #[test]
    fn seed_variance_reports_ranges() {
        let data = tiny_data(8, 9);
        let pre = pretrain_backbone(&data, &data, &tiny_model(), &tiny_train_cfg()).unwrap();
        let mut ckpt = pre.checkpoint;
        ckpt.config.reduction_order = ReductionOrder::Ltmp;
        let report = seed_variance(&ckpt, &data, &data, &tiny_train_cfg(), &[1, 2]).unwrap();
        assert_eq!(report.accuracies.len(), 2);
        assert!(report.acc_range >= 0.0);
        assert!(report.r_range >= 0.0);
    }
}
