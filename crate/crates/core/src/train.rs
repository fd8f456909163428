//! Mini-batch AdamW training with warmup + cosine schedule, label-smoothed
//! cross-entropy, top-k evaluation and per-epoch checkpoints.

use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{augment, AugmentConfig, Dataset};
use crate::error::{CvsError, Result};
use crate::model::Model;
use crate::optim::{cosine_lr, OptimizerState};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor4D};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub seed: u64,
    pub augment: AugmentConfig,
    /// Use only the first N training items (desk-scale experiments).
    pub train_limit: Option<usize>,
    pub val_limit: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            warmup_epochs: 2,
            batch_size: 128,
            eval_batch_size: 250,
            base_lr: 1e-3,
            weight_decay: 0.05,
            label_smoothing: 0.1,
            seed: 0,
            augment: AugmentConfig::default(),
            train_limit: None,
            val_limit: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |d: String| Err(CvsError::config("train", d));
        if self.epochs > 0 && self.warmup_epochs >= self.epochs {
            return bad(format!("warmup_epochs {} must be below epochs {}", self.warmup_epochs, self.epochs));
        }
        if self.batch_size == 0 || self.eval_batch_size == 0 {
            return bad("batch sizes must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if !(self.base_lr > 0.0) || self.weight_decay < 0.0 {
            return bad("base_lr must be positive and weight_decay non-negative".into());
        }
        Ok(())
    }
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1: f64,
    pub train_top5: f64,
    pub val_loss: Option<f64>,
    pub val_top1: Option<f64>,
    pub val_top5: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub count: usize,
    pub loss: f64,
    /// Percentages.
    pub top1: f64,
    pub top5: f64,
}

/// Rank of `label` among the logits of one row: the number of classes
/// scoring higher, counting ties against higher class indices.
fn label_rank(row: &[f32], label: usize) -> usize {
    let target = row[label];
    row.iter()
        .enumerate()
        .filter(|&(c, &v)| v > target || (v == target && c < label))
        .count()
}

/// Counts of rows whose label ranks within the top 1 and top 5.
pub fn topk_counts(logits: &Tensor4D<f32>, labels: &[usize]) -> Result<(usize, usize)> {
    let s = logits.shape();
    if s.n != labels.len() || s.h * s.w != 1 {
        return Err(CvsError::shape("topk", format!("logits {s} for {} labels", labels.len())));
    }
    let mut top1 = 0;
    let mut top5 = 0;
    for (i, &l) in labels.iter().enumerate() {
        if l >= s.c {
            return Err(CvsError::arg("topk", format!("label {l} out of range for {} classes", s.c)));
        }
        let r = label_rank(logits.item(i), l);
        top1 += (r < 1) as usize;
        top5 += (r < 5) as usize;
    }
    Ok((top1, top5))
}

fn percent(k: usize, n: usize) -> f64 {
    100.0 * k as f64 / n as f64
}

pub fn evaluate(model: &Model<f32>, ds: &Dataset, batch_size: usize, limit: Option<usize>) -> Result<EvalMetrics> {
    let n = limit.map_or(ds.len(), |l| l.min(ds.len()));
    if n == 0 {
        return Err(CvsError::Dataset("evaluation split is empty".into()));
    }
    let mut loss_sum = 0.0;
    let (mut c1, mut c5) = (0, 0);
    let indices: Vec<usize> = (0..n).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (images, labels) = ds.load_batch(chunk)?;
        let mut tape = Tape::new();
        let x = tape.input(images);
        let out = model.forward(&mut tape, x)?;
        let loss = tape.smoothed_cross_entropy(out.logits, &labels, 0.0)?;
        loss_sum += tape.value(loss).item(0)[0] as f64 * chunk.len() as f64;
        let (a, b) = topk_counts(tape.value(out.logits), &labels)?;
        c1 += a;
        c5 += b;
    }
    Ok(EvalMetrics { count: n, loss: loss_sum / n as f64, top1: percent(c1, n), top5: percent(c5, n) })
}

/// Where training artifacts go; `None` keeps everything in memory.
#[derive(Clone, Debug, Default)]
pub struct TrainOutputs {
    pub dir: Option<PathBuf>,
}

impl TrainOutputs {
    pub fn metrics_path(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("metrics.jsonl"))
    }

    pub fn epoch_checkpoint(&self, epoch: usize) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join(format!("epoch_{epoch:03}.ckpt")))
    }

    pub fn best_checkpoint(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("best.ckpt"))
    }
}

#[derive(Clone, Debug)]
pub enum Progress {
    Step { epoch: usize, step: usize, steps: usize, loss: f64 },
    Epoch(EpochMetrics),
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<EpochMetrics>,
    pub best_epoch: Option<usize>,
    pub steps: u64,
}

/// Per-epoch training order.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546_464c_4521);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

fn augmented_batch(ds: &Dataset, idx: &[usize], cfg: &TrainConfig, epoch: usize) -> Result<(Tensor4D<f32>, Vec<usize>)> {
    let (images, labels) = ds.load_batch(idx)?;
    if !cfg.augment.enabled {
        return Ok((images, labels));
    }
    let items: Vec<Tensor4D<f32>> = idx
        .par_iter()
        .enumerate()
        .map(|(i, &global)| augment(&images.batch_item(i), &cfg.augment, cfg.seed, epoch as u64, global as u64))
        .collect();
    Ok((Tensor4D::stack_batch(&items)?, labels))
}

pub fn train(model: &mut Model<f32>, train_set: &Dataset, val_set: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with_progress(model, train_set, val_set, cfg, &TrainOutputs::default(), &mut |_| {})
}

pub fn train_with_progress(
    model: &mut Model<f32>,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    cfg: &TrainConfig,
    outputs: &TrainOutputs,
    progress: &mut dyn FnMut(&Progress),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let classes = model.config.head.classes;
    if train_set.classes() > classes {
        return Err(CvsError::config("train", format!("dataset has {} classes, head has {classes}", train_set.classes())));
    }
    let n = cfg.train_limit.map_or(train_set.len(), |l| l.min(train_set.len()));
    if cfg.epochs > 0 && n == 0 {
        return Err(CvsError::Dataset("training split is empty".into()));
    }
    let mut metrics_file = match outputs.metrics_path() {
        Some(p) => {
            std::fs::create_dir_all(p.parent().unwrap()).map_err(|e| CvsError::io(&p, e))?;
            Some((std::fs::File::create(&p).map_err(|e| CvsError::io(&p, e))?, p))
        }
        None => None,
    };

    let mut opt = OptimizerState::new(&model.params, cfg.base_lr, cfg.weight_decay);
    let mut log = Vec::new();
    let mut best: Option<(f64, usize)> = None;
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    for epoch in 0..cfg.epochs {
        opt.lr = cosine_lr(epoch, cfg.epochs, cfg.warmup_epochs, cfg.base_lr);
        let order = epoch_order(n, cfg.seed, epoch);
        let (mut loss_sum, mut c1, mut c5) = (0.0, 0, 0);
        for (step, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (images, labels) = augmented_batch(train_set, idx, cfg, epoch)?;
            model.params.zero_grad();
            let mut tape = Tape::new();
            let x = tape.input(images);
            let out = model.forward(&mut tape, x)?;
            let loss = tape.smoothed_cross_entropy(out.logits, &labels, cfg.label_smoothing)?;
            let loss_value = tape.value(loss).item(0)[0] as f64;
            if !loss_value.is_finite() {
                let culprit = tape.first_non_finite().unwrap_or_else(|| "loss".to_string());
                return Err(CvsError::NonFinite(format!("epoch {epoch} step {step}: first non-finite tensor is {culprit}")));
            }
            tape.backward(loss, &mut model.params)?;
            opt.step(&mut model.params)?;
            if let Some(name) = model.params.first_non_finite() {
                return Err(CvsError::NonFinite(format!("epoch {epoch} step {step}: parameter {name} after update")));
            }
            let (a, b) = topk_counts(tape.value(out.logits), &labels)?;
            c1 += a;
            c5 += b;
            loss_sum += loss_value * idx.len() as f64;
            progress(&Progress::Step { epoch, step, steps: steps_per_epoch, loss: loss_value });
        }
        let val = match val_set {
            Some(v) => Some(evaluate(model, v, cfg.eval_batch_size, cfg.val_limit)?),
            None => None,
        };
        let m = EpochMetrics {
            epoch,
            lr: opt.lr,
            train_loss: loss_sum / n as f64,
            train_top1: percent(c1, n),
            train_top5: percent(c5, n),
            val_loss: val.as_ref().map(|v| v.loss),
            val_top1: val.as_ref().map(|v| v.top1),
            val_top5: val.as_ref().map(|v| v.top5),
        };
        if let Some((file, path)) = metrics_file.as_mut() {
            writeln!(file, "{}", serde_json::to_string(&m)?).map_err(|e| CvsError::io(path.as_path(), e))?;
        }
        if let Some(p) = outputs.epoch_checkpoint(epoch) {
            checkpoint::save(model, &p)?;
        }
        let score = m.val_top1.unwrap_or(m.train_top1);
        if best.is_none_or(|(s, _)| score > s) {
            best = Some((score, epoch));
            if let Some(p) = outputs.best_checkpoint() {
                checkpoint::save(model, &p)?;
            }
        }
        progress(&Progress::Epoch(m.clone()));
        log.push(m);
    }
    Ok(TrainOutcome { log, best_epoch: best.map(|b| b.1), steps: opt.step_count() })
}

/// Reads a metrics log written by [`train_with_progress`].
pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let text = std::fs::read_to_string(path).map_err(|e| CvsError::io(path, e))?;
    text.lines().filter(|l| !l.trim().is_empty()).map(|l| Ok(serde_json::from_str(l)?)).collect()
}

/// Logits-only evaluation helper used for fixtures.
pub fn accuracy_from_logits<T: Element>(logits: &Tensor4D<T>, labels: &[usize]) -> Result<(f64, f64)> {
    if labels.is_empty() {
        return Err(CvsError::Dataset("no labels".into()));
    }
    let (a, b) = topk_counts(&logits.cast::<f32>(), labels)?;
    Ok((percent(a, labels.len()), percent(b, labels.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn ties_go_to_lowest_index() {
        let logits = Tensor4D::<f32>::zeros(Shape::new(10, 10, 1, 1));
        let labels: Vec<usize> = (0..10).collect();
        let (t1, t5) = accuracy_from_logits(&logits, &labels).unwrap();
        assert_eq!(t1, 10.0);
        assert_eq!(t5, 50.0);
    }

    #[test]
    fn hand_counted_fixture() {
        // Row-wise logits over 6 classes; labels chosen so that two rows are
        // top-1 hits and three are top-5 hits.
        let rows: [[f32; 6]; 5] = [
            [0.9, 0.1, 0.0, 0.0, 0.0, 0.0], // label 0: rank 0
            [0.1, 0.2, 0.3, 0.4, 0.5, 0.6], // label 0: rank 5
            [0.0, 1.0, 0.5, 0.0, 0.0, 0.0], // label 2: rank 1
            [0.3, 0.3, 0.3, 0.3, 0.3, 0.3], // label 5: rank 5 (ties go low)
            [0.0, 0.0, 0.0, 0.0, 2.0, 1.0], // label 4: rank 0
        ];
        let data: Vec<f32> = rows.iter().flatten().copied().collect();
        let logits = Tensor4D::from_vec(Shape::new(5, 6, 1, 1), data).unwrap();
        let (t1, t5) = accuracy_from_logits(&logits, &[0, 0, 2, 5, 4]).unwrap();
        assert_eq!(t1, 40.0);
        assert_eq!(t5, 60.0);
    }

    #[test]
    fn config_rules() {
        let mut cfg = TrainConfig { epochs: 3, warmup_epochs: 3, ..Default::default() };
        assert!(cfg.validate().is_err());
        cfg.warmup_epochs = 0;
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let zero = TrainConfig { epochs: 0, warmup_epochs: 0, ..Default::default() };
        assert!(zero.validate().is_ok());
    }

    #[test]
    fn epoch_order_is_a_seeded_permutation() {
        let a = epoch_order(50, 3, 1);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..50).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(50, 3, 1));
        assert_ne!(a, epoch_order(50, 3, 2));
    }
}
