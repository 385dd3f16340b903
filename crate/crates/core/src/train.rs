//! SGD training loop with momentum, L2 weight decay, cosine learning-rate
//! decay and global-norm gradient clipping.

use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::data::{augment, Dataset, Sample};
use crate::error::{ApvitError, Result};
use crate::model::{
    argmax, backward, forward, forward_with, init_params, ApvitConfig, ApvitParams,
    ForwardOptions, PoolingMode,
};
use crate::scalar::Scalar;
use crate::tensor::{softmax_rows, Tensor};

/// How `(k, r)` evolve during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum KrSchedule {
    Constant,
    /// From no pooling at step 0 down to the configured `(k, r)`.
    LinearDecay,
}

impl FromStr for KrSchedule {
    type Err = ApvitError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "CONSTANT" => Ok(Self::Constant),
            "LINEAR_DECAY" => Ok(Self::LinearDecay),
            other => Err(ApvitError::Config(format!("unknown kr_schedule {other:?}"))),
        }
    }
}

impl fmt::Display for KrSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "CONSTANT",
            Self::LinearDecay => "LINEAR_DECAY",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
    pub kr_schedule: KrSchedule,
    pub eval_every: usize,
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            clip_norm: 10.0,
            batch_size: 16,
            total_steps: 1000,
            seed: 0,
            kr_schedule: KrSchedule::Constant,
            eval_every: 100,
            augment: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) || !(self.clip_norm > 0.0) || self.weight_decay < 0.0 {
            return Err(ApvitError::Config(
                "base_lr and clip_norm must be positive, weight_decay non-negative".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(ApvitError::Config(format!(
                "momentum {} outside [0, 1)",
                self.momentum
            )));
        }
        if self.batch_size == 0 || self.eval_every == 0 {
            return Err(ApvitError::Config("batch_size and eval_every must be positive".into()));
        }
        Ok(())
    }
}

/// Softmax cross-entropy for one sample: `(loss, dloss/dlogits)`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, label: usize) -> Result<(T, Tensor<T>)> {
    let c = logits.len();
    if label >= c {
        return Err(ApvitError::Index(format!("label {label} out of range for {c} classes")));
    }
    let row = logits.clone().reshape(&[1, c])?;
    let max = logits.data().iter().copied().fold(T::neg_infinity(), T::max);
    let lse = max + logits.data().iter().map(|&v| (v - max).exp()).sum::<T>().ln();
    let loss = lse - logits.data()[label];
    let mut grad = softmax_rows(&row).reshape(&[c])?;
    grad.data_mut()[label] -= T::one();
    Ok((loss, grad))
}

/// L2 norm over every parameter jointly.
pub fn global_norm<T: Scalar>(grads: &ApvitParams<T>) -> T {
    let mut sq = T::zero();
    grads.for_each(|_, t| sq += t.sq_norm());
    sq.sqrt()
}

/// Rescales `grads` so their joint L2 norm is at most `max_norm`. Returns
/// the norm before clipping.
pub fn clip_gradients<T: Scalar>(grads: &mut ApvitParams<T>, max_norm: T) -> T {
    let norm = global_norm(grads);
    if norm > max_norm {
        let s = max_norm / norm;
        grads.for_each_mut(|_, t| t.data_mut().iter_mut().for_each(|v| *v *= s));
    }
    norm
}

/// LayerNorm gains and offsets and the class token skip weight decay.
pub fn decay_exempt(name: &str) -> bool {
    name.ends_with(".gamma") || name.ends_with(".beta") || name == "cls_token"
}

/// `v <- momentum * v + (g + wd * w)`, `w <- w - lr * v`.
pub fn sgd_step<T: Scalar>(
    params: &mut ApvitParams<T>,
    grads: &ApvitParams<T>,
    velocity: &mut ApvitParams<T>,
    lr: T,
    momentum: T,
    weight_decay: T,
) {
    let mut step = grads.clone();
    step.zip_apply(params, |name, g, w| {
        if !decay_exempt(name) {
            g.axpy(weight_decay, w);
        }
    });
    velocity.zip_apply(&step, |_, v, g| {
        for (vv, &gv) in v.data_mut().iter_mut().zip(g.data()) {
            *vv = momentum * *vv + gv;
        }
    });
    params.zip_apply(velocity, |_, w, v| w.axpy(-lr, v));
}

/// `base_lr * 0.5 * (1 + cos(pi * step / total))`.
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    let t = step.min(total_steps) as f64 / total_steps as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * t).cos())
}

/// Linear interpolation from `start` at step 0 to `end` at `total_steps`;
/// the keep number is rounded.
pub fn kr_linear_schedule(
    step: usize,
    total_steps: usize,
    start: (usize, f64),
    end: (usize, f64),
) -> (usize, f64) {
    if total_steps == 0 || step >= total_steps {
        return end;
    }
    let t = step as f64 / total_steps as f64;
    let k = start.0 as f64 + (end.0 as f64 - start.0 as f64) * t;
    let r = start.1 + (end.1 - start.1) * t;
    (k.round() as usize, r)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub overall_accuracy: f64,
    /// Zero for classes without samples; those are left out of the mean.
    pub per_class_accuracy: Vec<f64>,
    pub mean_class_accuracy: f64,
    /// `confusion[true][predicted]`
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(num_classes: usize, pairs: &[(usize, usize)]) -> Result<Self> {
        if pairs.is_empty() {
            return Err(ApvitError::Config("cannot evaluate an empty dataset".into()));
        }
        let mut confusion = vec![vec![0usize; num_classes]; num_classes];
        for &(truth, pred) in pairs {
            confusion[truth][pred] += 1;
        }
        let trace: usize = (0..num_classes).map(|c| confusion[c][c]).sum();
        let mut per_class = Vec::with_capacity(num_classes);
        let mut present = Vec::new();
        for (c, row) in confusion.iter().enumerate() {
            let n: usize = row.iter().sum();
            let acc = if n == 0 { 0.0 } else { row[c] as f64 / n as f64 };
            if n > 0 {
                present.push(acc);
            }
            per_class.push(acc);
        }
        Ok(Self {
            overall_accuracy: trace as f64 / pairs.len() as f64,
            mean_class_accuracy: present.iter().sum::<f64>() / present.len() as f64,
            per_class_accuracy: per_class,
            confusion,
        })
    }
}

/// Accuracy, per-class accuracy and confusion counts, without augmentation.
pub fn evaluate<T: Scalar>(
    params: &ApvitParams<T>,
    config: &ApvitConfig,
    dataset: &Dataset,
) -> Result<Metrics> {
    if dataset.is_empty() {
        return Err(ApvitError::Config("cannot evaluate an empty dataset".into()));
    }
    config.validate()?;
    let pairs = dataset
        .samples
        .par_iter()
        .map(|s| {
            let (logits, _) = forward(&s.image.cast::<T>(), params, config)?;
            Ok((s.label, argmax(logits.data())))
        })
        .collect::<Result<Vec<_>>>()?;
    if let Some(&(l, _)) = pairs.iter().find(|(l, _)| *l >= config.num_classes) {
        return Err(ApvitError::Config(format!(
            "dataset label {l} exceeds num_classes {}",
            config.num_classes
        )));
    }
    Metrics::from_predictions(config.num_classes, &pairs)
}

/// One line of the metrics JSONL history.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HistoryEntry {
    pub step: usize,
    pub lr: f64,
    pub k_t: usize,
    pub r_t: f64,
    /// Mean training loss since the previous entry.
    pub loss: Option<f64>,
    pub overall_acc: f64,
    pub mean_class_acc: f64,
    /// Row-major confusion counts.
    pub confusion: Vec<usize>,
}

pub fn write_history_jsonl(path: &Path, history: &[HistoryEntry]) -> Result<()> {
    let mut out = Vec::new();
    for h in history {
        serde_json::to_writer(&mut out, h).expect("serializable");
        out.write_all(b"\n").expect("in-memory write");
    }
    fs::write(path, out).map_err(|e| ApvitError::io(path, e))
}

#[derive(Clone, Debug)]
pub struct TrainOutcome<T = f64> {
    pub params: ApvitParams<T>,
    pub history: Vec<HistoryEntry>,
}

/// `(k, r)` in force at `step`.
pub fn kr_at(step: usize, model: &ApvitConfig, train: &TrainConfig) -> (usize, f64) {
    match train.kr_schedule {
        KrSchedule::Constant => (model.k, model.r),
        KrSchedule::LinearDecay => kr_linear_schedule(
            step,
            train.total_steps,
            (model.stem.patch_count(), 1.0),
            (model.k, model.r),
        ),
    }
}

/// Mean loss and mean gradient of one mini-batch. Samples run in parallel;
/// the reduction is in batch order so results do not depend on thread count.
pub fn batch_gradient<T: Scalar>(
    params: &ApvitParams<T>,
    config: &ApvitConfig,
    batch: &[Sample],
) -> Result<(T, ApvitParams<T>)> {
    let per_sample = batch
        .par_iter()
        .map(|s| {
            let pass = forward_with(&s.image.cast::<T>(), params, config, &ForwardOptions::default())?;
            let (loss, dlogits) = cross_entropy(&pass.logits, s.label)?;
            let grads = backward(&pass, params, config, &dlogits)?;
            Ok((loss, grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let inv = T::one() / T::from_usize_lossy(batch.len());
    let mut total_loss = T::zero();
    let mut sum = params.zeros_like();
    for (loss, g) in &per_sample {
        total_loss += *loss;
        sum.zip_apply(g, |_, acc, gt| acc.add_assign(gt));
    }
    sum.for_each_mut(|_, t| t.data_mut().iter_mut().for_each(|v| *v *= inv));
    Ok((total_loss * inv, sum))
}

/// Trains from `init_params(model, train.seed)` and evaluates on `eval_set`
/// every `eval_every` steps and after the last step.
pub fn train_loop<T: Scalar>(
    model: &ApvitConfig,
    train: &TrainConfig,
    train_set: &Dataset,
    eval_set: &Dataset,
) -> Result<TrainOutcome<T>> {
    model.validate()?;
    train.validate()?;
    if train_set.is_empty() {
        return Err(ApvitError::Config("training set is empty".into()));
    }
    let mut params = init_params::<T>(model, train.seed)?;
    let mut velocity = params.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(7);

    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut cursor = order.len();
    let mut history = Vec::new();
    let mut loss_sum = 0.0;
    let mut loss_steps = 0usize;

    let log = |step: usize, params: &ApvitParams<T>, loss: Option<f64>| -> Result<HistoryEntry> {
        let (k_t, r_t) = kr_at(step, model, train);
        let cfg = ApvitConfig {
            k: k_t,
            r: r_t,
            ..model.clone()
        };
        let m = evaluate(params, &cfg, eval_set)?;
        Ok(HistoryEntry {
            step,
            lr: cosine_lr(step, train.total_steps, train.base_lr),
            k_t,
            r_t,
            loss,
            overall_acc: m.overall_accuracy,
            mean_class_acc: m.mean_class_accuracy,
            confusion: m.confusion.into_iter().flatten().collect(),
        })
    };

    for step in 0..train.total_steps {
        let mut batch = Vec::with_capacity(train.batch_size);
        while batch.len() < train.batch_size {
            if cursor == order.len() {
                order.shuffle(&mut rng);
                cursor = 0;
            }
            let s = &train_set.samples[order[cursor]];
            cursor += 1;
            batch.push(if train.augment {
                augment(s, &mut rng)
            } else {
                s.clone()
            });
        }

        let (k_t, r_t) = kr_at(step, model, train);
        let cfg = ApvitConfig {
            k: if model.pooling == PoolingMode::Hard { k_t } else { model.k },
            r: r_t,
            ..model.clone()
        };
        let (loss, mut grads) = batch_gradient(&params, &cfg, &batch)?;
        let loss_f = loss.as_f64();
        if !loss_f.is_finite() {
            return Err(ApvitError::NonFinite {
                step,
                detail: format!("mean batch loss {loss_f}"),
            });
        }
        clip_gradients(&mut grads, T::lit(train.clip_norm));
        let lr = cosine_lr(step, train.total_steps, train.base_lr);
        sgd_step(
            &mut params,
            &grads,
            &mut velocity,
            T::lit(lr),
            T::lit(train.momentum),
            T::lit(train.weight_decay),
        );
        loss_sum += loss_f;
        loss_steps += 1;

        let done = step + 1;
        if done % train.eval_every == 0 && done != train.total_steps {
            history.push(log(done, &params, Some(loss_sum / loss_steps as f64))?);
            loss_sum = 0.0;
            loss_steps = 0;
        }
    }
    let final_loss = (loss_steps > 0).then(|| loss_sum / loss_steps as f64);
    history.push(log(train.total_steps, &params, final_loss)?);
    Ok(TrainOutcome { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_hand_values() {
        let (l, g) = cross_entropy(&Tensor::new(vec![2], vec![0.0, 0.0]).unwrap(), 0).unwrap();
        assert!((l - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(g.data(), &[-0.5, 0.5]);
        let (l, _) = cross_entropy(&Tensor::new(vec![2], vec![100.0, 0.0]).unwrap(), 0).unwrap();
        assert!((0.0..1e-40).contains(&l));
        assert!(matches!(
            cross_entropy(&Tensor::<f64>::zeros(&[3]), 3),
            Err(ApvitError::Index(_))
        ));
    }

    #[test]
    fn cosine_points() {
        assert_eq!(cosine_lr(0, 100, 0.1), 0.1);
        assert!(cosine_lr(100, 100, 0.1).abs() < 1e-18);
        assert!((cosine_lr(50, 100, 0.1) - 0.05).abs() < 1e-15);
    }

    #[test]
    fn kr_linear_points() {
        assert_eq!(kr_linear_schedule(0, 10, (64, 1.0), (32, 0.6)), (64, 1.0));
        assert_eq!(kr_linear_schedule(10, 10, (64, 1.0), (32, 0.6)), (32, 0.6));
        let (k, r) = kr_linear_schedule(5, 10, (64, 1.0), (32, 0.6));
        assert_eq!(k, 48);
        assert!((r - 0.8).abs() < 1e-15);
    }

    #[test]
    fn metrics_definitions() {
        let perfect: Vec<_> = (0..8).map(|i| (i % 4, i % 4)).collect();
        let m = Metrics::from_predictions(4, &perfect).unwrap();
        assert_eq!(m.overall_accuracy, 1.0);
        for (i, row) in m.confusion.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 2 } else { 0 });
            }
        }
        let constant: Vec<_> = (0..8).map(|i| (i % 4, 0)).collect();
        let m = Metrics::from_predictions(4, &constant).unwrap();
        assert_eq!(m.overall_accuracy, 0.25);
        let mean: f64 = m.per_class_accuracy.iter().sum::<f64>() / 4.0;
        assert!((mean - m.mean_class_accuracy).abs() < 1e-12);
        for (row, n) in m.confusion.iter().zip([2, 2, 2, 2]) {
            assert_eq!(row.iter().sum::<usize>(), n);
        }
        assert!(Metrics::from_predictions(4, &[]).is_err());
    }

    #[test]
    fn schedule_parse() {
        assert_eq!("linear_decay".parse::<KrSchedule>().unwrap(), KrSchedule::LinearDecay);
        assert!("step".parse::<KrSchedule>().is_err());
    }
}
