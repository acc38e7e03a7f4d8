//! Desk-scale training: label-smoothed cross-entropy, SGD with momentum and
//! L2 weight decay, a step learning-rate schedule and a synthetic dataset.

use alloc::vec;
use alloc::vec::Vec;
use core::f64::consts::PI;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelSpec};
use crate::rng;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub label_smoothing: f64,
    pub lr_decay_factor: f64,
    /// Epochs between learning-rate decays.
    pub lr_decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            label_smoothing: 0.1,
            lr_decay_factor: 10.0,
            lr_decay_every: 30,
            batch_size: 8,
            epochs: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Rates must be finite and non-negative (`lr = 0` is a valid no-op run),
    /// smoothing must lie in `[0, 1)`.
    pub fn validate(&self) -> Result<()> {
        let rates = [self.lr, self.momentum, self.weight_decay];
        if rates.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(Error::InvalidConfig(
                "lr, momentum and weight_decay must be finite and >= 0".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::InvalidConfig("label_smoothing must lie in [0, 1)".into()));
        }
        if self.lr_decay_factor.is_nan() || self.lr_decay_factor < 1.0 || self.lr_decay_every == 0 {
            return Err(Error::InvalidConfig(
                "lr decay needs factor >= 1 and a positive period".into(),
            ));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidConfig("batch_size and epochs must be positive".into()));
        }
        Ok(())
    }
}

/// `lr / factor^floor(epoch / every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    let decays = (epoch / cfg.lr_decay_every) as i32;
    cfg.lr / libm::pow(cfg.lr_decay_factor, f64::from(decays))
}

/// Cross-entropy against `(1 - alpha) * onehot + alpha / K`, averaged over the
/// batch. Returns the loss and its gradient with respect to `logits` (N, K, 1, 1).
pub fn label_smoothed_ce(logits: &Tensor, labels: &[usize], alpha: f64) -> Result<(f64, Tensor)> {
    let s = logits.shape();
    if s.h != 1 || s.w != 1 || labels.len() != s.n {
        return Err(Error::InvalidShape(alloc::format!(
            "logits {s} do not match {} labels",
            labels.len()
        )));
    }
    let k = s.c;
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::InvalidLabel { label: bad, classes: k });
    }
    let mut grad = vec![0.0; s.numel()];
    let mut loss = 0.0;
    let inv_n = 1.0 / s.n as f64;
    for (n, &label) in labels.iter().enumerate() {
        let row = &logits.data()[n * k..(n + 1) * k];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let log_z = max + libm::log(row.iter().map(|&v| libm::exp(v - max)).sum::<f64>());
        for (j, &v) in row.iter().enumerate() {
            let target = alpha / k as f64 + if j == label { 1.0 - alpha } else { 0.0 };
            let log_p = v - log_z;
            loss -= target * log_p;
            grad[n * k + j] = (libm::exp(log_p) - target) * inv_n;
        }
    }
    Ok((loss * inv_n, Tensor::from_vec(s, grad)?))
}

/// Entropy of the smoothed target distribution, the minimum of
/// [`label_smoothed_ce`] over all logits.
pub fn smoothed_ce_floor(alpha: f64, classes: usize) -> f64 {
    let k = classes as f64;
    let xlogx = |p: f64| if p > 0.0 { p * libm::log(p) } else { 0.0 };
    -(xlogx(1.0 - alpha + alpha / k) + (k - 1.0) * xlogx(alpha / k))
}

/// Per-parameter momentum buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SgdState {
    pub velocity: Vec<Vec<f64>>,
}

/// `v = momentum * v + g + wd * p; p -= lr * v`, with `wd` applied only where
/// `decay[i]` is set.
pub fn sgd_step(
    params: &mut [&mut Tensor],
    grads: &[Tensor],
    decay: &[bool],
    state: &mut SgdState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.len() || decay.len() != params.len() {
        return Err(Error::InvalidConfig(alloc::format!(
            "sgd_step got {} params, {} grads, {} decay flags",
            params.len(),
            grads.len(),
            decay.len()
        )));
    }
    if state.velocity.is_empty() {
        state.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    for (((p, g), v), &wd_on) in params.iter_mut().zip(grads).zip(&mut state.velocity).zip(decay) {
        if p.shape() != g.shape() || v.len() != p.len() {
            return Err(Error::ShapeMismatch {
                op: "sgd_step",
                expected: p.shape(),
                found: g.shape(),
            });
        }
        let wd = if wd_on { cfg.weight_decay } else { 0.0 };
        for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.iter_mut()) {
            *vv = cfg.momentum * *vv + gv + wd * *pv;
            *pv -= lr * *vv;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
}

/// `samples` RGB images of `size`x`size`, labels cycling through the classes.
/// Each class has its own colour tint and stripe frequency/orientation; every
/// sample gets a random stripe phase and uniform pixel noise.
pub fn make_toy_dataset(seed: u64, samples: usize, classes: usize, size: usize) -> Result<ToyDataset> {
    if classes == 0 || samples < classes {
        return Err(Error::InvalidConfig("need at least one sample per class".into()));
    }
    let shape = Shape::new(samples, 3, size, size)?;
    let mut rng = rng::seeded(seed);
    let mut data = Vec::with_capacity(shape.numel());
    let labels: Vec<usize> = (0..samples).map(|i| i % classes).collect();
    for &label in &labels {
        let phase = rng.gen_range(0.0..2.0 * PI);
        let freq = (1 + label / 2) as f64;
        let vertical = label % 2 == 1;
        let angle = 2.0 * PI * label as f64 / classes as f64;
        for ch in 0..3 {
            let tint = 0.15 * libm::cos(angle + 2.0 * PI * ch as f64 / 3.0);
            for y in 0..size {
                for x in 0..size {
                    let t = if vertical { x } else { y } as f64 / size as f64;
                    let stripe = libm::sin(2.0 * PI * freq * t + phase);
                    data.push(tint + 0.5 * stripe + rng.gen_range(-1.0..1.0));
                }
            }
        }
    }
    Ok(ToyDataset {
        images: Tensor::from_vec(shape, data)?,
        labels,
        num_classes: classes,
    })
}

/// One optimizer step.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Fraction of the minibatch classified correctly (training-mode forward).
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub epochs: usize,
    /// Mean minibatch loss of the first and last epoch.
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean minibatch accuracy over the last epoch.
    pub final_train_accuracy: f64,
    /// Accuracy on the whole training set with running batch-norm statistics.
    pub eval_accuracy: f64,
    /// Lowest reachable loss: the entropy of the smoothed target.
    pub loss_floor: f64,
    /// `(initial - final) / (initial - floor)`; 1 means the floor was reached.
    pub excess_loss_reduction: f64,
    /// Every epoch's mean loss equals the first one.
    pub no_learning: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<StepRecord>,
    pub summary: TrainSummary,
}

fn correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape().c;
    labels
        .iter()
        .enumerate()
        .filter(|(n, &label)| {
            let row = &logits.data()[n * k..(n + 1) * k];
            let best = row
                .iter()
                .enumerate()
                .fold(0, |b, (j, &v)| if v > row[b] { j } else { b });
            best == label
        })
        .count()
}

fn epoch_means(records: &[StepRecord], epoch: usize) -> (f64, f64) {
    let rows: Vec<&StepRecord> = records.iter().filter(|r| r.epoch == epoch).collect();
    let n = rows.len().max(1) as f64;
    (
        rows.iter().map(|r| r.loss).sum::<f64>() / n,
        rows.iter().map(|r| r.accuracy).sum::<f64>() / n,
    )
}

/// Minibatch SGD over fixed consecutive batches. Fails with
/// [`Error::Diverged`] as soon as a loss or gradient is not finite.
pub fn train(model: &mut Model, data: &ToyDataset, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if model.spec.num_classes != data.num_classes {
        return Err(Error::InvalidConfig(alloc::format!(
            "model has {} classes, dataset has {}",
            model.spec.num_classes,
            data.num_classes
        )));
    }
    let m = data.labels.len();
    let decay: Vec<bool> = model.named_params().iter().map(|p| p.decay).collect();
    let mut state = SgdState::default();
    let mut records = Vec::new();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let lr = lr_at(epoch, cfg);
        let mut start = 0;
        while start < m {
            let len = cfg.batch_size.min(m - start);
            let x = data.images.slice_batch(start, len)?;
            let labels = &data.labels[start..start + len];
            let out = model.forward_train(&x)?;
            let (loss, g) = label_smoothed_ce(&out.output, labels, cfg.label_smoothing)?;
            let grads = out.backward(&g)?.params;
            if !loss.is_finite() || grads.iter().any(|t| !t.all_finite()) {
                return Err(Error::Diverged { epoch, step });
            }
            sgd_step(&mut model.params_mut(), &grads, &decay, &mut state, lr, cfg)?;
            records.push(StepRecord {
                epoch,
                step,
                lr,
                loss,
                accuracy: correct(&out.output, labels) as f64 / len as f64,
            });
            step += 1;
            start += len;
        }
    }
    let eval = model.forward(&data.images)?;
    let (initial_loss, _) = epoch_means(&records, 0);
    let (final_loss, final_train_accuracy) = epoch_means(&records, cfg.epochs - 1);
    let no_learning = (0..cfg.epochs).all(|e| epoch_means(&records, e).0 == initial_loss);
    let loss_floor = smoothed_ce_floor(cfg.label_smoothing, data.num_classes);
    let excess = initial_loss - loss_floor;
    let excess_loss_reduction = if excess > 0.0 {
        (initial_loss - final_loss) / excess
    } else {
        0.0
    };
    Ok(History {
        summary: TrainSummary {
            steps: step,
            epochs: cfg.epochs,
            initial_loss,
            final_loss,
            final_train_accuracy,
            eval_accuracy: correct(&eval.output, &data.labels) as f64 / m as f64,
            loss_floor,
            excess_loss_reduction,
            no_learning,
        },
        records,
    })
}

/// Size of the synthetic overfitting fixture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ToySettings {
    pub samples: usize,
    pub classes: usize,
    pub image_size: usize,
}

impl Default for ToySettings {
    fn default() -> Self {
        ToySettings {
            samples: 32,
            classes: 4,
            image_size: 64,
        }
    }
}

/// Builds the toy dataset and reduced model from `cfg.seed` and trains it.
pub fn run_toy(cfg: &TrainConfig, toy: &ToySettings) -> Result<History> {
    let data = make_toy_dataset(cfg.seed, toy.samples, toy.classes, toy.image_size)?;
    let mut model = Model::build(ModelSpec::toy(toy.classes), cfg.seed)?;
    train(&mut model, &data, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::finite_difference_gradient;

    fn logits(n: usize, k: usize, seed: u64) -> Tensor {
        Tensor::random_uniform(Shape::new(n, k, 1, 1).unwrap(), seed, -2.0, 2.0).unwrap()
    }

    #[test]
    fn schedule_checkpoints() {
        let cfg = TrainConfig::default();
        for (epoch, lr) in [(0, 0.1), (29, 0.1), (30, 0.01), (60, 0.001), (90, 0.0001)] {
            assert!((lr_at(epoch, &cfg) - lr).abs() < 1e-15, "epoch {epoch}");
        }
        let every = TrainConfig {
            lr_decay_every: 1,
            ..cfg.clone()
        };
        assert!((lr_at(3, &every) - 1e-4).abs() < 1e-15);
        assert!((1..200).all(|e| lr_at(e, &cfg) <= lr_at(e - 1, &cfg)));
    }

    #[test]
    fn smoothing_zero_is_plain_cross_entropy() {
        let z = logits(3, 5, 1);
        let labels = [0, 4, 2];
        let (loss, _) = label_smoothed_ce(&z, &labels, 0.0).unwrap();
        let oracle: f64 = labels
            .iter()
            .enumerate()
            .map(|(n, &l)| {
                let row = &z.data()[n * 5..n * 5 + 5];
                let lse = row.iter().map(|v| v.exp()).sum::<f64>().ln();
                lse - row[l]
            })
            .sum::<f64>()
            / 3.0;
        assert!((loss - oracle).abs() < 1e-12);
    }

    #[test]
    fn uniform_logits_give_log_k() {
        let z = Tensor::zeros(Shape::new(2, 7, 1, 1).unwrap());
        let (loss, _) = label_smoothed_ce(&z, &[3, 6], 0.1).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn floor_is_the_loss_at_the_smoothed_target() {
        let (alpha, k) = (0.1, 4);
        let t = [alpha / 4.0, alpha / 4.0, 1.0 - alpha + alpha / 4.0, alpha / 4.0];
        let z = Tensor::from_vec(
            Shape::new(1, k, 1, 1).unwrap(),
            t.iter().map(|&p: &f64| p.ln()).collect(),
        )
        .unwrap();
        let (loss, g) = label_smoothed_ce(&z, &[2], alpha).unwrap();
        assert!((loss - smoothed_ce_floor(alpha, k)).abs() < 1e-12);
        assert!(g.max_abs() < 1e-12);
        assert!((smoothed_ce_floor(0.0, 10)).abs() < 1e-15);
        assert!((smoothed_ce_floor(0.1, 4) - 0.349).abs() < 1e-3);
    }

    #[test]
    fn ce_gradient_matches_finite_differences() {
        let z = logits(2, 5, 9);
        let labels = [1, 3];
        let (_, g) = label_smoothed_ce(&z, &labels, 0.1).unwrap();
        let num = finite_difference_gradient(|t| label_smoothed_ce(t, &labels, 0.1).unwrap().0, &z, 1e-5);
        assert!(g.max_abs_diff(&num).unwrap() < 1e-6);
    }

    #[test]
    fn ce_rejects_bad_labels() {
        let z = logits(2, 3, 0);
        assert!(matches!(
            label_smoothed_ce(&z, &[0, 3], 0.1),
            Err(Error::InvalidLabel { label: 3, classes: 3 })
        ));
    }

    fn scalar(v: f64) -> Tensor {
        Tensor::full(Shape::new(1, 1, 1, 1).unwrap(), v)
    }

    #[test]
    fn sgd_trivial_cases() {
        let plain = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = scalar(1.5);
        sgd_step(
            &mut [&mut p],
            &[scalar(0.0)],
            &[true],
            &mut SgdState::default(),
            0.1,
            &plain,
        )
        .unwrap();
        assert_eq!(p.data()[0], 1.5);
        sgd_step(
            &mut [&mut p],
            &[scalar(2.0)],
            &[true],
            &mut SgdState::default(),
            0.1,
            &plain,
        )
        .unwrap();
        assert_eq!(p.data()[0], 1.5 - 0.1 * 2.0);
    }

    #[test]
    fn sgd_momentum_matches_unrolled_recurrence() {
        let cfg = TrainConfig {
            momentum: 0.9,
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        let (lr, g1, g2, p0) = (0.1, 0.5, -0.25, 2.0);
        let mut p = scalar(p0);
        let mut state = SgdState::default();
        sgd_step(&mut [&mut p], &[scalar(g1)], &[true], &mut state, lr, &cfg).unwrap();
        sgd_step(&mut [&mut p], &[scalar(g2)], &[true], &mut state, lr, &cfg).unwrap();
        let v1 = g1 + 0.01 * p0;
        let p1 = p0 - lr * v1;
        let v2 = 0.9 * v1 + g2 + 0.01 * p1;
        let p2 = p1 - lr * v2;
        assert!((p.data()[0] - p2).abs() < 1e-15);
        assert!((state.velocity[0][0] - v2).abs() < 1e-15);
    }

    #[test]
    fn sgd_skips_decay_when_masked() {
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.5,
            ..TrainConfig::default()
        };
        let mut p = scalar(1.0);
        sgd_step(
            &mut [&mut p],
            &[scalar(0.0)],
            &[false],
            &mut SgdState::default(),
            0.1,
            &cfg,
        )
        .unwrap();
        assert_eq!(p.data()[0], 1.0);
    }

    #[test]
    fn sgd_descends_a_quadratic() {
        let cfg = TrainConfig {
            momentum: 0.0,
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        let mut p = scalar(3.0);
        let mut state = SgdState::default();
        let mut prev = 9.0;
        for _ in 0..50 {
            let g = scalar(2.0 * p.data()[0]);
            sgd_step(&mut [&mut p], &[g], &[true], &mut state, 0.05, &cfg).unwrap();
            let f = p.data()[0] * p.data()[0];
            assert!(f < prev);
            prev = f;
        }
    }

    #[test]
    fn dataset_is_deterministic_and_covers_classes() {
        let a = make_toy_dataset(5, 12, 4, 32).unwrap();
        let b = make_toy_dataset(5, 12, 4, 32).unwrap();
        assert_eq!(a, b);
        assert_ne!(a.images, make_toy_dataset(6, 12, 4, 32).unwrap().images);
        for c in 0..4 {
            assert!(a.labels.contains(&c));
        }
        assert!(make_toy_dataset(0, 3, 4, 32).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_ok());
        assert!(TrainConfig {
            label_smoothing: 1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            lr: -1.0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
        assert!(TrainConfig {
            batch_size: 0,
            ..TrainConfig::default()
        }
        .validate()
        .is_err());
    }
}
