//! SGD with momentum and weight decay, evaluation, and per-epoch logs.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Augment, Dataset, Normalization};
use crate::error::{Error, Result};
use crate::model::{Mode, Network, Param, BN_MOMENTUM};
use crate::par;
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct HyperParams {
    pub lr: f64,
    /// Fractions of the run after which the rate is multiplied by `lr_decay`.
    pub milestones: Vec<f64>,
    pub lr_decay: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: Option<Augment>,
    pub bn_momentum: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            lr: 0.1,
            milestones: vec![0.5, 0.75],
            lr_decay: 0.1,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            epochs: 1,
            seed: 0,
            augment: Some(Augment::default()),
            bn_momentum: BN_MOMENTUM,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::config("batch size and epochs must be positive"));
        }
        if self.milestones.iter().any(|m| !(0.0..=1.0).contains(m)) {
            return Err(Error::config("lr milestones are fractions in [0, 1]"));
        }
        if !(self.lr_decay > 0.0) || !(0.0..1.0).contains(&self.bn_momentum) {
            return Err(Error::config("lr decay must be positive and bn momentum in [0, 1)"));
        }
        Ok(())
    }

    /// Piecewise-constant rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self
            .milestones
            .iter()
            .filter(|&&m| epoch as f64 >= m * self.epochs as f64)
            .count();
        self.lr * self.lr_decay.powi(passed as i32)
    }
}

/// One velocity buffer per parameter.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MomentumState {
    velocity: Vec<Vec<f64>>,
}

impl MomentumState {
    pub fn new(params: &[Param]) -> Self {
        Self {
            velocity: params.iter().map(|p| vec![0.0; p.value.numel()]).collect(),
        }
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }
}

/// `v ← μ·v − lr·(g + λ·θ)`, `θ ← θ + v`, with `λ = 0` for parameters whose
/// `decay` flag is off. Parameters the loss never reached (`None`) are left
/// untouched, velocity included.
pub fn sgd_update(
    params: &mut [Param],
    grads: &[Option<Vec<f64>>],
    state: &mut MomentumState,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) {
    if state.velocity.len() != params.len() {
        *state = MomentumState::new(params);
    }
    for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut state.velocity) {
        let Some(g) = g else { continue };
        let decay = if p.decay { weight_decay } else { 0.0 };
        let value = Arc::make_mut(&mut p.value);
        for ((theta, &g), v) in value.data_mut().iter_mut().zip(g).zip(v.iter_mut()) {
            *v = momentum * *v - lr * (g + decay * *theta);
            *theta += *v;
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub errors: usize,
    pub grad_norm: f64,
}

/// Forward, backward and one update on a single mini-batch.
pub fn sgd_step(
    network: &mut Network,
    batch: &Tensor,
    labels: &[usize],
    hyper: &HyperParams,
    lr: f64,
    state: &mut MomentumState,
    step: usize,
) -> Result<StepOutcome> {
    if labels.is_empty() {
        return Err(Error::config("empty mini-batch"));
    }
    let (loss, errors, grads, stats) = {
        let tape = Tape::new();
        let params = network.bind(&tape, true);
        let x = tape.leaf(batch.clone(), false);
        let out = network.forward(&params, x, Mode::Train)?;
        let errors = count_errors(&out.logits.value(), labels);
        let loss = out.logits.softmax_cross_entropy(labels)?;
        let value = loss.value().data()[0];
        if !value.is_finite() {
            return Err(Error::NonFiniteLoss { step });
        }
        let g = tape.backward(loss)?;
        let grads: Vec<Option<Vec<f64>>> = params.iter().map(|&p| g.get(p).map(<[f64]>::to_vec)).collect();
        (value, errors, grads, out.stats)
    };
    let grad_norm = grads
        .iter()
        .flatten()
        .flat_map(|g| g.iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    network.apply_batch_stats(&stats, hyper.bn_momentum);
    sgd_update(
        network.params_mut(),
        &grads,
        state,
        lr,
        hyper.momentum,
        hyper.weight_decay,
    );
    Ok(StepOutcome {
        loss,
        errors,
        grad_norm,
    })
}

fn count_errors(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| argmax(row) != label)
        .count()
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

const EVAL_CHUNK: usize = 250;

/// Eval-mode predicted classes for every image.
pub fn predict_classes(network: &Network, dataset: &Dataset, norm: Option<&Normalization>) -> Result<Vec<usize>> {
    let chunks = dataset.len().div_ceil(EVAL_CHUNK);
    let parts = par::map_range(chunks, |c| -> Result<Vec<usize>> {
        let idx: Vec<usize> = (c * EVAL_CHUNK..((c + 1) * EVAL_CHUNK).min(dataset.len())).collect();
        let (x, _) = dataset.batch(&idx, norm, None);
        let logits = network.predict(&x)?;
        let k = logits.shape()[1];
        Ok(logits.data().chunks(k).map(argmax).collect())
    });
    let mut out = Vec::with_capacity(dataset.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// Top-1 error rate in eval mode.
pub fn evaluate(network: &Network, dataset: &Dataset, norm: Option<&Normalization>) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::config("cannot evaluate on an empty dataset"));
    }
    let pred = predict_classes(network, dataset, norm)?;
    let wrong = pred.iter().enumerate().filter(|&(i, &p)| p != dataset.label(i)).count();
    Ok(wrong as f64 / dataset.len() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_err: f64,
    pub test_err: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
}

impl TrainLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,train_err,test_err,seconds";

    pub fn to_csv(&self) -> String {
        let mut s = format!("{}\n", Self::CSV_HEADER);
        for e in &self.epochs {
            let test = e.test_err.map(|t| t.to_string()).unwrap_or_default();
            let _ = writeln!(
                s,
                "{},{},{},{},{:.3}",
                e.epoch, e.train_loss, e.train_err, test, e.seconds
            );
        }
        s
    }

    /// Like [`TrainLog::to_csv`] without the wall-clock column, so reruns match byte for byte.
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,train_err,test_err\n");
        for e in &self.epochs {
            let test = e.test_err.map(|t| t.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, e.train_err, test);
        }
        s
    }

    pub fn steps_csv(&self) -> String {
        let mut s = String::from("step,epoch,lr,loss,grad_norm\n");
        for r in &self.steps {
            let _ = writeln!(s, "{},{},{},{},{}", r.step, r.epoch, r.lr, r.loss, r.grad_norm);
        }
        s
    }

    /// The log with wall-clock columns zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> TrainLog {
        let mut out = self.clone();
        out.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
        out
    }
}

#[derive(Clone, Debug)]
pub struct Trained {
    pub network: Network,
    pub log: TrainLog,
    pub normalization: Normalization,
}

/// Train on `train`, optionally reporting test error after every epoch.
///
/// Shuffles and augmentation streams derive from `hyper.seed` alone, so a
/// rerun reproduces the same parameters and log (timing aside).
pub fn train(mut network: Network, train: &Dataset, test: Option<&Dataset>, hyper: &HyperParams) -> Result<Trained> {
    hyper.validate()?;
    if train.is_empty() {
        return Err(Error::config("training set is empty"));
    }
    let cfg = network.config();
    if train.shape() != cfg.input_shape || train.num_classes() != cfg.num_classes {
        return Err(Error::config(format!(
            "dataset of {:?} images with {} classes does not fit network input {:?} with {} classes",
            train.shape(),
            train.num_classes(),
            cfg.input_shape,
            cfg.num_classes
        )));
    }
    let normalization = Normalization::fit(train)?;
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let mut state = MomentumState::new(network.params());
    let mut log = TrainLog::default();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;
    for epoch in 0..hyper.epochs {
        let started = Instant::now();
        let lr = hyper.lr_at(epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut errors) = (0.0, 0);
        for idx in order.chunks(hyper.batch_size) {
            let stream = rng.next_u64();
            let aug = hyper.augment.as_ref().map(|a| (a, stream));
            let (x, labels) = train.batch(idx, Some(&normalization), aug);
            let out = sgd_step(&mut network, &x, &labels, hyper, lr, &mut state, step)?;
            loss_sum += out.loss * idx.len() as f64;
            errors += out.errors;
            log.steps.push(StepRecord {
                step,
                epoch,
                lr,
                loss: out.loss,
                grad_norm: out.grad_norm,
            });
            step += 1;
        }
        let test_err = test.map(|t| evaluate(&network, t, Some(&normalization))).transpose()?;
        log.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_err: errors as f64 / train.len() as f64,
            test_err,
            seconds: started.elapsed().as_secs_f64(),
        });
    }
    Ok(Trained {
        network,
        log,
        normalization,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f64, decay: bool) -> Param {
        Param {
            name: "theta".into(),
            value: Arc::new(Tensor::scalar(v)),
            decay,
        }
    }

    #[test]
    fn decay_only_step() {
        let mut p = vec![scalar_param(2.0, true), scalar_param(2.0, false)];
        let mut st = MomentumState::new(&p);
        sgd_update(&mut p, &[Some(vec![0.0]), Some(vec![0.0])], &mut st, 0.1, 0.9, 1e-4);
        assert_eq!(p[0].value.data()[0], 2.0 - 0.1 * 1e-4 * 2.0);
        assert_eq!(p[1].value.data()[0], 2.0);
    }

    #[test]
    fn quadratic_converges() {
        let mut p = vec![scalar_param(0.0, true)];
        let mut st = MomentumState::new(&p);
        for _ in 0..200 {
            let theta = p[0].value.data()[0];
            sgd_update(&mut p, &[Some(vec![2.0 * (theta - 3.0)])], &mut st, 0.1, 0.9, 1e-4);
        }
        assert!((p[0].value.data()[0] - 3.0).abs() < 1e-3, "{:?}", p[0].value);
    }

    #[test]
    fn plain_gradient_descent() {
        let mut p = vec![scalar_param(1.5, true)];
        let mut st = MomentumState::new(&p);
        for _ in 0..3 {
            let theta = p[0].value.data()[0];
            let g = 4.0 * theta;
            sgd_update(&mut p, &[Some(vec![g])], &mut st, 0.05, 0.0, 0.0);
            assert_eq!(p[0].value.data()[0], theta - 0.05 * g);
        }
    }

    #[test]
    fn unreached_parameters_are_frozen() {
        let mut p = vec![scalar_param(1.0, true)];
        let mut st = MomentumState::new(&p);
        sgd_update(&mut p, &[None], &mut st, 0.1, 0.9, 1e-4);
        assert_eq!(p[0].value.data()[0], 1.0);
    }

    #[test]
    fn lr_schedule_steps_at_half_and_three_quarters() {
        let h = HyperParams {
            epochs: 8,
            ..HyperParams::default()
        };
        let lrs: Vec<f64> = (0..8).map(|e| h.lr_at(e)).collect();
        assert_eq!(lrs[..4], [0.1; 4]);
        assert!((lrs[4] - 0.01).abs() < 1e-15 && (lrs[5] - 0.01).abs() < 1e-15);
        assert!((lrs[6] - 0.001).abs() < 1e-15 && (lrs[7] - 0.001).abs() < 1e-15);
    }

    #[test]
    fn hyper_validation() {
        let bad = HyperParams {
            momentum: 1.0,
            ..HyperParams::default()
        };
        assert!(bad.validate().is_err());
        assert!(HyperParams::default().validate().is_ok());
    }
}
