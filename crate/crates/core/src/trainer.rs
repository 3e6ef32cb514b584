//! Loss, AdaGrad, weight decay, early stopping and restart selection.

use std::fmt;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cell::ScanMode;
use crate::data::DEFAULT_CONTEXT_CAP;
use crate::encoding::IndexedExample;
use crate::error::{QrnError, Result};
use crate::model::{ModelConfig, QrnModel};
use crate::param::ParamStore;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

/// AdaGrad denominator offset.
pub const ADAGRAD_EPS: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub l2_decay: f64,
    pub max_epochs: usize,
    pub patience_epochs: usize,
    pub restarts: usize,
    pub seed: u64,
    pub decay_biases: bool,
    pub scan: ScanMode,
    pub dev_fraction: f64,
    pub context_cap: usize,
    /// Starting value of every AdaGrad accumulator entry.
    pub initial_accumulator: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            learning_rate: 0.5,
            l2_decay: 0.001,
            max_epochs: 500,
            patience_epochs: 50,
            restarts: 10,
            seed: 0,
            decay_biases: false,
            scan: ScanMode::Sequential,
            dev_fraction: 0.1,
            context_cap: DEFAULT_CONTEXT_CAP,
            initial_accumulator: 0.1,
        }
    }
}

impl TrainConfig {
    /// Settings for the 10k bAbI QA training sets.
    pub fn qa_10k() -> Self {
        TrainConfig {
            batch_size: 128,
            learning_rate: 0.1,
            l2_decay: 0.0005,
            ..TrainConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("batch_size", self.batch_size),
            ("patience_epochs", self.patience_epochs),
            ("restarts", self.restarts),
            ("context_cap", self.context_cap),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(QrnError::Config(format!("{name} must be positive")));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(QrnError::Config("learning_rate must be positive".into()));
        }
        if !(self.l2_decay >= 0.0 && self.l2_decay.is_finite()) {
            return Err(QrnError::Config("l2_decay must be non-negative".into()));
        }
        if self.max_epochs > 0 && self.patience_epochs > self.max_epochs {
            return Err(QrnError::Config("patience_epochs must not exceed max_epochs".into()));
        }
        if !(self.initial_accumulator >= 0.0 && self.initial_accumulator.is_finite()) {
            return Err(QrnError::Config("initial_accumulator must be non-negative".into()));
        }
        if !(self.dev_fraction > 0.0 && self.dev_fraction < 1.0) {
            return Err(QrnError::Config("dev_fraction must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

/// `−log p[gold]`.
pub fn cross_entropy<F: Scalar>(predicted: &[F], gold: usize) -> Result<F> {
    let p = predicted.get(gold).ok_or_else(|| {
        QrnError::Input(format!("gold index {gold} outside a {}-way distribution", predicted.len()))
    })?;
    Ok(-p.ln())
}

/// `l2 · Σ‖W‖²` over decayed parameters, skipping pinned columns.
pub fn l2_term<F: Scalar>(store: &ParamStore<F>, l2: f64, decay_biases: bool) -> f64 {
    let mut total = 0.0;
    for p in store.iter().filter(|p| p.kind.is_decayed(decay_biases)) {
        for (i, &v) in p.value.data().iter().enumerate() {
            if !p.is_pinned(i) {
                total += v.as_f64() * v.as_f64();
            }
        }
    }
    l2 * total
}

/// Full per-example objective: cross-entropy, weight decay and the
/// optional reconstruction term.
pub fn loss<F: Scalar>(
    predicted: &[F],
    gold: usize,
    store: &ParamStore<F>,
    l2: f64,
    decay_biases: bool,
    reconstruction: Option<F>,
) -> Result<F> {
    let ce = cross_entropy(predicted, gold)?;
    let decay = F::from_f64(l2_term(store, l2, decay_biases));
    Ok(ce + decay + reconstruction.unwrap_or_else(F::zero))
}

/// Adds the weight-decay gradient `2 · l2 · W` to stored gradients.
pub fn add_decay_gradients<F: Scalar>(store: &mut ParamStore<F>, l2: f64, decay_biases: bool) {
    let scale = F::from_f64(2.0 * l2);
    for p in store.iter_mut().filter(|p| p.kind.is_decayed(decay_biases)) {
        let cols = p.value.cols();
        let pinned = p.pinned_cols.clone();
        for (i, (g, &v)) in p.gradient.data_mut().iter_mut().zip(p.value.data()).enumerate() {
            if !pinned.contains(&(i % cols)) {
                *g = *g + scale * v;
            }
        }
    }
}

/// `acc += g²; θ −= lr · g / (√acc + ε)`. Pinned columns are left alone.
pub fn adagrad_step<F: Scalar>(store: &mut ParamStore<F>, lr: f64) {
    let lr = F::from_f64(lr);
    let eps = F::from_f64(ADAGRAD_EPS);
    for p in store.iter_mut() {
        let cols = p.value.cols();
        let pinned = p.pinned_cols.clone();
        let grads = p.gradient.data().to_vec();
        let acc = p.accumulator.data_mut();
        let value = p.value.data_mut();
        for (i, g) in grads.into_iter().enumerate() {
            if !pinned.is_empty() && pinned.contains(&(i % cols)) {
                continue;
            }
            acc[i] = acc[i] + g * g;
            value[i] = value[i] - lr * g / (acc[i].sqrt() + eps);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalReport {
    pub error_rate: f64,
    /// Mean per-example loss without weight decay.
    pub mean_loss: f64,
    pub examples: usize,
}

pub fn evaluate<F: Scalar>(model: &QrnModel<F>, examples: &[IndexedExample], mode: ScanMode) -> Result<EvalReport> {
    if examples.is_empty() {
        return Err(QrnError::Input("cannot evaluate on an empty example list".into()));
    }
    let mut wrong = 0usize;
    let mut total = 0.0;
    for ex in examples {
        let pred = model.predict(ex, mode)?;
        wrong += usize::from(!pred.correct);
        total += pred.loss.as_f64();
    }
    let n = examples.len();
    Ok(EvalReport {
        error_rate: wrong as f64 / n as f64,
        mean_loss: total / n as f64,
        examples: n,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_err: f64,
}

impl fmt::Display for EpochRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "epoch={} train_loss={} dev_loss={} dev_err={}",
            self.epoch, self.train_loss, self.dev_loss, self.dev_err
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RestartLog {
    pub restart: usize,
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev_loss: f64,
    /// Why the restart was abandoned, if it diverged.
    pub diverged: Option<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainLog {
    pub restarts: Vec<RestartLog>,
    pub chosen: usize,
    pub wall_clock_s: f64,
}

impl TrainLog {
    pub fn chosen(&self) -> &RestartLog {
        &self.restarts[self.chosen]
    }

    /// The per-epoch records of every restart, one line each.
    pub fn lines(&self) -> impl Iterator<Item = String> + '_ {
        self.restarts.iter().flat_map(|r| r.epochs.iter().map(|e| e.to_string()))
    }
}

/// Restart `r` draws its initialization from this seed.
pub fn restart_seed(seed: u64, restart: usize) -> u64 {
    seed.wrapping_add(restart as u64)
}

fn snapshot<F: Scalar>(store: &ParamStore<F>) -> Vec<Tensor<F>> {
    store.iter().map(|p| p.value.clone()).collect()
}

fn restore<F: Scalar>(store: &mut ParamStore<F>, values: Vec<Tensor<F>>) {
    for (p, v) in store.iter_mut().zip(values) {
        p.value = v;
    }
}

/// Mean loss of one pass of mini-batch AdaGrad over `train` in `order`.
fn run_epoch<F: Scalar>(
    model: &mut QrnModel<F>,
    train: &[IndexedExample],
    order: &[usize],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for batch in order.chunks(cfg.batch_size) {
        model.store.zero_grad();
        let scale = F::from_f64(1.0 / batch.len() as f64);
        for &i in batch {
            let mut tape = Tape::new();
            let fwd = model.forward(&mut tape, &train[i], cfg.scan)?;
            total += tape.value(fwd.loss).item().as_f64();
            tape.backward_scaled(fwd.loss, &mut model.store, scale)?;
        }
        add_decay_gradients(&mut model.store, cfg.l2_decay, cfg.decay_biases);
        adagrad_step(&mut model.store, cfg.learning_rate);
    }
    Ok(total / order.len() as f64)
}

fn train_restart<F: Scalar>(
    restart: usize,
    train: &[IndexedExample],
    dev: &[IndexedExample],
    config: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &EpochRecord),
) -> Result<(QrnModel<F>, RestartLog)> {
    let seed = restart_seed(cfg.seed, restart);
    let mut model = QrnModel::<F>::new(config.clone(), seed)?;
    let acc0 = F::from_f64(cfg.initial_accumulator);
    for p in model.store.iter_mut() {
        p.accumulator.data_mut().iter_mut().for_each(|a| *a = acc0);
    }
    let initial_train = evaluate(&model, train, cfg.scan)?;
    let initial_dev = evaluate(&model, dev, cfg.scan)?;
    let mut log = RestartLog {
        restart,
        seed,
        epochs: vec![EpochRecord {
            epoch: 0,
            train_loss: initial_train.mean_loss,
            dev_loss: initial_dev.mean_loss,
            dev_err: initial_dev.error_rate,
        }],
        best_epoch: 0,
        best_dev_loss: initial_dev.mean_loss,
        diverged: None,
    };
    on_epoch(restart, &log.epochs[0]);
    let mut best = snapshot(&model.store);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 1..=cfg.max_epochs {
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let train_loss = run_epoch(&mut model, train, &order, cfg)?;
        if !train_loss.is_finite() {
            let why = format!("training loss became {train_loss} at epoch {epoch}");
            log::warn!("restart {restart} aborted: {why}");
            log.diverged = Some(why);
            break;
        }
        let dev_report = evaluate(&model, dev, cfg.scan)?;
        let record = EpochRecord {
            epoch,
            train_loss,
            dev_loss: dev_report.mean_loss,
            dev_err: dev_report.error_rate,
        };
        on_epoch(restart, &record);
        log.epochs.push(record);
        if dev_report.mean_loss < log.best_dev_loss {
            log.best_dev_loss = dev_report.mean_loss;
            log.best_epoch = epoch;
            best = snapshot(&model.store);
        }
        if epoch - log.best_epoch >= cfg.patience_epochs {
            break;
        }
    }
    restore(&mut model.store, best);
    if let Some(dec) = &mut model.decoder {
        dec.trained = log.best_epoch > 0;
    }
    Ok((model, log))
}

/// Trains `cfg.restarts` independently seeded models with early stopping
/// on dev loss and returns the one with the lowest dev loss.
pub fn train<F: Scalar>(
    train: &[IndexedExample],
    dev: &[IndexedExample],
    config: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<(QrnModel<F>, TrainLog)> {
    train_with_progress(train, dev, config, cfg, &mut |r, e| log::info!("restart {r} {e}"))
}

/// [`train`], reporting every epoch record as it is produced.
pub fn train_with_progress<F: Scalar>(
    train: &[IndexedExample],
    dev: &[IndexedExample],
    config: &ModelConfig,
    cfg: &TrainConfig,
    on_epoch: &mut dyn FnMut(usize, &EpochRecord),
) -> Result<(QrnModel<F>, TrainLog)> {
    cfg.validate()?;
    config.validate()?;
    if train.is_empty() || dev.is_empty() {
        return Err(QrnError::Input("training needs non-empty train and dev sets".into()));
    }
    let start = Instant::now();
    let mut logs = Vec::with_capacity(cfg.restarts);
    let mut best: Option<(usize, QrnModel<F>)> = None;
    for restart in 0..cfg.restarts {
        let (model, log) = train_restart::<F>(restart, train, dev, config, cfg, on_epoch)?;
        let better = log.diverged.is_none()
            && best
                .as_ref()
                .is_none_or(|(i, _)| log.best_dev_loss < logs.get(*i).map_or(f64::INFINITY, |l: &RestartLog| l.best_dev_loss));
        if better {
            best = Some((restart, model));
        }
        logs.push(log);
    }
    let (chosen, model) = best.ok_or_else(|| QrnError::Numeric("every restart diverged".into()))?;
    Ok((
        model,
        TrainLog {
            restarts: logs,
            chosen,
            wall_clock_s: start.elapsed().as_secs_f64(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::{ParamKind, Parameter};

    #[test]
    fn uniform_cross_entropy() {
        let ce = cross_entropy(&[0.25f64; 4], 2).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-15);
        assert!(matches!(cross_entropy(&[0.5f64, 0.5], 2), Err(QrnError::Input(_))));
    }

    #[test]
    fn first_adagrad_step_moves_by_lr() {
        let mut store = ParamStore::<f64>::new();
        let id = store
            .add(Parameter::new("w", ParamKind::Weight, Tensor::row(vec![1.0, 2.0])))
            .unwrap();
        store.get_mut(id).gradient = Tensor::row(vec![1.0, 0.0]);
        adagrad_step(&mut store, 0.5);
        let p = store.get(id);
        assert!((p.value.data()[0] - (1.0 - 0.5 / (1.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(p.value.data()[1], 2.0);
        assert_eq!(p.accumulator.data(), &[1.0, 0.0]);
    }

    #[test]
    fn record_line_format() {
        let r = EpochRecord {
            epoch: 3,
            train_loss: 0.5,
            dev_loss: 0.25,
            dev_err: 0.1,
        };
        assert_eq!(r.to_string(), "epoch=3 train_loss=0.5 dev_loss=0.25 dev_err=0.1");
    }
}
