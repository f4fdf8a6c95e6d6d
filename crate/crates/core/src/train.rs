//! Adam training on full-horizon MSE with early stopping on validation loss.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{window_at, window_origins, SeriesFrame};
use crate::model::{Forecaster, ModelError, ParamVector, RowBatch, SegmentSpec};
use crate::report::fmt_sig;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training frame yields no (T={input_len}, L={output_len}) windows")]
    NoTrainWindows { input_len: usize, output_len: usize },
    #[error("validation frame yields no (T={input_len}, L={output_len}) windows")]
    NoValWindows { input_len: usize, output_len: usize },
    #[error("optimizer length mismatch: params {params}, grad {grad}, moments {moments}")]
    LengthMismatch {
        params: usize,
        grad: usize,
        moments: usize,
    },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn default_max_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    10
}
fn default_lr() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    32
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_beta1")]
    pub adam_beta1: f64,
    #[serde(default = "default_beta2")]
    pub adam_beta2: f64,
    #[serde(default = "default_eps")]
    pub adam_eps: f64,
    #[serde(default)]
    pub shuffle_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: default_max_epochs(),
            patience: default_patience(),
            learning_rate: default_lr(),
            batch_size: default_batch_size(),
            adam_beta1: default_beta1(),
            adam_beta2: default_beta2(),
            adam_eps: default_eps(),
            shuffle_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.to_string()));
        if self.max_epochs == 0 {
            return bad("max_epochs must be >= 1");
        }
        if self.patience == 0 {
            return bad("patience must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1");
        }
        Ok(())
    }
}

/// First and second moment estimates plus the step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self {
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grad: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    if grad.len() != params.len() || state.m.len() != params.len() || state.v.len() != params.len()
    {
        return Err(TrainError::LengthMismatch {
            params: params.len(),
            grad: grad.len(),
            moments: state.m.len().min(state.v.len()),
        });
    }
    state.t += 1;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (((p, &g), m), v) in params
        .iter_mut()
        .zip(grad)
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_eps);
    }
    Ok(())
}

/// Patience-based stopping on strict improvement (`new < best - 1e-9`).
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub const MIN_DELTA: f64 = 1e-9;

    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            stale: 0,
        }
    }

    /// Records a validation loss; returns `true` if it is the new best.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> bool {
        if val_loss < self.best - Self::MIN_DELTA {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based epoch index.
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn best_val_mse(&self) -> f64 {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .map_or(f64::NAN, |e| e.val_mse)
    }

    /// `epoch,train_mse,val_mse,seconds` with 9 significant digits.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_mse,val_mse,seconds\n");
        for e in &self.epochs {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                e.epoch,
                fmt_sig(e.train_mse),
                fmt_sig(e.val_mse),
                fmt_sig(e.seconds)
            );
        }
        out
    }
}

/// Hook invoked once per minibatch with the full-horizon gradient, before the update.
pub trait BatchObserver {
    fn observe(
        &mut self,
        epoch: usize,
        batch_index: usize,
        model: &Forecaster,
        batch: &RowBatch,
        full_grad: &ParamVector,
    ) -> Result<(), ModelError>;
}

struct NoObserver;

impl BatchObserver for NoObserver {
    fn observe(
        &mut self,
        _: usize,
        _: usize,
        _: &Forecaster,
        _: &RowBatch,
        _: &ParamVector,
    ) -> Result<(), ModelError> {
        Ok(())
    }
}

const EVAL_CHUNK: usize = 256;

/// Squared-error sum and element count of the model's full-horizon predictions
/// over every window of `frame` at the given stride.
pub fn squared_error_sum(
    model: &Forecaster,
    frame: &SeriesFrame,
    stride: usize,
) -> Result<(f64, usize), ModelError> {
    let (t, l) = (model.input_len(), model.output_len());
    let origins: Vec<usize> = window_origins(frame, t, l, stride).collect();
    let mut sum = 0.0;
    let mut count = 0;
    for chunk in origins.chunks(EVAL_CHUNK) {
        let samples: Vec<_> = chunk.iter().map(|&o| window_at(frame, o, t, l)).collect();
        let batch = RowBatch::from_samples(&samples)?;
        let pred = model.predict_rows(batch.x.view(), batch.samples);
        sum += pred
            .iter()
            .zip(batch.y.iter())
            .map(|(p, y)| (p - y) * (p - y))
            .sum::<f64>();
        count += pred.len();
    }
    Ok((sum, count))
}

/// Full-horizon MSE over all stride-1 windows of `frame`.
pub fn frame_mse(model: &Forecaster, frame: &SeriesFrame) -> Result<f64, ModelError> {
    let (sum, count) = squared_error_sum(model, frame, 1)?;
    Ok(sum / count as f64)
}

pub fn train(
    model: Forecaster,
    train_frame: &SeriesFrame,
    val_frame: &SeriesFrame,
    cfg: &TrainConfig,
) -> Result<(Forecaster, TrainHistory), TrainError> {
    train_observed(model, train_frame, val_frame, cfg, &mut NoObserver)
}

/// Training loop with a per-batch observer. The observer never alters the
/// parameter trajectory.
pub fn train_observed(
    mut model: Forecaster,
    train_frame: &SeriesFrame,
    val_frame: &SeriesFrame,
    cfg: &TrainConfig,
    observer: &mut dyn BatchObserver,
) -> Result<(Forecaster, TrainHistory), TrainError> {
    cfg.validate()?;
    let (t, l) = (model.input_len(), model.output_len());
    let mut origins: Vec<usize> = window_origins(train_frame, t, l, 1).collect();
    if origins.is_empty() {
        return Err(TrainError::NoTrainWindows {
            input_len: t,
            output_len: l,
        });
    }
    if val_frame.window_count(t, l) == 0 {
        return Err(TrainError::NoValWindows {
            input_len: t,
            output_len: l,
        });
    }

    let full = SegmentSpec::full(l);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.shuffle_seed);
    let mut adam = AdamState::new(model.num_params());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best_params = model.get_params();
    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };

    if model.num_params() == 0 {
        let start = Instant::now();
        let train_mse = frame_mse(&model, train_frame)?;
        let val_mse = frame_mse(&model, val_frame)?;
        history.epochs.push(EpochRecord {
            epoch: 1,
            train_mse,
            val_mse,
            seconds: start.elapsed().as_secs_f64(),
        });
        history.best_epoch = 1;
        return Ok((model, history));
    }

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        origins.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (batch_index, chunk) in origins.chunks(cfg.batch_size).enumerate() {
            let samples: Vec<_> = chunk.iter().map(|&o| window_at(train_frame, o, t, l)).collect();
            let batch = RowBatch::from_samples(&samples)?;
            let (loss, grad) = model
                .batch_loss_and_grads(&batch, &[full])?
                .pop()
                .expect("one segment");
            observer.observe(epoch, batch_index, &model, &batch, &grad)?;
            adam_step(model.params_mut(), grad.values(), &mut adam, cfg)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_mse = loss_sum / origins.len() as f64;
        let val_mse = frame_mse(&model, val_frame)?;
        if stopper.observe(epoch, val_mse) {
            best_params = model.get_params();
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_mse,
            val_mse,
            seconds: start.elapsed().as_secs_f64(),
        });
        if stopper.should_stop() {
            history.stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    history.best_epoch = stopper.best_epoch().max(1);
    model.set_params(&best_params)?;
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adam_zero_gradient_is_fixed_point() {
        let cfg = TrainConfig::default();
        let mut p = vec![1.5, -2.0];
        let mut st = AdamState::new(2);
        st.m = vec![0.4, -0.2];
        st.v = vec![0.1, 0.3];
        adam_step(&mut p, &[0.0, 0.0], &mut st, &cfg).unwrap();
        assert_eq!(st.m, vec![0.9 * 0.4, 0.9 * -0.2]);
        assert_eq!(st.v, vec![0.999 * 0.1, 0.999 * 0.3]);
        // zero gradient with nonzero momentum still moves; from fresh state it must not
        let mut p2 = vec![1.5, -2.0];
        let mut fresh = AdamState::new(2);
        adam_step(&mut p2, &[0.0, 0.0], &mut fresh, &cfg).unwrap();
        assert_eq!(p2, vec![1.5, -2.0]);
        assert!(p[0] < 1.5);
    }

    #[test]
    fn adam_first_step_value() {
        let cfg = TrainConfig::default();
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        adam_step(&mut p, &[1.0], &mut st, &cfg).unwrap();
        // m_hat = 1, v_hat = 1 after bias correction
        let expected = -1e-3 / (1.0 + 1e-8);
        assert!((p[0] - expected).abs() < 1e-18);
        assert!((p[0] + 9.99999990e-4).abs() < 1e-12);
    }

    #[test]
    fn adam_length_mismatch() {
        let cfg = TrainConfig::default();
        let mut st = AdamState::new(2);
        assert!(matches!(
            adam_step(&mut [0.0, 0.0], &[1.0], &mut st, &cfg),
            Err(TrainError::LengthMismatch { .. })
        ));
    }

    #[test]
    fn patience_rule() {
        // improves until epoch 3, strictly worse afterwards
        let losses = [5.0, 4.0, 3.0, 3.5, 4.0, 4.5, 5.0, 5.5, 6.0, 7.0];
        let patience = 4;
        let mut es = EarlyStopping::new(patience);
        let mut stop_epoch = None;
        for (i, &v) in losses.iter().enumerate() {
            es.observe(i + 1, v);
            if es.should_stop() {
                stop_epoch = Some(i + 1);
                break;
            }
        }
        assert_eq!(stop_epoch, Some(3 + patience));
        assert_eq!(es.best_epoch(), 3);
    }

    #[test]
    fn improvement_below_threshold_is_stale() {
        let mut es = EarlyStopping::new(1);
        assert!(es.observe(1, 1.0));
        assert!(!es.observe(2, 1.0 - 1e-10));
        assert!(es.should_stop());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.batch_size = 0;
        assert!(cfg.validate().is_err());
        let cfg: TrainConfig = serde_json::from_str("{\"learning_rate\": 0.005}").unwrap();
        assert_eq!((cfg.max_epochs, cfg.patience, cfg.batch_size), (100, 10, 32));
    }
}
