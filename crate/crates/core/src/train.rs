//! Maximum-likelihood training with Adam.

use std::time::Instant;

use rand::seq::SliceRandom;
use thiserror::Error;

use crate::autograd::{self, AutogradError, Parameter, Tensor};
use crate::flow::{Flow, FlowError, FlowModel, ModelShape};
use crate::points::PointSet;
use crate::rng::{stream_rng, Stream};
use crate::targets::{sample_target, TargetError, TargetSpec};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at batch row {row}")]
    NonFiniteLoss { row: usize },
    #[error("training diverged in epoch {}: non-finite loss", .epoch + 1)]
    /// `epoch` counts from 0.
    Diverged { epoch: usize, trace: TrainTrace },
    #[error("optimizer shape mismatch for parameter {index}: {expected:?} vs {found:?}")]
    Shape {
        index: usize,
        expected: (usize, usize),
        found: (usize, usize),
    },
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Autograd(#[from] AutogradError),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub dataset_size: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    /// Global gradient-norm clip.
    pub clip_norm: f64,
    pub shape: ModelShape,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1000,
            batch_size: 500,
            dataset_size: 10_000,
            seed: 0,
            adam: AdamConfig::default(),
            clip_norm: 100.0,
            shape: ModelShape::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(TrainError::Config(m.into()));
        if self.batch_size == 0 || self.dataset_size == 0 {
            return bad("batch_size and dataset_size must be positive");
        }
        if self.batch_size > self.dataset_size {
            return bad("batch_size must not exceed dataset_size");
        }
        let a = &self.adam;
        if !(a.learning_rate > 0.0 && a.eps > 0.0 && self.clip_norm > 0.0) {
            return bad("learning_rate, adam eps and clip_norm must be positive");
        }
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2)) {
            return bad("adam betas must be in [0, 1)");
        }
        self.shape.validate().map_err(|e| TrainError::Config(e.to_string()))
    }
}

/// A step whose gradient norm exceeded the clip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClipEvent {
    pub epoch: usize,
    pub step: usize,
    pub norm: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainTrace {
    /// Mean NLL of the training set under the initial model.
    pub initial_nll: f64,
    /// Size-weighted mean of the minibatch losses seen during each epoch.
    pub epoch_nll: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub clips: Vec<ClipEvent>,
}

impl TrainTrace {
    pub fn epochs(&self) -> usize {
        self.epoch_nll.len()
    }

    /// `epoch,nll` rows, epochs numbered from 1.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,nll\n");
        for (i, v) in self.epoch_nll.iter().enumerate() {
            out.push_str(&format!("{},{}\n", i + 1, crate::io::fmt_f64(*v)));
        }
        out
    }
}

/// `-(1/n) Σ log q_X(xᵢ)` for any flow.
pub fn mean_nll<F: Flow + ?Sized>(flow: &F, batch: &PointSet) -> Result<f64> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let mut total = 0.0;
    for (row, x) in batch.iter().enumerate() {
        let lp = match flow.log_density(x) {
            Ok(v) => v,
            Err(FlowError::NonFinite { .. }) => f64::NAN,
            Err(e) => return Err(e.into()),
        };
        if !lp.is_finite() {
            return Err(TrainError::NonFiniteLoss { row });
        }
        total -= lp;
    }
    Ok(total / batch.len() as f64)
}

/// Mean NLL of `batch` under `model`.
pub fn nll_loss(model: &FlowModel, batch: &PointSet) -> Result<f64> {
    Ok(nll_loss_and_gradients(model, batch)?.0)
}

/// Mean NLL and its gradient with respect to every parameter, in
/// [`FlowModel::parameters`] order.
pub fn nll_loss_and_gradients(model: &FlowModel, batch: &PointSet) -> Result<(f64, Vec<Tensor>)> {
    if batch.is_empty() {
        return Err(TrainError::Config("empty batch".into()));
    }
    let params = model.parameters();
    let n = batch.len() as f64;
    let mut rows = None;
    let rec = autograd::record_forward(&[batch.to_tensor()], &params, |tape, ins, ps| {
        let lp = model.record_log_density(tape, ins[0], ps)?;
        rows = Some(lp);
        let s = tape.sum(lp)?;
        tape.scale(s, -1.0 / n)
    })?;
    let per_row = rec.tape.value(rows.expect("recorded"))?;
    if let Some(row) = per_row.data().iter().position(|v| !v.is_finite()) {
        return Err(TrainError::NonFiniteLoss { row });
    }
    let loss = rec.output_value().item();
    let grads = rec.tape.backward(rec.output)?;
    let out = rec
        .params
        .iter()
        .zip(&params)
        .map(|(v, p)| grads.get_or_zeros(*v, p.shape()))
        .collect();
    Ok((loss, out))
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &[&Parameter]) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.value().len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// One bias-corrected Adam update.
pub fn adam_step(params: &mut [&mut Parameter], grads: &[Tensor], state: &mut AdamState, config: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(TrainError::Shape {
            index: params.len().min(grads.len()),
            expected: (params.len(), 0),
            found: (grads.len(), 0),
        });
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || state.m[i].len() != g.len() {
            return Err(TrainError::Shape {
                index: i,
                expected: p.shape(),
                found: g.shape(),
            });
        }
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - config.beta1.powi(t);
    let bc2 = 1.0 - config.beta2.powi(t);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, (w, &gj)) in p.values_mut().iter_mut().zip(g.data()).enumerate() {
            m[j] = config.beta1 * m[j] + (1.0 - config.beta1) * gj;
            v[j] = config.beta2 * v[j] + (1.0 - config.beta2) * gj * gj;
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            *w -= config.learning_rate * m_hat / (v_hat.sqrt() + config.eps);
        }
    }
    Ok(())
}

fn clip_gradients(grads: &mut [Tensor], max_norm: f64) -> Option<f64> {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        Some(norm)
    } else {
        None
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FlowModel,
    pub trace: TrainTrace,
    pub data: PointSet,
}

impl TrainOutcome {
    /// Mean NLL of the training set under the trained model.
    pub fn final_nll(&self) -> Result<f64> {
        mean_nll(&self.model, &self.data)
    }
}

/// Trains a fresh identity-initialized model on `config.dataset_size` draws
/// from `spec`.
pub fn train(spec: &TargetSpec, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let data = sample_target(spec, config.dataset_size, config.seed)?;
    let model = FlowModel::new(&config.shape, &mut stream_rng(config.seed, Stream::Init))?;
    train_model(model, data, config)
}

/// Trains `model` on `data` for `config.epochs` epochs.
pub fn train_model(mut model: FlowModel, data: PointSet, config: &TrainConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let mut trace = TrainTrace {
        initial_nll: mean_nll(&model, &data)?,
        ..Default::default()
    };
    let mut shuffle = stream_rng(config.seed, Stream::Shuffle);
    let mut state = AdamState::new(&model.parameters());
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        order.shuffle(&mut shuffle);
        let mut weighted = 0.0;
        for (step, idx) in order.chunks(config.batch_size).enumerate() {
            let batch = data.select(idx);
            let (loss, mut grads) = match nll_loss_and_gradients(&model, &batch) {
                Ok(v) => v,
                Err(TrainError::NonFiniteLoss { .. }) => return Err(TrainError::Diverged { epoch, trace }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
                return Err(TrainError::Diverged { epoch, trace });
            }
            if let Some(norm) = clip_gradients(&mut grads, config.clip_norm) {
                trace.clips.push(ClipEvent { epoch, step, norm });
            }
            adam_step(&mut model.parameters_mut(), &grads, &mut state, &config.adam)?;
            weighted += loss * idx.len() as f64;
        }
        trace.epoch_nll.push(weighted / data.len() as f64);
        trace.epoch_seconds.push(start.elapsed().as_secs_f64());
    }
    Ok(TrainOutcome { model, trace, data })
}
