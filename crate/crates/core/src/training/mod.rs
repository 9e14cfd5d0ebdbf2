//! Mini-batch training, error metrics and evaluation reports.

mod metrics;
mod report;

pub use metrics::{mae, rmse};
pub use report::{downsample_rows, evaluate, generalization_eval, MetricRow, MetricsReport, Oracle, Predictor};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetBundle, StandardizedSequence};
use crate::error::{Error, Result};
use crate::layers::{Bind, Dropout};
use crate::models::{Ablation, HybridModel};
use crate::numerics::{adam_step, AdamConfig, AdamState, Graph, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a new best validation RMSE.
    pub patience: usize,
    pub seed: u64,
    /// Permit a model spec with nonzero dropout.
    pub allow_dropout: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-4,
            batch_size: 32,
            max_epochs: 200,
            patience: 15,
            seed: 0,
            allow_dropout: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be positive"));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::config(format!(
                "patience ({}) must be smaller than max_epochs ({})",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean squared error in standardized target units.
    pub train_loss: f64,
    pub val_rmse_m: f64,
}

#[derive(Clone, Debug, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored.
    pub best_epoch: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_rmse_m\n");
        for e in &self.epochs {
            s.push_str(&format!("{},{:.16e},{:.16e}\n", e.epoch, e.train_loss, e.val_rmse_m));
        }
        s
    }
}

pub struct TrainOutcome {
    pub model: HybridModel,
    pub history: History,
}

/// Loss and per-tensor gradients for one sequence.
fn sequence_gradient(
    model: &HybridModel,
    seq: &StandardizedSequence,
    dropout: Option<(f64, u64)>,
) -> Result<(f64, Vec<Vec<f64>>)> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, Bind::Trainable);
    let x = g.constant(seq.inputs());
    let target = seq.target();
    let n = target.len();
    let y = g.constant(Tensor::matrix(n, 1, target)?);
    let mut rng = dropout.map(|(_, s)| ChaCha8Rng::seed_from_u64(s));
    let drop = match (dropout, rng.as_mut()) {
        (Some((rate, _)), Some(rng)) => Some(Dropout { rate, rng }),
        _ => None,
    };
    let pred = model.forward_graph(&mut g, &vars, x, Ablation::default(), drop)?;
    let loss = g.mse(pred, y)?;
    g.backward(loss)?;
    let grads = vars.all.iter().map(|&v| g.grad_tensor(v).into_data()).collect();
    Ok((g.value(loss).data()[0], grads))
}

/// RMSE in meters of `model` over `seqs`.
pub fn split_rmse(model: &HybridModel, seqs: &[StandardizedSequence], bundle: &DatasetBundle) -> Result<f64> {
    let report = report::score(model, seqs, &bundle.standardization)?;
    Ok(report.0)
}

pub fn train(model: HybridModel, bundle: &DatasetBundle, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model, bundle, cfg, |_| {})
}

/// Like [`train`], calling `on_epoch` after every completed epoch.
pub fn train_with(
    mut model: HybridModel,
    bundle: &DatasetBundle,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let spec = model.spec().clone();
    spec.validate()?;
    if spec.dropout > 0.0 && !cfg.allow_dropout {
        return Err(Error::config(format!(
            "model spec has dropout {}; dropout is disabled unless allow_dropout is set",
            spec.dropout
        )));
    }
    if spec.input_channels != crate::data::INPUT_CHANNELS {
        return Err(Error::config(format!(
            "model expects {} input channels, the bundle has {}",
            spec.input_channels,
            crate::data::INPUT_CHANNELS
        )));
    }
    if bundle.train.is_empty() || bundle.validation.is_empty() {
        return Err(Error::contract("training needs non-empty train and validation splits"));
    }

    let mut params: Vec<Tensor> = model.tensors().into_iter().cloned().collect();
    let mut adam = AdamState::new(
        AdamConfig {
            learning_rate: cfg.learning_rate,
            ..AdamConfig::default()
        },
        &params,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..bundle.train.len()).collect();
    let mut history = History::default();
    let mut best = (f64::INFINITY, params.clone());
    let mut since_best = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let seeds: Vec<Option<(f64, u64)>> = batch
                .iter()
                .map(|_| (spec.dropout > 0.0).then(|| (spec.dropout, rand::Rng::random(&mut rng))))
                .collect();
            let results: Vec<(f64, Vec<Vec<f64>>)> = batch
                .par_iter()
                .zip(seeds)
                .map(|(&i, d)| sequence_gradient(&model, &bundle.train[i], d))
                .collect::<Result<_>>()?;
            let mut grads: Vec<Vec<f64>> = params.iter().map(|p| vec![0.0; p.numel()]).collect();
            let mut batch_loss = 0.0;
            for (loss, gs) in &results {
                batch_loss += loss;
                for (acc, g) in grads.iter_mut().zip(gs) {
                    for (a, v) in acc.iter_mut().zip(g) {
                        *a += v;
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            grads.iter_mut().flatten().for_each(|v| *v *= scale);
            let mean_loss = batch_loss * scale;
            if !mean_loss.is_finite() || grads.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::Divergence {
                    epoch,
                    batch: b + 1,
                    loss: mean_loss,
                });
            }
            loss_sum += batch_loss;
            adam_step(&mut params, &grads, &mut adam)?;
            for (dst, src) in model.tensors_mut().into_iter().zip(&params) {
                dst.data_mut().copy_from_slice(src.data());
            }
        }
        let val = split_rmse(&model, &bundle.validation, bundle)?;
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / bundle.train.len() as f64,
            val_rmse_m: val,
        };
        if !val.is_finite() {
            return Err(Error::Divergence {
                epoch,
                batch: 0,
                loss: val,
            });
        }
        history.epochs.push(record);
        on_epoch(&record);
        if val < best.0 {
            best = (val, params.clone());
            history.best_epoch = epoch;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }

    for (dst, src) in model.tensors_mut().into_iter().zip(&best.1) {
        dst.data_mut().copy_from_slice(src.data());
    }
    Ok(TrainOutcome { model, history })
}
