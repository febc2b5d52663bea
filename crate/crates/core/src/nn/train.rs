use std::fmt::Write as _;
use std::time::{Duration, Instant};

use rand::seq::{index, SliceRandom};
use rand::RngCore;

use super::{Gradients, Network, Workspace};
use crate::dataset::LabeledDataset;
use crate::error::{invalid, Error, Result};
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub shuffle_each_epoch: bool,
    /// Evaluate every this many epochs (the last epoch always); 0 means
    /// only after the last epoch.
    pub eval_every: usize,
    /// Stops after the epoch that crosses this wall-clock budget.
    pub time_limit: Option<Duration>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 0,
            shuffle_each_epoch: true,
            eval_every: 1,
            time_limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy of the training-mode predictions made while fitting.
    pub train_acc: f64,
    pub eval_acc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,mean_loss,train_acc,eval_acc\n");
        for e in &self.epochs {
            let eval = e.eval_acc.map(|a| a.to_string()).unwrap_or_default();
            let _ = writeln!(out, "{},{},{},{eval}", e.epoch, e.mean_loss, e.train_acc);
        }
        out
    }

    pub fn last(&self) -> Option<&EpochStats> {
        self.epochs.last()
    }
}

fn check_compatible(net: &Network, ds: &LabeledDataset) -> Result<()> {
    let task = ds.task().num_classes();
    if net.num_classes() != task {
        return Err(Error::ClassCountMismatch {
            net: net.num_classes(),
            task,
        });
    }
    if let Some(shape) = ds.shape() {
        if shape.len() != net.input_shape().len() {
            return Err(Error::Shape {
                layer: 0,
                msg: format!(
                    "samples have {} values, network expects {}",
                    shape.len(),
                    net.input_shape().len()
                ),
            });
        }
    }
    Ok(())
}

pub(crate) fn accuracy(net: &Network, ds: &LabeledDataset) -> Result<f64> {
    let xs: Vec<&[f64]> = ds.samples().iter().map(|s| &s.values[..]).collect();
    let preds = net.predict_many(&xs)?;
    let hits = preds
        .iter()
        .zip(ds.samples())
        .filter(|(p, s)| p.label == s.label as usize)
        .count();
    Ok(hits as f64 / ds.len().max(1) as f64)
}

/// Mini-batch SGD on the mean batch loss. Batches follow a seeded
/// per-epoch shuffle and the final short batch is kept.
pub fn train(
    net: &mut Network,
    train_ds: &LabeledDataset,
    config: &TrainConfig,
    eval_ds: Option<&LabeledDataset>,
) -> Result<TrainHistory> {
    if config.epochs == 0 || config.batch_size == 0 {
        return Err(invalid("epochs and batch size must be at least 1"));
    }
    if train_ds.is_empty() {
        return Err(invalid("training set is empty"));
    }
    check_compatible(net, train_ds)?;
    if let Some(e) = eval_ds {
        check_compatible(net, e)?;
    }

    let started = Instant::now();
    let n = train_ds.len();
    let samples = train_ds.samples();
    let mut wss: Vec<Workspace> = (0..config.batch_size.min(n)).map(|_| Workspace::new(net)).collect();
    let mut total = Gradients::zeros_like(net);
    let mut order: Vec<usize> = (0..n).collect();
    let mut history = TrainHistory::default();

    for epoch in 0..config.epochs {
        if config.shuffle_each_epoch {
            order.shuffle(&mut rng::stream(config.seed, rng::TAG_SHUFFLE, epoch as u64));
        }
        let mut dropout = rng::stream(config.seed, rng::TAG_DROPOUT, epoch as u64);
        let (mut loss_sum, mut hits) = (0.0, 0usize);

        for batch in order.chunks(config.batch_size) {
            let keys: Vec<u64> = batch.iter().map(|_| dropout.next_u64()).collect();
            let xs: Vec<&[f64]> = batch.iter().map(|&i| &samples[i].values[..]).collect();
            let active = &mut wss[..batch.len()];
            net.forward_batch(&xs, true, &keys, active, net.layers.len());
            let mut dlast = Vec::with_capacity(batch.len());
            for (ws, &i) in active.iter().zip(batch) {
                let label = samples[i].label as usize;
                let raw = ws.output();
                hits += usize::from(super::argmax(raw) == label);
                let (loss, grad) = net.head.loss(raw, label)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss);
                }
                loss_sum += loss;
                dlast.push(grad);
            }
            let dlast: Vec<&[f64]> = dlast.iter().map(|g| &g[..]).collect();
            net.backward_batch(&xs, active, &dlast, &mut total);
            total.divide(batch.len() as f64);
            net.sgd_step(&total, config.learning_rate)?;
        }

        let last = epoch + 1 == config.epochs;
        let out_of_time = config.time_limit.is_some_and(|t| started.elapsed() >= t);
        let due = config.eval_every > 0 && (epoch + 1) % config.eval_every == 0;
        let eval_acc = match eval_ds {
            Some(e) if due || last || out_of_time => Some(accuracy(net, e)?),
            _ => None,
        };
        history.epochs.push(EpochStats {
            epoch: epoch + 1,
            mean_loss: loss_sum / n as f64,
            train_acc: hits as f64 / n as f64,
            eval_acc,
        });
        if out_of_time && !last {
            history.stopped_early = true;
            break;
        }
    }
    Ok(history)
}

/// Largest relative disagreement between backpropagated gradients and
/// central differences `(L(θ+ε) − L(θ−ε)) / 2ε`, in evaluation mode.
/// Networks with more than 2000 parameters are checked on a seeded subset
/// of 500.
pub fn gradient_check(net: &Network, x: &[f64], label: usize, eps: f64) -> Result<f64> {
    net.check_input(x)?;
    let loss_at = |n: &Network, ws: &mut [Workspace]| -> Result<(f64, Vec<f64>)> {
        n.forward_batch(&[x], false, &[0], ws, n.layers.len());
        let (loss, grad) = n.head.loss(ws[0].output(), label)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        Ok((loss, grad))
    };
    let mut ws = [Workspace::new(net)];
    let (_, grad) = loss_at(net, &mut ws)?;
    let mut analytic = Gradients::zeros_like(net);
    net.backward_batch(&[x], &mut ws, &[&grad], &mut analytic);
    let analytic = analytic.layers;

    let mut params: Vec<(usize, bool, usize)> = Vec::new();
    for (l, layer) in net.layers.iter().enumerate() {
        params.extend((0..layer.weights.len()).map(|i| (l, false, i)));
        params.extend((0..layer.bias.len()).map(|i| (l, true, i)));
    }
    if params.len() > 2000 {
        let mut r = rng::stream(0, rng::TAG_INIT, u64::MAX);
        let pick = index::sample(&mut r, params.len(), 500).into_vec();
        params = pick.into_iter().map(|i| params[i]).collect();
    }

    let mut probe = net.clone();
    let mut worst = 0.0f64;
    for (l, is_bias, i) in params {
        let orig = *param_mut(&mut probe, l, is_bias, i);
        *param_mut(&mut probe, l, is_bias, i) = orig + eps;
        let (up, _) = loss_at(&probe, &mut ws)?;
        *param_mut(&mut probe, l, is_bias, i) = orig - eps;
        let (down, _) = loss_at(&probe, &mut ws)?;
        *param_mut(&mut probe, l, is_bias, i) = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = if is_bias {
            analytic[l].bias[i]
        } else {
            analytic[l].weights[i]
        };
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-12));
    }
    Ok(worst)
}

fn param_mut(net: &mut Network, layer: usize, is_bias: bool, i: usize) -> &mut f64 {
    let l = &mut net.layers[layer];
    if is_bias {
        &mut l.bias[i]
    } else {
        &mut l.weights[i]
    }
}
