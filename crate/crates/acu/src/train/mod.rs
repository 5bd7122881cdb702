//! Desk-scale training: losses, the iteration loop, and run traces.

pub mod config;
pub mod network;
pub mod sgd;
pub mod task;

pub use config::{lr_at, single_group_warmup, LossKind, PositionGradNorm, Schedule, TrainConfig};
pub use network::{DenseLayer, Layer, LayerGrads, NamedLayer, NetGrads, ParamEntry, ParamKind, ToyNetwork};
pub use sgd::{sgd_step, OptimizerState};
pub use task::{make_multi_shift_task, make_shift_task, Dataset, Targets};

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{stream, Tensor4};

/// Mean squared error and its gradient with respect to the prediction.
pub fn mse_loss(pred: &Tensor4, target: &Tensor4) -> Result<(f64, Tensor4)> {
    if !pred.same_shape(target) {
        return Err(Error::InvalidArgument(format!(
            "prediction shape {:?} does not match target {:?}",
            pred.dims(),
            target.dims()
        )));
    }
    let inv = 1.0 / pred.numel() as f64;
    let mut loss = 0.0;
    let mut grad = Tensor4::zeros(pred.n(), pred.c(), pred.h(), pred.w());
    for ((g, &p), &t) in grad
        .as_mut_slice()
        .iter_mut()
        .zip(pred.as_slice())
        .zip(target.as_slice())
    {
        let d = p - t;
        loss += d * d * inv;
        *g = 2.0 * d * inv;
    }
    Ok((loss, grad))
}

/// Batch-mean softmax cross-entropy over `(n, classes, 1, 1)` logits.
pub fn softmax_ce_loss(logits: &Tensor4, labels: &[usize]) -> Result<(f64, Tensor4)> {
    let (n, classes, h, w) = logits.dims();
    if h != 1 || w != 1 {
        return Err(Error::InvalidArgument(
            "classification head expects (n, classes, 1, 1) logits".into(),
        ));
    }
    if labels.len() != n {
        return Err(Error::InvalidArgument(format!(
            "{n} logits rows but {} labels",
            labels.len()
        )));
    }
    let mut loss = 0.0;
    let mut grad = Tensor4::zeros(n, classes, 1, 1);
    let inv_n = 1.0 / n as f64;
    for b in 0..n {
        let label = labels[b];
        if label >= classes {
            return Err(Error::InvalidArgument(format!(
                "label {label} out of range for {classes} classes"
            )));
        }
        let row: Vec<f64> = (0..classes).map(|c| logits.get(b, c, 0, 0)).collect();
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|z| (z - max).exp()).collect();
        let denom: f64 = exps.iter().sum();
        loss += (denom.ln() - (row[label] - max)) * inv_n;
        for c in 0..classes {
            let softmax = exps[c] / denom;
            let onehot = if c == label { 1.0 } else { 0.0 };
            grad.set(b, c, 0, 0, (softmax - onehot) * inv_n);
        }
    }
    Ok((loss, grad))
}

fn batch_loss(pred: &Tensor4, targets: &Targets, kind: LossKind) -> Result<(f64, Tensor4)> {
    match (targets, kind) {
        (Targets::Fields(t), LossKind::Mse) => mse_loss(pred, t),
        (Targets::Classes(labels), LossKind::SoftmaxCrossEntropy) => {
            softmax_ce_loss(pred, labels)
        }
        _ => Err(Error::InvalidArgument(
            "loss kind does not match the dataset targets".into(),
        )),
    }
}

/// Loss of the whole dataset in one deterministic evaluation pass.
pub fn dataset_loss(net: &ToyNetwork, data: &Dataset, kind: LossKind) -> Result<f64> {
    let pred = net.forward(&data.inputs)?;
    Ok(batch_loss(&pred, &data.targets, kind)?.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossRecord {
    pub iter: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PositionRecord {
    pub iter: usize,
    pub layer: String,
    pub group: usize,
    pub synapse: usize,
    pub alpha: f64,
    pub beta: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub loss_trace: Vec<LossRecord>,
    pub position_trace: Vec<PositionRecord>,
    /// Whole-dataset loss before the first step.
    pub initial_loss: f64,
    /// Whole-dataset loss after the last step.
    pub final_loss: f64,
}

fn record_positions(net: &ToyNetwork, iter: usize, out: &mut Vec<PositionRecord>) {
    net.visit_acu(&mut |path, layer| {
        for g in 0..layer.geometry.groups {
            for k in 0..layer.synapses() {
                let (alpha, beta) = layer.position(g, k);
                out.push(PositionRecord {
                    iter,
                    layer: path.to_string(),
                    group: g,
                    synapse: k,
                    alpha,
                    beta,
                });
            }
        }
    });
}

/// Runs the configured number of iterations in place.
///
/// Minibatches are drawn with replacement from a stream keyed by the config
/// seed, so a run is a pure function of `(network, dataset, config)`. The
/// batch loss and learning rate are recorded every `log_every` iterations
/// and at the final step; the effective per-group positions of every
/// position-based layer are recorded on the same schedule.
///
/// If the batch loss turns non-finite the network is restored to its state
/// before the step that broke it and [`Error::Diverged`] is returned.
pub fn train(net: &mut ToyNetwork, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidArgument("empty dataset".into()));
    }
    let initial_loss = dataset_loss(net, data, cfg.loss)?;
    let mut report = TrainReport {
        loss_trace: Vec::new(),
        position_trace: Vec::new(),
        initial_loss,
        final_loss: initial_loss,
    };
    let mut rng = stream(cfg.seed, "batches");
    let mut state = OptimizerState::new();
    let mut last_good = net.clone();

    for iter in 0..cfg.total_iters {
        let indices: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..data.len()))
            .collect();
        let (x, targets) = data.batch(&indices);
        let (pred, cache) = net.forward_cached(&x)?;
        let (loss, d_pred) = batch_loss(&pred, &targets, cfg.loss)?;
        if !loss.is_finite() {
            *net = last_good;
            return Err(Error::Diverged { iter, loss });
        }
        last_good = net.clone();
        let (grads, _) = net.backward(&cache, &d_pred)?;
        sgd_step(net, &grads, &mut state, cfg, iter)?;

        if iter % cfg.log_every == 0 || iter + 1 == cfg.total_iters {
            report.loss_trace.push(LossRecord {
                iter,
                loss,
                lr: lr_at(cfg, iter),
            });
            record_positions(net, iter, &mut report.position_trace);
        }
    }
    report.final_loss = dataset_loss(net, data, cfg.loss)?;
    Ok(report)
}
