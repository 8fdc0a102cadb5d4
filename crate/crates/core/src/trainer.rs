//! SGD training of weights and scale parameters.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::complexity::{gmacs_loss, total_loss};
use crate::datagen::Dataset;
use crate::dynopool::{ScaleParam, ALPHA_MAX};
use crate::error::{Error, Result};
use crate::network::{LayerShape, Model};
use crate::tensor::{Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    Cosine,
    Constant,
}

impl Schedule {
    /// Learning-rate multiplier at `epoch` of `total` (epoch 0 is the start).
    pub fn factor(self, epoch: usize, total: usize) -> f64 {
        match self {
            Schedule::Constant => 1.0,
            Schedule::Cosine if total == 0 => 1.0,
            Schedule::Cosine => 0.5 * (1.0 + (PI * epoch as f64 / total as f64).cos()),
        }
    }
}

/// Default lower bound on α during training, i.e. r ≤ 2. Steps of fixed size
/// in α move r = 1/α faster and faster as α shrinks, and unchecked growth
/// soon produces feature maps that do not fit in memory.
pub const TRAIN_ALPHA_FLOOR: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_weights: f64,
    pub lr_alpha: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Weight of the complexity term, relative to the model's initial GMACs.
    pub lambda: f64,
    pub seed: u64,
    pub schedule: Schedule,
    pub alpha_clamp: (f64, f64),
    /// Keep every α at its initial value (fixed-shape baseline).
    pub freeze_scales: bool,
    /// Fraction of samples held out for evaluation.
    pub eval_fraction: f64,
    /// Batch shards whose gradients are summed in shard order.
    pub shards: usize,
    /// Worker threads used to run shards.
    pub threads: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 32,
            lr_weights: 0.02,
            lr_alpha: 1e-3,
            momentum: 0.9,
            weight_decay: 5e-4,
            lambda: 0.0,
            seed: 0,
            schedule: Schedule::Cosine,
            alpha_clamp: (TRAIN_ALPHA_FLOOR, ALPHA_MAX),
            freeze_scales: false,
            eval_fraction: 0.1,
            shards: 1,
            threads: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.shards == 0 || self.threads == 0 {
            return Err(Error::invalid("batch size, shards and threads must be positive"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!("lambda must be non-negative, got {}", self.lambda)));
        }
        if !(0.0..1.0).contains(&self.eval_fraction) {
            return Err(Error::invalid("eval fraction must be in [0, 1)"));
        }
        let (lo, hi) = self.alpha_clamp;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid(format!("bad alpha clamp ({lo}, {hi})")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResizerState {
    pub layer: usize,
    pub resizer: usize,
    pub r_h: f64,
    pub r_w: f64,
}

/// One epoch of logged training progress. Epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub eval_acc: f64,
    /// GMACs of the discrete architecture after this epoch.
    pub gmacs: f64,
    pub resizers: Vec<ResizerState>,
    pub layers: Vec<LayerShape>,
}

pub const CSV_HEADER: &str = "epoch,train_loss,train_acc,eval_acc,gmacs,resizer_id,r_h,r_w,layer_id,h,w";

/// One CSV line per spatial layer; resizer columns are filled on resizer
/// layers and empty elsewhere.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::new();
    out.push_str(CSV_HEADER);
    out.push('\n');
    for row in rows {
        for shape in &row.layers {
            let resizer = row.resizers.iter().find(|r| r.layer == shape.layer);
            let _ = write!(
                out,
                "{},{},{},{},{},",
                row.epoch, row.train_loss, row.train_acc, row.eval_acc, row.gmacs
            );
            match resizer {
                Some(r) => {
                    let _ = write!(out, "{},{},{},", r.resizer, r.r_h, r.r_w);
                }
                None => out.push_str(",,,"),
            }
            let _ = writeln!(out, "{},{},{}", shape.layer, shape.h, shape.w);
        }
    }
    out
}

pub fn write_metrics(path: &Path, rows: &[MetricsRow]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(metrics_csv(rows).as_bytes())?;
    Ok(())
}

/// SGD with heavy-ball momentum: `v ← μv + (g + wd·p)`, `p ← p − lr·v`.
pub fn sgd_step(param: &mut [f64], grad: &[f64], velocity: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) {
    for ((p, g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        let d = g + weight_decay * *p;
        *v = momentum * *v + d;
        *p -= lr * *v;
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub model: Model,
    /// Momentum buffers aligned with [`Model::named_tensors`].
    pub velocity: Vec<Tensor>,
    /// Completed epochs.
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: Model) -> Self {
        let velocity = model
            .named_tensors()
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape()).expect("non-empty"))
            .collect();
        Self {
            model,
            velocity,
            epoch: 0,
        }
    }
}

/// Deterministic 90/10-style split of sample indices.
pub fn split_indices(n: usize, eval_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    idx.shuffle(&mut rng);
    let n_eval = (n as f64 * eval_fraction).round() as usize;
    let eval = idx[..n_eval].to_vec();
    let train = idx[n_eval..].to_vec();
    (train, eval)
}

fn epoch_order(train: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut order = train.to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    order.shuffle(&mut rng);
    order
}

struct BatchResult {
    loss: f64,
    correct: usize,
    shapes: Vec<LayerShape>,
    gmacs: f64,
    grads: Option<Vec<Vec<f64>>>,
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &label)| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == label
        })
        .count()
}

/// Forward (and optionally backward) pass of one shard. `weight` scales the
/// shard's mean task loss to its share of the batch; the complexity term is
/// added only when `with_complexity` is set.
fn run_shard(
    model: &Model,
    batch: &Tensor,
    labels: &[usize],
    weight: f64,
    complexity: Option<f64>,
    want_grads: bool,
) -> Result<BatchResult> {
    let mut g = Graph::new();
    let pass = model.forward(&mut g, batch)?;
    let task = g.softmax_cross_entropy(pass.logits, labels)?;
    let correct = count_correct(g.value(pass.logits), labels);
    let task_value = g.item(task);
    let scaled = g.scale(task, weight);
    let objective = match complexity {
        Some(lambda) if lambda > 0.0 => {
            let gm = gmacs_loss(&mut g, &pass.ledger)?;
            total_loss(&mut g, scaled, gm, lambda / model.initial_gmacs())?
        }
        _ => scaled,
    };
    let grads = if want_grads {
        g.backward(objective)?;
        let mut grads = Vec::new();
        let grad_or_zero = |g: &Graph, v| {
            g.grad(v)
                .map(|t| t.data().to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(v).numel()])
        };
        for &(w, b) in &pass.weight_vars {
            grads.push(grad_or_zero(&g, w));
            grads.push(grad_or_zero(&g, b));
        }
        for s in &pass.scale_vars {
            let gh = grad_or_zero(&g, s.alpha_h)[0];
            let gw = grad_or_zero(&g, s.alpha_w)[0];
            grads.push(vec![gh, gw]);
        }
        Some(grads)
    } else {
        None
    };
    Ok(BatchResult {
        loss: task_value,
        correct,
        shapes: pass.shapes,
        gmacs: pass.ledger.discrete_gmacs(),
        grads,
    })
}

/// Runs a batch split into `cfg.shards` pieces on up to `cfg.threads`
/// workers; results are combined in shard order.
fn run_batch(model: &Model, data: &Dataset, indices: &[usize], cfg: &TrainConfig, want_grads: bool) -> Result<BatchResult> {
    let shards = cfg.shards.min(indices.len()).max(1);
    let per = indices.len().div_ceil(shards);
    let pieces: Vec<&[usize]> = indices.chunks(per).collect();
    let total = indices.len() as f64;
    let lambda = if want_grads { Some(cfg.lambda) } else { None };
    let job = |i: usize, piece: &[usize]| -> Result<BatchResult> {
        let (batch, labels) = data.batch(piece)?;
        let complexity = if i == 0 { lambda } else { None };
        run_shard(model, &batch, &labels, piece.len() as f64 / total, complexity, want_grads)
    };
    let mut results: Vec<Result<BatchResult>> = Vec::with_capacity(pieces.len());
    for chunk in pieces.chunks(cfg.threads.max(1)).enumerate() {
        let (base, group) = chunk;
        let base = base * cfg.threads.max(1);
        if group.len() == 1 {
            results.push(job(base, group[0]));
            continue;
        }
        let out: Vec<Result<BatchResult>> = std::thread::scope(|s| {
            let handles: Vec<_> = group
                .iter()
                .enumerate()
                .map(|(j, piece)| s.spawn(move || job(base + j, piece)))
                .collect();
            handles.into_iter().map(|h| h.join().expect("shard worker panicked")).collect()
        });
        results.extend(out);
    }
    let mut combined: Option<BatchResult> = None;
    for (r, piece) in results.into_iter().zip(&pieces) {
        let r = r?;
        let share = piece.len() as f64 / total;
        combined = Some(match combined {
            None => BatchResult {
                loss: r.loss * share,
                ..r
            },
            Some(mut acc) => {
                acc.loss += r.loss * share;
                acc.correct += r.correct;
                if let (Some(a), Some(b)) = (acc.grads.as_mut(), r.grads) {
                    for (x, y) in a.iter_mut().zip(b) {
                        for (p, q) in x.iter_mut().zip(y) {
                            *p += q;
                        }
                    }
                }
                acc
            }
        });
    }
    combined.ok_or_else(|| Error::invalid("empty batch"))
}

struct Evaluation {
    loss: f64,
    acc: f64,
    shapes: Vec<LayerShape>,
    gmacs: f64,
}

fn evaluate(model: &Model, data: &Dataset, indices: &[usize], cfg: &TrainConfig) -> Result<Evaluation> {
    let mut loss = 0.0;
    let mut correct = 0;
    let mut shapes = Vec::new();
    let mut gmacs = model.initial_gmacs();
    for chunk in indices.chunks(cfg.batch_size.max(1) * 4) {
        let r = run_batch(model, data, chunk, cfg, false)?;
        loss += r.loss * chunk.len() as f64;
        correct += r.correct;
        shapes = r.shapes;
        gmacs = r.gmacs;
    }
    let n = indices.len().max(1) as f64;
    Ok(Evaluation {
        loss: loss / n,
        acc: correct as f64 / n,
        shapes,
        gmacs,
    })
}

fn resizer_states(model: &Model) -> Vec<ResizerState> {
    let ratios = model.ratios();
    model
        .resizer_layers()
        .into_iter()
        .map(|(layer, resizer, slot)| ResizerState {
            layer,
            resizer,
            r_h: ratios[slot].0,
            r_w: ratios[slot].1,
        })
        .collect()
}

fn apply_update(state: &mut TrainState, grads: &[Vec<f64>], cfg: &TrainConfig, factor: f64) {
    let n_weights = state.model.weights.len();
    for (k, (w, b)) in state.model.weights.iter_mut().enumerate() {
        for (j, t) in [w, b].into_iter().enumerate() {
            let idx = 2 * k + j;
            sgd_step(
                t.data_mut(),
                &grads[idx],
                state.velocity[idx].data_mut(),
                cfg.lr_weights * factor,
                cfg.momentum,
                cfg.weight_decay,
            );
        }
    }
    if cfg.freeze_scales {
        return;
    }
    for (slot, scale) in state.model.scales.iter_mut().enumerate() {
        let idx = 2 * n_weights + slot;
        let mut alpha = [scale.alpha_h, scale.alpha_w];
        sgd_step(
            &mut alpha,
            &grads[idx],
            state.velocity[idx].data_mut(),
            cfg.lr_alpha * factor,
            cfg.momentum,
            0.0,
        );
        let mut next = ScaleParam {
            alpha_h: alpha[0],
            alpha_w: alpha[1],
        };
        next.clamp(cfg.alpha_clamp.0, cfg.alpha_clamp.1);
        *scale = next;
    }
}

/// Trains until `cfg.epochs` epochs are complete, starting from whatever
/// `state.epoch` says. Emits an epoch-0 row when starting fresh, then one
/// row per finished epoch. `on_epoch` sees the state after every epoch.
pub fn train_with(
    state: &mut TrainState,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&TrainState, &MetricsRow) -> Result<()>,
) -> Result<Vec<MetricsRow>> {
    cfg.validate()?;
    let (c, h, w) = data.image_shape();
    if (c, h, w) != state.model.spec.input {
        return Err(Error::invalid(format!(
            "dataset images are {c}x{h}x{w} but the network expects {:?}",
            state.model.spec.input
        )));
    }
    if data.num_classes != state.model.spec.num_classes {
        return Err(Error::invalid(format!(
            "dataset has {} classes but the network predicts {}",
            data.num_classes, state.model.spec.num_classes
        )));
    }
    let (train_idx, eval_idx) = split_indices(data.len(), cfg.eval_fraction, cfg.seed);
    if train_idx.is_empty() {
        return Err(Error::invalid("no training samples after the split"));
    }
    let mut rows = Vec::new();
    if state.epoch == 0 {
        let tr = evaluate(&state.model, data, &train_idx, cfg)?;
        let ev = evaluate(&state.model, data, &eval_idx, cfg)?;
        let row = MetricsRow {
            epoch: 0,
            train_loss: tr.loss,
            train_acc: tr.acc,
            eval_acc: ev.acc,
            gmacs: tr.gmacs,
            resizers: resizer_states(&state.model),
            layers: tr.shapes,
        };
        on_epoch(state, &row)?;
        rows.push(row);
    }
    while state.epoch < cfg.epochs {
        let epoch = state.epoch + 1;
        let factor = cfg.schedule.factor(epoch - 1, cfg.epochs);
        let order = epoch_order(&train_idx, cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let r = run_batch(&state.model, data, batch, cfg, true)?;
            if !r.loss.is_finite() {
                return Err(Error::NonFinite { epoch, step });
            }
            let grads = r.grads.expect("gradients requested");
            if grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFinite { epoch, step });
            }
            loss_sum += r.loss * batch.len() as f64;
            correct += r.correct;
            apply_update(state, &grads, cfg, factor);
        }
        state.epoch = epoch;
        let ev = evaluate(&state.model, data, &eval_idx, cfg)?;
        let row = MetricsRow {
            epoch,
            train_loss: loss_sum / order.len() as f64,
            train_acc: correct as f64 / order.len() as f64,
            eval_acc: ev.acc,
            gmacs: ev.gmacs,
            resizers: resizer_states(&state.model),
            layers: ev.shapes,
        };
        on_epoch(state, &row)?;
        rows.push(row);
    }
    Ok(rows)
}

pub fn train(state: &mut TrainState, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<MetricsRow>> {
    train_with(state, data, cfg, |_, _| Ok(()))
}
