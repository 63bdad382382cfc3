//! Task losses, metrics, the Adam optimizer and the supervised training loop.

use std::collections::HashMap;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{Dataset, Graph, Label, TaskKind};
use crate::error::{Error, Result};
use crate::model::{ForwardOptions, HeadMask, Model, ModelConfig};
use crate::rng;

/// Per-graph task loss: MAE for regression, BCE with logits for binary tasks,
/// cross-entropy otherwise. Node tasks average over nodes.
pub fn task_loss(tape: &mut Tape, pred: Var, graph: &Graph, cfg: &ModelConfig) -> Result<Var> {
    let binary = cfg.output_dim() == 1;
    match (graph.label(), cfg.task) {
        (Label::Scalar(y), TaskKind::Regression) => {
            let target = tape.constant(1, 1, vec![*y])?;
            let diff = tape.sub(pred, target)?;
            let abs = tape.abs(diff);
            Ok(tape.mean(abs))
        }
        (Label::Class(c), TaskKind::GraphClassification) => {
            if binary {
                tape.bce_with_logits(pred, &[*c as f64])
            } else {
                tape.cross_entropy(pred, &[*c])
            }
        }
        (Label::NodeClasses(cs), TaskKind::NodeClassification) => {
            if binary {
                let t: Vec<f64> = cs.iter().map(|&c| c as f64).collect();
                tape.bce_with_logits(pred, &t)
            } else {
                tape.cross_entropy(pred, cs)
            }
        }
        (_, task) => Err(Error::Contract(format!("label does not match task {task}"))),
    }
}

/// Accumulator for the task metric: accuracy for classification, MAE for regression.
#[derive(Clone, Copy, Debug, Default)]
struct MetricAcc {
    total: f64,
    count: usize,
}

impl MetricAcc {
    fn add(&mut self, pred: &[f64], label: &Label, cfg: &ModelConfig) {
        let width = cfg.output_dim();
        let class_of = |row: &[f64]| -> usize {
            if width == 1 {
                usize::from(row[0] > 0.0)
            } else {
                argmax(row)
            }
        };
        match label {
            Label::Scalar(y) => {
                self.total += (pred[0] - y).abs();
                self.count += 1;
            }
            Label::Class(c) => {
                self.total += f64::from(u8::from(class_of(pred) == *c));
                self.count += 1;
            }
            Label::NodeClasses(cs) => {
                for (row, c) in pred.chunks(width).zip(cs) {
                    self.total += f64::from(u8::from(class_of(row) == *c));
                    self.count += 1;
                }
            }
        }
    }

    fn value(&self) -> f64 {
        if self.count == 0 {
            0.0
        } else {
            self.total / self.count as f64
        }
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Whether larger metric values are better (accuracy) or smaller (MAE).
pub fn higher_is_better(task: TaskKind) -> bool {
    task != TaskKind::Regression
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub loss: f64,
    pub metric: f64,
}

/// Eval-mode loss of one graph, optionally with one head masked.
pub fn instance_loss(model: &Model, graph: &Graph, alpha: Option<&Tensor>, mask: Option<HeadMask>) -> Result<f64> {
    let mut tape = Tape::new();
    let pass = model.forward(
        &mut tape,
        graph,
        ForwardOptions {
            alpha,
            mask,
            freeze_weights: true,
            ..Default::default()
        },
    )?;
    let loss = task_loss(&mut tape, pass.prediction, graph, model.config())?;
    Ok(tape.scalar_value(loss))
}

/// Mean per-graph loss and the task metric over a dataset, in eval mode.
pub fn evaluate(model: &Model, ds: &Dataset, alpha: Option<&Tensor>) -> Result<Evaluation> {
    let mut loss = 0.0;
    let mut metric = MetricAcc::default();
    for g in &ds.graphs {
        let mut tape = Tape::new();
        let pass = model.forward(
            &mut tape,
            g,
            ForwardOptions {
                alpha,
                freeze_weights: true,
                ..Default::default()
            },
        )?;
        metric.add(tape.value(pass.prediction), g.label(), model.config());
        let l = task_loss(&mut tape, pass.prediction, g, model.config())?;
        loss += tape.scalar_value(l);
    }
    Ok(Evaluation {
        loss: loss / ds.len().max(1) as f64,
        metric: metric.value(),
    })
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    moments: HashMap<String, (Vec<f64>, Vec<f64>)>,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            t: 0,
            moments: HashMap::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update of every tensor that carries a gradient.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = (String, &'a mut Tensor)>) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (name, p) in params {
            let Some(g) = p.grad().map(<[f64]>::to_vec) else { continue };
            let (m, v) = self
                .moments
                .entry(name)
                .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
            let values = p.values_mut();
            for i in 0..values.len() {
                let gi = g[i] + self.weight_decay * values[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                values[i] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Rescales gradients so their joint L2 norm is at most `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm<'a>(params: impl IntoIterator<Item = &'a mut Tensor>, max_norm: f64) -> f64 {
    let mut params: Vec<&mut Tensor> = params.into_iter().collect();
    let norm = params
        .iter()
        .filter_map(|p| p.grad())
        .flat_map(|g| g.iter())
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        for p in params.iter_mut() {
            p.scale_grad(max_norm / norm);
        }
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,
    pub seed: u64,
    /// Return the best-validation state instead of the final one.
    pub select_best: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            lr: 3e-3,
            batch_size: 8,
            weight_decay: 0.0,
            grad_clip: Some(1.0),
            seed: 0,
            select_best: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches; for epoch 0 the eval-mode
    /// loss of the untrained model.
    pub train_loss: f64,
    pub val: Option<Evaluation>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainReport {
    /// Entry 0 is the untrained model; entry `e` follows epoch `e`.
    pub history: Vec<EpochStats>,
    /// Epoch whose state was returned.
    pub selected_epoch: usize,
    /// Eval-mode training-set evaluation of the returned state.
    pub final_train: Evaluation,
}

/// Forward, loss and backward for one graph; gradients are added to the model.
pub(crate) fn accumulate_graph(
    model: &mut Model,
    graph: &Graph,
    alpha: Option<&Tensor>,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::training(ChaCha8Rng::seed_from_u64(rng.gen()));
    let pass = model.forward(
        &mut tape,
        graph,
        ForwardOptions {
            alpha,
            ..Default::default()
        },
    )?;
    let loss = task_loss(&mut tape, pass.prediction, graph, model.config())?;
    let value = tape.scalar_value(loss);
    if value.is_finite() {
        tape.backward(loss)?;
        model.accumulate_grads(&tape)?;
    }
    Ok(value)
}

/// Mini-batch training with per-graph gradient accumulation.
///
/// With a validation set and `select_best` the best-scoring state is returned; otherwise the final one.
pub fn fit(model: &mut Model, train: &Dataset, val: Option<&Dataset>, cfg: &TrainConfig) -> Result<TrainReport> {
    if cfg.batch_size == 0 || cfg.lr <= 0.0 {
        return Err(Error::Config("batch_size and lr must be positive".into()));
    }
    if model.is_search_mode() {
        return Err(Error::Contract("fit expects a discrete model".into()));
    }
    let higher = higher_is_better(model.config().task);
    let mut opt = Adam::new(cfg.lr, cfg.weight_decay);
    let mut shuffle = rng::stream(cfg.seed, rng::SHUFFLE);
    let mut dropout = rng::stream(cfg.seed, rng::DROPOUT);
    let mut order: Vec<usize> = (0..train.len()).collect();

    let eval_val = |model: &Model| val.map(|v| evaluate(model, v, None)).transpose();
    let mut history = vec![EpochStats {
        epoch: 0,
        train_loss: evaluate(model, train, None)?.loss,
        val: eval_val(model)?,
    }];
    let mut best: Option<(f64, usize, Model)> = None;
    let better = |a: f64, b: f64| if higher { a > b } else { a < b };

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle);
        let mut epoch_loss = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            model.zero_grads();
            for &i in chunk {
                let loss = accumulate_graph(model, &train.graphs[i], None, &mut dropout)?;
                if !loss.is_finite() {
                    return Err(Error::NonFiniteLoss { epoch, batch: b, loss });
                }
                epoch_loss += loss;
            }
            let scale = 1.0 / chunk.len() as f64;
            let mut params = model.named_params_mut();
            for (_, p) in params.iter_mut() {
                p.scale_grad(scale);
            }
            if let Some(max) = cfg.grad_clip {
                clip_grad_norm(params.iter_mut().map(|(_, p)| &mut **p), max);
            }
            opt.step(params);
        }
        let stats = EpochStats {
            epoch,
            train_loss: epoch_loss / train.len().max(1) as f64,
            val: eval_val(model)?,
        };
        debug!(
            "epoch {epoch}: train loss {:.5}{}",
            stats.train_loss,
            stats.val.map(|v| format!(", val metric {:.4}", v.metric)).unwrap_or_default()
        );
        if let (Some(v), true) = (stats.val, cfg.select_best) {
            if best.as_ref().is_none_or(|(m, _, _)| better(v.metric, *m)) {
                best = Some((v.metric, epoch, model.clone()));
            }
        }
        history.push(stats);
    }
    let selected_epoch = match best {
        Some((_, epoch, state)) => {
            *model = state;
            epoch
        }
        None => cfg.epochs,
    };
    model.zero_grads();
    let final_train = evaluate(model, train, None)?;
    info!(
        "training finished; selected epoch {selected_epoch}, train loss {:.5}, metric {:.4}",
        final_train.loss, final_train.metric
    );
    Ok(TrainReport {
        history,
        selected_epoch,
        final_train,
    })
}
