//! First-order bilevel architecture search, discretization and fresh retraining.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::kernels::row_softmax;
use crate::autodiff::Tensor;
use crate::data::{split_darts, Dataset, Graph};
use crate::error::{Error, Result};
use crate::gnn::OpKind;
use crate::model::{Model, ModelConfig, Operators};
use crate::rng;
use crate::train::{accumulate_graph, clip_grad_norm, evaluate, fit, Adam, TrainConfig, TrainReport};

/// The `L×|O|` architecture weights.
#[derive(Clone, Debug)]
pub struct ArchParams {
    pub alpha: Tensor,
}

impl ArchParams {
    pub fn zeros(layers: usize) -> Self {
        ArchParams {
            alpha: Tensor::zeros(vec![layers, OpKind::ALL.len()]).into_param(),
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let alpha = Tensor::from_rows(rows)?.into_param();
        if alpha.cols() != OpKind::ALL.len() {
            return Err(Error::shape("alpha", &[rows.len(), OpKind::ALL.len()], alpha.shape()));
        }
        Ok(ArchParams { alpha })
    }

    pub fn layers(&self) -> usize {
        self.alpha.rows()
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.alpha.values().chunks(OpKind::ALL.len()).map(<[f64]>::to_vec).collect()
    }

    /// Row-wise softmax view.
    pub fn weights(&self) -> Vec<Vec<f64>> {
        let k = OpKind::ALL.len();
        row_softmax(self.alpha.values(), self.layers(), k)
            .chunks(k)
            .map(<[f64]>::to_vec)
            .collect()
    }
}

/// Ordered per-layer operator choice.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscreteArchitecture {
    pub ops: Vec<OpKind>,
}

impl DiscreteArchitecture {
    pub fn uniform(op: OpKind, layers: usize) -> Self {
        DiscreteArchitecture { ops: vec![op; layers] }
    }

    /// Fraction of layers using each operator, in candidate order.
    pub fn proportions(&self) -> [f64; 3] {
        let mut out = [0.0; 3];
        for op in &self.ops {
            out[op.index()] += 1.0 / self.ops.len() as f64;
        }
        out
    }
}

impl std::fmt::Display for DiscreteArchitecture {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let names: Vec<&str> = self.ops.iter().map(|o| o.name()).collect();
        f.write_str(&names.join(","))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub epochs_search: usize,
    pub epochs_final: usize,
    pub lr_w: f64,
    pub lr_alpha: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    /// Decay on the architecture weights; off unless set.
    pub alpha_weight_decay: f64,
    /// Gradient-norm clip for the weight updates.
    pub grad_clip: Option<f64>,
    /// Gradient-norm clip for the architecture updates; off unless set.
    pub alpha_grad_clip: Option<f64>,
    pub seed: u64,
    pub model: ModelConfig,
}

impl SearchConfig {
    pub fn new(model: ModelConfig, seed: u64) -> Self {
        SearchConfig {
            epochs_search: 20,
            epochs_final: 30,
            lr_w: 3e-3,
            lr_alpha: 1e-3,
            batch_size: 8,
            weight_decay: 0.0,
            alpha_weight_decay: 0.0,
            grad_clip: Some(1.0),
            alpha_grad_clip: None,
            seed,
            model,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_w > 0.0) || !(self.lr_alpha >= 0.0) {
            return Err(Error::Config("learning rates must be positive".into()));
        }
        Ok(())
    }

    pub fn final_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs_final,
            lr: self.lr_w,
            batch_size: self.batch_size,
            weight_decay: self.weight_decay,
            grad_clip: self.grad_clip,
            seed: self.seed,
            select_best: true,
        }
    }
}

/// Optimizer state carried across search steps.
#[derive(Clone, Debug)]
pub struct SearchOptimizers {
    pub weights: Adam,
    pub alpha: Adam,
    pub grad_clip: Option<f64>,
    pub alpha_grad_clip: Option<f64>,
    dropout: ChaCha8Rng,
}

impl SearchOptimizers {
    pub fn new(cfg: &SearchConfig) -> Self {
        SearchOptimizers {
            weights: Adam::new(cfg.lr_w, cfg.weight_decay),
            alpha: Adam::new(cfg.lr_alpha, cfg.alpha_weight_decay),
            grad_clip: cfg.grad_clip,
            alpha_grad_clip: cfg.alpha_grad_clip,
            dropout: rng::stream(cfg.seed, rng::DROPOUT),
        }
    }
}

/// Losses seen by one alternating step.
#[derive(Clone, Copy, Debug)]
pub struct StepLosses {
    pub train: f64,
    pub val: f64,
}

/// One weight update on `batch_train` with α frozen, then one α update on
/// `batch_val` with the weights frozen.
pub fn alternate_step(
    model: &mut Model,
    arch: &mut ArchParams,
    batch_train: &[&Graph],
    batch_val: &[&Graph],
    opt: &mut SearchOptimizers,
    epoch: usize,
    batch: usize,
) -> Result<StepLosses> {
    let train = weight_step(model, arch, batch_train, opt, epoch, batch)?;
    let val = alpha_step(model, arch, batch_val, opt, epoch, batch)?;
    Ok(StepLosses { train, val })
}

fn check_step_inputs(model: &Model, batch: &[&Graph]) -> Result<()> {
    if !model.is_search_mode() {
        return Err(Error::Contract("search steps need a search-mode model".into()));
    }
    if batch.is_empty() {
        return Err(Error::Contract("empty search batch".into()));
    }
    Ok(())
}

/// Weight update with α entering as a frozen leaf. Returns the mean batch loss.
pub fn weight_step(
    model: &mut Model,
    arch: &ArchParams,
    batch_train: &[&Graph],
    opt: &mut SearchOptimizers,
    epoch: usize,
    batch: usize,
) -> Result<f64> {
    check_step_inputs(model, batch_train)?;
    model.zero_grads();
    let mut train_loss = 0.0;
    for g in batch_train {
        let loss = accumulate_graph(model, g, Some(&arch.alpha), &mut opt.dropout)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch, loss });
        }
        train_loss += loss;
    }
    let mut params = model.named_params_mut();
    for (_, p) in params.iter_mut() {
        p.scale_grad(1.0 / batch_train.len() as f64);
    }
    if let Some(max) = opt.grad_clip {
        clip_grad_norm(params.iter_mut().map(|(_, p)| &mut **p), max);
    }
    opt.weights.step(params);
    model.zero_grads();
    Ok(train_loss / batch_train.len() as f64)
}

/// α update with the weights entering as frozen leaves. Returns the mean batch loss.
pub fn alpha_step(
    model: &Model,
    arch: &mut ArchParams,
    batch_val: &[&Graph],
    opt: &mut SearchOptimizers,
    epoch: usize,
    batch: usize,
) -> Result<f64> {
    check_step_inputs(model, batch_val)?;
    arch.alpha.zero_grad();
    let mut val_loss = 0.0;
    for g in batch_val {
        let mut tape = crate::autodiff::Tape::training(rand::SeedableRng::seed_from_u64(opt.dropout.gen()));
        let pass = model.forward(
            &mut tape,
            g,
            crate::model::ForwardOptions {
                alpha: Some(&arch.alpha),
                alpha_trainable: true,
                freeze_weights: true,
                ..Default::default()
            },
        )?;
        let loss = crate::train::task_loss(&mut tape, pass.prediction, g, model.config())?;
        let l = tape.scalar_value(loss);
        if !l.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, batch, loss: l });
        }
        val_loss += l;
        tape.backward(loss)?;
        if let Some(g) = tape.param_var(arch.alpha.id()).and_then(|v| tape.grad(v)) {
            arch.alpha.accumulate_grad(g)?;
        }
    }
    arch.alpha.scale_grad(1.0 / batch_val.len() as f64);
    if let Some(max) = opt.alpha_grad_clip {
        clip_grad_norm([&mut arch.alpha], max);
    }
    opt.alpha.step([("alpha".to_string(), &mut arch.alpha)]);
    arch.alpha.zero_grad();
    if !arch.alpha.is_finite() {
        return Err(Error::NonFinite(format!("architecture weights at epoch {epoch}, batch {batch}")));
    }
    Ok(val_loss / batch_val.len() as f64)
}

/// Result of a search run.
#[derive(Clone, Debug)]
pub struct SearchOutcome {
    /// α after each epoch; entry 0 is the initial all-zero matrix.
    pub history: Vec<Vec<Vec<f64>>>,
    pub arch: ArchParams,
    pub architecture: DiscreteArchitecture,
    pub tie_layers: Vec<usize>,
    pub seed: u64,
    /// The trained Phase-1 model.
    pub supernet: Model,
}

/// Builds a search-mode supernet for `cfg`, seeded from the init stream.
pub fn supernet(cfg: &SearchConfig) -> Result<Model> {
    Model::new(cfg.model.clone(), Operators::Search, &mut rng::stream(cfg.seed, rng::SEARCH))
}

/// Phase 1: split, alternate over shuffled batches, discretize.
pub fn search(dataset: &Dataset, cfg: &SearchConfig) -> Result<SearchOutcome> {
    cfg.validate()?;
    let split = split_darts(dataset, cfg.seed)?;
    let mut model = supernet(cfg)?;
    let mut arch = ArchParams::zeros(cfg.model.layers);
    let mut opt = SearchOptimizers::new(cfg);
    let mut shuffle = rng::stream(cfg.seed, rng::SHUFFLE);
    let mut train_order: Vec<usize> = (0..split.darts_train.len()).collect();
    let mut val_order: Vec<usize> = (0..split.darts_val.len()).collect();
    let mut history = vec![arch.rows()];

    for epoch in 1..=cfg.epochs_search {
        train_order.shuffle(&mut shuffle);
        val_order.shuffle(&mut shuffle);
        let mut val_cursor = 0;
        let (mut tl, mut vl, mut steps) = (0.0, 0.0, 0);
        for (b, chunk) in train_order.chunks(cfg.batch_size).enumerate() {
            let train_batch: Vec<&Graph> = chunk.iter().map(|&i| &split.darts_train.graphs[i]).collect();
            let val_batch: Vec<&Graph> = (0..cfg.batch_size)
                .map(|k| &split.darts_val.graphs[val_order[(val_cursor + k) % val_order.len()]])
                .collect();
            val_cursor = (val_cursor + cfg.batch_size) % val_order.len();
            let losses = alternate_step(&mut model, &mut arch, &train_batch, &val_batch, &mut opt, epoch, b)?;
            tl += losses.train;
            vl += losses.val;
            steps += 1;
        }
        info!(
            "search epoch {epoch}: train loss {:.5}, val loss {:.5}",
            tl / steps as f64,
            vl / steps as f64
        );
        history.push(arch.rows());
    }
    let (architecture, tie_layers) = discretize(&arch)?;
    Ok(SearchOutcome {
        history,
        arch,
        architecture,
        tie_layers,
        seed: cfg.seed,
        supernet: model,
    })
}

/// Per-layer argmax; ties go to the lowest operator index. Also returns the tied layers.
pub fn discretize(arch: &ArchParams) -> Result<(DiscreteArchitecture, Vec<usize>)> {
    if !arch.alpha.is_finite() {
        return Err(Error::NonFinite("architecture weights".into()));
    }
    let mut ops = Vec::with_capacity(arch.layers());
    let mut ties = Vec::new();
    for (l, row) in arch.rows().iter().enumerate() {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        if row.iter().enumerate().any(|(i, &v)| i != best && v == row[best]) {
            warn!("layer {l}: tied architecture weights, choosing {}", OpKind::ALL[best].name());
            ties.push(l);
        }
        ops.push(OpKind::ALL[best]);
    }
    Ok((DiscreteArchitecture { ops }, ties))
}

/// Uniform i.i.d. operator per layer.
pub fn random_architecture(layers: usize, seed: u64) -> Result<DiscreteArchitecture> {
    if layers == 0 {
        return Err(Error::Config("layers must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, rng::SEARCH);
    Ok(DiscreteArchitecture {
        ops: (0..layers).map(|_| OpKind::ALL[rng.gen_range(0..OpKind::ALL.len())]).collect(),
    })
}

/// Phase 2: a freshly initialized discrete model trained on the full training set.
pub fn train_final(
    arch: &DiscreteArchitecture,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &SearchConfig,
) -> Result<(Model, TrainReport)> {
    cfg.validate()?;
    if arch.ops.len() != cfg.model.layers {
        return Err(Error::Config(format!(
            "architecture has {} layers, config has {}",
            arch.ops.len(),
            cfg.model.layers
        )));
    }
    train_fresh(Operators::Fixed(arch.ops.clone()), train, val, cfg)
}

/// A freshly initialized model with the given operator layout, trained for `epochs_final`.
pub fn train_fresh(
    operators: Operators,
    train: &Dataset,
    val: Option<&Dataset>,
    cfg: &SearchConfig,
) -> Result<(Model, TrainReport)> {
    let mut model = Model::new(cfg.model.clone(), operators, &mut rng::stream(cfg.seed, rng::INIT))?;
    let report = fit(&mut model, train, val, &cfg.final_train_config())?;
    Ok((model, report))
}

/// Search artifact: α per epoch, final mixture weights, the selection and the seed.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchRecord {
    pub seed: u64,
    pub operators: Vec<OpKind>,
    pub alpha_history: Vec<Vec<Vec<f64>>>,
    pub final_weights: Vec<Vec<f64>>,
    pub architecture: DiscreteArchitecture,
    pub tie_layers: Vec<usize>,
    pub proportions: [f64; 3],
    pub config: SearchConfig,
}

impl SearchRecord {
    pub fn new(outcome: &SearchOutcome, cfg: &SearchConfig) -> Self {
        SearchRecord {
            seed: outcome.seed,
            operators: OpKind::ALL.to_vec(),
            alpha_history: outcome.history.clone(),
            final_weights: outcome.arch.weights(),
            architecture: outcome.architecture.clone(),
            tie_layers: outcome.tie_layers.clone(),
            proportions: outcome.architecture.proportions(),
            config: cfg.clone(),
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(Error::file(path))?);
        serde_json::to_writer_pretty(&mut w, self)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_reader(std::io::BufReader::new(File::open(path).map_err(Error::file(path))?))?)
    }
}

/// Mean validation loss of the supernet under the given α; used by diagnostics.
pub fn supernet_loss(model: &Model, arch: &ArchParams, ds: &Dataset) -> Result<f64> {
    Ok(evaluate(model, ds, Some(&arch.alpha))?.loss)
}
