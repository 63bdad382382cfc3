//! The graph transformer: encoders, stacked attention blocks whose keys and
//! values come from a per-layer message-passing operator, the edge residual
//! stream, and task heads.

pub mod attention;
mod checkpoint;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::data::{Graph, TaskKind};
use crate::error::{Error, Result};
use crate::gnn::{self, linear, GnnParams, OpKind, Topology};

pub use attention::{AttentionTrace, HeadAttention, HeadMask};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Dense,
    Sparse,
}

/// Where queries, keys and values come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    /// Q from node states, K/V from the layer's operator.
    Dartsgt,
    /// Q, K and V all from the layer's operator.
    Symmetric,
    /// Plain transformer: Q, K and V from node states, no operator.
    Vanilla,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhiKind {
    Identity,
    Mlp2,
}

macro_rules! str_enum {
    ($ty:ty, $($name:literal => $val:expr),+ $(,)?) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s.to_ascii_lowercase().as_str() {
                    $($name => Ok($val),)+
                    other => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($ty), " '{}'"), other
                    ))),
                }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                $(if *self == $val { return f.write_str($name); })+
                unreachable!()
            }
        }
    };
}

str_enum!(AttentionKind, "dense" => AttentionKind::Dense, "sparse" => AttentionKind::Sparse);
str_enum!(Variant, "dartsgt" => Variant::Dartsgt, "symmetric" => Variant::Symmetric, "vanilla" => Variant::Vanilla);
str_enum!(PhiKind, "identity" => PhiKind::Identity, "mlp2" => PhiKind::Mlp2);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub dim: usize,
    pub ffn_ratio: usize,
    pub attention: AttentionKind,
    pub variant: Variant,
    pub phi: PhiKind,
    pub edge_residual: bool,
    pub dropout: f64,
    pub task: TaskKind,
    pub num_classes: Option<usize>,
    pub d_in: usize,
    pub d_e: usize,
}

impl ModelConfig {
    /// Default architecture sized for the given feature dimensions and task.
    pub fn new(task: TaskKind, num_classes: Option<usize>, d_in: usize, d_e: usize) -> Self {
        ModelConfig {
            layers: 4,
            heads: 4,
            dim: 32,
            ffn_ratio: 2,
            attention: AttentionKind::Sparse,
            variant: Variant::Dartsgt,
            phi: PhiKind::Identity,
            edge_residual: true,
            dropout: 0.0,
            task,
            num_classes,
            d_in,
            d_e,
        }
    }

    pub fn for_dataset(ds: &crate::data::Dataset) -> Self {
        ModelConfig::new(ds.task, ds.num_classes, ds.d_in, ds.d_e)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.heads == 0 || self.dim == 0 {
            return fail("layers, heads and dim must be positive".into());
        }
        if self.dim % self.heads != 0 {
            return fail(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            ));
        }
        if self.ffn_ratio == 0 {
            return fail("ffn_ratio must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.d_in == 0 {
            return fail("d_in must be positive".into());
        }
        if self.task != TaskKind::Regression && self.num_classes.is_none_or(|c| c < 2) {
            return fail("classification tasks need num_classes >= 2".into());
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    /// Width of the prediction: one value for regression and binary tasks.
    pub fn output_dim(&self) -> usize {
        match (self.task, self.num_classes) {
            (TaskKind::Regression, _) => 1,
            (_, Some(2)) => 1,
            (_, Some(c)) => c,
            (_, None) => 1,
        }
    }

    /// Raw edge width fed to the edge projections; featureless edges get a constant 1.
    fn edge_in(&self) -> usize {
        self.d_e.max(1)
    }
}

/// Operator layout of a model.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Operators {
    /// Every candidate at every layer, mixed by architecture weights.
    Search,
    /// One operator per layer.
    Fixed(Vec<OpKind>),
    /// No message passing (vanilla transformer).
    None,
}

#[derive(Clone, Debug)]
struct Mlp {
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
}

impl Mlp {
    fn init<R: Rng + ?Sized>(d_in: usize, hidden: usize, d_out: usize, rng: &mut R) -> Self {
        Mlp {
            w1: Tensor::uniform_init(vec![d_in, hidden], d_in, rng),
            b1: Tensor::zeros(vec![hidden]).into_param(),
            w2: Tensor::uniform_init(vec![hidden, d_out], hidden, rng),
            b2: Tensor::zeros(vec![d_out]).into_param(),
        }
    }

    fn forward(&self, tape: &mut Tape, x: Var, dropout: f64, bind: Binder) -> Result<Var> {
        let (w1, b1, w2, b2) = (bind(tape, &self.w1)?, bind(tape, &self.b1)?, bind(tape, &self.w2)?, bind(tape, &self.b2)?);
        let h = linear(tape, x, w1, Some(b1))?;
        let h = tape.relu(h);
        let h = tape.dropout(h, dropout);
        linear(tape, h, w2, Some(b2))
    }

    fn named(&self) -> [(&'static str, &Tensor); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    fn named_mut(&mut self) -> [(&'static str, &mut Tensor); 4] {
        [("w1", &mut self.w1), ("b1", &mut self.b1), ("w2", &mut self.w2), ("b2", &mut self.b2)]
    }
}

#[derive(Clone, Debug)]
enum Structural {
    None,
    Fixed(GnnParams),
    Mixed(Vec<GnnParams>),
}

#[derive(Clone, Debug)]
struct Layer {
    structural: Structural,
    /// Edge projection shared by the layer's operators.
    edge_proj: Option<(Tensor, Tensor)>,
    phi: Option<Mlp>,
    w_q: Vec<Tensor>,
    w_k: Vec<Tensor>,
    w_v: Vec<Tensor>,
    w_out: Tensor,
    norm1: (Tensor, Tensor),
    norm2: (Tensor, Tensor),
    ffn: Mlp,
    gamma: Option<Tensor>,
}

type Binder<'a> = &'a dyn Fn(&mut Tape, &Tensor) -> Result<Var>;

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a> {
    /// `L×|O|` architecture weights; required by search-mode models.
    pub alpha: Option<&'a Tensor>,
    /// Let gradients flow into `alpha`.
    pub alpha_trainable: bool,
    /// Record model weights without gradients.
    pub freeze_weights: bool,
    pub mask: Option<HeadMask>,
    pub capture_trace: bool,
    pub capture_activations: bool,
}

/// Intermediate values of one pass, recorded for audits.
#[derive(Clone, Debug, Default)]
pub struct Activations {
    /// `Z^(l)` entering each layer.
    pub layer_inputs: Vec<Tensor>,
    /// Operator output (or mixture) per layer; `None` for the vanilla variant.
    pub structural: Vec<Option<Tensor>>,
    /// Pre-concatenation head outputs after masking, per layer.
    pub heads: Vec<Vec<Tensor>>,
    /// Edge stream term as used by each layer.
    pub edge_stream: Vec<Option<Tensor>>,
    pub output: Option<Tensor>,
}

#[derive(Debug)]
pub struct ForwardPass {
    pub prediction: Var,
    pub trace: Option<AttentionTrace>,
    pub activations: Option<Activations>,
    /// Number of times the edge stream `H_edge` was computed in this pass.
    pub edge_stream_evaluations: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    operators: Operators,
    node_enc: (Tensor, Tensor),
    layers: Vec<Layer>,
    edge_mlp: Option<Mlp>,
    head: (Tensor, Tensor),
    counters: Counters,
}

/// Call counters for audits. A clone starts from zero.
#[derive(Debug, Default)]
struct Counters {
    forward: AtomicUsize,
    edge_stream: AtomicUsize,
}

impl Clone for Counters {
    fn clone(&self) -> Self {
        Counters::default()
    }
}

fn norm_params(d: usize) -> (Tensor, Tensor) {
    (Tensor::full(vec![d], 1.0).into_param(), Tensor::zeros(vec![d]).into_param())
}

fn tensor_named<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, items: impl IntoIterator<Item = (&'static str, &'a Tensor)>) {
    for (name, t) in items {
        out.push((format!("{prefix}.{name}"), t));
    }
}

fn tensor_named_mut<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, items: impl IntoIterator<Item = (&'static str, &'a mut Tensor)>) {
    for (name, t) in items {
        out.push((format!("{prefix}.{name}"), t));
    }
}

impl Model {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, operators: Operators, rng: &mut R) -> Result<Self> {
        config.validate()?;
        match (&operators, config.variant) {
            (Operators::None, Variant::Vanilla) => {}
            (Operators::None, v) => {
                return Err(Error::Config(format!("variant {v} needs message-passing operators")))
            }
            (_, Variant::Vanilla) => {
                return Err(Error::Config("the vanilla variant has no operators".into()))
            }
            (Operators::Fixed(ops), _) if ops.len() != config.layers => {
                return Err(Error::Config(format!(
                    "architecture has {} operators for {} layers",
                    ops.len(),
                    config.layers
                )))
            }
            _ => {}
        }
        let d = config.dim;
        let dm = config.head_dim();
        let de = config.edge_in();
        let node_enc = (
            Tensor::uniform_init(vec![config.d_in, d], config.d_in, rng),
            Tensor::zeros(vec![d]).into_param(),
        );
        let mut layers = Vec::with_capacity(config.layers);
        for l in 0..config.layers {
            let structural = match &operators {
                Operators::None => Structural::None,
                Operators::Fixed(ops) => Structural::Fixed(GnnParams::init(ops[l], d, rng)),
                Operators::Search => Structural::Mixed(
                    OpKind::ALL.iter().map(|&k| GnnParams::init(k, d, rng)).collect(),
                ),
            };
            let edge_proj = (!matches!(structural, Structural::None)).then(|| {
                (
                    Tensor::uniform_init(vec![de, d], de, rng),
                    Tensor::zeros(vec![d]).into_param(),
                )
            });
            let phi = (config.phi == PhiKind::Mlp2 && config.variant == Variant::Dartsgt)
                .then(|| Mlp::init(d, d, d, rng));
            let mut heads = || -> Vec<Tensor> {
                (0..config.heads).map(|_| Tensor::uniform_init(vec![d, dm], d, rng)).collect()
            };
            let (w_q, w_k, w_v) = (heads(), heads(), heads());
            layers.push(Layer {
                structural,
                edge_proj,
                phi,
                w_q,
                w_k,
                w_v,
                w_out: Tensor::uniform_init(vec![d, d], d, rng),
                norm1: norm_params(d),
                norm2: norm_params(d),
                ffn: Mlp::init(d, config.ffn_ratio * d, d, rng),
                gamma: config.edge_residual.then(|| Tensor::scalar(0.0).into_param()),
            });
        }
        let edge_mlp = config.edge_residual.then(|| Mlp::init(de, d, d, rng));
        let out = config.output_dim();
        let head = (
            Tensor::uniform_init(vec![d, out], d, rng),
            Tensor::zeros(vec![out]).into_param(),
        );
        Ok(Model {
            config,
            operators,
            node_enc,
            layers,
            edge_mlp,
            head,
            counters: Counters::default(),
        })
    }

    /// Number of [`Model::forward`] calls on this instance since creation or the last reset.
    pub fn forward_calls(&self) -> usize {
        self.counters.forward.load(Ordering::Relaxed)
    }

    /// Number of [`Model::edge_stream`] evaluations that produced `H_edge`.
    pub fn edge_stream_calls(&self) -> usize {
        self.counters.edge_stream.load(Ordering::Relaxed)
    }

    pub fn reset_counters(&self) {
        self.counters.forward.store(0, Ordering::Relaxed);
        self.counters.edge_stream.store(0, Ordering::Relaxed);
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn operators(&self) -> &Operators {
        &self.operators
    }

    pub fn is_search_mode(&self) -> bool {
        self.operators == Operators::Search
    }

    /// Number of operator parameter bundles: `L` discrete, `|O|·L` search, 0 vanilla.
    pub fn gnn_bundle_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| match &l.structural {
                Structural::None => 0,
                Structural::Fixed(_) => 1,
                Structural::Mixed(b) => b.len(),
            })
            .sum()
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        tensor_named(&mut out, "node_enc", [("w", &self.node_enc.0), ("b", &self.node_enc.1)]);
        for (l, layer) in self.layers.iter().enumerate() {
            let p = format!("layers.{l}");
            match &layer.structural {
                Structural::None => {}
                Structural::Fixed(g) => tensor_named(&mut out, &format!("{p}.op.{}", g.kind()), g.named()),
                Structural::Mixed(bs) => {
                    for g in bs {
                        tensor_named(&mut out, &format!("{p}.op.{}", g.kind()), g.named());
                    }
                }
            }
            if let Some((w, b)) = &layer.edge_proj {
                tensor_named(&mut out, &format!("{p}.edge_proj"), [("w", w), ("b", b)]);
            }
            if let Some(phi) = &layer.phi {
                tensor_named(&mut out, &format!("{p}.phi"), phi.named());
            }
            for (name, ws) in [("w_q", &layer.w_q), ("w_k", &layer.w_k), ("w_v", &layer.w_v)] {
                for (m, w) in ws.iter().enumerate() {
                    out.push((format!("{p}.{name}.{m}"), w));
                }
            }
            out.push((format!("{p}.w_out"), &layer.w_out));
            tensor_named(&mut out, &format!("{p}.norm1"), [("gain", &layer.norm1.0), ("bias", &layer.norm1.1)]);
            tensor_named(&mut out, &format!("{p}.norm2"), [("gain", &layer.norm2.0), ("bias", &layer.norm2.1)]);
            tensor_named(&mut out, &format!("{p}.ffn"), layer.ffn.named());
            if let Some(g) = &layer.gamma {
                out.push((format!("{p}.gamma"), g));
            }
        }
        if let Some(mlp) = &self.edge_mlp {
            tensor_named(&mut out, "edge_mlp", mlp.named());
        }
        tensor_named(&mut out, "head", [("w", &self.head.0), ("b", &self.head.1)]);
        out
    }

    /// Same order and names as [`Model::named_params`].
    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        tensor_named_mut(&mut out, "node_enc", [("w", &mut self.node_enc.0), ("b", &mut self.node_enc.1)]);
        for (l, layer) in self.layers.iter_mut().enumerate() {
            let p = format!("layers.{l}");
            match &mut layer.structural {
                Structural::None => {}
                Structural::Fixed(g) => {
                    let prefix = format!("{p}.op.{}", g.kind());
                    tensor_named_mut(&mut out, &prefix, g.named_mut());
                }
                Structural::Mixed(bs) => {
                    for g in bs {
                        let prefix = format!("{p}.op.{}", g.kind());
                        tensor_named_mut(&mut out, &prefix, g.named_mut());
                    }
                }
            }
            if let Some((w, b)) = &mut layer.edge_proj {
                tensor_named_mut(&mut out, &format!("{p}.edge_proj"), [("w", w), ("b", b)]);
            }
            if let Some(phi) = &mut layer.phi {
                tensor_named_mut(&mut out, &format!("{p}.phi"), phi.named_mut());
            }
            for (name, ws) in [("w_q", &mut layer.w_q), ("w_k", &mut layer.w_k), ("w_v", &mut layer.w_v)] {
                for (m, w) in ws.iter_mut().enumerate() {
                    out.push((format!("{p}.{name}.{m}"), w));
                }
            }
            out.push((format!("{p}.w_out"), &mut layer.w_out));
            let (g1, b1) = (&mut layer.norm1.0, &mut layer.norm1.1);
            tensor_named_mut(&mut out, &format!("{p}.norm1"), [("gain", g1), ("bias", b1)]);
            let (g2, b2) = (&mut layer.norm2.0, &mut layer.norm2.1);
            tensor_named_mut(&mut out, &format!("{p}.norm2"), [("gain", g2), ("bias", b2)]);
            tensor_named_mut(&mut out, &format!("{p}.ffn"), layer.ffn.named_mut());
            if let Some(g) = &mut layer.gamma {
                out.push((format!("{p}.gamma"), g));
            }
        }
        if let Some(mlp) = &mut self.edge_mlp {
            tensor_named_mut(&mut out, "edge_mlp", mlp.named_mut());
        }
        tensor_named_mut(&mut out, "head", [("w", &mut self.head.0), ("b", &mut self.head.1)]);
        out
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.named_params().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.named_params_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn num_parameters(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn zero_grads(&mut self) {
        for (_, t) in self.named_params_mut() {
            t.zero_grad();
        }
    }

    /// Adds the tape's parameter gradients into each tensor's grad slot.
    pub fn accumulate_grads(&mut self, tape: &Tape) -> Result<()> {
        for (_, t) in self.named_params_mut() {
            if let Some(v) = tape.param_var(t.id()) {
                if let Some(g) = tape.grad(v) {
                    t.accumulate_grad(g)?;
                }
            }
        }
        Ok(())
    }

    fn check_graph(&self, graph: &Graph) -> Result<()> {
        if graph.node_feature_dim() != self.config.d_in {
            return Err(Error::shape("node encoder", &[self.config.d_in], &[graph.node_feature_dim()]));
        }
        if graph.edge_feature_dim() != self.config.d_e {
            return Err(Error::shape("edge encoder", &[self.config.d_e], &[graph.edge_feature_dim()]));
        }
        Ok(())
    }

    /// Edge features as fed to the edge paths; a ones column when `d_e = 0`.
    pub fn raw_edges(&self, tape: &mut Tape, graph: &Graph) -> Result<Var> {
        let e = graph.num_edges();
        if self.config.d_e == 0 {
            tape.constant(e, 1, vec![1.0; e])
        } else {
            tape.constant(e, self.config.d_e, graph.edge_features().to_vec())
        }
    }

    /// `H_edge`: the shared edge MLP applied per edge, summed into each target.
    pub fn edge_stream(&self, tape: &mut Tape, graph: &Graph, raw_edges: Var, bind: Binder) -> Result<Option<Var>> {
        let Some(mlp) = &self.edge_mlp else {
            return Ok(None);
        };
        self.counters.edge_stream.fetch_add(1, Ordering::Relaxed);
        let per_edge = mlp.forward(tape, raw_edges, self.config.dropout, bind)?;
        tape.scatter_add_rows(per_edge, graph.targets(), graph.num_nodes()).map(Some)
    }

    /// Structural path of layer `l`: the fixed operator or the weighted mixture.
    fn structural_forward(
        &self,
        tape: &mut Tape,
        l: usize,
        z: Var,
        topo: Topology<'_>,
        raw_edges: Var,
        alpha: Option<Var>,
        bind: Binder,
    ) -> Result<Option<Var>> {
        let layer = &self.layers[l];
        let edge = match &layer.edge_proj {
            Some((w, b)) => {
                let (w, b) = (bind(tape, w)?, bind(tape, b)?);
                linear(tape, raw_edges, w, Some(b))?
            }
            None => return Ok(None),
        };
        match &layer.structural {
            Structural::None => Ok(None),
            Structural::Fixed(g) => g.forward(tape, z, topo, edge, bind).map(Some),
            Structural::Mixed(bundles) => {
                let alpha = alpha.ok_or_else(|| {
                    Error::Contract("search-mode forward needs architecture weights".into())
                })?;
                let row: std::sync::Arc<[usize]> = vec![l].into();
                let alpha_row = tape.gather_rows(alpha, &row)?;
                gnn::mixed_operator(tape, z, topo, edge, alpha_row, bundles, bind).map(Some)
            }
        }
    }

    /// Per-head `(Q_m, K_m, V_m)` for layer `l` given the structural output.
    pub fn qkv(&self, tape: &mut Tape, l: usize, z: Var, structural: Option<Var>, bind: Binder) -> Result<Vec<(Var, Var, Var)>> {
        let layer = &self.layers[l];
        let (q_src, kv_src) = match (self.config.variant, structural) {
            (Variant::Vanilla, _) => (z, z),
            (Variant::Symmetric, Some(s)) => (s, s),
            (Variant::Dartsgt, Some(s)) => {
                let q = match &layer.phi {
                    Some(phi) => phi.forward(tape, z, 0.0, bind)?,
                    None => z,
                };
                (q, s)
            }
            (_, None) => return Err(Error::Contract("missing structural output".into())),
        };
        (0..self.config.heads)
            .map(|m| {
                let (wq, wk, wv) = (bind(tape, &layer.w_q[m])?, bind(tape, &layer.w_k[m])?, bind(tape, &layer.w_v[m])?);
                Ok((tape.matmul(q_src, wq)?, tape.matmul(kv_src, wk)?, tape.matmul(kv_src, wv)?))
            })
            .collect()
    }

    #[allow(clippy::too_many_arguments)]
    fn block_forward(
        &self,
        tape: &mut Tape,
        l: usize,
        z: Var,
        topo: Topology<'_>,
        raw_edges: Var,
        alpha: Option<Var>,
        h_edge: Option<Var>,
        mask: Option<HeadMask>,
        bind: Binder,
        trace: &mut Option<AttentionTrace>,
        acts: &mut Option<Activations>,
    ) -> Result<Var> {
        let layer = &self.layers[l];
        let structural = self.structural_forward(tape, l, z, topo, raw_edges, alpha, bind)?;
        let qkv = self.qkv(tape, l, z, structural, bind)?;
        let mut heads = Vec::with_capacity(qkv.len());
        for (m, (q, k, v)) in qkv.into_iter().enumerate() {
            let (y, weights) = match self.config.attention {
                AttentionKind::Dense => {
                    let (y, s) = attention::dense_attention(tape, q, k, v)?;
                    (y, HeadAttention::Dense(tape.value(s).to_vec()))
                }
                AttentionKind::Sparse => {
                    let (y, s) = attention::sparse_attention(tape, q, k, v, topo)?;
                    (y, HeadAttention::Sparse(tape.value(s).to_vec()))
                }
            };
            if let Some(tr) = trace.as_mut() {
                tr.set(l, m, weights);
            }
            heads.push(y);
        }
        let masked = mask.filter(|mk| mk.layer == l).map(|mk| mk.head);
        let w_out = bind(tape, &layer.w_out)?;
        let y = attention::concat_and_project(tape, &heads, w_out, masked)?;
        let y = tape.dropout(y, self.config.dropout);
        let y = match (h_edge, &layer.gamma) {
            (Some(h), Some(gamma)) => {
                let gamma = bind(tape, gamma)?;
                attention::edge_residual(tape, y, h, gamma)?
            }
            _ => y,
        };
        let (g1, b1) = (bind(tape, &layer.norm1.0)?, bind(tape, &layer.norm1.1)?);
        let res = tape.add(z, y)?;
        let z_hat = tape.layer_norm(res, g1, b1)?;
        let f = layer.ffn.forward(tape, z_hat, self.config.dropout, bind)?;
        let (g2, b2) = (bind(tape, &layer.norm2.0)?, bind(tape, &layer.norm2.1)?);
        let res = tape.add(z_hat, f)?;
        let out = tape.layer_norm(res, g2, b2)?;

        if let Some(a) = acts.as_mut() {
            a.layer_inputs.push(tape.to_tensor(z));
            a.structural.push(structural.map(|s| tape.to_tensor(s)));
            a.heads.push(
                heads
                    .iter()
                    .enumerate()
                    .map(|(m, &h)| {
                        if Some(m) == masked {
                            let (r, c) = tape.dims(h);
                            Tensor::zeros(vec![r, c])
                        } else {
                            tape.to_tensor(h)
                        }
                    })
                    .collect(),
            );
            a.edge_stream.push(h_edge.map(|h| tape.to_tensor(h)));
        }
        Ok(out)
    }

    /// Full forward pass: encode, `L` blocks, task head.
    pub fn forward(&self, tape: &mut Tape, graph: &Graph, opts: ForwardOptions<'_>) -> Result<ForwardPass> {
        self.counters.forward.fetch_add(1, Ordering::Relaxed);
        self.check_graph(graph)?;
        if let Some(mk) = opts.mask {
            if mk.layer >= self.config.layers {
                return Err(Error::Index {
                    what: "masked layer",
                    index: mk.layer,
                    len: self.config.layers,
                });
            }
            if mk.head >= self.config.heads {
                return Err(Error::Index {
                    what: "masked head",
                    index: mk.head,
                    len: self.config.heads,
                });
            }
        }
        let bind: Binder = if opts.freeze_weights {
            &gnn::bind_frozen
        } else {
            &gnn::bind_trainable
        };
        let alpha = match (self.is_search_mode(), opts.alpha) {
            (true, Some(a)) => {
                if a.matrix_dims()? != (self.config.layers, OpKind::ALL.len()) {
                    return Err(Error::shape("alpha", &[self.config.layers, OpKind::ALL.len()], a.shape()));
                }
                Some(if opts.alpha_trainable {
                    tape.param(a)?
                } else {
                    tape.param_frozen(a)?
                })
            }
            (true, None) => {
                return Err(Error::Contract("search-mode forward needs architecture weights".into()))
            }
            (false, _) => None,
        };
        let n = graph.num_nodes();
        let topo = Topology {
            n,
            sources: graph.sources(),
            targets: graph.targets(),
        };
        let x = tape.constant(n, self.config.d_in, graph.node_features().to_vec())?;
        let (we, be) = (bind(tape, &self.node_enc.0)?, bind(tape, &self.node_enc.1)?);
        let mut z = linear(tape, x, we, Some(be))?;
        let raw_edges = self.raw_edges(tape, graph)?;
        let before = self.edge_stream_calls();
        let h_edge = self.edge_stream(tape, graph, raw_edges, bind)?;

        let mut trace = opts.capture_trace.then(|| {
            AttentionTrace::new(n, self.config.layers, self.config.heads, graph.sources().clone(), graph.targets().clone())
        });
        let mut acts = opts.capture_activations.then(Activations::default);
        for l in 0..self.config.layers {
            z = self.block_forward(tape, l, z, topo, raw_edges, alpha, h_edge, opts.mask, bind, &mut trace, &mut acts)?;
        }
        // Exact when no other thread runs this model concurrently.
        let edge_stream_evaluations = self.edge_stream_calls().saturating_sub(before);
        if let Some(a) = acts.as_mut() {
            a.output = Some(tape.to_tensor(z));
        }
        let pooled = if self.config.task.is_node_level() {
            z
        } else {
            tape.mean_rows(z)
        };
        let (wh, bh) = (bind(tape, &self.head.0)?, bind(tape, &self.head.1)?);
        let prediction = linear(tape, pooled, wh, Some(bh))?;
        Ok(ForwardPass {
            prediction,
            trace,
            activations: acts,
            edge_stream_evaluations,
        })
    }

    /// Evaluation-mode prediction values.
    pub fn predict(&self, graph: &Graph, alpha: Option<&Tensor>, mask: Option<HeadMask>) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let pass = self.forward(
            &mut tape,
            graph,
            ForwardOptions {
                alpha,
                mask,
                freeze_weights: true,
                ..Default::default()
            },
        )?;
        Ok(tape.value(pass.prediction).to_vec())
    }
}
