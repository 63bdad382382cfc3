//! Causal head ablation: deviations, head ranking, Specialization, Focus and
//! dataset reports.

use std::fmt::Write as _;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tape;
use crate::data::{Dataset, Graph};
use crate::error::{Error, Result};
use crate::model::{AttentionTrace, ForwardOptions, HeadMask, Model};
use crate::train::{instance_loss, task_loss};

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_NODE_FRACTION: f64 = 10.0;

/// Per-instance deviations, stored layer-major.
#[derive(Clone, Debug, PartialEq)]
pub struct DeviationTable {
    pub instance: usize,
    pub baseline_loss: f64,
    pub layers: usize,
    pub heads: usize,
    pub deltas: Vec<f64>,
}

impl DeviationTable {
    pub fn new(instance: usize, baseline_loss: f64, layers: usize, heads: usize, deltas: Vec<f64>) -> Result<Self> {
        if deltas.len() != layers * heads || deltas.is_empty() {
            return Err(Error::shape("deviation table", &[layers, heads], &[deltas.len()]));
        }
        if let Some(i) = deltas.iter().position(|d| !d.is_finite()) {
            return Err(Error::NonFinite(format!(
                "deviation for layer {} head {}",
                i / heads,
                i % heads
            )));
        }
        Ok(DeviationTable {
            instance,
            baseline_loss,
            layers,
            heads,
            deltas,
        })
    }

    pub fn get(&self, layer: usize, head: usize) -> f64 {
        self.deltas[layer * self.heads + head]
    }

    /// `((layer, head), δ)` in layer-major order.
    pub fn entries(&self) -> impl Iterator<Item = ((usize, usize), f64)> + '_ {
        self.deltas
            .iter()
            .enumerate()
            .map(|(i, &d)| ((i / self.heads, i % self.heads), d))
    }
}

/// `loss(masked) − loss(baseline)` for one head on one graph.
pub fn head_deviation(model: &Model, graph: &Graph, layer: usize, head: usize) -> Result<f64> {
    let base = instance_loss(model, graph, None, None)?;
    let masked = instance_loss(model, graph, None, Some(HeadMask { layer, head }))?;
    let delta = masked - base;
    if !delta.is_finite() {
        return Err(Error::NonFinite(format!("deviation for layer {layer} head {head}")));
    }
    Ok(delta)
}

/// Descending by δ (or |δ|); ties in lexicographic (layer, head) order.
pub fn rank_heads(table: &DeviationTable, sign_agnostic: bool) -> Vec<(usize, usize)> {
    let key = |d: f64| if sign_agnostic { d.abs() } else { d };
    let mut entries: Vec<((usize, usize), f64)> = table.entries().collect();
    entries.sort_by(|(pa, a), (pb, b)| key(*b).total_cmp(&key(*a)).then(pa.cmp(pb)));
    entries.into_iter().map(|(p, _)| p).collect()
}

/// Population standard deviation of all deviations.
pub fn specialization(deltas: &[f64]) -> f64 {
    let Some(&shift) = deltas.first() else {
        return 0.0;
    };
    // Shifting by one sample makes constant inputs exactly zero.
    let n = deltas.len() as f64;
    let mean = deltas.iter().map(|d| d - shift).sum::<f64>() / n;
    (deltas.iter().map(|d| (d - shift - mean).powi(2)).sum::<f64>() / n).sqrt()
}

/// Size of a top-node set: `max(1, ceil(fraction·n/100))`, capped at `n`.
pub fn top_node_count(n: usize, node_fraction: f64) -> usize {
    ((node_fraction * n as f64 / 100.0).ceil() as usize).clamp(1, n.max(1))
}

/// Highest incoming-mass nodes of one head; ties go to the lower index.
pub fn top_nodes(trace: &AttentionTrace, layer: usize, head: usize, node_fraction: f64) -> Result<Vec<usize>> {
    let mass = trace.incoming_mass(layer, head)?;
    let mut order: Vec<usize> = (0..mass.len()).collect();
    order.sort_by(|&a, &b| mass[b].total_cmp(&mass[a]).then(a.cmp(&b)));
    order.truncate(top_node_count(trace.n, node_fraction));
    order.sort_unstable();
    Ok(order)
}

/// |A∩B| / |A∪B| of two index sets in any order; two empty sets count as identical.
pub fn jaccard(a: &[usize], b: &[usize]) -> f64 {
    let sorted = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let (a, b) = (sorted(a), sorted(b));
    let (mut i, mut j, mut inter) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    let union = a.len() + b.len() - inter;
    if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    }
}

/// Mean pairwise Jaccard similarity; `None` for fewer than two sets.
pub fn focus_of_sets(sets: &[Vec<usize>]) -> Option<f64> {
    if sets.len() < 2 {
        return None;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for j in 0..sets.len() {
        for m in j + 1..sets.len() {
            total += jaccard(&sets[j], &sets[m]);
            pairs += 1;
        }
    }
    Some(total / pairs as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct TopPair {
    pub layer: usize,
    pub head: usize,
    pub top_nodes: Vec<usize>,
    pub attn_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FocusResult {
    pub value: Option<f64>,
    pub effective_k: usize,
    pub pairs: Vec<TopPair>,
}

/// Focus over the first `k` ranked pairs (fewer if the model has fewer heads).
pub fn focus(trace: &AttentionTrace, ranked: &[(usize, usize)], k: usize, node_fraction: f64) -> Result<FocusResult> {
    let effective_k = k.min(ranked.len());
    let pairs = ranked[..effective_k]
        .iter()
        .map(|&(layer, head)| {
            Ok(TopPair {
                layer,
                head,
                top_nodes: top_nodes(trace, layer, head, node_fraction)?,
                attn_std: trace.attention_std(layer, head).unwrap_or(0.0),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let sets: Vec<Vec<usize>> = pairs.iter().map(|p| p.top_nodes.clone()).collect();
    Ok(FocusResult {
        value: focus_of_sets(&sets),
        effective_k,
        pairs,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InterpretationClass {
    #[serde(rename = "most-interpretable")]
    MostInterpretable,
    #[serde(rename = "complementary-strategies")]
    ComplementaryStrategies,
    #[serde(rename = "node-consensus")]
    NodeConsensus,
    #[serde(rename = "least-interpretable")]
    LeastInterpretable,
    #[serde(rename = "insufficient-heads")]
    InsufficientHeads,
}

impl InterpretationClass {
    pub fn label(self) -> &'static str {
        match self {
            InterpretationClass::MostInterpretable => "most-interpretable",
            InterpretationClass::ComplementaryStrategies => "complementary-strategies",
            InterpretationClass::NodeConsensus => "node-consensus",
            InterpretationClass::LeastInterpretable => "least-interpretable",
            InterpretationClass::InsufficientHeads => "insufficient-heads",
        }
    }
}

/// Quadrant of (spec, focus) against thresholds; values at a threshold count as high.
pub fn interpretation_class(spec: f64, focus: Option<f64>, spec_threshold: f64, focus_threshold: f64) -> InterpretationClass {
    let Some(focus) = focus else {
        return InterpretationClass::InsufficientHeads;
    };
    match (spec >= spec_threshold, focus >= focus_threshold) {
        (true, true) => InterpretationClass::MostInterpretable,
        (true, false) => InterpretationClass::ComplementaryStrategies,
        (false, true) => InterpretationClass::NodeConsensus,
        (false, false) => InterpretationClass::LeastInterpretable,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpretConfig {
    pub k: usize,
    pub node_fraction: f64,
    pub sign_agnostic: bool,
    /// `(spec, focus)` thresholds; dataset medians when unset.
    pub thresholds: Option<(f64, f64)>,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        InterpretConfig {
            k: DEFAULT_K,
            node_fraction: DEFAULT_NODE_FRACTION,
            sign_agnostic: false,
            thresholds: None,
        }
    }
}

impl InterpretConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        if !(self.node_fraction > 0.0 && self.node_fraction <= 100.0) {
            return Err(Error::Config(format!("node fraction {} outside (0, 100]", self.node_fraction)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct InstanceReport {
    pub table: DeviationTable,
    pub ranking: Vec<(usize, usize)>,
    pub specialization: f64,
    pub focus: FocusResult,
    pub class: InterpretationClass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetReport {
    pub instances: Vec<InstanceReport>,
    pub median_specialization: f64,
    /// `None` when no instance has a defined Focus.
    pub median_focus: Option<f64>,
    pub k: usize,
    pub node_fraction: f64,
    /// Forward passes run, baselines included.
    pub forward_passes: usize,
}

/// Median with the even-count mean convention; `None` for an empty slice.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 0 {
        (v[mid - 1] + v[mid]) / 2.0
    } else {
        v[mid]
    })
}

fn baseline(model: &Model, graph: &Graph) -> Result<(f64, AttentionTrace)> {
    let mut tape = Tape::new();
    let pass = model.forward(
        &mut tape,
        graph,
        ForwardOptions {
            freeze_weights: true,
            capture_trace: true,
            ..Default::default()
        },
    )?;
    let loss = task_loss(&mut tape, pass.prediction, graph, model.config())?;
    let trace = pass
        .trace
        .ok_or_else(|| Error::State("attention trace was not captured".into()))?;
    Ok((tape.scalar_value(loss), trace))
}

/// Runs the full ablation sweep: baselines, then every head masked in
/// layer-major order over all instances, then per-instance metrics.
pub fn analyze_dataset(model: &Model, ds: &Dataset, cfg: &InterpretConfig) -> Result<DatasetReport> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Config("interpretability needs a nonempty dataset".into()));
    }
    if model.is_search_mode() {
        return Err(Error::Contract("interpretability expects a discrete model".into()));
    }
    let (layers, heads) = (model.config().layers, model.config().heads);
    let attach = |i: usize| move |e: Error| Error::Instance { instance: i, source: Box::new(e) };

    let mut passes = 0usize;
    let mut bases = Vec::with_capacity(ds.len());
    for (i, g) in ds.graphs.iter().enumerate() {
        bases.push(baseline(model, g).map_err(attach(i))?);
        passes += 1;
    }
    let mut deltas = vec![vec![0.0; layers * heads]; ds.len()];
    for layer in 0..layers {
        for head in 0..heads {
            let mask = Some(HeadMask { layer, head });
            for (i, g) in ds.graphs.iter().enumerate() {
                let masked = instance_loss(model, g, None, mask).map_err(attach(i))?;
                passes += 1;
                deltas[i][layer * heads + head] = masked - bases[i].0;
            }
        }
    }

    let mut partial = Vec::with_capacity(ds.len());
    for (i, ((base_loss, trace), d)) in bases.into_iter().zip(deltas).enumerate() {
        let table = DeviationTable::new(i, base_loss, layers, heads, d).map_err(attach(i))?;
        let ranking = rank_heads(&table, cfg.sign_agnostic);
        let spec = specialization(&table.deltas);
        let focus = focus(&trace, &ranking, cfg.k, cfg.node_fraction).map_err(attach(i))?;
        partial.push((table, ranking, spec, focus));
    }
    let specs: Vec<f64> = partial.iter().map(|p| p.2).collect();
    let focuses: Vec<f64> = partial.iter().filter_map(|p| p.3.value).collect();
    let median_specialization = median(&specs).unwrap_or(0.0);
    let median_focus = median(&focuses);
    let (spec_t, focus_t) = cfg
        .thresholds
        .unwrap_or((median_specialization, median_focus.unwrap_or(0.0)));
    let instances = partial
        .into_iter()
        .map(|(table, ranking, specialization, focus)| InstanceReport {
            class: interpretation_class(specialization, focus.value, spec_t, focus_t),
            table,
            ranking,
            specialization,
            focus,
        })
        .collect();
    Ok(DatasetReport {
        instances,
        median_specialization,
        median_focus,
        k: cfg.k,
        node_fraction: cfg.node_fraction,
        forward_passes: passes,
    })
}

/// Float with 17 significant digits.
fn num(out: &mut String, v: f64) {
    if v.is_finite() {
        let _ = write!(out, "{v:.16e}");
    } else {
        out.push_str("null");
    }
}

fn opt_num(out: &mut String, v: Option<f64>) {
    match v {
        Some(v) => num(out, v),
        None => out.push_str("null"),
    }
}

impl InstanceReport {
    /// One JSON object with the fixed field order.
    pub fn to_json(&self) -> String {
        let mut s = String::new();
        let _ = write!(s, "{{\"instance\":{},\"baseline_loss\":", self.table.instance);
        num(&mut s, self.table.baseline_loss);
        s.push_str(",\"deviations\":[");
        for (i, ((l, m), d)) in self.table.entries().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let _ = write!(s, "{{\"layer\":{l},\"head\":{m},\"delta\":");
            num(&mut s, d);
            s.push('}');
        }
        s.push_str("],\"ranking\":[");
        let ranking: Vec<String> = self.ranking.iter().map(|(l, m)| format!("[{l},{m}]")).collect();
        s.push_str(&ranking.join(","));
        s.push_str("],\"specialization\":");
        num(&mut s, self.specialization);
        s.push_str(",\"focus\":");
        opt_num(&mut s, self.focus.value);
        s.push_str(",\"top_pairs\":[");
        for (i, p) in self.focus.pairs.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let nodes: Vec<String> = p.top_nodes.iter().map(usize::to_string).collect();
            let _ = write!(
                s,
                "{{\"layer\":{},\"head\":{},\"top_nodes\":[{}],\"attn_std\":",
                p.layer,
                p.head,
                nodes.join(",")
            );
            num(&mut s, p.attn_std);
            s.push('}');
        }
        let _ = write!(s, "],\"class\":\"{}\"}}", self.class.label());
        s
    }
}

impl DatasetReport {
    /// Dataset-level record: the aggregate fields plus the forward-pass audit.
    pub fn summary_json(&self) -> String {
        let mut s = String::from("{\"median_specialization\":");
        num(&mut s, self.median_specialization);
        s.push_str(",\"median_focus\":");
        opt_num(&mut s, self.median_focus);
        let _ = write!(s, ",\"k\":{},\"node_fraction\":", self.k);
        num(&mut s, self.node_fraction);
        let _ = write!(
            s,
            ",\"instances\":{},\"forward_passes\":{}}}",
            self.instances.len(),
            self.forward_passes
        );
        s
    }

    /// Writes `instances.jsonl` and `dataset.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::file(dir))?;
        let mut w = BufWriter::new(File::create(dir.join("instances.jsonl")).map_err(Error::file(dir))?);
        for inst in &self.instances {
            writeln!(w, "{}", inst.to_json())?;
        }
        w.flush()?;
        fs::write(dir.join("dataset.json"), self.summary_json() + "\n").map_err(Error::file(dir))?;
        Ok(())
    }
}
