//! Graphs, datasets, the JSON Lines dataset format, and the search split.

mod synthetic;

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub use synthetic::{generate_synthetic, SyntheticTask};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Regression,
    GraphClassification,
    NodeClassification,
}

impl TaskKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TaskKind::Regression => "regression",
            TaskKind::GraphClassification => "graph_classification",
            TaskKind::NodeClassification => "node_classification",
        }
    }

    pub fn is_node_level(self) -> bool {
        self == TaskKind::NodeClassification
    }
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "regression" => Ok(TaskKind::Regression),
            "graph_classification" => Ok(TaskKind::GraphClassification),
            "node_classification" => Ok(TaskKind::NodeClassification),
            other => Err(Error::Config(format!("unknown task kind '{other}'"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Label {
    Scalar(f64),
    Class(usize),
    NodeClasses(Vec<usize>),
}

/// A directed graph with dense node and edge features.
///
/// Undirected graphs are stored with both orientations. Messages flow from
/// source to target.
#[derive(Clone, Debug)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    sources: Arc<[usize]>,
    targets: Arc<[usize]>,
    node_features: Vec<f64>,
    d_in: usize,
    edge_features: Vec<f64>,
    d_e: usize,
    label: Label,
}

impl PartialEq for Graph {
    fn eq(&self, other: &Self) -> bool {
        self.n == other.n
            && self.edges == other.edges
            && self.d_in == other.d_in
            && self.d_e == other.d_e
            && self.node_features == other.node_features
            && self.edge_features == other.edge_features
            && self.label == other.label
    }
}

impl Graph {
    /// `node_features` is `n×d_in` row-major, `edge_features` is `|E|×d_e`.
    pub fn new(
        n: usize,
        edges: Vec<(usize, usize)>,
        node_features: Vec<f64>,
        d_in: usize,
        edge_features: Vec<f64>,
        d_e: usize,
        label: Label,
    ) -> Result<Self> {
        let bad = |msg: String| Error::InvalidGraph { index: 0, msg };
        if n == 0 {
            return Err(bad("graph must have at least one node".into()));
        }
        if d_in == 0 {
            return Err(bad("node feature dimension must be positive".into()));
        }
        if let Some(&(i, j)) = edges.iter().find(|&&(i, j)| i >= n || j >= n) {
            return Err(bad(format!("edge ({i},{j}) has an endpoint >= n={n}")));
        }
        if node_features.len() != n * d_in {
            return Err(bad(format!(
                "expected {n}x{d_in} node features, got {} values",
                node_features.len()
            )));
        }
        if edge_features.len() != edges.len() * d_e {
            return Err(bad(format!(
                "expected {}x{d_e} edge features, got {} values",
                edges.len(),
                edge_features.len()
            )));
        }
        if node_features.iter().chain(&edge_features).any(|v| !v.is_finite()) {
            return Err(bad("non-finite feature value".into()));
        }
        match &label {
            Label::Scalar(v) if !v.is_finite() => return Err(bad("non-finite label".into())),
            Label::NodeClasses(c) if c.len() != n => {
                return Err(bad(format!("expected {n} node labels, got {}", c.len())))
            }
            _ => {}
        }
        let sources = edges.iter().map(|e| e.0).collect();
        let targets = edges.iter().map(|e| e.1).collect();
        Ok(Graph {
            n,
            edges,
            sources,
            targets,
            node_features,
            d_in,
            edge_features,
            d_e,
            label,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn sources(&self) -> &Arc<[usize]> {
        &self.sources
    }

    pub fn targets(&self) -> &Arc<[usize]> {
        &self.targets
    }

    pub fn node_features(&self) -> &[f64] {
        &self.node_features
    }

    pub fn node_feature_dim(&self) -> usize {
        self.d_in
    }

    pub fn edge_features(&self) -> &[f64] {
        &self.edge_features
    }

    pub fn edge_feature_dim(&self) -> usize {
        self.d_e
    }

    pub fn label(&self) -> &Label {
        &self.label
    }

    /// Same graph with a different edge set; edge features are replaced by `edge_features`.
    pub fn with_edges(&self, edges: Vec<(usize, usize)>, edge_features: Vec<f64>) -> Result<Self> {
        Graph::new(
            self.n,
            edges,
            self.node_features.clone(),
            self.d_in,
            edge_features,
            self.d_e,
            self.label.clone(),
        )
    }

    /// Out-degree of every node (equals the undirected degree for symmetric storage).
    pub fn degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.n];
        for &(i, _) in &self.edges {
            deg[i] += 1;
        }
        deg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub task: TaskKind,
    pub num_classes: Option<usize>,
    pub d_in: usize,
    pub d_e: usize,
    pub graphs: Vec<Graph>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    task: TaskKind,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    num_classes: Option<usize>,
    d_in: usize,
    d_e: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawLabel {
    Int(i64),
    Float(f64),
    List(Vec<i64>),
}

#[derive(Serialize, Deserialize)]
struct Record {
    n: usize,
    edges: Vec<[usize; 2]>,
    x: Vec<Vec<f64>>,
    e: Vec<Vec<f64>>,
    y: RawLabel,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.graphs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.graphs.is_empty()
    }

    /// Checks homogeneity and label/task consistency for every graph.
    pub fn validate(&self) -> Result<()> {
        if self.task != TaskKind::Regression {
            match self.num_classes {
                Some(c) if c >= 2 => {}
                _ => {
                    return Err(Error::Config(
                        "classification datasets need num_classes >= 2".into(),
                    ))
                }
            }
        }
        for (index, g) in self.graphs.iter().enumerate() {
            let bad = |msg: String| Error::InvalidGraph { index, msg };
            if g.d_in != self.d_in || g.d_e != self.d_e {
                return Err(bad(format!(
                    "feature dims ({}, {}) differ from dataset ({}, {})",
                    g.d_in, g.d_e, self.d_in, self.d_e
                )));
            }
            let classes = self.num_classes.unwrap_or(0);
            match (&g.label, self.task) {
                (Label::Scalar(_), TaskKind::Regression) => {}
                (Label::Class(c), TaskKind::GraphClassification) if *c < classes => {}
                (Label::NodeClasses(cs), TaskKind::NodeClassification)
                    if cs.iter().all(|c| *c < classes) => {}
                (label, task) => {
                    return Err(bad(format!("label {label:?} inconsistent with task {task}")))
                }
            }
        }
        Ok(())
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            graphs: indices.iter().map(|&i| self.graphs[i].clone()).collect(),
            ..self.empty_like()
        }
    }

    fn empty_like(&self) -> Dataset {
        Dataset {
            task: self.task,
            num_classes: self.num_classes,
            d_in: self.d_in,
            d_e: self.d_e,
            graphs: Vec::new(),
        }
    }

    pub fn mean_nodes(&self) -> f64 {
        mean(self.graphs.iter().map(|g| g.n as f64))
    }

    pub fn mean_edges(&self) -> f64 {
        mean(self.graphs.iter().map(|g| g.edges.len() as f64))
    }

    /// Mean over graphs of the mean out-degree.
    pub fn mean_degree(&self) -> f64 {
        mean(self.graphs.iter().map(|g| g.edges.len() as f64 / g.n as f64))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(Error::file(path))?);
        self.write_jsonl(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn write_jsonl<W: Write>(&self, w: &mut W) -> Result<()> {
        let header = Header {
            task: self.task,
            num_classes: self.num_classes,
            d_in: self.d_in,
            d_e: self.d_e,
        };
        serde_json::to_writer(&mut *w, &header)?;
        w.write_all(b"\n")?;
        for g in &self.graphs {
            let y = match &g.label {
                Label::Scalar(v) => RawLabel::Float(*v),
                Label::Class(c) => RawLabel::Int(*c as i64),
                Label::NodeClasses(cs) => RawLabel::List(cs.iter().map(|&c| c as i64).collect()),
            };
            let rec = Record {
                n: g.n,
                edges: g.edges.iter().map(|&(i, j)| [i, j]).collect(),
                x: g.node_features.chunks(g.d_in).map(<[f64]>::to_vec).collect(),
                e: if g.d_e == 0 {
                    vec![Vec::new(); g.edges.len()]
                } else {
                    g.edge_features.chunks(g.d_e).map(<[f64]>::to_vec).collect()
                },
                y,
            };
            serde_json::to_writer(&mut *w, &rec)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Dataset> {
        Dataset::read_jsonl(BufReader::new(File::open(path).map_err(Error::file(path))?))
    }

    pub fn read_jsonl<R: BufRead>(reader: R) -> Result<Dataset> {
        let mut lines = reader.lines().enumerate();
        let header: Header = loop {
            let Some((idx, line)) = lines.next() else {
                return Err(Error::Parse {
                    line: 1,
                    msg: "missing dataset header".into(),
                });
            };
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            break serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
        };
        let mut ds = Dataset {
            task: header.task,
            num_classes: header.num_classes,
            d_in: header.d_in,
            d_e: header.d_e,
            graphs: Vec::new(),
        };
        for (idx, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: Record = serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: idx + 1,
                msg: e.to_string(),
            })?;
            let index = ds.graphs.len();
            let g = record_to_graph(rec, &ds).map_err(|e| match e {
                Error::InvalidGraph { msg, .. } => Error::InvalidGraph { index, msg },
                other => other,
            })?;
            ds.graphs.push(g);
        }
        ds.validate()?;
        Ok(ds)
    }
}

fn record_to_graph(rec: Record, ds: &Dataset) -> Result<Graph> {
    let bad = |msg: String| Error::InvalidGraph { index: 0, msg };
    if rec.x.len() != rec.n || rec.x.iter().any(|r| r.len() != ds.d_in) {
        return Err(bad(format!("x must be {}x{}", rec.n, ds.d_in)));
    }
    if rec.e.len() != rec.edges.len() || rec.e.iter().any(|r| r.len() != ds.d_e) {
        return Err(bad(format!("e must be {}x{}", rec.edges.len(), ds.d_e)));
    }
    let to_class = |v: i64| -> Result<usize> {
        usize::try_from(v).map_err(|_| bad(format!("negative class label {v}")))
    };
    let label = match (ds.task, rec.y) {
        (TaskKind::Regression, RawLabel::Float(v)) => Label::Scalar(v),
        (TaskKind::Regression, RawLabel::Int(v)) => Label::Scalar(v as f64),
        (TaskKind::GraphClassification, RawLabel::Int(v)) => Label::Class(to_class(v)?),
        (TaskKind::NodeClassification, RawLabel::List(vs)) => {
            Label::NodeClasses(vs.into_iter().map(to_class).collect::<Result<_>>()?)
        }
        (task, _) => return Err(bad(format!("label type does not match task {task}"))),
    };
    Graph::new(
        rec.n,
        rec.edges.into_iter().map(|[i, j]| (i, j)).collect(),
        rec.x.into_iter().flatten().collect(),
        ds.d_in,
        rec.e.into_iter().flatten().collect(),
        ds.d_e,
        label,
    )
}

fn mean(it: impl Iterator<Item = f64>) -> f64 {
    let (sum, count) = it.fold((0.0, 0usize), |(s, c), v| (s + v, c + 1));
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

/// The two halves of the search split, plus the original indices of each.
#[derive(Clone, Debug)]
pub struct SplitPair {
    pub darts_train: Dataset,
    pub darts_val: Dataset,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
}

/// Seeded shuffle; the first floor(60%) go to the weight split, the rest to
/// the architecture split.
pub fn split_darts(d: &Dataset, seed: u64) -> Result<SplitPair> {
    if d.len() < 2 {
        return Err(Error::Config(format!(
            "search split needs at least 2 graphs, got {}",
            d.len()
        )));
    }
    let (train_indices, val_indices) = shuffled_split(d.len(), d.len() * 3 / 5, seed, rng::SPLIT);
    Ok(SplitPair {
        darts_train: d.subset(&train_indices),
        darts_val: d.subset(&val_indices),
        train_indices,
        val_indices,
    })
}

/// Seeded shuffle of `0..n`, cut after `first` entries.
pub fn shuffled_split(n: usize, first: usize, seed: u64, stream: &str) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, stream));
    let rest = idx.split_off(first.min(n));
    (idx, rest)
}

/// All ordered pairs `(i, j)` in lexicographic order, excluding `i == j`
/// unless `with_self_loops`.
pub fn complete_edge_set(n: usize, with_self_loops: bool) -> Vec<(usize, usize)> {
    (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|&(i, j)| with_self_loops || i != j)
        .collect()
}
