//! Built-in synthetic tasks.
//!
//! * `motif`: binary graph classification. Marked nodes (feature 0 == 1) come in
//!   groups of three; positive graphs wire every group as a triangle, negative
//!   graphs wire every group as a path. Background edges never join two marked
//!   nodes, so a graph is positive exactly when a fully marked triangle exists.
//! * `degree-reg`: regression of the mean node degree of an Erdős–Rényi graph;
//!   edge features are noisy constants.
//! * `community`: node classification of a planted two-block partition, with
//!   block hints revealed on about half of the nodes.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::{Dataset, Graph, Label, TaskKind};
use crate::error::{Error, Result};
use crate::rng;

pub const MIN_NODES: usize = 8;
pub const MAX_NODES: usize = 40;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SyntheticTask {
    Motif,
    DegreeReg,
    Community,
}

impl SyntheticTask {
    pub fn name(self) -> &'static str {
        match self {
            SyntheticTask::Motif => "motif",
            SyntheticTask::DegreeReg => "degree-reg",
            SyntheticTask::Community => "community",
        }
    }
}

impl fmt::Display for SyntheticTask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticTask {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "motif" => Ok(SyntheticTask::Motif),
            "degree-reg" => Ok(SyntheticTask::DegreeReg),
            "community" => Ok(SyntheticTask::Community),
            other => Err(Error::Config(format!(
                "unknown synthetic task '{other}' (expected motif, degree-reg or community)"
            ))),
        }
    }
}

/// Pure function of `(task, n_graphs, seed)`.
pub fn generate_synthetic(task: SyntheticTask, n_graphs: usize, seed: u64) -> Result<Dataset> {
    if n_graphs == 0 {
        return Err(Error::Config("n_graphs must be at least 1".into()));
    }
    let mut rng = rng::stream(seed, rng::DATA);
    let graphs = (0..n_graphs)
        .map(|_| match task {
            SyntheticTask::Motif => motif_graph(&mut rng),
            SyntheticTask::DegreeReg => degree_graph(&mut rng),
            SyntheticTask::Community => community_graph(&mut rng),
        })
        .collect::<Result<Vec<_>>>()?;
    let (kind, num_classes, d_in, d_e) = match task {
        SyntheticTask::Motif => (TaskKind::GraphClassification, Some(2), 2, 1),
        SyntheticTask::DegreeReg => (TaskKind::Regression, None, 1, 1),
        SyntheticTask::Community => (TaskKind::NodeClassification, Some(2), 2, 1),
    };
    let ds = Dataset {
        task: kind,
        num_classes,
        d_in,
        d_e,
        graphs,
    };
    ds.validate()?;
    Ok(ds)
}

/// Undirected edge set, kept as `(min, max)` pairs.
#[derive(Default)]
struct EdgeSet(BTreeSet<(usize, usize)>);

impl EdgeSet {
    fn insert(&mut self, a: usize, b: usize) {
        if a != b {
            self.0.insert((a.min(b), a.max(b)));
        }
    }

    /// Both orientations, sorted by (source, target).
    fn directed(&self) -> Vec<(usize, usize)> {
        let mut out: Vec<(usize, usize)> = self.0.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
        out.sort_unstable();
        out
    }
}

fn node_count(rng: &mut ChaCha8Rng) -> usize {
    rng.gen_range(MIN_NODES..=MAX_NODES)
}

fn motif_graph(rng: &mut ChaCha8Rng) -> Result<Graph> {
    let n = node_count(rng);
    let groups = (n / 8).max(1);
    let positive = rng.gen_bool(0.5);

    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let (marked, unmarked) = order.split_at(3 * groups);

    let mut edges = EdgeSet::default();
    for triple in marked.chunks(3) {
        edges.insert(triple[0], triple[1]);
        edges.insert(triple[1], triple[2]);
        if positive {
            edges.insert(triple[0], triple[2]);
        }
    }
    // Random tree over the unmarked nodes, then attach each marked node to one of them.
    for k in 1..unmarked.len() {
        let parent = unmarked[rng.gen_range(0..k)];
        edges.insert(unmarked[k], parent);
    }
    for &m in marked {
        edges.insert(m, *unmarked.choose(rng).expect("n >= 8 leaves unmarked nodes"));
    }
    for _ in 0..n / 4 {
        let a = order[rng.gen_range(0..n)];
        let b = *unmarked.choose(rng).expect("unmarked nodes exist");
        edges.insert(a, b);
    }

    let mut is_marked = vec![false; n];
    marked.iter().for_each(|&m| is_marked[m] = true);
    let x = is_marked
        .iter()
        .flat_map(|&m| if m { [1.0, 0.0] } else { [0.0, 1.0] })
        .collect();
    let directed = edges.directed();
    let e = vec![1.0; directed.len()];
    Graph::new(n, directed, x, 2, e, 1, Label::Class(usize::from(positive)))
}

fn degree_graph(rng: &mut ChaCha8Rng) -> Result<Graph> {
    let n = node_count(rng);
    let p = rng.gen_range(0.05..0.3);
    let mut edges = EdgeSet::default();
    for a in 0..n {
        for b in a + 1..n {
            if rng.gen_bool(p) {
                edges.insert(a, b);
            }
        }
    }
    let directed = edges.directed();
    let mean_degree = directed.len() as f64 / n as f64;
    let e = (0..directed.len())
        .map(|_| 1.0 + 0.1 * (rng.gen::<f64>() - 0.5))
        .collect();
    Graph::new(n, directed, vec![1.0; n], 1, e, 1, Label::Scalar(mean_degree))
}

fn community_graph(rng: &mut ChaCha8Rng) -> Result<Graph> {
    let n = node_count(rng);
    let block: Vec<usize> = (0..n).map(|_| rng.gen_range(0..2)).collect();
    let mut edges = EdgeSet::default();
    for a in 0..n {
        for b in a + 1..n {
            let p = if block[a] == block[b] { 0.35 } else { 0.03 };
            if rng.gen_bool(p) {
                edges.insert(a, b);
            }
        }
    }
    let x = block
        .iter()
        .flat_map(|&c| {
            if rng.gen_bool(0.5) {
                if c == 0 {
                    [1.0, 0.0]
                } else {
                    [0.0, 1.0]
                }
            } else {
                [0.0, 0.0]
            }
        })
        .collect();
    let directed = edges.directed();
    let e = vec![1.0; directed.len()];
    Graph::new(n, directed, x, 2, e, 1, Label::NodeClasses(block))
}
