//! Attention kernels, head concatenation with ablation, and the attention trace.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gnn::Topology;

/// Full all-pairs attention. Returns `(Y, S)` with `S` the `n×n` row-softmax.
pub fn dense_attention(tape: &mut Tape, q: Var, k: Var, v: Var) -> Result<(Var, Var)> {
    let dm = tape.dims(q).1;
    let kt = tape.transpose(k);
    let scores = tape.matmul(q, kt)?;
    let scores = tape.scalar_mul(scores, 1.0 / (dm as f64).sqrt());
    let s = tape.row_softmax(scores)?;
    let y = tape.matmul(s, v)?;
    Ok((y, s))
}

/// Neighbour-restricted attention. Edge `(i, j)` scores `<K[i], Q[j]>/sqrt(d_m)`
/// and scores are normalized over the incoming edges of each target. Nodes
/// without incoming edges get zero rows. Returns `(Y, s)` with `s` an `|E|×1`
/// column aligned with the edge list.
pub fn sparse_attention(tape: &mut Tape, q: Var, k: Var, v: Var, topo: Topology<'_>) -> Result<(Var, Var)> {
    let dm = tape.dims(q).1;
    let k_src = tape.gather_rows(k, topo.sources)?;
    let q_dst = tape.gather_rows(q, topo.targets)?;
    let prod = tape.hadamard(k_src, q_dst)?;
    let beta = tape.row_sum(prod);
    let beta = tape.scalar_mul(beta, 1.0 / (dm as f64).sqrt());
    let s = tape.segment_softmax(beta, topo.targets, topo.n)?;
    let v_src = tape.gather_rows(v, topo.sources)?;
    let msg = tape.mul_col(v_src, s)?;
    let y = tape.scatter_add_rows(msg, topo.targets, topo.n)?;
    Ok((y, s))
}

/// `[Y_1 ‖ … ‖ Y_M]·W_out`, with head `masked` replaced by zeros first.
pub fn concat_and_project(tape: &mut Tape, heads: &[Var], w_out: Var, masked: Option<usize>) -> Result<Var> {
    if let Some(m) = masked {
        if m >= heads.len() {
            return Err(Error::Index {
                what: "masked head",
                index: m,
                len: heads.len(),
            });
        }
    }
    let parts: Vec<Var> = heads
        .iter()
        .enumerate()
        .map(|(m, &y)| {
            if Some(m) == masked {
                let (r, c) = tape.dims(y);
                tape.zeros(r, c)
            } else {
                y
            }
        })
        .collect();
    let cat = tape.concat_columns(&parts)?;
    tape.matmul(cat, w_out)
}

/// `Y + sigmoid(gamma)·H_edge`.
pub fn edge_residual(tape: &mut Tape, y: Var, h_edge: Var, gamma: Var) -> Result<Var> {
    let gate = tape.sigmoid(gamma);
    let scaled = tape.scale_by(h_edge, gate)?;
    tape.add(y, scaled)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct HeadMask {
    pub layer: usize,
    pub head: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub enum HeadAttention {
    /// Row-major `n×n` softmax matrix.
    Dense(Vec<f64>),
    /// One weight per edge, aligned with the graph's edge list.
    Sparse(Vec<f64>),
}

/// Attention weights of every (layer, head) captured during one forward pass.
#[derive(Clone, Debug)]
pub struct AttentionTrace {
    pub n: usize,
    pub layers: usize,
    pub heads: usize,
    pub sources: Arc<[usize]>,
    pub targets: Arc<[usize]>,
    entries: Vec<Option<HeadAttention>>,
}

impl AttentionTrace {
    pub fn new(n: usize, layers: usize, heads: usize, sources: Arc<[usize]>, targets: Arc<[usize]>) -> Self {
        AttentionTrace {
            n,
            layers,
            heads,
            sources,
            targets,
            entries: vec![None; layers * heads],
        }
    }

    pub fn set(&mut self, layer: usize, head: usize, weights: HeadAttention) {
        self.entries[layer * self.heads + head] = Some(weights);
    }

    pub fn get(&self, layer: usize, head: usize) -> Option<&HeadAttention> {
        if layer >= self.layers || head >= self.heads {
            return None;
        }
        self.entries[layer * self.heads + head].as_ref()
    }

    /// Incoming attention mass per node: column sums of `S` (dense) or the sum of
    /// edge weights into each target (sparse).
    pub fn incoming_mass(&self, layer: usize, head: usize) -> Result<Vec<f64>> {
        let entry = self.get(layer, head).ok_or_else(|| {
            Error::Contract(format!("no attention captured for layer {layer} head {head}"))
        })?;
        let mut mass = vec![0.0; self.n];
        match entry {
            HeadAttention::Dense(s) => {
                for row in s.chunks(self.n) {
                    mass.iter_mut().zip(row).for_each(|(m, w)| *m += w);
                }
            }
            HeadAttention::Sparse(s) => {
                for (&t, w) in self.targets.iter().zip(s) {
                    mass[t] += w;
                }
            }
        }
        Ok(mass)
    }

    /// Population standard deviation of all attention weights of one head.
    pub fn attention_std(&self, layer: usize, head: usize) -> Option<f64> {
        let w = match self.get(layer, head)? {
            HeadAttention::Dense(s) | HeadAttention::Sparse(s) => s,
        };
        if w.is_empty() {
            return Some(0.0);
        }
        let mean = w.iter().sum::<f64>() / w.len() as f64;
        Some((w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / w.len() as f64).sqrt())
    }

    /// Largest deviation of any row (dense) or target group (sparse) from unit sum.
    pub fn max_normalization_error(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for entry in self.entries.iter().flatten() {
            match entry {
                HeadAttention::Dense(s) => {
                    for row in s.chunks(self.n) {
                        worst = worst.max((row.iter().sum::<f64>() - 1.0).abs());
                    }
                }
                HeadAttention::Sparse(s) => {
                    let mut total = vec![0.0; self.n];
                    let mut has = vec![false; self.n];
                    for (&t, w) in self.targets.iter().zip(s) {
                        total[t] += w;
                        has[t] = true;
                    }
                    for (t, h) in total.iter().zip(&has) {
                        if *h {
                            worst = worst.max((t - 1.0).abs());
                        }
                    }
                }
            }
        }
        worst
    }
}
