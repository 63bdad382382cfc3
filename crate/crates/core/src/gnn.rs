//! Candidate message-passing operators and the softmax-weighted mixture used
//! during architecture search.
//!
//! All operators aggregate from source to target over incoming edges and map
//! `n×d` node states to `n×d`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

pub const GATV2_NEGATIVE_SLOPE: f64 = 0.2;
pub const GATED_GCN_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    #[serde(rename = "GINE")]
    Gine,
    #[serde(rename = "GATV2")]
    Gatv2,
    #[serde(rename = "GATEDGCN")]
    GatedGcn,
}

impl OpKind {
    /// Candidate order; architecture weight column `k` belongs to `ALL[k]`.
    pub const ALL: [OpKind; 3] = [OpKind::Gine, OpKind::Gatv2, OpKind::GatedGcn];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Gine => "GINE",
            OpKind::Gatv2 => "GATV2",
            OpKind::GatedGcn => "GATEDGCN",
        }
    }

    pub fn index(self) -> usize {
        OpKind::ALL.iter().position(|&k| k == self).expect("listed")
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "GINE" => Ok(OpKind::Gine),
            "GATV2" => Ok(OpKind::Gatv2),
            "GATEDGCN" => Ok(OpKind::GatedGcn),
            _ => Err(Error::Config(format!(
                "unknown operator '{s}' (expected GINE, GATV2 or GATEDGCN)"
            ))),
        }
    }
}

/// Node count and edge endpoint lists for one graph.
#[derive(Clone, Copy, Debug)]
pub struct Topology<'a> {
    pub n: usize,
    pub sources: &'a Arc<[usize]>,
    pub targets: &'a Arc<[usize]>,
}

impl Topology<'_> {
    pub fn num_edges(&self) -> usize {
        self.sources.len()
    }
}

/// Learnable tensors of one operator at one layer.
#[derive(Clone, Debug)]
pub enum GnnParams {
    Gine {
        eps: Tensor,
        w1: Tensor,
        b1: Tensor,
        w2: Tensor,
        b2: Tensor,
    },
    Gatv2 {
        w_src: Tensor,
        w_dst: Tensor,
        w_edge: Tensor,
        att: Tensor,
    },
    GatedGcn {
        a: Tensor,
        b: Tensor,
        c: Tensor,
        u: Tensor,
        v: Tensor,
    },
}

impl GnnParams {
    pub fn init<R: Rng + ?Sized>(kind: OpKind, d: usize, rng: &mut R) -> Self {
        let mut sq = || Tensor::uniform_init(vec![d, d], d, rng);
        match kind {
            OpKind::Gine => GnnParams::Gine {
                eps: Tensor::scalar(0.0).into_param(),
                w1: sq(),
                b1: Tensor::zeros(vec![d]).into_param(),
                w2: sq(),
                b2: Tensor::zeros(vec![d]).into_param(),
            },
            OpKind::Gatv2 => GnnParams::Gatv2 {
                w_src: sq(),
                w_dst: sq(),
                w_edge: sq(),
                att: Tensor::uniform_init(vec![d, 1], d, rng),
            },
            OpKind::GatedGcn => GnnParams::GatedGcn {
                a: sq(),
                b: sq(),
                c: sq(),
                u: sq(),
                v: sq(),
            },
        }
    }

    pub fn kind(&self) -> OpKind {
        match self {
            GnnParams::Gine { .. } => OpKind::Gine,
            GnnParams::Gatv2 { .. } => OpKind::Gatv2,
            GnnParams::GatedGcn { .. } => OpKind::GatedGcn,
        }
    }

    pub fn width(&self) -> usize {
        match self {
            GnnParams::Gine { w1, .. } => w1.rows(),
            GnnParams::Gatv2 { w_src, .. } => w_src.rows(),
            GnnParams::GatedGcn { a, .. } => a.rows(),
        }
    }

    pub fn named(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            GnnParams::Gine { eps, w1, b1, w2, b2 } => {
                vec![("eps", eps), ("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)]
            }
            GnnParams::Gatv2 {
                w_src,
                w_dst,
                w_edge,
                att,
            } => vec![("w_src", w_src), ("w_dst", w_dst), ("w_edge", w_edge), ("att", att)],
            GnnParams::GatedGcn { a, b, c, u, v } => {
                vec![("a", a), ("b", b), ("c", c), ("u", u), ("v", v)]
            }
        }
    }

    pub fn named_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            GnnParams::Gine { eps, w1, b1, w2, b2 } => {
                vec![("eps", eps), ("w1", w1), ("b1", b1), ("w2", w2), ("b2", b2)]
            }
            GnnParams::Gatv2 {
                w_src,
                w_dst,
                w_edge,
                att,
            } => vec![("w_src", w_src), ("w_dst", w_dst), ("w_edge", w_edge), ("att", att)],
            GnnParams::GatedGcn { a, b, c, u, v } => {
                vec![("a", a), ("b", b), ("c", c), ("u", u), ("v", v)]
            }
        }
    }

    /// `z` is `n×d` node state, `edge` is `|E|×d` projected edge features.
    pub fn forward(
        &self,
        tape: &mut Tape,
        z: Var,
        topo: Topology<'_>,
        edge: Var,
        bind: &dyn Fn(&mut Tape, &Tensor) -> Result<Var>,
    ) -> Result<Var> {
        let d = self.width();
        let (n, dz) = tape.dims(z);
        let (e, de) = tape.dims(edge);
        if dz != d || n != topo.n {
            return Err(Error::shape(self.kind().name(), &[topo.n, d], &[n, dz]));
        }
        if de != d || e != topo.num_edges() {
            return Err(Error::shape(self.kind().name(), &[topo.num_edges(), d], &[e, de]));
        }
        match self {
            GnnParams::Gine { eps, w1, b1, w2, b2 } => {
                let (eps, w1, b1) = (bind(tape, eps)?, bind(tape, w1)?, bind(tape, b1)?);
                let (w2, b2) = (bind(tape, w2)?, bind(tape, b2)?);
                let src = tape.gather_rows(z, topo.sources)?;
                let msg = tape.add(src, edge)?;
                let msg = tape.relu(msg);
                let agg = tape.scatter_add_rows(msg, topo.targets, topo.n)?;
                let scaled = tape.scale_by(z, eps)?;
                let own = tape.add(z, scaled)?;
                let pre = tape.add(own, agg)?;
                let h = linear(tape, pre, w1, Some(b1))?;
                let h = tape.relu(h);
                linear(tape, h, w2, Some(b2))
            }
            GnnParams::Gatv2 {
                w_src,
                w_dst,
                w_edge,
                att,
            } => {
                let (w_src, w_dst) = (bind(tape, w_src)?, bind(tape, w_dst)?);
                let (w_edge, att) = (bind(tape, w_edge)?, bind(tape, att)?);
                let hs = tape.matmul(z, w_src)?;
                let ht = tape.matmul(z, w_dst)?;
                let he = tape.matmul(edge, w_edge)?;
                let hs_e = tape.gather_rows(hs, topo.sources)?;
                let ht_e = tape.gather_rows(ht, topo.targets)?;
                let pre = tape.add(hs_e, ht_e)?;
                let pre = tape.add(pre, he)?;
                let act = tape.leaky_relu(pre, GATV2_NEGATIVE_SLOPE);
                let score = tape.matmul(act, att)?;
                let weight = tape.segment_softmax(score, topo.targets, topo.n)?;
                let msg = tape.mul_col(hs_e, weight)?;
                tape.scatter_add_rows(msg, topo.targets, topo.n)
            }
            GnnParams::GatedGcn { a, b, c, u, v } => {
                let (a, b, c) = (bind(tape, a)?, bind(tape, b)?, bind(tape, c)?);
                let (u, v) = (bind(tape, u)?, bind(tape, v)?);
                let ah = tape.matmul(z, a)?;
                let bh = tape.matmul(z, b)?;
                let ce = tape.matmul(edge, c)?;
                let vh = tape.matmul(z, v)?;
                let uh = tape.matmul(z, u)?;
                let ah_e = tape.gather_rows(ah, topo.sources)?;
                let bh_e = tape.gather_rows(bh, topo.targets)?;
                let gate = tape.add(ah_e, bh_e)?;
                let gate = tape.add(gate, ce)?;
                let gate = tape.sigmoid(gate);
                let vh_e = tape.gather_rows(vh, topo.sources)?;
                let msg = tape.hadamard(gate, vh_e)?;
                let num = tape.scatter_add_rows(msg, topo.targets, topo.n)?;
                let den = tape.scatter_add_rows(gate, topo.targets, topo.n)?;
                let den = tape.add_scalar(den, GATED_GCN_EPS);
                let agg = tape.div(num, den)?;
                tape.add(uh, agg)
            }
        }
    }
}

/// `x·w (+ b)` with `b` broadcast over rows.
pub(crate) fn linear(tape: &mut Tape, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match b {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

/// Softmax-weighted sum of every candidate operator.
///
/// `alpha_row` is the `1×|O|` architecture weight row for this layer and
/// `bundles[k]` must be the operator `OpKind::ALL[k]`.
pub fn mixed_operator(
    tape: &mut Tape,
    z: Var,
    topo: Topology<'_>,
    edge: Var,
    alpha_row: Var,
    bundles: &[GnnParams],
    bind: &dyn Fn(&mut Tape, &Tensor) -> Result<Var>,
) -> Result<Var> {
    if bundles.len() != OpKind::ALL.len()
        || bundles.iter().zip(OpKind::ALL).any(|(b, k)| b.kind() != k)
    {
        return Err(Error::Contract(
            "mixed operator needs one bundle per candidate, in candidate order".into(),
        ));
    }
    if tape.dims(alpha_row) != (1, bundles.len()) {
        let (r, c) = tape.dims(alpha_row);
        return Err(Error::shape("mixed_operator", &[1, bundles.len()], &[r, c]));
    }
    let weights = tape.row_softmax(alpha_row)?;
    let mut total: Option<Var> = None;
    for (k, bundle) in bundles.iter().enumerate() {
        let out = bundle.forward(tape, z, topo, edge, bind)?;
        let w = tape.element(weights, k)?;
        let term = tape.scale_by(out, w)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, term)?,
            None => term,
        });
    }
    Ok(total.expect("three candidates"))
}

/// Binds parameters as trainable leaves.
pub fn bind_trainable(tape: &mut Tape, t: &Tensor) -> Result<Var> {
    tape.param(t)
}

/// Binds parameters as constants (no gradient).
pub fn bind_frozen(tape: &mut Tape, t: &Tensor) -> Result<Var> {
    tape.param_frozen(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn topo_parts(n: usize, edges: &[(usize, usize)]) -> (usize, Arc<[usize]>, Arc<[usize]>) {
        (
            n,
            edges.iter().map(|e| e.0).collect(),
            edges.iter().map(|e| e.1).collect(),
        )
    }

    fn random_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Vec<f64> {
        (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()
    }

    fn run(
        p: &GnnParams,
        n: usize,
        edges: &[(usize, usize)],
        z: &[f64],
        e: &[f64],
    ) -> Vec<f64> {
        let d = p.width();
        let (n, s, t) = topo_parts(n, edges);
        let topo = Topology {
            n,
            sources: &s,
            targets: &t,
        };
        let mut tape = Tape::new();
        let zv = tape.constant(n, d, z.to_vec()).unwrap();
        let ev = tape.constant(edges.len(), d, e.to_vec()).unwrap();
        let out = p.forward(&mut tape, zv, topo, ev, &bind_trainable).unwrap();
        tape.value(out).to_vec()
    }

    fn set(t: &mut Tensor, values: Vec<f64>) {
        t.values_mut().copy_from_slice(&values);
    }

    #[test]
    fn gine_without_edges_is_mlp_of_self() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let d = 3;
        let p = GnnParams::init(OpKind::Gine, d, &mut rng);
        let z = random_matrix(&mut rng, 2, d);
        let out = run(&p, 2, &[], &z, &[]);
        let GnnParams::Gine { w1, b1, w2, b2, .. } = &p else { unreachable!() };
        for r in 0..2 {
            let x = &z[r * d..(r + 1) * d];
            let h: Vec<f64> = (0..d)
                .map(|j| ((0..d).map(|i| x[i] * w1.at(i, j)).sum::<f64>() + b1.values()[j]).max(0.0))
                .collect();
            for j in 0..d {
                let y = (0..d).map(|i| h[i] * w2.at(i, j)).sum::<f64>() + b2.values()[j];
                assert!((out[r * d + j] - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gine_two_node_hand_case() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut p = GnnParams::init(OpKind::Gine, 2, &mut rng);
        if let GnnParams::Gine { w1, w2, .. } = &mut p {
            set(w1, vec![1.0, 0.0, 0.0, 1.0]);
            set(w2, vec![1.0, 0.0, 0.0, 1.0]);
        }
        // edge 0 -> 1; h0 = (1, -2), h1 = (0.5, 0.5), e01 = (0.25, 1)
        let out = run(&p, 2, &[(0, 1)], &[1.0, -2.0, 0.5, 0.5], &[0.25, 1.0]);
        // node 0: relu(h0) = (1, 0); node 1: h1 + relu(h0 + e) = (0.5+1.25, 0.5+0) = (1.75, 0.5)
        assert_eq!(out, vec![1.0, 0.0, 1.75, 0.5]);
    }

    #[test]
    fn gatv2_single_source_and_isolated_node() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = 4;
        let p = GnnParams::init(OpKind::Gatv2, d, &mut rng);
        let z = random_matrix(&mut rng, 3, d);
        let e = random_matrix(&mut rng, 1, d);
        let out = run(&p, 3, &[(0, 1)], &z, &e);
        let GnnParams::Gatv2 { w_src, .. } = &p else { unreachable!() };
        for j in 0..d {
            let ws_h0: f64 = (0..d).map(|i| z[i] * w_src.at(i, j)).sum();
            assert!((out[d + j] - ws_h0).abs() < 1e-12);
        }
        assert!(out[..d].iter().chain(&out[2 * d..]).all(|&v| v == 0.0));
    }

    #[test]
    fn gatv2_identical_sources_split_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let d = 3;
        let p = GnnParams::init(OpKind::Gatv2, d, &mut rng);
        let row = random_matrix(&mut rng, 1, d);
        let mut z = row.clone();
        z.extend(&row);
        z.extend(random_matrix(&mut rng, 1, d));
        let e: Vec<f64> = row.iter().chain(&row).copied().collect();
        let out = run(&p, 3, &[(0, 2), (1, 2)], &z, &e);
        let single = run(&p, 3, &[(0, 2)], &z, &row);
        for j in 0..d {
            assert!((out[2 * d + j] - single[2 * d + j]).abs() < 1e-12);
        }
    }

    #[test]
    fn gated_gcn_empty_neighbourhood_is_self_term() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d = 3;
        let p = GnnParams::init(OpKind::GatedGcn, d, &mut rng);
        let z = random_matrix(&mut rng, 2, d);
        let out = run(&p, 2, &[], &z, &[]);
        let GnnParams::GatedGcn { u, .. } = &p else { unreachable!() };
        for r in 0..2 {
            for j in 0..d {
                let uh: f64 = (0..d).map(|i| z[r * d + i] * u.at(i, j)).sum();
                assert!((out[r * d + j] - uh).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gated_gcn_equal_gates_give_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let d = 3;
        let mut p = GnnParams::init(OpKind::GatedGcn, d, &mut rng);
        if let GnnParams::GatedGcn { a, b, c, .. } = &mut p {
            for t in [a, b, c] {
                t.values_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let z = random_matrix(&mut rng, 4, d);
        let edges = [(0, 3), (1, 3), (2, 3)];
        let e = random_matrix(&mut rng, 3, d);
        let out = run(&p, 4, &edges, &z, &e);
        let GnnParams::GatedGcn { u, v, .. } = &p else { unreachable!() };
        for j in 0..d {
            let uh: f64 = (0..d).map(|i| z[3 * d + i] * u.at(i, j)).sum();
            let mean_vh: f64 = (0..3)
                .map(|r| (0..d).map(|i| z[r * d + i] * v.at(i, j)).sum::<f64>())
                .sum::<f64>()
                / 3.0;
            assert!((out[3 * d + j] - (uh + mean_vh)).abs() < 1e-5);
        }
    }

    #[test]
    fn gated_gcn_gates_strictly_inside_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let d = 4;
        let p = GnnParams::init(OpKind::GatedGcn, d, &mut rng);
        let GnnParams::GatedGcn { a, b, c, .. } = &p else { unreachable!() };
        let z = random_matrix(&mut rng, 5, d);
        let e = random_matrix(&mut rng, 6, d);
        let edges = [(0, 1), (1, 2), (2, 3), (3, 4), (4, 0), (2, 0)];
        for (k, &(i, j)) in edges.iter().enumerate() {
            for col in 0..d {
                let pre: f64 = (0..d)
                    .map(|r| z[i * d + r] * a.at(r, col) + z[j * d + r] * b.at(r, col) + e[k * d + r] * c.at(r, col))
                    .sum();
                let gate = crate::autodiff::kernels::sigmoid(pre);
                assert!(gate > 0.0 && gate < 1.0);
            }
        }
    }

    #[test]
    fn operators_are_permutation_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let d = 4;
        let n = 6;
        let edges = [(0, 1), (1, 0), (1, 2), (2, 3), (3, 1), (4, 5), (5, 0), (2, 4)];
        let perm = [3, 5, 0, 1, 4, 2];
        let z = random_matrix(&mut rng, n, d);
        let e = random_matrix(&mut rng, edges.len(), d);
        let mut pz = vec![0.0; n * d];
        for i in 0..n {
            pz[perm[i] * d..(perm[i] + 1) * d].copy_from_slice(&z[i * d..(i + 1) * d]);
        }
        let pedges: Vec<(usize, usize)> = edges.iter().map(|&(i, j)| (perm[i], perm[j])).collect();
        for kind in OpKind::ALL {
            let p = GnnParams::init(kind, d, &mut rng);
            let out = run(&p, n, &edges, &z, &e);
            let pout = run(&p, n, &pedges, &pz, &e);
            for i in 0..n {
                for j in 0..d {
                    assert!((pout[perm[i] * d + j] - out[i * d + j]).abs() < 1e-9, "{kind}");
                }
            }
        }
    }

    fn mixed_setup(alpha: [f64; 3]) -> (Vec<f64>, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let d = 4;
        let n = 5;
        let edges = [(0, 1), (1, 2), (2, 0), (3, 4), (4, 3), (0, 4)];
        let bundles: Vec<GnnParams> = OpKind::ALL.iter().map(|&k| GnnParams::init(k, d, &mut rng)).collect();
        let z = random_matrix(&mut rng, n, d);
        let e = random_matrix(&mut rng, edges.len(), d);
        let (n, s, t) = topo_parts(n, &edges);
        let topo = Topology {
            n,
            sources: &s,
            targets: &t,
        };
        let mut tape = Tape::new();
        let zv = tape.constant(n, d, z.clone()).unwrap();
        let ev = tape.constant(edges.len(), d, e.clone()).unwrap();
        let av = tape.constant(1, 3, alpha.to_vec()).unwrap();
        let mixed = mixed_operator(&mut tape, zv, topo, ev, av, &bundles, &bind_trainable).unwrap();
        let mixed = tape.value(mixed).to_vec();
        let separate = bundles.iter().map(|b| run(b, n, &edges, &z, &e)).collect();
        (mixed, separate)
    }

    #[test]
    fn mixture_with_zero_alpha_is_mean() {
        let (mixed, sep) = mixed_setup([0.0; 3]);
        for i in 0..mixed.len() {
            let mean = (sep[0][i] + sep[1][i] + sep[2][i]) / 3.0;
            assert!((mixed[i] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_saturates_to_gine() {
        let (mixed, sep) = mixed_setup([40.0, 0.0, 0.0]);
        for i in 0..mixed.len() {
            assert!((mixed[i] - sep[0][i]).abs() < 1e-12);
        }
    }

    #[test]
    fn mixture_is_linear_combination() {
        let alpha = [0.3, -1.2, 0.7];
        let (mixed, sep) = mixed_setup(alpha);
        let w = crate::autodiff::kernels::row_softmax(&alpha, 1, 3);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..mixed.len() {
            let lin = w[0] * sep[0][i] + w[1] * sep[1][i] + w[2] * sep[2][i];
            assert!((mixed[i] - lin).abs() < 1e-12);
        }
    }

    #[test]
    fn operator_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = 3;
        let n = 4;
        let edges = [(0, 1), (1, 2), (2, 3), (3, 0), (1, 3), (2, 1)];
        let (n, s, t) = topo_parts(n, &edges);
        for kind in OpKind::ALL {
            let p = GnnParams::init(kind, d, &mut rng);
            let mut inputs: Vec<Tensor> = vec![
                Tensor::new(vec![n, d], random_matrix(&mut rng, n, d)).unwrap(),
                Tensor::new(vec![edges.len(), d], random_matrix(&mut rng, edges.len(), d)).unwrap(),
                Tensor::new(vec![n, d], random_matrix(&mut rng, n, d)).unwrap(),
            ];
            let names: Vec<&str> = p.named().iter().map(|(k, _)| *k).collect();
            inputs.extend(p.named().into_iter().map(|(_, t)| t.clone()));
            let check = gradcheck::check(&inputs, gradcheck::DEFAULT_STEP, |tape, vars| {
                let mut q = p.clone();
                for ((_, slot), v) in q.named_mut().into_iter().zip(&vars[3..]) {
                    *slot = tape.to_tensor(*v);
                }
                // Rebind so the op reads the probed leaves instead of fresh copies.
                let lookup: Vec<(crate::autodiff::TensorId, Var)> = q
                    .named()
                    .iter()
                    .zip(&vars[3..])
                    .map(|((_, t), v)| (t.id(), *v))
                    .collect();
                let bind = move |_: &mut Tape, t: &Tensor| -> Result<Var> {
                    Ok(lookup.iter().find(|(id, _)| *id == t.id()).expect("bound").1)
                };
                let topo = Topology {
                    n,
                    sources: &s,
                    targets: &t,
                };
                let out = q.forward(tape, vars[0], topo, vars[1], &bind)?;
                let weighted = tape.hadamard(out, vars[2])?;
                Ok(tape.sum(weighted))
            })
            .unwrap();
            assert!(check.max_rel_error < 1e-4, "{kind} {names:?}: {check:?}");
        }
    }
}
