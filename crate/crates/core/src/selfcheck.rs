//! Invariant suite run by the `selfcheck` command, plus whole-model gradient checking.

use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::gradcheck::{self, GradCheck, DEFAULT_STEP, MAGNITUDE_FLOOR};
use crate::autodiff::{kernels, Tape, Tensor};
use crate::data::{complete_edge_set, Graph, Label, TaskKind};
use crate::error::{Error, Result};
use crate::gnn::{self, GnnParams, OpKind, Topology};
use crate::interpret::{focus_of_sets, specialization};
use crate::model::attention::{dense_attention, sparse_attention};
use crate::model::{ForwardOptions, HeadMask, Model, ModelConfig, Operators};
use crate::train::{instance_loss, task_loss};

pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Deliberate defects used to show that the suite can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Softmax without max subtraction.
    NaiveSoftmax,
}

#[derive(Clone, Debug)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// Analytic vs central-difference gradients of a model's loss on one graph,
/// over every parameter and (for search models) the architecture weights.
pub fn model_gradient_check(model: &Model, graph: &Graph, alpha: Option<&Tensor>, step: f64) -> Result<GradCheck> {
    let mut analytic = model.clone();
    analytic.zero_grads();
    let alpha_param = alpha.map(|a| a.clone().into_param());
    let mut tape = Tape::new();
    let pass = analytic.forward(
        &mut tape,
        graph,
        ForwardOptions {
            alpha: alpha_param.as_ref(),
            alpha_trainable: true,
            ..Default::default()
        },
    )?;
    let loss = task_loss(&mut tape, pass.prediction, graph, model.config())?;
    tape.backward(loss)?;
    analytic.accumulate_grads(&tape)?;
    let alpha_grad = alpha_param
        .as_ref()
        .and_then(|a| tape.param_var(a.id()))
        .and_then(|v| tape.grad(v))
        .map(<[f64]>::to_vec);

    let mut worst = GradCheck {
        max_rel_error: 0.0,
        worst_input: 0,
        worst_index: 0,
        checked: 0,
    };
    let mut record = |input: usize, index: usize, a: f64, n: f64| -> Result<()> {
        if !a.is_finite() || !n.is_finite() {
            return Err(Error::NonFinite("model gradient check".into()));
        }
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(MAGNITUDE_FLOOR);
        worst.checked += 1;
        if rel > worst.max_rel_error {
            worst = GradCheck {
                max_rel_error: rel,
                worst_input: input,
                worst_index: index,
                checked: worst.checked,
            };
        }
        Ok(())
    };

    let mut probe = model.clone();
    let names: Vec<String> = probe.named_params().into_iter().map(|(n, _)| n).collect();
    for (p, name) in names.iter().enumerate() {
        let grads = analytic
            .param(name)
            .and_then(Tensor::grad)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; model.param(name).map_or(0, Tensor::len)]);
        for (idx, &a) in grads.iter().enumerate() {
            let original = probe.param(name).expect("known parameter").values()[idx];
            let mut eval = |v: f64| -> Result<f64> {
                probe.param_mut(name).expect("known parameter").values_mut()[idx] = v;
                instance_loss(&probe, graph, alpha, None)
            };
            let plus = eval(original + step)?;
            let minus = eval(original - step)?;
            eval(original)?;
            record(p, idx, a, (plus - minus) / (2.0 * step))?;
        }
    }
    if let (Some(a), Some(g)) = (alpha, alpha_grad) {
        let mut a = a.clone();
        for (idx, &an) in g.iter().enumerate() {
            let original = a.values()[idx];
            a.values_mut()[idx] = original + step;
            let plus = instance_loss(model, graph, Some(&a), None)?;
            a.values_mut()[idx] = original - step;
            let minus = instance_loss(model, graph, Some(&a), None)?;
            a.values_mut()[idx] = original;
            record(names.len(), idx, an, (plus - minus) / (2.0 * step))?;
        }
    }
    Ok(worst)
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Vec<usize>) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("valid shape")
}

/// Small directed graph used by several checks.
pub fn sample_graph(n: usize, d_in: usize, d_e: usize, seed: u64) -> Graph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges: Vec<(usize, usize)> = (0..n).flat_map(|i| (0..n).map(move |j| (i, j))).filter(|(i, j)| i != j).collect();
    edges.retain(|_| rng.gen_bool(0.6));
    let x = (0..n * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let e = (0..edges.len() * d_e).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Graph::new(n, edges, x, d_in, e, d_e, Label::Scalar(0.3)).expect("valid sample graph")
}

fn tape_gradients() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let a = random_tensor(&mut rng, vec![3, 4]);
    let b = random_tensor(&mut rng, vec![4, 2]);
    let targets: Arc<[usize]> = vec![0, 2, 2, 1, 0].into();
    let mut worst: f64 = 0.0;
    let cases: Vec<(Vec<Tensor>, Box<dyn Fn(&mut Tape, &[crate::autodiff::Var]) -> Result<crate::autodiff::Var>>)> = vec![
        (vec![a.clone(), b.clone()], Box::new(|t, v| {
            let m = t.matmul(v[0], v[1])?;
            let s = t.sigmoid(m);
            Ok(t.sum(s))
        })),
        (vec![a.clone()], Box::new(|t, v| {
            let s = t.row_softmax(v[0])?;
            let w = t.constant(3, 4, (0..12).map(|i| i as f64 * 0.1).collect())?;
            let p = t.hadamard(s, w)?;
            Ok(t.sum(p))
        })),
        (vec![random_tensor(&mut rng, vec![5, 1])], Box::new(move |t, v| {
            let s = t.segment_softmax(v[0], &targets, 3)?;
            let w = t.constant(5, 1, vec![0.3, -1.0, 2.0, 0.5, 1.5])?;
            let p = t.hadamard(s, w)?;
            Ok(t.sum(p))
        })),
        (vec![a.clone(), random_tensor(&mut rng, vec![1, 4]), random_tensor(&mut rng, vec![1, 4])], Box::new(|t, v| {
            let y = t.layer_norm(v[0], v[1], v[2])?;
            let w = t.constant(3, 4, (0..12).map(|i| (i as f64 * 0.7).sin()).collect())?;
            let p = t.hadamard(y, w)?;
            Ok(t.sum(p))
        })),
    ];
    for (inputs, build) in &cases {
        let r = gradcheck::check(inputs, DEFAULT_STEP, build)?;
        worst = worst.max(r.max_rel_error);
    }
    if worst < GRAD_TOLERANCE {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(Error::NonFinite(format!("max relative error {worst:.2e}")))
    }
}

fn operator_gradients() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let g = sample_graph(4, 8, 8, 3);
    let mut worst: f64 = 0.0;
    for kind in OpKind::ALL {
        let params = GnnParams::init(kind, 8, &mut rng);
        let z = random_tensor(&mut rng, vec![4, 8]);
        let e = Tensor::new(vec![g.num_edges(), 8], g.edge_features().to_vec())?;
        let r = gradcheck::check(&[z, e], DEFAULT_STEP, |t, v| {
            let topo = Topology {
                n: 4,
                sources: g.sources(),
                targets: g.targets(),
            };
            let out = params.forward(t, v[0], topo, v[1], &gnn::bind_frozen)?;
            let s = t.sigmoid(out);
            Ok(t.sum(s))
        })?;
        worst = worst.max(r.max_rel_error);
    }
    if worst < GRAD_TOLERANCE {
        Ok(format!("max relative error {worst:.2e}"))
    } else {
        Err(Error::NonFinite(format!("max relative error {worst:.2e}")))
    }
}

fn block_gradients() -> Result<String> {
    let g = sample_graph(4, 3, 2, 5);
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        dim: 8,
        ..ModelConfig::new(TaskKind::Regression, None, 3, 2)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let model = Model::new(cfg, Operators::Search, &mut rng)?;
    let alpha = random_tensor(&mut rng, vec![2, 3]);
    let r = model_gradient_check(&model, &g, Some(&alpha), DEFAULT_STEP)?;
    if r.max_rel_error < GRAD_TOLERANCE {
        Ok(format!("{} entries, max relative error {:.2e}", r.checked, r.max_rel_error))
    } else {
        Err(Error::NonFinite(format!("max relative error {:.2e}", r.max_rel_error)))
    }
}

fn dense_sparse() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let mut worst: f64 = 0.0;
    for n in [1, 2, 5, 9] {
        let edges = complete_edge_set(n, true);
        let (src, dst): (Vec<usize>, Vec<usize>) = edges.iter().copied().unzip();
        let (src, dst): (Arc<[usize]>, Arc<[usize]>) = (src.into(), dst.into());
        let mut tape = Tape::new();
        let q = tape.input(&random_tensor(&mut rng, vec![n, 4]))?;
        let k = tape.input(&random_tensor(&mut rng, vec![n, 4]))?;
        let v = tape.input(&random_tensor(&mut rng, vec![n, 4]))?;
        let (yd, _) = dense_attention(&mut tape, q, k, v)?;
        let (ys, _) = sparse_attention(&mut tape, q, k, v, Topology { n, sources: &src, targets: &dst })?;
        for (a, b) in tape.value(yd).iter().zip(tape.value(ys)) {
            worst = worst.max((a - b).abs());
        }
    }
    if worst < 1e-9 {
        Ok(format!("max |dY| {worst:.2e}"))
    } else {
        Err(Error::NonFinite(format!("max |dY| {worst:.2e}")))
    }
}

fn mixture() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let g = sample_graph(6, 8, 8, 6);
    let bundles: Vec<GnnParams> = OpKind::ALL.iter().map(|&k| GnnParams::init(k, 8, &mut rng)).collect();
    let alpha = random_tensor(&mut rng, vec![1, 3]);
    let z = random_tensor(&mut rng, vec![6, 8]);
    let e = Tensor::new(vec![g.num_edges(), 8], g.edge_features().to_vec())?;
    let topo = Topology {
        n: 6,
        sources: g.sources(),
        targets: g.targets(),
    };
    let mut tape = Tape::new();
    let (zv, ev, av) = (tape.input(&z)?, tape.input(&e)?, tape.input(&alpha)?);
    let mixed = gnn::mixed_operator(&mut tape, zv, topo, ev, av, &bundles, &gnn::bind_frozen)?;
    let w = kernels::row_softmax(alpha.values(), 1, 3);
    let mut expected = vec![0.0; 6 * 8];
    for (k, b) in bundles.iter().enumerate() {
        let out = b.forward(&mut tape, zv, topo, ev, &gnn::bind_frozen)?;
        for (x, o) in expected.iter_mut().zip(tape.value(out)) {
            *x += w[k] * o;
        }
    }
    let err = tape
        .value(mixed)
        .iter()
        .zip(&expected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let uniform = kernels::row_softmax(&[0.0; 3], 1, 3);
    if err < 1e-12 && uniform.iter().all(|&u| u == 1.0 / 3.0) {
        Ok(format!("max deviation {err:.2e}"))
    } else {
        Err(Error::NonFinite(format!("max deviation {err:.2e}")))
    }
}

fn masking_locality() -> Result<String> {
    let g = sample_graph(6, 3, 2, 7);
    let cfg = ModelConfig {
        layers: 3,
        heads: 2,
        dim: 8,
        ..ModelConfig::new(TaskKind::Regression, None, 3, 2)
    };
    let model = Model::new(
        cfg,
        Operators::Fixed(vec![OpKind::Gine, OpKind::Gatv2, OpKind::GatedGcn]),
        &mut ChaCha8Rng::seed_from_u64(16),
    )?;
    let run = |mask| -> Result<crate::model::Activations> {
        let mut tape = Tape::new();
        let pass = model.forward(
            &mut tape,
            &g,
            ForwardOptions {
                mask,
                freeze_weights: true,
                capture_activations: true,
                ..Default::default()
            },
        )?;
        pass.activations.ok_or_else(|| Error::State("activations missing".into()))
    };
    let base = run(None)?;
    for layer in 0..3 {
        for head in 0..2 {
            let masked = run(Some(HeadMask { layer, head }))?;
            for l in 0..=layer {
                if masked.layer_inputs[l] != base.layer_inputs[l] {
                    return Err(Error::State(format!("layer {l} input changed by mask ({layer},{head})")));
                }
            }
            for m in 0..2 {
                if m != head && masked.heads[layer][m] != base.heads[layer][m] {
                    return Err(Error::State(format!("head {m} changed by mask ({layer},{head})")));
                }
            }
        }
    }
    Ok("6 masks checked".into())
}

fn metric_bounds() -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..200 {
        let k = rng.gen_range(2..6);
        let sets: Vec<Vec<usize>> = (0..k)
            .map(|_| {
                let mut s: Vec<usize> = (0..10).filter(|_| rng.gen_bool(0.3)).collect();
                if s.is_empty() {
                    s.push(rng.gen_range(0..10));
                }
                s
            })
            .collect();
        let f = focus_of_sets(&sets).expect("k >= 2");
        let deltas: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        if !(0.0..=1.0).contains(&f) || specialization(&deltas) < 0.0 {
            return Err(Error::State(format!("focus {f} out of bounds")));
        }
    }
    if specialization(&[0.0, 0.0, 2.0, 2.0]) != 1.0 || focus_of_sets(&[vec![1, 2], vec![2, 3]]) != Some(1.0 / 3.0) {
        return Err(Error::State("metric oracle mismatch".into()));
    }
    Ok("200 random cases within bounds".into())
}

fn naive_softmax(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows * cols);
    for row in x.chunks(cols) {
        let e: Vec<f64> = row.iter().map(|v| v.exp()).collect();
        let s: f64 = e.iter().sum();
        out.extend(e.iter().map(|v| v / s));
    }
    out
}

fn softmax_normalization(fault: Option<Fault>) -> Result<String> {
    let softmax: fn(&[f64], usize, usize) -> Vec<f64> = match fault {
        Some(Fault::NaiveSoftmax) => naive_softmax,
        None => kernels::row_softmax,
    };
    let logits = [800.0, 799.0, 1.0, -750.0, 0.0, 1000.0];
    let s = softmax(&logits, 2, 3);
    let worst = s
        .chunks(3)
        .map(|r| (r.iter().sum::<f64>() - 1.0).abs())
        .fold(0.0, |a: f64, b| if b.is_nan() { f64::INFINITY } else { a.max(b) });
    if worst < 1e-9 && s.iter().all(|v| v.is_finite()) {
        Ok(format!("max row error {worst:.2e}"))
    } else {
        Err(Error::Contract(format!("softmax rows do not sum to 1 (error {worst})")))
    }
}

/// Runs every check; failures are reported, not raised.
pub fn run_selfcheck(fault: Option<Fault>) -> Vec<CheckResult> {
    let checks: Vec<(&'static str, Box<dyn Fn() -> Result<String>>)> = vec![
        ("tape gradients", Box::new(tape_gradients)),
        ("operator gradients", Box::new(operator_gradients)),
        ("block gradients", Box::new(block_gradients)),
        ("dense/sparse equivalence", Box::new(dense_sparse)),
        ("mixture linearity", Box::new(mixture)),
        ("masking locality", Box::new(masking_locality)),
        ("metric bounds", Box::new(metric_bounds)),
        ("softmax normalization", Box::new(move || softmax_normalization(fault))),
    ];
    checks
        .into_iter()
        .map(|(name, f)| {
            let start = Instant::now();
            let (passed, detail) = match f() {
                Ok(d) => (true, d),
                Err(e) => (false, e.to_string()),
            };
            CheckResult {
                name,
                passed,
                detail: format!("{detail} ({:.2?})", start.elapsed()),
            }
        })
        .collect()
}
