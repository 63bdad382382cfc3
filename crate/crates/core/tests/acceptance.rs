//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits nonzero if any failed. Pass criterion numbers as arguments to run a
//! subset, e.g. `cargo test -p dartsgt --test acceptance -- 1 5`.

use std::collections::HashSet;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use dartsgt::autodiff::gradcheck::{self, DEFAULT_STEP};
use dartsgt::autodiff::{kernels, Tape, Tensor, Var};
use dartsgt::data::{complete_edge_set, generate_synthetic, Graph, Label, SyntheticTask, TaskKind};
use dartsgt::experiment::{compare, CompareConfig, CompareReport};
use dartsgt::gnn::{self, GnnParams, OpKind, Topology};
use dartsgt::interpret::{analyze_dataset, focus, focus_of_sets, head_deviation, specialization, InterpretConfig};
use dartsgt::model::attention::{dense_attention, sparse_attention};
use dartsgt::model::{AttentionKind, ForwardOptions, HeadAttention, HeadMask, Model, ModelConfig, Operators};
use dartsgt::model::AttentionTrace;
use dartsgt::search::{search, train_final, ArchParams, SearchConfig};
use dartsgt::selfcheck::{model_gradient_check, sample_graph};

type Outcome = Result<String, String>;

const GRAD_TOL: f64 = 1e-4;
const DENSE_SPARSE_TOL: f64 = 1e-9;
const MIXTURE_TOL: f64 = 1e-12;
const EDGE_GATE_TOL: f64 = 1e-9;
const EXPERIMENT_BUDGET: Duration = Duration::from_secs(15 * 60);
const GRAD_BUDGET: Duration = Duration::from_secs(60);

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    Tensor::new(vec![rows, cols], (0..rows * cols).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

/// Sum of `v ⊙ W` with a fixed non-uniform `W`, so every output entry gets its own weight.
fn weighted_sum(t: &mut Tape, v: Var) -> dartsgt::Result<Var> {
    let (r, c) = t.dims(v);
    let w = t.constant(r, c, (0..r * c).map(|i| (i as f64 * 0.37 + 0.2).sin()).collect())?;
    let p = t.hadamard(v, w)?;
    Ok(t.sum(p))
}

type Build = Box<dyn Fn(&mut Tape, &[Var]) -> dartsgt::Result<Var>>;

fn tape_op_cases(rng: &mut ChaCha8Rng) -> Vec<(&'static str, Vec<Tensor>, Build)> {
    let a = random_tensor(rng, 3, 4, -1.0, 1.0);
    let b = random_tensor(rng, 4, 2, -1.0, 1.0);
    let c = random_tensor(rng, 3, 4, -1.0, 1.0);
    let pos = random_tensor(rng, 3, 4, 0.5, 2.0);
    let row = random_tensor(rng, 1, 4, -1.0, 1.0);
    let col = random_tensor(rng, 3, 1, -1.0, 1.0);
    let s = random_tensor(rng, 1, 1, -1.0, 1.0);
    let e = random_tensor(rng, 5, 1, -2.0, 2.0);
    let seg: Arc<[usize]> = vec![0, 2, 2, 1, 0].into();
    let gather: Arc<[usize]> = vec![2, 0, 2, 1].into();
    let scatter: Arc<[usize]> = vec![1, 1, 0].into();
    let logits = random_tensor(rng, 3, 1, -2.0, 2.0);
    let cls = random_tensor(rng, 3, 4, -2.0, 2.0);
    vec![
        ("matmul", vec![a.clone(), b], Box::new(|t, v| {
            let m = t.matmul(v[0], v[1])?;
            weighted_sum(t, m)
        })),
        ("transpose", vec![a.clone()], Box::new(|t, v| {
            let m = t.transpose(v[0]);
            weighted_sum(t, m)
        })),
        ("add", vec![a.clone(), c.clone()], Box::new(|t, v| {
            let m = t.add(v[0], v[1])?;
            weighted_sum(t, m)
        })),
        ("sub", vec![a.clone(), c.clone()], Box::new(|t, v| {
            let m = t.sub(v[0], v[1])?;
            weighted_sum(t, m)
        })),
        ("hadamard", vec![a.clone(), c.clone()], Box::new(|t, v| {
            let m = t.hadamard(v[0], v[1])?;
            weighted_sum(t, m)
        })),
        ("div", vec![a.clone(), pos], Box::new(|t, v| {
            let m = t.div(v[0], v[1])?;
            weighted_sum(t, m)
        })),
        ("add_row", vec![a.clone(), row], Box::new(|t, v| {
            let m = t.add_row(v[0], v[1])?;
            weighted_sum(t, m)
        })),
        ("mul_col", vec![a.clone(), col], Box::new(|t, v| {
            let m = t.mul_col(v[0], v[1])?;
            weighted_sum(t, m)
        })),
        ("scalar_mul", vec![a.clone()], Box::new(|t, v| {
            let m = t.scalar_mul(v[0], -1.7);
            weighted_sum(t, m)
        })),
        ("scale_by", vec![a.clone(), s], Box::new(|t, v| {
            let m = t.scale_by(v[0], v[1])?;
            weighted_sum(t, m)
        })),
        ("add_scalar", vec![a.clone()], Box::new(|t, v| {
            let m = t.add_scalar(v[0], 0.3);
            let m = t.hadamard(m, m)?;
            weighted_sum(t, m)
        })),
        ("relu", vec![a.clone()], Box::new(|t, v| {
            let m = t.relu(v[0]);
            weighted_sum(t, m)
        })),
        ("leaky_relu", vec![a.clone()], Box::new(|t, v| {
            let m = t.leaky_relu(v[0], 0.2);
            weighted_sum(t, m)
        })),
        ("sigmoid", vec![a.clone()], Box::new(|t, v| {
            let m = t.sigmoid(v[0]);
            weighted_sum(t, m)
        })),
        ("abs", vec![a.clone()], Box::new(|t, v| {
            let m = t.abs(v[0]);
            weighted_sum(t, m)
        })),
        ("dropout (evaluation mode)", vec![a.clone()], Box::new(|t, v| {
            let m = t.dropout(v[0], 0.5);
            weighted_sum(t, m)
        })),
        ("row_softmax", vec![a.clone()], Box::new(|t, v| {
            let m = t.row_softmax(v[0])?;
            weighted_sum(t, m)
        })),
        ("segment_softmax", vec![e], Box::new(move |t, v| {
            let m = t.segment_softmax(v[0], &seg, 3)?;
            weighted_sum(t, m)
        })),
        ("layer_norm", vec![a.clone(), row_like(rng), row_like(rng)], Box::new(|t, v| {
            let m = t.layer_norm(v[0], v[1], v[2])?;
            weighted_sum(t, m)
        })),
        ("concat_columns", vec![a.clone(), c.clone()], Box::new(|t, v| {
            let m = t.concat_columns(&[v[0], v[1]])?;
            weighted_sum(t, m)
        })),
        ("slice_columns", vec![a.clone()], Box::new(|t, v| {
            let m = t.slice_columns(v[0], 1, 3)?;
            weighted_sum(t, m)
        })),
        ("gather_rows", vec![a.clone()], Box::new(move |t, v| {
            let m = t.gather_rows(v[0], &gather)?;
            weighted_sum(t, m)
        })),
        ("scatter_add_rows", vec![a.clone()], Box::new(move |t, v| {
            let m = t.scatter_add_rows(v[0], &scatter, 2)?;
            weighted_sum(t, m)
        })),
        ("sum", vec![a.clone()], Box::new(|t, v| {
            let m = t.hadamard(v[0], v[0])?;
            Ok(t.sum(m))
        })),
        ("mean", vec![a.clone()], Box::new(|t, v| {
            let m = t.hadamard(v[0], v[0])?;
            Ok(t.mean(m))
        })),
        ("mean_rows", vec![a.clone()], Box::new(|t, v| {
            let m = t.mean_rows(v[0]);
            weighted_sum(t, m)
        })),
        ("row_sum", vec![a.clone()], Box::new(|t, v| {
            let m = t.row_sum(v[0]);
            weighted_sum(t, m)
        })),
        ("element", vec![a], Box::new(|t, v| {
            let m = t.element(v[0], 5)?;
            let m2 = t.hadamard(m, m)?;
            Ok(t.sum(m2))
        })),
        ("bce_with_logits", vec![logits], Box::new(|t, v| t.bce_with_logits(v[0], &[1.0, 0.0, 1.0]))),
        ("cross_entropy", vec![cls], Box::new(|t, v| t.cross_entropy(v[0], &[3, 0, 1]))),
    ]
}

fn row_like(rng: &mut ChaCha8Rng) -> Tensor {
    random_tensor(rng, 1, 4, 0.5, 1.5)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: (f64, String) = (0.0, String::new());
    let mut note = |name: String, e: f64| {
        if e > worst.0 {
            worst = (e, name);
        }
    };
    let cases = tape_op_cases(&mut rng);
    let n_ops = cases.len();
    for (name, inputs, build) in &cases {
        let r = gradcheck::check(inputs, DEFAULT_STEP, build).map_err(|e| format!("{name}: {e}"))?;
        ensure(r.max_rel_error < GRAD_TOL, format!("{name}: relative error {:.3e}", r.max_rel_error))?;
        note(name.to_string(), r.max_rel_error);
    }

    let g = sample_graph(4, 3, 2, 7);
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        dim: 8,
        ..ModelConfig::new(TaskKind::Regression, None, 3, 2)
    };
    for op in OpKind::ALL {
        let model = Model::new(cfg.clone(), Operators::Fixed(vec![op; 2]), &mut rng).map_err(err)?;
        let r = model_gradient_check(&model, &g, None, DEFAULT_STEP).map_err(err)?;
        ensure(r.max_rel_error < GRAD_TOL, format!("{op} block: relative error {:.3e}", r.max_rel_error))?;
        note(format!("{op} block"), r.max_rel_error);
    }
    let model = Model::new(cfg, Operators::Search, &mut rng).map_err(err)?;
    let alpha = random_tensor(&mut rng, 2, 3, -1.0, 1.0);
    let r = model_gradient_check(&model, &g, Some(&alpha), DEFAULT_STEP).map_err(err)?;
    ensure(r.max_rel_error < GRAD_TOL, format!("mixed block: relative error {:.3e}", r.max_rel_error))?;
    note("mixed block".into(), r.max_rel_error);

    let elapsed = start.elapsed();
    ensure(elapsed < GRAD_BUDGET, format!("took {elapsed:.1?}"))?;
    Ok(format!(
        "{n_ops} tape ops + 4 blocks, worst {:.2e} ({}), {elapsed:.1?}",
        worst.0, worst.1
    ))
}

fn complete_graph(n: usize, d_in: usize, rng: &mut ChaCha8Rng) -> Graph {
    let edges = complete_edge_set(n, true);
    let e = (0..edges.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let x = (0..n * d_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Graph::new(n, edges, x, d_in, e, 1, Label::Scalar(0.0)).unwrap()
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(102);
    let mut worst: f64 = 0.0;
    for n in [1, 2, 5, 9] {
        // Kernel level.
        let edges = complete_edge_set(n, true);
        let (src, dst): (Vec<usize>, Vec<usize>) = edges.iter().copied().unzip();
        let (src, dst): (Arc<[usize]>, Arc<[usize]>) = (src.into(), dst.into());
        let mut tape = Tape::new();
        let q = tape.input(&random_tensor(&mut rng, n, 4, -2.0, 2.0)).map_err(err)?;
        let k = tape.input(&random_tensor(&mut rng, n, 4, -2.0, 2.0)).map_err(err)?;
        let v = tape.input(&random_tensor(&mut rng, n, 4, -2.0, 2.0)).map_err(err)?;
        let (yd, _) = dense_attention(&mut tape, q, k, v).map_err(err)?;
        let (ys, _) = sparse_attention(&mut tape, q, k, v, Topology { n, sources: &src, targets: &dst }).map_err(err)?;
        for (a, b) in tape.value(yd).iter().zip(tape.value(ys)) {
            worst = worst.max((a - b).abs());
        }

        // Model level: identical parameters, per-head pre-concatenation outputs.
        let g = complete_graph(n, 3, &mut rng);
        let base = ModelConfig {
            layers: 2,
            heads: 2,
            dim: 8,
            ..ModelConfig::new(TaskKind::Regression, None, 3, 1)
        };
        let ops = Operators::Fixed(vec![OpKind::Gatv2, OpKind::GatedGcn]);
        let heads_of = |attention: AttentionKind| -> Result<Vec<Vec<Tensor>>, String> {
            let cfg = ModelConfig {
                attention,
                ..base.clone()
            };
            let model = Model::new(cfg, ops.clone(), &mut ChaCha8Rng::seed_from_u64(n as u64)).map_err(err)?;
            let mut tape = Tape::new();
            let pass = model
                .forward(
                    &mut tape,
                    &g,
                    ForwardOptions {
                        capture_activations: true,
                        freeze_weights: true,
                        ..Default::default()
                    },
                )
                .map_err(err)?;
            Ok(pass.activations.unwrap().heads)
        };
        let (dense, sparse) = (heads_of(AttentionKind::Dense)?, heads_of(AttentionKind::Sparse)?);
        for (ld, ls) in dense.iter().zip(&sparse) {
            for (hd, hs) in ld.iter().zip(ls) {
                for (a, b) in hd.values().iter().zip(hs.values()) {
                    worst = worst.max((a - b).abs());
                }
            }
        }
    }
    ensure(worst < DENSE_SPARSE_TOL, format!("max |dense - sparse| = {worst:.3e}"))?;
    Ok(format!("n in {{1,2,5,9}}, kernel and model heads, max difference {worst:.2e}"))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(103);
    let g = sample_graph(7, 8, 8, 31);
    let bundles: Vec<GnnParams> = OpKind::ALL.iter().map(|&k| GnnParams::init(k, 8, &mut rng)).collect();
    let topo = Topology {
        n: 7,
        sources: g.sources(),
        targets: g.targets(),
    };
    let mut worst: f64 = 0.0;
    for trial in 0..5 {
        let alpha = if trial == 0 {
            Tensor::zeros(vec![1, 3])
        } else {
            random_tensor(&mut rng, 1, 3, -3.0, 3.0)
        };
        let z = random_tensor(&mut rng, 7, 8, -1.0, 1.0);
        let e = Tensor::new(vec![g.num_edges(), 8], g.edge_features().to_vec()).map_err(err)?;
        let mut tape = Tape::new();
        let (zv, ev, av) = (
            tape.input(&z).map_err(err)?,
            tape.input(&e).map_err(err)?,
            tape.input(&alpha).map_err(err)?,
        );
        let mixed = gnn::mixed_operator(&mut tape, zv, topo, ev, av, &bundles, &gnn::bind_frozen).map_err(err)?;
        // Independent softmax of the α row.
        let a = alpha.values();
        let mx = a.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let ex: Vec<f64> = a.iter().map(|x| (x - mx).exp()).collect();
        let total: f64 = ex.iter().sum();
        let mut expected = vec![0.0; 7 * 8];
        for (k, b) in bundles.iter().enumerate() {
            let out = b.forward(&mut tape, zv, topo, ev, &gnn::bind_frozen).map_err(err)?;
            for (x, o) in expected.iter_mut().zip(tape.value(out)) {
                *x += ex[k] / total * o;
            }
        }
        for (m, x) in tape.value(mixed).iter().zip(&expected) {
            worst = worst.max((m - x).abs());
        }
    }
    ensure(worst < MIXTURE_TOL, format!("mixture deviates by {worst:.3e}"))?;
    let uniform = ArchParams::zeros(4).weights();
    ensure(
        uniform.iter().flatten().all(|&w| w == 1.0 / 3.0),
        format!("alpha = 0 gives weights {uniform:?}"),
    )?;
    ensure(
        kernels::row_softmax(&[0.0; 3], 1, 3).iter().all(|&w| w == 1.0 / 3.0),
        "row softmax of zeros is not exactly uniform",
    )?;
    Ok(format!("max deviation {worst:.2e}; alpha = 0 gives exactly 1/3"))
}

fn criterion_4() -> Outcome {
    let ds = generate_synthetic(SyntheticTask::Motif, 40, 4).map_err(err)?;
    let model = ModelConfig {
        layers: 3,
        heads: 2,
        dim: 8,
        ..ModelConfig::for_dataset(&ds)
    };
    let cfg = SearchConfig {
        epochs_search: 3,
        epochs_final: 2,
        ..SearchConfig::new(model, 17)
    };
    let a = search(&ds, &cfg).map_err(err)?;
    let b = search(&ds, &cfg).map_err(err)?;
    ensure(a.history == b.history, "alpha history differs between identical runs")?;
    ensure(a.architecture == b.architecture, "architecture differs between identical runs")?;
    ensure(a.history.len() == cfg.epochs_search + 1, "history length")?;
    ensure(a.history.last() == Some(&a.arch.rows()), "final alpha not recorded")?;

    for (l, row) in a.arch.rows().iter().enumerate() {
        let mut best = 0;
        for (i, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = i;
            }
        }
        ensure(
            a.architecture.ops[l] == OpKind::ALL[best],
            format!("layer {l}: discretized {} but argmax is {}", a.architecture.ops[l], OpKind::ALL[best]),
        )?;
    }

    let (final_model, _) = train_final(&a.architecture, &ds, None, &cfg).map_err(err)?;
    ensure(
        final_model.gnn_bundle_count() == cfg.model.layers,
        format!("{} operator bundles for {} layers", final_model.gnn_bundle_count(), cfg.model.layers),
    )?;
    for (l, op) in a.architecture.ops.iter().enumerate() {
        let kinds: HashSet<String> = final_model
            .named_params()
            .iter()
            .filter_map(|(n, _)| n.strip_prefix(&format!("layers.{l}.op.")))
            .map(|rest| rest.split('.').next().unwrap_or_default().to_string())
            .collect();
        ensure(
            kinds.len() == 1 && kinds.contains(op.name()),
            format!("layer {l} holds operators {kinds:?}"),
        )?;
    }
    let supernet_ids: HashSet<u64> = a.supernet.named_params().iter().map(|(_, t)| t.id().raw()).collect();
    let shared = final_model
        .named_params()
        .iter()
        .filter(|(_, t)| supernet_ids.contains(&t.id().raw()))
        .count();
    ensure(shared == 0, format!("{shared} tensors shared with the supernet"))?;
    let super_ptrs: HashSet<usize> = a
        .supernet
        .named_params()
        .iter()
        .map(|(_, t)| t.values().as_ptr() as usize)
        .collect();
    ensure(
        final_model
            .named_params()
            .iter()
            .all(|(_, t)| !super_ptrs.contains(&(t.values().as_ptr() as usize))),
        "a parameter buffer is aliased with the supernet",
    )?;
    Ok(format!("reproducible, argmax agrees, architecture {}", a.architecture))
}

fn criterion_5() -> Outcome {
    let g = sample_graph(7, 3, 2, 55);
    let cfg = ModelConfig {
        layers: 3,
        heads: 3,
        dim: 12,
        ..ModelConfig::new(TaskKind::Regression, None, 3, 2)
    };
    let mut model = Model::new(
        cfg.clone(),
        Operators::Fixed(vec![OpKind::GatedGcn, OpKind::Gine, OpKind::Gatv2]),
        &mut ChaCha8Rng::seed_from_u64(5),
    )
    .map_err(err)?;
    let run = |model: &Model, mask| {
        let mut tape = Tape::new();
        model
            .forward(
                &mut tape,
                &g,
                ForwardOptions {
                    mask,
                    freeze_weights: true,
                    capture_activations: true,
                    ..Default::default()
                },
            )
            .map(|p| p.activations.unwrap())
            .map_err(err)
    };
    let base = run(&model, None)?;
    let bits = |t: &Tensor| t.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    let mut nonzero = 0;
    for layer in 0..cfg.layers {
        for head in 0..cfg.heads {
            let masked = run(&model, Some(HeadMask { layer, head }))?;
            for m in (0..cfg.heads).filter(|&m| m != head) {
                ensure(
                    bits(&masked.heads[layer][m]) == bits(&base.heads[layer][m]),
                    format!("mask ({layer},{head}) changed head {m}"),
                )?;
            }
            ensure(
                masked.heads[layer][head].values().iter().all(|&v| v == 0.0),
                format!("masked head ({layer},{head}) is not zero"),
            )?;
            for l in 0..=layer {
                ensure(
                    bits(&masked.layer_inputs[l]) == bits(&base.layer_inputs[l]),
                    format!("mask ({layer},{head}) changed the input of layer {l}"),
                )?;
                let same = match (&masked.structural[l], &base.structural[l]) {
                    (Some(a), Some(b)) => bits(a) == bits(b),
                    (a, b) => a.is_none() && b.is_none(),
                };
                ensure(same, format!("mask ({layer},{head}) changed the structural output of layer {l}"))?;
                for m in 0..cfg.heads {
                    if l < layer {
                        ensure(
                            bits(&masked.heads[l][m]) == bits(&base.heads[l][m]),
                            format!("mask ({layer},{head}) changed layer {l} head {m}"),
                        )?;
                    }
                }
            }
            if head_deviation(&model, &g, layer, head).map_err(err)? != 0.0 {
                nonzero += 1;
            }
        }
    }
    ensure(nonzero > 0, "every deviation is already zero; the zero-slice check would be vacuous")?;

    let dh = cfg.dim / cfg.heads;
    for (layer, head) in [(0, 1), (1, 0), (2, 2)] {
        let w = model.param_mut(&format!("layers.{layer}.w_out")).ok_or("no w_out")?;
        let cols = w.cols();
        for r in head * dh..(head + 1) * dh {
            w.values_mut()[r * cols..(r + 1) * cols].fill(0.0);
        }
        let delta = head_deviation(&model, &g, layer, head).map_err(err)?;
        ensure(delta == 0.0, format!("zero output slice at ({layer},{head}) gives delta {delta:e}"))?;
    }
    Ok(format!("{} masks bitwise-local; zero slices give delta = 0", cfg.layers * cfg.heads))
}

fn random_trace(rng: &mut ChaCha8Rng) -> AttentionTrace {
    let n = rng.gen_range(1..14);
    let (layers, heads) = (rng.gen_range(1..4), rng.gen_range(1..5));
    let dense = rng.gen_bool(0.5);
    let edges: Vec<(usize, usize)> = (0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|_| rng.gen_bool(0.4))
        .collect();
    let (src, dst): (Vec<usize>, Vec<usize>) = edges.iter().copied().unzip();
    let mut trace = AttentionTrace::new(n, layers, heads, src.into(), dst.clone().into());
    for l in 0..layers {
        for m in 0..heads {
            let weights = if dense {
                let mut s = Vec::with_capacity(n * n);
                for _ in 0..n {
                    let raw: Vec<f64> = (0..n).map(|_| rng.gen_range(-3.0..3.0)).collect();
                    s.extend(kernels::row_softmax(&raw, 1, n));
                }
                HeadAttention::Dense(s)
            } else {
                let raw: Vec<f64> = dst.iter().map(|_| rng.gen_range(-3.0..3.0)).collect();
                HeadAttention::Sparse(kernels::segment_softmax(&raw, &dst, n).unwrap())
            };
            trace.set(l, m, weights);
        }
    }
    trace
}

fn median_oracle(values: &[f64]) -> Option<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    match v.len() {
        0 => None,
        n if n % 2 == 1 => Some(v[n / 2]),
        n => Some((v[n / 2 - 1] + v[n / 2]) / 2.0),
    }
}

fn criterion_6() -> Outcome {
    ensure(specialization(&[0.7; 6]) == 0.0, "specialization of a constant is not 0")?;
    let s = specialization(&[0.0, 0.0, 2.0, 2.0]);
    ensure(s == 1.0, format!("specialization {{0,0,2,2}} = {s}"))?;
    ensure(
        focus_of_sets(&[vec![1, 4, 6], vec![1, 4, 6], vec![6, 4, 1]]) == Some(1.0),
        "identical sets do not give focus 1",
    )?;
    ensure(
        focus_of_sets(&[vec![0, 1], vec![2, 3], vec![4]]) == Some(0.0),
        "disjoint sets do not give focus 0",
    )?;
    ensure(
        focus_of_sets(&[vec![1, 2], vec![2, 3]]) == Some(1.0 / 3.0),
        "{1,2} vs {2,3} does not give 1/3",
    )?;

    // The same 1/3 case reached through attention traces: column mass on {1,2} and on {2,3}.
    let (src, dst): (Vec<usize>, Vec<usize>) = complete_edge_set(4, true).into_iter().unzip();
    let mut trace = AttentionTrace::new(4, 1, 2, src.into(), dst.into());
    trace.set(0, 0, HeadAttention::Dense([0.05, 0.45, 0.45, 0.05].repeat(4)));
    trace.set(0, 1, HeadAttention::Dense([0.05, 0.05, 0.45, 0.45].repeat(4)));
    let f = focus(&trace, &[(0, 0), (0, 1)], 2, 50.0).map_err(err)?;
    ensure(f.value == Some(1.0 / 3.0), format!("trace-based focus {:?}", f.value))?;

    let mut rng = ChaCha8Rng::seed_from_u64(106);
    let mut defined = 0;
    for _ in 0..1000 {
        let trace = random_trace(&mut rng);
        let mut ranked: Vec<(usize, usize)> = (0..trace.layers)
            .flat_map(|l| (0..trace.heads).map(move |m| (l, m)))
            .collect();
        ranked.shuffle(&mut rng);
        let k = rng.gen_range(1..=ranked.len() + 1);
        let fraction = rng.gen_range(0.5..100.0);
        let f = focus(&trace, &ranked, k, fraction).map_err(err)?;
        if let Some(v) = f.value {
            ensure((0.0..=1.0).contains(&v), format!("focus {v} outside [0,1]"))?;
            defined += 1;
        }
    }

    let dir = tempfile::tempdir().map_err(err)?;
    for (count, seed) in [(7usize, 1u64), (8, 2)] {
        let ds = generate_synthetic(SyntheticTask::Motif, count, seed).map_err(err)?;
        let cfg = ModelConfig {
            layers: 2,
            heads: 3,
            dim: 12,
            ..ModelConfig::for_dataset(&ds)
        };
        let model = Model::new(
            cfg,
            Operators::Fixed(vec![OpKind::Gine, OpKind::Gatv2]),
            &mut ChaCha8Rng::seed_from_u64(seed),
        )
        .map_err(err)?;
        let icfg = InterpretConfig {
            k: 3,
            ..InterpretConfig::default()
        };
        let report = analyze_dataset(&model, &ds, &icfg).map_err(err)?;
        let out = dir.path().join(format!("r{count}"));
        report.write(&out).map_err(err)?;
        let text = std::fs::read_to_string(out.join("instances.jsonl")).map_err(err)?;
        let (mut specs, mut focuses) = (Vec::new(), Vec::new());
        for line in text.lines() {
            let v: serde_json::Value = serde_json::from_str(line).map_err(err)?;
            specs.push(v["specialization"].as_f64().ok_or("specialization missing")?);
            if let Some(f) = v["focus"].as_f64() {
                focuses.push(f);
            }
        }
        let summary: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(out.join("dataset.json")).map_err(err)?).map_err(err)?;
        ensure(
            summary["median_specialization"].as_f64() == median_oracle(&specs),
            format!("median specialization mismatch for {count} instances"),
        )?;
        ensure(
            summary["median_focus"].as_f64() == median_oracle(&focuses),
            format!("median focus mismatch for {count} instances"),
        )?;
    }
    Ok(format!("oracles exact; {defined} of 1000 random traces had defined focus, all in [0,1]; medians match"))
}

fn experiment_config() -> Result<(dartsgt::data::Dataset, CompareConfig), String> {
    let ds = generate_synthetic(SyntheticTask::Motif, 400, 2024).map_err(err)?;
    let model = ModelConfig {
        layers: 4,
        heads: 4,
        dim: 32,
        attention: AttentionKind::Sparse,
        ..ModelConfig::for_dataset(&ds)
    };
    let search = SearchConfig {
        epochs_search: 10,
        epochs_final: 15,
        ..SearchConfig::new(model, 0)
    };
    Ok((
        ds,
        CompareConfig {
            seeds: vec![0, 1, 2],
            random_architectures: 3,
            ..CompareConfig::new(search)
        },
    ))
}

fn describe(report: &CompareReport) -> String {
    report
        .seeds
        .iter()
        .map(|s| {
            format!(
                "seed {}: searched {:.3} [{}], random median {:.3}, vanilla {:.3}, symmetric {:.3}",
                s.seed,
                s.searched.test_metric,
                s.searched.architecture.as_ref().map(ToString::to_string).unwrap_or_default(),
                s.random_median(),
                s.vanilla.test_metric,
                s.symmetric.test_metric
            )
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn criterion_7(report: &CompareReport, elapsed: Duration) -> Outcome {
    let wins = report.seeds_where(|s| (s.searched.test_metric, s.random_median()));
    let (searched, random) = (report.median_searched(), report.median_random());
    let detail = format!(
        "median searched {searched:.3}, median random {random:.3}, searched >= random on {wins}/3 seeds, {elapsed:.0?}",
    );
    ensure(wins >= 2, format!("{detail}: comparison held on fewer than 2 seeds"))?;
    ensure(report.at_least(searched, random), format!("{detail}: median below random"))?;
    ensure(searched >= 0.90, format!("{detail}: below 0.90"))?;
    ensure(elapsed < EXPERIMENT_BUDGET, format!("{detail}: over the time budget"))?;
    Ok(detail)
}

fn criterion_8(report: &CompareReport) -> Outcome {
    let vs_vanilla = report.seeds_where(|s| (s.searched.test_metric, s.vanilla.test_metric));
    let vs_symmetric = report.seeds_where(|s| (s.searched.test_metric, s.symmetric.test_metric));
    let detail = format!(
        "medians: searched {:.3}, vanilla {:.3}, symmetric {:.3}; searched >= vanilla on {vs_vanilla}/3, asymmetric >= symmetric on {vs_symmetric}/3",
        report.median_searched(),
        report.median_vanilla(),
        report.median_symmetric()
    );
    ensure(vs_vanilla >= 2 && vs_symmetric >= 2, format!("{detail}: directionality failed"))?;
    ensure(
        report.at_least(report.median_searched(), report.median_vanilla())
            && report.at_least(report.median_searched(), report.median_symmetric()),
        format!("{detail}: median ordering failed"),
    )?;
    Ok(detail)
}

fn criterion_9() -> Outcome {
    let ds = generate_synthetic(SyntheticTask::Motif, 6, 9).map_err(err)?;
    let cfg = ModelConfig {
        layers: 2,
        heads: 3,
        dim: 12,
        ..ModelConfig::for_dataset(&ds)
    };
    let (l, m) = (cfg.layers, cfg.heads);
    let model = Model::new(
        cfg,
        Operators::Fixed(vec![OpKind::GatedGcn, OpKind::Gatv2]),
        &mut ChaCha8Rng::seed_from_u64(9),
    )
    .map_err(err)?;
    let run = |k: usize| {
        model.reset_counters();
        let r = analyze_dataset(
            &model,
            &ds,
            &InterpretConfig {
                k,
                ..InterpretConfig::default()
            },
        )
        .map_err(err)?;
        Ok::<_, String>((r, model.forward_calls()))
    };
    let (r3, calls3) = run(3)?;
    let (r4, calls4) = run(4)?;
    let expected = ds.len() * (l * m + 1);
    ensure(
        calls3 == expected && calls4 == expected && r3.forward_passes == expected,
        format!("forward calls {calls3}/{calls4}, reported {}, expected {expected}", r3.forward_passes),
    )?;

    let labels = [
        "most-interpretable",
        "complementary-strategies",
        "node-consensus",
        "least-interpretable",
        "insufficient-heads",
    ];
    let keys = [
        "instance",
        "baseline_loss",
        "deviations",
        "ranking",
        "specialization",
        "focus",
        "top_pairs",
        "class",
    ];
    for (i, inst) in r3.instances.iter().enumerate() {
        let text = inst.to_json();
        let v: serde_json::Value = serde_json::from_str(&text).map_err(err)?;
        let obj = v.as_object().ok_or("instance record is not an object")?;
        ensure(obj.len() == keys.len(), format!("instance {i}: {} fields", obj.len()))?;
        let positions: Vec<usize> = keys
            .iter()
            .map(|k| text.find(&format!("\"{k}\":")).ok_or(format!("instance {i}: missing {k}")))
            .collect::<Result<_, _>>()?;
        ensure(positions.windows(2).all(|w| w[0] < w[1]), format!("instance {i}: field order"))?;
        ensure(v["instance"].as_u64() == Some(i as u64), "instance index")?;
        ensure(v["baseline_loss"].as_f64().is_some_and(f64::is_finite), "baseline_loss")?;
        let devs = v["deviations"].as_array().ok_or("deviations")?;
        ensure(devs.len() == l * m, "deviation count")?;
        for (j, d) in devs.iter().enumerate() {
            ensure(
                d["layer"].as_u64() == Some((j / m) as u64)
                    && d["head"].as_u64() == Some((j % m) as u64)
                    && d["delta"].as_f64().is_some(),
                format!("instance {i}: deviation {j}"),
            )?;
        }
        let ranking = v["ranking"].as_array().ok_or("ranking")?;
        let pairs: HashSet<(u64, u64)> = ranking
            .iter()
            .filter_map(|p| Some((p[0].as_u64()?, p[1].as_u64()?)))
            .collect();
        ensure(ranking.len() == l * m && pairs.len() == l * m, "ranking is not a permutation")?;
        ensure(v["specialization"].as_f64().is_some_and(|s| s >= 0.0), "specialization")?;
        ensure(
            v["focus"].is_null() || v["focus"].as_f64().is_some_and(|f| (0.0..=1.0).contains(&f)),
            "focus",
        )?;
        let top = v["top_pairs"].as_array().ok_or("top_pairs")?;
        ensure(top.len() == 3, format!("instance {i}: {} top pairs for k = 3", top.len()))?;
        for p in top {
            let nodes = p["top_nodes"].as_array().ok_or("top_nodes")?;
            ensure(
                !nodes.is_empty()
                    && nodes.iter().all(|x| x.as_u64().is_some_and(|x| (x as usize) < ds.graphs[i].num_nodes()))
                    && p["attn_std"].as_f64().is_some_and(|s| s >= 0.0)
                    && p["layer"].as_u64().is_some()
                    && p["head"].as_u64().is_some(),
                format!("instance {i}: malformed top pair"),
            )?;
        }
        ensure(labels.contains(&v["class"].as_str().unwrap_or_default()), "class label")?;
    }

    for (a, b) in r3.instances.iter().zip(&r4.instances) {
        let bits = |t: &[f64]| t.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(bits(&a.table.deltas) == bits(&b.table.deltas), "k changed a deviation")?;
        ensure(a.table.baseline_loss.to_bits() == b.table.baseline_loss.to_bits(), "k changed a baseline")?;
        ensure(a.focus.pairs.len() == 3 && b.focus.pairs.len() == 4, "pair counts do not follow k")?;
    }
    Ok(format!("{expected} forward passes for {} instances, schema valid, k = 3/4 leaves deviations intact", ds.len()))
}

fn criterion_10() -> Outcome {
    let ds = generate_synthetic(SyntheticTask::DegreeReg, 6, 10).map_err(err)?;
    let on_cfg = ModelConfig {
        layers: 4,
        heads: 2,
        dim: 8,
        edge_residual: true,
        ..ModelConfig::for_dataset(&ds)
    };
    let off_cfg = ModelConfig {
        edge_residual: false,
        ..on_cfg.clone()
    };
    let ops = Operators::Fixed(vec![OpKind::Gine, OpKind::GatedGcn, OpKind::Gatv2, OpKind::Gine]);
    let mut on = Model::new(on_cfg.clone(), ops.clone(), &mut ChaCha8Rng::seed_from_u64(10)).map_err(err)?;
    let mut off = Model::new(off_cfg, ops, &mut ChaCha8Rng::seed_from_u64(99)).map_err(err)?;
    let names: Vec<String> = off.named_params().into_iter().map(|(n, _)| n).collect();
    for name in &names {
        let src = on.param(name).ok_or(format!("{name} missing from the gated model"))?.values().to_vec();
        off.param_mut(name).unwrap().values_mut().copy_from_slice(&src);
    }
    // Default gate: the edge stream must matter, otherwise the comparison is vacuous.
    let g0 = &ds.graphs[0];
    let diff0 = (on.predict(g0, None, None).map_err(err)?[0] - off.predict(g0, None, None).map_err(err)?[0]).abs();
    ensure(diff0 > 1e-6, format!("edge stream has no effect at the default gate ({diff0:e})"))?;

    for l in 0..on_cfg.layers {
        on.param_mut(&format!("layers.{l}.gamma")).ok_or("gamma missing")?.values_mut()[0] = -60.0;
    }
    let mut worst: f64 = 0.0;
    for g in &ds.graphs {
        let a = on.predict(g, None, None).map_err(err)?;
        let b = off.predict(g, None, None).map_err(err)?;
        worst = worst.max((a[0] - b[0]).abs());
    }
    ensure(worst < EDGE_GATE_TOL, format!("saturated gate differs from edge_residual = off by {worst:e}"))?;

    on.reset_counters();
    let mut tape = Tape::new();
    let pass = on
        .forward(
            &mut tape,
            g0,
            ForwardOptions {
                capture_activations: true,
                freeze_weights: true,
                ..Default::default()
            },
        )
        .map_err(err)?;
    ensure(
        on.edge_stream_calls() == 1 && pass.edge_stream_evaluations == 1,
        format!("edge stream evaluated {} times in one pass", on.edge_stream_calls()),
    )?;
    let streams = pass.activations.unwrap().edge_stream;
    let mut fresh = Tape::new();
    let raw = on.raw_edges(&mut fresh, g0).map_err(err)?;
    let h = on.edge_stream(&mut fresh, g0, raw, &gnn::bind_frozen).map_err(err)?.ok_or("no edge stream")?;
    let recomputed: Vec<u64> = fresh.value(h).iter().map(|v| v.to_bits()).collect();
    for (l, s) in streams.iter().enumerate() {
        let s = s.as_ref().ok_or(format!("layer {l} saw no edge stream"))?;
        ensure(
            s.values().iter().map(|v| v.to_bits()).collect::<Vec<_>>() == recomputed,
            format!("layer {l} edge stream differs from a fresh recomputation"),
        )?;
    }
    Ok(format!("saturated gate within {worst:.2e} of off; H_edge computed once and shared by {} layers", streams.len()))
}

fn report_line(n: usize, outcome: &Outcome) -> bool {
    match outcome {
        Ok(detail) => {
            println!("criterion {n:>2}: PASS  {detail}");
            true
        }
        Err(reason) => {
            println!("criterion {n:>2}: FAIL  {reason}");
            false
        }
    }
}

fn main() {
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| selected.is_empty() || selected.contains(&n);
    let mut all_ok = true;
    let quick: [(usize, fn() -> Outcome); 6] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
    ];
    for (n, f) in quick {
        if wanted(n) {
            all_ok &= report_line(n, &f());
        }
    }
    if wanted(7) || wanted(8) {
        let start = Instant::now();
        let result = experiment_config().and_then(|(ds, cfg)| compare(&ds, &cfg).map_err(err));
        let elapsed = start.elapsed();
        match result {
            Ok(report) => {
                println!("experiment: {}", describe(&report));
                if wanted(7) {
                    all_ok &= report_line(7, &criterion_7(&report, elapsed));
                }
                if wanted(8) {
                    all_ok &= report_line(8, &criterion_8(&report));
                }
            }
            Err(e) => {
                for n in [7, 8].into_iter().filter(|&n| wanted(n)) {
                    all_ok &= report_line(n, &Err(format!("experiment failed: {e}")));
                }
            }
        }
    }
    for (n, f) in [(9, criterion_9 as fn() -> Outcome), (10, criterion_10)] {
        if wanted(n) {
            all_ok &= report_line(n, &f());
        }
    }
    if !all_ok {
        std::process::exit(1);
    }
}
