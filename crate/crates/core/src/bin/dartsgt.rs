use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{info, warn};
use serde::{Deserialize, Serialize};

use dartsgt::data::{generate_synthetic, Dataset, SyntheticTask};
use dartsgt::experiment::{compare, holdout_split, CompareConfig};
use dartsgt::gnn::OpKind;
use dartsgt::interpret::{analyze_dataset, InterpretConfig, DEFAULT_K, DEFAULT_NODE_FRACTION};
use dartsgt::model::{load_checkpoint, save_checkpoint, AttentionKind, ModelConfig, Operators, PhiKind, Variant};
use dartsgt::search::{random_architecture, search, DiscreteArchitecture, SearchConfig, SearchRecord};
use dartsgt::selfcheck::{run_selfcheck, Fault};
use dartsgt::train::{evaluate, fit};
use dartsgt::{rng, Error, Result};

#[derive(Parser)]
#[command(name = "dartsgt", version, about = "Graph transformer with searchable message-passing keys and values")]
struct Cli {
    /// Log progress (repeat for debug output).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset.
    Generate {
        #[arg(long)]
        task: String,
        #[arg(long = "n")]
        n_graphs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Architecture search and discretization.
    Search {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        opts: RunArgs,
        #[arg(long, default_value = "search.json")]
        out: PathBuf,
    },
    /// Train a discrete model and write a checkpoint.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        opts: RunArgs,
        /// searched:<file>, uniform:<OP> or random:<seed>.
        #[arg(long)]
        arch: Option<String>,
        #[arg(long, default_value = "model.json")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Evaluate only the held-out part of the split used by `train`.
        #[arg(long)]
        test_fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Head-ablation analysis with per-instance and dataset reports.
    Interpret {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        node_fraction: Option<f64>,
        /// Rank heads by |delta| instead of signed delta.
        #[arg(long)]
        sign_agnostic: bool,
        /// Analyze only the held-out part of the split used by `train`.
        #[arg(long)]
        test_fraction: Option<f64>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
    /// Searched vs random, vanilla and symmetric models over several seeds.
    Compare {
        #[arg(long)]
        dataset: PathBuf,
        #[command(flatten)]
        opts: RunArgs,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0u64, 1, 2])]
        seeds: Vec<u64>,
        #[arg(long, default_value_t = 3)]
        random: usize,
        #[arg(long, default_value = "compare.json")]
        out: PathBuf,
    },
    /// Run the invariant suite.
    Selfcheck {
        #[arg(long, value_enum)]
        inject_fault: Option<FaultArg>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum FaultArg {
    NaiveSoftmax,
}

#[derive(Clone, Copy, ValueEnum)]
enum Switch {
    On,
    Off,
}

#[derive(Args, Clone, Default)]
struct RunArgs {
    /// TOML file with run settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs_search: Option<usize>,
    #[arg(long)]
    epochs_final: Option<usize>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    attention: Option<AttentionKind>,
    #[arg(long)]
    variant: Option<Variant>,
    #[arg(long)]
    phi: Option<PhiKind>,
    #[arg(long, value_enum)]
    edge_residual: Option<Switch>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    lr_w: Option<f64>,
    #[arg(long)]
    lr_alpha: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
}

/// Settings file layout; every field optional.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    epochs_search: Option<usize>,
    epochs_final: Option<usize>,
    layers: Option<usize>,
    heads: Option<usize>,
    dim: Option<usize>,
    ffn_ratio: Option<usize>,
    attention: Option<AttentionKind>,
    variant: Option<Variant>,
    phi: Option<PhiKind>,
    edge_residual: Option<bool>,
    dropout: Option<f64>,
    lr_w: Option<f64>,
    lr_alpha: Option<f64>,
    batch_size: Option<usize>,
    weight_decay: Option<f64>,
    alpha_weight_decay: Option<f64>,
    grad_clip: Option<f64>,
    alpha_grad_clip: Option<f64>,
    test_fraction: Option<f64>,
}

/// Fully resolved settings for a run.
#[derive(Clone, Debug, Serialize)]
struct Resolved {
    search: SearchConfig,
    test_fraction: f64,
}

impl RunArgs {
    fn resolve(&self, ds: &Dataset) -> Result<Resolved> {
        let file: FileConfig = match &self.config {
            Some(p) => toml::from_str(&fs::read_to_string(p).map_err(Error::file(p))?)
                .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => FileConfig::default(),
        };
        let base = SearchConfig::new(ModelConfig::for_dataset(ds), 0);
        let m = &base.model;
        let model = ModelConfig {
            layers: pick(self.layers, file.layers, m.layers),
            heads: pick(self.heads, file.heads, m.heads),
            dim: pick(self.dim, file.dim, m.dim),
            ffn_ratio: file.ffn_ratio.unwrap_or(m.ffn_ratio),
            attention: pick(self.attention, file.attention, m.attention),
            variant: pick(self.variant, file.variant, m.variant),
            phi: pick(self.phi, file.phi, m.phi),
            edge_residual: pick(self.edge_residual.map(|s| matches!(s, Switch::On)), file.edge_residual, m.edge_residual),
            dropout: pick(self.dropout, file.dropout, m.dropout),
            ..m.clone()
        };
        let search = SearchConfig {
            epochs_search: pick(self.epochs_search, file.epochs_search, base.epochs_search),
            epochs_final: pick(self.epochs_final, file.epochs_final, base.epochs_final),
            lr_w: pick(self.lr_w, file.lr_w, base.lr_w),
            lr_alpha: pick(self.lr_alpha, file.lr_alpha, base.lr_alpha),
            batch_size: pick(self.batch_size, file.batch_size, base.batch_size),
            weight_decay: file.weight_decay.unwrap_or(base.weight_decay),
            alpha_weight_decay: file.alpha_weight_decay.unwrap_or(base.alpha_weight_decay),
            grad_clip: file.grad_clip.or(base.grad_clip),
            alpha_grad_clip: file.alpha_grad_clip.or(base.alpha_grad_clip),
            seed: pick(self.seed, file.seed, 0),
            model,
        };
        search.validate()?;
        Ok(Resolved {
            search,
            test_fraction: pick(self.test_fraction, file.test_fraction, 0.2),
        })
    }
}

fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

fn parse_arch(spec: &str, layers: usize) -> Result<DiscreteArchitecture> {
    let (kind, value) = spec
        .split_once(':')
        .ok_or_else(|| Error::Config(format!("architecture '{spec}' must be searched:<file>, uniform:<OP> or random:<seed>")))?;
    let arch = match kind {
        "searched" => SearchRecord::load(Path::new(value))?.architecture,
        "uniform" => DiscreteArchitecture::uniform(value.parse::<OpKind>()?, layers),
        "random" => {
            let seed = value
                .parse::<u64>()
                .map_err(|_| Error::Config(format!("random architecture seed '{value}' is not an integer")))?;
            random_architecture(layers, seed)?
        }
        other => return Err(Error::Config(format!("unknown architecture source '{other}'"))),
    };
    if arch.ops.len() != layers {
        return Err(Error::Config(format!(
            "architecture has {} layers but the model has {layers}",
            arch.ops.len()
        )));
    }
    Ok(arch)
}

/// Writes the resolved settings next to an output.
fn write_provenance(out: &Path, command: &str, resolved: &serde_json::Value) -> Result<()> {
    let path = if out.is_dir() {
        out.join("provenance.json")
    } else {
        let mut name = out.file_name().unwrap_or_default().to_os_string();
        name.push(".provenance.json");
        out.with_file_name(name)
    };
    let record = serde_json::json!({
        "command": command,
        "args": std::env::args().collect::<Vec<_>>(),
        "version": env!("CARGO_PKG_VERSION"),
        "resolved": resolved,
    });
    fs::write(&path, serde_json::to_string_pretty(&record)? + "\n").map_err(Error::file(&path))?;
    info!("provenance written to {}", path.display());
    Ok(())
}

fn echo(resolved: &impl Serialize) -> Result<serde_json::Value> {
    let v = serde_json::to_value(resolved)?;
    info!("resolved configuration: {v}");
    Ok(v)
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Generate { task, n_graphs, seed, out } => {
            let task: SyntheticTask = task.parse()?;
            let ds = generate_synthetic(task, n_graphs, seed)?;
            ds.save(&out)?;
            println!(
                "{} graphs: mean nodes {:.3}, mean edges {:.3}, mean degree {:.4}",
                ds.len(),
                ds.mean_nodes(),
                ds.mean_edges(),
                ds.mean_degree()
            );
            let v = echo(&serde_json::json!({"task": task.name(), "n_graphs": n_graphs, "seed": seed}))?;
            write_provenance(&out, "generate", &v)?;
        }
        Command::Search { dataset, opts, out } => {
            let ds = Dataset::load(&dataset)?;
            let r = opts.resolve(&ds)?;
            let v = echo(&r)?;
            let outcome = search(&ds, &r.search)?;
            let record = SearchRecord::new(&outcome, &r.search);
            record.save(&out)?;
            for (l, op) in outcome.architecture.ops.iter().enumerate() {
                println!("layer {l}: {}", op.name());
            }
            for (op, p) in OpKind::ALL.iter().zip(record.proportions) {
                println!("proportion {}: {p:.4}", op.name());
            }
            if !outcome.tie_layers.is_empty() {
                eprintln!("warning: tied architecture weights at layers {:?}", outcome.tie_layers);
            }
            write_provenance(&out, "search", &v)?;
        }
        Command::Train { dataset, opts, arch, out } => {
            let ds = Dataset::load(&dataset)?;
            let r = opts.resolve(&ds)?;
            let operators = match (r.search.model.variant, arch) {
                (Variant::Vanilla, None) => Operators::None,
                (Variant::Vanilla, Some(_)) => {
                    return Err(Error::Config("the vanilla variant takes no --arch".into()))
                }
                (_, Some(spec)) => Operators::Fixed(parse_arch(&spec, r.search.model.layers)?.ops),
                (_, None) => return Err(Error::Config("--arch is required unless --variant vanilla".into())),
            };
            let v = echo(&serde_json::json!({"run": &r, "operators": &operators}))?;
            let (train, test) = holdout_split(&ds, r.test_fraction, r.search.seed)?;
            let mut model = dartsgt::model::Model::new(
                r.search.model.clone(),
                operators,
                &mut rng::stream(r.search.seed, rng::INIT),
            )?;
            let train_cfg = dartsgt::train::TrainConfig {
                select_best: false,
                ..r.search.final_train_config()
            };
            let report = fit(&mut model, &train, Some(&test), &train_cfg)?;
            for e in &report.history {
                println!(
                    "epoch {}: train loss {:.6}, test metric {:.6}",
                    e.epoch,
                    e.train_loss,
                    e.val.map_or(f64::NAN, |x| x.metric)
                );
            }
            let test_eval = evaluate(&model, &test, None)?;
            println!("gnn bundles: {}", model.gnn_bundle_count());
            println!("final train metric {:.6}, test metric {:.6}", report.final_train.metric, test_eval.metric);
            save_checkpoint(&model, &out)?;
            write_provenance(&out, "train", &v)?;
        }
        Command::Eval { checkpoint, dataset, test_fraction, seed } => {
            let model = load_checkpoint(&checkpoint)?;
            let ds = Dataset::load(&dataset)?;
            let target = match test_fraction {
                Some(f) => holdout_split(&ds, f, seed)?.1,
                None => ds,
            };
            let e = evaluate(&model, &target, None)?;
            println!("graphs {}: loss {:.6}, metric {:.6}", target.len(), e.loss, e.metric);
        }
        Command::Interpret {
            checkpoint,
            dataset,
            k,
            node_fraction,
            sign_agnostic,
            test_fraction,
            seed,
            out,
        } => {
            let model = load_checkpoint(&checkpoint)?;
            let ds = Dataset::load(&dataset)?;
            let target = match test_fraction {
                Some(f) => holdout_split(&ds, f, seed)?.1,
                None => ds,
            };
            let cfg = InterpretConfig {
                k: k.unwrap_or(DEFAULT_K),
                node_fraction: node_fraction.unwrap_or(DEFAULT_NODE_FRACTION),
                sign_agnostic,
                thresholds: None,
            };
            let v = echo(&serde_json::json!({"interpret": &cfg, "test_fraction": test_fraction, "seed": seed}))?;
            let report = analyze_dataset(&model, &target, &cfg)?;
            report.write(&out)?;
            println!("{:<12} {:>14} {:>14}", "instances", "median spec", "median focus");
            println!(
                "{:<12} {:>14.6} {:>14}",
                report.instances.len(),
                report.median_specialization,
                report.median_focus.map_or("undefined".to_string(), |f| format!("{f:.6}"))
            );
            write_provenance(&out, "interpret", &v)?;
        }
        Command::Compare { dataset, opts, seeds, random, out } => {
            let ds = Dataset::load(&dataset)?;
            let r = opts.resolve(&ds)?;
            let cfg = CompareConfig {
                search: r.search.clone(),
                seeds,
                random_architectures: random,
                test_fraction: r.test_fraction,
            };
            let v = echo(&cfg)?;
            let report = compare(&ds, &cfg)?;
            for s in &report.seeds {
                println!(
                    "seed {}: searched {:.4} [{}], random median {:.4}, vanilla {:.4}, symmetric {:.4}",
                    s.seed,
                    s.searched.test_metric,
                    s.searched.architecture.as_ref().map(ToString::to_string).unwrap_or_default(),
                    s.random_median(),
                    s.vanilla.test_metric,
                    s.symmetric.test_metric
                );
            }
            println!(
                "median: searched {:.4}, random {:.4}, vanilla {:.4}, symmetric {:.4}",
                report.median_searched(),
                report.median_random(),
                report.median_vanilla(),
                report.median_symmetric()
            );
            fs::write(&out, serde_json::to_string_pretty(&report)? + "\n").map_err(Error::file(&out))?;
            write_provenance(&out, "compare", &v)?;
        }
        Command::Selfcheck { inject_fault } => {
            let fault = inject_fault.map(|f| match f {
                FaultArg::NaiveSoftmax => Fault::NaiveSoftmax,
            });
            let results = run_selfcheck(fault);
            let mut ok = true;
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
                ok &= r.passed;
            }
            if !ok {
                warn!("selfcheck failed");
            }
            return Ok(ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
