//! Searched vs random, vanilla and symmetric comparisons over several seeds.

use log::info;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{shuffled_split, Dataset};
use crate::error::{Error, Result};
use crate::interpret::median;
use crate::model::{Operators, Variant};
use crate::rng;
use crate::search::{random_architecture, search, train_fresh, DiscreteArchitecture, SearchConfig};
use crate::train::evaluate;

const HOLDOUT: &str = "holdout";
const RANDOM_ARCH: &str = "random-arch";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    /// Template; its seed is replaced per run.
    pub search: SearchConfig,
    pub seeds: Vec<u64>,
    pub random_architectures: usize,
    pub test_fraction: f64,
}

impl CompareConfig {
    pub fn new(search: SearchConfig) -> Self {
        CompareConfig {
            search,
            seeds: vec![0, 1, 2],
            random_architectures: 3,
            test_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunResult {
    pub label: String,
    pub architecture: Option<DiscreteArchitecture>,
    pub test_metric: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub searched: RunResult,
    pub random: Vec<RunResult>,
    pub vanilla: RunResult,
    pub symmetric: RunResult,
}

impl SeedResult {
    pub fn random_median(&self) -> f64 {
        let v: Vec<f64> = self.random.iter().map(|r| r.test_metric).collect();
        median(&v).unwrap_or(f64::NAN)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompareReport {
    pub seeds: Vec<SeedResult>,
    pub higher_is_better: bool,
}

impl CompareReport {
    fn med(&self, f: impl Fn(&SeedResult) -> f64) -> f64 {
        median(&self.seeds.iter().map(f).collect::<Vec<_>>()).unwrap_or(f64::NAN)
    }

    pub fn median_searched(&self) -> f64 {
        self.med(|s| s.searched.test_metric)
    }

    pub fn median_random(&self) -> f64 {
        self.med(SeedResult::random_median)
    }

    pub fn median_vanilla(&self) -> f64 {
        self.med(|s| s.vanilla.test_metric)
    }

    pub fn median_symmetric(&self) -> f64 {
        self.med(|s| s.symmetric.test_metric)
    }

    /// `a` at least as good as `b` under the task's metric direction.
    pub fn at_least(&self, a: f64, b: f64) -> bool {
        if self.higher_is_better {
            a >= b
        } else {
            a <= b
        }
    }

    /// Seeds on which `pick(seed) = (a, b)` satisfies `a` at least as good as `b`.
    pub fn seeds_where(&self, pick: impl Fn(&SeedResult) -> (f64, f64)) -> usize {
        self.seeds
            .iter()
            .filter(|s| {
                let (a, b) = pick(s);
                self.at_least(a, b)
            })
            .count()
    }
}

/// Train/test split used by the comparison for one seed.
pub fn holdout_split(ds: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!("test fraction {test_fraction} outside [0, 1)")));
    }
    let test = ((ds.len() as f64) * test_fraction).round() as usize;
    if ds.len() - test < 2 || test == 0 {
        return Err(Error::Config(format!("cannot split {} graphs with test fraction {test_fraction}", ds.len())));
    }
    let (train, held) = shuffled_split(ds.len(), ds.len() - test, seed, HOLDOUT);
    Ok((ds.subset(&train), ds.subset(&held)))
}

/// Search, then train the searched, random, vanilla and symmetric models for one seed.
pub fn run_seed(ds: &Dataset, cfg: &CompareConfig, seed: u64) -> Result<SeedResult> {
    let (train, test) = holdout_split(ds, cfg.test_fraction, seed)?;
    let base = SearchConfig {
        seed,
        ..cfg.search.clone()
    };
    let outcome = search(&train, &base)?;
    let layers = base.model.layers;
    let run = |label: String, ops: Operators, variant: Variant| -> Result<RunResult> {
        let c = SearchConfig {
            model: crate::model::ModelConfig {
                variant,
                ..base.model.clone()
            },
            ..base.clone()
        };
        let architecture = match &ops {
            Operators::Fixed(v) => Some(DiscreteArchitecture { ops: v.clone() }),
            _ => None,
        };
        let (model, _) = train_fresh(ops, &train, None, &c)?;
        let test_metric = evaluate(&model, &test, None)?.metric;
        info!("seed {seed} {label}: test metric {test_metric:.4}");
        Ok(RunResult {
            label,
            architecture,
            test_metric,
        })
    };
    let searched_ops = Operators::Fixed(outcome.architecture.ops.clone());
    let searched = run("searched".into(), searched_ops.clone(), Variant::Dartsgt)?;
    let mut arch_rng = rng::stream(seed, RANDOM_ARCH);
    let random = (0..cfg.random_architectures)
        .map(|r| {
            let arch = random_architecture(layers, arch_rng.gen())?;
            run(format!("random-{r}"), Operators::Fixed(arch.ops), Variant::Dartsgt)
        })
        .collect::<Result<Vec<_>>>()?;
    let vanilla = run("vanilla".into(), Operators::None, Variant::Vanilla)?;
    let symmetric = run("symmetric".into(), searched_ops, Variant::Symmetric)?;
    Ok(SeedResult {
        seed,
        searched,
        random,
        vanilla,
        symmetric,
    })
}

/// Runs every seed; seeds are independent and run on separate threads.
pub fn compare(ds: &Dataset, cfg: &CompareConfig) -> Result<CompareReport> {
    cfg.search.validate()?;
    if cfg.random_architectures == 0 || cfg.seeds.is_empty() {
        return Err(Error::Config("need at least one seed and one random architecture".into()));
    }
    let results: Vec<Result<SeedResult>> = std::thread::scope(|s| {
        let handles: Vec<_> = cfg
            .seeds
            .iter()
            .map(|&seed| s.spawn(move || run_seed(ds, cfg, seed)))
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|_| Err(Error::State("comparison worker panicked".into()))))
            .collect()
    });
    Ok(CompareReport {
        seeds: results.into_iter().collect::<Result<Vec<_>>>()?,
        higher_is_better: crate::train::higher_is_better(cfg.search.model.task),
    })
}
