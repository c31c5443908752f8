//! Pinned experiment protocols and the named reproduction recipes.
//!
//! A recipe generates its data, trains one or more ensembles and writes
//! `model.json`, `curves.csv`, `rules.csv`, `summary.json` and `suite.json`
//! into an output directory. Extra runs of a recipe land in `models/`.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::boost::{train, RegularizerKind, RuleEnsemble, TrainConfig};
use crate::causal::{CausalGraph, Decomposition};
use crate::data::Dataset;
use crate::datagen::{
    attach_group_ids, compose_mixture, example1_replicated_graph, gen_example1, gen_small_invariant_margin,
    sim_graph, Example1Config, Grouping, MixtureSpec, SimConfig, SplitSpec, INT_ENV, OBS_ENV,
};
use crate::error::{Error, Result};
use crate::eval::{accuracy_curves, mi_ratio, rule_report, spearman, split_report, RuleRow, SplitReport};

/// Train, in-distribution test and OOD-test data of one experiment.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub test: Dataset,
    pub ood: Dataset,
}

fn proportions(pairs: &[(String, f64)]) -> BTreeMap<String, f64> {
    pairs.iter().cloned().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Example1Protocol {
    pub generator: Example1Config,
    pub pool_per_env: usize,
    pub train_total: usize,
    pub test_total: usize,
    pub train_obs_share: f64,
    pub test_obs_share: f64,
}

impl Default for Example1Protocol {
    /// The failure-mode setting: the variant block is sharper than the
    /// invariant one.
    fn default() -> Self {
        Example1Protocol {
            generator: Example1Config { sigma1: 0.9, sigma2: 0.3, sigma3: 0.2, seed: 1, ..Default::default() },
            pool_per_env: 2000,
            train_total: 1000,
            test_total: 1000,
            train_obs_share: 0.9,
            test_obs_share: 0.5,
        }
    }
}

impl Example1Protocol {
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.generator.seed = seed;
        self
    }

    pub fn graph(&self) -> CausalGraph {
        example1_replicated_graph(self.generator.n_inv, self.generator.n_var)
    }

    /// Test points from the interventional environment form the OOD split.
    pub fn splits(&self) -> Result<Splits> {
        let pools = gen_example1(&self.generator, self.pool_per_env)?.split_by_env()?;
        let share = |obs: f64| proportions(&[(OBS_ENV.into(), obs), (INT_ENV.into(), 1.0 - obs)]);
        let spec = MixtureSpec {
            train: SplitSpec { total: self.train_total, proportions: share(self.train_obs_share) },
            test: SplitSpec { total: self.test_total, proportions: share(self.test_obs_share) },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.generator.seed);
        let (train, test) = compose_mixture(&pools, &spec, &mut rng)?;
        let ood = test.split_by_env()?.remove(INT_ENV).ok_or_else(|| Error::Config("test split has no interventional points".into()))?;
        Ok(Splits { train, test, ood })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimProtocol {
    pub generator: SimConfig,
    pub train_total: usize,
    pub test_total: usize,
    /// Upper bound on the training share of each minority environment.
    pub minority_cap: f64,
    /// Combined training share of all minority environments, before capping.
    pub minority_total: f64,
}

impl Default for SimProtocol {
    fn default() -> Self {
        SimProtocol {
            generator: SimConfig { seed: 1, ..Default::default() },
            train_total: 1000,
            test_total: 1000,
            minority_cap: 0.1,
            minority_total: 0.4,
        }
    }
}

impl SimProtocol {
    pub fn new(n_envs: usize, scramble: bool) -> Self {
        let mut p = SimProtocol::default();
        p.generator.n_envs = n_envs;
        p.generator.scramble = scramble;
        p
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.generator.seed = seed;
        self
    }

    pub fn graph(&self) -> CausalGraph {
        sim_graph(self.generator.d_inv, self.generator.d_var)
    }

    /// Training share per environment: `e0` is the majority.
    pub fn train_shares(&self) -> BTreeMap<String, f64> {
        let k = self.generator.n_envs;
        let minor = (self.minority_total / (k - 1) as f64).min(self.minority_cap);
        (0..k)
            .map(|i| (format!("e{i}"), if i == 0 { 1.0 - minor * (k - 1) as f64 } else { minor }))
            .collect()
    }

    /// Test data mixes the training environments uniformly; the OOD split
    /// pools every held-out environment. Training points carry
    /// (label, environment) group ids.
    pub fn splits(&self) -> Result<(Splits, Option<String>)> {
        let suite = gen_small_invariant_margin(&self.generator)?;
        let k = self.generator.n_envs;
        let spec = MixtureSpec {
            train: SplitSpec { total: self.train_total, proportions: self.train_shares() },
            test: SplitSpec {
                total: self.test_total,
                proportions: (0..k).map(|i| (format!("e{i}"), 1.0 / k as f64)).collect(),
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(self.generator.seed);
        let (train, test) = compose_mixture(&suite.envs, &spec, &mut rng)?;
        let train = attach_group_ids(train, &Grouping::ByLabelEnv)?;
        let parts: Vec<&Dataset> = suite.ood_envs.values().collect();
        let ood = Dataset::concat(&parts)?;
        Ok((Splits { train, test, ood }, suite.scramble_hash()))
    }
}

/// One trained ensemble with its reports.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub name: String,
    pub model: RuleEnsemble,
    pub train: SplitReport,
    pub test: SplitReport,
    pub ood: SplitReport,
}

impl RunResult {
    pub fn curves(&self, splits: &Splits) -> Result<Vec<RunCurveRow>> {
        let rows = accuracy_curves(&self.model, &[("train", &splits.train), ("test", &splits.test), ("ood-test", &splits.ood)])?;
        Ok(rows
            .into_iter()
            .map(|r| RunCurveRow { run: self.name.clone(), round: r.round, split: r.split, env: r.env, accuracy: r.accuracy })
            .collect())
    }

    pub fn rules(&self, splits: &Splits, top: usize) -> Result<Vec<RuleRow>> {
        rule_report(&self.model, &[("train", &splits.train), ("test", &splits.test)], top)
    }

    fn summary(&self) -> Value {
        json!({ "train": self.train, "test": self.test, "ood_test": self.ood })
    }
}

/// Curve row tagged with the run it belongs to.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunCurveRow {
    pub run: String,
    pub round: usize,
    pub split: String,
    pub env: String,
    pub accuracy: f64,
}

pub fn run_experiment(name: &str, splits: &Splits, config: &TrainConfig, decomposition: Option<&Decomposition>) -> Result<RunResult> {
    let model = train(&splits.train, config, decomposition)?;
    Ok(RunResult {
        name: name.to_string(),
        train: split_report(&model, &splits.train)?,
        test: split_report(&model, &splits.test)?,
        ood: split_report(&model, &splits.ood)?,
        model,
    })
}

pub fn train_config(regularizer: RegularizerKind, lambda: f64, seed: u64) -> TrainConfig {
    let mut c = TrainConfig { regularizer, lambda, ..Default::default() };
    c.beam.seed = seed;
    c
}

/// Share of rule conditions, over every boosting round, on features flagged
/// variant.
pub fn variant_condition_fraction(model: &RuleEnsemble, invariant: &[bool]) -> f64 {
    let (mut var, mut total) = (0usize, 0usize);
    for term in &model.terms {
        for c in term.rule.conditions() {
            total += 1;
            if !invariant.get(c.feature).copied().unwrap_or(false) {
                var += 1;
            }
        }
    }
    if total == 0 { 0.0 } else { var as f64 / total as f64 }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Recipe {
    Example1Fig3,
    Example1Fig6,
    SimFig7,
    SimFig8,
    Table4Baseline,
    AppendixAFig5,
}

impl Recipe {
    pub const ALL: [Recipe; 6] = [
        Recipe::Example1Fig3,
        Recipe::Example1Fig6,
        Recipe::SimFig7,
        Recipe::SimFig8,
        Recipe::Table4Baseline,
        Recipe::AppendixAFig5,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Recipe::Example1Fig3 => "example1-fig3",
            Recipe::Example1Fig6 => "example1-fig6",
            Recipe::SimFig7 => "sim-fig7",
            Recipe::SimFig8 => "sim-fig8",
            Recipe::Table4Baseline => "table4-baseline",
            Recipe::AppendixAFig5 => "appendixA-fig5",
        }
    }

    /// Seed used when the caller does not override it.
    pub fn default_seed(self) -> u64 {
        1
    }
}

impl fmt::Display for Recipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Recipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Recipe::ALL.into_iter().find(|r| r.name() == s).ok_or_else(|| {
            let names: Vec<&str> = Recipe::ALL.iter().map(|r| r.name()).collect();
            Error::Config(format!("unknown recipe `{s}`; available: {}", names.join(", ")))
        })
    }
}

/// Everything a recipe produced, before it is written out.
struct Outputs {
    runs: Vec<RunResult>,
    curves: Vec<RunCurveRow>,
    rules: Vec<RuleRow>,
    suite: Value,
    extra: Value,
}

impl Outputs {
    fn new(suite: Value) -> Self {
        Outputs { runs: Vec::new(), curves: Vec::new(), rules: Vec::new(), suite, extra: json!({}) }
    }

    fn push(&mut self, run: RunResult, splits: &Splits) -> Result<()> {
        self.curves.extend(run.curves(splits)?);
        self.rules.extend(run.rules(splits, 5)?.into_iter().map(|mut r| {
            r.split = format!("{}/{}", run.name, r.split);
            r
        }));
        self.runs.push(run);
        Ok(())
    }
}

pub const VARIANCE_LAMBDAS: [f64; 3] = [0.0, 1.0, 3.0];
pub const BASELINE_ENVS: [usize; 4] = [3, 5, 7, 10];
pub const VARIANCE_ENVS: [usize; 3] = [5, 7, 10];
pub const SWEEP_SIGMA1: [f64; 6] = [0.5, 0.7, 0.9, 1.1, 1.3, 1.5];

fn example1_pair(seed: u64, with_graph: bool) -> Result<Outputs> {
    let protocol = Example1Protocol::default().with_seed(seed);
    let splits = protocol.splits()?;
    let mut out = Outputs::new(json!({ "recipe_family": "example1", "protocol": protocol }));
    out.push(run_experiment("unregularized", &splits, &train_config(RegularizerKind::None, 0.0, seed), None)?, &splits)?;
    if with_graph {
        let dec = protocol.graph().decompose_invariant()?;
        out.push(run_experiment("graph", &splits, &train_config(RegularizerKind::Graph, 1.0, seed), Some(&dec))?, &splits)?;
        let gain = out.runs[1].ood.pooled.accuracy - out.runs[0].ood.pooled.accuracy;
        out.extra = json!({ "ood_accuracy_gain": gain, "decomposition": dec });
    }
    Ok(out)
}

fn sim_graph_pair(seed: u64) -> Result<Outputs> {
    let protocol = SimProtocol::new(3, false).with_seed(seed);
    let (splits, hash) = protocol.splits()?;
    let dec = protocol.graph().decompose_invariant()?;
    let mut out = Outputs::new(json!({ "recipe_family": "sim", "protocols": [protocol], "scramble_hashes": [hash] }));
    out.push(run_experiment("unregularized", &splits, &train_config(RegularizerKind::None, 0.0, seed), None)?, &splits)?;
    out.push(run_experiment("graph", &splits, &train_config(RegularizerKind::Graph, 1.0, seed), Some(&dec))?, &splits)?;
    let gain = out.runs[1].ood.pooled.accuracy - out.runs[0].ood.pooled.accuracy;
    out.extra = json!({ "ood_accuracy_gain": gain });
    Ok(out)
}

fn sim_variance_grid(seed: u64) -> Result<Outputs> {
    let mut protocols = Vec::new();
    let mut hashes = Vec::new();
    let mut runs = Vec::new();
    for k in VARIANCE_ENVS {
        let protocol = SimProtocol::new(k, true).with_seed(seed);
        let (splits, hash) = protocol.splits()?;
        for lambda in VARIANCE_LAMBDAS {
            let kind = if lambda == 0.0 { RegularizerKind::None } else { RegularizerKind::Variance };
            let run = run_experiment(&format!("K{k}-lambda{lambda}"), &splits, &train_config(kind, lambda, seed), None)?;
            runs.push((run, splits.clone()));
        }
        protocols.push(protocol);
        hashes.push(hash);
    }
    let mut out = Outputs::new(json!({ "recipe_family": "sim", "protocols": protocols, "scramble_hashes": hashes }));
    let worst: BTreeMap<String, f64> = runs.iter().map(|(r, _)| (r.name.clone(), r.test.worst_env_accuracy)).collect();
    for (run, splits) in runs {
        out.push(run, &splits)?;
    }
    out.extra = json!({ "worst_env_test_accuracy": worst });
    Ok(out)
}

fn sim_baseline(seed: u64) -> Result<Outputs> {
    let mut protocols = Vec::new();
    let mut hashes = Vec::new();
    let mut runs = Vec::new();
    for k in BASELINE_ENVS {
        let protocol = SimProtocol::new(k, true).with_seed(seed);
        let (splits, hash) = protocol.splits()?;
        runs.push((run_experiment(&format!("K{k}"), &splits, &train_config(RegularizerKind::None, 0.0, seed), None)?, splits));
        protocols.push(protocol);
        hashes.push(hash);
    }
    let mut out = Outputs::new(json!({ "recipe_family": "sim", "protocols": protocols, "scramble_hashes": hashes }));
    let pooled: BTreeMap<String, f64> = runs.iter().map(|(r, _)| (r.name.clone(), r.ood.pooled.accuracy)).collect();
    for (run, splits) in runs {
        out.push(run, &splits)?;
    }
    out.extra = json!({ "pooled_ood_test_accuracy": pooled });
    Ok(out)
}

/// One row of the MI-ratio sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub sigma1: f64,
    pub mi_ratio: f64,
    pub ood_accuracy: f64,
}

/// Unregularized runs over a grid of invariant noise levels, pairing the
/// training MI ratio (variant over invariant) with OOD accuracy.
pub fn mi_ratio_sweep(base: &Example1Protocol, sigmas: &[f64], config: &TrainConfig) -> Result<(Vec<SweepRow>, Vec<(RunResult, Splits)>)> {
    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for &s in sigmas {
        let mut protocol = base.clone();
        protocol.generator.sigma1 = s;
        let splits = protocol.splits()?;
        let dec = protocol.graph().decompose_invariant()?;
        let flags = dec.invariant_flags(splits.train.feature_names());
        let ratio = mi_ratio(&splits.train, &flags, config.mi_bins)?;
        let run = run_experiment(&format!("sigma1-{s}"), &splits, config, None)?;
        rows.push(SweepRow { sigma1: s, mi_ratio: ratio, ood_accuracy: run.ood.pooled.accuracy });
        runs.push((run, splits));
    }
    Ok((rows, runs))
}

fn mi_sweep(seed: u64) -> Result<Outputs> {
    let base = Example1Protocol::default().with_seed(seed);
    let (rows, runs) = mi_ratio_sweep(&base, &SWEEP_SIGMA1, &train_config(RegularizerKind::None, 0.0, seed))?;
    let ratios: Vec<f64> = rows.iter().map(|r| r.mi_ratio).collect();
    let accs: Vec<f64> = rows.iter().map(|r| r.ood_accuracy).collect();
    let rho = spearman(&ratios, &accs)?;
    let mut out = Outputs::new(json!({ "recipe_family": "example1", "protocol": base, "sigma1_grid": SWEEP_SIGMA1 }));
    for (run, splits) in runs {
        out.push(run, &splits)?;
    }
    out.extra = json!({ "sweep": rows, "spearman": rho });
    Ok(out)
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    Ok(())
}

fn pretty(v: &Value) -> Result<String> {
    Ok(serde_json::to_string_pretty(v)? + "\n")
}

/// Runs a recipe and writes its artifacts into `out_dir`. The last run is the
/// recipe's primary model; every run is also saved under `models/`.
pub fn run_recipe(recipe: Recipe, seed: Option<u64>, out_dir: &Path) -> Result<Value> {
    let seed = seed.unwrap_or(recipe.default_seed());
    let out = match recipe {
        Recipe::Example1Fig3 => example1_pair(seed, false)?,
        Recipe::Example1Fig6 => example1_pair(seed, true)?,
        Recipe::SimFig7 => sim_graph_pair(seed)?,
        Recipe::SimFig8 => sim_variance_grid(seed)?,
        Recipe::Table4Baseline => sim_baseline(seed)?,
        Recipe::AppendixAFig5 => mi_sweep(seed)?,
    };
    fs::create_dir_all(out_dir.join("models"))?;
    let primary = out.runs.last().ok_or_else(|| Error::Contract("recipe produced no run".into()))?;
    write_file(&out_dir.join("model.json"), primary.model.to_json().as_bytes())?;
    for run in &out.runs {
        write_file(&out_dir.join("models").join(format!("{}.json", run.name)), run.model.to_json().as_bytes())?;
    }
    write_file(&out_dir.join("curves.csv"), &csv_bytes(&out.curves)?)?;
    write_file(&out_dir.join("rules.csv"), &csv_bytes(&out.rules)?)?;
    let mut suite = out.suite.clone();
    suite["recipe"] = json!(recipe.name());
    suite["seed"] = json!(seed);
    write_file(&out_dir.join("suite.json"), pretty(&suite)?.as_bytes())?;
    let runs: BTreeMap<&str, Value> = out.runs.iter().map(|r| (r.name.as_str(), r.summary())).collect();
    let summary = json!({
        "recipe": recipe.name(),
        "seed": seed,
        "primary_run": primary.name,
        "runs": runs,
        "results": out.extra,
    });
    write_file(&out_dir.join("summary.json"), pretty(&summary)?.as_bytes())?;
    Ok(summary)
}
