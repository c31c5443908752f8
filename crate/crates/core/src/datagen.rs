//! Synthetic environments with distribution shift.
//!
//! * Example 1: `Y -> X1` (invariant) and `Y -> A -> X2` where an intervention
//!   flips the mechanism of the hidden mediator `A`.
//! * Small invariant margin: a weak invariant signal next to strong spurious
//!   features whose means are redrawn per environment, optionally rotated by
//!   one fixed orthogonal matrix.
//! * Random linear SCMs over small graphs, used to check the decomposition
//!   against sampled data.
//!
//! Every generator is a pure function of its configuration and seed.

use std::collections::BTreeMap;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::causal::{CausalGraph, NodeSpec};
use crate::data::{default_feature_names, Dataset};
use crate::error::{Error, Result};
use crate::regularize::sigmoid;

pub const OBS_ENV: &str = "obs";
pub const INT_ENV: &str = "int";

fn env_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// `f(v) = slope * v + intercept`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub slope: f64,
    pub intercept: f64,
}

impl Affine {
    pub fn apply(&self, v: f64) -> f64 {
        self.slope * v + self.intercept
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Example1Config {
    pub u0: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub sigma3: f64,
    pub f1: Affine,
    pub f2: Affine,
    pub f3: Affine,
    /// Mechanism of `A` in the interventional environment.
    pub f2_int: Affine,
    pub n_inv: usize,
    pub n_var: usize,
    pub seed: u64,
}

impl Default for Example1Config {
    fn default() -> Self {
        let pm = Affine { slope: 2.0, intercept: -1.0 };
        Example1Config {
            u0: 0.5,
            sigma1: 0.5,
            sigma2: 0.5,
            sigma3: 0.5,
            f1: pm,
            f2: pm,
            f3: Affine { slope: 1.0, intercept: 0.0 },
            f2_int: Affine { slope: -2.0, intercept: 1.0 },
            n_inv: 5,
            n_var: 5,
            seed: 0,
        }
    }
}

impl Example1Config {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.u0) {
            return Err(Error::Config(format!("u0 must lie in [0, 1], got {}", self.u0)));
        }
        for (name, s) in [("sigma1", self.sigma1), ("sigma2", self.sigma2), ("sigma3", self.sigma3)] {
            if !(s > 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {s}")));
            }
        }
        if self.n_inv + self.n_var == 0 {
            return Err(Error::Config("at least one feature replicate is needed".into()));
        }
        Ok(())
    }
}

/// Samples `n_per_env` points from each of the observational and the
/// interventional environment. Columns `x1..x{n_inv}` replicate `X1`, the next
/// `n_var` columns replicate `X2` around one shared draw of `A`.
pub fn gen_example1(config: &Example1Config, n_per_env: usize) -> Result<Dataset> {
    config.validate()?;
    let width = config.n_inv + config.n_var;
    let mut columns = vec![Vec::with_capacity(2 * n_per_env); width];
    let mut labels = Vec::with_capacity(2 * n_per_env);
    let mut env = Vec::with_capacity(2 * n_per_env);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    for (stream, (name, f2)) in [(OBS_ENV, config.f2), (INT_ENV, config.f2_int)].into_iter().enumerate() {
        let mut rng = env_rng(config.seed, stream as u64);
        for _ in 0..n_per_env {
            let y = u8::from(rng.random_bool(config.u0));
            let yf = f64::from(y);
            for col in columns.iter_mut().take(config.n_inv) {
                col.push(config.f1.apply(yf) + config.sigma1 * unit.sample(&mut rng));
            }
            let a = f2.apply(yf) + config.sigma2 * unit.sample(&mut rng);
            for col in columns.iter_mut().skip(config.n_inv) {
                col.push(config.f3.apply(a) + config.sigma3 * unit.sample(&mut rng));
            }
            labels.push(y);
            env.push(name.to_string());
        }
    }
    Dataset::new(default_feature_names(width), columns, labels, Some(env), None)
}

/// The Example 1 graph over one invariant and one variant feature.
pub fn example1_graph() -> CausalGraph {
    CausalGraph::new(
        vec![
            NodeSpec::target("Y"),
            NodeSpec::feature("X1"),
            NodeSpec::latent("A").manipulable(),
            NodeSpec::feature("X2"),
        ],
        vec![("Y".into(), "X1".into()), ("Y".into(), "A".into()), ("A".into(), "X2".into())],
        vec![],
    )
    .expect("valid graph")
}

/// The Example 1 graph with every replicate as its own node, matching the
/// column names of [`gen_example1`].
pub fn example1_replicated_graph(n_inv: usize, n_var: usize) -> CausalGraph {
    let mut nodes = vec![NodeSpec::target("Y"), NodeSpec::latent("A").manipulable()];
    let mut directed = vec![("Y".to_string(), "A".to_string())];
    for (i, name) in default_feature_names(n_inv + n_var).into_iter().enumerate() {
        directed.push(if i < n_inv { ("Y".into(), name.clone()) } else { ("A".into(), name.clone()) });
        nodes.push(NodeSpec::feature(&name));
    }
    CausalGraph::new(nodes, directed, vec![]).expect("valid graph")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub d_inv: usize,
    pub d_var: usize,
    /// Training environments `e0..e{K-1}`.
    pub n_envs: usize,
    /// Held-out environments `ood0..` with fresh spurious means.
    pub n_ood_envs: usize,
    pub n_per_env: usize,
    pub n_per_ood_env: usize,
    pub scramble: bool,
    /// Invariant mean magnitude per dimension.
    pub gamma: f64,
    /// Per-dimension noise standard deviation.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            d_inv: 5,
            d_var: 5,
            n_envs: 3,
            n_ood_envs: 50,
            n_per_env: 2000,
            n_per_ood_env: 40,
            scramble: true,
            gamma: 0.1,
            noise: 0.1,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_inv == 0 || self.d_var == 0 {
            return Err(Error::Config("d_inv and d_var must be at least 1".into()));
        }
        if self.n_envs < 2 {
            return Err(Error::Config("at least two environments are required".into()));
        }
        if !(self.noise > 0.0 && self.noise.is_finite() && self.gamma.is_finite()) {
            return Err(Error::Config("noise must be positive and gamma finite".into()));
        }
        Ok(())
    }
}

/// Output of [`gen_small_invariant_margin`].
#[derive(Debug, Clone)]
pub struct SimSuite {
    /// Training environments, keyed `e0..`.
    pub envs: BTreeMap<String, Dataset>,
    /// Out-of-distribution environments, keyed `ood0..`.
    pub ood_envs: BTreeMap<String, Dataset>,
    /// Spurious means per environment name.
    pub means: BTreeMap<String, Vec<f64>>,
    pub scramble: Option<DMatrix<f64>>,
}

impl SimSuite {
    /// Hex SHA-256 over the row-major little-endian bytes of the scrambling
    /// matrix, if any.
    pub fn scramble_hash(&self) -> Option<String> {
        self.scramble.as_ref().map(matrix_hash)
    }
}

pub fn matrix_hash(m: &DMatrix<f64>) -> String {
    let mut h = Sha256::new();
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            h.update(m[(r, c)].to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

/// Haar-distributed orthogonal matrix: QR of a Gaussian matrix with the signs
/// of `R`'s diagonal folded into `Q`.
pub fn random_orthogonal<R: Rng + ?Sized>(d: usize, rng: &mut R) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| StandardNormal.sample(rng));
    let qr = g.qr();
    let (mut q, r) = (qr.q(), qr.r());
    for j in 0..d {
        if r[(j, j)] < 0.0 {
            q.column_mut(j).neg_mut();
        }
    }
    q
}

fn sim_env(
    config: &SimConfig,
    name: &str,
    mu: &[f64],
    n: usize,
    scramble: Option<&DMatrix<f64>>,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset> {
    let d = config.d_inv + config.d_var;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let y = u8::from(rng.random_bool(0.5));
        let sign = if y == 1 { -1.0 } else { 1.0 };
        let mut x: Vec<f64> = (0..d)
            .map(|j| {
                let mean = if j < config.d_inv { config.gamma } else { mu[j - config.d_inv] };
                let z: f64 = StandardNormal.sample(rng);
                sign * mean + config.noise * z
            })
            .collect();
        if let Some(s) = scramble {
            x = (0..d).map(|r| (0..d).map(|c| s[(r, c)] * x[c]).sum()).collect();
        }
        rows.push(x);
        labels.push(y);
    }
    let data = Dataset::from_rows(&rows, labels)?;
    data.with_env(vec![name.to_string(); n])
}

/// Generates every training and OOD environment of one suite. The scrambling
/// matrix, when enabled, is drawn once and shared by all environments.
pub fn gen_small_invariant_margin(config: &SimConfig) -> Result<SimSuite> {
    config.validate()?;
    let d = config.d_inv + config.d_var;
    let mut master = env_rng(config.seed, 0);
    let scramble = config.scramble.then(|| random_orthogonal(d, &mut master));
    let mut envs = BTreeMap::new();
    let mut ood_envs = BTreeMap::new();
    let mut means = BTreeMap::new();
    let total = config.n_envs + config.n_ood_envs;
    for k in 0..total {
        let (name, n) = if k < config.n_envs {
            (format!("e{k}"), config.n_per_env)
        } else {
            (format!("ood{}", k - config.n_envs), config.n_per_ood_env)
        };
        let mut rng = env_rng(config.seed, 1 + k as u64);
        let mu: Vec<f64> = (0..config.d_var).map(|_| StandardNormal.sample(&mut rng)).collect();
        let data = sim_env(config, &name, &mu, n, scramble.as_ref(), &mut rng)?;
        means.insert(name.clone(), mu);
        if k < config.n_envs {
            envs.insert(name, data);
        } else {
            ood_envs.insert(name, data);
        }
    }
    Ok(SimSuite { envs, ood_envs, means, scramble })
}

/// Graph of the unscrambled benchmark: `Y` drives every coordinate and a
/// hidden manipulable node (the environment's spurious mean) drives the
/// spurious ones.
pub fn sim_graph(d_inv: usize, d_var: usize) -> CausalGraph {
    let mut nodes = vec![NodeSpec::target("Y"), NodeSpec::latent("M").manipulable()];
    let mut directed = Vec::new();
    for (i, name) in default_feature_names(d_inv + d_var).into_iter().enumerate() {
        directed.push(("Y".to_string(), name.clone()));
        if i >= d_inv {
            directed.push(("M".to_string(), name.clone()));
        }
        nodes.push(NodeSpec::feature(&name));
    }
    CausalGraph::new(nodes, directed, vec![]).expect("valid graph")
}

/// Per-split environment proportions and total sizes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub total: usize,
    pub proportions: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub train: SplitSpec,
    pub test: SplitSpec,
}

/// Largest-remainder apportionment of `total` over `proportions`; exact sum,
/// ties in the remainder go to the earlier key.
pub fn apportion(total: usize, proportions: &BTreeMap<String, f64>) -> Result<BTreeMap<String, usize>> {
    let sum: f64 = proportions.values().sum();
    if proportions.values().any(|&p| !(p >= 0.0 && p.is_finite())) || (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("proportions must be non-negative and sum to 1, got sum {sum}")));
    }
    let quotas: Vec<(&String, f64)> = proportions.iter().map(|(k, &p)| (k, p * total as f64)).collect();
    let mut counts: Vec<usize> = quotas.iter().map(|(_, q)| q.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a].1 - quotas[a].1.floor();
        let rb = quotas[b].1 - quotas[b].1.floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().take(total.saturating_sub(assigned)) {
        counts[i] += 1;
    }
    Ok(quotas.iter().zip(counts).map(|((k, _), c)| ((*k).clone(), c)).collect())
}

/// Draws disjoint train and test sets from per-environment pools without
/// replacement, then shuffles each. Environment tags are kept.
pub fn compose_mixture<R: Rng + ?Sized>(
    pools: &BTreeMap<String, Dataset>,
    spec: &MixtureSpec,
    rng: &mut R,
) -> Result<(Dataset, Dataset)> {
    let train_counts = apportion(spec.train.total, &spec.train.proportions)?;
    let test_counts = apportion(spec.test.total, &spec.test.proportions)?;
    let mut train_parts = Vec::new();
    let mut test_parts = Vec::new();
    let mut names: Vec<&String> = train_counts.keys().chain(test_counts.keys()).collect();
    names.sort();
    names.dedup();
    for name in names {
        let pool = pools.get(name).ok_or_else(|| Error::Config(format!("unknown environment `{name}`")))?;
        let a = train_counts.get(name).copied().unwrap_or(0);
        let b = test_counts.get(name).copied().unwrap_or(0);
        if a + b > pool.n_samples() {
            return Err(Error::InsufficientSamples { env: name.clone(), requested: a + b, available: pool.n_samples() });
        }
        let mut idx: Vec<usize> = (0..pool.n_samples()).collect();
        idx.shuffle(rng);
        let tagged = if pool.env().is_some() { pool.clone() } else { pool.clone().with_env(vec![name.clone(); pool.n_samples()])? };
        train_parts.push(tagged.subset(&idx[..a]));
        test_parts.push(tagged.subset(&idx[a..a + b]));
    }
    let mut finish = |parts: Vec<Dataset>| -> Result<Dataset> {
        let refs: Vec<&Dataset> = parts.iter().collect();
        let all = Dataset::concat(&refs)?;
        let mut order: Vec<usize> = (0..all.n_samples()).collect();
        order.shuffle(rng);
        Ok(all.subset(&order))
    };
    let train = finish(train_parts)?;
    let test = finish(test_parts)?;
    Ok((train, test))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Grouping {
    ByEnv,
    ByLabelEnv,
    /// Keep the dataset's own `group_id` column.
    External,
}

pub fn attach_group_ids(dataset: Dataset, grouping: &Grouping) -> Result<Dataset> {
    let env = || {
        dataset
            .env()
            .map(<[String]>::to_vec)
            .ok_or_else(|| Error::InvalidDataset("grouping by environment needs an env column".into()))
    };
    let ids = match grouping {
        Grouping::ByEnv => env()?,
        Grouping::ByLabelEnv => env()?
            .into_iter()
            .zip(dataset.labels())
            .map(|(e, y)| format!("{e}:{y}"))
            .collect(),
        Grouping::External => {
            if dataset.group_id().is_none() {
                return Err(Error::InvalidDataset("dataset has no group_id column".into()));
            }
            return Ok(dataset);
        }
    };
    dataset.with_group_id(ids)
}

/// Linear-Gaussian SCM with a binary target over a [`CausalGraph`].
///
/// Non-target nodes are `sum(w * parent) + latent terms + N(0, 1)`, with the
/// target entering its children as `2Y - 1`. The target is Bernoulli with
/// probability `sigmoid(2 * (sum(w * parent) + latent terms))`. Every
/// bidirected edge is a hidden standard normal shared by its two endpoints.
/// Intervening replaces each manipulable node's mechanism by its negated
/// parental term plus a shift of 1.5.
#[derive(Debug, Clone)]
pub struct LinearScm {
    graph: CausalGraph,
    order: Vec<usize>,
    parents: Vec<Vec<(usize, f64)>>,
    latents: Vec<Vec<(usize, f64)>>,
    n_latent: usize,
}

impl LinearScm {
    pub fn new<R: Rng + ?Sized>(graph: CausalGraph, rng: &mut R) -> Self {
        let nodes = graph.nodes();
        let idx: BTreeMap<&str, usize> = nodes.iter().enumerate().map(|(i, n)| (n.name.as_str(), i)).collect();
        let mut parents = vec![Vec::new(); nodes.len()];
        let mut latents = vec![Vec::new(); nodes.len()];
        let weight = |rng: &mut R| {
            let m: f64 = rng.random_range(0.7..1.5);
            if rng.random_bool(0.5) { m } else { -m }
        };
        let (directed, bidirected) = graph.edges();
        for (p, c) in directed {
            parents[idx[c.as_str()]].push((idx[p.as_str()], weight(rng)));
        }
        for (k, (a, b)) in bidirected.iter().enumerate() {
            latents[idx[a.as_str()]].push((k, weight(rng)));
            latents[idx[b.as_str()]].push((k, weight(rng)));
        }
        let order = graph.topological_order();
        LinearScm { order, parents, latents, n_latent: bidirected.len(), graph }
    }

    pub fn graph(&self) -> &CausalGraph {
        &self.graph
    }

    /// `n` samples with observed non-target nodes as features, tagged with `env`.
    pub fn sample<R: Rng + ?Sized>(&self, n: usize, intervened: bool, env: &str, rng: &mut R) -> Result<Dataset> {
        let nodes = self.graph.nodes();
        let features: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].observed && !nodes[i].is_target).collect();
        let target = nodes.iter().position(|n| n.is_target).expect("validated target");
        let mut columns = vec![Vec::with_capacity(n); features.len()];
        let mut labels = Vec::with_capacity(n);
        let mut value = vec![0.0; nodes.len()];
        for _ in 0..n {
            let hidden: Vec<f64> = (0..self.n_latent).map(|_| StandardNormal.sample(rng)).collect();
            for &v in &self.order {
                let parental: f64 = self.parents[v].iter().map(|&(p, w)| w * value[p]).sum();
                let latent: f64 = self.latents[v].iter().map(|&(k, w)| w * hidden[k]).sum();
                let noise: f64 = StandardNormal.sample(rng);
                value[v] = if v == target {
                    let y = rng.random_bool(sigmoid(2.0 * (parental + latent)));
                    if y { 1.0 } else { -1.0 }
                } else if intervened && nodes[v].manipulable {
                    -parental + 1.5 + latent + noise
                } else {
                    parental + latent + noise
                };
            }
            for (col, &f) in columns.iter_mut().zip(&features) {
                col.push(value[f]);
            }
            labels.push(u8::from(value[target] > 0.0));
        }
        let names = features.iter().map(|&f| nodes[f].name.clone()).collect();
        Dataset::new(names, columns, labels, Some(vec![env.to_string(); n]), None)
    }
}

/// Random graph with `3..=max_nodes` nodes: edges follow a random topological
/// order with probability 0.4 each, bidirected edges join non-target pairs
/// with probability 0.15, and up to two proper descendants of the target
/// are made manipulable.
pub fn random_scm_graph<R: Rng + ?Sized>(max_nodes: usize, rng: &mut R) -> CausalGraph {
    loop {
        let n = rng.random_range(3..=max_nodes.max(3));
        let target = rng.random_range(0..n);
        let names: Vec<String> = (0..n).map(|i| if i == target { "Y".to_string() } else { format!("V{i}") }).collect();
        let mut directed = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if rng.random_bool(0.4) {
                    directed.push((names[i].clone(), names[j].clone()));
                }
            }
        }
        let mut bidirected = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if i != target && j != target && rng.random_bool(0.15) {
                    bidirected.push((names[i].clone(), names[j].clone()));
                }
            }
        }
        let plain: Vec<NodeSpec> = names
            .iter()
            .enumerate()
            .map(|(i, name)| if i == target { NodeSpec::target(name) } else { NodeSpec::feature(name) })
            .collect();
        let skeleton = CausalGraph::new(plain.clone(), directed.clone(), bidirected.clone()).expect("forward edges");
        let mut below: Vec<String> =
            skeleton.descendants("Y").expect("target").into_iter().filter(|v| v != "Y").collect();
        below.shuffle(rng);
        let k = rng.random_range(0..=below.len().min(2));
        let manip = &below[..k];
        let nodes: Vec<NodeSpec> = plain
            .into_iter()
            .map(|mut s| {
                if manip.contains(&s.name) {
                    s.manipulable = true;
                    s.observed = rng.random_bool(0.5);
                } else if !s.is_target {
                    s.observed = rng.random_bool(0.8);
                }
                s
            })
            .collect();
        let g = CausalGraph::new(nodes, directed, bidirected).expect("manipulable nodes sit below the target");
        if !g.features().is_empty() {
            return g;
        }
    }
}
