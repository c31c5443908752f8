//! Causal graphs with latent and manipulable nodes, and the invariant feature
//! decomposition used to build soft feature masks.
//!
//! Connected components are taken over the undirected skeleton (directed and
//! bidirected edges) of the ancestral set with the target removed. Removing
//! the target is what separates a feature that only talks to `Y` from a
//! feature sharing a component with a manipulable mediator.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

pub type NameSet = BTreeSet<String>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    #[serde(default = "default_true")]
    pub observed: bool,
    #[serde(default)]
    pub manipulable: bool,
    #[serde(default)]
    pub is_target: bool,
}

fn default_true() -> bool {
    true
}

impl NodeSpec {
    pub fn feature(name: &str) -> Self {
        NodeSpec { name: name.into(), observed: true, manipulable: false, is_target: false }
    }

    pub fn target(name: &str) -> Self {
        NodeSpec { name: name.into(), observed: true, manipulable: false, is_target: true }
    }

    pub fn latent(name: &str) -> Self {
        NodeSpec { name: name.into(), observed: false, manipulable: false, is_target: false }
    }

    pub fn manipulable(mut self) -> Self {
        self.manipulable = true;
        self
    }

    pub fn hidden(mut self) -> Self {
        self.observed = false;
        self
    }
}

/// Serialized form, matching the graph file layout.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct GraphFile {
    nodes: Vec<NodeSpec>,
    #[serde(default)]
    directed: Vec<(String, String)>,
    #[serde(default)]
    bidirected: Vec<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct CausalGraph {
    nodes: Vec<NodeSpec>,
    index: BTreeMap<String, usize>,
    directed: Vec<(String, String)>,
    bidirected: Vec<(String, String)>,
    parents: Vec<Vec<usize>>,
    children: Vec<Vec<usize>>,
    siblings: Vec<Vec<usize>>,
    target: usize,
}

impl CausalGraph {
    /// Validates and indexes the graph. Rejects cycles, dangling edge
    /// endpoints, anything but exactly one observed target, and manipulable
    /// parents of the target.
    pub fn new(
        nodes: Vec<NodeSpec>,
        directed: Vec<(String, String)>,
        bidirected: Vec<(String, String)>,
    ) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.name.clone(), i).is_some() {
                return Err(Error::InvalidGraph(format!("duplicate node `{}`", n.name)));
            }
        }
        let targets: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].is_target).collect();
        let target = match targets.as_slice() {
            [t] => *t,
            [] => return Err(Error::InvalidGraph("no target node".into())),
            _ => return Err(Error::InvalidGraph("more than one target node".into())),
        };
        if !nodes[target].observed {
            return Err(Error::InvalidGraph("the target node must be observed".into()));
        }
        if nodes[target].manipulable {
            return Err(Error::InvalidGraph("the target node cannot be manipulable".into()));
        }
        let lookup = |name: &str| {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::InvalidGraph(format!("edge endpoint `{name}` is not a node")))
        };
        let n = nodes.len();
        let mut parents = vec![Vec::new(); n];
        let mut children = vec![Vec::new(); n];
        let mut siblings = vec![Vec::new(); n];
        for (p, c) in &directed {
            let (pi, ci) = (lookup(p)?, lookup(c)?);
            if pi == ci {
                return Err(Error::InvalidGraph(format!("self loop on `{p}`")));
            }
            parents[ci].push(pi);
            children[pi].push(ci);
        }
        for (a, b) in &bidirected {
            let (ai, bi) = (lookup(a)?, lookup(b)?);
            if ai == bi {
                return Err(Error::InvalidGraph(format!("bidirected self loop on `{a}`")));
            }
            siblings[ai].push(bi);
            siblings[bi].push(ai);
        }
        for list in parents.iter_mut().chain(children.iter_mut()).chain(siblings.iter_mut()) {
            list.sort_unstable();
            list.dedup();
        }
        if let Some(&bad) = parents[target].iter().find(|&&p| nodes[p].manipulable) {
            return Err(Error::InvalidGraph(format!(
                "manipulable node `{}` is a parent of the target",
                nodes[bad].name
            )));
        }
        let g = CausalGraph { nodes, index, directed, bidirected, parents, children, siblings, target };
        g.check_acyclic()?;
        Ok(g)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: GraphFile = serde_json::from_str(text)?;
        CausalGraph::new(file.nodes, file.directed, file.bidirected)
    }

    pub fn from_path(path: impl AsRef<std::path::Path>) -> Result<Self> {
        CausalGraph::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        let file = GraphFile {
            nodes: self.nodes.clone(),
            directed: self.directed.clone(),
            bidirected: self.bidirected.clone(),
        };
        serde_json::to_string_pretty(&file).expect("graph serializes")
    }

    fn check_acyclic(&self) -> Result<()> {
        if self.topological_order().len() == self.nodes.len() {
            Ok(())
        } else {
            Err(Error::InvalidGraph("directed edges contain a cycle".into()))
        }
    }

    /// Directed and bidirected edges as declared.
    pub fn edges(&self) -> (&[(String, String)], &[(String, String)]) {
        (&self.directed, &self.bidirected)
    }

    /// Node indices (into [`nodes`](Self::nodes)) with parents before children.
    pub fn topological_order(&self) -> Vec<usize> {
        let mut indegree: Vec<usize> = self.parents.iter().map(Vec::len).collect();
        let mut ready: std::collections::BTreeSet<usize> = (0..self.nodes.len()).filter(|&i| indegree[i] == 0).collect();
        let mut out = Vec::with_capacity(self.nodes.len());
        while let Some(v) = ready.pop_first() {
            out.push(v);
            for &c in &self.children[v] {
                indegree[c] -= 1;
                if indegree[c] == 0 {
                    ready.insert(c);
                }
            }
        }
        out
    }

    pub fn nodes(&self) -> &[NodeSpec] {
        &self.nodes
    }

    pub fn node(&self, name: &str) -> Result<&NodeSpec> {
        self.idx(name).map(|i| &self.nodes[i])
    }

    pub fn target(&self) -> &str {
        &self.nodes[self.target].name
    }

    /// Observed non-target nodes.
    pub fn features(&self) -> NameSet {
        self.nodes
            .iter()
            .filter(|n| n.observed && !n.is_target)
            .map(|n| n.name.clone())
            .collect()
    }

    pub fn manipulable(&self) -> NameSet {
        self.nodes.iter().filter(|n| n.manipulable).map(|n| n.name.clone()).collect()
    }

    fn idx(&self, name: &str) -> Result<usize> {
        self.index.get(name).copied().ok_or_else(|| Error::UnknownNode(name.to_string()))
    }

    fn closure(&self, start: impl IntoIterator<Item = usize>, next: &[Vec<usize>]) -> NameSet {
        let mut seen = vec![false; self.nodes.len()];
        let mut stack: Vec<usize> = start.into_iter().collect();
        for &s in &stack {
            seen[s] = true;
        }
        while let Some(v) = stack.pop() {
            for &u in &next[v] {
                if !seen[u] {
                    seen[u] = true;
                    stack.push(u);
                }
            }
        }
        (0..self.nodes.len()).filter(|&i| seen[i]).map(|i| self.nodes[i].name.clone()).collect()
    }

    /// Reflexive transitive closure of parents.
    pub fn ancestors<S: AsRef<str>>(&self, names: &[S]) -> Result<NameSet> {
        let start = names.iter().map(|n| self.idx(n.as_ref())).collect::<Result<Vec<_>>>()?;
        Ok(self.closure(start, &self.parents))
    }

    /// Reflexive transitive closure of children.
    pub fn descendants(&self, name: &str) -> Result<NameSet> {
        Ok(self.closure([self.idx(name)?], &self.children))
    }

    /// Connected components of the skeleton induced on `restriction` minus the
    /// target. Components are sorted internally and listed by their smallest
    /// member name.
    pub fn c_components(&self, restriction: &NameSet) -> Result<Vec<NameSet>> {
        if !restriction.contains(self.target()) {
            return Err(Error::Contract(format!(
                "restriction must contain the target `{}`",
                self.target()
            )));
        }
        let members: Vec<usize> = restriction
            .iter()
            .map(|n| self.idx(n))
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .filter(|&i| i != self.target)
            .collect();
        let mut inside = vec![false; self.nodes.len()];
        for &m in &members {
            inside[m] = true;
        }
        let mut comp = vec![usize::MAX; self.nodes.len()];
        let mut components = Vec::new();
        for &m in &members {
            if comp[m] != usize::MAX {
                continue;
            }
            let id = components.len();
            let mut set = NameSet::new();
            let mut stack = vec![m];
            comp[m] = id;
            while let Some(v) = stack.pop() {
                set.insert(self.nodes[v].name.clone());
                let neighbours = self.parents[v].iter().chain(&self.children[v]).chain(&self.siblings[v]);
                for &u in neighbours {
                    if inside[u] && comp[u] == usize::MAX {
                        comp[u] = id;
                        stack.push(u);
                    }
                }
            }
            components.push(set);
        }
        components.sort();
        Ok(components)
    }

    /// Splits observed features into invariant and variant sets.
    ///
    /// For each component `C` of `An(X ∪ Y)`: with no manipulable member all
    /// observed features of `C` are invariant; otherwise, if `C` holds no
    /// descendant of the target, its observed non-manipulable features are
    /// invariant; else every observed feature of `C` is variant.
    pub fn decompose_invariant(&self) -> Result<Decomposition> {
        let features = self.features();
        let mut start: Vec<&str> = features.iter().map(String::as_str).collect();
        start.push(self.target());
        let w = self.ancestors(&start)?;
        let components = self.c_components(&w)?;
        let manipulable = self.manipulable();
        let de_y = self.descendants(self.target())?;
        let mut invariant = NameSet::new();
        let mut variant = NameSet::new();
        for c in &components {
            let observed = c.iter().filter(|n| features.contains(*n));
            if c.is_disjoint(&manipulable) {
                invariant.extend(observed.cloned());
            } else if c.is_disjoint(&de_y) {
                for n in observed {
                    if manipulable.contains(n) {
                        variant.insert(n.clone());
                    } else {
                        invariant.insert(n.clone());
                    }
                }
            } else {
                variant.extend(observed.cloned());
            }
        }
        let all_variant = invariant.is_empty() && !variant.is_empty();
        if all_variant {
            log::warn!("every feature is variant; regularized search falls back to unmasked search");
        }
        Ok(Decomposition { invariant, variant, components, all_variant })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decomposition {
    pub invariant: NameSet,
    pub variant: NameSet,
    pub components: Vec<NameSet>,
    /// Set when no feature is invariant.
    #[serde(default)]
    pub all_variant: bool,
}

impl Decomposition {
    /// Per-feature invariance flags aligned with `feature_names`. Names the
    /// graph does not mention are treated as variant.
    pub fn invariant_flags(&self, feature_names: &[String]) -> Vec<bool> {
        feature_names.iter().map(|n| self.invariant.contains(n)).collect()
    }
}

/// Result of the empirical invariance check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftScore {
    /// Max over environment pairs of the bin-mass-weighted mean of
    /// `|P(Y=1 | bin, e) - P(Y=1 | bin, e')|`.
    pub score: f64,
    /// Bins left out because some environment had no sample in them.
    pub skipped_bins: Vec<usize>,
}

/// Compares binned `P(Y | feature)` across environments; near zero means the
/// conditional looks environment-stable.
pub fn check_invariance_empirically(dataset: &Dataset, feature: &str, bins: usize) -> Result<ShiftScore> {
    let f = dataset
        .feature_index(feature)
        .ok_or_else(|| Error::UnknownNode(feature.to_string()))?;
    let env = dataset
        .env()
        .ok_or_else(|| Error::InvalidDataset("dataset has no env column".into()))?;
    let env_names = dataset.env_names();
    if env_names.len() < 2 {
        return Err(Error::Contract("at least two environments are required".into()));
    }
    let col = dataset.column(f);
    let mut sorted = col.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cuts = crate::rules::quantile_cut_points(&sorted, bins.max(2));
    let k = cuts.len() + 1;
    let env_id: BTreeMap<&str, usize> = env_names.iter().enumerate().map(|(i, e)| (e.as_str(), i)).collect();
    // counts[e][b] = (total, positives)
    let mut counts = vec![vec![(0usize, 0usize); k]; env_names.len()];
    let mut mass = vec![0usize; k];
    for ((&v, &y), e) in col.iter().zip(dataset.labels()).zip(env) {
        let b = cuts.partition_point(|&t| t < v);
        let cell = &mut counts[env_id[e.as_str()]][b];
        cell.0 += 1;
        cell.1 += usize::from(y);
        mass[b] += 1;
    }
    let skipped: Vec<usize> = (0..k).filter(|&b| counts.iter().any(|c| c[b].0 == 0)).collect();
    let usable: Vec<usize> = (0..k).filter(|b| !skipped.contains(b)).collect();
    let usable_mass: usize = usable.iter().map(|&b| mass[b]).sum();
    let mut score: f64 = 0.0;
    for a in 0..env_names.len() {
        for b2 in a + 1..env_names.len() {
            let mut tv = 0.0;
            for &b in &usable {
                let pa = counts[a][b].1 as f64 / counts[a][b].0 as f64;
                let pb = counts[b2][b].1 as f64 / counts[b2][b].0 as f64;
                tv += mass[b] as f64 * (pa - pb).abs();
            }
            if usable_mass > 0 {
                score = score.max(tv / usable_mass as f64);
            }
        }
    }
    Ok(ShiftScore { score, skipped_bins: skipped })
}
