//! Rule quality measures and the two causal regularizers.
//!
//! Every measure starts from the Laplace estimate of the (residual-weighted)
//! positive and negative mass a rule covers and subtracts `lambda` times a
//! penalty: either a soft feature mask derived from a causal graph, or the
//! within-group variance of the ensemble after adding the candidate rule.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bitmask::BitMask;
use crate::error::{Error, Result};
use crate::rules::Rule;

pub const WEIGHT_FLOOR: f64 = 1e-12;

/// Laplace-smoothed precision `(p + 1) / (p + n + 2)`.
#[inline]
pub fn laplace(p: f64, n: f64) -> f64 {
    (p + 1.0) / (p + n + 2.0)
}

/// Everything a quality measure may inspect about one search candidate.
#[derive(Debug, Clone, Copy)]
pub struct Candidate<'a> {
    pub rule: &'a Rule,
    pub coverage: &'a BitMask,
    /// Residual-weighted positive mass covered.
    pub pos: f64,
    /// Residual-weighted negative mass covered.
    pub neg: f64,
}

pub trait QualityMeasure: Sync {
    fn quality(&self, candidate: &Candidate<'_>) -> f64;
}

/// Plain Laplace estimate.
#[derive(Debug, Clone, Copy, Default)]
pub struct Laplace;

impl QualityMeasure for Laplace {
    fn quality(&self, c: &Candidate<'_>) -> f64 {
        laplace(c.pos, c.neg)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Mean,
    Max,
}

/// Per-feature soft selection mask. Invariant features always carry `beta = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SoftMask {
    pub mu: Vec<f64>,
    pub sigma: f64,
    pub beta: Vec<f64>,
    pub invariant: Vec<bool>,
}

impl SoftMask {
    /// Mask with `beta = clamp(mu)` (no noise drawn yet).
    pub fn new(mu: Vec<f64>, sigma: f64, invariant: Vec<bool>) -> Result<Self> {
        if mu.len() != invariant.len() {
            return Err(Error::Contract("mu and invariant flags differ in length".into()));
        }
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::Config(format!("mask sigma must be finite and >= 0, got {sigma}")));
        }
        let beta = mu
            .iter()
            .zip(&invariant)
            .map(|(&m, &inv)| if inv { 0.0 } else { m.clamp(0.0, 1.0) })
            .collect();
        Ok(SoftMask { mu, sigma, beta, invariant })
    }

    /// One Gaussian draw per feature: `beta = max(0, min(1, mu + eps))`,
    /// `eps ~ N(0, sigma^2)`.
    pub fn redraw<R: Rng + ?Sized>(&mut self, rng: &mut R) {
        let normal = Normal::new(0.0, self.sigma.max(0.0)).expect("finite sigma");
        for ((b, &m), &inv) in self.beta.iter_mut().zip(&self.mu).zip(&self.invariant) {
            let noise = if self.sigma > 0.0 { normal.sample(rng) } else { 0.0 };
            *b = if inv { 0.0 } else { (m + noise).clamp(0.0, 1.0) };
        }
    }

    /// Penalty of a rule: mean (or max) beta over its distinct features.
    pub fn rule_penalty(&self, rule: &Rule, aggregation: Aggregation) -> f64 {
        let features = rule.features();
        let betas = features.iter().map(|&f| self.beta.get(f).copied().unwrap_or(1.0));
        match aggregation {
            Aggregation::Mean => betas.sum::<f64>() / features.len() as f64,
            Aggregation::Max => betas.fold(0.0, f64::max),
        }
    }
}

/// Mask means from mutual information: `mu_s = min(1, I(X_s;Y) / mean_inv I)`
/// for variant features, 0 for invariant ones. Without invariant features
/// every variant mean falls back to 1. Returns whether that fallback fired.
pub fn calibrate_mu(invariant: &[bool], mi: &[f64]) -> (Vec<f64>, bool) {
    let inv: Vec<f64> = mi.iter().zip(invariant).filter(|(_, &i)| i).map(|(&m, _)| m).collect();
    if inv.is_empty() {
        return (invariant.iter().map(|&i| if i { 0.0 } else { 1.0 }).collect(), true);
    }
    let mean_inv = (inv.iter().sum::<f64>() / inv.len() as f64).max(WEIGHT_FLOOR);
    let mu = mi
        .iter()
        .zip(invariant)
        .map(|(&m, &i)| if i { 0.0 } else { (m / mean_inv).min(1.0) })
        .collect();
    (mu, false)
}

/// Calibrates mask means from MI scores and draws one noisy mask.
pub fn draw_mask<R: Rng + ?Sized>(
    invariant: &[bool],
    mi_scores: &[f64],
    sigma: f64,
    rng: &mut R,
) -> Result<SoftMask> {
    if mi_scores.len() != invariant.len() {
        return Err(Error::Contract("one MI score per feature required".into()));
    }
    if mi_scores.iter().any(|&m| !(m >= 0.0)) {
        return Err(Error::Contract("MI scores must be nonnegative".into()));
    }
    let (mu, fallback) = calibrate_mu(invariant, mi_scores);
    if fallback {
        log::warn!("no invariant features; every variant feature gets mask mean 1");
    }
    let mut mask = SoftMask::new(mu, sigma, invariant.to_vec())?;
    mask.redraw(rng);
    Ok(mask)
}

pub fn masked_quality(rule: &Rule, p: f64, n: f64, mask: &SoftMask, lambda: f64, aggregation: Aggregation) -> f64 {
    if lambda == 0.0 {
        return laplace(p, n);
    }
    laplace(p, n) - lambda * mask.rule_penalty(rule, aggregation)
}

pub fn variance_quality(p: f64, n: f64, penalty: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        return laplace(p, n);
    }
    laplace(p, n) - lambda * penalty
}

#[derive(Debug, Clone)]
pub struct MaskedLaplace {
    pub mask: SoftMask,
    pub lambda: f64,
    pub aggregation: Aggregation,
}

impl QualityMeasure for MaskedLaplace {
    fn quality(&self, c: &Candidate<'_>) -> f64 {
        masked_quality(c.rule, c.pos, c.neg, &self.mask, self.lambda, self.aggregation)
    }
}

/// Plug-in mutual information (nats) between an equal-frequency-binned
/// feature and a binary label.
pub fn mutual_information(column: &[f64], labels: &[u8], bins: usize) -> Result<f64> {
    if bins < 2 {
        return Err(Error::Contract("mutual information needs at least 2 bins".into()));
    }
    if column.len() != labels.len() {
        return Err(Error::Contract("feature and label lengths differ".into()));
    }
    let n = column.len();
    if n == 0 {
        return Err(Error::Contract("mutual information needs at least one sample".into()));
    }
    let mut sorted = column.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cuts = crate::rules::quantile_cut_points(&sorted, bins);
    if cuts.is_empty() {
        return Ok(0.0);
    }
    let k = cuts.len() + 1;
    let mut joint = vec![[0usize; 2]; k];
    for (&v, &y) in column.iter().zip(labels) {
        let b = cuts.partition_point(|&t| t < v);
        joint[b][usize::from(y)] += 1;
    }
    let nf = n as f64;
    let py = [0, 1].map(|y| joint.iter().map(|c| c[y]).sum::<usize>() as f64 / nf);
    let mut mi = 0.0;
    for cell in &joint {
        let px = (cell[0] + cell[1]) as f64 / nf;
        for y in 0..2 {
            if cell[y] > 0 {
                let pxy = cell[y] as f64 / nf;
                mi += pxy * (pxy / (px * py[y])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Groups keyed by `(label, group id)`, numbered in sorted key order.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupIndex {
    assignment: Vec<usize>,
    sizes: Vec<usize>,
    keys: Vec<(u8, String)>,
}

impl GroupIndex {
    pub fn new(labels: &[u8], group_ids: &[String]) -> Result<Self> {
        if labels.len() != group_ids.len() {
            return Err(Error::Contract("one group id per sample required".into()));
        }
        let mut ids: BTreeMap<(u8, &str), usize> = BTreeMap::new();
        for (&y, g) in labels.iter().zip(group_ids) {
            ids.insert((y, g.as_str()), 0);
        }
        if ids.is_empty() {
            return Err(Error::Contract("at least one group required".into()));
        }
        let mut keys = Vec::with_capacity(ids.len());
        for (i, (k, v)) in ids.iter_mut().enumerate() {
            *v = i;
            keys.push((k.0, k.1.to_string()));
        }
        let assignment: Vec<usize> =
            labels.iter().zip(group_ids).map(|(&y, g)| ids[&(y, g.as_str())]).collect();
        let mut sizes = vec![0; keys.len()];
        for &a in &assignment {
            sizes[a] += 1;
        }
        Ok(GroupIndex { assignment, sizes, keys })
    }

    pub fn n_groups(&self) -> usize {
        self.sizes.len()
    }

    pub fn assignment(&self) -> &[usize] {
        &self.assignment
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn keys(&self) -> &[(u8, String)] {
        &self.keys
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarianceMode {
    /// Variance of the exponential loss.
    #[default]
    Loss,
    /// Variance of the sigmoid-mapped score.
    Score,
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn signed_label(y: u8) -> f64 {
    if y == 1 { 1.0 } else { -1.0 }
}

fn mean_group_variance(s1: &[f64], s2: &[f64], sizes: &[usize]) -> f64 {
    let q = sizes.len() as f64;
    let total: f64 = s1
        .iter()
        .zip(s2)
        .zip(sizes)
        .map(|((&a, &b), &n)| {
            let n = n as f64;
            let mean = a / n;
            (b / n - mean * mean).max(0.0)
        })
        .sum();
    total / q
}

/// Loss-variance penalty `C_L` of adding `alpha * r` to the ensemble, raised
/// to `nu`. Uses the cached per-sample losses `exp(-y F)` of the current
/// ensemble and the factorization `exp(-y (F + a r)) = exp(-y F) exp(-y a r)`;
/// the sign of `y` is constant within a group since groups are keyed by label.
pub fn group_variance_loss(exp_cache: &[f64], groups: &GroupIndex, alpha: f64, coverage: &BitMask, nu: f64) -> f64 {
    let q = groups.n_groups();
    let (mut s1, mut s2) = (vec![0.0; q], vec![0.0; q]);
    let (mut c1, mut c2) = (vec![0.0; q], vec![0.0; q]);
    for (i, (&l, &g)) in exp_cache.iter().zip(groups.assignment()).enumerate() {
        s1[g] += l;
        s2[g] += l * l;
        if coverage.get(i) {
            c1[g] += l;
            c2[g] += l * l;
        }
    }
    loss_variance_from_sums(&s1, &s2, &c1, &c2, groups, alpha, nu)
}

/// `s*` are per-group sums of the cached loss and its square over all
/// members, `c*` the same over covered members.
fn loss_variance_from_sums(
    s1: &[f64],
    s2: &[f64],
    c1: &[f64],
    c2: &[f64],
    groups: &GroupIndex,
    alpha: f64,
    nu: f64,
) -> f64 {
    let q = groups.n_groups();
    let mut t1 = vec![0.0; q];
    let mut t2 = vec![0.0; q];
    for (g, (y, _)) in groups.keys().iter().enumerate() {
        let ya = signed_label(*y) * alpha;
        let (hit, miss) = ((-ya).exp(), ya.exp());
        t1[g] = hit * c1[g] + miss * (s1[g] - c1[g]);
        t2[g] = hit * hit * c2[g] + miss * miss * (s2[g] - c2[g]);
    }
    mean_group_variance(&t1, &t2, groups.sizes()).powf(nu)
}

/// Score-variance penalty `C_F`: within-group variance of
/// `sigmoid(F + alpha * r)`, averaged over groups and raised to `nu`.
pub fn group_variance_score(
    scores: &[f64],
    groups: &GroupIndex,
    alpha: f64,
    coverage: &BitMask,
    nu: f64,
) -> f64 {
    let q = groups.n_groups();
    let (mut s1, mut s2) = (vec![0.0; q], vec![0.0; q]);
    for (i, (&f, &g)) in scores.iter().zip(groups.assignment()).enumerate() {
        let r = if coverage.get(i) { 1.0 } else { -1.0 };
        let v = sigmoid(f + alpha * r);
        s1[g] += v;
        s2[g] += v * v;
    }
    mean_group_variance(&s1, &s2, groups.sizes()).powf(nu)
}

/// Closed-form boosting coefficient
/// `shrinkage * 0.5 * ln(W_agree / W_disagree)`, both floored at 1e-12.
#[inline]
pub fn alpha_from_weights(agree: f64, disagree: f64, shrinkage: f64) -> f64 {
    shrinkage * 0.5 * (agree.max(WEIGHT_FLOOR) / disagree.max(WEIGHT_FLOOR)).ln()
}

/// Round-frozen state for the variance penalty: the current scores, their
/// cached exponential losses and per-group loss sums.
#[derive(Debug, Clone)]
pub struct VariancePenalty<'a> {
    pub scores: &'a [f64],
    pub exp_cache: &'a [f64],
    pub labels: &'a [u8],
    pub groups: &'a GroupIndex,
    pub shrinkage: f64,
    pub nu: f64,
    pub mode: VarianceMode,
    weight_pos: f64,
    weight_neg: f64,
    s1: Vec<f64>,
    s2: Vec<f64>,
}

impl<'a> VariancePenalty<'a> {
    pub fn new(
        scores: &'a [f64],
        exp_cache: &'a [f64],
        labels: &'a [u8],
        groups: &'a GroupIndex,
        shrinkage: f64,
        nu: f64,
        mode: VarianceMode,
    ) -> Self {
        let q = groups.n_groups();
        let (mut s1, mut s2) = (vec![0.0; q], vec![0.0; q]);
        let (mut wp, mut wn) = (0.0, 0.0);
        for ((&l, &g), &y) in exp_cache.iter().zip(groups.assignment()).zip(labels) {
            s1[g] += l;
            s2[g] += l * l;
            if y == 1 { wp += l } else { wn += l }
        }
        VariancePenalty {
            scores,
            exp_cache,
            labels,
            groups,
            shrinkage,
            nu,
            mode,
            weight_pos: wp,
            weight_neg: wn,
            s1,
            s2,
        }
    }

    /// Coefficient the boosting step would assign to this coverage.
    pub fn candidate_alpha(&self, coverage: &BitMask) -> f64 {
        let (mut cp, mut cn) = (0.0, 0.0);
        for i in coverage.iter_ones() {
            if self.labels[i] == 1 { cp += self.exp_cache[i] } else { cn += self.exp_cache[i] }
        }
        let agree = cp + (self.weight_neg - cn);
        let disagree = (self.weight_pos - cp) + cn;
        alpha_from_weights(agree, disagree, self.shrinkage)
    }

    pub fn penalty(&self, coverage: &BitMask) -> f64 {
        let alpha = self.candidate_alpha(coverage);
        match self.mode {
            VarianceMode::Loss => {
                let q = self.groups.n_groups();
                let (mut c1, mut c2) = (vec![0.0; q], vec![0.0; q]);
                let assign = self.groups.assignment();
                for i in coverage.iter_ones() {
                    let l = self.exp_cache[i];
                    c1[assign[i]] += l;
                    c2[assign[i]] += l * l;
                }
                loss_variance_from_sums(&self.s1, &self.s2, &c1, &c2, self.groups, alpha, self.nu)
            }
            VarianceMode::Score => group_variance_score(self.scores, self.groups, alpha, coverage, self.nu),
        }
    }
}

pub struct VarianceLaplace<'a> {
    pub penalty: VariancePenalty<'a>,
    pub lambda: f64,
}

impl QualityMeasure for VarianceLaplace<'_> {
    fn quality(&self, c: &Candidate<'_>) -> f64 {
        if self.lambda == 0.0 {
            return laplace(c.pos, c.neg);
        }
        variance_quality(c.pos, c.neg, self.penalty.penalty(c.coverage), self.lambda)
    }
}
