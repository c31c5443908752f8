//! Level-wise beam search over rules.
//!
//! Level one scores every single condition of the bin grid. Each later level
//! refines the surviving beam by one condition joined with `and` or `or`.
//! Every scored candidate competes for the global result queue (capacity `Q`)
//! and for the next beam (capacity `w`). Scoring runs in parallel; ranking
//! uses the total order of [`tie_break`], so output does not depend on thread
//! scheduling.

use std::cmp::Ordering;
use std::collections::HashMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bitmask::BitMask;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::regularize::{Candidate, QualityMeasure};
use crate::rules::{build_bins, condition_mask, BinGrid, Condition, Connector, Rule, RuleKey};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BeamConfig {
    pub width: usize,
    pub depth: usize,
    pub result_size: usize,
    pub bins: usize,
    pub seed: u64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        BeamConfig { width: 30, depth: 3, result_size: 10, bins: 8, seed: 0 }
    }
}

impl BeamConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.depth == 0 || self.result_size == 0 {
            return Err(Error::Config("width, depth and result_size must all be at least 1".into()));
        }
        if self.bins < 2 {
            return Err(Error::Config("bins must be at least 2".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredRule {
    pub rule: Rule,
    pub quality: f64,
    pub pos: f64,
    pub neg: f64,
}

/// Quality descending, then length ascending, then lexicographic on the
/// condition sequence (and connectors last).
pub fn tie_break(a: &ScoredRule, b: &ScoredRule) -> Ordering {
    b.quality
        .total_cmp(&a.quality)
        .then(a.rule.len().cmp(&b.rule.len()))
        .then_with(|| a.rule.lex_cmp(&b.rule))
}

/// Residual-weighted covered mass: `(sum of positive residuals, sum of
/// magnitudes of non-positive residuals)` over covered points.
pub fn weighted_counts(coverage: &BitMask, residuals: &[f64]) -> (f64, f64) {
    let (mut p, mut n) = (0.0, 0.0);
    for i in coverage.iter_ones() {
        let r = residuals[i];
        if r > 0.0 {
            p += r;
        } else {
            n -= r;
        }
    }
    (p, n)
}

/// Keeps the `cap` best distinct rules. Rules with the same key have the same
/// coverage and quality, so the survivor of a key is its tie-break-smallest
/// representative.
fn select_top(mut items: Vec<ScoredRule>, cap: usize) -> Vec<ScoredRule> {
    items.sort_by(tie_break);
    let mut seen: HashMap<RuleKey, ()> = HashMap::with_capacity(items.len());
    let mut out = Vec::with_capacity(cap.min(items.len()));
    for item in items {
        if out.len() == cap {
            break;
        }
        if seen.insert(item.rule.key(), ()).is_none() {
            out.push(item);
        }
    }
    out
}

fn score(
    rule: Rule,
    cov: &BitMask,
    residuals: &[f64],
    quality: &dyn QualityMeasure,
) -> ScoredRule {
    let (pos, neg) = weighted_counts(cov, residuals);
    let q = quality.quality(&Candidate { rule: &rule, coverage: cov, pos, neg });
    ScoredRule { rule, quality: q, pos, neg }
}

/// Builds the bin grid from `dataset` and runs [`rule_gen_on_grid`].
pub fn rule_gen(
    dataset: &Dataset,
    residuals: &[f64],
    quality: &dyn QualityMeasure,
    config: &BeamConfig,
) -> Result<Vec<ScoredRule>> {
    let grid = build_bins(dataset, config.bins)?;
    rule_gen_on_grid(dataset, &grid, residuals, quality, config)
}

pub fn rule_gen_on_grid(
    dataset: &Dataset,
    grid: &BinGrid,
    residuals: &[f64],
    quality: &dyn QualityMeasure,
    config: &BeamConfig,
) -> Result<Vec<ScoredRule>> {
    config.validate()?;
    if residuals.len() != dataset.n_samples() {
        return Err(Error::Contract(format!(
            "{} residuals for {} samples",
            residuals.len(),
            dataset.n_samples()
        )));
    }
    if grid.n_features() != dataset.n_features() {
        return Err(Error::Contract("bin grid width differs from the dataset".into()));
    }
    if grid.is_empty() {
        return Err(Error::NoSearchableRule);
    }
    let conditions: Vec<Condition> = grid.conditions();
    let masks: Vec<BitMask> = conditions.par_iter().map(|c| condition_mask(c, dataset)).collect();

    let level: Vec<ScoredRule> = conditions
        .par_iter()
        .zip(&masks)
        .map(|(c, m)| score(Rule::single(*c), m, residuals, quality))
        .collect();
    let mut results = select_top(level.clone(), config.result_size);
    let mut beam = select_top(level, config.width);

    for _ in 1..config.depth {
        let seeds: Vec<(Rule, BitMask)> = beam
            .drain(..)
            .map(|s| {
                let cov = crate::rules::coverage(&s.rule, dataset).expect("grid conditions fit the dataset");
                (s.rule, cov)
            })
            .collect();
        let jobs: Vec<(usize, usize, Connector)> = (0..seeds.len())
            .flat_map(|s| {
                (0..conditions.len())
                    .flat_map(move |c| [Connector::And, Connector::Or].map(move |k| (s, c, k)))
            })
            .collect();
        let level: Vec<ScoredRule> = jobs
            .par_iter()
            .map_init(
                || BitMask::zeros(dataset.n_samples()),
                |buf, &(s, c, conn)| {
                    let (seed, seed_cov) = &seeds[s];
                    buf.combine_from(seed_cov, &masks[c], conn == Connector::And);
                    score(seed.extend(conn, conditions[c]), buf, residuals, quality)
                },
            )
            .collect();
        if level.is_empty() {
            break;
        }
        results.extend(level.iter().cloned());
        results = select_top(results, config.result_size);
        beam = select_top(level, config.width);
    }
    Ok(results)
}
