//! Per-environment evaluation and report files.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::boost::RuleEnsemble;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::regularize::mutual_information;
use crate::rules::{coverage, Rule};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Loss {
    #[default]
    ZeroOne,
    Exponential,
    Logistic,
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 35.0 { x } else { x.exp().ln_1p() }
}

pub fn mean_loss(scores: &[f64], labels: &[u8], loss: Loss) -> f64 {
    let total: f64 = scores
        .iter()
        .zip(labels)
        .map(|(&f, &y)| {
            let s = if y == 1 { f } else { -f };
            match loss {
                Loss::ZeroOne => f64::from(u8::from(u8::from(f > 0.0) != y)),
                Loss::Exponential => (-s.clamp(-50.0, 50.0)).exp(),
                Loss::Logistic => softplus(-s),
            }
        })
        .sum();
    total / labels.len() as f64
}

pub fn accuracy(scores: &[f64], labels: &[u8]) -> f64 {
    1.0 - mean_loss(scores, labels, Loss::ZeroOne)
}

/// Mean loss per environment; empty environments are skipped with a warning.
pub fn per_env_loss(ensemble: &RuleEnsemble, envs: &BTreeMap<String, Dataset>, loss: Loss) -> Result<BTreeMap<String, f64>> {
    let mut out = BTreeMap::new();
    for (name, d) in envs {
        if d.is_empty() {
            log::warn!("environment `{name}` is empty; skipped");
            continue;
        }
        out.insert(name.clone(), mean_loss(&ensemble.scores(d)?, d.labels(), loss));
    }
    Ok(out)
}

/// Worst-environment mean loss.
pub fn robustness(ensemble: &RuleEnsemble, envs: &BTreeMap<String, Dataset>, loss: Loss) -> Result<f64> {
    let losses = per_env_loss(ensemble, envs, loss)?;
    losses
        .values()
        .copied()
        .reduce(f64::max)
        .ok_or_else(|| Error::Contract("robustness needs at least one non-empty environment".into()))
}

/// `(tpr, fpr)` of a rule on true labels; a rate is `None` when its class is
/// absent.
pub fn rule_tpr_fpr(rule: &Rule, dataset: &Dataset) -> Result<(Option<f64>, Option<f64>)> {
    let cov = coverage(rule, dataset)?;
    let (mut tp, mut fp) = (0usize, 0usize);
    for i in cov.iter_ones() {
        if dataset.labels()[i] == 1 { tp += 1 } else { fp += 1 }
    }
    let pos = dataset.positives();
    let neg = dataset.n_samples() - pos;
    let rate = |hit: usize, total: usize| (total > 0).then(|| hit as f64 / total as f64);
    Ok((rate(tp, pos), rate(fp, neg)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub round: usize,
    pub split: String,
    pub env: String,
    pub accuracy: f64,
}

/// Label used for rows pooled over every environment of a split.
pub const ALL_ENVS: &str = "all";

/// Accuracy of every prefix ensemble (round 0 is the empty ensemble) on each
/// split, pooled and per environment.
pub fn accuracy_curves(ensemble: &RuleEnsemble, splits: &[(&str, &Dataset)]) -> Result<Vec<CurveRow>> {
    let mut rows = Vec::new();
    for (split, data) in splits {
        let traj = ensemble.score_trajectory(data)?;
        let mut groups: Vec<(String, Vec<usize>)> = vec![(ALL_ENVS.to_string(), (0..data.n_samples()).collect())];
        if let Some(env) = data.env() {
            let mut by: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            for (i, e) in env.iter().enumerate() {
                by.entry(e.as_str()).or_default().push(i);
            }
            groups.extend(by.into_iter().map(|(e, idx)| (e.to_string(), idx)));
        }
        for (round, scores) in traj.iter().enumerate() {
            for (env, idx) in &groups {
                let hits = idx.iter().filter(|&&i| u8::from(scores[i] > 0.0) == data.labels()[i]).count();
                rows.push(CurveRow {
                    round,
                    split: split.to_string(),
                    env: env.clone(),
                    accuracy: hits as f64 / idx.len().max(1) as f64,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_curves_csv<W: Write>(rows: &[CurveRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Environments of `test` whose share of `train` is below `threshold`.
pub fn ood_envs(train: &Dataset, test: &Dataset, threshold: f64) -> Vec<String> {
    let n = train.n_samples().max(1) as f64;
    let share = |e: &str| train.env().map_or(0, |t| t.iter().filter(|x| *x == e).count()) as f64 / n;
    test.env_names().into_iter().filter(|e| share(e) < threshold).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub exp_loss: f64,
    pub logistic_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitReport {
    pub pooled: EnvMetrics,
    pub envs: BTreeMap<String, EnvMetrics>,
    /// Worst-environment zero-one loss.
    pub worst_env_loss: f64,
    pub worst_env_accuracy: f64,
}

fn env_metrics(scores: &[f64], labels: &[u8]) -> EnvMetrics {
    EnvMetrics {
        n: labels.len(),
        accuracy: accuracy(scores, labels),
        exp_loss: mean_loss(scores, labels, Loss::Exponential),
        logistic_loss: mean_loss(scores, labels, Loss::Logistic),
    }
}

pub fn split_report(ensemble: &RuleEnsemble, data: &Dataset) -> Result<SplitReport> {
    let scores = ensemble.scores(data)?;
    let pooled = env_metrics(&scores, data.labels());
    let mut envs = BTreeMap::new();
    if let Some(env) = data.env() {
        let mut by: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
        for (i, e) in env.iter().enumerate() {
            by.entry(e.as_str()).or_default().push(i);
        }
        for (e, idx) in by {
            let s: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            let y: Vec<u8> = idx.iter().map(|&i| data.labels()[i]).collect();
            envs.insert(e.to_string(), env_metrics(&s, &y));
        }
    }
    let worst = envs.values().map(|m| m.accuracy).fold(pooled.accuracy, f64::min);
    Ok(SplitReport { pooled, envs, worst_env_loss: 1.0 - worst, worst_env_accuracy: worst })
}

/// Per-rule TPR/FPR table in long form: one row per rule, split and env.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleRow {
    pub rank: usize,
    pub alpha: f64,
    pub rule: String,
    pub split: String,
    pub env: String,
    pub tpr: Option<f64>,
    pub fpr: Option<f64>,
}

/// Rows for the `top` aggregated terms by |alpha|.
pub fn rule_report(ensemble: &RuleEnsemble, splits: &[(&str, &Dataset)], top: usize) -> Result<Vec<RuleRow>> {
    let mut rows = Vec::new();
    for (rank, term) in ensemble.aggregated_terms().into_iter().take(top).enumerate() {
        let text = term.rule.to_infix(&ensemble.feature_names);
        for (split, data) in splits {
            let mut parts: Vec<(String, Dataset)> = vec![(ALL_ENVS.to_string(), (*data).clone())];
            if data.env().is_some() {
                parts.extend(data.split_by_env()?);
            }
            for (env, d) in parts {
                let (tpr, fpr) = rule_tpr_fpr(&term.rule, &d)?;
                rows.push(RuleRow {
                    rank: rank + 1,
                    alpha: term.alpha,
                    rule: text.clone(),
                    split: split.to_string(),
                    env,
                    tpr,
                    fpr,
                });
            }
        }
    }
    Ok(rows)
}

pub fn write_rules_csv<W: Write>(rows: &[RuleRow], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Mean MI of variant features over mean MI of invariant features.
pub fn mi_ratio(dataset: &Dataset, invariant: &[bool], bins: usize) -> Result<f64> {
    let (mut inv, mut var) = (Vec::new(), Vec::new());
    for (f, &is_inv) in invariant.iter().enumerate() {
        let mi = mutual_information(dataset.column(f), dataset.labels(), bins)?;
        if is_inv { inv.push(mi) } else { var.push(mi) }
    }
    if inv.is_empty() || var.is_empty() {
        return Err(Error::Contract("the MI ratio needs both invariant and variant features".into()));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(mean(&var) / mean(&inv).max(1e-12))
}

fn average_ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut ranks = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Contract("spearman needs two equal-length samples of size >= 2".into()));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Ok(0.0);
    }
    Ok(cov / (va * vb).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boost::Term;
    use crate::rules::{Condition, Op};
    use proptest::prelude::*;

    fn line(n: usize) -> Dataset {
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64]).collect();
        Dataset::from_rows(&rows, (0..n).map(|i| u8::from(i >= n / 2)).collect()).unwrap()
    }

    fn ensemble(t: f64, alpha: f64) -> RuleEnsemble {
        let mut e = RuleEnsemble::empty(vec!["x1".into()]);
        e.terms.push(Term { alpha, rule: Rule::single(Condition::new(0, Op::Gt, t)) });
        e
    }

    #[test]
    fn robustness_takes_the_worst_environment() {
        let e = ensemble(4.5, 1.0);
        // errors: env a none, env b 1 of 2, env c 1 of 4
        let mk = |xs: &[f64], ys: &[u8]| {
            Dataset::from_rows(&xs.iter().map(|&x| vec![x]).collect::<Vec<_>>(), ys.to_vec()).unwrap()
        };
        let envs: BTreeMap<String, Dataset> = [
            ("a".to_string(), mk(&[0.0, 9.0], &[0, 1])),
            ("b".to_string(), mk(&[0.0, 9.0], &[1, 1])),
            ("c".to_string(), mk(&[0.0, 1.0, 8.0, 9.0], &[0, 0, 0, 1])),
        ]
        .into();
        assert_eq!(robustness(&e, &envs, Loss::ZeroOne).unwrap(), 0.5);
        let single: BTreeMap<String, Dataset> = [("c".to_string(), envs["c"].clone())].into();
        assert_eq!(robustness(&e, &single, Loss::ZeroOne).unwrap(), 0.25);
        let perfect: BTreeMap<String, Dataset> = [("l".to_string(), line(10))].into();
        assert_eq!(robustness(&e, &perfect, Loss::ZeroOne).unwrap(), 0.0);
    }

    #[test]
    fn tpr_fpr_extremes() {
        let d = line(10);
        let all = Rule::single(Condition::new(0, Op::Gt, -1.0));
        let none = Rule::single(Condition::new(0, Op::Gt, 100.0));
        assert_eq!(rule_tpr_fpr(&all, &d).unwrap(), (Some(1.0), Some(1.0)));
        assert_eq!(rule_tpr_fpr(&none, &d).unwrap(), (Some(0.0), Some(0.0)));
        let ones = Dataset::from_rows(&[vec![1.0]], vec![1]).unwrap();
        assert_eq!(rule_tpr_fpr(&all, &ones).unwrap(), (Some(1.0), None));
    }

    #[test]
    fn curves_start_at_the_prior_and_end_at_the_model() {
        let d = line(10).with_env((0..10).map(|i| if i < 7 { "a".into() } else { "b".into() }).collect()).unwrap();
        let e = ensemble(2.5, 0.3);
        let rows = accuracy_curves(&e, &[("test", &d)]).unwrap();
        let at = |round: usize, env: &str| rows.iter().find(|r| r.round == round && r.env == env).unwrap().accuracy;
        assert_eq!(at(0, ALL_ENVS), 0.5);
        assert_eq!(at(1, ALL_ENVS), accuracy(&e.scores(&d).unwrap(), d.labels()));
        assert_eq!(at(1, "b"), 1.0);
    }

    #[test]
    fn spearman_cases() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 20.0, 40.0]).unwrap() - 0.9486832980505138).abs() < 1e-12);
        assert!(spearman(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn ood_environment_detection() {
        let train = line(100).with_env((0..100).map(|i| if i < 90 { "obs".into() } else { "int".into() }).collect()).unwrap();
        let test = line(10).with_env((0..10).map(|i| if i < 5 { "obs".into() } else { "int".into() }).collect()).unwrap();
        assert_eq!(ood_envs(&train, &test, 0.15), vec!["int"]);
    }

    proptest! {
        #[test]
        fn worst_environment_dominates_the_pooled_mean(xs in proptest::collection::vec(-5.0f64..5.0, 4..40), t in -5.0f64..5.0, a in -2.0f64..2.0) {
            let n = xs.len();
            let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
            let labels: Vec<u8> = xs.iter().enumerate().map(|(i, &x)| u8::from((x > 0.0) ^ (i % 3 == 0))).collect();
            let d = Dataset::from_rows(&rows, labels).unwrap()
                .with_env((0..n).map(|i| format!("e{}", i % 3)).collect()).unwrap();
            let e = ensemble(t, a);
            for loss in [Loss::ZeroOne, Loss::Exponential, Loss::Logistic] {
                let pooled = mean_loss(&e.scores(&d).unwrap(), d.labels(), loss);
                let worst = robustness(&e, &d.split_by_env().unwrap(), loss).unwrap();
                prop_assert!(worst >= pooled - 1e-12);
            }
        }

        #[test]
        fn complement_rule_swaps_covered_counts(xs in proptest::collection::vec(-5.0f64..5.0, 2..40), t in -5.0f64..5.0) {
            let rows: Vec<Vec<f64>> = xs.iter().map(|&x| vec![x]).collect();
            let labels: Vec<u8> = (0..xs.len()).map(|i| (i % 2) as u8).collect();
            let d = Dataset::from_rows(&rows, labels).unwrap();
            let (tp, fp) = rule_tpr_fpr(&Rule::single(Condition::new(0, Op::Gt, t)), &d).unwrap();
            let (tc, fc) = rule_tpr_fpr(&Rule::single(Condition::new(0, Op::Le, t)), &d).unwrap();
            prop_assert!((tp.unwrap() + tc.unwrap() - 1.0).abs() < 1e-12);
            prop_assert!((fp.unwrap() + fc.unwrap() - 1.0).abs() < 1e-12);
        }
    }
}
