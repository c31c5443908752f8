//! Local decision rules over threshold conditions.
//!
//! A rule is a head condition followed by `(connector, condition)` pairs and
//! is evaluated strictly left to right with no precedence between `and` and
//! `or`: `a and b or c` means `(a and b) or c`.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::bitmask::BitMask;
use crate::data::Dataset;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Op {
    Le,
    Gt,
}

impl Op {
    pub fn symbol(self) -> &'static str {
        match self {
            Op::Le => "<=",
            Op::Gt => ">",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Connector {
    And,
    Or,
}

impl Connector {
    pub fn keyword(self) -> &'static str {
        match self {
            Connector::And => "and",
            Connector::Or => "or",
        }
    }

    fn apply(self, acc: bool, next: bool) -> bool {
        match self {
            Connector::And => acc && next,
            Connector::Or => acc || next,
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Condition {
    pub feature: usize,
    pub op: Op,
    pub threshold: f64,
}

impl Condition {
    pub fn new(feature: usize, op: Op, threshold: f64) -> Self {
        debug_assert!(threshold.is_finite());
        Condition { feature, op, threshold }
    }

    #[inline]
    pub fn holds(&self, value: f64) -> bool {
        match self.op {
            Op::Le => value <= self.threshold,
            Op::Gt => value > self.threshold,
        }
    }

    /// Ordering on (feature, op, threshold) used for deterministic tie breaks.
    pub fn lex_cmp(&self, other: &Condition) -> Ordering {
        self.feature
            .cmp(&other.feature)
            .then(self.op.cmp(&other.op))
            .then(self.threshold.total_cmp(&other.threshold))
    }
}

impl PartialEq for Condition {
    fn eq(&self, other: &Self) -> bool {
        self.lex_cmp(other) == Ordering::Equal
    }
}

impl Eq for Condition {}

impl std::hash::Hash for Condition {
    fn hash<H: std::hash::Hasher>(&self, state: &mut H) {
        self.feature.hash(state);
        self.op.hash(state);
        self.threshold.to_bits().hash(state);
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Rule {
    head: Condition,
    tail: Vec<(Connector, Condition)>,
}

/// Identity used when deduplicating search candidates. Under left-to-right
/// evaluation a maximal run of one connector is an associative, commutative
/// fold, so each run is stored as a sorted condition multiset. A rule with a
/// single connector type is one run; mixed rules keep the order of runs.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RuleKey(Vec<(Option<Connector>, Vec<Condition>)>);

impl Rule {
    pub fn single(head: Condition) -> Self {
        Rule { head, tail: Vec::new() }
    }

    pub fn new(head: Condition, tail: Vec<(Connector, Condition)>) -> Self {
        Rule { head, tail }
    }

    pub fn head(&self) -> &Condition {
        &self.head
    }

    pub fn tail(&self) -> &[(Connector, Condition)] {
        &self.tail
    }

    /// Number of conditions.
    pub fn len(&self) -> usize {
        1 + self.tail.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn conditions(&self) -> impl Iterator<Item = &Condition> {
        std::iter::once(&self.head).chain(self.tail.iter().map(|(_, c)| c))
    }

    pub fn connectors(&self) -> impl Iterator<Item = Connector> + '_ {
        self.tail.iter().map(|(c, _)| *c)
    }

    /// Distinct referenced feature indices, ascending.
    pub fn features(&self) -> Vec<usize> {
        let mut f: Vec<usize> = self.conditions().map(|c| c.feature).collect();
        f.sort_unstable();
        f.dedup();
        f
    }

    pub fn max_feature(&self) -> usize {
        self.conditions().map(|c| c.feature).max().unwrap_or(0)
    }

    pub fn extend(&self, connector: Connector, condition: Condition) -> Rule {
        let mut tail = self.tail.clone();
        tail.push((connector, condition));
        Rule { head: self.head, tail }
    }

    /// Left-to-right Boolean evaluation.
    pub fn covers(&self, point: &[f64]) -> Result<bool> {
        let max = self.max_feature();
        if max >= point.len() {
            return Err(Error::Contract(format!(
                "rule references feature index {max} but the point has width {}",
                point.len()
            )));
        }
        Ok(self.covers_unchecked(|f| point[f]))
    }

    #[inline]
    pub(crate) fn covers_unchecked(&self, value: impl Fn(usize) -> f64) -> bool {
        let mut acc = self.head.holds(value(self.head.feature));
        for (conn, c) in &self.tail {
            acc = conn.apply(acc, c.holds(value(c.feature)));
        }
        acc
    }

    /// The rule's vote, +1 when covered and -1 otherwise.
    pub fn evaluate(&self, point: &[f64]) -> Result<i8> {
        Ok(if self.covers(point)? { 1 } else { -1 })
    }

    pub fn key(&self) -> RuleKey {
        let mut runs: Vec<(Option<Connector>, Vec<Condition>)> = vec![(None, vec![self.head])];
        for (conn, c) in &self.tail {
            let last = runs.last_mut().expect("at least one run");
            match last.0 {
                None => {
                    last.0 = Some(*conn);
                    last.1.push(*c);
                }
                Some(k) if k == *conn => last.1.push(*c),
                Some(_) => runs.push((Some(*conn), vec![*c])),
            }
        }
        for run in &mut runs {
            run.1.sort_by(Condition::lex_cmp);
        }
        RuleKey(runs)
    }

    /// Lexicographic order over the condition sequence, then connectors.
    pub fn lex_cmp(&self, other: &Rule) -> Ordering {
        for (a, b) in self.conditions().zip(other.conditions()) {
            let o = a.lex_cmp(b);
            if o != Ordering::Equal {
                return o;
            }
        }
        self.len()
            .cmp(&other.len())
            .then_with(|| self.connectors().cmp(other.connectors()))
    }

    pub fn to_infix(&self, names: &[String]) -> String {
        let name = |f: usize| names.get(f).cloned().unwrap_or_else(|| format!("x{}", f + 1));
        let mut s = format_condition(&self.head, &name(self.head.feature));
        for (conn, c) in &self.tail {
            s.push(' ');
            s.push_str(conn.keyword());
            s.push(' ');
            s.push_str(&format_condition(c, &name(c.feature)));
        }
        s
    }

    /// Parses the infix form, e.g. `x7 <= -0.86 and x8 > -1.61`.
    pub fn parse(text: &str, names: &[String]) -> Result<Rule> {
        let tokens: Vec<&str> = text.split_whitespace().collect();
        if tokens.is_empty() {
            return Err(Error::RuleParse("empty rule".into()));
        }
        let parse_cond = |t: &[&str]| -> Result<Condition> {
            if t.len() != 3 {
                return Err(Error::RuleParse(format!("expected `<feature> <op> <threshold>` in `{text}`")));
            }
            let feature = names
                .iter()
                .position(|n| n == t[0])
                .ok_or_else(|| Error::RuleParse(format!("unknown feature `{}`", t[0])))?;
            let op = match t[1] {
                "<=" => Op::Le,
                ">" => Op::Gt,
                other => return Err(Error::RuleParse(format!("unknown operator `{other}`"))),
            };
            let threshold: f64 = t[2]
                .parse()
                .map_err(|_| Error::RuleParse(format!("bad threshold `{}`", t[2])))?;
            if !threshold.is_finite() {
                return Err(Error::RuleParse(format!("non-finite threshold `{}`", t[2])));
            }
            Ok(Condition::new(feature, op, threshold))
        };
        if tokens.len() % 4 != 3 {
            return Err(Error::RuleParse(format!("malformed rule `{text}`")));
        }
        let head = parse_cond(&tokens[0..3])?;
        let mut tail = Vec::new();
        for chunk in tokens[3..].chunks(4) {
            let conn = match chunk[0] {
                "and" => Connector::And,
                "or" => Connector::Or,
                other => return Err(Error::RuleParse(format!("unknown connector `{other}`"))),
            };
            tail.push((conn, parse_cond(&chunk[1..])?));
        }
        Ok(Rule { head, tail })
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_infix(&[]))
    }
}

fn format_condition(c: &Condition, name: &str) -> String {
    format!("{} {} {}", name, c.op.symbol(), format_sig6(c.threshold))
}

/// Formats with six significant digits, trimming trailing zeros.
pub fn format_sig6(v: f64) -> String {
    if v == 0.0 {
        return "0".to_string();
    }
    let sci = format!("{v:.5e}");
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if (-4..6).contains(&exp) {
        let decimals = (5 - exp).max(0) as usize;
        let fixed = format!("{:.*}", decimals, v);
        trim_zeros(&fixed)
    } else {
        format!("{}e{}", trim_zeros(mantissa), exp)
    }
}

fn trim_zeros(s: &str) -> String {
    if s.contains('.') {
        let t = s.trim_end_matches('0').trim_end_matches('.');
        if t == "-0" { "0".to_string() } else { t.to_string() }
    } else {
        s.to_string()
    }
}

/// Rounds to the value whose six-significant-digit rendering parses back to itself.
pub fn snap_sig6(v: f64) -> f64 {
    format_sig6(v).parse().expect("formatted float parses")
}

pub fn coverage(rule: &Rule, dataset: &Dataset) -> Result<BitMask> {
    let max = rule.max_feature();
    if max >= dataset.n_features() {
        return Err(Error::Contract(format!(
            "rule references feature index {max} but the dataset has {} features",
            dataset.n_features()
        )));
    }
    let mut acc = condition_mask(&rule.head, dataset);
    for (conn, c) in &rule.tail {
        let m = condition_mask(c, dataset);
        match conn {
            Connector::And => acc.and_assign(&m),
            Connector::Or => acc.or_assign(&m),
        }
    }
    Ok(acc)
}

pub fn condition_mask(c: &Condition, dataset: &Dataset) -> BitMask {
    let col = dataset.column(c.feature);
    BitMask::from_fn(col.len(), |i| c.holds(col[i]))
}

/// Candidate thresholds per feature, strictly increasing.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    thresholds: Vec<Vec<f64>>,
}

impl BinGrid {
    pub fn from_thresholds(thresholds: Vec<Vec<f64>>) -> Result<Self> {
        for (f, t) in thresholds.iter().enumerate() {
            if t.windows(2).any(|w| w[0] >= w[1]) || t.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract(format!(
                    "thresholds for feature {f} are not finite and strictly increasing"
                )));
            }
        }
        Ok(BinGrid { thresholds })
    }

    pub fn n_features(&self) -> usize {
        self.thresholds.len()
    }

    pub fn thresholds(&self, feature: usize) -> &[f64] {
        &self.thresholds[feature]
    }

    pub fn is_empty(&self) -> bool {
        self.thresholds.iter().all(Vec::is_empty)
    }

    /// Every single-condition rule in canonical order: feature, threshold, op.
    pub fn conditions(&self) -> Vec<Condition> {
        let mut out = Vec::new();
        for (f, ts) in self.thresholds.iter().enumerate() {
            for &t in ts {
                out.push(Condition::new(f, Op::Le, t));
                out.push(Condition::new(f, Op::Gt, t));
            }
        }
        out
    }
}

/// Equal-frequency binning: cut points at the q/bins quantiles (q = 1..bins-1),
/// each placed midway between the two straddling order statistics and snapped
/// to six significant digits so the printed rule is exact.
pub fn build_bins(dataset: &Dataset, bins_per_feature: usize) -> Result<BinGrid> {
    if bins_per_feature < 2 {
        return Err(Error::Contract("bins_per_feature must be at least 2".into()));
    }
    let mut thresholds = Vec::with_capacity(dataset.n_features());
    for f in 0..dataset.n_features() {
        let mut sorted = dataset.column(f).to_vec();
        sorted.sort_by(f64::total_cmp);
        let ts = quantile_cut_points(&sorted, bins_per_feature);
        if ts.is_empty() {
            log::warn!("feature `{}` is constant; it cannot be used in rules", dataset.feature_names()[f]);
        }
        thresholds.push(ts);
    }
    Ok(BinGrid { thresholds })
}

/// Equal-frequency cut points of an ascending sample.
pub fn quantile_cut_points(sorted: &[f64], bins: usize) -> Vec<f64> {
    let n = sorted.len();
    let mut out: Vec<f64> = Vec::new();
    if n < 2 {
        return out;
    }
    for q in 1..bins {
        // split point k: the first k order statistics fall on the left
        let k = ((q * n) as f64 / bins as f64).round() as usize;
        if k == 0 || k >= n {
            continue;
        }
        let (lo, hi) = (sorted[k - 1], sorted[k]);
        if lo == hi {
            continue;
        }
        let t = snap_sig6(0.5 * (lo + hi));
        if t < lo || t >= hi {
            continue;
        }
        if out.last().is_none_or(|&last| t > last) {
            out.push(t);
        }
    }
    out
}

/// One-step refinements of `seed`: every grid condition joined by `and` and
/// by `or`, or every single condition when there is no seed.
pub fn refine(seed: Option<&Rule>, grid: &BinGrid, max_depth: usize) -> Vec<Rule> {
    let conditions = grid.conditions();
    match seed {
        None => {
            if max_depth == 0 {
                return Vec::new();
            }
            conditions.into_iter().map(Rule::single).collect()
        }
        Some(rule) if rule.len() >= max_depth => Vec::new(),
        Some(rule) => {
            let mut out = Vec::with_capacity(conditions.len() * 2);
            for c in &conditions {
                for conn in [Connector::And, Connector::Or] {
                    out.push(rule.extend(conn, *c));
                }
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(n: usize) -> Vec<String> {
        crate::data::default_feature_names(n)
    }

    #[test]
    fn table_rule_covers_point() {
        let rule = Rule::parse("x7 <= -0.86 and x8 > -1.61", &names(10)).unwrap();
        let mut p = vec![0.0; 10];
        p[6] = -1.0;
        p[7] = 0.0;
        assert_eq!(rule.evaluate(&p).unwrap(), 1);
    }

    #[test]
    fn strict_inequality() {
        let rule = Rule::single(Condition::new(0, Op::Gt, 0.0));
        assert_eq!(rule.evaluate(&[0.0]).unwrap(), -1);
    }

    #[test]
    fn mixed_connectors_evaluate_left_to_right() {
        let rule = Rule::parse("x1 > 0 and x2 > 0 or x3 > 0", &names(3)).unwrap();
        assert_eq!(rule.evaluate(&[-1.0, -1.0, 1.0]).unwrap(), 1);
        // no precedence: (x1 or x2) and x3
        let rule = Rule::parse("x1 > 0 or x2 > 0 and x3 > 0", &names(3)).unwrap();
        assert_eq!(rule.evaluate(&[1.0, -1.0, -1.0]).unwrap(), -1);
    }

    #[test]
    fn out_of_range_feature_is_an_error() {
        let rule = Rule::single(Condition::new(4, Op::Gt, 0.0));
        assert!(matches!(rule.evaluate(&[0.0; 3]), Err(Error::Contract(_))));
    }

    #[test]
    fn coverage_extremes() {
        let d = Dataset::from_rows(&[vec![0.5], vec![1.5], vec![-2.0]], vec![0, 1, 0]).unwrap();
        let all = Rule::single(Condition::new(0, Op::Gt, -1e9));
        assert_eq!(coverage(&all, &d).unwrap().count_ones(), 3);
        let none = Rule::parse("x1 > 1 and x1 <= 0", &names(1)).unwrap();
        assert_eq!(coverage(&none, &d).unwrap().count_ones(), 0);
    }

    #[test]
    fn bins_median_split() {
        let d = Dataset::from_rows(&[vec![1.0], vec![2.0], vec![3.0], vec![4.0]], vec![0, 0, 1, 1]).unwrap();
        let g = build_bins(&d, 2).unwrap();
        assert_eq!(g.thresholds(0), &[2.5]);
    }

    #[test]
    fn bins_constant_and_ties() {
        let d = Dataset::from_rows(&[vec![5.0], vec![5.0], vec![5.0]], vec![0, 1, 0]).unwrap();
        assert!(build_bins(&d, 4).unwrap().thresholds(0).is_empty());
        let d = Dataset::from_rows(&[vec![1.0], vec![1.0], vec![1.0], vec![9.0]], vec![0, 1, 0, 1]).unwrap();
        let g = build_bins(&d, 4).unwrap();
        assert!(g.thresholds(0).len() < 3);
        assert_eq!(g.thresholds(0), &[5.0]);
        assert!(build_bins(&d, 1).is_err());
    }

    #[test]
    fn refine_counts() {
        let grid = BinGrid::from_thresholds(vec![vec![0.0], vec![1.0]]).unwrap();
        let level1 = refine(None, &grid, 3);
        assert_eq!(level1.len(), 4);
        let level2 = refine(Some(&level1[0]), &grid, 3);
        assert_eq!(level2.len(), 8);
        let deep = Rule::parse("x1 > 0 and x2 > 1 and x1 <= 0", &names(2)).unwrap();
        assert!(refine(Some(&deep), &grid, 3).is_empty());
    }

    #[test]
    fn sig6_formatting() {
        assert_eq!(format_sig6(-0.86), "-0.86");
        assert_eq!(format_sig6(2.5), "2.5");
        assert_eq!(format_sig6(1.0 / 3.0), "0.333333");
        assert_eq!(format_sig6(123456.7), "123457");
        assert_eq!(format_sig6(1234567.0), "1.23457e6");
        assert_eq!(format_sig6(0.000012345678), "1.23457e-5");
        assert_eq!(format_sig6(999999.7), "1e6");
        assert_eq!(format_sig6(-1e-7), "-1e-7");
    }

    #[test]
    fn commuted_runs_share_a_key() {
        let n = names(3);
        let a = Rule::parse("x1 > 0 and x2 > 1", &n).unwrap();
        let b = Rule::parse("x2 > 1 and x1 > 0", &n).unwrap();
        assert_eq!(a.key(), b.key());
        let c = Rule::parse("x1 > 0 and x2 > 1 or x3 > 0", &n).unwrap();
        let d = Rule::parse("x2 > 1 and x1 > 0 or x3 > 0", &n).unwrap();
        assert_eq!(c.key(), d.key());
        let e = Rule::parse("x1 > 0 or x3 > 0 and x2 > 1", &n).unwrap();
        assert_ne!(c.key(), e.key());
    }

    fn arb_rule(width: usize) -> impl Strategy<Value = Rule> {
        let cond = (0..width, any::<bool>(), -3.0f64..3.0)
            .prop_map(|(f, le, t)| Condition::new(f, if le { Op::Le } else { Op::Gt }, snap_sig6(t)));
        (cond.clone(), proptest::collection::vec((any::<bool>(), cond), 0..3)).prop_map(|(h, tail)| {
            Rule::new(
                h,
                tail.into_iter()
                    .map(|(and, c)| (if and { Connector::And } else { Connector::Or }, c))
                    .collect(),
            )
        })
    }

    proptest! {
        #[test]
        fn infix_round_trip(rule in arb_rule(4)) {
            let n = names(4);
            let parsed = Rule::parse(&rule.to_infix(&n), &n).unwrap();
            prop_assert_eq!(parsed, rule);
        }

        #[test]
        fn complement_of_gt_is_le(vals in proptest::collection::vec(-5.0f64..5.0, 1..60), t in -5.0f64..5.0) {
            let rows: Vec<Vec<f64>> = vals.iter().map(|&v| vec![v]).collect();
            let d = Dataset::from_rows(&rows, vec![0; rows.len()]).unwrap();
            let gt = coverage(&Rule::single(Condition::new(0, Op::Gt, t)), &d).unwrap();
            let le = coverage(&Rule::single(Condition::new(0, Op::Le, t)), &d).unwrap();
            prop_assert_eq!(gt.not(), le);
        }

        #[test]
        fn evaluation_ignores_unreferenced_features(rule in arb_rule(3), p in proptest::collection::vec(-4.0f64..4.0, 5), noise in -9.0f64..9.0) {
            let mut q = p.clone();
            q[3] = noise;
            q[4] = -noise;
            prop_assert_eq!(rule.evaluate(&p).unwrap(), rule.evaluate(&q).unwrap());
        }

        #[test]
        fn coverage_matches_pointwise_evaluation(rule in arb_rule(3), rows in proptest::collection::vec(proptest::collection::vec(-4.0f64..4.0, 3), 1..40)) {
            let d = Dataset::from_rows(&rows, vec![0; rows.len()]).unwrap();
            let m = coverage(&rule, &d).unwrap();
            for (i, r) in rows.iter().enumerate() {
                prop_assert_eq!(m.get(i), rule.evaluate(r).unwrap() == 1);
            }
        }

        #[test]
        fn equal_frequency_bins_have_no_empty_cells(vals in proptest::collection::vec(-100.0f64..100.0, 8..200), bins in 2usize..10) {
            let rows: Vec<Vec<f64>> = vals.iter().map(|&v| vec![v]).collect();
            let d = Dataset::from_rows(&rows, vec![0; rows.len()]).unwrap();
            let g = build_bins(&d, bins).unwrap();
            let ts = g.thresholds(0);
            prop_assert!(ts.len() < bins);
            prop_assert!(ts.windows(2).all(|w| w[0] < w[1]));
            let mut edges = vec![f64::NEG_INFINITY];
            edges.extend_from_slice(ts);
            edges.push(f64::INFINITY);
            for w in edges.windows(2) {
                prop_assert!(vals.iter().any(|&v| v > w[0] && v <= w[1]));
            }
        }

        #[test]
        fn refine_has_no_duplicates(rule in arb_rule(2)) {
            let grid = BinGrid::from_thresholds(vec![vec![-1.0, 0.5], vec![0.0]]).unwrap();
            let ext = refine(Some(&rule), &grid, 5);
            let set: std::collections::HashSet<_> = ext.iter().collect();
            prop_assert_eq!(set.len(), ext.len());
        }
    }
}
