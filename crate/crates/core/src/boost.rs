//! Boosted rule ensembles.
//!
//! Each round computes logistic residuals `y - sigmoid(F)`, asks the beam
//! search for the best rule under the configured quality measure, fits its
//! coefficient from exponentially weighted agreement, and updates both the
//! scores and the cached per-sample exponential losses.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bitmask::BitMask;
use crate::causal::Decomposition;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::regularize::{
    alpha_from_weights, calibrate_mu, mutual_information, sigmoid, Aggregation, GroupIndex, Laplace, MaskedLaplace,
    QualityMeasure, SoftMask, VarianceLaplace, VarianceMode, VariancePenalty,
};
use crate::rules::{build_bins, coverage, BinGrid, Rule};
use crate::search::{rule_gen_on_grid, BeamConfig, ScoredRule};

/// Scores are clamped to this magnitude before exponentiation.
pub const SCORE_CLAMP: f64 = 50.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerKind {
    #[default]
    None,
    Graph,
    Variance,
}

/// Everything that shapes a training run. Serialized into model files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    #[serde(flatten)]
    pub beam: BeamConfig,
    pub rounds: usize,
    pub shrinkage: f64,
    pub regularizer: RegularizerKind,
    pub lambda: f64,
    pub nu: f64,
    pub mask_sigma: f64,
    pub mi_bins: usize,
    pub penalty_aggregation: Aggregation,
    pub variance_mode: VarianceMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            beam: BeamConfig::default(),
            rounds: 100,
            shrinkage: 0.1,
            regularizer: RegularizerKind::None,
            lambda: 1.0,
            nu: 1.0,
            mask_sigma: 0.1,
            mi_bins: 8,
            penalty_aggregation: Aggregation::Mean,
            variance_mode: VarianceMode::Loss,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.beam.validate()?;
        if self.rounds == 0 {
            return Err(Error::Config("rounds must be at least 1".into()));
        }
        if !(self.shrinkage > 0.0 && self.shrinkage <= 1.0) {
            return Err(Error::Config(format!("shrinkage must be in (0, 1], got {}", self.shrinkage)));
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::Config(format!("lambda must be finite and >= 0, got {}", self.lambda)));
        }
        if !(self.nu.is_finite() && self.nu > 0.0) {
            return Err(Error::Config(format!("nu must be finite and > 0, got {}", self.nu)));
        }
        if !(self.mask_sigma.is_finite() && self.mask_sigma >= 0.0) {
            return Err(Error::Config(format!("mask_sigma must be finite and >= 0, got {}", self.mask_sigma)));
        }
        if self.mi_bins < 2 {
            return Err(Error::Config("mi_bins must be at least 2".into()));
        }
        Ok(())
    }
}

#[inline]
fn signed(y: u8) -> f64 {
    if y == 1 { 1.0 } else { -1.0 }
}

#[inline]
fn exp_loss(y: u8, f: f64) -> f64 {
    (-signed(y) * f.clamp(-SCORE_CLAMP, SCORE_CLAMP)).exp()
}

/// Scores of the current ensemble plus the cached `exp(-y F)` per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct BoostState {
    pub scores: Vec<f64>,
    pub exp_cache: Vec<f64>,
    pub round: usize,
}

impl BoostState {
    /// `F_0 = 0` everywhere.
    pub fn new(n: usize) -> Self {
        BoostState { scores: vec![0.0; n], exp_cache: vec![1.0; n], round: 0 }
    }

    /// Logistic residuals `y - sigmoid(F)`.
    pub fn residuals(&self, labels: &[u8]) -> Vec<f64> {
        self.scores.iter().zip(labels).map(|(&f, &y)| f64::from(y) - sigmoid(f)).collect()
    }

    /// `F += alpha * r`. The loss cache is updated multiplicatively, except
    /// where the clamp is active, where it is recomputed from the clamped score.
    pub fn apply(&mut self, alpha: f64, coverage: &BitMask, labels: &[u8]) {
        self.round += 1;
        if alpha == 0.0 {
            return;
        }
        for (i, &y) in labels.iter().enumerate() {
            let r = if coverage.get(i) { 1.0 } else { -1.0 };
            let old = self.scores[i];
            let new = old + alpha * r;
            self.scores[i] = new;
            if old.abs() <= SCORE_CLAMP && new.abs() <= SCORE_CLAMP {
                self.exp_cache[i] *= (-signed(y) * alpha * r).exp();
            } else {
                self.exp_cache[i] = exp_loss(y, new);
            }
        }
    }

    /// From-scratch `exp(-y F)`, for checking the cache.
    pub fn recomputed_cache(&self, labels: &[u8]) -> Vec<f64> {
        self.scores.iter().zip(labels).map(|(&f, &y)| exp_loss(y, f)).collect()
    }

    pub fn exp_loss_total(&self) -> f64 {
        self.exp_cache.iter().sum()
    }
}

/// Same as [`residuals`](BoostState::residuals) as a free function.
pub fn residuals(state: &BoostState, labels: &[u8]) -> Vec<f64> {
    state.residuals(labels)
}

/// `shrinkage * 0.5 * ln(W_agree / W_disagree)` with weights from the cache.
pub fn fit_alpha_on_coverage(coverage: &BitMask, exp_cache: &[f64], labels: &[u8], shrinkage: f64) -> f64 {
    let (mut agree, mut disagree) = (0.0, 0.0);
    for (i, (&w, &y)) in exp_cache.iter().zip(labels).enumerate() {
        if coverage.get(i) == (y == 1) {
            agree += w;
        } else {
            disagree += w;
        }
    }
    alpha_from_weights(agree, disagree, shrinkage)
}

pub fn fit_alpha(rule: &Rule, dataset: &Dataset, state: &BoostState, shrinkage: f64) -> Result<f64> {
    let cov = coverage(rule, dataset)?;
    Ok(fit_alpha_on_coverage(&cov, &state.exp_cache, dataset.labels(), shrinkage))
}

/// Result of one boosting round.
#[derive(Debug, Clone)]
pub struct Step {
    pub chosen: ScoredRule,
    pub alpha: f64,
}

/// One round: residuals, search, coefficient, state update.
pub fn boost_step(
    dataset: &Dataset,
    grid: &BinGrid,
    state: &mut BoostState,
    quality: &dyn QualityMeasure,
    beam: &BeamConfig,
    shrinkage: f64,
) -> Result<Step> {
    let res = state.residuals(dataset.labels());
    let ranked = rule_gen_on_grid(dataset, grid, &res, quality, beam)?;
    let chosen = ranked.into_iter().next().ok_or(Error::NoSearchableRule)?;
    let cov = coverage(&chosen.rule, dataset)?;
    let alpha = fit_alpha_on_coverage(&cov, &state.exp_cache, dataset.labels(), shrinkage);
    state.apply(alpha, &cov, dataset.labels());
    Ok(Step { chosen, alpha })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub alpha: f64,
    pub rule: Rule,
}

/// Per-round training log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub train_accuracy: Vec<f64>,
    pub exp_loss: Vec<f64>,
    pub quality: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RuleEnsemble {
    pub feature_names: Vec<String>,
    pub terms: Vec<Term>,
    pub config: TrainConfig,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Prediction {
    pub score: f64,
    pub probability: f64,
    pub class: u8,
}

#[derive(Serialize, Deserialize)]
struct TermFile {
    alpha: f64,
    rule: String,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    feature_names: Vec<String>,
    terms: Vec<TermFile>,
    config: TrainConfig,
    metrics: Metrics,
}

impl RuleEnsemble {
    pub fn empty(feature_names: Vec<String>) -> Self {
        RuleEnsemble { feature_names, terms: Vec::new(), config: TrainConfig::default(), metrics: Metrics::default() }
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn predict(&self, point: &[f64]) -> Result<Prediction> {
        let mut score = 0.0;
        for t in &self.terms {
            score += t.alpha * f64::from(t.rule.evaluate(point)?);
        }
        Ok(prediction(score))
    }

    /// Scores of the first `prefix` terms on every row of `dataset`.
    pub fn scores_prefix(&self, dataset: &Dataset, prefix: usize) -> Result<Vec<f64>> {
        self.check_width(dataset)?;
        let mut scores = vec![0.0; dataset.n_samples()];
        for t in &self.terms[..prefix.min(self.terms.len())] {
            add_term(&mut scores, t, dataset)?;
        }
        Ok(scores)
    }

    pub fn scores(&self, dataset: &Dataset) -> Result<Vec<f64>> {
        self.scores_prefix(dataset, self.terms.len())
    }

    /// Scores after each prefix `0..=len`, computed incrementally.
    pub fn score_trajectory(&self, dataset: &Dataset) -> Result<Vec<Vec<f64>>> {
        self.check_width(dataset)?;
        let mut scores = vec![0.0; dataset.n_samples()];
        let mut out = Vec::with_capacity(self.terms.len() + 1);
        out.push(scores.clone());
        for t in &self.terms {
            add_term(&mut scores, t, dataset)?;
            out.push(scores.clone());
        }
        Ok(out)
    }

    pub fn predict_dataset(&self, dataset: &Dataset) -> Result<Vec<Prediction>> {
        Ok(self.scores(dataset)?.into_iter().map(prediction).collect())
    }

    fn check_width(&self, dataset: &Dataset) -> Result<()> {
        if dataset.feature_names() != self.feature_names.as_slice() {
            return Err(Error::InvalidDataset(format!(
                "dataset features {:?} do not match the model's {:?}",
                dataset.feature_names(),
                self.feature_names
            )));
        }
        Ok(())
    }

    /// Terms with identical rules merged (alphas summed), ordered by |alpha|
    /// descending; ties keep first-appearance order.
    pub fn aggregated_terms(&self) -> Vec<Term> {
        let mut merged: Vec<Term> = Vec::new();
        for t in &self.terms {
            match merged.iter_mut().find(|m| m.rule.key() == t.rule.key()) {
                Some(m) => m.alpha += t.alpha,
                None => merged.push(t.clone()),
            }
        }
        merged.sort_by(|a, b| b.alpha.abs().total_cmp(&a.alpha.abs()));
        merged
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            feature_names: self.feature_names.clone(),
            terms: self
                .terms
                .iter()
                .map(|t| TermFile { alpha: t.alpha, rule: t.rule.to_infix(&self.feature_names) })
                .collect(),
            config: self.config.clone(),
            metrics: self.metrics.clone(),
        };
        let mut s = serde_json::to_string_pretty(&file).expect("model serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text)?;
        let terms = file
            .terms
            .into_iter()
            .map(|t| {
                if !t.alpha.is_finite() {
                    return Err(Error::InvalidDataset("model contains a non-finite alpha".into()));
                }
                Ok(Term { alpha: t.alpha, rule: Rule::parse(&t.rule, &file.feature_names)? })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(RuleEnsemble { feature_names: file.feature_names, terms, config: file.config, metrics: file.metrics })
    }
}

fn add_term(scores: &mut [f64], t: &Term, dataset: &Dataset) -> Result<()> {
    let cov = coverage(&t.rule, dataset)?;
    for (i, s) in scores.iter_mut().enumerate() {
        *s += if cov.get(i) { t.alpha } else { -t.alpha };
    }
    Ok(())
}

/// `class = 1` iff `score > 0`.
pub fn prediction(score: f64) -> Prediction {
    Prediction { score, probability: sigmoid(score), class: u8::from(score > 0.0) }
}

pub fn predict(ensemble: &RuleEnsemble, point: &[f64]) -> Result<Prediction> {
    ensemble.predict(point)
}

fn accuracy_of(scores: &[f64], labels: &[u8]) -> f64 {
    let hits = scores.iter().zip(labels).filter(|(&s, &y)| u8::from(s > 0.0) == y).count();
    hits as f64 / labels.len().max(1) as f64
}

/// Mutual information of every feature with the label.
pub fn feature_mi(dataset: &Dataset, bins: usize) -> Result<Vec<f64>> {
    (0..dataset.n_features())
        .map(|f| mutual_information(dataset.column(f), dataset.labels(), bins))
        .collect()
}

enum Regularization {
    Plain,
    Mask(MaskedLaplace, ChaCha8Rng),
    Variance(GroupIndex),
}

/// Runs `config.rounds` boosting rounds from `F_0 = 0`.
///
/// Graph mode needs the invariant decomposition; features it does not name
/// count as variant. Variance mode needs `group_id` tags on the dataset.
pub fn train(dataset: &Dataset, config: &TrainConfig, decomposition: Option<&Decomposition>) -> Result<RuleEnsemble> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidDataset("training data is empty".into()));
    }
    let grid = build_bins(dataset, config.beam.bins)?;
    let labels = dataset.labels();
    let mut reg = match config.regularizer {
        RegularizerKind::None => Regularization::Plain,
        RegularizerKind::Graph => {
            let d = decomposition
                .ok_or_else(|| Error::Config("graph regularization needs a causal graph".into()))?;
            let invariant = d.invariant_flags(dataset.feature_names());
            if !invariant.iter().any(|&b| b) {
                log::warn!("no invariant feature in the training data; training without a mask");
                Regularization::Plain
            } else {
                let mi = feature_mi(dataset, config.mi_bins)?;
                let (mu, _) = calibrate_mu(&invariant, &mi);
                let mask = SoftMask::new(mu, config.mask_sigma, invariant)?;
                let quality = MaskedLaplace { mask, lambda: config.lambda, aggregation: config.penalty_aggregation };
                Regularization::Mask(quality, ChaCha8Rng::seed_from_u64(config.beam.seed))
            }
        }
        RegularizerKind::Variance => {
            let ids = dataset
                .group_id()
                .ok_or_else(|| Error::Config("variance regularization needs a group_id column".into()))?;
            Regularization::Variance(GroupIndex::new(labels, ids)?)
        }
    };

    let mut state = BoostState::new(dataset.n_samples());
    let mut ensemble = RuleEnsemble {
        feature_names: dataset.feature_names().to_vec(),
        terms: Vec::with_capacity(config.rounds),
        config: config.clone(),
        metrics: Metrics::default(),
    };
    for _ in 0..config.rounds {
        let step = match &mut reg {
            Regularization::Plain => boost_step(dataset, &grid, &mut state, &Laplace, &config.beam, config.shrinkage)?,
            Regularization::Mask(quality, rng) => {
                quality.mask.redraw(rng);
                boost_step(dataset, &grid, &mut state, quality, &config.beam, config.shrinkage)?
            }
            Regularization::Variance(groups) => {
                let frozen = state.clone();
                let quality = VarianceLaplace {
                    penalty: VariancePenalty::new(
                        &frozen.scores,
                        &frozen.exp_cache,
                        labels,
                        groups,
                        config.shrinkage,
                        config.nu,
                        config.variance_mode,
                    ),
                    lambda: config.lambda,
                };
                boost_step(dataset, &grid, &mut state, &quality, &config.beam, config.shrinkage)?
            }
        };
        log::debug!(
            "round {}: alpha {:.4} quality {:.4} rule {}",
            state.round,
            step.alpha,
            step.chosen.quality,
            step.chosen.rule.to_infix(dataset.feature_names())
        );
        ensemble.metrics.train_accuracy.push(accuracy_of(&state.scores, labels));
        ensemble.metrics.exp_loss.push(state.exp_loss_total() / labels.len() as f64);
        ensemble.metrics.quality.push(step.chosen.quality);
        ensemble.metrics.alpha.push(step.alpha);
        ensemble.terms.push(Term { alpha: step.alpha, rule: step.chosen.rule });
    }
    Ok(ensemble)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rules::{Condition, Op};
    use proptest::prelude::*;
    use rand::Rng;

    fn always() -> Rule {
        Rule::single(Condition::new(0, Op::Gt, -1e300))
    }

    #[test]
    fn residual_cases() {
        let mut s = BoostState::new(3);
        s.scores = vec![0.0, 50.0, 3f64.ln()];
        let r = s.residuals(&[1, 0, 1]);
        assert_eq!(r[0], 0.5);
        assert!((r[1] + 1.0).abs() < 1e-12);
        assert!((r[2] - 0.25).abs() < 1e-12);
    }

    #[test]
    fn alpha_cases() {
        let labels = [1, 1, 1, 0];
        let cache = [1.0; 4];
        let all = BitMask::ones(4);
        let expect = 0.1 * 0.5 * 3f64.ln();
        assert!((fit_alpha_on_coverage(&all, &cache, &labels, 0.1) - expect).abs() < 1e-15);
        let half = BitMask::from_fn(4, |i| i < 2);
        assert_eq!(fit_alpha_on_coverage(&half, &cache, &[1, 0, 1, 0], 0.1), 0.0);
        let none = BitMask::zeros(4);
        assert!((fit_alpha_on_coverage(&none, &cache, &labels, 0.1) + expect).abs() < 1e-15);
    }

    #[test]
    fn zero_alpha_only_advances_round() {
        let mut s = BoostState::new(4);
        let before = s.clone();
        s.apply(0.0, &BitMask::ones(4), &[0, 1, 0, 1]);
        assert_eq!(s.round, 1);
        assert_eq!((s.scores, s.exp_cache), (before.scores, before.exp_cache));
    }

    fn separable() -> Dataset {
        let rows: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64]).collect();
        Dataset::from_rows(&rows, (0..20).map(|i| u8::from(i >= 10)).collect()).unwrap()
    }

    #[test]
    fn first_round_finds_the_separating_condition() {
        let d = separable();
        let cfg = TrainConfig { rounds: 1, shrinkage: 1.0, ..TrainConfig::default() };
        let m = train(&d, &cfg, None).unwrap();
        assert_eq!(m.len(), 1);
        assert_eq!(m.terms[0].rule, Rule::single(Condition::new(0, Op::Gt, 9.5)));
        assert_eq!(m.metrics.train_accuracy, vec![1.0]);
    }

    #[test]
    fn single_label_data_is_fit_after_one_round() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let d = Dataset::from_rows(&rows, vec![1; 10]).unwrap();
        let cfg = TrainConfig { rounds: 3, ..TrainConfig::default() };
        let m = train(&d, &cfg, None).unwrap();
        assert_eq!(m.metrics.train_accuracy[0], 1.0);
    }

    #[test]
    fn predict_cases() {
        let names = vec!["x1".to_string()];
        let mut e = RuleEnsemble::empty(names);
        assert_eq!(e.predict(&[0.0]).unwrap(), Prediction { score: 0.0, probability: 0.5, class: 0 });
        e.terms.push(Term { alpha: 1.0, rule: always() });
        let p = e.predict(&[0.0]).unwrap();
        assert_eq!(p.score, 1.0);
        assert!((p.probability - 0.7310585786).abs() < 1e-9);
        e.terms.push(Term { alpha: -2.0, rule: always() });
        let p = e.predict(&[0.0]).unwrap();
        assert_eq!((p.score, p.class), (-1.0, 0));
    }

    #[test]
    fn graph_mode_requires_a_decomposition() {
        let cfg = TrainConfig { regularizer: RegularizerKind::Graph, ..TrainConfig::default() };
        assert!(matches!(train(&separable(), &cfg, None), Err(Error::Config(_))));
        let cfg = TrainConfig { regularizer: RegularizerKind::Variance, ..TrainConfig::default() };
        assert!(matches!(train(&separable(), &cfg, None), Err(Error::Config(_))));
    }

    #[test]
    fn model_json_round_trip() {
        let d = separable();
        let m = train(&d, &TrainConfig { rounds: 5, ..TrainConfig::default() }, None).unwrap();
        let back = RuleEnsemble::from_json(&m.to_json()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_json(), m.to_json());
    }

    #[test]
    fn trajectory_ends_at_full_scores() {
        let d = separable();
        let m = train(&d, &TrainConfig { rounds: 4, ..TrainConfig::default() }, None).unwrap();
        let traj = m.score_trajectory(&d).unwrap();
        assert_eq!(traj.len(), 5);
        assert_eq!(traj[4], m.scores(&d).unwrap());
        assert_eq!(traj[2], m.scores_prefix(&d, 2).unwrap());
    }

    fn random_instance(seed: u64, n: usize) -> (Vec<u8>, ChaCha8Rng) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let labels = (0..n).map(|_| rng.random_range(0..2u8)).collect();
        (labels, rng)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn cache_matches_recomputation_after_100_steps(seed in any::<u64>()) {
            let (labels, mut rng) = random_instance(seed, 50);
            let mut s = BoostState::new(50);
            for _ in 0..100 {
                let cov = BitMask::from_fn(50, |_| rng.random_bool(0.5));
                s.apply(rng.random_range(-3.0..3.0), &cov, &labels);
            }
            for (a, b) in s.exp_cache.iter().zip(s.recomputed_cache(&labels)) {
                prop_assert!(((a - b) / b).abs() <= 1e-10, "{} vs {}", a, b);
            }
        }

        #[test]
        fn fitted_steps_never_raise_exponential_loss(seed in any::<u64>(), shrink in 0.05f64..1.0) {
            let (labels, mut rng) = random_instance(seed, 40);
            let mut s = BoostState::new(40);
            let mut prev = s.exp_loss_total();
            for _ in 0..30 {
                let cov = BitMask::from_fn(40, |_| rng.random_bool(0.4));
                let a = fit_alpha_on_coverage(&cov, &s.exp_cache, &labels, shrink);
                s.apply(a, &cov, &labels);
                let now = s.exp_loss_total();
                prop_assert!(now <= prev * (1.0 + 1e-12));
                prev = now;
            }
        }

        #[test]
        fn class_is_invariant_to_positive_rescaling(alphas in proptest::collection::vec(-2.0f64..2.0, 1..8), c in 0.01f64..100.0, x in -3.0f64..3.0) {
            let names = vec!["x1".to_string()];
            let mut e = RuleEnsemble::empty(names);
            for (i, a) in alphas.iter().enumerate() {
                e.terms.push(Term { alpha: *a, rule: Rule::single(Condition::new(0, Op::Gt, i as f64 - 3.0)) });
            }
            let mut scaled = e.clone();
            scaled.terms.iter_mut().for_each(|t| t.alpha *= c);
            prop_assert_eq!(e.predict(&[x]).unwrap().class, scaled.predict(&[x]).unwrap().class);
        }
    }
}
