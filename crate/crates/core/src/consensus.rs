//! Standard-reference inference from several raters' pattern annotations.
//!
//! Each pattern is fitted independently with a binary Dawid-Skene model: a
//! latent true state per image, a prior probability of presence and, per
//! rater, a 2x2 confusion matrix `P(reported | true)`. Parameters are fitted
//! by expectation-maximization starting from a majority vote.
//!
//! The M-step uses additive smoothing `eps` on every count. That is the MAP
//! estimate under a symmetric Dirichlet(1 + eps) prior, so the quantity EM
//! increases monotonically is the smoothed objective
//! `loglik + eps * sum(log theta)`. That objective is what the trace records;
//! [`PatternFit::final_loglik`] holds the plain marginal log-likelihood.
//!
//! Images and raters are processed in sorted id order, which makes the result
//! independent of record order.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AnnotationDataset, Pattern, PatternVector};

pub const TIE_RULE: &str = "posterior >= 0.5 is reported as present";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub smoothing: f64,
    /// Recorded for provenance. The fit itself is deterministic.
    pub seed: u64,
}

impl Default for EmConfig {
    fn default() -> Self {
        EmConfig {
            max_iters: 100,
            tol: 1e-6,
            smoothing: 0.01,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ConsensusError {
    #[error("pattern {0} has no annotations")]
    EmptyPatternColumn(Pattern),
    #[error("invalid EM configuration: {0}")]
    BadConfig(String),
}

/// Row-stochastic matrices indexed `[pattern][true state][reported state]`,
/// state 0 = absent, 1 = present.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RaterConfusion {
    pub matrices: [[[f64; 2]; 2]; 7],
}

impl RaterConfusion {
    pub fn matrix(&self, pattern: Pattern) -> [[f64; 2]; 2] {
        self.matrices[pattern.index()]
    }

    pub fn sensitivity(&self, pattern: Pattern) -> f64 {
        self.matrices[pattern.index()][1][1]
    }

    pub fn specificity(&self, pattern: Pattern) -> f64 {
        self.matrices[pattern.index()][0][0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassPrior {
    pub present: [f64; 7],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageConsensus {
    pub image_id: String,
    pub posteriors: [f64; 7],
    pub labels: PatternVector,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatternFit {
    pub pattern: Pattern,
    pub prior: f64,
    /// rater id -> `[[P(0|0), P(1|0)], [P(0|1), P(1|1)]]`
    pub confusions: BTreeMap<String, [[f64; 2]; 2]>,
    /// Smoothed objective after each M-step.
    pub loglik_trace: Vec<f64>,
    pub final_loglik: f64,
    pub iterations: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusResult {
    pub config: EmConfig,
    pub tie_rule: String,
    pub images: Vec<ImageConsensus>,
    pub patterns: Vec<PatternFit>,
    /// Sum over patterns of the per-pattern traces; shorter traces are held at
    /// their final value.
    pub loglik_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

impl ConsensusResult {
    pub fn priors(&self) -> ClassPrior {
        let mut present = [0.0; 7];
        for fit in &self.patterns {
            present[fit.pattern.index()] = fit.prior;
        }
        ClassPrior { present }
    }

    pub fn confusions(&self) -> BTreeMap<String, RaterConfusion> {
        let mut out: BTreeMap<String, RaterConfusion> = BTreeMap::new();
        for fit in &self.patterns {
            for (rater, m) in &fit.confusions {
                out.entry(rater.clone())
                    .or_insert(RaterConfusion {
                        matrices: [[[0.0; 2]; 2]; 7],
                    })
                    .matrices[fit.pattern.index()] = *m;
            }
        }
        out
    }

    pub fn hard_labels(&self) -> BTreeMap<&str, PatternVector> {
        self.images
            .iter()
            .map(|i| (i.image_id.as_str(), i.labels))
            .collect()
    }

    /// Sum of the per-pattern marginal log-likelihoods at the final parameters.
    pub fn final_loglik(&self) -> f64 {
        self.patterns.iter().map(|p| p.final_loglik).sum()
    }
}

/// Observations of one pattern in canonical (sorted) order.
struct PatternData {
    /// per image: (rater index, reported present)
    obs: Vec<Vec<(usize, bool)>>,
    n_raters: usize,
    /// Some image carries more than one annotation.
    has_overlap: bool,
}

#[derive(Clone)]
struct Params {
    prior: f64,
    /// per rater, `[true][reported]`
    confusion: Vec<[[f64; 2]; 2]>,
}

fn collect_pattern(
    by_image: &BTreeMap<&str, BTreeMap<&str, PatternVector>>,
    rater_index: &BTreeMap<&str, usize>,
    pattern: Pattern,
) -> PatternData {
    let obs: Vec<Vec<(usize, bool)>> = by_image
        .values()
        .map(|raters| {
            raters
                .iter()
                .map(|(r, v)| (rater_index[r], v.get(pattern)))
                .collect()
        })
        .collect();
    PatternData {
        has_overlap: obs.iter().any(|o| o.len() > 1),
        obs,
        n_raters: rater_index.len(),
    }
}

fn majority_init(data: &PatternData) -> Vec<f64> {
    data.obs
        .iter()
        .map(|o| {
            let pos = o.iter().filter(|(_, y)| *y).count();
            let neg = o.len() - pos;
            match pos.cmp(&neg) {
                std::cmp::Ordering::Greater => 1.0,
                std::cmp::Ordering::Less => 0.0,
                std::cmp::Ordering::Equal => 0.5,
            }
        })
        .collect()
}

fn m_step(data: &PatternData, post: &[f64], eps: f64) -> Params {
    let n = post.len() as f64;
    let total: f64 = post.iter().sum();
    let prior = (total + eps) / (n + 2.0 * eps);
    // counts[r][true][reported]
    let mut counts = vec![[[0.0f64; 2]; 2]; data.n_raters];
    for (o, &t) in data.obs.iter().zip(post) {
        for &(r, y) in o {
            let col = usize::from(y);
            counts[r][1][col] += t;
            counts[r][0][col] += 1.0 - t;
        }
    }
    let confusion = counts
        .iter()
        .map(|c| {
            let mut m = [[0.0; 2]; 2];
            for row in 0..2 {
                let denom = c[row][0] + c[row][1] + 2.0 * eps;
                m[row][0] = (c[row][0] + eps) / denom;
                m[row][1] = (c[row][1] + eps) / denom;
            }
            m
        })
        .collect();
    Params { prior, confusion }
}

/// Log joint weights `(ln P(obs, absent), ln P(obs, present))` for one image.
fn log_weights(o: &[(usize, bool)], params: &Params) -> (f64, f64) {
    let mut absent = (1.0 - params.prior).ln();
    let mut present = params.prior.ln();
    for &(r, y) in o {
        let col = usize::from(y);
        absent += params.confusion[r][0][col].ln();
        present += params.confusion[r][1][col].ln();
    }
    (absent, present)
}

fn log_add(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn posterior_present(absent: f64, present: f64) -> f64 {
    // 1 / (1 + exp(absent - present)) without overflow
    let d = absent - present;
    if d > 0.0 {
        let e = (-d).exp();
        e / (1.0 + e)
    } else {
        1.0 / (1.0 + d.exp())
    }
}

fn e_step(data: &PatternData, params: &Params) -> Vec<f64> {
    data.obs
        .iter()
        .map(|o| {
            let (a, p) = log_weights(o, params);
            posterior_present(a, p)
        })
        .collect()
}

fn marginal_loglik(data: &PatternData, params: &Params) -> f64 {
    data.obs
        .iter()
        .map(|o| {
            let (a, p) = log_weights(o, params);
            log_add(a, p)
        })
        .sum()
}

fn smoothing_penalty(params: &Params, eps: f64) -> f64 {
    let mut s = params.prior.ln() + (1.0 - params.prior).ln();
    for m in &params.confusion {
        for row in m {
            s += row[0].ln() + row[1].ln();
        }
    }
    eps * s
}

struct Fit {
    params: Params,
    posteriors: Vec<f64>,
    trace: Vec<f64>,
    final_loglik: f64,
    iterations: usize,
    converged: bool,
}

fn fit_pattern(data: &PatternData, cfg: &EmConfig) -> Fit {
    let mut post = majority_init(data);
    let mut trace = Vec::new();
    let mut params = m_step(data, &post, cfg.smoothing);
    let mut converged = false;
    for iter in 1..=cfg.max_iters {
        if iter > 1 {
            params = m_step(data, &post, cfg.smoothing);
        }
        let objective = marginal_loglik(data, &params) + smoothing_penalty(&params, cfg.smoothing);
        let prev = trace.last().copied();
        trace.push(objective);
        post = e_step(data, &params);
        if !data.has_overlap {
            // No image was seen twice, so nothing ties rater parameters to
            // the truth; iterating would only drift toward the smoothing
            // optimum. The first E-step keeps every report on its side.
            converged = true;
            break;
        }
        if let Some(prev) = prev {
            if (objective - prev).abs() < cfg.tol {
                converged = true;
                break;
            }
        }
    }
    Fit {
        final_loglik: marginal_loglik(data, &params),
        iterations: trace.len(),
        params,
        posteriors: post,
        trace,
        converged,
    }
}

fn check_config(cfg: &EmConfig) -> Result<(), ConsensusError> {
    if cfg.max_iters < 1 {
        return Err(ConsensusError::BadConfig("max_iters must be >= 1".into()));
    }
    if !(cfg.tol > 0.0) {
        return Err(ConsensusError::BadConfig("tol must be > 0".into()));
    }
    if !(cfg.smoothing > 0.0) || !cfg.smoothing.is_finite() {
        return Err(ConsensusError::BadConfig("smoothing must be > 0".into()));
    }
    Ok(())
}

/// Infers the standard reference with per-pattern binary Dawid-Skene EM.
pub fn infer_sr(ds: &AnnotationDataset, cfg: &EmConfig) -> Result<ConsensusResult, ConsensusError> {
    check_config(cfg)?;
    if ds.is_empty() {
        return Err(ConsensusError::EmptyPatternColumn(Pattern::PigmentNetwork));
    }
    let by_image = ds.by_image();
    let raters: Vec<&str> = ds.raters().iter().map(String::as_str).collect();
    let rater_index: BTreeMap<&str, usize> =
        raters.iter().enumerate().map(|(i, r)| (*r, i)).collect();

    let fits: Vec<Fit> = Pattern::ALL
        .par_iter()
        .map(|&p| fit_pattern(&collect_pattern(&by_image, &rater_index, p), cfg))
        .collect();

    let images = by_image
        .keys()
        .enumerate()
        .map(|(i, id)| {
            let mut posteriors = [0.0; 7];
            for (p, fit) in fits.iter().enumerate() {
                posteriors[p] = fit.posteriors[i];
            }
            ImageConsensus {
                image_id: (*id).to_string(),
                posteriors,
                labels: PatternVector::new(posteriors.map(|x| x >= 0.5)),
            }
        })
        .collect();

    let longest = fits.iter().map(|f| f.trace.len()).max().unwrap_or(0);
    let loglik_trace = (0..longest)
        .map(|t| {
            fits.iter()
                .map(|f| f.trace[t.min(f.trace.len() - 1)])
                .sum()
        })
        .collect();

    let patterns = fits
        .iter()
        .zip(Pattern::ALL)
        .map(|(fit, pattern)| PatternFit {
            pattern,
            prior: fit.params.prior,
            confusions: raters
                .iter()
                .zip(&fit.params.confusion)
                .map(|(r, m)| ((*r).to_string(), *m))
                .collect(),
            loglik_trace: fit.trace.clone(),
            final_loglik: fit.final_loglik,
            iterations: fit.iterations,
            converged: fit.converged,
        })
        .collect();

    Ok(ConsensusResult {
        config: *cfg,
        tie_rule: TIE_RULE.to_string(),
        images,
        patterns,
        loglik_trace,
        iterations: longest,
        converged: fits.iter().all(|f| f.converged),
    })
}

/// Per-image majority vote; an exact tie counts as present.
pub fn majority_vote(ds: &AnnotationDataset) -> BTreeMap<String, PatternVector> {
    ds.by_image()
        .into_iter()
        .map(|(image, raters)| {
            let n = raters.len();
            let mut out = PatternVector::EMPTY;
            for p in Pattern::ALL {
                let pos = raters.values().filter(|v| v.get(p)).count();
                out.set(p, 2 * pos >= n);
            }
            (image.to_string(), out)
        })
        .collect()
}

/// Observed-data log-likelihood summed over images and patterns.
///
/// Every rater appearing in `ds` must have an entry in `confusions`.
pub fn loglikelihood(
    ds: &AnnotationDataset,
    confusions: &BTreeMap<String, RaterConfusion>,
    priors: &ClassPrior,
) -> f64 {
    let by_image = ds.by_image();
    let mut total = 0.0;
    for p in Pattern::ALL {
        let pi = priors.present[p.index()];
        for raters in by_image.values() {
            let mut absent = (1.0 - pi).ln();
            let mut present = pi.ln();
            for (r, v) in raters {
                let m = confusions[*r].matrix(p);
                let col = usize::from(v.get(p));
                absent += m[0][col].ln();
                present += m[1][col].ln();
            }
            total += log_add(absent, present);
        }
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::AnnotationRecord;

    fn rec(image: &str, rater: &str, bits: &str) -> AnnotationRecord {
        AnnotationRecord {
            image_id: image.into(),
            rater_id: rater.into(),
            labels: bits.parse().unwrap(),
        }
    }

    fn ds(records: Vec<AnnotationRecord>) -> AnnotationDataset {
        AnnotationDataset::from_records(records).unwrap()
    }

    #[test]
    fn unanimous_raters_give_confident_presence() {
        let d = ds(vec![
            rec("A", "r1", "0100000"),
            rec("A", "r2", "0100000"),
            rec("A", "r3", "0100000"),
            rec("B", "r1", "0000000"),
            rec("B", "r2", "0000000"),
            rec("B", "r3", "0000000"),
        ]);
        let res = infer_sr(&d, &EmConfig::default()).unwrap();
        let a = &res.images[0];
        assert_eq!(a.image_id, "A");
        assert!(a.posteriors[Pattern::Ulceration.index()] > 0.99);
        assert!(a.labels.get(Pattern::Ulceration));
        assert!(!res.images[1].labels.get(Pattern::Ulceration));
    }

    #[test]
    fn single_rater_is_reproduced() {
        let d = ds(vec![
            rec("A", "r1", "0101101"),
            rec("B", "r1", "1000000"),
            rec("C", "r1", "0000000"),
            rec("D", "r1", "1111111"),
        ]);
        let res = infer_sr(&d, &EmConfig::default()).unwrap();
        for (img, r) in res.images.iter().zip(d.records()) {
            assert_eq!(img.labels, r.labels);
        }
    }

    #[test]
    fn majority_vote_rules() {
        let d = ds(vec![
            rec("A", "r1", "1000000"),
            rec("A", "r2", "1000000"),
            rec("A", "r3", "0000000"),
            rec("B", "r1", "1000000"),
            rec("B", "r2", "0000000"),
            rec("C", "r1", "0000000"),
            rec("C", "r2", "0000000"),
            rec("C", "r3", "1000000"),
        ]);
        let mv = majority_vote(&d);
        assert!(mv["A"].get(Pattern::PigmentNetwork));
        assert!(mv["B"].get(Pattern::PigmentNetwork));
        assert!(!mv["C"].get(Pattern::PigmentNetwork));
    }

    #[test]
    fn loglikelihood_hand_value() {
        let d = ds(vec![rec("A", "r1", "1111111")]);
        let m = [[0.9, 0.1], [0.1, 0.9]];
        let confusions = BTreeMap::from([(
            "r1".to_string(),
            RaterConfusion {
                matrices: [m; 7],
            },
        )]);
        let priors = ClassPrior { present: [0.5; 7] };
        let ll = loglikelihood(&d, &confusions, &priors);
        // log(0.5*0.9 + 0.5*0.1) = log 0.5 per pattern
        assert!((ll - 7.0 * 0.5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn loglikelihood_of_empty_dataset_is_zero() {
        let d = ds(vec![]);
        let ll = loglikelihood(&d, &BTreeMap::new(), &ClassPrior { present: [0.5; 7] });
        assert_eq!(ll, 0.0);
    }

    #[test]
    fn smaller_smoothing_raises_likelihood_on_consistent_data() {
        let mut records = Vec::new();
        for (i, bits) in ["0101101", "1000000", "0000000", "0011000", "1000001"]
            .iter()
            .enumerate()
        {
            for r in ["r1", "r2", "r3"] {
                records.push(rec(&format!("img{i}"), r, bits));
            }
        }
        let d = ds(records);
        let ll = |eps: f64| {
            let cfg = EmConfig {
                smoothing: eps,
                ..EmConfig::default()
            };
            let res = infer_sr(&d, &cfg).unwrap();
            loglikelihood(&d, &res.confusions(), &res.priors())
        };
        let coarse = ll(1e-2);
        let fine = ll(1e-4);
        assert!(fine > coarse, "{fine} <= {coarse}");
        let res = infer_sr(&d, &EmConfig::default()).unwrap();
        assert!((res.final_loglik() - coarse).abs() < 1e-9);
    }

    #[test]
    fn empty_dataset_is_an_error() {
        let err = infer_sr(&ds(vec![]), &EmConfig::default()).unwrap_err();
        assert!(matches!(err, ConsensusError::EmptyPatternColumn(_)));
    }

    #[test]
    fn bad_config_rejected() {
        let d = ds(vec![rec("A", "r1", "0000000")]);
        for cfg in [
            EmConfig { max_iters: 0, ..EmConfig::default() },
            EmConfig { tol: 0.0, ..EmConfig::default() },
            EmConfig { smoothing: 0.0, ..EmConfig::default() },
        ] {
            assert!(matches!(infer_sr(&d, &cfg), Err(ConsensusError::BadConfig(_))));
        }
    }

    #[test]
    fn non_convergence_is_flagged_not_failed() {
        let d = ds(vec![
            rec("A", "r1", "1000000"),
            rec("A", "r2", "0000000"),
            rec("B", "r1", "1000000"),
            rec("B", "r2", "1000000"),
            rec("C", "r1", "0000000"),
            rec("C", "r2", "1000000"),
        ]);
        let cfg = EmConfig {
            max_iters: 1,
            ..EmConfig::default()
        };
        let res = infer_sr(&d, &cfg).unwrap();
        assert_eq!(res.iterations, 1);
        assert!(!res.converged);
    }

    #[test]
    fn confusion_rows_are_stochastic_and_open() {
        let d = ds(vec![
            rec("A", "r1", "1010000"),
            rec("A", "r2", "1000000"),
            rec("B", "r1", "0000001"),
            rec("C", "r2", "0100000"),
        ]);
        let res = infer_sr(&d, &EmConfig::default()).unwrap();
        for c in res.confusions().values() {
            for m in c.matrices {
                for row in m {
                    assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
                    assert!(row[0] > 0.0 && row[0] < 1.0);
                }
            }
        }
        for p in res.priors().present {
            assert!(p > 0.0 && p < 1.0);
        }
    }
}
