//! Planted multi-rater annotation generator.
//!
//! Draws a prior per pattern and a sensitivity/specificity per rater and
//! pattern, samples latent truth, then samples each rater's reports from their
//! planted confusion. Everything flows from one seed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{AnnotationRecord, Pattern, PatternVector};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub raters: usize,
    pub images: usize,
    pub sensitivity_range: (f64, f64),
    pub specificity_range: (f64, f64),
    pub prior_range: (f64, f64),
    /// Probability that a rater annotates a given image. Each image keeps at
    /// least one rater.
    pub coverage: f64,
    pub seed: u64,
}

impl Default for SimulationConfig {
    fn default() -> Self {
        SimulationConfig {
            raters: 5,
            images: 500,
            sensitivity_range: (0.7, 0.95),
            specificity_range: (0.7, 0.95),
            prior_range: (0.1, 0.5),
            coverage: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimulationError {
    #[error("bad simulation parameters: {0}")]
    BadParams(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedRater {
    pub rater_id: String,
    pub sensitivity: [f64; 7],
    pub specificity: [f64; 7],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlantedParams {
    pub priors: [f64; 7],
    pub raters: Vec<PlantedRater>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub planted: PlantedParams,
    /// (image id, true labels) in image order.
    pub truth: Vec<(String, PatternVector)>,
    pub annotations: Vec<AnnotationRecord>,
}

fn check_range(name: &str, (lo, hi): (f64, f64)) -> Result<(), SimulationError> {
    if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
        return Err(SimulationError::BadParams(format!(
            "{name} range ({lo}, {hi}) must satisfy 0 <= lo <= hi <= 1"
        )));
    }
    Ok(())
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

pub fn simulate(cfg: &SimulationConfig) -> Result<Simulation, SimulationError> {
    if cfg.raters == 0 || cfg.images == 0 {
        return Err(SimulationError::BadParams(
            "rater and image counts must be >= 1".into(),
        ));
    }
    check_range("sensitivity", cfg.sensitivity_range)?;
    check_range("specificity", cfg.specificity_range)?;
    check_range("prior", cfg.prior_range)?;
    check_range("coverage", (cfg.coverage, cfg.coverage))?;
    if cfg.coverage == 0.0 && cfg.raters > 1 {
        return Err(SimulationError::BadParams("coverage must be > 0".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut priors = [0.0; 7];
    for p in priors.iter_mut() {
        *p = uniform(&mut rng, cfg.prior_range);
    }
    let rater_width = cfg.raters.to_string().len();
    let raters: Vec<PlantedRater> = (0..cfg.raters)
        .map(|r| {
            let mut sensitivity = [0.0; 7];
            let mut specificity = [0.0; 7];
            for p in 0..Pattern::COUNT {
                sensitivity[p] = uniform(&mut rng, cfg.sensitivity_range);
                specificity[p] = uniform(&mut rng, cfg.specificity_range);
            }
            PlantedRater {
                rater_id: format!("rater{:0w$}", r + 1, w = rater_width),
                sensitivity,
                specificity,
            }
        })
        .collect();

    let image_width = cfg.images.to_string().len().max(4);
    let mut truth = Vec::with_capacity(cfg.images);
    let mut annotations = Vec::new();
    for i in 0..cfg.images {
        let image_id = format!("img{:0w$}", i + 1, w = image_width);
        let mut t = PatternVector::EMPTY;
        for p in Pattern::ALL {
            t.set(p, rng.random_bool(priors[p.index()]));
        }
        let mut covered: Vec<usize> = (0..cfg.raters)
            .filter(|_| rng.random_bool(cfg.coverage))
            .collect();
        if covered.is_empty() {
            covered.push(rng.random_range(0..cfg.raters));
        }
        for r in covered {
            let rater = &raters[r];
            let mut reported = PatternVector::EMPTY;
            for p in Pattern::ALL {
                let k = p.index();
                let hit = if t.get(p) {
                    rng.random_bool(rater.sensitivity[k])
                } else {
                    !rng.random_bool(rater.specificity[k])
                };
                reported.set(p, hit);
            }
            annotations.push(AnnotationRecord {
                image_id: image_id.clone(),
                rater_id: rater.rater_id.clone(),
                labels: reported,
            });
        }
        truth.push((image_id, t));
    }
    Ok(Simulation {
        planted: PlantedParams { priors, raters },
        truth,
        annotations,
    })
}
