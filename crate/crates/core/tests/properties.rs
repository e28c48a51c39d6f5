mod common;

use std::collections::BTreeMap;

use bcc_xai::consensus::{infer_sr, majority_vote, EmConfig};
use bcc_xai::focal::{focal_loss, focal_loss_grad, FocalLossParams};
use bcc_xai::folds::{fold_balance_report, stratified_kfold};
use bcc_xai::metrics::{fold_aggregate, metrics_of, ConfusionCounts, Metric, MetricSet};
use bcc_xai::model::AnnotationRecord;
use bcc_xai::saliency::{saliency_stats, Heatmap, SaliencyConfig};
use bcc_xai::simulate::{simulate, SimulationConfig};
use bcc_xai::{AnnotationDataset, Pattern, PatternVector};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn renamed(ds: &AnnotationDataset, rename: impl Fn(&str) -> String) -> AnnotationDataset {
    let records = ds
        .records()
        .iter()
        .map(|r| AnnotationRecord {
            rater_id: rename(&r.rater_id),
            ..r.clone()
        })
        .collect();
    AnnotationDataset::from_records(records).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn em_trace_never_decreases(seed in any::<u64>()) {
        let ds = common::random_sparse_dataset(seed);
        let result = infer_sr(&ds, &EmConfig::default()).unwrap();
        for fit in &result.patterns {
            for w in fit.loglik_trace.windows(2) {
                prop_assert!(w[1] - w[0] >= -1e-8, "{:?}", fit.loglik_trace);
            }
        }
    }

    #[test]
    fn em_is_permutation_invariant(seed in any::<u64>(), shuffle in any::<u64>()) {
        let ds = common::random_sparse_dataset(seed);
        let base = infer_sr(&ds, &EmConfig::default()).unwrap();

        let mut records = ds.records().to_vec();
        records.shuffle(&mut ChaCha8Rng::seed_from_u64(shuffle));
        let shuffled = infer_sr(&AnnotationDataset::from_records(records).unwrap(), &EmConfig::default()).unwrap();

        // reversing rater order through their ids
        let flipped = infer_sr(&renamed(&ds, |r| format!("z{}", 1000 - r.trim_start_matches("rater").parse::<i32>().unwrap())), &EmConfig::default()).unwrap();

        for other in [&shuffled, &flipped] {
            for (a, b) in base.images.iter().zip(&other.images) {
                prop_assert_eq!(&a.image_id, &b.image_id);
                for p in 0..7 {
                    prop_assert!((a.posteriors[p] - b.posteriors[p]).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn em_is_deterministic(seed in any::<u64>()) {
        let ds = common::random_sparse_dataset(seed);
        let a = infer_sr(&ds, &EmConfig::default()).unwrap();
        let b = infer_sr(&ds, &EmConfig::default()).unwrap();
        prop_assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    }

    #[test]
    fn em_parameters_stay_inside_the_simplex(seed in any::<u64>()) {
        let ds = common::random_sparse_dataset(seed);
        let result = infer_sr(&ds, &EmConfig::default()).unwrap();
        for fit in &result.patterns {
            prop_assert!(fit.prior > 0.0 && fit.prior < 1.0);
            for m in fit.confusions.values() {
                for row in m {
                    prop_assert!((row[0] + row[1] - 1.0).abs() < 1e-9);
                    prop_assert!(row.iter().all(|&x| x > 0.0 && x < 1.0));
                }
            }
        }
        for img in &result.images {
            for p in 0..7 {
                prop_assert_eq!(img.labels.bits()[p], img.posteriors[p] >= 0.5);
            }
        }
    }

    #[test]
    fn single_rater_is_reproduced(seed in any::<u64>(), images in 1usize..80) {
        let cfg = SimulationConfig {
            raters: 1,
            images,
            prior_range: (0.0, 1.0),
            sensitivity_range: (0.0, 1.0),
            specificity_range: (0.0, 1.0),
            seed,
            ..SimulationConfig::default()
        };
        let sim = simulate(&cfg).unwrap();
        let ds = AnnotationDataset::from_records(sim.annotations.clone()).unwrap();
        let result = infer_sr(&ds, &EmConfig::default()).unwrap();
        let hard = result.hard_labels();
        for r in &sim.annotations {
            prop_assert_eq!(hard[r.image_id.as_str()], r.labels);
        }
    }

    #[test]
    fn majority_vote_matches_counting(seed in any::<u64>()) {
        let ds = common::random_sparse_dataset(seed);
        let mv = majority_vote(&ds);
        for (image, raters) in ds.by_image() {
            for p in Pattern::ALL {
                let yes = raters.values().filter(|v| v.get(p)).count();
                let no = raters.len() - yes;
                prop_assert_eq!(mv[image].get(p), yes >= no);
            }
        }
    }

    #[test]
    fn folds_partition_and_repeat(
        rows in prop::collection::vec(0u8..128, 5..120),
        k in 2usize..6,
        seed in any::<u64>(),
    ) {
        let labels: BTreeMap<String, PatternVector> = rows
            .iter()
            .enumerate()
            .map(|(i, &m)| (format!("i{i}"), PatternVector::from_mask(m)))
            .collect();
        prop_assume!(labels.len() >= k);
        let fa = stratified_kfold(&labels, k, seed).unwrap();
        prop_assert_eq!(&fa, &stratified_kfold(&labels, k, seed).unwrap());
        prop_assert_eq!(fa.assignment().len(), labels.len());
        let sizes = fa.fold_sizes();
        prop_assert!(sizes.iter().all(|&s| s > 0), "{:?}", sizes);
        prop_assert_eq!(sizes.iter().sum::<usize>(), labels.len());
        let report = fold_balance_report(&fa, &labels).unwrap();
        prop_assert!(report.max_deviation >= 0.0 && report.max_deviation <= 1.0);
    }

    #[test]
    fn mask_complement_swaps_regions(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, m) = common::random_pair(&mut rng);
        let cfg = SaliencyConfig::default();
        let a = saliency_stats(&h, &m, &cfg).unwrap();
        let b = saliency_stats(&h, &m.complement(), &cfg).unwrap();
        prop_assert_eq!(a.mean_fg, b.mean_bg);
        prop_assert_eq!(a.std_fg, b.std_bg);
        prop_assert_eq!(&a.pdf_fg, &b.pdf_bg);
        prop_assert!((a.intersection - b.intersection).abs() < 1e-12);
    }

    #[test]
    fn saliency_ignores_positive_affine_maps(seed in any::<u64>(), scale in 0.1f64..50.0, shift in -100.0f64..100.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, m) = common::random_pair(&mut rng);
        let moved = Heatmap::new(h.width(), h.height(), h.values().iter().map(|v| v * scale + shift).collect()).unwrap();
        let cfg = SaliencyConfig::default();
        let a = saliency_stats(&h, &m, &cfg).unwrap();
        let b = saliency_stats(&moved, &m, &cfg).unwrap();
        prop_assert!((a.mean_fg - b.mean_fg).abs() < 1e-9);
        prop_assert!((a.mean_bg - b.mean_bg).abs() < 1e-9);
        prop_assert!((a.std_fg - b.std_fg).abs() < 1e-9);
        prop_assert!((a.std_bg - b.std_bg).abs() < 1e-9);
        prop_assert!(a.dice >= a.jaccard);
    }

    #[test]
    fn fold_aggregate_ignores_fold_order(values in prop::collection::vec((0u64..30, 0u64..30, 0u64..30, 0u64..30), 1..8), seed in any::<u64>()) {
        let sets: Vec<MetricSet> = values
            .iter()
            .filter_map(|&(tp, fp, tn, fn_)| metrics_of(&ConfusionCounts { tp, fp, tn, fn_ }).ok())
            .collect();
        prop_assume!(!sets.is_empty());
        let Ok(a) = fold_aggregate(&sets) else { return Ok(()); };
        let mut shuffled = sets.clone();
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let b = fold_aggregate(&shuffled).unwrap();
        for (x, y) in [(a.recall, b.recall), (a.specificity, b.specificity), (a.precision, b.precision), (a.accuracy, b.accuracy)] {
            prop_assert_eq!(x.folds_used, y.folds_used);
            let (Metric::Value(m1), Metric::Value(m2)) = (x.mean, y.mean) else { panic!("defined") };
            let (Metric::Value(v1), Metric::Value(v2)) = (x.variance, y.variance) else { panic!("defined") };
            prop_assert!((m1 - m2).abs() < 1e-12 && (v1 - v2).abs() < 1e-12);
            prop_assert!(v1 >= 0.0);
        }
    }

    #[test]
    fn metrics_are_scale_free(tp in 0u64..50, fp in 0u64..50, tn in 0u64..50, fn_ in 0u64..50, c in 2u64..9) {
        prop_assume!(tp + fp + tn + fn_ > 0);
        let a = metrics_of(&ConfusionCounts { tp, fp, tn, fn_ }).unwrap();
        let b = metrics_of(&ConfusionCounts { tp: tp * c, fp: fp * c, tn: tn * c, fn_: fn_ * c }).unwrap();
        for i in 0..4 {
            match (a.get(i), b.get(i)) {
                (Metric::Value(x), Metric::Value(y)) => {
                    prop_assert!((x - y).abs() < 1e-12);
                    prop_assert!((0.0..=1.0).contains(&x));
                }
                (Metric::Undefined, Metric::Undefined) => {}
                other => prop_assert!(false, "{:?}", other),
            }
        }
    }

    #[test]
    fn focal_loss_is_bounded_by_cross_entropy(p in 0.001f64..0.999, gamma in 0.0f64..6.0, alpha in 0.01f64..1.0, y in any::<bool>()) {
        let params = FocalLossParams::new(alpha, gamma).unwrap();
        let ce = FocalLossParams::new(alpha, 0.0).unwrap();
        let fl = focal_loss(p, y, &params).unwrap();
        prop_assert!(fl >= 0.0);
        prop_assert!(fl <= focal_loss(p, y, &ce).unwrap() + 1e-15);
        // loss falls as the true class becomes more probable
        let g = focal_loss_grad(p, y, &params).unwrap();
        let descending = if y { g <= 0.0 } else { g >= 0.0 };
        prop_assert!(descending);
    }
}

#[test]
fn degenerate_rater_does_not_dominate() {
    let sim = simulate(&SimulationConfig {
        raters: 4,
        images: 400,
        sensitivity_range: (0.8, 0.95),
        specificity_range: (0.8, 0.95),
        seed: 5,
        ..SimulationConfig::default()
    })
    .unwrap();
    let mut records = sim.annotations.clone();
    for (id, _) in &sim.truth {
        records.push(AnnotationRecord {
            image_id: id.clone(),
            rater_id: "always".into(),
            labels: PatternVector::from_mask(0x7f),
        });
    }
    let ds = AnnotationDataset::from_records(records).unwrap();
    let result = infer_sr(&ds, &EmConfig::default()).unwrap();
    for fit in &result.patterns {
        let m = fit.confusions["always"];
        assert!(m[0][1] > 0.95 && m[1][1] > 0.95, "{m:?}");
    }
    let truth: BTreeMap<&str, PatternVector> = sim.truth.iter().map(|(i, v)| (i.as_str(), *v)).collect();
    let hard = result.hard_labels();
    let wrong: usize = truth
        .iter()
        .map(|(id, t)| Pattern::ALL.iter().filter(|&&p| hard[id].get(p) != t.get(p)).count())
        .sum();
    let absent_cells: usize = truth.values().map(|t| 7 - t.present().count()).sum();
    // an always-present rater that dominated would turn most absent cells on
    assert!(wrong * 10 < absent_cells, "{wrong} wrong of {absent_cells} absent cells");
}

#[test]
fn em_estimates_track_truth_known_rates_at_scale() {
    let sim = simulate(&SimulationConfig {
        images: 20_000,
        seed: 3,
        ..SimulationConfig::default()
    })
    .unwrap();
    let ds = AnnotationDataset::from_records(sim.annotations.clone()).unwrap();
    let result = infer_sr(&ds, &EmConfig::default()).unwrap();
    let truth: BTreeMap<&str, PatternVector> = sim.truth.iter().map(|(i, v)| (i.as_str(), *v)).collect();
    for p in Pattern::ALL {
        let fit = &result.patterns[p.index()];
        let prevalence = truth.values().filter(|v| v.get(p)).count() as f64 / truth.len() as f64;
        assert!((fit.prior - prevalence).abs() < 0.02, "{} prior {} vs {prevalence}", p.code(), fit.prior);
        for rater in ds.raters() {
            let mut c = [[0.0f64; 2]; 2];
            for r in sim.annotations.iter().filter(|r| &r.rater_id == rater) {
                c[usize::from(truth[r.image_id.as_str()].get(p))][usize::from(r.labels.get(p))] += 1.0;
            }
            let m = fit.confusions[rater];
            for t in 0..2 {
                let empirical = c[t][1] / (c[t][0] + c[t][1]);
                assert!((m[t][1] - empirical).abs() < 0.03, "{rater} {} row {t}: {} vs {empirical}", p.code(), m[t][1]);
            }
        }
    }
}
