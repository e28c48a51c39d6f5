use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use super::config::{Range, Resolver};
use super::{AugmentArgs, CliError, ConsensusArgs, ExplainArgs, MetricsArgs, RunRecord, SaliencyArgs, SimulateArgs, SplitArgs};
use crate::augment::{augment as augment_image, AugmentConfig};
use crate::consensus::{infer_sr, EmConfig};
use crate::folds::{fold_balance_report, stratified_kfold, BalanceReport};
use crate::io;
use crate::metrics::{build_report, EvalSample};
use crate::model::{Pattern, PatternVector};
use crate::rules::{binary_of, explain as explain_vector, Explanation};
use crate::saliency::{batch_saliency, SaliencyConfig};
use crate::simulate::{simulate as run_simulation, SimulationConfig};

pub struct Context<'a> {
    pub seed: u64,
    pub out_dir: &'a Path,
}

impl Context<'_> {
    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }
}

fn bad_params(message: impl std::fmt::Display) -> CliError {
    CliError::validation("BadParams", message.to_string())
}

pub fn simulate(ctx: &Context, a: &SimulateArgs, r: &mut Resolver) -> Result<RunRecord, CliError> {
    let d = SimulationConfig::default();
    let range = |t: (f64, f64)| Range(t.0, t.1);
    let cfg = SimulationConfig {
        raters: r.resolve("raters", a.raters, d.raters)?,
        images: r.resolve("images", a.images, d.images)?,
        sensitivity_range: {
            let Range(lo, hi) = r.resolve("sensitivity", a.sensitivity, range(d.sensitivity_range))?;
            (lo, hi)
        },
        specificity_range: {
            let Range(lo, hi) = r.resolve("specificity", a.specificity, range(d.specificity_range))?;
            (lo, hi)
        },
        prior_range: {
            let Range(lo, hi) = r.resolve("prior", a.prior, range(d.prior_range))?;
            (lo, hi)
        },
        coverage: r.resolve("coverage", a.coverage, d.coverage)?,
        seed: ctx.seed,
    };
    let sim = run_simulation(&cfg).map_err(bad_params)?;

    let annotations = ctx.out("annotations.csv");
    io::write_annotations(&annotations, &sim.annotations)?;
    let truth = ctx.out("truth.csv");
    io::write_labels(
        &truth,
        sim.truth
            .iter()
            .map(|(id, v)| (id.as_str(), *v, Some(binary_of(v).is_bcc()))),
        true,
    )?;
    let planted = ctx.out("planted.json");
    io::write_json(&planted, &sim.planted)?;
    log::info!("simulated {} annotations", sim.annotations.len());
    Ok(RunRecord {
        inputs: vec![],
        outputs: vec![annotations, truth, planted],
    })
}

pub fn consensus(ctx: &Context, a: &ConsensusArgs, r: &mut Resolver) -> Result<RunRecord, CliError> {
    let d = EmConfig::default();
    let cfg = EmConfig {
        max_iters: r.resolve("max-iters", a.max_iters, d.max_iters)?,
        tol: r.resolve("tol", a.tol, d.tol)?,
        smoothing: r.resolve("smoothing", a.smoothing, d.smoothing)?,
        seed: ctx.seed,
    };
    let ds = io::read_annotations(&a.annotations)?;
    let result = infer_sr(&ds, &cfg).map_err(|e| CliError::validation("ValidationError", e.to_string()))?;
    if !result.converged {
        log::warn!("EM reached max_iters = {} before converging", cfg.max_iters);
    }
    let json = ctx.out("consensus.json");
    io::write_json(&json, &result)?;
    let sr = ctx.out("sr.csv");
    io::write_labels(
        &sr,
        result
            .images
            .iter()
            .map(|i| (i.image_id.as_str(), i.labels, Some(binary_of(&i.labels).is_bcc()))),
        true,
    )?;
    Ok(RunRecord {
        inputs: vec![a.annotations.clone()],
        outputs: vec![json, sr],
    })
}

fn balance_markdown(b: &BalanceReport) -> String {
    let mut out = String::from("| Fold | Size |");
    for p in Pattern::ALL {
        let _ = write!(out, " {} |", p.abbreviation());
    }
    out.push_str("\n|---|---|");
    out.push_str(&"---|".repeat(Pattern::COUNT));
    out.push('\n');
    for f in &b.folds {
        let _ = write!(out, "| {} | {} |", f.fold, f.size);
        for (c, p) in f.positives.iter().zip(&f.proportions) {
            match p {
                Some(p) => {
                    let _ = write!(out, " {c} ({p:.3}) |");
                }
                None => {
                    let _ = write!(out, " {c} (-) |");
                }
            }
        }
        out.push('\n');
    }
    let _ = write!(out, "| all | {} |", b.samples);
    for (c, p) in b.global_positives.iter().zip(&b.global_prevalence) {
        let _ = write!(out, " {c} ({p:.3}) |");
    }
    let _ = writeln!(out, "\n\nMax prevalence deviation from global: {:.4}", b.max_deviation);
    out
}

pub fn split(ctx: &Context, a: &SplitArgs, r: &mut Resolver) -> Result<RunRecord, CliError> {
    let k = r.resolve("k", a.k, 5usize)?;
    let labels: BTreeMap<String, PatternVector> = io::read_labels(&a.labels)?
        .into_iter()
        .map(|(id, row)| (id, row.labels))
        .collect();
    let fa = stratified_kfold(&labels, k, ctx.seed).map_err(|e| {
        CliError::validation(
            match e {
                crate::folds::FoldError::TooFewSamples { .. } => "TooFewSamples",
                _ => "ValidationError",
            },
            e.to_string(),
        )
    })?;
    let balance = fold_balance_report(&fa, &labels).map_err(|e| CliError::validation("ValidationError", e.to_string()))?;
    let folds = ctx.out("folds.csv");
    io::write_folds(&folds, &fa)?;
    let json = ctx.out("balance.json");
    io::write_json(&json, &balance)?;
    let md = ctx.out("balance.md");
    io::write_text(&md, &balance_markdown(&balance))?;
    Ok(RunRecord {
        inputs: vec![a.labels.clone()],
        outputs: vec![folds, json, md],
    })
}

pub fn metrics(ctx: &Context, a: &MetricsArgs) -> Result<RunRecord, CliError> {
    let pred = io::read_labels(&a.pred)?;
    let sr = io::read_labels(&a.sr)?;
    let folds = io::read_folds(&a.folds)?;
    let missing = |what: &str, id: &str| CliError::validation("MissingImage", format!("image {id:?} missing from {what}"));
    let mut samples = Vec::with_capacity(sr.len());
    for (id, truth) in &sr {
        let p = pred.get(id).ok_or_else(|| missing("predictions", id))?;
        let fold = folds.fold_of(id).ok_or_else(|| missing("folds", id))?;
        samples.push(EvalSample {
            image_id: id.clone(),
            fold,
            pred: p.labels,
            pred_bcc: p.bcc.unwrap_or_else(|| binary_of(&p.labels).is_bcc()),
            truth: truth.labels,
            truth_bcc: truth.bcc.unwrap_or_else(|| binary_of(&truth.labels).is_bcc()),
        });
    }
    let extra = pred.keys().filter(|id| !sr.contains_key(*id)).count();
    if extra > 0 {
        log::warn!("{extra} prediction(s) have no reference label and were ignored");
    }
    let report = build_report(&samples).map_err(|e| CliError::validation("SchemaError", e.to_string()))?;
    let json = ctx.out("metrics.json");
    io::write_json(&json, &report)?;
    let md = ctx.out("table.md");
    io::write_text(&md, &report.to_markdown())?;
    Ok(RunRecord {
        inputs: vec![a.pred.clone(), a.sr.clone(), a.folds.clone()],
        outputs: vec![json, md],
    })
}

fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || "._-".contains(c) { c } else { '_' })
        .collect()
}

pub fn saliency(ctx: &Context, a: &SaliencyArgs, r: &mut Resolver) -> Result<RunRecord, CliError> {
    let d = SaliencyConfig::default();
    let cfg = SaliencyConfig {
        bins: r.resolve("bins", a.bins, d.bins)?,
        threshold: r.resolve("threshold", a.threshold, d.threshold)?,
    };
    if cfg.bins < 2 {
        return Err(bad_params("bins must be >= 2"));
    }
    if !(0.0..=1.0).contains(&cfg.threshold) {
        return Err(bad_params("threshold must be in [0, 1]"));
    }
    let entries = io::read_saliency_manifest(&a.manifest)?;
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let report = batch_saliency(&entries, base, &cfg);
    for f in &report.failures {
        log::warn!("{}: {}", f.image_id, f.error);
    }

    let json = ctx.out("saliency.json");
    io::write_json(&json, &report)?;
    let md = ctx.out("table.md");
    io::write_text(&md, &report.to_markdown())?;
    let mut outputs = vec![json, md];
    if !report.pairs.is_empty() {
        let dir = ctx.out("densities");
        std::fs::create_dir_all(&dir).map_err(|e| CliError::io(&dir, e))?;
        for p in &report.pairs {
            let path = dir.join(format!("{}.csv", file_stem_for(&p.image_id)));
            io::write_density_csv(
                &path,
                &p.stats.pdf_fg.bin_centers(),
                &p.stats.pdf_fg.density,
                &p.stats.pdf_bg.density,
            )?;
            outputs.push(path);
        }
    }
    let mut inputs = vec![a.manifest.clone()];
    for e in &entries {
        for p in [&e.heatmap_path, &e.mask_path] {
            let full = base.join(p);
            if full.is_file() {
                inputs.push(full);
            }
        }
    }
    Ok(RunRecord { inputs, outputs })
}

#[derive(Serialize)]
struct ExplanationLine<'a> {
    image_id: &'a str,
    #[serde(flatten)]
    explanation: Explanation,
}

pub fn explain(ctx: &Context, a: &ExplainArgs) -> Result<RunRecord, CliError> {
    let labels = io::read_labels(&a.labels)?;
    let mut text = String::new();
    for (id, row) in &labels {
        let line = ExplanationLine {
            image_id: id,
            explanation: explain_vector(&row.labels),
        };
        text.push_str(&serde_json::to_string(&line).expect("serializable"));
        text.push('\n');
    }
    let out = ctx.out("explanations.jsonl");
    io::write_text(&out, &text)?;
    Ok(RunRecord {
        inputs: vec![a.labels.clone()],
        outputs: vec![out],
    })
}

pub fn augment(ctx: &Context, a: &AugmentArgs, r: &mut Resolver) -> Result<RunRecord, CliError> {
    let d = AugmentConfig::default();
    let copies = r.resolve("copies", a.copies, 1usize)?;
    let blur = r.resolve("blur-sigma", a.blur_sigma, Range(d.blur_sigma_range.0, d.blur_sigma_range.1))?;
    let cfg = AugmentConfig {
        seed: ctx.seed,
        rotation_max_deg: r.resolve("rotation-max-deg", a.rotation_max_deg, d.rotation_max_deg)?,
        perspective_distortion: r.resolve("perspective-distortion", a.perspective_distortion, d.perspective_distortion)?,
        blur_sigma_range: (blur.0, blur.1),
        rotation_prob: r.resolve("rotation-prob", a.rotation_prob, d.rotation_prob)?,
        perspective_prob: r.resolve("perspective-prob", a.perspective_prob, d.perspective_prob)?,
        blur_prob: r.resolve("blur-prob", a.blur_prob, d.blur_prob)?,
    };
    cfg.validate().map_err(bad_params)?;

    let dir = &a.input_dir;
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();

    let mut outputs = Vec::new();
    for (i, path) in files.iter().enumerate() {
        let img = image::open(path)
            .map_err(|e| CliError {
                kind: "IoError".into(),
                message: format!("{}: {e}", path.display()),
                exit_code: 2,
            })?
            .to_rgb8();
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        for n in 0..copies {
            let index = (i * copies + n) as u64;
            let out = augment_image(&img, &cfg, index).map_err(|e| CliError::validation("EmptyImage", e.to_string()))?;
            let target = ctx.out(&format!("{stem}_aug{n}.png"));
            out.save(&target).map_err(|e| CliError {
                kind: "IoError".into(),
                message: format!("{}: {e}", target.display()),
                exit_code: 2,
            })?;
            outputs.push(target);
        }
    }
    Ok(RunRecord {
        inputs: vec![dir.clone()],
        outputs,
    })
}
