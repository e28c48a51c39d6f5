//! Agreement between a Grad-CAM heatmap and an expert segmentation mask.
//!
//! The heatmap is min-max normalized per image, then the normalized values
//! are split into foreground (inside the mask) and background. From each
//! region we take the mean, population standard deviation and a fixed-bin
//! histogram density on [0, 1]; the overlap area of the two densities is the
//! headline agreement statistic (1 = indistinguishable, 0 = separated).

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const DEFAULT_BINS: usize = 64;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SaliencyError {
    #[error("{0} region is empty")]
    EmptyRegion(Region),
    #[error("heatmap is {hw}x{hh} but mask is {mw}x{mh}")]
    DimensionMismatch { hw: usize, hh: usize, mw: usize, mh: usize },
    #[error("densities use different bin grids ({0} vs {1} bins)")]
    GridMismatch(usize, usize),
    #[error("density integrates to {0}, expected 1")]
    NotADensity(f64),
    #[error("need at least 2 bins, got {0}")]
    TooFewBins(usize),
    #[error("threshold {0} outside [0, 1]")]
    BadThreshold(f64),
    #[error("image has no pixels or inconsistent size")]
    EmptyImage,
    #[error("{path}: {message}")]
    Io { path: PathBuf, message: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Fg,
    Bg,
}

impl std::fmt::Display for Region {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Region::Fg => "Fg",
            Region::Bg => "Bg",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Heatmap {
    width: usize,
    height: usize,
    values: Vec<f64>,
}

impl Heatmap {
    pub fn new(width: usize, height: usize, values: Vec<f64>) -> Result<Self, SaliencyError> {
        if width == 0 || height == 0 || values.len() != width * height {
            return Err(SaliencyError::EmptyImage);
        }
        Ok(Heatmap { width, height, values })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.values[y * self.width + x]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    fg: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, fg: Vec<bool>) -> Result<Self, SaliencyError> {
        if width == 0 || height == 0 || fg.len() != width * height {
            return Err(SaliencyError::EmptyImage);
        }
        Ok(Mask { width, height, fg })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[bool] {
        &self.fg
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.fg[y * self.width + x]
    }

    pub fn complement(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            fg: self.fg.iter().map(|b| !b).collect(),
        }
    }

    /// Pixel-wise union, used to merge per-pattern segmentations.
    pub fn union(&self, other: &Mask) -> Result<Mask, SaliencyError> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(SaliencyError::DimensionMismatch {
                hw: self.width,
                hh: self.height,
                mw: other.width,
                mh: other.height,
            });
        }
        Ok(Mask {
            width: self.width,
            height: self.height,
            fg: self.fg.iter().zip(&other.fg).map(|(a, b)| *a || *b).collect(),
        })
    }

    /// Nearest-neighbour resample to `width` x `height`.
    pub fn resample(&self, width: usize, height: usize) -> Mask {
        if (width, height) == (self.width, self.height) {
            return self.clone();
        }
        let mut fg = Vec::with_capacity(width * height);
        for y in 0..height {
            let sy = (((y as f64 + 0.5) * self.height as f64 / height as f64) as usize).min(self.height - 1);
            for x in 0..width {
                let sx = (((x as f64 + 0.5) * self.width as f64 / width as f64) as usize).min(self.width - 1);
                fg.push(self.get(sx, sy));
            }
        }
        Mask { width, height, fg }
    }
}

fn check_dims(h: &Heatmap, m: &Mask) -> Result<(), SaliencyError> {
    if (h.width, h.height) != (m.width, m.height) {
        return Err(SaliencyError::DimensionMismatch {
            hw: h.width,
            hh: h.height,
            mw: m.width,
            mh: m.height,
        });
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedHeatmap {
    pub heatmap: Heatmap,
    /// The input was constant; the output is all zeros.
    pub constant_map: bool,
}

pub fn normalize_heatmap(raw: &Heatmap) -> NormalizedHeatmap {
    let (lo, hi) = raw
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let range = hi - lo;
    let constant_map = !(range > 0.0);
    let values = if constant_map {
        vec![0.0; raw.values.len()]
    } else {
        raw.values.iter().map(|v| (v - lo) / range).collect()
    };
    NormalizedHeatmap {
        heatmap: Heatmap {
            width: raw.width,
            height: raw.height,
            values,
        },
        constant_map,
    }
}

/// Histogram density on [0, 1] with equal-width bins.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pdf {
    pub density: Vec<f64>,
}

impl Pdf {
    pub fn bins(&self) -> usize {
        self.density.len()
    }

    pub fn bin_width(&self) -> f64 {
        1.0 / self.density.len() as f64
    }

    pub fn bin_centers(&self) -> Vec<f64> {
        let w = self.bin_width();
        (0..self.bins()).map(|b| (b as f64 + 0.5) * w).collect()
    }

    pub fn integral(&self) -> f64 {
        self.density.iter().sum::<f64>() * self.bin_width()
    }

    fn from_values<'a>(values: impl Iterator<Item = &'a f64>, bins: usize) -> Pdf {
        let mut counts = vec![0u64; bins];
        let mut n = 0u64;
        for &z in values {
            let b = ((z.clamp(0.0, 1.0) * bins as f64) as usize).min(bins - 1);
            counts[b] += 1;
            n += 1;
        }
        let scale = bins as f64 / n as f64;
        Pdf {
            density: counts.iter().map(|&c| c as f64 * scale).collect(),
        }
    }
}

fn region_values<'a>(h: &'a Heatmap, m: &'a Mask, region: Region) -> impl Iterator<Item = &'a f64> + Clone {
    let want = region == Region::Fg;
    h.values.iter().zip(&m.fg).filter(move |(_, &f)| f == want).map(|(v, _)| v)
}

fn region_sizes(m: &Mask) -> (usize, usize) {
    let fg = m.fg.iter().filter(|&&b| b).count();
    (fg, m.fg.len() - fg)
}

fn require_regions(m: &Mask) -> Result<(usize, usize), SaliencyError> {
    let (n_fg, n_bg) = region_sizes(m);
    if n_fg == 0 {
        return Err(SaliencyError::EmptyRegion(Region::Fg));
    }
    if n_bg == 0 {
        return Err(SaliencyError::EmptyRegion(Region::Bg));
    }
    Ok((n_fg, n_bg))
}

/// `(P(z | Fg), P(z | Bg))` for an already normalized heatmap.
pub fn conditional_pdfs(h: &Heatmap, m: &Mask, bins: usize) -> Result<(Pdf, Pdf), SaliencyError> {
    check_dims(h, m)?;
    if bins < 2 {
        return Err(SaliencyError::TooFewBins(bins));
    }
    require_regions(m)?;
    Ok((
        Pdf::from_values(region_values(h, m, Region::Fg), bins),
        Pdf::from_values(region_values(h, m, Region::Bg), bins),
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegionStats {
    pub mean_fg: f64,
    pub mean_bg: f64,
    pub std_fg: f64,
    pub std_bg: f64,
}

fn mean_std<'a>(values: impl Iterator<Item = &'a f64> + Clone) -> (f64, f64) {
    let (sum, n) = values.clone().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    let mean = sum / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

pub fn region_stats(h: &Heatmap, m: &Mask) -> Result<RegionStats, SaliencyError> {
    check_dims(h, m)?;
    require_regions(m)?;
    let (mean_fg, std_fg) = mean_std(region_values(h, m, Region::Fg));
    let (mean_bg, std_bg) = mean_std(region_values(h, m, Region::Bg));
    Ok(RegionStats {
        mean_fg,
        mean_bg,
        std_fg,
        std_bg,
    })
}

/// Overlap area `sum(min(a, b)) * bin_width`.
pub fn pdf_intersection(a: &Pdf, b: &Pdf) -> Result<f64, SaliencyError> {
    if a.bins() != b.bins() || a.bins() == 0 {
        return Err(SaliencyError::GridMismatch(a.bins(), b.bins()));
    }
    for pdf in [a, b] {
        let integral = pdf.integral();
        if (integral - 1.0).abs() > 1e-9 {
            return Err(SaliencyError::NotADensity(integral));
        }
    }
    let overlap = a
        .density
        .iter()
        .zip(&b.density)
        .map(|(x, y)| x.min(*y))
        .sum::<f64>()
        * a.bin_width();
    Ok(overlap.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dice: f64,
    pub jaccard: f64,
}

/// Overlap of `{z >= threshold}` with the mask. Two empty sets score 1.
pub fn dice_jaccard(h: &Heatmap, m: &Mask, threshold: f64) -> Result<Overlap, SaliencyError> {
    check_dims(h, m)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(SaliencyError::BadThreshold(threshold));
    }
    let (mut inter, mut a, mut b) = (0usize, 0usize, 0usize);
    for (&z, &f) in h.values.iter().zip(&m.fg) {
        let hot = z >= threshold;
        a += usize::from(hot);
        b += usize::from(f);
        inter += usize::from(hot && f);
    }
    let union = a + b - inter;
    if union == 0 {
        return Ok(Overlap { dice: 1.0, jaccard: 1.0 });
    }
    Ok(Overlap {
        dice: 2.0 * inter as f64 / (a + b) as f64,
        jaccard: inter as f64 / union as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyStats {
    pub mean_fg: f64,
    pub mean_bg: f64,
    pub std_fg: f64,
    pub std_bg: f64,
    pub intersection: f64,
    pub n_fg: usize,
    pub n_bg: usize,
    pub pdf_fg: Pdf,
    pub pdf_bg: Pdf,
    pub dice: f64,
    pub jaccard: f64,
    pub constant_map: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SaliencyConfig {
    pub bins: usize,
    pub threshold: f64,
}

impl Default for SaliencyConfig {
    fn default() -> Self {
        SaliencyConfig {
            bins: DEFAULT_BINS,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

/// Normalizes `raw` and computes every statistic against `mask`.
pub fn saliency_stats(raw: &Heatmap, mask: &Mask, cfg: &SaliencyConfig) -> Result<SaliencyStats, SaliencyError> {
    let norm = normalize_heatmap(raw);
    let h = &norm.heatmap;
    let (pdf_fg, pdf_bg) = conditional_pdfs(h, mask, cfg.bins)?;
    let stats = region_stats(h, mask)?;
    let intersection = pdf_intersection(&pdf_fg, &pdf_bg)?;
    let overlap = dice_jaccard(h, mask, cfg.threshold)?;
    let (n_fg, n_bg) = region_sizes(mask);
    Ok(SaliencyStats {
        mean_fg: stats.mean_fg,
        mean_bg: stats.mean_bg,
        std_fg: stats.std_fg,
        std_bg: stats.std_bg,
        intersection,
        n_fg,
        n_bg,
        pdf_fg,
        pdf_bg,
        dice: overlap.dice,
        jaccard: overlap.jaccard,
        constant_map: norm.constant_map,
    })
}

/// 8-bit grayscale heatmap file; raw values 0..=255.
pub fn load_heatmap(path: &Path) -> Result<Heatmap, SaliencyError> {
    let img = image::open(path)
        .map_err(|e| SaliencyError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    Heatmap::new(
        img.width() as usize,
        img.height() as usize,
        img.pixels().map(|p| f64::from(p.0[0])).collect(),
    )
}

/// Grayscale mask file; pixels above half of full scale are foreground.
pub fn load_mask(path: &Path) -> Result<Mask, SaliencyError> {
    let img = image::open(path)
        .map_err(|e| SaliencyError::Io {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_luma8();
    Mask::new(
        img.width() as usize,
        img.height() as usize,
        img.pixels().map(|p| p.0[0] > 127).collect(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    pub heatmap_path: PathBuf,
    pub mask_path: PathBuf,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairResult {
    pub image_id: String,
    pub correct: bool,
    pub mask_resampled: bool,
    pub stats: SaliencyStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailure {
    pub image_id: String,
    pub error: String,
}

/// Group means of the per-pair statistics; `None` when the group is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub prediction: String,
    pub pairs: usize,
    pub intersection: Option<f64>,
    pub mean_fg: Option<f64>,
    pub mean_bg: Option<f64>,
    pub std_fg: Option<f64>,
    pub std_bg: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaliencyReport {
    pub config: SaliencyConfig,
    pub groups: Vec<GroupSummary>,
    pub pairs: Vec<PairResult>,
    pub failures: Vec<PairFailure>,
    pub warnings: Vec<String>,
}

fn group_summary(label: &str, pairs: &[&PairResult]) -> GroupSummary {
    let mean = |f: fn(&SaliencyStats) -> f64| {
        (!pairs.is_empty()).then(|| pairs.iter().map(|p| f(&p.stats)).sum::<f64>() / pairs.len() as f64)
    };
    GroupSummary {
        prediction: label.to_string(),
        pairs: pairs.len(),
        intersection: mean(|s| s.intersection),
        mean_fg: mean(|s| s.mean_fg),
        mean_bg: mean(|s| s.mean_bg),
        std_fg: mean(|s| s.std_fg),
        std_bg: mean(|s| s.std_bg),
    }
}

/// Builds the grouped report from already computed pairs.
pub fn summarize(
    config: SaliencyConfig,
    mut pairs: Vec<PairResult>,
    mut failures: Vec<PairFailure>,
) -> SaliencyReport {
    pairs.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    failures.sort_by(|a, b| a.image_id.cmp(&b.image_id));
    let correct: Vec<&PairResult> = pairs.iter().filter(|p| p.correct).collect();
    let incorrect: Vec<&PairResult> = pairs.iter().filter(|p| !p.correct).collect();
    let groups = vec![group_summary("Correct", &correct), group_summary("Incorrect", &incorrect)];
    let mut warnings = Vec::new();
    if pairs.is_empty() && failures.is_empty() {
        warnings.push("no heatmap/mask pairs in input".to_string());
    }
    if !failures.is_empty() {
        warnings.push(format!("{} pair(s) failed and were excluded from the aggregates", failures.len()));
    }
    for p in pairs.iter().filter(|p| p.stats.constant_map) {
        warnings.push(format!("{}: constant heatmap", p.image_id));
    }
    SaliencyReport {
        config,
        groups,
        pairs,
        failures,
        warnings,
    }
}

fn process_entry(entry: &ManifestEntry, base: &Path, cfg: &SaliencyConfig) -> Result<PairResult, SaliencyError> {
    let heatmap = load_heatmap(&base.join(&entry.heatmap_path))?;
    let mask = load_mask(&base.join(&entry.mask_path))?;
    let resampled = (mask.width, mask.height) != (heatmap.width, heatmap.height);
    let mask = mask.resample(heatmap.width, heatmap.height);
    Ok(PairResult {
        image_id: entry.image_id.clone(),
        correct: entry.correct,
        mask_resampled: resampled,
        stats: saliency_stats(&heatmap, &mask, cfg)?,
    })
}

/// Loads and analyses every manifest entry; paths resolve against `base`.
pub fn batch_saliency(entries: &[ManifestEntry], base: &Path, cfg: &SaliencyConfig) -> SaliencyReport {
    let results: Vec<Result<PairResult, PairFailure>> = entries
        .par_iter()
        .map(|e| {
            process_entry(e, base, cfg).map_err(|err| PairFailure {
                image_id: e.image_id.clone(),
                error: err.to_string(),
            })
        })
        .collect();
    let (mut ok, mut failed) = (Vec::new(), Vec::new());
    for r in results {
        match r {
            Ok(p) => ok.push(p),
            Err(f) => failed.push(f),
        }
    }
    summarize(*cfg, ok, failed)
}

impl SaliencyReport {
    pub fn to_markdown(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.2}"));
        let mut out = String::from(
            "| Prediction | Intersection | Mean P(z(x,y) \\| Fg) | Mean P(z(x,y) \\| Bg) | Std P(z(x,y) \\| Fg) | Std P(z(x,y) \\| Bg) |\n\
             |---|---|---|---|---|---|\n",
        );
        for g in &self.groups {
            out.push_str(&format!(
                "| {} | {} | {} | {} | {} | {} |\n",
                g.prediction,
                cell(g.intersection),
                cell(g.mean_fg),
                cell(g.mean_bg),
                cell(g.std_fg),
                cell(g.std_bg)
            ));
        }
        out.push('\n');
        out.push_str(&format!(
            "{} pair(s) analysed, {} excluded; {} density bins.\n",
            self.pairs.len(),
            self.failures.len(),
            self.config.bins
        ));
        out
    }
}
