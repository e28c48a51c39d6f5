#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use bcc_xai::saliency::{Heatmap, Mask};
use bcc_xai::simulate::{simulate, SimulationConfig};
use bcc_xai::AnnotationDataset;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests").join("fixtures")
}

/// Runs the compiled binary with `dir` as working directory.
pub fn run_bin(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bcc-xai"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

pub fn stderr_json(out: &Output) -> serde_json::Value {
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().unwrap_or_default();
    serde_json::from_str(line).unwrap_or_else(|_| panic!("stderr is not JSON: {text}"))
}

/// Random sparse multi-rater dataset: raters of mixed quality (some worse
/// than chance), partial coverage, priors anywhere in (0, 1).
pub fn random_sparse_dataset(seed: u64) -> AnnotationDataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let lo_q = rng.random_range(0.2..0.8);
    let hi_q = rng.random_range(lo_q..1.0);
    let lo_p = rng.random_range(0.0..0.5);
    let cfg = SimulationConfig {
        raters: rng.random_range(1..=7),
        images: rng.random_range(3..=80),
        sensitivity_range: (lo_q, hi_q),
        specificity_range: (rng.random_range(0.2..0.6), rng.random_range(0.6..1.0)),
        prior_range: (lo_p, rng.random_range(lo_p..1.0)),
        coverage: rng.random_range(0.2..1.0),
        seed,
    };
    AnnotationDataset::from_records(simulate(&cfg).unwrap().annotations).unwrap()
}

/// Random heatmap/mask pair with both regions non-empty.
pub fn random_pair(rng: &mut ChaCha8Rng) -> (Heatmap, Mask) {
    let (w, h) = loop {
        let w = rng.random_range(1..=64usize);
        let h = rng.random_range(1..=64usize);
        if w * h >= 2 {
            break (w, h);
        }
    };
    let n = w * h;
    let integer = rng.random_bool(0.5);
    let values: Vec<f64> = (0..n)
        .map(|_| {
            if integer {
                f64::from(rng.random_range(0..=255u8))
            } else {
                rng.random_range(-3.0..7.0)
            }
        })
        .collect();
    let density = rng.random_range(0.05..0.95);
    let mut fg: Vec<bool> = (0..n).map(|_| rng.random_bool(density)).collect();
    let a = rng.random_range(0..n);
    let b = (a + 1 + rng.random_range(0..n - 1)) % n;
    fg[a] = true;
    fg[b] = false;
    (Heatmap::new(w, h, values).unwrap(), Mask::new(w, h, fg).unwrap())
}

pub struct OracleStats {
    pub mean_fg: f64,
    pub mean_bg: f64,
    pub std_fg: f64,
    pub std_bg: f64,
    pub pdf_fg: Vec<f64>,
    pub pdf_bg: Vec<f64>,
    pub intersection: f64,
}

/// Pixel-by-pixel reference computation over the (x, y) grid.
pub fn saliency_oracle(raw: &Heatmap, mask: &Mask, bins: usize) -> OracleStats {
    let (w, h) = (raw.width(), raw.height());
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for y in 0..h {
        for x in 0..w {
            lo = lo.min(raw.get(x, y));
            hi = hi.max(raw.get(x, y));
        }
    }
    let z = |x: usize, y: usize| {
        if hi > lo {
            (raw.get(x, y) - lo) / (hi - lo)
        } else {
            0.0
        }
    };
    let region = |want: bool| {
        let mut vals = Vec::new();
        for y in 0..h {
            for x in 0..w {
                if mask.get(x, y) == want {
                    vals.push(z(x, y));
                }
            }
        }
        vals
    };
    let moments = |vals: &[f64]| {
        let mut s = 0.0;
        for v in vals {
            s += v;
        }
        let mean = s / vals.len() as f64;
        let mut ss = 0.0;
        for v in vals {
            ss += (v - mean) * (v - mean);
        }
        (mean, (ss / vals.len() as f64).sqrt())
    };
    let density = |vals: &[f64]| {
        let mut pdf = vec![0.0; bins];
        for &v in vals {
            // largest b with b <= v * bins, capped at the last bin
            let mut b = 0;
            while b + 1 < bins && ((b + 1) as f64) <= v * bins as f64 {
                b += 1;
            }
            pdf[b] += 1.0;
        }
        let width = 1.0 / bins as f64;
        for d in &mut pdf {
            *d /= vals.len() as f64 * width;
        }
        pdf
    };
    let fg = region(true);
    let bg = region(false);
    let (mean_fg, std_fg) = moments(&fg);
    let (mean_bg, std_bg) = moments(&bg);
    let pdf_fg = density(&fg);
    let pdf_bg = density(&bg);
    let mut intersection = 0.0;
    for b in 0..bins {
        intersection += pdf_fg[b].min(pdf_bg[b]) / bins as f64;
    }
    OracleStats {
        mean_fg,
        mean_bg,
        std_fg,
        std_bg,
        pdf_fg,
        pdf_bg,
        intersection,
    }
}

/// Writes an 8-bit grayscale PNG from row-major values.
pub fn write_gray_png(path: &Path, width: u32, height: u32, values: &[u8]) {
    image::GrayImage::from_raw(width, height, values.to_vec())
        .expect("buffer matches dimensions")
        .save(path)
        .expect("png written");
}

/// Saliency fixture set with analytically known statistics:
/// `a_separated` (correct) heatmap hot exactly on the mask,
/// `b_gradient` (correct) horizontal ramp with the mask on the hot half,
/// `c_vertical` (incorrect) vertical ramp with the mask on the left half,
/// `d_resampled` (incorrect) as `c_vertical` with an 8x8 mask, and
/// `e_missing` whose heatmap file does not exist.
pub fn write_saliency_fixture(dir: &Path) -> PathBuf {
    let ramp = [0u8, 85, 170, 255];
    let mut a_heat = vec![0u8; 16];
    let mut a_mask = vec![0u8; 16];
    let mut b_heat = vec![0u8; 16];
    let mut b_mask = vec![0u8; 16];
    let mut c_heat = vec![0u8; 16];
    let mut c_mask = vec![0u8; 16];
    for y in 0..4 {
        for x in 0..4 {
            let i = y * 4 + x;
            if x < 2 && y < 2 {
                a_heat[i] = 255;
                a_mask[i] = 255;
            }
            b_heat[i] = ramp[x];
            b_mask[i] = if x >= 2 { 255 } else { 0 };
            c_heat[i] = ramp[y];
            c_mask[i] = if x < 2 { 255 } else { 0 };
        }
    }
    let d_mask: Vec<u8> = (0..64).map(|i| if i % 8 < 4 { 200 } else { 10 }).collect();
    write_gray_png(&dir.join("a_heat.png"), 4, 4, &a_heat);
    write_gray_png(&dir.join("a_mask.png"), 4, 4, &a_mask);
    write_gray_png(&dir.join("b_heat.png"), 4, 4, &b_heat);
    write_gray_png(&dir.join("b_mask.png"), 4, 4, &b_mask);
    write_gray_png(&dir.join("c_heat.png"), 4, 4, &c_heat);
    write_gray_png(&dir.join("c_mask.png"), 4, 4, &c_mask);
    write_gray_png(&dir.join("d_mask.png"), 8, 8, &d_mask);
    let manifest = dir.join("manifest.csv");
    std::fs::write(
        &manifest,
        "image_id,heatmap_path,mask_path,correct\n\
         a_separated,a_heat.png,a_mask.png,1\n\
         b_gradient,b_heat.png,b_mask.png,1\n\
         c_vertical,c_heat.png,c_mask.png,0\n\
         d_resampled,c_heat.png,d_mask.png,0\n\
         e_missing,nope.png,a_mask.png,1\n",
    )
    .unwrap();
    manifest
}

/// Every file under `root`, relative path → bytes, skipping manifests.
pub fn snapshot(root: &Path) -> std::collections::BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut std::collections::BTreeMap<PathBuf, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else if p.file_name().is_some_and(|n| n != "manifest.json") {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    let mut out = std::collections::BTreeMap::new();
    walk(root, root, &mut out);
    out
}
