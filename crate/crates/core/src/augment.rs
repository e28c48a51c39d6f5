//! Seeded image augmentation: rotation, random perspective, Gaussian blur.
//!
//! Transforms run in that fixed order, each gated by its own apply
//! probability. Every random draw comes from a ChaCha stream selected by
//! `(seed, index)`, so the same image, config and index always give the same
//! bytes. Geometric transforms use bilinear sampling with black fill.

use image::{Rgb, RgbImage};
use nalgebra::{SMatrix, SVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AugmentError {
    #[error("image has no pixels")]
    EmptyImage,
    #[error("invalid augmentation config: {0}")]
    BadConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub seed: u64,
    /// Rotation angle is uniform in `[-max, max]` degrees.
    pub rotation_max_deg: f64,
    /// Corner displacement as a fraction of the half width/height, in [0, 1).
    pub perspective_distortion: f64,
    pub blur_sigma_range: (f64, f64),
    pub rotation_prob: f64,
    pub perspective_prob: f64,
    pub blur_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            seed: 0,
            rotation_max_deg: 180.0,
            perspective_distortion: 0.3,
            blur_sigma_range: (0.5, 1.5),
            rotation_prob: 0.5,
            perspective_prob: 0.5,
            blur_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), AugmentError> {
        let bad = |m: &str| Err(AugmentError::BadConfig(m.to_string()));
        if !(self.rotation_max_deg >= 0.0) || !self.rotation_max_deg.is_finite() {
            return bad("rotation_max_deg must be finite and >= 0");
        }
        if !(0.0..1.0).contains(&self.perspective_distortion) {
            return bad("perspective_distortion must be in [0, 1)");
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            return bad("blur_sigma_range must satisfy 0 <= lo <= hi");
        }
        for p in [self.rotation_prob, self.perspective_prob, self.blur_prob] {
            if !(0.0..=1.0).contains(&p) {
                return bad("apply probabilities must be in [0, 1]");
            }
        }
        Ok(())
    }
}

/// Parameters actually drawn for one call, `None` when a transform was skipped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AugmentDraw {
    pub rotation_deg: Option<f64>,
    pub perspective_corners: Option<[(f64, f64); 4]>,
    pub blur_sigma: Option<f64>,
}

pub fn draw_params(width: u32, height: u32, cfg: &AugmentConfig, index: u64) -> AugmentDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(index);

    let apply_rot = rng.random::<f64>() < cfg.rotation_prob;
    let angle = (2.0 * rng.random::<f64>() - 1.0) * cfg.rotation_max_deg;

    let apply_persp = rng.random::<f64>() < cfg.perspective_prob;
    let (w, h) = (f64::from(width - 1), f64::from(height - 1));
    let dx = cfg.perspective_distortion * f64::from(width) / 2.0;
    let dy = cfg.perspective_distortion * f64::from(height) / 2.0;
    let mut jitter = |scale: f64| scale * rng.random::<f64>();
    let corners = [
        (jitter(dx), jitter(dy)),
        (w - jitter(dx), jitter(dy)),
        (w - jitter(dx), h - jitter(dy)),
        (jitter(dx), h - jitter(dy)),
    ];

    let apply_blur = rng.random::<f64>() < cfg.blur_prob;
    let (lo, hi) = cfg.blur_sigma_range;
    let sigma = lo + (hi - lo) * rng.random::<f64>();

    AugmentDraw {
        rotation_deg: apply_rot.then_some(angle),
        perspective_corners: apply_persp.then_some(corners),
        blur_sigma: apply_blur.then_some(sigma),
    }
}

pub fn augment(image: &RgbImage, cfg: &AugmentConfig, index: u64) -> Result<RgbImage, AugmentError> {
    if image.width() == 0 || image.height() == 0 {
        return Err(AugmentError::EmptyImage);
    }
    cfg.validate()?;
    let draw = draw_params(image.width(), image.height(), cfg, index);
    let mut out = image.clone();
    if let Some(deg) = draw.rotation_deg {
        out = rotate(&out, deg);
    }
    if let Some(corners) = draw.perspective_corners {
        out = perspective(&out, corners);
    }
    if let Some(sigma) = draw.blur_sigma {
        out = gaussian_blur(&out, sigma);
    }
    Ok(out)
}

fn snap(v: f64) -> f64 {
    let r = v.round();
    if (v - r).abs() < 1e-9 {
        r
    } else {
        v
    }
}

fn sample(img: &RgbImage, x: f64, y: f64) -> Rgb<u8> {
    let (x, y) = (snap(x), snap(y));
    let (w, h) = (img.width(), img.height());
    if !(x >= 0.0 && y >= 0.0 && x <= f64::from(w - 1) && y <= f64::from(h - 1)) {
        return Rgb([0, 0, 0]);
    }
    let (x0, y0) = (x.floor() as u32, y.floor() as u32);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - f64::from(x0), y - f64::from(y0));
    let (p00, p10, p01, p11) = (
        img.get_pixel(x0, y0),
        img.get_pixel(x1, y0),
        img.get_pixel(x0, y1),
        img.get_pixel(x1, y1),
    );
    let mut out = [0u8; 3];
    for c in 0..3 {
        let top = f64::from(p00[c]) * (1.0 - fx) + f64::from(p10[c]) * fx;
        let bottom = f64::from(p01[c]) * (1.0 - fx) + f64::from(p11[c]) * fx;
        out[c] = (top * (1.0 - fy) + bottom * fy).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(out)
}

/// Rotates counter-clockwise by `degrees` about the image centre.
pub fn rotate(img: &RgbImage, degrees: f64) -> RgbImage {
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = f64::from(img.width() - 1) / 2.0;
    let cy = f64::from(img.height() - 1) / 2.0;
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let dx = f64::from(x) - cx;
        let dy = f64::from(y) - cy;
        sample(img, cx + cos * dx - sin * dy, cy + sin * dx + cos * dy)
    })
}

type Homography = [f64; 9];

/// Projective map taking each `from[i]` to `to[i]`.
fn homography(from: &[(f64, f64); 4], to: &[(f64, f64); 4]) -> Option<Homography> {
    let mut a = SMatrix::<f64, 8, 8>::zeros();
    let mut b = SVector::<f64, 8>::zeros();
    for (i, (&(x, y), &(u, v))) in from.iter().zip(to).enumerate() {
        let r = 2 * i;
        a.row_mut(r)
            .copy_from_slice(&[x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y]);
        a.row_mut(r + 1)
            .copy_from_slice(&[0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y]);
        b[r] = u;
        b[r + 1] = v;
    }
    let h = a.lu().solve(&b)?;
    Some([h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], 1.0])
}

/// Warps so that the image corners (TL, TR, BR, BL) land on `corners`.
pub fn perspective(img: &RgbImage, corners: [(f64, f64); 4]) -> RgbImage {
    let (w, h) = (f64::from(img.width() - 1), f64::from(img.height() - 1));
    let frame = [(0.0, 0.0), (w, 0.0), (w, h), (0.0, h)];
    let Some(m) = homography(&corners, &frame) else {
        return img.clone();
    };
    RgbImage::from_fn(img.width(), img.height(), |x, y| {
        let (x, y) = (f64::from(x), f64::from(y));
        let d = m[6] * x + m[7] * y + m[8];
        if d.abs() < 1e-12 {
            return Rgb([0, 0, 0]);
        }
        sample(
            img,
            (m[0] * x + m[1] * y + m[2]) / d,
            (m[3] * x + m[4] * y + m[5]) / d,
        )
    })
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as i64;
    let raw: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Separable Gaussian blur with clamped borders. `sigma <= 0` is a no-op.
pub fn gaussian_blur(img: &RgbImage, sigma: f64) -> RgbImage {
    if !(sigma > 0.0) {
        return img.clone();
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as i64;
    let (w, h) = (img.width() as i64, img.height() as i64);
    let at = |buf: &[f64], x: i64, y: i64, c: usize| buf[((y * w + x) * 3) as usize + c];
    let src: Vec<f64> = img.as_raw().iter().map(|&v| f64::from(v)).collect();

    let mut horiz = vec![0.0; src.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                horiz[((y * w + x) * 3) as usize + c] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * at(&src, (x + k as i64 - radius).clamp(0, w - 1), y, c))
                    .sum();
            }
        }
    }
    let mut out = RgbImage::new(img.width(), img.height());
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for (c, v) in px.iter_mut().enumerate() {
                let s: f64 = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, wt)| wt * at(&horiz, x, (y + k as i64 - radius).clamp(0, h - 1), c))
                    .sum();
                *v = s.round().clamp(0.0, 255.0) as u8;
            }
            out.put_pixel(x as u32, y as u32, Rgb(px));
        }
    }
    out
}
