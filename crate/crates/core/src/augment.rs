//! Random geometric and intensity augmentation of an image plane and its labels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{bilinear, nearest};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentParams {
    pub rotation_prob: f64,
    pub max_rotation_deg: f64,
    pub shift_prob: f64,
    pub max_shift_px: f64,
    pub scale_prob: f64,
    pub scale_range: (f64, f64),
    pub elastic_prob: f64,
    /// Standard deviation of control-point displacements, in pixels.
    pub elastic_sigma_px: f64,
    /// Control points per axis.
    pub elastic_grid: usize,
    pub noise_prob: f64,
    pub max_noise_sigma: f64,
    pub blur_prob: f64,
    pub blur_sigma_range: (f64, f64),
    pub bias_prob: f64,
    /// Bound on the coefficients of the log-domain quadratic bias field.
    pub bias_strength: f64,
}

impl Default for AugmentParams {
    fn default() -> Self {
        Self {
            rotation_prob: 0.3,
            max_rotation_deg: 15.0,
            shift_prob: 0.3,
            max_shift_px: 4.0,
            scale_prob: 0.3,
            scale_range: (0.9, 1.1),
            elastic_prob: 0.2,
            elastic_sigma_px: 1.5,
            elastic_grid: 5,
            noise_prob: 0.15,
            max_noise_sigma: 0.05,
            blur_prob: 0.15,
            blur_sigma_range: (0.5, 1.0),
            bias_prob: 0.15,
            bias_strength: 0.2,
        }
    }
}

impl AugmentParams {
    /// Every transform disabled.
    pub fn none() -> Self {
        Self {
            rotation_prob: 0.0,
            shift_prob: 0.0,
            scale_prob: 0.0,
            elastic_prob: 0.0,
            noise_prob: 0.0,
            blur_prob: 0.0,
            bias_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let probs = [
            self.rotation_prob,
            self.shift_prob,
            self.scale_prob,
            self.elastic_prob,
            self.noise_prob,
            self.blur_prob,
            self.bias_prob,
        ];
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("augmentation probabilities must lie in [0, 1]".into()));
        }
        let nonneg = [
            self.max_rotation_deg,
            self.max_shift_px,
            self.elastic_sigma_px,
            self.max_noise_sigma,
            self.bias_strength,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0 && v.is_finite())) {
            return Err(Error::Config("augmentation magnitudes must be finite and nonnegative".into()));
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("scale range {:?} is invalid", self.scale_range)));
        }
        let (lo, hi) = self.blur_sigma_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("blur range {:?} is invalid", self.blur_sigma_range)));
        }
        if self.elastic_grid < 2 {
            return Err(Error::Config("elastic grid needs at least 2 control points per axis".into()));
        }
        Ok(())
    }
}

/// Rotation and isotropic scaling about the image centre, then a shift.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineWarp {
    pub angle_rad: f64,
    pub scale: f64,
    pub shift_px: (f64, f64),
}

impl AffineWarp {
    pub fn identity() -> Self {
        Self {
            angle_rad: 0.0,
            scale: 1.0,
            shift_px: (0.0, 0.0),
        }
    }

    /// Source `(y, x)` for output pixel `(y, x)` of an `h × w` plane.
    pub fn source(&self, y: f64, x: f64, h: usize, w: usize) -> (f64, f64) {
        let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
        let (dy, dx) = (y - self.shift_px.0 - cy, x - self.shift_px.1 - cx);
        let (s, c) = self.angle_rad.sin_cos();
        let sx = (c * dx + s * dy) / self.scale + cx;
        let sy = (-s * dx + c * dy) / self.scale + cy;
        (sy, sx)
    }
}

/// Dense per-pixel displacement `(dy, dx)` interpolated from a coarse grid.
#[derive(Clone, Debug, PartialEq)]
pub struct DisplacementField {
    pub dy: Vec<f32>,
    pub dx: Vec<f32>,
}

impl DisplacementField {
    pub fn random(h: usize, w: usize, grid: usize, sigma: f64, rng: &mut ChaCha8Rng) -> Result<Self> {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        let coarse_y: Vec<f32> = (0..grid * grid).map(|_| normal.sample(rng) as f32).collect();
        let coarse_x: Vec<f32> = (0..grid * grid).map(|_| normal.sample(rng) as f32).collect();
        let up = |coarse: &[f32]| -> Vec<f32> {
            let gy = (grid - 1) as f64 / (h.max(2) - 1) as f64;
            let gx = (grid - 1) as f64 / (w.max(2) - 1) as f64;
            (0..h * w)
                .map(|i| bilinear(coarse, grid, grid, (i / w) as f64 * gy, (i % w) as f64 * gx))
                .collect()
        };
        Ok(Self {
            dy: up(&coarse_y),
            dx: up(&coarse_x),
        })
    }
}

/// Resample `image` bilinearly and `labels` by nearest neighbour through `warp`
/// and an optional displacement field.
pub fn warp(
    image: &[f32],
    labels: &[u8],
    h: usize,
    w: usize,
    warp: &AffineWarp,
    field: Option<&DisplacementField>,
) -> (Vec<f32>, Vec<u8>) {
    let mut img = Vec::with_capacity(h * w);
    let mut lab = Vec::with_capacity(h * w);
    for yi in 0..h {
        for xi in 0..w {
            let (mut sy, mut sx) = warp.source(yi as f64, xi as f64, h, w);
            if let Some(f) = field {
                sy += f.dy[yi * w + xi] as f64;
                sx += f.dx[yi * w + xi] as f64;
            }
            img.push(bilinear(image, h, w, sy, sx));
            lab.push(nearest(labels, h, w, sy, sx));
        }
    }
    (img, lab)
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(plane: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * plane[y * w + clamp(x as isize + k as isize - radius, w)] as f64;
            }
            tmp[y * w + x] = acc as f32;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (k, kv) in kernel.iter().enumerate() {
                acc += kv * tmp[clamp(y as isize + k as isize - radius, h) * w + x] as f64;
            }
            out[y * w + x] = acc as f32;
        }
    }
    out
}

/// Multiply by `exp(p(y, x))` for a random quadratic `p` on `[-1, 1]²`.
fn bias_field(plane: &mut [f32], h: usize, w: usize, strength: f64, rng: &mut ChaCha8Rng) {
    let c: [f64; 5] = std::array::from_fn(|_| rng.random_range(-strength..=strength));
    for yi in 0..h {
        let y = if h > 1 { 2.0 * yi as f64 / (h - 1) as f64 - 1.0 } else { 0.0 };
        for xi in 0..w {
            let x = if w > 1 { 2.0 * xi as f64 / (w - 1) as f64 - 1.0 } else { 0.0 };
            let p = c[0] * x + c[1] * y + c[2] * x * x + c[3] * y * y + c[4] * x * y;
            plane[yi * w + xi] *= p.exp() as f32;
        }
    }
}

/// Randomly transform one image plane and its label map.
pub fn augment(
    image: &[f32],
    labels: &[u8],
    h: usize,
    w: usize,
    params: &AugmentParams,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<f32>, Vec<u8>)> {
    params.validate()?;
    if image.len() != h * w || labels.len() != h * w {
        return Err(Error::Shape(format!(
            "{} pixels and {} labels for {h}x{w}",
            image.len(),
            labels.len()
        )));
    }
    let mut affine = AffineWarp::identity();
    let mut geometric = false;
    if rng.random_bool(params.rotation_prob) {
        let max = params.max_rotation_deg.to_radians();
        affine.angle_rad = rng.random_range(-max..=max);
        geometric = true;
    }
    if rng.random_bool(params.shift_prob) {
        let m = params.max_shift_px;
        affine.shift_px = (rng.random_range(-m..=m), rng.random_range(-m..=m));
        geometric = true;
    }
    if rng.random_bool(params.scale_prob) {
        affine.scale = rng.random_range(params.scale_range.0..=params.scale_range.1);
        geometric = true;
    }
    let field = if rng.random_bool(params.elastic_prob) {
        geometric = true;
        Some(DisplacementField::random(h, w, params.elastic_grid, params.elastic_sigma_px, rng)?)
    } else {
        None
    };
    let (mut img, lab) = if geometric {
        warp(image, labels, h, w, &affine, field.as_ref())
    } else {
        (image.to_vec(), labels.to_vec())
    };
    if rng.random_bool(params.blur_prob) {
        let sigma = rng.random_range(params.blur_sigma_range.0..=params.blur_sigma_range.1);
        img = gaussian_blur(&img, h, w, sigma);
    }
    if rng.random_bool(params.bias_prob) {
        bias_field(&mut img, h, w, params.bias_strength, rng);
    }
    if rng.random_bool(params.noise_prob) && params.max_noise_sigma > 0.0 {
        let sigma = rng.random_range(0.0..=params.max_noise_sigma);
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
        img.iter_mut().for_each(|v| *v += normal.sample(rng) as f32);
    }
    Ok((img, lab))
}
