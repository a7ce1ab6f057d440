//! Resampling to a target pixel spacing and per-image intensity normalization.

use compseg_tensor::Tensor;

use crate::error::{Error, Result};
use crate::feature::FeatureMap;

pub const TARGET_SPACING_MM: (f64, f64) = (1.25, 1.25);
const STD_EPS: f64 = 1e-8;

/// Output size when resampling `n` pixels from `from` to `to` millimetres.
pub fn resampled_len(n: usize, from: f64, to: f64) -> usize {
    ((n as f64 * from / to).round() as usize).max(1)
}

/// Source coordinate of output pixel `i` under pixel-centre alignment.
fn source_coord(i: usize, scale: f64) -> f64 {
    (i as f64 + 0.5) * scale - 0.5
}

fn check_spacing(from: (f64, f64), to: (f64, f64)) -> Result<()> {
    if [from.0, from.1, to.0, to.1].iter().all(|v| *v > 0.0 && v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Validation(format!("spacings {from:?} → {to:?} must be positive")))
    }
}

/// Clamp-to-edge bilinear sample of a row-major `h × w` plane.
pub fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = ((y - y0 as f64) as f32, (x - x0 as f64) as f32);
    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
    let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Clamp-to-edge nearest-neighbour sample.
pub fn nearest<V: Copy>(plane: &[V], h: usize, w: usize, y: f64, x: f64) -> V {
    let y = (y.round().max(0.0) as usize).min(h - 1);
    let x = (x.round().max(0.0) as usize).min(w - 1);
    plane[y * w + x]
}

/// Bilinear resampling of a `(1, C, H, W)` image; spacing is `(row, col)`.
pub fn resample_image(image: &FeatureMap<f32>, target_mm: (f64, f64)) -> Result<FeatureMap<f32>> {
    let from = image.spacing_mm();
    check_spacing(from, target_mm)?;
    let (b, c, h, w) = image.dims();
    let (oh, ow) = (resampled_len(h, from.0, target_mm.0), resampled_len(w, from.1, target_mm.1));
    if (oh, ow) == (h, w) && from == target_mm {
        return Ok(image.clone());
    }
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let src = image.data().data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in src.chunks(h * w) {
        for yi in 0..oh {
            for xi in 0..ow {
                out.push(bilinear(plane, h, w, source_coord(yi, sy), source_coord(xi, sx)));
            }
        }
    }
    FeatureMap::new(Tensor::new(vec![b, c, oh, ow], out)?, target_mm)
}

/// Nearest-neighbour resampling of a label map, matching [`resample_image`].
pub fn resample_labels(labels: &[u8], h: usize, w: usize, from: (f64, f64), to: (f64, f64)) -> Result<(Vec<u8>, usize, usize)> {
    check_spacing(from, to)?;
    if labels.len() != h * w {
        return Err(Error::Shape(format!("{} labels for {h}x{w}", labels.len())));
    }
    let (oh, ow) = (resampled_len(h, from.0, to.0), resampled_len(w, from.1, to.1));
    let (sy, sx) = (h as f64 / oh as f64, w as f64 / ow as f64);
    let mut out = Vec::with_capacity(oh * ow);
    for yi in 0..oh {
        for xi in 0..ow {
            out.push(nearest(labels, h, w, source_coord(yi, sy), source_coord(xi, sx)));
        }
    }
    Ok((out, oh, ow))
}

/// Zero-mean, unit-variance scaling of each `H × W` plane, computed in double
/// precision. A constant plane becomes all zeros.
pub fn zscore_in_place(plane: &mut [f32]) {
    let n = plane.len() as f64;
    let mean = plane.iter().map(|v| *v as f64).sum::<f64>() / n;
    let var = plane.iter().map(|v| (*v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < STD_EPS {
        log::warn!("constant image plane normalized to zeros");
        plane.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    plane.iter_mut().for_each(|v| *v = ((*v as f64 - mean) / std) as f32);
}

/// Resample to `target_mm`, then z-score each plane.
pub fn preprocess(image: &FeatureMap<f32>, target_mm: (f64, f64)) -> Result<FeatureMap<f32>> {
    let resampled = resample_image(image, target_mm)?;
    let (b, c, h, w) = resampled.dims();
    let mut data = resampled.into_data().into_data();
    for plane in data.chunks_mut(h * w) {
        zscore_in_place(plane);
    }
    FeatureMap::new(Tensor::new(vec![b, c, h, w], data)?, target_mm)
}
