//! PNG rendering of segmentation contours over a grayscale image.

use std::path::Path;

use crate::dataset::write_atomic;
use crate::error::{Error, Result};
use crate::losses::Mask;

/// Contour colours for classes 1, 2, 3.
pub const CLASS_COLORS: [[u8; 3]; 3] = [[230, 25, 75], [60, 180, 75], [0, 130, 200]];
pub const SUPER_COLOR: [u8; 3] = [255, 225, 25];

/// Min-max scaling to `0..=255`; a constant image maps to 0.
pub fn to_gray(image: &[f32]) -> Vec<u8> {
    let (lo, hi) = image
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(l, h), v| (l.min(*v), h.max(*v)));
    let range = hi - lo;
    image
        .iter()
        .map(|v| {
            if range > 0.0 {
                ((v - lo) / range * 255.0).round() as u8
            } else {
                0
            }
        })
        .collect()
}

/// Pixels inside the region whose 4-neighbourhood leaves it or the image.
fn contour(inside: impl Fn(usize) -> bool, h: usize, w: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !inside(i) {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || !inside(i - w)
                || !inside(i + w)
                || !inside(i - 1)
                || !inside(i + 1);
            if edge {
                out.push(i);
            }
        }
    }
    out
}

/// Row-major RGB pixels: the grayscale image, then the binary contour, then
/// class contours on top.
pub fn render_overlay(image: &[f32], h: usize, w: usize, sub: &[u8], super_mask: Option<&Mask>) -> Result<Vec<u8>> {
    if image.len() != h * w || sub.len() != h * w {
        return Err(Error::Shape(format!(
            "image has {} pixels and mask {} for {h}x{w}",
            image.len(),
            sub.len()
        )));
    }
    if let Some(m) = super_mask {
        if (m.height(), m.width()) != (h, w) {
            return Err(Error::Shape(format!(
                "binary mask is {}x{}, image {h}x{w}",
                m.height(),
                m.width()
            )));
        }
    }
    if let Some(bad) = sub.iter().find(|l| **l as usize > CLASS_COLORS.len()) {
        return Err(Error::Validation(format!("label {bad} has no colour")));
    }
    let mut rgb: Vec<u8> = to_gray(image).into_iter().flat_map(|g| [g, g, g]).collect();
    let mut paint = |pixels: Vec<usize>, color: [u8; 3]| {
        for i in pixels {
            rgb[3 * i..3 * i + 3].copy_from_slice(&color);
        }
    };
    if let Some(m) = super_mask {
        paint(contour(|i| m.data()[i], h, w), SUPER_COLOR);
    }
    for (c, color) in CLASS_COLORS.iter().enumerate() {
        let class = (c + 1) as u8;
        paint(contour(|i| sub[i] == class, h, w), *color);
    }
    Ok(rgb)
}

pub fn encode_png(rgb: &[u8], h: usize, w: usize) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(|e| Error::Validation(e.to_string()))?;
        writer.write_image_data(rgb).map_err(|e| Error::Validation(e.to_string()))?;
    }
    Ok(buf)
}

/// Render and write a PNG atomically.
pub fn write_overlay(path: &Path, image: &[f32], h: usize, w: usize, sub: &[u8], super_mask: Option<&Mask>) -> Result<()> {
    let rgb = render_overlay(image, h, w, sub, super_mask)?;
    write_atomic(path, &encode_png(&rgb, h, w)?)
}
