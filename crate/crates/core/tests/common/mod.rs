#![allow(dead_code)]

use compseg::cmfi::{Affine, CmfiParams};
use compseg_tensor::Tensor;

fn apply(a: &Affine<f64>, x: &[f64]) -> Vec<f64> {
    let c = x.len();
    let w = a.weight.data();
    (0..c)
        .map(|o| {
            let mut s = a.bias.data()[o];
            for i in 0..c {
                s += w[o * c + i] * x[i];
            }
            s
        })
        .collect()
}

fn unit(x: &[f64], eps: f64) -> Vec<f64> {
    let mut sq = 0.0;
    for v in x {
        sq += v * v;
    }
    let d = sq.sqrt().max(eps);
    x.iter().map(|v| v / d).collect()
}

/// Scalar-loop evaluation of the fusion block; `image` is `(B, C, H, W)`,
/// `meta` is `(B, C)`. Returns `(B, C, H, W)`.
pub fn cmfi_reference(image: &Tensor<f64>, meta: &Tensor<f64>, p: &CmfiParams<f64>) -> Tensor<f64> {
    let s = image.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let n = h * w;
    let img = image.data();
    let m = meta.data();
    let scale = 1.0 / (c as f64).sqrt();
    let mut out = vec![0.0; b * c * n];
    for bi in 0..b {
        let meta_row: Vec<f64> = (0..c).map(|ci| m[bi * c + ci]).collect();
        let mut q_img = Vec::with_capacity(n);
        let mut k_img = Vec::with_capacity(n);
        let mut q_meta = Vec::with_capacity(n);
        let mut k_meta = Vec::with_capacity(n);
        for ni in 0..n {
            let tok: Vec<f64> = (0..c).map(|ci| img[(bi * c + ci) * n + ni]).collect();
            q_img.push(apply(&p.query_image, &tok));
            k_img.push(apply(&p.key_image, &tok));
            q_meta.push(apply(&p.query_meta, &meta_row));
            k_meta.push(apply(&p.key_meta, &meta_row));
        }
        let mut g_img = vec![0.0; c];
        let mut g_meta = vec![0.0; c];
        for ni in 0..n {
            let mut a_i = 0.0;
            let mut a_m = 0.0;
            for ci in 0..c {
                a_i += q_img[ni][ci] * p.score_image.data()[ci];
                a_m += q_meta[ni][ci] * p.score_meta.data()[ci];
            }
            a_i *= scale;
            a_m *= scale;
            for ci in 0..c {
                g_img[ci] += a_i * q_img[ni][ci];
                g_meta[ci] += a_m * q_meta[ni][ci];
            }
        }
        for ni in 0..n {
            let prod = |g: &[f64], k: &[f64]| -> Vec<f64> { (0..c).map(|ci| g[ci] * k[ci]).collect() };
            let t1 = apply(&p.mix[0], &prod(&g_img, &k_img[ni]));
            let t2 = apply(&p.mix[1], &prod(&g_img, &k_meta[ni]));
            let t3 = apply(&p.mix[2], &prod(&g_meta, &k_meta[ni]));
            let t4 = apply(&p.mix[3], &prod(&g_meta, &k_img[ni]));
            let ui = unit(&q_img[ni], p.norm_eps);
            let um = unit(&q_meta[ni], p.norm_eps);
            let pre: Vec<f64> = (0..c).map(|ci| t1[ci] + t2[ci] + t3[ci] + t4[ci] + ui[ci] + um[ci]).collect();
            let y = apply(&p.output, &pre);
            for ci in 0..c {
                out[(bi * c + ci) * n + ni] = y[ci];
            }
        }
    }
    Tensor::new(vec![b, c, h, w], out).expect("shape is consistent")
}
