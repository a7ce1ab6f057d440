//! Training objectives and evaluation metrics.

use compseg_tensor::{Graph, Scalar, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::compnet::ForwardNodes;
use crate::error::{Error, Result};
use crate::meta_codec::{entity_targets, EntityTarget, MetadataRecord, MetadataSchema};

pub const DICE_SMOOTH: f64 = 1e-6;
pub const DEFAULT_ALPHA: f64 = 0.7;

/// Components of the training objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_super: f64,
    pub l_sub: f64,
    pub l_seg: f64,
    pub l_meta: f64,
    pub l_total: f64,
    pub alpha: f64,
}

pub fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("alpha {alpha} must lie in (0, 1)")))
    }
}

/// `l_total = alpha·(l_sub + l_super) + (1 − alpha)·l_meta`.
pub fn total_loss(l_sub: f64, l_super: f64, l_meta: f64, alpha: f64) -> Result<LossBreakdown> {
    check_alpha(alpha)?;
    for (name, v) in [("sub", l_sub), ("super", l_super), ("meta", l_meta)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Numeric(format!("{name} loss {v} must be finite and nonnegative")));
        }
    }
    let l_seg = l_sub + l_super;
    Ok(LossBreakdown {
        l_super,
        l_sub,
        l_seg,
        l_meta,
        l_total: alpha * l_seg + (1.0 - alpha) * l_meta,
        alpha,
    })
}

/// Soft Dice loss over every `(batch, class)` pair of two `(B, K, ...)` tensors.
pub fn dice_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>, smooth: f64) -> Result<f64> {
    if pred.shape() != target.shape() || pred.rank() < 2 {
        return Err(Error::Shape(format!("prediction {:?} vs target {:?}", pred.shape(), target.shape())));
    }
    if target.data().iter().any(|v| *v != T::zero() && *v != T::one()) {
        return Err(Error::Validation("dice target must be binary".into()));
    }
    if pred.data().iter().any(|v| !(*v >= T::zero() && *v <= T::one())) {
        return Err(Error::Validation("dice prediction must lie in [0, 1]".into()));
    }
    let (b, k) = (pred.shape()[0], pred.shape()[1]);
    let n = pred.numel() / (b * k).max(1);
    let mut acc = 0.0;
    for (p, t) in pred.data().chunks(n).zip(target.data().chunks(n)) {
        let (mut pt, mut ps, mut ts) = (0.0, 0.0, 0.0);
        for (a, b) in p.iter().zip(t) {
            let (a, b) = (a.as_f64(), b.as_f64());
            pt += a * b;
            ps += a;
            ts += b;
        }
        acc += (2.0 * pt + smooth) / (ps + ts + smooth);
    }
    Ok(1.0 - acc / (b * k) as f64)
}

/// Per-entity metadata loss terms, each a batch mean.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaLoss {
    pub terms: Vec<(String, f64)>,
}

impl MetaLoss {
    pub fn total(&self) -> f64 {
        self.terms.iter().map(|(_, v)| v).sum()
    }
}

/// Cross-entropy for categorical heads, L1 against the encoded value for
/// continuous heads, summed over entities.
pub fn meta_loss<T: Scalar>(
    entity_outputs: &[Tensor<T>],
    records: &[&MetadataRecord],
    schema: &MetadataSchema,
) -> Result<MetaLoss> {
    if entity_outputs.len() != schema.len() {
        return Err(Error::Shape(format!(
            "{} head outputs for {} entities",
            entity_outputs.len(),
            schema.len()
        )));
    }
    if records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let targets = records
        .iter()
        .map(|r| entity_targets(r, schema))
        .collect::<Result<Vec<_>>>()?;
    let b = records.len() as f64;
    let mut terms = Vec::with_capacity(schema.len());
    for (e, (spec, out)) in schema.entities.iter().zip(entity_outputs).enumerate() {
        let k = spec.arity();
        if out.shape() != [records.len(), k] {
            return Err(Error::Shape(format!("head `{}` output {:?}", spec.name, out.shape())));
        }
        let mut sum = 0.0;
        for (row, t) in out.data().chunks(k).zip(&targets) {
            sum += match t[e] {
                EntityTarget::Class(c) => {
                    let row: Vec<f64> = row.iter().map(|v| v.as_f64()).collect();
                    let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
                    lse - row[c]
                }
                EntityTarget::Value(v) => (row[0].as_f64() - v).abs(),
            };
        }
        terms.push((spec.name.clone(), sum / b));
    }
    Ok(MetaLoss { terms })
}

/// Per-pixel class indices of a batch, shape `(B, H, W)` flattened.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelBatch {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub labels: Vec<u8>,
}

impl LabelBatch {
    pub fn new(batch: usize, height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != batch * height * width {
            return Err(Error::Shape(format!(
                "{} labels for {batch}x{height}x{width}",
                labels.len()
            )));
        }
        Ok(Self {
            batch,
            height,
            width,
            labels,
        })
    }

    /// `(B, K, H, W)` one-hot encoding.
    pub fn one_hot<T: Scalar>(&self, classes: usize) -> Result<Tensor<T>> {
        let n = self.height * self.width;
        let mut out = vec![T::zero(); self.batch * classes * n];
        for (i, &l) in self.labels.iter().enumerate() {
            let l = l as usize;
            if l >= classes {
                return Err(Error::Validation(format!("label {l} outside {classes} classes")));
            }
            let (b, p) = (i / n, i % n);
            out[(b * classes + l) * n + p] = T::one();
        }
        Ok(Tensor::new(vec![self.batch, classes, self.height, self.width], out)?)
    }

    /// `(B, 1, H, W)` union of all foreground classes.
    pub fn foreground<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.batch, 1, self.height, self.width],
            self.labels.iter().map(|l| if *l > 0 { T::one() } else { T::zero() }).collect(),
        )
        .expect("length checked at construction")
    }
}

/// Graph handles of the training objective.
#[derive(Clone, Copy, Debug)]
pub struct LossNodes {
    pub super_loss: Option<Var>,
    pub sub_loss: Var,
    pub meta_loss: Option<Var>,
    pub total: Var,
    pub alpha: f64,
}

impl LossNodes {
    pub fn breakdown<T: Scalar>(&self, g: &Graph<T>) -> Result<LossBreakdown> {
        let val = |v: Option<Var>| v.map(|v| g.value(v).item().as_f64()).unwrap_or(0.0);
        total_loss(val(Some(self.sub_loss)), val(self.super_loss), val(self.meta_loss), self.alpha)
    }
}

/// Record the composite objective on the graph of a forward pass. The multi-class
/// Dice skips background; the binary decoder targets the union of foreground
/// classes; metadata terms exist only when the network produced head outputs.
pub fn build_training_loss<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &ForwardNodes,
    labels: &LabelBatch,
    records: &[&MetadataRecord],
    schema: &MetadataSchema,
    alpha: f64,
) -> Result<LossNodes> {
    check_alpha(alpha)?;
    let smooth = T::lit(DICE_SMOOTH);
    let k = g.shape(nodes.sub_logits)[1];
    let sub_probs = g.softmax_channels(nodes.sub_logits)?;
    let sub_loss = g.dice_loss(sub_probs, labels.one_hot(k)?, smooth, 1)?;
    let super_loss = match nodes.super_logits {
        Some(l) => {
            let p = g.sigmoid(l);
            Some(g.dice_loss(p, labels.foreground(), smooth, 0)?)
        }
        None => None,
    };
    let meta_loss = match &nodes.meta {
        Some(meta) => {
            let targets = records
                .iter()
                .map(|r| entity_targets(&r.project(schema), schema))
                .collect::<Result<Vec<_>>>()?;
            let mut terms = Vec::with_capacity(schema.len());
            for (e, out) in meta.entity_outputs.iter().enumerate() {
                let mut classes = Vec::new();
                let mut values = Vec::new();
                for t in &targets {
                    match t[e] {
                        EntityTarget::Class(c) => classes.push(c),
                        EntityTarget::Value(v) => values.push(T::lit(v)),
                    }
                }
                let term = if values.is_empty() {
                    g.cross_entropy(*out, classes)?
                } else {
                    g.l1_loss(*out, values)?
                };
                terms.push((term, T::one()));
            }
            Some(g.weighted_sum(terms)?)
        }
        None => None,
    };
    let a = T::lit(alpha);
    let mut terms = vec![(sub_loss, a)];
    if let Some(s) = super_loss {
        terms.push((s, a));
    }
    if let Some(m) = meta_loss {
        terms.push((m, T::one() - a));
    }
    let total = g.weighted_sum(terms)?;
    Ok(LossNodes {
        super_loss,
        sub_loss,
        meta_loss,
        total,
        alpha,
    })
}

/// A binary 2-D mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    height: usize,
    width: usize,
    data: Vec<bool>,
}

impl Mask {
    pub fn new(height: usize, width: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!("{} mask cells for {height}x{width}", data.len())));
        }
        Ok(Self { height, width, data })
    }

    pub fn from_labels(height: usize, width: usize, labels: &[u8], class: u8) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|l| *l == class).collect())
    }

    pub fn foreground(height: usize, width: usize, labels: &[u8]) -> Result<Self> {
        Self::new(height, width, labels.iter().map(|l| *l > 0).collect())
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Foreground pixels as `(row, col)`.
    pub fn points(&self) -> Vec<(usize, usize)> {
        (0..self.data.len())
            .filter(|i| self.data[*i])
            .map(|i| (i / self.width, i % self.width))
            .collect()
    }

    /// Foreground pixels with at least one background or out-of-image pixel
    /// among their 8 neighbours.
    pub fn boundary_points(&self) -> Vec<(usize, usize)> {
        let (h, w) = (self.height as isize, self.width as isize);
        self.points()
            .into_iter()
            .filter(|&(y, x)| {
                (-1..=1).any(|dy| {
                    (-1..=1).any(|dx| {
                        let (ny, nx) = (y as isize + dy, x as isize + dx);
                        ny < 0 || nx < 0 || ny >= h || nx >= w || !self.data[(ny * w + nx) as usize]
                    })
                })
            })
            .collect()
    }

    fn check_same(&self, other: &Mask) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape(format!(
                "mask {}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }
}

/// `100 · 2|P∩T| / (|P| + |T|)`; 100 when both masks are empty.
pub fn dice_score(pred: &Mask, target: &Mask) -> Result<f64> {
    pred.check_same(target)?;
    let inter = pred.data.iter().zip(&target.data).filter(|(a, b)| **a && **b).count();
    let total = pred.count() + target.count();
    if total == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / total as f64)
}

/// Physical distance between pixel `(row, col)` positions; `spacing_mm` is `(row, col)`.
pub fn pixel_distance(a: (usize, usize), b: (usize, usize), spacing_mm: (f64, f64)) -> f64 {
    let dy = (a.0 as f64 - b.0 as f64) * spacing_mm.0;
    let dx = (a.1 as f64 - b.1 as f64) * spacing_mm.1;
    (dy * dy + dx * dx).sqrt()
}

fn directed(from: &[(usize, usize)], to: &Mask, spacing_mm: (f64, f64)) -> f64 {
    // The nearest target pixel of any point outside the target lies on the
    // target's boundary: an interior pixel always has a neighbour that is closer.
    let candidates = to.boundary_points();
    let mut worst = 0.0f64;
    for &p in from {
        if to.get(p.0, p.1) {
            continue;
        }
        let mut best = f64::INFINITY;
        for &t in &candidates {
            best = best.min(pixel_distance(p, t, spacing_mm));
        }
        worst = worst.max(best);
    }
    worst
}

/// Symmetric Hausdorff distance between the foreground sets, in millimetres.
pub fn hausdorff_mm(pred: &Mask, target: &Mask, spacing_mm: (f64, f64)) -> Result<f64> {
    pred.check_same(target)?;
    if pred.is_empty() {
        return Err(Error::EmptyMask("prediction"));
    }
    if target.is_empty() {
        return Err(Error::EmptyMask("target"));
    }
    if !(spacing_mm.0 > 0.0 && spacing_mm.1 > 0.0) {
        return Err(Error::Validation(format!("spacing {spacing_mm:?} must be positive")));
    }
    let a = directed(&pred.points(), target, spacing_mm);
    let b = directed(&target.points(), pred, spacing_mm);
    Ok(a.max(b))
}
