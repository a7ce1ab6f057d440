//! Per-case segmentation metrics and metadata-head accuracy.

use std::path::Path;

use compseg_tensor::{Scalar, Tensor};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::compnet::Model;
use crate::dataset::{write_atomic, Dataset};
use crate::error::{Error, Result};
use crate::losses::{dice_score, hausdorff_mm, Mask};
use crate::meta_codec::{decode_head_outputs, EntityKind, MetadataRecord};
use crate::nn::Mode;
use crate::preprocess::TARGET_SPACING_MM;
use crate::synth::Split;
use crate::trainer::{prepare_cases, PreparedCase};

pub const CLASS_NAMES: [&str; 3] = ["LV", "RV", "MYO"];
const EVAL_BATCH: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetric {
    pub case_id: String,
    pub class: String,
    pub dice_pct: f64,
    /// Undefined when either mask is empty.
    pub hd_mm: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntityMetric {
    pub entity: String,
    /// `accuracy` in percent for categorical entities, `mae` in raw units otherwise.
    pub metric: String,
    pub value: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<ClassMetric>,
    /// Mean binary whole-heart Dice in percent.
    pub super_dice: Option<f64>,
    pub entities: Vec<EntityMetric>,
}

impl EvalReport {
    pub fn class_dice(&self, class: &str) -> f64 {
        mean(self.rows.iter().filter(|r| r.class == class).map(|r| r.dice_pct))
    }

    /// Mean HD over cases where it is defined; NaN if it never is.
    pub fn class_hd(&self, class: &str) -> f64 {
        mean(self.rows.iter().filter(|r| r.class == class).filter_map(|r| r.hd_mm))
    }

    pub fn mean_foreground_dice(&self) -> f64 {
        mean(self.rows.iter().map(|r| r.dice_pct))
    }

    pub fn mean_hd(&self) -> f64 {
        mean(CLASS_NAMES.iter().map(|c| self.class_hd(c)))
    }

    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::io("<report>", e.into_error()))
    }

    /// Per-class means, the binary Dice and metadata metrics as `name,value` rows.
    pub fn summary_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["metric", "value"])?;
        for c in CLASS_NAMES {
            w.write_record([format!("dice_{c}"), format!("{}", self.class_dice(c))])?;
            w.write_record([format!("hd_{c}"), format!("{}", self.class_hd(c))])?;
        }
        w.write_record(["dice_mean".to_string(), format!("{}", self.mean_foreground_dice())])?;
        w.write_record(["hd_mean".to_string(), format!("{}", self.mean_hd())])?;
        if let Some(d) = self.super_dice {
            w.write_record(["dice_super".to_string(), format!("{d}")])?;
        }
        for e in &self.entities {
            w.write_record([format!("{}_{}", e.entity, e.metric), format!("{}", e.value)])?;
        }
        w.into_inner().map_err(|e| Error::io("<summary>", e.into_error()))
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("metrics.csv"), &self.to_csv()?)?;
        write_atomic(&dir.join("summary.csv"), &self.summary_csv()?)
    }
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

/// Channel argmax of sample `index` of a `(B, K, H, W)` tensor; lowest index wins ties.
pub fn argmax_labels<T: Scalar>(probs: &Tensor<T>, index: usize) -> Result<Vec<u8>> {
    let (_, k, h, w) = probs.dims4()?;
    let n = h * w;
    let base = index * k * n;
    let d = probs.data();
    Ok((0..n)
        .map(|p| {
            let mut best = 0;
            for c in 1..k {
                if d[base + c * n + p] > d[base + best * n + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect())
}

/// Hard labels derived from probability maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub labels: Vec<u8>,
    pub super_mask: Option<Mask>,
}

/// Argmax of `(1, K, H, W)` class probabilities and a 0.5 threshold of the
/// optional `(1, 1, H, W)` binary map.
pub fn prediction_from_maps(sub: &Tensor<f32>, super_probs: Option<&Tensor<f32>>) -> Result<Prediction> {
    let (_, _, h, w) = sub.dims4()?;
    let super_mask = match super_probs {
        Some(t) => Some(Mask::new(h, w, t.data().iter().map(|v| *v > 0.5).collect())?),
        None => None,
    };
    Ok(Prediction {
        labels: argmax_labels(sub, 0)?,
        super_mask,
    })
}

pub fn predict(model: &Model<f32>, case: &PreparedCase) -> Result<Prediction> {
    let images = Tensor::new(vec![1, 1, case.height, case.width], case.normalized())?;
    let out = model.forward_batch(&images, &[&case.record], Mode::Eval, 0)?;
    prediction_from_maps(&out.sub_probs(), out.super_probs().as_ref())
}

/// Score `model` on prepared cases in eval mode. Deterministic.
pub fn evaluate(model: &Model<f32>, cases: &[PreparedCase]) -> Result<EvalReport> {
    if cases.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut rows = Vec::with_capacity(cases.len() * CLASS_NAMES.len());
    let mut super_scores = Vec::new();
    let mut decoded: Vec<(MetadataRecord, &MetadataRecord)> = Vec::new();
    for chunk in cases.chunks(EVAL_BATCH) {
        let (h, w) = (chunk[0].height, chunk[0].width);
        let mut data = Vec::with_capacity(chunk.len() * h * w);
        chunk.iter().for_each(|c| data.extend(c.normalized()));
        let images = Tensor::new(vec![chunk.len(), 1, h, w], data)?;
        let records: Vec<&MetadataRecord> = chunk.iter().map(|c| &c.record).collect();
        let out = model.forward_batch(&images, &records, Mode::Eval, 0)?;
        let probs = out.sub_probs();
        let super_probs = out.super_probs();
        for (i, case) in chunk.iter().enumerate() {
            let pred = argmax_labels(&probs, i)?;
            for (ci, name) in CLASS_NAMES.iter().enumerate() {
                let class = (ci + 1) as u8;
                let p = Mask::from_labels(h, w, &pred, class)?;
                let t = Mask::from_labels(h, w, &case.labels, class)?;
                let hd = match hausdorff_mm(&p, &t, TARGET_SPACING_MM) {
                    Ok(v) => Some(v),
                    Err(Error::EmptyMask(_)) => None,
                    Err(e) => return Err(e),
                };
                rows.push(ClassMetric {
                    case_id: case.case_id.clone(),
                    class: name.to_string(),
                    dice_pct: dice_score(&p, &t)?,
                    hd_mm: hd,
                });
            }
            if let Some(sp) = &super_probs {
                let n = h * w;
                let p = Mask::new(h, w, sp.data()[i * n..(i + 1) * n].iter().map(|v| *v > 0.5).collect())?;
                super_scores.push(dice_score(&p, &Mask::foreground(h, w, &case.labels)?)?);
            }
            if !out.entity_outputs.is_empty() {
                let heads: Vec<Vec<f64>> = out
                    .entity_outputs
                    .iter()
                    .map(|t| {
                        let a = t.shape()[1];
                        t.data()[i * a..(i + 1) * a].iter().map(|v| *v as f64).collect()
                    })
                    .collect();
                decoded.push((decode_head_outputs(&heads, &model.schema)?, &case.record));
            }
        }
    }
    let mut entities = Vec::new();
    if !decoded.is_empty() {
        for e in &model.schema.entities {
            let (metric, values): (&str, Vec<f64>) = match e.kind {
                EntityKind::Categorical => (
                    "accuracy",
                    decoded
                        .iter()
                        .filter_map(|(p, t)| {
                            let truth = t.label(&e.name)?;
                            Some(if p.label(&e.name) == Some(truth) { 100.0 } else { 0.0 })
                        })
                        .collect(),
                ),
                EntityKind::Continuous => (
                    "mae",
                    decoded
                        .iter()
                        .filter_map(|(p, t)| Some((p.number(&e.name)? - t.number(&e.name)?).abs()))
                        .collect(),
                ),
            };
            if !values.is_empty() {
                entities.push(EntityMetric {
                    entity: e.name.clone(),
                    metric: metric.into(),
                    value: mean(values.into_iter()),
                });
            }
        }
    }
    Ok(EvalReport {
        rows,
        super_dice: (!super_scores.is_empty()).then(|| mean(super_scores.into_iter())),
        entities,
    })
}

/// Evaluate a checkpoint on one split of `dataset`, refusing foreign schemas.
pub fn evaluate_checkpoint(ck: &Checkpoint, dataset: &Dataset, split: Split) -> Result<EvalReport> {
    ck.check_dataset(&dataset.schema)?;
    let cases = prepare_cases(&dataset.split(split), ck.model.config().input_hw)?;
    evaluate(&ck.model, &cases)
}
