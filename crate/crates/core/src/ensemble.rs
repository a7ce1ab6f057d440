//! Inference with one categorical metadata entity unknown: run once per
//! category and average the probability maps.

use compseg_tensor::Tensor;

use crate::compnet::{model_forward, Model};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::meta_codec::{EntityKind, MetadataRecord};
use crate::nn::Mode;

/// Probability maps of one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMaps {
    /// `(1, K, H, W)` softmax output.
    pub sub: Tensor<f32>,
    /// `(1, 1, H, W)` sigmoid output, when the binary decoder exists.
    pub super_: Option<Tensor<f32>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleOutput {
    pub entity: String,
    pub values: Vec<String>,
    pub per_value: Vec<ProbabilityMaps>,
    pub averaged: ProbabilityMaps,
}

/// Element-wise arithmetic mean of equally shaped tensors.
pub fn average_maps(maps: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = maps.first().ok_or(Error::EmptyBatch)?;
    if let Some(m) = maps.iter().find(|m| m.shape() != first.shape()) {
        return Err(Error::Shape(format!("{:?} vs {:?}", m.shape(), first.shape())));
    }
    let n = maps.len() as f64;
    let data = (0..first.numel())
        .map(|i| (maps.iter().map(|m| m.data()[i] as f64).sum::<f64>() / n) as f32)
        .collect();
    Ok(Tensor::new(first.shape().to_vec(), data)?)
}

/// Run `model` once for every category of `missing` and average the results.
/// `partial` must lack exactly that entity.
pub fn ensemble_infer(
    model: &Model<f32>,
    image: &FeatureMap<f32>,
    partial: &MetadataRecord,
    missing: &str,
) -> Result<EnsembleOutput> {
    let entity = model
        .schema
        .entity(missing)
        .ok_or_else(|| Error::Schema(format!("`{missing}` is not a schema entity")))?;
    if entity.kind == EntityKind::Continuous {
        return Err(Error::Validation(format!(
            "`{missing}` is continuous; ensembling is defined for categorical entities only"
        )));
    }
    let absent = partial.missing_entities(&model.schema);
    if absent != [missing.to_string()] {
        return Err(Error::Validation(format!(
            "expected only `{missing}` to be missing, found {absent:?}"
        )));
    }
    let mut per_value = Vec::with_capacity(entity.categories.len());
    for category in &entity.categories {
        let record = partial.clone().with_label(missing, category);
        let out = model_forward(model, image, &record, Mode::Eval, 0)?;
        per_value.push(ProbabilityMaps {
            sub: out.sub_probs(),
            super_: out.super_probs(),
        });
    }
    let sub = average_maps(&per_value.iter().map(|p| &p.sub).collect::<Vec<_>>())?;
    let super_ = match per_value[0].super_ {
        Some(_) => Some(average_maps(
            &per_value.iter().filter_map(|p| p.super_.as_ref()).collect::<Vec<_>>(),
        )?),
        None => None,
    };
    Ok(EnsembleOutput {
        entity: missing.to_string(),
        values: entity.categories.clone(),
        per_value,
        averaged: ProbabilityMaps { sub, super_ },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluate::argmax_labels;

    #[test]
    fn mean_can_disagree_with_every_member() {
        let t = |a: f32, b: f32| Tensor::new(vec![1, 2, 1, 1], vec![a, b]).unwrap();
        let maps = [t(0.6, 0.4), t(0.1, 0.9), t(0.1, 0.9)];
        let avg = average_maps(&maps.iter().collect::<Vec<_>>()).unwrap();
        assert!((avg.data()[0] - 0.8 / 3.0).abs() < 1e-7 && (avg.data()[1] - 2.2 / 3.0).abs() < 1e-7);
        assert_eq!(argmax_labels(&avg, 0).unwrap(), vec![1]);
        assert_eq!(argmax_labels(&maps[0], 0).unwrap(), vec![0]);
    }

    #[test]
    fn identical_members_average_to_themselves() {
        let m = Tensor::new(vec![1, 2, 1, 2], vec![0.3f32, 0.7, 0.7, 0.3]).unwrap();
        assert_eq!(average_maps(&[&m, &m, &m]).unwrap(), m);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Tensor::zeros(vec![1, 2, 1, 1]);
        let b = Tensor::zeros(vec![1, 3, 1, 1]);
        assert!(matches!(average_maps(&[&a, &b]), Err(Error::Shape(_))));
    }
}
