//! Multi-task training loop, Adam, input preparation and fold splits.

use std::path::Path;

use compseg_tensor::Tensor;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{augment, AugmentParams};
use crate::compnet::Model;
use crate::dataset::{write_atomic, DatasetCase};
use crate::error::{Error, Result};
use crate::evaluate::evaluate;
use crate::feature::FeatureMap;
use crate::losses::{build_training_loss, check_alpha, LabelBatch, LossBreakdown, DEFAULT_ALPHA};
use crate::meta_codec::MetadataRecord;
use crate::nn::{Ctx, Mode, ParamStore};
use crate::preprocess::{resample_image, resample_labels, zscore_in_place, TARGET_SPACING_MM};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub alpha: f64,
    pub seed: u64,
    pub folds: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub bn_momentum: f64,
    /// Global gradient norm bound; `None` disables clipping.
    pub grad_clip: Option<f64>,
    pub augment: AugmentParams,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            epochs: 500,
            batch_size: 16,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            folds: 5,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            bn_momentum: 0.1,
            grad_clip: None,
            augment: AugmentParams::default(),
        }
    }
}

impl TrainConfig {
    /// 30 epochs of batches of 8 at a learning rate that converges in that budget.
    pub fn desk() -> Self {
        Self {
            lr: 3e-3,
            epochs: 30,
            batch_size: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::Config("batch size and epochs must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::Config("at least two folds are required".into()));
        }
        check_alpha(self.alpha)?;
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(Error::Config("Adam moments must lie in [0, 1) and eps must be positive".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("batch-norm momentum must lie in (0, 1]".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(Error::Config("gradient clip must be positive".into()));
            }
        }
        self.augment.validate()
    }
}

/// Adam with bias-corrected moments.
#[derive(Clone, Debug)]
pub struct Adam {
    lr: f32,
    beta1: f32,
    beta2: f32,
    eps: f32,
    step: i32,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
}

impl Adam {
    pub fn new(params: &ParamStore<f32>, config: &TrainConfig) -> Self {
        let zeros = || params.entries().iter().map(|e| vec![0.0; e.value.numel()]).collect();
        Self {
            lr: config.lr as f32,
            beta1: config.beta1 as f32,
            beta2: config.beta2 as f32,
            eps: config.adam_eps as f32,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    /// Apply one update; parameters without a gradient are left alone.
    pub fn step(&mut self, params: &mut ParamStore<f32>, grads: &[Option<Tensor<f32>>]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let p = params.by_index_mut(i).data_mut();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                let gj = g.data()[j];
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                p[j] -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// A case resampled to the training grid, before intensity normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct PreparedCase {
    pub case_id: String,
    pub height: usize,
    pub width: usize,
    pub raw: Vec<f32>,
    pub labels: Vec<u8>,
    pub record: MetadataRecord,
}

impl PreparedCase {
    /// Z-scored image.
    pub fn normalized(&self) -> Vec<f32> {
        let mut img = self.raw.clone();
        zscore_in_place(&mut img);
        img
    }

    /// Normalized `(1, 1, H, W)` image on the target spacing.
    pub fn feature_map(&self) -> Result<FeatureMap<f32>> {
        FeatureMap::new(
            Tensor::new(vec![1, 1, self.height, self.width], self.normalized())?,
            TARGET_SPACING_MM,
        )
    }
}

fn center_fit<V: Copy>(plane: &[V], h: usize, w: usize, oh: usize, ow: usize, fill: V) -> Vec<V> {
    let mut out = vec![fill; oh * ow];
    let (dy, dx) = (oh as isize - h as isize, ow as isize - w as isize);
    for y in 0..oh {
        let sy = y as isize - dy / 2;
        if sy < 0 || sy >= h as isize {
            continue;
        }
        for x in 0..ow {
            let sx = x as isize - dx / 2;
            if sx >= 0 && sx < w as isize {
                out[y * ow + x] = plane[sy as usize * w + sx as usize];
            }
        }
    }
    out
}

/// Resample to the target spacing and centre-crop or pad to `hw`.
pub fn prepare_case(case: &DatasetCase, hw: (usize, usize)) -> Result<PreparedCase> {
    let image = resample_image(&case.feature_map()?, TARGET_SPACING_MM)?;
    let (_, _, h, w) = image.dims();
    let (labels, lh, lw) = resample_labels(&case.labels, case.height, case.width, case.spacing_mm, TARGET_SPACING_MM)?;
    debug_assert_eq!((lh, lw), (h, w));
    let raw = image.data().data();
    let fill = raw.iter().copied().fold(f32::INFINITY, f32::min);
    Ok(PreparedCase {
        case_id: case.case_id.clone(),
        height: hw.0,
        width: hw.1,
        raw: center_fit(raw, h, w, hw.0, hw.1, fill),
        labels: center_fit(&labels, h, w, hw.0, hw.1, 0),
        record: case.record.clone(),
    })
}

pub fn prepare_cases(cases: &[&DatasetCase], hw: (usize, usize)) -> Result<Vec<PreparedCase>> {
    cases.iter().map(|c| prepare_case(c, hw)).collect()
}

/// Per-epoch averages of the loss components plus validation Dice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub l_super: f64,
    pub l_sub: f64,
    pub l_seg: f64,
    pub l_meta: f64,
    pub l_total: f64,
    pub alpha: f64,
    /// Mean foreground Dice in percent on the validation cases, if any.
    pub val_dice: Option<f64>,
}

pub fn write_epoch_log(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in log {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation Dice, or of the last
    /// epoch when there is no validation set.
    pub model: Model<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
    /// Breakdown of every optimizer step, in order.
    pub steps: Vec<LossBreakdown>,
}

/// Diagnostic state at the step where the loss stopped being finite.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DivergenceSnapshot {
    pub epoch: usize,
    pub step: usize,
    pub case_ids: Vec<String>,
    pub l_super: f64,
    pub l_sub: f64,
    pub l_meta: f64,
}

fn batch_tensors(
    cases: &[&PreparedCase],
    augment_params: Option<&AugmentParams>,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<f32>, LabelBatch)> {
    let (h, w) = (cases[0].height, cases[0].width);
    let mut images = Vec::with_capacity(cases.len() * h * w);
    let mut labels = Vec::with_capacity(cases.len() * h * w);
    for c in cases {
        let (mut img, lab) = match augment_params {
            Some(p) => augment(&c.raw, &c.labels, h, w, p, rng)?,
            None => (c.raw.clone(), c.labels.clone()),
        };
        zscore_in_place(&mut img);
        images.extend(img);
        labels.extend(lab);
    }
    Ok((
        Tensor::new(vec![cases.len(), 1, h, w], images)?,
        LabelBatch::new(cases.len(), h, w, labels)?,
    ))
}

/// One forward/backward pass and optimizer update on `cases`.
fn train_step(
    model: &mut Model<f32>,
    adam: &mut Adam,
    cases: &[&PreparedCase],
    config: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(LossBreakdown, bool)> {
    let (images, labels) = batch_tensors(cases, Some(&config.augment), rng)?;
    let records: Vec<&MetadataRecord> = cases.iter().map(|c| &c.record).collect();
    let encoded = model.encode(&records)?;
    let seed = rng.random::<u64>();
    let (grads, updates, breakdown) = {
        let mut ctx = Ctx::new(&model.params, &model.bn, Mode::Train, true, seed);
        let img = ctx.input(images);
        let meta = encoded.map(|m| ctx.input(m));
        let nodes = model.net.forward(&mut ctx, img, meta)?;
        let loss = build_training_loss(&mut ctx.graph, &nodes, &labels, &records, &model.schema, config.alpha)?;
        let breakdown = match loss.breakdown(&ctx.graph) {
            Ok(b) => b,
            Err(Error::Numeric(_)) => {
                let v = |x: Option<compseg_tensor::Var>| x.map(|x| ctx.value(x).item() as f64).unwrap_or(0.0);
                let b = LossBreakdown {
                    l_super: v(loss.super_loss),
                    l_sub: v(Some(loss.sub_loss)),
                    l_seg: f64::NAN,
                    l_meta: v(loss.meta_loss),
                    l_total: f64::NAN,
                    alpha: config.alpha,
                };
                return Ok((b, false));
            }
            Err(e) => return Err(e),
        };
        let g = ctx.graph.backward(loss.total)?;
        let mut grads: Vec<Option<Tensor<f32>>> = vec![None; model.params.len()];
        for (k, t) in g.params() {
            grads[k] = Some(t.clone());
        }
        (grads, ctx.graph.bn_updates().to_vec(), breakdown)
    };
    let mut grads = grads;
    if let Some(clip) = config.grad_clip {
        let norm: f64 = grads
            .iter()
            .flatten()
            .flat_map(|g| g.data())
            .map(|v| (*v as f64).powi(2))
            .sum::<f64>()
            .sqrt();
        if norm > clip {
            let s = (clip / norm) as f32;
            grads.iter_mut().flatten().for_each(|g| g.data_mut().iter_mut().for_each(|v| *v *= s));
        }
    }
    if grads.iter().flatten().any(|g| !g.all_finite()) {
        return Ok((breakdown, false));
    }
    model.bn.apply(&updates, config.bn_momentum as f32);
    adam.step(&mut model.params, &grads);
    Ok((breakdown, true))
}

fn mean_breakdown(steps: &[LossBreakdown], alpha: f64) -> LossBreakdown {
    let n = steps.len().max(1) as f64;
    let avg = |f: fn(&LossBreakdown) -> f64| steps.iter().map(f).sum::<f64>() / n;
    LossBreakdown {
        l_super: avg(|b| b.l_super),
        l_sub: avg(|b| b.l_sub),
        l_seg: avg(|b| b.l_seg),
        l_meta: avg(|b| b.l_meta),
        l_total: avg(|b| b.l_total),
        alpha,
    }
}

/// Train `model` on `train`, selecting the epoch with the best mean
/// foreground Dice on `val`. Deterministic in `config.seed`.
pub fn train(
    mut model: Model<f32>,
    train: &[PreparedCase],
    val: &[PreparedCase],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let hw = model.config().input_hw;
    if let Some(c) = train.iter().chain(val).find(|c| (c.height, c.width) != hw) {
        return Err(Error::Shape(format!(
            "case {} is {}x{}, the network expects {hw:?}",
            c.case_id, c.height, c.width
        )));
    }
    let mut adam = Adam::new(&model.params, config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut steps = Vec::new();
    let mut best: Option<(f64, usize, Model<f32>)> = None;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_steps = Vec::new();
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&PreparedCase> = chunk.iter().map(|&i| &train[i]).collect();
            let (b, ok) = train_step(&mut model, &mut adam, &batch, config, &mut rng)?;
            if !ok {
                let snapshot = DivergenceSnapshot {
                    epoch,
                    step,
                    case_ids: batch.iter().map(|c| c.case_id.clone()).collect(),
                    l_super: b.l_super,
                    l_sub: b.l_sub,
                    l_meta: b.l_meta,
                };
                return Err(Error::Diverged(
                    serde_json::to_string(&snapshot).unwrap_or_else(|_| format!("{snapshot:?}")),
                ));
            }
            epoch_steps.push(b);
        }
        let mean = mean_breakdown(&epoch_steps, config.alpha);
        steps.extend(epoch_steps);
        let val_dice = if val.is_empty() {
            None
        } else {
            Some(evaluate(&model, val)?.mean_foreground_dice())
        };
        log::info!(
            "epoch {epoch}: total {:.4} sub {:.4} super {:.4} meta {:.4} val dice {:?}",
            mean.l_total,
            mean.l_sub,
            mean.l_super,
            mean.l_meta,
            val_dice
        );
        log.push(EpochLog {
            epoch,
            l_super: mean.l_super,
            l_sub: mean.l_sub,
            l_seg: mean.l_seg,
            l_meta: mean.l_meta,
            l_total: mean.l_total,
            alpha: config.alpha,
            val_dice,
        });
        if let Some(d) = val_dice {
            if best.as_ref().is_none_or(|(bd, ..)| d > *bd) {
                best = Some((d, epoch, model.clone()));
            }
        }
    }
    let (model, best_epoch) = match best {
        Some((_, e, m)) => (m, e),
        None => (model, config.epochs),
    };
    Ok(TrainOutcome {
        model,
        best_epoch,
        log,
        steps,
    })
}

/// Partition `0..n` into `folds` near-equal groups after a seeded shuffle.
/// Returns `(train, held_out)` index lists per fold.
pub fn fold_splits(n: usize, folds: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if folds < 2 || folds > n {
        return Err(Error::Config(format!("cannot split {n} cases into {folds} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..folds)
        .map(|f| {
            let held: Vec<usize> = idx.iter().enumerate().filter(|(i, _)| i % folds == f).map(|(_, v)| *v).collect();
            let rest = idx.iter().enumerate().filter(|(i, _)| i % folds != f).map(|(_, v)| *v).collect();
            (rest, held)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut store = ParamStore::<f32>::new();
        store.add("w", Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap());
        let cfg = TrainConfig {
            lr: 0.1,
            ..TrainConfig::default()
        };
        let mut adam = Adam::new(&store, &cfg);
        let g = Tensor::new(vec![3], vec![4.0, -0.01, 0.0]).unwrap();
        adam.step(&mut store, &[Some(g)]);
        let p = store.entries()[0].value.data();
        assert!((p[0] - 0.9).abs() < 1e-6 && (p[1] + 1.9).abs() < 1e-5 && p[2] == 0.5);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        assert!(TrainConfig::desk().validate().is_ok());
        for bad in [
            TrainConfig { lr: 0.0, ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { alpha: 1.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn center_fit_pads_and_crops() {
        let p: Vec<u8> = (0..6).collect();
        assert_eq!(center_fit(&p, 2, 3, 2, 1, 9), vec![1, 4]);
        assert_eq!(center_fit(&p, 2, 3, 4, 3, 9), vec![9, 9, 9, 0, 1, 2, 3, 4, 5, 9, 9, 9]);
    }

    proptest! {
        #[test]
        fn folds_partition_cases(n in 2usize..60, k in 2usize..8, seed in any::<u64>()) {
            prop_assume!(k <= n);
            let folds = fold_splits(n, k, seed).unwrap();
            let mut seen = vec![0; n];
            for (train, held) in &folds {
                prop_assert_eq!(train.len() + held.len(), n);
                prop_assert!(!held.is_empty());
                for i in held { seen[*i] += 1; }
                for i in train { prop_assert!(!held.contains(i)); }
            }
            prop_assert!(seen.iter().all(|c| *c == 1));
        }
    }
}
