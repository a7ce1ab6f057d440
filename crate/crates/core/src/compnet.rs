//! Encoder with per-stage metadata fusion, a binary whole-heart decoder with
//! encoder skips, and a multi-class decoder fed by the binary decoder's features.

use compseg_tensor::{Scalar, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cmfi::{Cmfi, Pooling};
use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::meta_codec::{MetadataRecord, MetadataSchema};
use crate::meta_mlp::{encode_batch, MetaFeatures, MetaMlp, MetaMlpConfig};
use crate::nn::{BnBuffers, Conv2d, ConvBnAct, ConvT2x2, Ctx, Mode, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetConfig {
    pub stage_channels: Vec<usize>,
    pub in_channels: usize,
    pub num_sub_classes: usize,
    pub negative_slope: f64,
    pub use_super_decoder: bool,
    pub use_cmfi: bool,
    /// Also fuse metadata after every binary-decoder level.
    pub decoder_cmfi: bool,
    pub fusion_pooling: Pooling,
    /// Add the fusion output to the stage features instead of replacing them.
    pub fusion_residual: bool,
    /// Training image size `(H, W)`; must be divisible by `2^(stages − 1)`.
    pub input_hw: (usize, usize),
    pub meta_head_dim: usize,
    pub meta_dropout: f64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            stage_channels: vec![32, 64, 128, 256, 320],
            in_channels: 1,
            num_sub_classes: 4,
            negative_slope: 0.01,
            use_super_decoder: true,
            use_cmfi: true,
            decoder_cmfi: false,
            fusion_pooling: Pooling::Sum,
            fusion_residual: false,
            input_hw: (256, 256),
            meta_head_dim: 128,
            meta_dropout: 0.1,
        }
    }
}

impl NetConfig {
    /// 64×64 inputs with channels `[8, 16, 32, 64, 80]`, mean-pooled
    /// residual fusion.
    pub fn desk() -> Self {
        Self {
            stage_channels: vec![8, 16, 32, 64, 80],
            input_hw: (64, 64),
            fusion_pooling: Pooling::Mean,
            fusion_residual: true,
            ..Self::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_channels.len()
    }

    /// Spatial reduction between the input and the bottleneck.
    pub fn downsample_factor(&self) -> usize {
        1 << (self.num_stages().saturating_sub(1))
    }

    pub fn meta_config(&self) -> MetaMlpConfig {
        MetaMlpConfig {
            stage_widths: self.stage_channels.clone(),
            head_dim: self.meta_head_dim,
            dropout_rate: self.meta_dropout,
            negative_slope: self.negative_slope,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ch = &self.stage_channels;
        if ch.is_empty() || ch[0] == 0 || ch.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("stage channels {ch:?} must be positive and strictly increasing")));
        }
        if self.in_channels == 0 {
            return Err(Error::Config("input channels must be positive".into()));
        }
        if self.num_sub_classes < 2 {
            return Err(Error::Config("at least two sub-segmentation classes are required".into()));
        }
        if !self.negative_slope.is_finite() {
            return Err(Error::Config("negative slope must be finite".into()));
        }
        if self.decoder_cmfi && !(self.use_cmfi && self.use_super_decoder) {
            return Err(Error::Config("decoder fusion needs both fusion and the binary decoder".into()));
        }
        self.check_spatial(self.input_hw.0, self.input_hw.1)?;
        if self.use_cmfi {
            self.meta_config().validate()?;
        }
        Ok(())
    }

    fn check_spatial(&self, h: usize, w: usize) -> Result<()> {
        let f = self.downsample_factor();
        if h == 0 || w == 0 || h % f != 0 || w % f != 0 {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by {f} for {} stages",
                self.num_stages()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct EncoderStage {
    first: ConvBnAct,
    second: ConvBnAct,
}

#[derive(Clone, Debug)]
struct DecoderLevel {
    up: ConvT2x2,
    first: ConvBnAct,
    second: ConvBnAct,
}

/// Graph handles produced by the encoder.
#[derive(Clone, Debug)]
pub struct EncoderNodes {
    /// Outputs of every stage but the last, shallowest first.
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

/// Graph handles produced by [`CompNet::forward`].
#[derive(Clone, Debug)]
pub struct ForwardNodes {
    pub super_logits: Option<Var>,
    pub sub_logits: Var,
    /// Binary-decoder level outputs, deepest first.
    pub super_features: Vec<Var>,
    pub meta: Option<MetaFeatures>,
}

/// Layer layout of the network; parameter values live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct CompNet {
    pub config: NetConfig,
    encoder: Vec<EncoderStage>,
    super_levels: Vec<DecoderLevel>,
    super_head: Option<Conv2d>,
    sub_levels: Vec<DecoderLevel>,
    sub_head: Conv2d,
    meta: Option<MetaMlp>,
    fusion: Vec<Cmfi>,
    decoder_fusion: Vec<Cmfi>,
}

impl CompNet {
    /// Segmentation layers draw from `seed`; metadata layers from an independent
    /// stream, so arms that differ only in fusion share their initial weights.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        bn: &mut BnBuffers<T>,
        config: &NetConfig,
        schema: &MetadataSchema,
        seed: u64,
    ) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let slope = config.negative_slope;
        let ch = &config.stage_channels;
        let s = ch.len();

        let mut encoder = Vec::with_capacity(s);
        for (i, &c) in ch.iter().enumerate() {
            let (cin, stride) = if i == 0 { (config.in_channels, 1) } else { (ch[i - 1], 2) };
            encoder.push(EncoderStage {
                first: ConvBnAct::new(store, bn, &format!("enc{i}.a"), cin, c, stride, slope, &mut rng),
                second: ConvBnAct::new(store, bn, &format!("enc{i}.b"), c, c, 1, slope, &mut rng),
            });
        }

        let decoder = |store: &mut ParamStore<T>, bn: &mut BnBuffers<T>, rng: &mut ChaCha8Rng, name: &str, skip: bool| {
            (0..s - 1)
                .rev()
                .map(|lvl| {
                    let c = ch[lvl];
                    let cin = if skip { 2 * c } else { c };
                    DecoderLevel {
                        up: ConvT2x2::new(store, &format!("{name}{lvl}.up"), ch[lvl + 1], c, rng),
                        first: ConvBnAct::new(store, bn, &format!("{name}{lvl}.a"), cin, c, 1, slope, rng),
                        second: ConvBnAct::new(store, bn, &format!("{name}{lvl}.b"), c, c, 1, slope, rng),
                    }
                })
                .collect::<Vec<_>>()
        };

        let (super_levels, super_head) = if config.use_super_decoder {
            let levels = decoder(store, bn, &mut rng, "sup", true);
            let head = Conv2d::new(store, "sup.head", ch[0], 1, 1, 1, true, &mut rng);
            (levels, Some(head))
        } else {
            (Vec::new(), None)
        };
        let sub_levels = decoder(store, bn, &mut rng, "sub", false);
        let sub_head = Conv2d::new(store, "sub.head", ch[0], config.num_sub_classes, 1, 1, true, &mut rng);

        let (meta, fusion, decoder_fusion) = if config.use_cmfi {
            let mut mrng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d65_7461_5f66_7573);
            let meta = MetaMlp::new(store, bn, &config.meta_config(), schema, &mut mrng)?;
            let fusion = ch
                .iter()
                .enumerate()
                .map(|(i, &c)| Cmfi::new(store, &format!("fusion{i}"), c, config.fusion_pooling, &mut mrng))
                .collect();
            let decoder_fusion = if config.decoder_cmfi {
                (0..s - 1)
                    .rev()
                    .map(|i| Cmfi::new(store, &format!("dec_fusion{i}"), ch[i], config.fusion_pooling, &mut mrng))
                    .collect()
            } else {
                Vec::new()
            };
            (Some(meta), fusion, decoder_fusion)
        } else {
            (None, Vec::new(), Vec::new())
        };

        Ok(Self {
            config: config.clone(),
            encoder,
            super_levels,
            super_head,
            sub_levels,
            sub_head,
            meta,
            fusion,
            decoder_fusion,
        })
    }

    pub fn uses_metadata(&self) -> bool {
        self.meta.is_some()
    }

    fn fuse<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, block: &Cmfi, x: Var, meta: Var) -> Result<Var> {
        let fused = block.forward(ctx, x, meta)?;
        if self.config.fusion_residual {
            Ok(ctx.graph.add(x, fused)?)
        } else {
            Ok(fused)
        }
    }

    pub fn encoder_forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        image: Var,
        meta: Option<&MetaFeatures>,
    ) -> Result<EncoderNodes> {
        let (_, c, h, w) = ctx.value(image).dims4()?;
        if c != self.config.in_channels {
            return Err(Error::Shape(format!(
                "image has {c} channels, network expects {}",
                self.config.in_channels
            )));
        }
        self.config.check_spatial(h, w)?;
        let meta = match (&self.meta, meta) {
            (Some(_), Some(m)) => Some(m),
            (Some(_), None) => return Err(Error::Validation("fusion is enabled but no metadata features were given".into())),
            (None, _) => None,
        };
        let mut x = image;
        let mut outputs = Vec::with_capacity(self.encoder.len());
        for (i, stage) in self.encoder.iter().enumerate() {
            x = stage.first.forward(ctx, x)?;
            x = stage.second.forward(ctx, x)?;
            if let Some(m) = meta {
                x = self.fuse(ctx, &self.fusion[i], x, m.stage_features[i])?;
            }
            outputs.push(x);
        }
        let bottleneck = outputs.pop().expect("at least one stage");
        Ok(EncoderNodes {
            skips: outputs,
            bottleneck,
        })
    }

    /// Returns the binary logits and the per-level decoder features, deepest first.
    pub fn super_decoder_forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        enc: &EncoderNodes,
        meta: Option<&MetaFeatures>,
    ) -> Result<Option<(Var, Vec<Var>)>> {
        let Some(head) = &self.super_head else {
            return Ok(None);
        };
        if enc.skips.len() != self.super_levels.len() {
            return Err(Error::Shape(format!(
                "{} skips for {} decoder levels",
                enc.skips.len(),
                self.super_levels.len()
            )));
        }
        let mut x = enc.bottleneck;
        let mut feats = Vec::with_capacity(self.super_levels.len());
        for (k, level) in self.super_levels.iter().enumerate() {
            let skip = enc.skips[enc.skips.len() - 1 - k];
            x = level.up.forward(ctx, x)?;
            x = ctx.graph.concat_channels(x, skip)?;
            x = level.first.forward(ctx, x)?;
            x = level.second.forward(ctx, x)?;
            if let (Some(fuse), Some(m)) = (self.decoder_fusion.get(k), meta) {
                x = self.fuse(ctx, fuse, x, m.stage_features[enc.skips.len() - 1 - k])?;
            }
            feats.push(x);
        }
        let logits = head.forward(ctx, x)?;
        Ok(Some((logits, feats)))
    }

    /// `super_features` are the binary decoder's level outputs (deepest first),
    /// added to this decoder's upsampled features; pass an empty slice when the
    /// binary decoder is disabled.
    pub fn sub_decoder_forward<T: Scalar>(
        &self,
        ctx: &mut Ctx<'_, T>,
        bottleneck: Var,
        super_features: &[Var],
    ) -> Result<Var> {
        if !super_features.is_empty() && super_features.len() != self.sub_levels.len() {
            return Err(Error::Shape(format!(
                "{} copied features for {} decoder levels",
                super_features.len(),
                self.sub_levels.len()
            )));
        }
        let mut x = bottleneck;
        for (k, level) in self.sub_levels.iter().enumerate() {
            x = level.up.forward(ctx, x)?;
            if let Some(f) = super_features.get(k) {
                x = ctx.graph.add(x, *f)?;
            }
            x = level.first.forward(ctx, x)?;
            x = level.second.forward(ctx, x)?;
        }
        self.sub_head.forward(ctx, x)
    }

    /// `meta_input` is the encoded `(B, E)` metadata, required when fusion is on
    /// and ignored otherwise.
    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var, meta_input: Option<Var>) -> Result<ForwardNodes> {
        let meta = match (&self.meta, meta_input) {
            (Some(mlp), Some(m)) => Some(mlp.forward(ctx, m)?),
            (Some(_), None) => return Err(Error::Validation("fusion is enabled but no metadata was given".into())),
            (None, _) => None,
        };
        let enc = self.encoder_forward(ctx, image, meta.as_ref())?;
        let (super_logits, super_features) = match self.super_decoder_forward(ctx, &enc, meta.as_ref())? {
            Some((l, f)) => (Some(l), f),
            None => (None, Vec::new()),
        };
        let sub_logits = self.sub_decoder_forward(ctx, enc.bottleneck, &super_features)?;
        Ok(ForwardNodes {
            super_logits,
            sub_logits,
            super_features,
            meta,
        })
    }
}

/// Network outputs for a batch.
#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationOutput<T> {
    /// `(B, 1, H, W)`; absent when the binary decoder is disabled.
    pub super_logits: Option<Tensor<T>>,
    /// `(B, K, H, W)`.
    pub sub_logits: Tensor<T>,
    /// One `(B, arity)` tensor per schema entity; empty without fusion.
    pub entity_outputs: Vec<Tensor<T>>,
}

impl<T: Scalar> SegmentationOutput<T> {
    pub fn super_probs(&self) -> Option<Tensor<T>> {
        self.super_logits
            .as_ref()
            .map(|t| t.map(|v| T::one() / (T::one() + (-v).exp())))
    }

    pub fn sub_probs(&self) -> Tensor<T> {
        let shape = self.sub_logits.shape();
        let (b, k) = (shape[0], shape[1]);
        let n = self.sub_logits.numel() / (b * k);
        let src = self.sub_logits.data();
        let mut out = vec![T::zero(); src.len()];
        for bi in 0..b {
            for p in 0..n {
                let at = |c: usize| (bi * k + c) * n + p;
                let max = (0..k).map(|c| src[at(c)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for c in 0..k {
                    let e = (src[at(c)] - max).exp();
                    out[at(c)] = e;
                    sum += e;
                }
                for c in 0..k {
                    out[at(c)] = out[at(c)] / sum;
                }
            }
        }
        Tensor::new(shape.to_vec(), out).expect("same shape")
    }

    pub fn sample(&self, index: usize) -> Self {
        Self {
            super_logits: self.super_logits.as_ref().map(|t| t.sample(index)),
            sub_logits: self.sub_logits.sample(index),
            entity_outputs: self.entity_outputs.iter().map(|t| t.sample(index)).collect(),
        }
    }
}

/// A network together with its parameters, running statistics and schema.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar> {
    pub net: CompNet,
    pub params: ParamStore<T>,
    pub bn: BnBuffers<T>,
    pub schema: MetadataSchema,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &NetConfig, schema: &MetadataSchema, seed: u64) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut bn = BnBuffers::new();
        let net = CompNet::new(&mut params, &mut bn, config, schema, seed)?;
        Ok(Self {
            net,
            params,
            bn,
            schema: schema.clone(),
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.net.config
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Encoded metadata for `records`, or `None` when the network ignores it.
    pub fn encode(&self, records: &[&MetadataRecord]) -> Result<Option<Tensor<T>>> {
        if !self.net.uses_metadata() {
            return Ok(None);
        }
        let projected: Vec<MetadataRecord> = records.iter().map(|r| r.project(&self.schema)).collect();
        let refs: Vec<&MetadataRecord> = projected.iter().collect();
        Ok(Some(encode_batch(&refs, &self.schema)?))
    }

    /// Forward pass on a `(B, C, H, W)` batch.
    pub fn forward_batch(
        &self,
        images: &Tensor<T>,
        records: &[&MetadataRecord],
        mode: Mode,
        seed: u64,
    ) -> Result<SegmentationOutput<T>> {
        let (b, ..) = images.dims4()?;
        if b == 0 {
            return Err(Error::EmptyBatch);
        }
        if self.net.uses_metadata() && records.len() != b {
            return Err(Error::Shape(format!("{} records for a batch of {b}", records.len())));
        }
        let encoded = self.encode(records)?;
        let mut ctx = Ctx::new(&self.params, &self.bn, mode, false, seed);
        let img = ctx.input(images.clone());
        let meta = encoded.map(|m| ctx.input(m));
        let nodes = self.net.forward(&mut ctx, img, meta)?;
        Ok(SegmentationOutput {
            super_logits: nodes.super_logits.map(|v| ctx.value(v).clone()),
            sub_logits: ctx.value(nodes.sub_logits).clone(),
            entity_outputs: nodes
                .meta
                .map(|m| m.entity_outputs.iter().map(|v| ctx.value(*v).clone()).collect())
                .unwrap_or_default(),
        })
    }
}

/// Eval or train forward pass on one preprocessed image.
pub fn model_forward<T: Scalar>(
    model: &Model<T>,
    image: &FeatureMap<T>,
    record: &MetadataRecord,
    mode: Mode,
    seed: u64,
) -> Result<SegmentationOutput<T>> {
    model.forward_batch(image.data(), &[record], mode, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record() -> MetadataRecord {
        MetadataRecord::new()
            .with_label("vendor", "Siemens")
            .with_label("scanner", "Avanto")
            .with_number("field_strength", 1.5)
            .with_label("disease", "HCM")
    }

    fn tiny(use_super: bool, use_cmfi: bool) -> NetConfig {
        NetConfig {
            stage_channels: vec![4, 8, 12],
            input_hw: (16, 16),
            use_super_decoder: use_super,
            use_cmfi,
            ..NetConfig::default()
        }
    }

    #[test]
    fn rejects_indivisible_input_at_construction() {
        let schema = MetadataSchema::builtin("mms2").unwrap();
        let cfg = NetConfig {
            input_hw: (18, 16),
            ..tiny(true, true)
        };
        assert!(matches!(Model::<f32>::new(&cfg, &schema, 0), Err(Error::Shape(_))));
        let cfg = NetConfig {
            stage_channels: vec![4, 4],
            ..tiny(true, true)
        };
        assert!(matches!(Model::<f32>::new(&cfg, &schema, 0), Err(Error::Config(_))));
    }

    #[test]
    fn output_shapes_follow_input() {
        let schema = MetadataSchema::builtin("mms2").unwrap();
        let model = Model::<f32>::new(&tiny(true, true), &schema, 1).unwrap();
        let img = FeatureMap::new(Tensor::full(vec![1, 1, 16, 16], 0.5), (1.25, 1.25)).unwrap();
        let out = model_forward(&model, &img, &record(), Mode::Eval, 0).unwrap();
        assert_eq!(out.super_logits.as_ref().unwrap().shape(), &[1, 1, 16, 16]);
        assert_eq!(out.sub_logits.shape(), &[1, 4, 16, 16]);
        let arities: Vec<usize> = out.entity_outputs.iter().map(|t| t.shape()[1]).collect();
        assert_eq!(arities, vec![3, 9, 1, 6]);
    }

    #[test]
    fn missing_metadata_points_to_ensemble() {
        let schema = MetadataSchema::builtin("mms2").unwrap();
        let model = Model::<f32>::new(&tiny(true, true), &schema, 1).unwrap();
        let img = FeatureMap::unitless(Tensor::full(vec![1, 1, 16, 16], 0.5)).unwrap();
        let partial = record().with_absent("vendor");
        assert!(matches!(
            model_forward(&model, &img, &partial, Mode::Eval, 0),
            Err(Error::MissingMetadata(e)) if e == "vendor"
        ));
        let plain = Model::<f32>::new(&tiny(true, false), &schema, 1).unwrap();
        assert!(model_forward(&plain, &img, &partial, Mode::Eval, 0).is_ok());
    }

    #[test]
    fn parameter_counts_decrease_with_ablation() {
        let schema = MetadataSchema::builtin("mms2").unwrap();
        let full = Model::<f32>::new(&tiny(true, true), &schema, 0).unwrap().num_params();
        let no_fusion = Model::<f32>::new(&tiny(true, false), &schema, 0).unwrap().num_params();
        let plain = Model::<f32>::new(&tiny(false, false), &schema, 0).unwrap().num_params();
        assert!(full > no_fusion && no_fusion > plain, "{full} {no_fusion} {plain}");
    }

    #[test]
    fn decoder_fusion_adds_blocks() {
        let schema = MetadataSchema::builtin("mms2").unwrap();
        let cfg = NetConfig {
            decoder_cmfi: true,
            ..tiny(true, true)
        };
        let with = Model::<f32>::new(&cfg, &schema, 0).unwrap();
        let without = Model::<f32>::new(&tiny(true, true), &schema, 0).unwrap();
        assert!(with.num_params() > without.num_params());
        let img = Tensor::full(vec![1, 1, 16, 16], 0.1);
        assert!(with.forward_batch(&img, &[&record()], Mode::Eval, 0).is_ok());
    }
}
