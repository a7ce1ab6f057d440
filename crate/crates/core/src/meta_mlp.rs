//! Metadata branch: one linear → batch-norm → LeakyReLU → dropout block per
//! network stage, then a 128-d projection feeding one head per schema entity.

use compseg_tensor::{Scalar, Tensor, Var};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta_codec::{encode_metadata, MetadataRecord, MetadataSchema};
use crate::nn::{BatchNorm, BnBuffers, Ctx, Linear, Mode, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaMlpConfig {
    pub stage_widths: Vec<usize>,
    pub head_dim: usize,
    pub dropout_rate: f64,
    pub negative_slope: f64,
}

impl Default for MetaMlpConfig {
    fn default() -> Self {
        Self {
            stage_widths: vec![32, 64, 128, 256, 320],
            head_dim: 128,
            dropout_rate: 0.1,
            negative_slope: 0.01,
        }
    }
}

impl MetaMlpConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_widths.is_empty() || self.stage_widths.contains(&0) {
            return Err(Error::Config("metadata MLP stage widths must be positive".into()));
        }
        if self.head_dim == 0 {
            return Err(Error::Config("metadata head dimension must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

/// Graph handles produced by [`MetaMlp::forward`].
#[derive(Clone, Debug)]
pub struct MetaFeatures {
    /// `(B, stage_widths[s])` per stage.
    pub stage_features: Vec<Var>,
    /// `(B, head_dim)`.
    pub head_input: Var,
    /// `(B, arity)` per schema entity.
    pub entity_outputs: Vec<Var>,
}

/// Materialized [`MetaFeatures`].
#[derive(Clone, Debug, PartialEq)]
pub struct MetadataFeatureSet<T> {
    pub stage_features: Vec<Tensor<T>>,
    pub head_input: Tensor<T>,
    pub entity_outputs: Vec<Tensor<T>>,
}

impl MetaFeatures {
    pub fn materialize<T: Scalar>(&self, ctx: &Ctx<'_, T>) -> MetadataFeatureSet<T> {
        MetadataFeatureSet {
            stage_features: self.stage_features.iter().map(|v| ctx.value(*v).clone()).collect(),
            head_input: ctx.value(self.head_input).clone(),
            entity_outputs: self.entity_outputs.iter().map(|v| ctx.value(*v).clone()).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MetaMlp {
    pub config: MetaMlpConfig,
    pub input_dim: usize,
    blocks: Vec<(Linear, BatchNorm)>,
    head: Linear,
    entity_heads: Vec<Linear>,
}

impl MetaMlp {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        bn: &mut BnBuffers<T>,
        config: &MetaMlpConfig,
        schema: &MetadataSchema,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        if schema.is_empty() {
            return Err(Error::Config("metadata MLP needs at least one schema entity".into()));
        }
        let mut blocks = Vec::with_capacity(config.stage_widths.len());
        let mut width = schema.len();
        for (s, &out) in config.stage_widths.iter().enumerate() {
            // bias would be cancelled by the batch norm that follows
            let lin = Linear::new(store, &format!("meta.stage{s}.linear"), width, out, false, rng);
            let norm = BatchNorm::new(store, bn, &format!("meta.stage{s}.bn"), out);
            blocks.push((lin, norm));
            width = out;
        }
        let head = Linear::new(store, "meta.head", width, config.head_dim, true, rng);
        let entity_heads = schema
            .entities
            .iter()
            .map(|e| Linear::new(store, &format!("meta.entity.{}", e.name), config.head_dim, e.arity(), true, rng))
            .collect();
        Ok(Self {
            config: config.clone(),
            input_dim: schema.len(),
            blocks,
            head,
            entity_heads,
        })
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, encoded: Var) -> Result<MetaFeatures> {
        let shape = ctx.value(encoded).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.input_dim {
            return Err(Error::Shape(format!(
                "metadata input {shape:?}, expected (B, {})",
                self.input_dim
            )));
        }
        if shape[0] == 0 {
            return Err(Error::EmptyBatch);
        }
        let slope = T::lit(self.config.negative_slope);
        let mut x = encoded;
        let mut stage_features = Vec::with_capacity(self.blocks.len());
        for (lin, norm) in &self.blocks {
            let y = lin.forward(ctx, x)?;
            let y = norm.forward(ctx, y)?;
            let y = ctx.graph.leaky_relu(y, slope);
            x = ctx.dropout(y, self.config.dropout_rate)?;
            stage_features.push(x);
        }
        let h = self.head.forward(ctx, x)?;
        let head_input = ctx.graph.leaky_relu(h, slope);
        let entity_outputs = self
            .entity_heads
            .iter()
            .map(|l| l.forward(ctx, head_input))
            .collect::<Result<Vec<_>>>()?;
        Ok(MetaFeatures {
            stage_features,
            head_input,
            entity_outputs,
        })
    }

    /// Tensor-level forward pass on an encoded `(B, E)` matrix.
    pub fn run<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        bn: &BnBuffers<T>,
        encoded: &Tensor<T>,
        mode: Mode,
        seed: u64,
    ) -> Result<MetadataFeatureSet<T>> {
        let mut ctx = Ctx::new(params, bn, mode, false, seed);
        let x = ctx.input(encoded.clone());
        let feats = self.forward(&mut ctx, x)?;
        Ok(feats.materialize(&ctx))
    }
}

/// Encode a batch of records into a `(B, E)` tensor.
pub fn encode_batch<T: Scalar>(records: &[&MetadataRecord], schema: &MetadataSchema) -> Result<Tensor<T>> {
    if records.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut data = Vec::with_capacity(records.len() * schema.len());
    for r in records {
        data.extend(encode_metadata(r, schema)?.into_iter().map(T::lit));
    }
    Ok(Tensor::new(vec![records.len(), schema.len()], data)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::meta_codec::MetadataEntitySpec;
    use crate::nn::check_param_gradients;
    use rand::{Rng, SeedableRng};

    fn setup(schema: &MetadataSchema, config: &MetaMlpConfig) -> (ParamStore<f64>, BnBuffers<f64>, MetaMlp) {
        let mut store = ParamStore::new();
        let mut bn = BnBuffers::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mlp = MetaMlp::new(&mut store, &mut bn, config, schema, &mut rng).unwrap();
        (store, bn, mlp)
    }

    fn random_input(b: usize, e: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![b, e], |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn stage_widths_follow_config() {
        let schema = MetadataSchema::builtin("mms2").unwrap();
        let (store, bn, mlp) = setup(&schema, &MetaMlpConfig::default());
        for mode in [Mode::Train, Mode::Eval] {
            let out = mlp.run(&store, &bn, &random_input(2, 4, 1), mode, 9).unwrap();
            let widths: Vec<usize> = out.stage_features.iter().map(|t| t.shape()[1]).collect();
            assert_eq!(widths, vec![32, 64, 128, 256, 320]);
            assert_eq!(out.head_input.shape(), &[2, 128]);
        }
    }

    #[test]
    fn eval_mode_is_bit_identical() {
        let schema = MetadataSchema::builtin("mms2").unwrap();
        let (store, bn, mlp) = setup(&schema, &MetaMlpConfig::default());
        let x = random_input(3, 4, 2);
        let a = mlp.run(&store, &bn, &x, Mode::Eval, 1).unwrap();
        let b = mlp.run(&store, &bn, &x, Mode::Eval, 2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn entity_heads_match_schema_arity() {
        let schema = MetadataSchema::new(
            "t",
            vec![
                MetadataEntitySpec::categorical("vendor", &["Philips", "Siemens", "GE"]),
                MetadataEntitySpec::continuous("field_strength", 1.0),
            ],
        )
        .unwrap();
        let (store, bn, mlp) = setup(&schema, &MetaMlpConfig::default());
        let out = mlp.run(&store, &bn, &random_input(5, 2, 3), Mode::Eval, 0).unwrap();
        let shapes: Vec<&[usize]> = out.entity_outputs.iter().map(|t| t.shape()).collect();
        assert_eq!(shapes, vec![&[5, 3][..], &[5, 1][..]]);
    }

    #[test]
    fn shape_and_batch_errors() {
        let schema = MetadataSchema::builtin("mms2").unwrap();
        let (store, bn, mlp) = setup(&schema, &MetaMlpConfig::default());
        assert!(matches!(
            mlp.run(&store, &bn, &random_input(2, 3, 0), Mode::Eval, 0),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            mlp.run(&store, &bn, &Tensor::zeros(vec![0, 4]), Mode::Eval, 0),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn single_sample_train_batch_falls_back_to_identity_norm() {
        let schema = MetadataSchema::builtin("mms2").unwrap();
        let (store, bn, mlp) = setup(&schema, &MetaMlpConfig::default());
        let out = mlp.run(&store, &bn, &random_input(1, 4, 5), Mode::Train, 0).unwrap();
        assert!(out.head_input.all_finite());
    }

    /// Every linear weight of the MLP gets a nonzero gradient under a metadata
    /// loss, and the tape agrees with central differences.
    #[test]
    fn linear_layers_receive_finite_difference_exact_gradients() {
        let schema = MetadataSchema::new(
            "t",
            vec![
                MetadataEntitySpec::categorical("vendor", &["Philips", "Siemens", "GE"]),
                MetadataEntitySpec::continuous("field_strength", 1.0),
            ],
        )
        .unwrap();
        let config = MetaMlpConfig {
            stage_widths: vec![3, 4],
            head_dim: 5,
            dropout_rate: 0.1,
            negative_slope: 0.01,
        };
        let (store, bn, mlp) = setup(&schema, &config);
        let x = random_input(4, 2, 11);
        let reports = check_param_gradients(&store, &bn, Mode::Train, 7, 1e-5, |ctx| {
            let xin = ctx.input(x.clone());
            let feats = mlp.forward(ctx, xin)?;
            let ce = ctx.graph.cross_entropy(feats.entity_outputs[0], vec![0, 1, 2, 1])?;
            let l1 = ctx.graph.l1_loss(feats.entity_outputs[1], vec![1.5, 3.0, 1.5, 0.1])?;
            Ok(ctx.graph.weighted_sum(vec![(ce, 1.0), (l1, 1.0)])?)
        })
        .unwrap();
        for r in &reports {
            assert!(r.relative_error() < 1e-5, "{}: {}", r.name, r.relative_error());
            if r.name.ends_with(".weight") {
                assert!(r.analytic.norm() > 0.0, "{} has zero gradient", r.name);
            }
        }
    }
}
