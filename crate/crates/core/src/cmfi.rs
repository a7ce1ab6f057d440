//! Additive cross-attention between image tokens and broadcast metadata.
//!
//! Cost is linear in the number of tokens: attention collapses each query
//! matrix to one global vector per sample instead of forming token pairs.

use compseg_tensor::{Graph, Scalar, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::feature::FeatureMap;
use crate::nn::{Ctx, ParamId, ParamStore};

pub const DEFAULT_NORM_EPS: f64 = 1e-12;

/// How token attention weights are pooled into the global query vectors.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Plain sum over all `N` tokens; the global vector grows with `N`.
    #[default]
    Sum,
    /// Sum divided by `N`.
    Mean,
}

/// Number of tensors in [`CmfiParams::tensors`].
pub const CMFI_TENSOR_COUNT: usize = 20;

/// Weight `(C, C)` and bias `(C,)` of one channel transform.
#[derive(Clone, Debug, PartialEq)]
pub struct Affine<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Affine<T> {
    pub fn zeros(c: usize) -> Self {
        Self {
            weight: Tensor::zeros(vec![c, c]),
            bias: Tensor::zeros(vec![c]),
        }
    }

    pub fn identity(c: usize) -> Self {
        Self {
            weight: Tensor::from_fn(vec![c, c], |i| if i / c == i % c { T::one() } else { T::zero() }),
            bias: Tensor::zeros(vec![c]),
        }
    }

    /// Symmetric uniform fan-in weights; zero bias unless `random_bias`.
    pub fn random(c: usize, rng: &mut ChaCha8Rng, random_bias: bool) -> Self {
        let bound = 1.0 / (c as f64).sqrt();
        let mut draw = |_| T::lit(rng.random_range(-bound..=bound));
        let weight = Tensor::from_fn(vec![c, c], &mut draw);
        let bias = if random_bias {
            Tensor::from_fn(vec![c], &mut draw)
        } else {
            Tensor::zeros(vec![c])
        };
        Self { weight, bias }
    }
}

/// Parameters of one fusion block with channel width `C`.
#[derive(Clone, Debug, PartialEq)]
pub struct CmfiParams<T> {
    pub query_image: Affine<T>,
    pub key_image: Affine<T>,
    pub query_meta: Affine<T>,
    pub key_meta: Affine<T>,
    /// Attention vector scoring image queries, length `C`.
    pub score_image: Tensor<T>,
    /// Attention vector scoring metadata queries, length `C`.
    pub score_meta: Tensor<T>,
    /// Mixing transforms for image-global×image-key, image-global×meta-key,
    /// meta-global×meta-key and meta-global×image-key, in that order.
    pub mix: [Affine<T>; 4],
    pub output: Affine<T>,
    pub norm_eps: f64,
}

impl<T: Scalar> CmfiParams<T> {
    pub fn zeros(c: usize) -> Self {
        Self {
            query_image: Affine::zeros(c),
            key_image: Affine::zeros(c),
            query_meta: Affine::zeros(c),
            key_meta: Affine::zeros(c),
            score_image: Tensor::zeros(vec![c]),
            score_meta: Tensor::zeros(vec![c]),
            mix: std::array::from_fn(|_| Affine::zeros(c)),
            output: Affine::zeros(c),
            norm_eps: DEFAULT_NORM_EPS,
        }
    }

    pub fn random(c: usize, rng: &mut ChaCha8Rng, random_bias: bool) -> Self {
        let bound = 1.0 / (c as f64).sqrt();
        Self {
            query_image: Affine::random(c, rng, random_bias),
            key_image: Affine::random(c, rng, random_bias),
            query_meta: Affine::random(c, rng, random_bias),
            key_meta: Affine::random(c, rng, random_bias),
            score_image: Tensor::from_fn(vec![c], |_| T::lit(rng.random_range(-bound..=bound))),
            score_meta: Tensor::from_fn(vec![c], |_| T::lit(rng.random_range(-bound..=bound))),
            mix: std::array::from_fn(|_| Affine::random(c, rng, random_bias)),
            output: Affine::random(c, rng, random_bias),
            norm_eps: DEFAULT_NORM_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.score_image.numel()
    }

    /// All tensors in a fixed order: the four projections (weight, bias),
    /// the two score vectors, the four mixing transforms, the output transform.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut out = Vec::with_capacity(CMFI_TENSOR_COUNT);
        for a in [&self.query_image, &self.key_image, &self.query_meta, &self.key_meta] {
            out.extend([&a.weight, &a.bias]);
        }
        out.extend([&self.score_image, &self.score_meta]);
        for a in self.mix.iter().chain(std::iter::once(&self.output)) {
            out.extend([&a.weight, &a.bias]);
        }
        out
    }

    /// Inverse of [`CmfiParams::tensors`].
    pub fn from_tensors(tensors: Vec<Tensor<T>>, norm_eps: f64) -> Result<Self> {
        if tensors.len() != CMFI_TENSOR_COUNT {
            return Err(Error::Shape(format!(
                "expected {CMFI_TENSOR_COUNT} fusion tensors, got {}",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let mut next = || it.next().expect("length checked");
        let mut affine = || Affine {
            weight: next(),
            bias: next(),
        };
        let (qi, ki, qm, km) = (affine(), affine(), affine(), affine());
        // score vectors occupy one slot each; reuse the pair reader and split it
        let scores = affine();
        let (si, sm) = (scores.weight, scores.bias);
        let mix = [affine(), affine(), affine(), affine()];
        let output = affine();
        let params = Self {
            query_image: qi,
            key_image: ki,
            query_meta: qm,
            key_meta: km,
            score_image: si,
            score_meta: sm,
            mix,
            output,
            norm_eps,
        };
        params.validate()?;
        Ok(params)
    }

    pub fn validate(&self) -> Result<()> {
        let c = self.channels();
        if c == 0 {
            return Err(Error::Shape("fusion width must be positive".into()));
        }
        for (i, t) in self.tensors().into_iter().enumerate() {
            // weights sit at even slots except the two score vectors at 8 and 9
            let expect: &[usize] = if i % 2 == 1 || i == 8 { &[c] } else { &[c, c] };
            if t.shape() != expect {
                return Err(Error::Shape(format!("fusion tensor {i} has shape {:?}, expected {expect:?}", t.shape())));
            }
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// Intermediate quantities of one fusion pass.
#[derive(Clone, Debug, PartialEq)]
pub struct CmfiIntermediate<T> {
    /// `(B, N)` scaled image attention scores.
    pub image_scores: Tensor<T>,
    /// `(B, N)` scaled metadata attention scores.
    pub meta_scores: Tensor<T>,
    /// `(B, C)` global image query.
    pub image_global: Tensor<T>,
    /// `(B, C)` global metadata query.
    pub meta_global: Tensor<T>,
    /// `(B, N, C)` sum of the four mixing terms.
    pub mixed: Tensor<T>,
    /// `(B, N, C)` meta-global×meta-key mixing term alone.
    pub meta_meta_term: Tensor<T>,
    /// `(B, N, C)` normalized image and metadata queries.
    pub image_query_unit: Tensor<T>,
    pub meta_query_unit: Tensor<T>,
    /// `(B, N, C)` output tokens before reshaping.
    pub output_tokens: Tensor<T>,
}

/// Graph leaves for one fusion block.
#[derive(Clone, Copy, Debug)]
pub struct CmfiVars {
    pub query_image: (Var, Var),
    pub key_image: (Var, Var),
    pub query_meta: (Var, Var),
    pub key_meta: (Var, Var),
    pub score_image: Var,
    pub score_meta: Var,
    pub mix: [(Var, Var); 4],
    pub output: (Var, Var),
}

impl CmfiVars {
    /// Build from 20 leaves in [`CmfiParams::tensors`] order.
    pub fn from_slice(v: &[Var]) -> Result<Self> {
        if v.len() != CMFI_TENSOR_COUNT {
            return Err(Error::Shape(format!("expected {CMFI_TENSOR_COUNT} fusion leaves, got {}", v.len())));
        }
        Ok(Self {
            query_image: (v[0], v[1]),
            key_image: (v[2], v[3]),
            query_meta: (v[4], v[5]),
            key_meta: (v[6], v[7]),
            score_image: v[8],
            score_meta: v[9],
            mix: [(v[10], v[11]), (v[12], v[13]), (v[14], v[15]), (v[16], v[17])],
            output: (v[18], v[19]),
        })
    }
}

/// Graph handles of one fusion pass.
#[derive(Clone, Copy, Debug)]
pub struct CmfiNodes {
    pub image_scores: Var,
    pub meta_scores: Var,
    pub image_global: Var,
    pub meta_global: Var,
    pub mixed: Var,
    pub meta_meta_term: Var,
    pub image_query_unit: Var,
    pub meta_query_unit: Var,
    pub output_tokens: Var,
    pub output: Var,
}

/// Record the fusion of `image` `(B, C, H, W)` with `meta` `(B, C)` on `g`.
pub fn build_cmfi<T: Scalar>(
    g: &mut Graph<T>,
    image: Var,
    meta: Var,
    p: &CmfiVars,
    norm_eps: f64,
    pooling: Pooling,
) -> Result<CmfiNodes> {
    let (b, c, h, w) = g.value(image).dims4()?;
    if g.shape(meta) != [b, c] {
        return Err(Error::Shape(format!(
            "metadata features {:?} do not match image features ({b}, {c}, {h}, {w})",
            g.shape(meta)
        )));
    }
    let n = h * w;
    let tokens = g.to_tokens(image)?;
    let meta_tokens = g.broadcast_tokens(meta, n)?;

    let q_img = g.linear(tokens, p.query_image.0, Some(p.query_image.1))?;
    let k_img = g.linear(tokens, p.key_image.0, Some(p.key_image.1))?;
    let q_meta = g.linear(meta_tokens, p.query_meta.0, Some(p.query_meta.1))?;
    let k_meta = g.linear(meta_tokens, p.key_meta.0, Some(p.key_meta.1))?;

    let pool = match pooling {
        Pooling::Sum => 1.0,
        Pooling::Mean => n as f64,
    };
    let scale = T::lit(1.0 / ((c as f64).sqrt() * pool));
    let image_scores = g.token_dot(q_img, p.score_image, scale)?;
    let meta_scores = g.token_dot(q_meta, p.score_meta, scale)?;
    let image_global = g.token_weighted_sum(image_scores, q_img)?;
    let meta_global = g.token_weighted_sum(meta_scores, q_meta)?;

    let pairs = [
        (image_global, k_img),
        (image_global, k_meta),
        (meta_global, k_meta),
        (meta_global, k_img),
    ];
    let mut terms = Vec::with_capacity(4);
    for ((gv, kv), (tw, tb)) in pairs.into_iter().zip(p.mix) {
        let prod = g.mul_global(gv, kv)?;
        terms.push(g.linear(prod, tw, Some(tb))?);
    }
    let meta_meta_term = terms[2];
    let mut mixed = g.add(terms[0], terms[1])?;
    mixed = g.add(mixed, terms[2])?;
    mixed = g.add(mixed, terms[3])?;

    let eps = T::lit(norm_eps);
    let image_query_unit = g.normalize_rows(q_img, eps)?;
    let meta_query_unit = g.normalize_rows(q_meta, eps)?;
    let mut pre = g.add(mixed, image_query_unit)?;
    pre = g.add(pre, meta_query_unit)?;
    let output_tokens = g.linear(pre, p.output.0, Some(p.output.1))?;
    let output = g.from_tokens(output_tokens, h, w)?;
    Ok(CmfiNodes {
        image_scores,
        meta_scores,
        image_global,
        meta_global,
        mixed,
        meta_meta_term,
        image_query_unit,
        meta_query_unit,
        output_tokens,
        output,
    })
}

/// Repeat each metadata row over `h · w` token positions: `(B, C)` → `(B, N, C)`.
pub fn broadcast_metadata<T: Scalar>(meta: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    if h == 0 || w == 0 {
        return Err(Error::Shape(format!("cannot broadcast to {h}x{w}")));
    }
    let mut g = Graph::new();
    let m = g.constant(meta.clone());
    let out = g.broadcast_tokens(m, h * w)?;
    Ok(g.value(out).clone())
}

/// Fuse image features `(B, C, H, W)` with metadata features `(B, C)`.
pub fn cmfi_forward<T: Scalar>(
    image: &FeatureMap<T>,
    meta: &Tensor<T>,
    params: &CmfiParams<T>,
) -> Result<(FeatureMap<T>, CmfiIntermediate<T>)> {
    cmfi_forward_pooled(image, meta, params, Pooling::Sum)
}

pub fn cmfi_forward_pooled<T: Scalar>(
    image: &FeatureMap<T>,
    meta: &Tensor<T>,
    params: &CmfiParams<T>,
    pooling: Pooling,
) -> Result<(FeatureMap<T>, CmfiIntermediate<T>)> {
    params.validate()?;
    let (_, c, _, _) = image.dims();
    if c != params.channels() {
        return Err(Error::Shape(format!(
            "image has {c} channels, fusion block expects {}",
            params.channels()
        )));
    }
    if !meta.all_finite() {
        return Err(Error::Numeric("metadata features contain non-finite values".into()));
    }
    let mut g = Graph::new();
    let img = g.constant(image.data().clone());
    let m = g.constant(meta.clone());
    let leaves: Vec<Var> = params.tensors().into_iter().map(|t| g.constant(t.clone())).collect();
    let vars = CmfiVars::from_slice(&leaves)?;
    let nodes = build_cmfi(&mut g, img, m, &vars, params.norm_eps, pooling)?;
    let inter = CmfiIntermediate {
        image_scores: g.value(nodes.image_scores).clone(),
        meta_scores: g.value(nodes.meta_scores).clone(),
        image_global: g.value(nodes.image_global).clone(),
        meta_global: g.value(nodes.meta_global).clone(),
        mixed: g.value(nodes.mixed).clone(),
        meta_meta_term: g.value(nodes.meta_meta_term).clone(),
        image_query_unit: g.value(nodes.image_query_unit).clone(),
        meta_query_unit: g.value(nodes.meta_query_unit).clone(),
        output_tokens: g.value(nodes.output_tokens).clone(),
    };
    let out = FeatureMap::new(g.value(nodes.output).clone(), image.spacing_mm())?;
    Ok((out, inter))
}

/// A fusion block whose tensors live in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Cmfi {
    ids: Vec<ParamId>,
    pub channels: usize,
    pub norm_eps: f64,
    pub pooling: Pooling,
}

impl Cmfi {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        channels: usize,
        pooling: Pooling,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let init = CmfiParams::<T>::random(channels, rng, false);
        const NAMES: [&str; CMFI_TENSOR_COUNT] = [
            "query_image.weight",
            "query_image.bias",
            "key_image.weight",
            "key_image.bias",
            "query_meta.weight",
            "query_meta.bias",
            "key_meta.weight",
            "key_meta.bias",
            "score_image",
            "score_meta",
            "mix0.weight",
            "mix0.bias",
            "mix1.weight",
            "mix1.bias",
            "mix2.weight",
            "mix2.bias",
            "mix3.weight",
            "mix3.bias",
            "output.weight",
            "output.bias",
        ];
        let ids = init
            .tensors()
            .into_iter()
            .zip(NAMES)
            .map(|(t, n)| store.add(format!("{name}.{n}"), t.clone()))
            .collect();
        Self {
            ids,
            channels,
            norm_eps: DEFAULT_NORM_EPS,
            pooling,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, image: Var, meta: Var) -> Result<Var> {
        let leaves: Vec<Var> = self.ids.iter().map(|id| ctx.param(*id)).collect();
        let vars = CmfiVars::from_slice(&leaves)?;
        Ok(build_cmfi(&mut ctx.graph, image, meta, &vars, self.norm_eps, self.pooling)?.output)
    }

    /// Snapshot of this block's tensors.
    pub fn params<T: Scalar>(&self, store: &ParamStore<T>) -> Result<CmfiParams<T>> {
        CmfiParams::from_tensors(self.ids.iter().map(|id| store.get(*id).clone()).collect(), self.norm_eps)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn fm(shape: Vec<usize>, data: Vec<f64>) -> FeatureMap<f64> {
        FeatureMap::unitless(Tensor::new(shape, data).unwrap()).unwrap()
    }

    #[test]
    fn broadcast_repeats_rows() {
        let m = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let out = broadcast_metadata(&m, 2, 2).unwrap();
        assert_eq!(out.shape(), &[1, 4, 2]);
        assert_eq!(out.data(), &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        let one = broadcast_metadata(&m, 1, 1).unwrap();
        assert_eq!(one.data(), m.data());
        assert!(broadcast_metadata(&m, 0, 3).is_err());
    }

    #[test]
    fn zeroed_attention_path_returns_unit_image_query() {
        let mut p = CmfiParams::<f64>::zeros(2);
        p.query_image = Affine::identity(2);
        p.key_image = Affine::identity(2);
        p.query_meta = Affine::identity(2);
        p.key_meta = Affine::identity(2);
        p.output = Affine::identity(2);
        let image = fm(vec![1, 2, 1, 1], vec![3.0, 4.0]);
        let meta = Tensor::zeros(vec![1, 2]);
        let (out, _) = cmfi_forward(&image, &meta, &p).unwrap();
        let d = out.data().data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15, "{d:?}");
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = CmfiParams::<f64>::random(4, &mut rng, true);
        let image = fm(vec![1, 4, 2, 2], vec![0.5; 16]);
        assert!(matches!(
            cmfi_forward(&image, &Tensor::zeros(vec![1, 3]), &p),
            Err(Error::Shape(_))
        ));
        let image3 = fm(vec![1, 3, 2, 2], vec![0.5; 12]);
        assert!(matches!(
            cmfi_forward(&image3, &Tensor::zeros(vec![1, 3]), &p),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            cmfi_forward(&image, &Tensor::full(vec![1, 4], f64::NAN), &p),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn tensors_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = CmfiParams::<f64>::random(3, &mut rng, true);
        let back = CmfiParams::from_tensors(p.tensors().into_iter().cloned().collect(), p.norm_eps).unwrap();
        assert_eq!(p, back);
        let mut bad: Vec<Tensor<f64>> = p.tensors().into_iter().cloned().collect();
        bad[9] = Tensor::zeros(vec![2]);
        assert!(CmfiParams::from_tensors(bad, 1e-12).is_err());
    }

    #[test]
    fn in_network_block_matches_standalone_forward() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let block = Cmfi::new(&mut store, "f", 4, Pooling::Sum, &mut rng);
        let bn = crate::nn::BnBuffers::new();
        let image = Tensor::from_fn(vec![2, 4, 3, 2], |_| rng.random_range(-1.0..1.0));
        let meta = Tensor::from_fn(vec![2, 4], |_| rng.random_range(-1.0..1.0));
        let mut ctx = Ctx::new(&store, &bn, crate::nn::Mode::Eval, false, 0);
        let (i, m) = (ctx.input(image.clone()), ctx.input(meta.clone()));
        let y = block.forward(&mut ctx, i, m).unwrap();
        let params = block.params(&store).unwrap();
        let (expect, _) = cmfi_forward(&FeatureMap::unitless(image).unwrap(), &meta, &params).unwrap();
        assert_eq!(ctx.value(y), expect.data());
    }

    /// Mean pooling is sum pooling with both score vectors divided by `N`.
    #[test]
    fn mean_pooling_rescales_scores() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = CmfiParams::<f64>::random(3, &mut rng, true);
        let image = Tensor::from_fn(vec![2, 3, 4, 5], |_| rng.random_range(-1.0..1.0));
        let meta = Tensor::from_fn(vec![2, 3], |_| rng.random_range(-1.0..1.0));
        let image = FeatureMap::unitless(image).unwrap();
        let (mean, _) = cmfi_forward_pooled(&image, &meta, &p, Pooling::Mean).unwrap();
        let mut scaled = p.clone();
        scaled.score_image = scaled.score_image.map(|v| v / 20.0);
        scaled.score_meta = scaled.score_meta.map(|v| v / 20.0);
        let (sum, _) = cmfi_forward(&image, &meta, &scaled).unwrap();
        assert!(mean.data().max_abs_diff(sum.data()) < 1e-12);
    }
}
