//! Parameter storage and the handful of layers the networks are built from.

use compseg_tensor::{BnMode, BnUpdate, Graph, Scalar, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Named trainable tensors, addressed by [`ParamId`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.entries.push(ParamEntry {
            name: name.into(),
            value,
        });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.entries[id.0].value
    }

    pub fn by_index_mut(&mut self, index: usize) -> &mut Tensor<T> {
        &mut self.entries[index].value
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnEntry<T> {
    pub name: String,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Running batch-norm statistics.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnBuffers<T> {
    entries: Vec<BnEntry<T>>,
}

impl<T: Scalar> BnBuffers<T> {
    pub fn new() -> Self {
        Self { entries: Vec::new() }
    }

    fn add(&mut self, name: String, channels: usize) -> usize {
        self.entries.push(BnEntry {
            name,
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        });
        self.entries.len() - 1
    }

    pub fn entries(&self) -> &[BnEntry<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [BnEntry<T>] {
        &mut self.entries
    }

    /// Exponential moving average update: `running ← (1−m)·running + m·batch`.
    pub fn apply(&mut self, updates: &[BnUpdate<T>], momentum: T) {
        for u in updates {
            let e = &mut self.entries[u.key];
            for (r, b) in e.mean.iter_mut().zip(&u.mean) {
                *r = (T::one() - momentum) * *r + momentum * *b;
            }
            for (r, b) in e.var.iter_mut().zip(&u.var) {
                *r = (T::one() - momentum) * *r + momentum * *b;
            }
        }
    }
}

/// State of one forward pass: the tape, parameter lookup, mode and dropout RNG.
pub struct Ctx<'a, T: Scalar> {
    pub graph: Graph<T>,
    params: &'a ParamStore<T>,
    bn: &'a BnBuffers<T>,
    vars: Vec<Option<Var>>,
    mode: Mode,
    trainable: bool,
    rng: ChaCha8Rng,
}

impl<'a, T: Scalar> Ctx<'a, T> {
    /// `trainable` makes parameters gradient-receiving leaves.
    pub fn new(params: &'a ParamStore<T>, bn: &'a BnBuffers<T>, mode: Mode, trainable: bool, seed: u64) -> Self {
        Self {
            graph: Graph::new(),
            params,
            bn,
            vars: vec![None; params.len()],
            mode,
            trainable,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let value = self.params.get(id).clone();
        let v = if self.trainable {
            self.graph.param(id.0, value)
        } else {
            self.graph.constant(value)
        };
        self.vars[id.0] = Some(v);
        v
    }

    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.graph.constant(t)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        self.graph.value(v)
    }

    /// Inverted dropout; identity outside train mode or when `rate` is 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if self.mode != Mode::Train || rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = T::lit(1.0 / keep);
        let n = self.graph.value(x).numel();
        let mask = (0..n)
            .map(|_| if self.rng.random::<f64>() < keep { scale } else { T::zero() })
            .collect();
        Ok(self.graph.mul_const(x, mask)?)
    }
}

fn uniform<T: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, bound: f64) -> Tensor<T> {
    Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
}

/// `y = x Wᵀ + b` over the last axis.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, vec![out_dim, in_dim], bound));
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_dim])));
        Self { w, b, in_dim, out_dim }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.w);
        let b = self.b.map(|b| ctx.param(b));
        Ok(ctx.graph.linear(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        bias: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / ((in_ch * kernel * kernel) as f64).sqrt();
        let w = store.add(
            format!("{name}.weight"),
            uniform(rng, vec![out_ch, in_ch, kernel, kernel], bound),
        );
        let b = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch])));
        Self {
            w,
            b,
            stride,
            pad: kernel / 2,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.w);
        let b = self.b.map(|b| ctx.param(b));
        Ok(ctx.graph.conv2d(x, w, b, self.stride, self.pad)?)
    }
}

/// 2×2 stride-2 transposed convolution.
#[derive(Clone, Debug)]
pub struct ConvT2x2 {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl ConvT2x2 {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let bound = 1.0 / (in_ch as f64).sqrt();
        let w = store.add(format!("{name}.weight"), uniform(rng, vec![in_ch, out_ch, 2, 2], bound));
        let b = Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![out_ch])));
        Self { w, b }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let w = ctx.param(self.w);
        let b = self.b.map(|b| ctx.param(b));
        Ok(ctx.graph.conv_transpose2x2(x, w, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: usize,
}

impl BatchNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, bn: &mut BnBuffers<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![channels], T::one()));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        let stats = bn.add(name.to_string(), channels);
        Self { gamma, beta, stats }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let gamma = ctx.param(self.gamma);
        let beta = ctx.param(self.beta);
        let bn = ctx.bn;
        let mode = match ctx.mode {
            Mode::Train => BnMode::Train { key: self.stats },
            Mode::Eval => {
                let e = bn
                    .entries
                    .get(self.stats)
                    .ok_or_else(|| Error::Shape("missing batch-norm buffer".into()))?;
                BnMode::Frozen {
                    mean: &e.mean,
                    var: &e.var,
                }
            }
        };
        Ok(ctx.graph.batch_norm(x, gamma, beta, mode, T::lit(BN_EPS))?)
    }
}

/// 3×3 convolution → batch norm → LeakyReLU.
#[derive(Clone, Debug)]
pub struct ConvBnAct {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub slope: f64,
}

impl ConvBnAct {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        bn: &mut BnBuffers<T>,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            conv: Conv2d::new(store, &format!("{name}.conv"), in_ch, out_ch, 3, stride, false, rng),
            bn: BatchNorm::new(store, bn, &format!("{name}.bn"), out_ch),
            slope,
        }
    }

    pub fn forward<T: Scalar>(&self, ctx: &mut Ctx<'_, T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        let y = self.bn.forward(ctx, y)?;
        Ok(ctx.graph.leaky_relu(y, T::lit(self.slope)))
    }
}

/// Tape gradient and central-difference estimate for one parameter tensor.
#[derive(Clone, Debug)]
pub struct ParamGradCheck {
    pub name: String,
    pub analytic: Tensor<f64>,
    pub numeric: Tensor<f64>,
}

impl ParamGradCheck {
    /// `‖a − n‖₂ / max(‖a‖₂, ‖n‖₂)`, zero when both vanish.
    pub fn relative_error(&self) -> f64 {
        let diff = self
            .analytic
            .data()
            .iter()
            .zip(self.numeric.data())
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        let scale = self.analytic.norm().max(self.numeric.norm());
        if scale < 1e-12 {
            0.0
        } else {
            diff / scale
        }
    }
}

/// Compare tape gradients of the scalar built by `loss` against central
/// differences for every parameter in `params`. Each evaluation reuses `seed`,
/// so dropout masks are identical across perturbations.
pub fn check_param_gradients<F>(
    params: &ParamStore<f64>,
    bn: &BnBuffers<f64>,
    mode: Mode,
    seed: u64,
    step: f64,
    loss: F,
) -> Result<Vec<ParamGradCheck>>
where
    F: Fn(&mut Ctx<'_, f64>) -> Result<Var>,
{
    let mut ctx = Ctx::new(params, bn, mode, true, seed);
    let root = loss(&mut ctx)?;
    let grads = ctx.graph.backward(root)?;
    let mut analytic: Vec<Tensor<f64>> = params.entries().iter().map(|e| Tensor::zeros(e.value.shape().to_vec())).collect();
    for (key, g) in grads.params() {
        analytic[key] = g.clone();
    }
    let eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut ctx = Ctx::new(store, bn, mode, false, seed);
        let root = loss(&mut ctx)?;
        Ok(ctx.value(root).item())
    };
    let mut work = params.clone();
    let mut reports = Vec::with_capacity(params.len());
    for (i, a) in analytic.into_iter().enumerate() {
        let mut numeric = Tensor::zeros(a.shape().to_vec());
        for j in 0..a.numel() {
            let orig = work.entries[i].value.data()[j];
            work.entries[i].value.data_mut()[j] = orig + step;
            let plus = eval(&work)?;
            work.entries[i].value.data_mut()[j] = orig - step;
            let minus = eval(&work)?;
            work.entries[i].value.data_mut()[j] = orig;
            numeric.data_mut()[j] = (plus - minus) / (2.0 * step);
        }
        reports.push(ParamGradCheck {
            name: params.entries[i].name.clone(),
            analytic: a,
            numeric,
        });
    }
    Ok(reports)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dropout_is_identity_in_eval_and_scaled_in_train() {
        let store = ParamStore::<f64>::new();
        let bn = BnBuffers::new();
        let mut ctx = Ctx::new(&store, &bn, Mode::Eval, false, 0);
        let x = ctx.input(Tensor::full(vec![100], 1.0));
        assert_eq!(ctx.dropout(x, 0.5).unwrap(), x);

        let mut ctx = Ctx::new(&store, &bn, Mode::Train, false, 0);
        let x = ctx.input(Tensor::full(vec![1000], 1.0));
        let y = ctx.dropout(x, 0.1).unwrap();
        let vals = ctx.value(y).data();
        assert!(vals.iter().all(|v| *v == 0.0 || (*v - 1.0 / 0.9).abs() < 1e-12));
        let dropped = vals.iter().filter(|v| **v == 0.0).count();
        assert!((50..150).contains(&dropped), "{dropped}");
    }

    #[test]
    fn running_stats_follow_momentum() {
        let mut bn = BnBuffers::<f64>::new();
        let k = bn.add("x".into(), 1);
        bn.apply(
            &[BnUpdate {
                key: k,
                mean: vec![2.0],
                var: vec![3.0],
            }],
            0.1,
        );
        assert!((bn.entries()[k].mean[0] - 0.2).abs() < 1e-12);
        assert!((bn.entries()[k].var[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn params_are_shared_within_one_pass() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let lin = Linear::new(&mut store, "l", 3, 2, true, &mut rng);
        let bn = BnBuffers::new();
        let mut ctx = Ctx::new(&store, &bn, Mode::Eval, true, 0);
        let a = ctx.param(lin.w);
        let b = ctx.param(lin.w);
        assert_eq!(a, b);
        assert_eq!(store.num_scalars(), 8);
        assert_eq!(store.get(lin.b.unwrap()).data(), &[0.0, 0.0]);
    }
}
