//! Define-by-run tape with reverse-mode differentiation.
//!
//! Every builder method evaluates its op eagerly and appends a node; the node
//! keeps whatever the backward pass needs. A graph is built per forward pass
//! and dropped afterwards.

use std::sync::atomic::{AtomicBool, Ordering};

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, ConvGeometry};
use crate::scalar::{matmul, Scalar};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// How a batch-norm node obtains its statistics.
#[derive(Clone, Copy, Debug)]
pub enum BnMode<'a, T> {
    /// Normalize with batch statistics and record them under `key`.
    Train { key: usize },
    /// Normalize with fixed (running) statistics.
    Frozen { mean: &'a [T], var: &'a [T] },
}

/// Batch statistics observed by a train-mode batch-norm node.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate<T> {
    pub key: usize,
    pub mean: Vec<T>,
    /// Unbiased variance.
    pub var: Vec<T>,
}

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    ConvT2x2 {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        invstd: Vec<T>,
        through_stats: bool,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    MulConst {
        x: Var,
        factor: Vec<T>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        a: Var,
        b: Var,
    },
    ToTokens {
        x: Var,
    },
    FromTokens {
        x: Var,
    },
    BroadcastTokens {
        x: Var,
    },
    TokenDot {
        q: Var,
        w: Var,
        scale: T,
    },
    TokenWeightedSum {
        a: Var,
        q: Var,
    },
    MulGlobal {
        g: Var,
        k: Var,
    },
    NormalizeRows {
        x: Var,
        denom: Vec<T>,
        guarded: Vec<bool>,
    },
    Sigmoid {
        x: Var,
    },
    SoftmaxChannels {
        x: Var,
    },
    Dice {
        p: Var,
        target: Tensor<T>,
        smooth: T,
        first_class: usize,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    L1 {
        pred: Var,
        targets: Vec<T>,
    },
    WeightedSum {
        terms: Vec<(Var, T)>,
    },
    DotConst {
        x: Var,
        r: Tensor<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: Vec<(usize, Var)>,
    bn_updates: Vec<BnUpdate<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

static WARNED_SINGLE_SAMPLE_BN: AtomicBool = AtomicBool::new(false);

fn dims3(shape: &[usize]) -> (usize, usize, usize) {
    let b = shape[0];
    let c = shape.get(1).copied().unwrap_or(1);
    let s = shape.iter().skip(2).product();
    (b, c, s)
}

fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Per `(sample, class)` soft Dice sums: `(Σ p·t, Σ p, Σ t)`.
pub(crate) fn dice_sums<T: Scalar>(p: &[T], t: &[T], b: usize, k: usize, s: usize) -> Vec<(T, T, T)> {
    let mut out = Vec::with_capacity(b * k);
    for bi in 0..b {
        for ki in 0..k {
            let off = (bi * k + ki) * s;
            let (mut pt, mut ps, mut ts) = (T::zero(), T::zero(), T::zero());
            for i in off..off + s {
                pt += p[i] * t[i];
                ps += p[i];
                ts += t[i];
            }
            out.push((pt, ps, ts));
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            bn_updates: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf that receives a gradient; `key` identifies it in [`Gradients::params`].
    pub fn param(&mut self, key: usize, t: Tensor<T>) -> Var {
        let v = self.push(t, Op::Leaf, true);
        self.params.push((key, v));
        v
    }

    /// Batch statistics recorded by train-mode batch-norm nodes, in creation order.
    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    /// 2-D convolution over NCHW input with a square `(Co, Ci, k, k)` kernel.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (bs, ci, h, wd) = self.value(x).dims4()?;
        let (co, wci, kh, kw) = self.value(w).dims4()?;
        if wci != ci || kh != kw {
            return shape_err("conv2d", format!("input {:?} kernel {:?}", self.shape(x), self.shape(w)));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return shape_err("conv2d", "kernel larger than padded input");
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return shape_err("conv2d", format!("bias {:?}", self.shape(b)));
            }
        }
        let geom = ConvGeometry {
            in_channels: ci,
            out_channels: co,
            kernel: kh,
            stride,
            pad,
            in_h: h,
            in_w: wd,
        };
        let y = kernels::conv2d_forward(
            &geom,
            bs,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![bs, co, geom.out_h(), geom.out_w()], y)?;
        let grad = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Conv2d { x, w, b, geom }, grad))
    }

    /// 2×2 stride-2 transposed convolution, kernel `(Ci, Co, 2, 2)`.
    pub fn conv_transpose2x2(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (bs, ci, h, wd) = self.value(x).dims4()?;
        let (wci, co, kh, kw) = self.value(w).dims4()?;
        if wci != ci || kh != 2 || kw != 2 {
            return shape_err(
                "conv_transpose2x2",
                format!("input {:?} kernel {:?}", self.shape(x), self.shape(w)),
            );
        }
        if let Some(b) = b {
            if self.shape(b) != [co] {
                return shape_err("conv_transpose2x2", format!("bias {:?}", self.shape(b)));
            }
        }
        let y = kernels::conv_t2x2_forward(
            bs,
            ci,
            co,
            h,
            wd,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let value = Tensor::new(vec![bs, co, 2 * h, 2 * wd], y)?;
        let grad = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::ConvT2x2 { x, w, b }, grad))
    }

    /// Batch normalization over every axis except the channel axis (axis 1).
    ///
    /// A train-mode call with a single element per channel cannot estimate
    /// statistics; it normalizes with mean 0 / variance 1 and logs a warning.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_, T>, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return shape_err("batch_norm", format!("input {shape:?}"));
        }
        let (b, c, s) = dims3(&shape);
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return shape_err("batch_norm", "affine parameters must have one entry per channel");
        }
        let m = b * s;
        let xd = self.value(x).data();
        let mut update = None;
        let (mean, invstd, through_stats) = match mode {
            BnMode::Frozen { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return shape_err("batch_norm", "running statistics length");
                }
                let inv = var.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
                (mean.to_vec(), inv, false)
            }
            BnMode::Train { .. } if m == 1 => {
                if !WARNED_SINGLE_SAMPLE_BN.swap(true, Ordering::Relaxed) {
                    log::warn!("batch norm in train mode with one element per channel; using identity normalization");
                }
                (vec![T::zero(); c], vec![T::one(); c], false)
            }
            BnMode::Train { key } => {
                let mf = T::lit(m as f64);
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for bi in 0..b {
                    for (ci, mu) in mean.iter_mut().enumerate() {
                        let off = (bi * c + ci) * s;
                        *mu += xd[off..off + s].iter().copied().sum::<T>();
                    }
                }
                mean.iter_mut().for_each(|v| *v = *v / mf);
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * s;
                        let mu = mean[ci];
                        var[ci] += xd[off..off + s].iter().map(|v| (*v - mu) * (*v - mu)).sum::<T>();
                    }
                }
                let biased: Vec<T> = var.iter().map(|v| *v / mf).collect();
                let unbiased = var.iter().map(|v| *v / T::lit((m - 1) as f64)).collect();
                update = Some(BnUpdate {
                    key,
                    mean: mean.clone(),
                    var: unbiased,
                });
                let inv = biased.iter().map(|v| T::one() / (*v + eps).sqrt()).collect();
                (mean, inv, true)
            }
        };
        let g = self.value(gamma).data();
        let be = self.value(beta).data();
        let mut y = vec![T::zero(); xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let off = (bi * c + ci) * s;
                let (mu, is, gc, bc) = (mean[ci], invstd[ci], g[ci], be[ci]);
                for i in off..off + s {
                    y[i] = gc * (xd[i] - mu) * is + bc;
                }
            }
        }
        let value = Tensor::new(shape, y)?;
        if let Some(u) = update {
            self.bn_updates.push(u);
        }
        let grad = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                through_stats,
            },
            grad,
        ))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        let value = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let grad = self.needs(x);
        self.push(value, Op::LeakyRelu { x, slope }, grad)
    }

    /// Element-wise product with a constant tensor of the same size (dropout masks).
    pub fn mul_const(&mut self, x: Var, factor: Vec<T>) -> Result<Var> {
        if factor.len() != self.value(x).numel() {
            return shape_err("mul_const", "factor length");
        }
        let src = self.value(x);
        let data = src.data().iter().zip(&factor).map(|(a, f)| *a * *f).collect();
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let grad = self.needs(x);
        Ok(self.push(value, Op::MulConst { x, factor }, grad))
    }

    /// `y = x Wᵀ + b` applied to the last axis; `w` is `(Out, In)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let inp = *xs.last().unwrap_or(&0);
        if ws.len() != 2 || ws[1] != inp || inp == 0 {
            return shape_err("linear", format!("input {xs:?} weight {ws:?}"));
        }
        let out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return shape_err("linear", format!("bias {:?}", self.shape(b)));
            }
        }
        let rows = self.value(x).numel() / inp;
        let mut y = vec![T::zero(); rows * out];
        matmul(rows, inp, out, self.value(x).data(), false, self.value(w).data(), true, &mut y, false);
        if let Some(b) = b {
            let bd = self.value(b).data();
            for row in y.chunks_mut(out) {
                row.iter_mut().zip(bd).for_each(|(v, bb)| *v += *bb);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let value = Tensor::new(shape, y)?;
        let grad = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(value, Op::Linear { x, w, b }, grad))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return shape_err("add", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let grad = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Add { a, b }, grad))
    }

    /// Concatenate two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if ba != bb || ha != hb || wa != wb {
            return shape_err("concat_channels", format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        let hw = ha * wa;
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut y = Vec::with_capacity(ba * (ca + cb) * hw);
        for i in 0..ba {
            y.extend_from_slice(&ad[i * ca * hw..(i + 1) * ca * hw]);
            y.extend_from_slice(&bd[i * cb * hw..(i + 1) * cb * hw]);
        }
        let value = Tensor::new(vec![ba, ca + cb, ha, wa], y)?;
        let grad = self.needs(a) || self.needs(b);
        Ok(self.push(value, Op::Concat { a, b }, grad))
    }

    /// `(B, C, H, W)` → `(B, H·W, C)`.
    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let n = h * w;
        let src = self.value(x).data();
        let mut y = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ci in 0..c {
                for ni in 0..n {
                    y[(bi * n + ni) * c + ci] = src[(bi * c + ci) * n + ni];
                }
            }
        }
        let value = Tensor::new(vec![b, n, c], y)?;
        let grad = self.needs(x);
        Ok(self.push(value, Op::ToTokens { x }, grad))
    }

    /// `(B, H·W, C)` → `(B, C, H, W)`.
    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 3 || shape[1] != h * w {
            return shape_err("from_tokens", format!("{shape:?} for {h}x{w}"));
        }
        let (b, n, c) = (shape[0], shape[1], shape[2]);
        let src = self.value(x).data();
        let mut y = vec![T::zero(); src.len()];
        for bi in 0..b {
            for ni in 0..n {
                for ci in 0..c {
                    y[(bi * c + ci) * n + ni] = src[(bi * n + ni) * c + ci];
                }
            }
        }
        let value = Tensor::new(vec![b, c, h, w], y)?;
        let grad = self.needs(x);
        Ok(self.push(value, Op::FromTokens { x }, grad))
    }

    /// `(B, C)` → `(B, N, C)` by repeating each row `n` times.
    pub fn broadcast_tokens(&mut self, x: Var, n: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || n == 0 {
            return shape_err("broadcast_tokens", format!("{shape:?} to {n} tokens"));
        }
        let (b, c) = (shape[0], shape[1]);
        let src = self.value(x).data();
        let mut y = Vec::with_capacity(b * n * c);
        for row in src.chunks(c) {
            for _ in 0..n {
                y.extend_from_slice(row);
            }
        }
        let value = Tensor::new(vec![b, n, c], y)?;
        let grad = self.needs(x);
        Ok(self.push(value, Op::BroadcastTokens { x }, grad))
    }

    /// `y[b, n] = scale · Σ_c q[b, n, c] · w[c]`.
    pub fn token_dot(&mut self, q: Var, w: Var, scale: T) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        let c = *qs.last().unwrap_or(&0);
        if qs.len() != 3 || self.value(w).numel() != c {
            return shape_err("token_dot", format!("{qs:?} with {:?}", self.shape(w)));
        }
        let wd = self.value(w).data();
        let y = self
            .value(q)
            .data()
            .chunks(c)
            .map(|row| row.iter().zip(wd).map(|(a, b)| *a * *b).sum::<T>() * scale)
            .collect();
        let value = Tensor::new(vec![qs[0], qs[1]], y)?;
        let grad = self.needs(q) || self.needs(w);
        Ok(self.push(value, Op::TokenDot { q, w, scale }, grad))
    }

    /// `y[b, c] = Σ_n a[b, n] · q[b, n, c]`.
    pub fn token_weighted_sum(&mut self, a: Var, q: Var) -> Result<Var> {
        let qs = self.shape(q).to_vec();
        if qs.len() != 3 || self.shape(a) != &qs[..2] {
            return shape_err("token_weighted_sum", format!("{:?} with {qs:?}", self.shape(a)));
        }
        let (b, n, c) = (qs[0], qs[1], qs[2]);
        let (ad, qd) = (self.value(a).data(), self.value(q).data());
        let mut y = vec![T::zero(); b * c];
        for bi in 0..b {
            let out = &mut y[bi * c..(bi + 1) * c];
            for ni in 0..n {
                let wgt = ad[bi * n + ni];
                let row = &qd[(bi * n + ni) * c..(bi * n + ni + 1) * c];
                out.iter_mut().zip(row).for_each(|(o, v)| *o += wgt * *v);
            }
        }
        let value = Tensor::new(vec![b, c], y)?;
        let grad = self.needs(a) || self.needs(q);
        Ok(self.push(value, Op::TokenWeightedSum { a, q }, grad))
    }

    /// `y[b, n, c] = g[b, c] · k[b, n, c]`.
    pub fn mul_global(&mut self, g: Var, k: Var) -> Result<Var> {
        let ks = self.shape(k).to_vec();
        if ks.len() != 3 || self.shape(g) != [ks[0], ks[2]] {
            return shape_err("mul_global", format!("{:?} with {ks:?}", self.shape(g)));
        }
        let (b, n, c) = (ks[0], ks[1], ks[2]);
        let (gd, kd) = (self.value(g).data(), self.value(k).data());
        let mut y = vec![T::zero(); kd.len()];
        for bi in 0..b {
            let gr = &gd[bi * c..(bi + 1) * c];
            for ni in 0..n {
                let off = (bi * n + ni) * c;
                for ci in 0..c {
                    y[off + ci] = gr[ci] * kd[off + ci];
                }
            }
        }
        let value = Tensor::new(ks, y)?;
        let grad = self.needs(g) || self.needs(k);
        Ok(self.push(value, Op::MulGlobal { g, k }, grad))
    }

    /// Divide each row of the last axis by `max(‖row‖₂, eps)`.
    pub fn normalize_rows(&mut self, x: Var, eps: T) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if c == 0 {
            return shape_err("normalize_rows", format!("{shape:?}"));
        }
        let src = self.value(x).data();
        let rows = src.len() / c;
        let mut denom = Vec::with_capacity(rows);
        let mut guarded = Vec::with_capacity(rows);
        let mut y = Vec::with_capacity(src.len());
        for row in src.chunks(c) {
            let norm = row.iter().map(|v| *v * *v).sum::<T>().sqrt();
            let d = if norm > eps { norm } else { eps };
            guarded.push(norm <= eps);
            denom.push(d);
            y.extend(row.iter().map(|v| *v / d));
        }
        let value = Tensor::new(shape, y)?;
        let grad = self.needs(x);
        Ok(self.push(value, Op::NormalizeRows { x, denom, guarded }, grad))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let grad = self.needs(x);
        self.push(value, Op::Sigmoid { x }, grad)
    }

    /// Softmax over axis 1 of a `(B, K, ...)` tensor.
    pub fn softmax_channels(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return shape_err("softmax_channels", format!("{shape:?}"));
        }
        let value = Tensor::new(shape.clone(), softmax_axis1(self.value(x).data(), &shape))?;
        let grad = self.needs(x);
        Ok(self.push(value, Op::SoftmaxChannels { x }, grad))
    }

    /// Soft Dice loss `1 − mean_{b, k ≥ first_class} (2Σpt + s)/(Σp + Σt + s)`.
    pub fn dice_loss(&mut self, p: Var, target: Tensor<T>, smooth: T, first_class: usize) -> Result<Var> {
        let shape = self.shape(p).to_vec();
        if shape != target.shape() || shape.len() < 2 {
            return shape_err("dice_loss", format!("{shape:?} vs {:?}", target.shape()));
        }
        let (b, k, s) = dims3(&shape);
        if first_class >= k {
            return Err(TensorError::Invalid {
                op: "dice_loss",
                detail: format!("first class {first_class} with {k} channels"),
            });
        }
        let sums = dice_sums(self.value(p).data(), target.data(), b, k, s);
        let two = T::lit(2.0);
        let mut acc = T::zero();
        let mut count = 0usize;
        for bi in 0..b {
            for ki in first_class..k {
                let (pt, ps, ts) = sums[bi * k + ki];
                acc += (two * pt + smooth) / (ps + ts + smooth);
                count += 1;
            }
        }
        let loss = T::one() - acc / T::lit(count as f64);
        let grad = self.needs(p);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice {
                p,
                target,
                smooth,
                first_class,
            },
            grad,
        ))
    }

    /// Mean cross-entropy of `(B, K)` logits against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() || targets.iter().any(|t| *t >= shape[1]) {
            return shape_err("cross_entropy", format!("{shape:?} with {} targets", targets.len()));
        }
        let k = shape[1];
        let mut total = T::zero();
        for (row, &t) in self.value(logits).data().chunks(k).zip(&targets) {
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|v| (*v - mx).exp()).sum::<T>().ln() + mx;
            total += lse - row[t];
        }
        let loss = total / T::lit(targets.len() as f64);
        let grad = self.needs(logits);
        Ok(self.push(Tensor::scalar(loss), Op::CrossEntropy { logits, targets }, grad))
    }

    /// Mean absolute error of `(B, 1)` predictions.
    pub fn l1_loss(&mut self, pred: Var, targets: Vec<T>) -> Result<Var> {
        if self.value(pred).numel() != targets.len() || targets.is_empty() {
            return shape_err("l1_loss", format!("{:?} with {} targets", self.shape(pred), targets.len()));
        }
        let total: T = self
            .value(pred)
            .data()
            .iter()
            .zip(&targets)
            .map(|(p, t)| (*p - *t).abs())
            .sum();
        let loss = total / T::lit(targets.len() as f64);
        let grad = self.needs(pred);
        Ok(self.push(Tensor::scalar(loss), Op::L1 { pred, targets }, grad))
    }

    /// `Σ coeff_i · x_i` over single-element nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, T)>) -> Result<Var> {
        let mut total = T::zero();
        for (v, c) in &terms {
            if self.value(*v).numel() != 1 {
                return shape_err("weighted_sum", format!("term shape {:?}", self.shape(*v)));
            }
            total += self.value(*v).item() * *c;
        }
        let grad = terms.iter().any(|(v, _)| self.needs(*v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum { terms }, grad))
    }

    /// `Σ x ⊙ r` for a constant `r` of the same shape.
    pub fn dot_const(&mut self, x: Var, r: Tensor<T>) -> Result<Var> {
        if self.shape(x) != r.shape() {
            return shape_err("dot_const", format!("{:?} vs {:?}", self.shape(x), r.shape()));
        }
        let total = self.value(x).data().iter().zip(r.data()).map(|(a, b)| *a * *b).sum();
        let grad = self.needs(x);
        Ok(self.push(Tensor::scalar(total), Op::DotConst { x, r }, grad))
    }

    /// Reverse pass from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(TensorError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(Tensor::full(rv.shape().to_vec(), T::one()));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads)?;
            grads[i] = Some(gy);
        }
        Ok(Gradients {
            grads,
            params: self.params.clone(),
        })
    }

    fn backward_node(&self, node: &Node<T>, gy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let dy = gy.data();
        let mut acc = |v: Var, data: Vec<T>| -> Result<()> {
            if !self.nodes[v.0].grad {
                return Ok(());
            }
            let t = Tensor::new(self.shape(v).to_vec(), data)?;
            match &mut grads[v.0] {
                Some(g) => g.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
            Ok(())
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let bs = self.shape(*x)[0];
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    bs,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    self.needs(*x),
                );
                if self.needs(*x) {
                    acc(*x, dx)?;
                }
                acc(*w, dw)?;
                if let Some(b) = b {
                    acc(*b, db)?;
                }
            }
            Op::ConvT2x2 { x, w, b } => {
                let (bs, ci, h, wd) = self.value(*x).dims4()?;
                let co = self.shape(*w)[1];
                let (dx, dw, db) = kernels::conv_t2x2_backward(
                    bs,
                    ci,
                    co,
                    h,
                    wd,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    self.needs(*x),
                );
                if self.needs(*x) {
                    acc(*x, dx)?;
                }
                acc(*w, dw)?;
                if let Some(b) = b {
                    acc(*b, db)?;
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                invstd,
                through_stats,
            } => {
                let (b, c, s) = dims3(self.shape(*x));
                let xd = self.value(*x).data();
                let g = self.value(*gamma).data();
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                let mut sum_dxhat = vec![T::zero(); c];
                let mut sum_dxhat_xhat = vec![T::zero(); c];
                for bi in 0..b {
                    for ci in 0..c {
                        let off = (bi * c + ci) * s;
                        for i in off..off + s {
                            let xhat = (xd[i] - mean[ci]) * invstd[ci];
                            dgamma[ci] += dy[i] * xhat;
                            dbeta[ci] += dy[i];
                            let dxh = dy[i] * g[ci];
                            sum_dxhat[ci] += dxh;
                            sum_dxhat_xhat[ci] += dxh * xhat;
                        }
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); xd.len()];
                    let m = T::lit((b * s) as f64);
                    for bi in 0..b {
                        for ci in 0..c {
                            let off = (bi * c + ci) * s;
                            for i in off..off + s {
                                let dxh = dy[i] * g[ci];
                                dx[i] = if *through_stats {
                                    let xhat = (xd[i] - mean[ci]) * invstd[ci];
                                    invstd[ci] / m * (m * dxh - sum_dxhat[ci] - xhat * sum_dxhat_xhat[ci])
                                } else {
                                    dxh * invstd[ci]
                                };
                            }
                        }
                    }
                    acc(*x, dx)?;
                }
                acc(*gamma, dgamma)?;
                acc(*beta, dbeta)?;
            }
            Op::LeakyRelu { x, slope } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(dy)
                    .map(|(v, d)| if *v > T::zero() { *d } else { *d * *slope })
                    .collect();
                acc(*x, dx)?;
            }
            Op::MulConst { x, factor } => {
                acc(*x, dy.iter().zip(factor).map(|(d, f)| *d * *f).collect())?;
            }
            Op::Linear { x, w, b } => {
                let inp = self.shape(*w)[1];
                let out = self.shape(*w)[0];
                let xd = self.value(*x).data();
                let rows = xd.len() / inp;
                if self.needs(*x) {
                    let mut dx = vec![T::zero(); xd.len()];
                    matmul(rows, out, inp, dy, false, self.value(*w).data(), false, &mut dx, false);
                    acc(*x, dx)?;
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); out * inp];
                    matmul(out, rows, inp, dy, true, xd, false, &mut dw, false);
                    acc(*w, dw)?;
                }
                if let Some(b) = b {
                    let mut db = vec![T::zero(); out];
                    for row in dy.chunks(out) {
                        db.iter_mut().zip(row).for_each(|(a, v)| *a += *v);
                    }
                    acc(*b, db)?;
                }
            }
            Op::Add { a, b } => {
                acc(*a, dy.to_vec())?;
                acc(*b, dy.to_vec())?;
            }
            Op::Concat { a, b } => {
                let (ba, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.shape(*b)[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(ba * ca * hw);
                let mut db = Vec::with_capacity(ba * cb * hw);
                for i in 0..ba {
                    let base = i * (ca + cb) * hw;
                    da.extend_from_slice(&dy[base..base + ca * hw]);
                    db.extend_from_slice(&dy[base + ca * hw..base + (ca + cb) * hw]);
                }
                acc(*a, da)?;
                acc(*b, db)?;
            }
            Op::ToTokens { x } => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let n = h * w;
                let mut dx = vec![T::zero(); dy.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        for ni in 0..n {
                            dx[(bi * c + ci) * n + ni] = dy[(bi * n + ni) * c + ci];
                        }
                    }
                }
                acc(*x, dx)?;
            }
            Op::FromTokens { x } => {
                let s = self.shape(*x);
                let (b, n, c) = (s[0], s[1], s[2]);
                let mut dx = vec![T::zero(); dy.len()];
                for bi in 0..b {
                    for ni in 0..n {
                        for ci in 0..c {
                            dx[(bi * n + ni) * c + ci] = dy[(bi * c + ci) * n + ni];
                        }
                    }
                }
                acc(*x, dx)?;
            }
            Op::BroadcastTokens { x } => {
                let (b, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let n = node.value.shape()[1];
                let mut dx = vec![T::zero(); b * c];
                for bi in 0..b {
                    for ni in 0..n {
                        let off = (bi * n + ni) * c;
                        for ci in 0..c {
                            dx[bi * c + ci] += dy[off + ci];
                        }
                    }
                }
                acc(*x, dx)?;
            }
            Op::TokenDot { q, w, scale } => {
                let qd = self.value(*q).data();
                let wd = self.value(*w).data();
                let c = wd.len();
                if self.needs(*q) {
                    let mut dq = vec![T::zero(); qd.len()];
                    for (r, d) in dy.iter().enumerate() {
                        let s = *d * *scale;
                        for ci in 0..c {
                            dq[r * c + ci] = s * wd[ci];
                        }
                    }
                    acc(*q, dq)?;
                }
                if self.needs(*w) {
                    let mut dw = vec![T::zero(); c];
                    for (r, d) in dy.iter().enumerate() {
                        let s = *d * *scale;
                        for ci in 0..c {
                            dw[ci] += s * qd[r * c + ci];
                        }
                    }
                    acc(*w, dw)?;
                }
            }
            Op::TokenWeightedSum { a, q } => {
                let qs = self.shape(*q);
                let (b, n, c) = (qs[0], qs[1], qs[2]);
                let (ad, qd) = (self.value(*a).data(), self.value(*q).data());
                if self.needs(*a) {
                    let mut da = vec![T::zero(); b * n];
                    for bi in 0..b {
                        let g = &dy[bi * c..(bi + 1) * c];
                        for ni in 0..n {
                            let row = &qd[(bi * n + ni) * c..(bi * n + ni + 1) * c];
                            da[bi * n + ni] = row.iter().zip(g).map(|(x, y)| *x * *y).sum();
                        }
                    }
                    acc(*a, da)?;
                }
                if self.needs(*q) {
                    let mut dq = vec![T::zero(); qd.len()];
                    for bi in 0..b {
                        let g = &dy[bi * c..(bi + 1) * c];
                        for ni in 0..n {
                            let wgt = ad[bi * n + ni];
                            let off = (bi * n + ni) * c;
                            for ci in 0..c {
                                dq[off + ci] = wgt * g[ci];
                            }
                        }
                    }
                    acc(*q, dq)?;
                }
            }
            Op::MulGlobal { g, k } => {
                let ks = self.shape(*k);
                let (b, n, c) = (ks[0], ks[1], ks[2]);
                let (gd, kd) = (self.value(*g).data(), self.value(*k).data());
                if self.needs(*g) {
                    let mut dg = vec![T::zero(); b * c];
                    for bi in 0..b {
                        for ni in 0..n {
                            let off = (bi * n + ni) * c;
                            for ci in 0..c {
                                dg[bi * c + ci] += dy[off + ci] * kd[off + ci];
                            }
                        }
                    }
                    acc(*g, dg)?;
                }
                if self.needs(*k) {
                    let mut dk = vec![T::zero(); kd.len()];
                    for bi in 0..b {
                        for ni in 0..n {
                            let off = (bi * n + ni) * c;
                            for ci in 0..c {
                                dk[off + ci] = dy[off + ci] * gd[bi * c + ci];
                            }
                        }
                    }
                    acc(*k, dk)?;
                }
            }
            Op::NormalizeRows { x, denom, guarded } => {
                let c = *self.shape(*x).last().unwrap();
                let y = node.value.data();
                let mut dx = vec![T::zero(); dy.len()];
                for (r, (d, g)) in denom.iter().zip(guarded).enumerate() {
                    let yr = &y[r * c..(r + 1) * c];
                    let dr = &dy[r * c..(r + 1) * c];
                    let proj = if *g {
                        T::zero()
                    } else {
                        yr.iter().zip(dr).map(|(a, b)| *a * *b).sum()
                    };
                    for ci in 0..c {
                        dx[r * c + ci] = (dr[ci] - yr[ci] * proj) / *d;
                    }
                }
                acc(*x, dx)?;
            }
            Op::Sigmoid { x } => {
                let y = node.value.data();
                acc(*x, y.iter().zip(dy).map(|(s, d)| *d * *s * (T::one() - *s)).collect())?;
            }
            Op::SoftmaxChannels { x } => {
                let (b, k, s) = dims3(self.shape(*x));
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for bi in 0..b {
                    for si in 0..s {
                        let idx = |ki: usize| (bi * k + ki) * s + si;
                        let dot: T = (0..k).map(|ki| y[idx(ki)] * dy[idx(ki)]).sum();
                        for ki in 0..k {
                            dx[idx(ki)] = y[idx(ki)] * (dy[idx(ki)] - dot);
                        }
                    }
                }
                acc(*x, dx)?;
            }
            Op::Dice {
                p,
                target,
                smooth,
                first_class,
            } => {
                let (b, k, s) = dims3(self.shape(*p));
                let pd = self.value(*p).data();
                let td = target.data();
                let sums = dice_sums(pd, td, b, k, s);
                let count = T::lit((b * (k - first_class)) as f64);
                let two = T::lit(2.0);
                let mut dp = vec![T::zero(); pd.len()];
                for bi in 0..b {
                    for ki in *first_class..k {
                        let (pt, ps, ts) = sums[bi * k + ki];
                        let num = two * pt + *smooth;
                        let den = ps + ts + *smooth;
                        let off = (bi * k + ki) * s;
                        for i in off..off + s {
                            let dd = (two * td[i] * den - num) / (den * den);
                            dp[i] = -dd / count * dy[0];
                        }
                    }
                }
                acc(*p, dp)?;
            }
            Op::CrossEntropy { logits, targets } => {
                let k = self.shape(*logits)[1];
                let bsz = T::lit(targets.len() as f64);
                let probs = softmax_axis1(self.value(*logits).data(), &[targets.len(), k]);
                let mut dl = probs;
                for (bi, &t) in targets.iter().enumerate() {
                    dl[bi * k + t] -= T::one();
                }
                dl.iter_mut().for_each(|v| *v = *v / bsz * dy[0]);
                acc(*logits, dl)?;
            }
            Op::L1 { pred, targets } => {
                let n = T::lit(targets.len() as f64);
                let dp = self
                    .value(*pred)
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(p, t)| {
                        let diff = *p - *t;
                        let sign = if diff > T::zero() {
                            T::one()
                        } else if diff < T::zero() {
                            -T::one()
                        } else {
                            T::zero()
                        };
                        sign / n * dy[0]
                    })
                    .collect();
                acc(*pred, dp)?;
            }
            Op::WeightedSum { terms } => {
                for (v, c) in terms {
                    let n = self.value(*v).numel();
                    acc(*v, vec![*c * dy[0]; n])?;
                }
            }
            Op::DotConst { x, r } => {
                acc(*x, r.data().iter().map(|v| *v * dy[0]).collect())?;
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_axis1<T: Scalar>(x: &[T], shape: &[usize]) -> Vec<T> {
    let (b, k, s) = dims3(shape);
    let mut y = vec![T::zero(); x.len()];
    for bi in 0..b {
        for si in 0..s {
            let idx = |ki: usize| (bi * k + ki) * s + si;
            let mx = (0..k).map(|ki| x[idx(ki)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for ki in 0..k {
                let e = (x[idx(ki)] - mx).exp();
                y[idx(ki)] = e;
                z += e;
            }
            for ki in 0..k {
                y[idx(ki)] = y[idx(ki)] / z;
            }
        }
    }
    y
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(usize, Var)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// `(key, gradient)` for every parameter leaf that received a gradient.
    pub fn params(&self) -> impl Iterator<Item = (usize, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|(k, v)| self.get(*v).map(|g| (*k, g)))
    }
}
