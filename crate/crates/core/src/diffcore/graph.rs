//! Tape-based reverse-mode autodiff.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! walks the tape in reverse and returns a gradient per node. Inputs created
//! with [`Graph::input`] never receive gradients; nodes downstream only of
//! such inputs are skipped during the backward sweep.

use std::collections::HashMap;

use super::kernels;
use super::params::ParamSet;
use super::tensor::{Real, Tensor};
use crate::acquisition::{dc_backward, dc_forward};
use crate::error::{ensure_eq, Error, Result};
use crate::fourier::transform_tensor;
use crate::geometry::{warp_backward, warp_forward};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in normalisation layers.
    Train,
    /// Stored running statistics in normalisation layers.
    Eval,
}

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Var },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, batch_stats: bool },
    Relu { x: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Upsample2 { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Reshape { x: Var },
    Concat { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Scale { x: Var, s: T },
    ScaleCols { x: Var, factors: Vec<T> },
    Fft2c { x: Var },
    Ifft2c { x: Var },
    DataConsistency { x: Var, rows: Vec<bool> },
    Warp { img: Var, params: Var },
    Magnitude { x: Var },
    Mse { a: Var, b: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Statistics observed by a training-mode normalisation layer, to be folded
/// into the owning [`ParamSet`]'s running buffers.
#[derive(Clone, Debug)]
pub struct BnObservation<T> {
    pub set_uid: u64,
    pub mean_index: usize,
    pub var_index: usize,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

/// Fold observed batch statistics into the running buffers of `set`:
/// `running = momentum * running + (1 - momentum) * batch`. Observations for
/// other sets are ignored.
pub fn apply_bn_observations<T: Real>(set: &mut ParamSet<T>, obs: &[BnObservation<T>], momentum: f64) {
    let keep = T::real(momentum);
    let take = T::real(1.0 - momentum);
    let uid = set.uid();
    for o in obs.iter().filter(|o| o.set_uid == uid) {
        for (idx, batch) in [(o.mean_index, &o.mean), (o.var_index, &o.var)] {
            for (r, &b) in set.value_mut(idx).data_mut().iter_mut().zip(batch.iter()) {
                *r = keep * *r + take * b;
            }
        }
    }
}

pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    mode: Mode,
    params: HashMap<(u64, usize), Var>,
    bn_observations: Vec<BnObservation<T>>,
}

/// Per-node gradients from [`Graph::backward`].
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<T: Real> Graph<T> {
    pub fn new(mode: Mode) -> Self {
        Self {
            nodes: Vec::new(),
            mode,
            params: HashMap::new(),
            bn_observations: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never differentiated.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf bound to entry `index` of `set`. Repeated calls with the same set
    /// and index return the same node, so gradients from every use sum into
    /// one buffer.
    pub fn param(&mut self, set: &ParamSet<T>, index: usize) -> Var {
        let key = (set.uid(), index);
        if let Some(&v) = self.params.get(&key) {
            return v;
        }
        let v = self.leaf(set.value(index).clone());
        self.params.insert(key, v);
        v
    }

    pub fn param_by_name(&mut self, set: &ParamSet<T>, name: &str) -> Result<Var> {
        let idx = set
            .index_of(name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))?;
        Ok(self.param(set, idx))
    }

    /// Gradients for every entry of `set` (None where the entry was unused
    /// or is a non-trainable buffer).
    pub fn param_grads(&self, grads: &Grads<T>, set: &ParamSet<T>) -> Vec<Option<Tensor<T>>> {
        (0..set.len())
            .map(|i| {
                self.params
                    .get(&(set.uid(), i))
                    .and_then(|&v| grads.get(v).cloned())
            })
            .collect()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_bn_observations(&mut self) -> Vec<BnObservation<T>> {
        std::mem::take(&mut self.bn_observations)
    }

    fn record_bn(&mut self, obs: BnObservation<T>) {
        self.bn_observations.push(obs);
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::conv2d_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Conv2d { x, w, b }, &[x, w, b]))
    }

    /// Normalisation with batch statistics. Returns the output together with
    /// the batch mean and unbiased variance.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: T,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let f = kernels::batchnorm_forward(self.value(x), self.value(gamma), self.value(beta), None, eps)?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: f.xhat,
            inv_std: f.inv_std,
            batch_stats: true,
        };
        Ok((self.push(f.y, op, &[x, gamma, beta]), f.mean, f.var))
    }

    /// Normalisation whose scale, shift and running buffers live in `set`
    /// under `prefix`. Training mode normalises with batch statistics and
    /// records them for [`apply_bn_observations`]; evaluation mode uses the
    /// running buffers.
    pub fn batch_norm(&mut self, x: Var, set: &ParamSet<T>, prefix: &str) -> Result<Var> {
        let idx = |suffix: &str| {
            let name = format!("{prefix}.{suffix}");
            set.index_of(&name)
                .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
        };
        let (gi, bi, mi, vi) = (idx("gamma")?, idx("beta")?, idx("running_mean")?, idx("running_var")?);
        let (gamma, beta) = (self.param(set, gi), self.param(set, bi));
        let eps = T::real(super::BN_EPS);
        match self.mode {
            Mode::Train => {
                let (y, mean, var) = self.batch_norm_train(x, gamma, beta, eps)?;
                self.record_bn(BnObservation {
                    set_uid: set.uid(),
                    mean_index: mi,
                    var_index: vi,
                    mean,
                    var,
                });
                Ok(y)
            }
            Mode::Eval => {
                let mean = set.value(mi).data().to_vec();
                let var = set.value(vi).data().to_vec();
                self.batch_norm_eval(x, gamma, beta, &mean, &var, eps)
            }
        }
    }

    /// Normalisation with fixed statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Var> {
        let f = kernels::batchnorm_forward(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            Some((mean, var)),
            eps,
        )?;
        let op = Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat: f.xhat,
            inv_std: f.inv_std,
            batch_stats: false,
        };
        Ok(self.push(f.y, op, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(T::zero()));
        self.push(out, Op::Relu { x }, &[x])
    }

    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (out, argmax) = kernels::maxpool2_forward(self.value(x))?;
        Ok(self.push(out, Op::MaxPool2 { x, argmax }, &[x]))
    }

    pub fn upsample2(&mut self, x: Var) -> Result<Var> {
        let out = kernels::upsample2_forward(self.value(x))?;
        Ok(self.push(out, Op::Upsample2 { x }, &[x]))
    }

    /// Fully connected layer on the flattened trailing axes.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let out = kernels::linear_forward(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(out, Op::Linear { x, w, b }, &[x, w, b]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape { x }, &[x]))
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::concat_channels(self.value(a), self.value(b))?;
        Ok(self.push(out, Op::Concat { a, b }, &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        ensure_eq("rank", sa.len(), sb.len())?;
        for (&x, &y) in sa.iter().zip(sb) {
            ensure_eq("extent", x, y)?;
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        Ok(self.push(out, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let vb = self.value(b).data();
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().zip(vb).for_each(|(x, &y)| *x -= y);
        Ok(self.push(out, Op::Sub { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale { x, s }, &[x])
    }

    /// Multiply column `j` of a `[N, K]` tensor by `factors[j]`.
    pub fn scale_cols(&mut self, x: Var, factors: &[T]) -> Result<Var> {
        let k = factors.len();
        let v = self.value(x);
        ensure_eq("column count", k, v.len() / v.dim(0).max(1))?;
        let mut out = v.clone();
        for row in out.data_mut().chunks_mut(k) {
            row.iter_mut().zip(factors).for_each(|(a, &f)| *a *= f);
        }
        Ok(self.push(
            out,
            Op::ScaleCols {
                x,
                factors: factors.to_vec(),
            },
            &[x],
        ))
    }

    /// Centered orthonormal forward DFT of a `[N, 2, H, W]` tensor.
    pub fn fft2c(&mut self, x: Var) -> Result<Var> {
        let out = transform_tensor(self.value(x), false)?;
        Ok(self.push(out, Op::Fft2c { x }, &[x]))
    }

    pub fn ifft2c(&mut self, x: Var) -> Result<Var> {
        let out = transform_tensor(self.value(x), true)?;
        Ok(self.push(out, Op::Ifft2c { x }, &[x]))
    }

    /// Replace sampled rows of `x` with `measured`.
    pub fn data_consistency(&mut self, x: Var, measured: Var, rows: &[bool]) -> Result<Var> {
        let out = dc_forward(self.value(x), self.value(measured), rows)?;
        let op = Op::DataConsistency {
            x,
            rows: rows.to_vec(),
        };
        // `measured` holds acquired data and is not differentiated
        Ok(self.push(out, op, &[x]))
    }

    /// Bilinear rigid warp; `params` is `[N, 3]` as `(tx, ty, theta)`.
    pub fn warp(&mut self, img: Var, params: Var) -> Result<Var> {
        let out = warp_forward(self.value(img), self.value(params))?;
        Ok(self.push(out, Op::Warp { img, params }, &[img, params]))
    }

    /// `[N, 2, H, W]` → `[N, 1, H, W]` complex magnitude.
    pub fn magnitude(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).nchw()?;
        ensure_eq("complex channels", 2, c)?;
        let hw = h * w;
        let eps = T::real(1e-12);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * hw);
        for s in 0..n {
            let (re, im) = (&xs[2 * s * hw..(2 * s + 1) * hw], &xs[(2 * s + 1) * hw..(2 * s + 2) * hw]);
            out.extend(re.iter().zip(im).map(|(&r, &i)| (r * r + i * i + eps).sqrt()));
        }
        let out = Tensor::new(vec![n, 1, h, w], out)?;
        Ok(self.push(out, Op::Magnitude { x }, &[x]))
    }

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = va.len().max(1);
        let s: f64 = va
            .iter()
            .zip(vb)
            .map(|(&x, &y)| (x - y).to_f64_real().powi(2))
            .sum();
        let out = Tensor::scalar(T::real(s / n as f64));
        Ok(self.push(out, Op::Mse { a, b }, &[a, b]))
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).data()[0]
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::NonScalar(root.value.len()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(root.value.shape().to_vec(), vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs = |v: Var| self.nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Conv2d { x, w, b } => {
                    let (dx, dw, db) = kernels::conv2d_backward(
                        self.value(*x),
                        self.value(*w),
                        self.value(*b),
                        &g,
                        needs(*x),
                    )?;
                    if let Some(dx) = dx {
                        acc(&mut grads, *x, dx);
                    }
                    if needs(*w) {
                        acc(&mut grads, *w, dw);
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, batch_stats } => {
                    let (dx, dg, db) = kernels::batchnorm_backward(
                        self.value(*x).shape(),
                        self.value(*gamma),
                        xhat,
                        inv_std,
                        &g,
                        *batch_stats,
                    );
                    if needs(*x) {
                        acc(&mut grads, *x, dx);
                    }
                    if needs(*gamma) {
                        acc(&mut grads, *gamma, dg);
                    }
                    if needs(*beta) {
                        acc(&mut grads, *beta, db);
                    }
                }
                Op::Relu { x } => {
                    let mut d = g;
                    d.data_mut()
                        .iter_mut()
                        .zip(self.value(*x).data())
                        .for_each(|(gv, &xv)| {
                            if xv <= T::zero() {
                                *gv = T::zero();
                            }
                        });
                    acc(&mut grads, *x, d);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut d = Tensor::zeros(self.value(*x).shape().to_vec());
                    for (&idx, &gv) in argmax.iter().zip(g.data()) {
                        d.data_mut()[idx] += gv;
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Upsample2 { x } => {
                    let d = kernels::upsample2_backward(self.value(*x).shape(), &g);
                    acc(&mut grads, *x, d);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let flat = xv.clone().reshape(vec![xv.dim(0), xv.len() / xv.dim(0)])?;
                    let (dx, dw, db) = kernels::linear_backward(&flat, self.value(*w), &g);
                    if needs(*x) {
                        acc(&mut grads, *x, dx.reshape(xv.shape().to_vec())?);
                    }
                    if needs(*w) {
                        acc(&mut grads, *w, dw);
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, db);
                    }
                }
                Op::Reshape { x } => {
                    let d = g.reshape(self.value(*x).shape().to_vec())?;
                    acc(&mut grads, *x, d);
                }
                Op::Concat { a, b } => {
                    let ca = self.value(*a).dim(1);
                    let (ga, gb) = kernels::split_channels(&g, ca);
                    if needs(*a) {
                        acc(&mut grads, *a, ga);
                    }
                    if needs(*b) {
                        acc(&mut grads, *b, gb);
                    }
                }
                Op::Add { a, b } => {
                    if needs(*b) {
                        acc(&mut grads, *b, g.clone());
                    }
                    if needs(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Sub { a, b } => {
                    if needs(*b) {
                        acc(&mut grads, *b, g.map(|v| -v));
                    }
                    if needs(*a) {
                        acc(&mut grads, *a, g);
                    }
                }
                Op::Scale { x, s } => {
                    let s = *s;
                    acc(&mut grads, *x, g.map(|v| v * s));
                }
                Op::ScaleCols { x, factors } => {
                    let mut d = g;
                    for row in d.data_mut().chunks_mut(factors.len()) {
                        row.iter_mut().zip(factors).for_each(|(a, &f)| *a *= f);
                    }
                    acc(&mut grads, *x, d);
                }
                // unitary: the adjoint of one direction is the other
                Op::Fft2c { x } => {
                    acc(&mut grads, *x, transform_tensor(&g, true)?);
                }
                Op::Ifft2c { x } => {
                    acc(&mut grads, *x, transform_tensor(&g, false)?);
                }
                Op::DataConsistency { x, rows } => {
                    acc(&mut grads, *x, dc_backward(&g, rows));
                }
                Op::Warp { img, params } => {
                    let (di, dp) = warp_backward(self.value(*img), self.value(*params), &g)?;
                    if needs(*img) {
                        acc(&mut grads, *img, di);
                    }
                    if needs(*params) {
                        acc(&mut grads, *params, dp);
                    }
                }
                Op::Magnitude { x } => {
                    let xv = self.value(*x);
                    let (n, _, h, w) = xv.nchw()?;
                    let hw = h * w;
                    let mag = &node.value;
                    let mut d = vec![T::zero(); xv.len()];
                    for s in 0..n {
                        for p in 0..hw {
                            let m = mag.data()[s * hw + p];
                            let gv = g.data()[s * hw + p];
                            d[2 * s * hw + p] = gv * xv.data()[2 * s * hw + p] / m;
                            d[(2 * s + 1) * hw + p] = gv * xv.data()[(2 * s + 1) * hw + p] / m;
                        }
                    }
                    acc(&mut grads, *x, Tensor::new(xv.shape().to_vec(), d)?);
                }
                Op::Mse { a, b } => {
                    let (va, vb) = (self.value(*a), self.value(*b));
                    let k = T::real(2.0 / va.len().max(1) as f64) * g.data()[0];
                    let diff: Vec<T> = va
                        .data()
                        .iter()
                        .zip(vb.data())
                        .map(|(&x, &y)| k * (x - y))
                        .collect();
                    let da = Tensor::new(va.shape().to_vec(), diff)?;
                    if needs(*b) {
                        acc(&mut grads, *b, da.map(|v| -v));
                    }
                    if needs(*a) {
                        acc(&mut grads, *a, da);
                    }
                }
            }
        }
        Ok(Grads { grads })
    }
}
