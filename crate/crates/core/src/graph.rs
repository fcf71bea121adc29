//! Reverse-mode tape.
//!
//! A [`Graph`] records every op in execution order, so inputs always precede
//! outputs and a single reverse sweep computes all gradients. A tape supports
//! exactly one backward pass.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::kernels::{self, ConvDims, Window3};
use crate::param::{BatchNormParams, ParamId, ParamStore};
use crate::tensor::{Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Train,
    Eval,
}

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv3d {
        x: Var,
        k: Var,
        dims: ConvDims,
    },
    Matmul {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        cin: usize,
        cout: usize,
    },
    Act {
        x: Var,
        kind: Activation,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    ConvexMix {
        a: Var,
        b: Var,
        z: Var,
    },
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    GlobalAvgPool {
        x: Var,
        positions: usize,
        channels: usize,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Running-statistic update produced by a train-mode batch norm, applied to
/// the owning store by [`ParamStore::apply_stat_updates`].
#[derive(Debug, Clone)]
pub struct StatUpdate<T> {
    pub(crate) store: usize,
    pub(crate) params: BatchNormParams,
    pub(crate) batch_mean: Vec<T>,
    pub(crate) batch_var: Vec<T>,
}

#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    consumed: bool,
    bound: BTreeMap<(usize, ParamId), Var>,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node gradients from one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

fn check_same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(shape_err(op, format!("{:?} vs {:?}", a, b)));
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            consumed: false,
            bound: BTreeMap::new(),
            stat_updates: Vec::new(),
        }
    }

    /// A tape that never tracks gradients (feature extraction, evaluation).
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> Result<&Node<T>> {
        self.nodes.get(v.0).ok_or(Error::UnknownVar)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let requires_grad =
            self.grad_enabled && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn variable(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Bind a stored parameter as a leaf; repeated binds return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&(store.uid(), id)) {
            return v;
        }
        let v = self.leaf(store.value(id).clone(), store.is_trainable(id));
        self.bound.insert((store.uid(), id), v);
        v
    }

    pub(crate) fn bound_params(&self) -> impl Iterator<Item = (usize, ParamId, Var)> + '_ {
        self.bound.iter().map(|(&(uid, id), &v)| (uid, id, v))
    }

    pub(crate) fn take_stat_updates(&mut self, store: usize) -> Vec<StatUpdate<T>> {
        let (mine, rest) = core::mem::take(&mut self.stat_updates)
            .into_iter()
            .partition(|u| u.store == store);
        self.stat_updates = rest;
        mine
    }

    /// 3D cross-correlation of `x: [n,t,h,w,cin]` with `kernel: [kt,kh,kw,cin,cout]`.
    pub fn conv3d(&mut self, x: Var, kernel: Var, window: Window3) -> Result<Var> {
        let dims = ConvDims::resolve(self.node(x)?.value.shape(), self.node(kernel)?.value.shape(), window)?;
        let out = kernels::conv3d_forward(&dims, self.value(x).data(), self.value(kernel).data());
        let value = Tensor::new(&dims.out_shape(), out)?;
        self.push("conv3d", value, Op::Conv3d { x, k: kernel, dims }, &[x, kernel])
    }

    fn matmul(
        &mut self,
        op_name: &'static str,
        x: Var,
        weight: Var,
        bias: Option<Var>,
        out_shape_of: impl FnOnce(&[usize], usize) -> Vec<usize>,
    ) -> Result<Var> {
        let xs = self.node(x)?.value.shape().to_vec();
        let ws = self.node(weight)?.value.shape().to_vec();
        if ws.len() != 2 {
            return Err(shape_err(op_name, format!("weight must be [cin,cout], got {:?}", ws)));
        }
        let (cin, cout) = (ws[0], ws[1]);
        if xs.last().copied() != Some(cin) {
            return Err(shape_err(
                op_name,
                format!("input channels {:?} do not match weight cin {}", xs.last(), cin),
            ));
        }
        if let Some(b) = bias {
            let bs = self.node(b)?.value.shape();
            if bs != [cout] {
                return Err(shape_err(op_name, format!("bias shape {:?}, expected [{}]", bs, cout)));
            }
        }
        let rows = xs.iter().product::<usize>() / cin.max(1);
        let out = kernels::rows_matmul(
            self.value(x).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            rows,
            cin,
            cout,
        );
        let value = Tensor::new(&out_shape_of(&xs, cout), out)?;
        let mut inputs = vec![x, weight];
        inputs.extend(bias);
        self.push(
            op_name,
            value,
            Op::Matmul {
                x,
                w: weight,
                b: bias,
                rows,
                cin,
                cout,
            },
            &inputs,
        )
    }

    /// 1×1×1 convolution: an affine channel map applied at every position of
    /// `[n,t,h,w,cin]`.
    pub fn pointwise_conv(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        if self.node(x)?.value.rank() != 5 {
            return Err(shape_err(
                "pointwise_conv",
                format!("input must be [n,t,h,w,c], got {:?}", self.shape(x)),
            ));
        }
        self.matmul("pointwise_conv", x, weight, bias, |xs, cout| {
            let mut s = xs.to_vec();
            s[4] = cout;
            s
        })
    }

    /// Fully connected layer on `[n,cin]`.
    pub fn dense(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        if self.node(x)?.value.rank() != 2 {
            return Err(shape_err("dense", format!("input must be [n,c], got {:?}", self.shape(x))));
        }
        self.matmul("dense", x, weight, bias, |xs, cout| vec![xs[0], cout])
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var> {
        let f: fn(T) -> T = match kind {
            Activation::Sigmoid => |v| T::one() / (T::one() + (-v).exp()),
            Activation::Tanh => |v| v.tanh(),
            Activation::Relu => |v| if v > T::zero() { v } else { T::zero() },
        };
        let value = self.node(x)?.value.map(f);
        let name = match kind {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        };
        self.push(name, value, Op::Act { x, kind }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Tanh)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.activation(x, Activation::Relu)
    }

    fn zip(&mut self, op_name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (&self.node(a)?.value, &self.node(b)?.value);
        check_same_shape(op_name, av.shape(), bv.shape())?;
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(av.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("add", a, b, |p, q| p + q)?;
        self.push("add", v, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("sub", a, b, |p, q| p - q)?;
        self.push("sub", v, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("mul", a, b, |p, q| p * q)?;
        self.push("mul", v, Op::Mul(a, b), &[a, b])
    }

    /// `(1 - z) ⊙ a + z ⊙ b`.
    pub fn convex_mix(&mut self, a: Var, b: Var, z: Var) -> Result<Var> {
        let (av, bv, zv) = (&self.node(a)?.value, &self.node(b)?.value, &self.node(z)?.value);
        check_same_shape("convex_mix", av.shape(), bv.shape())?;
        check_same_shape("convex_mix", av.shape(), zv.shape())?;
        let data = av
            .data()
            .iter()
            .zip(bv.data())
            .zip(zv.data())
            .map(|((&p, &q), &w)| (T::one() - w) * p + w * q)
            .collect();
        let v = Tensor::new(av.shape(), data)?;
        self.push("convex_mix", v, Op::ConvexMix { a, b, z }, &[a, b, z])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let v = self.node(x)?.value.map(|p| p * s);
        self.push("scale", v, Op::Scale(x, s), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.data().iter().copied().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        if t.is_empty() {
            return Err(Error::Empty("mean of an empty tensor"));
        }
        let s = t.data().iter().copied().sum::<T>() / T::of_usize(t.len());
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.node(x)?.value.clone().reshape(shape)?;
        self.push("reshape", v, Op::Reshape(x), &[x])
    }

    /// Mean over every axis except batch and channel: `[n,...,c] -> [n,c]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let t = &self.node(x)?.value;
        if t.rank() < 3 {
            return Err(shape_err(
                "global_avg_pool",
                format!("need [n,...,c] with at least one pooled axis, got {:?}", t.shape()),
            ));
        }
        let n = t.shape()[0];
        let c = t.channels();
        let positions = t.len() / (n * c).max(1);
        if positions == 0 {
            return Err(Error::EmptyOutput {
                op: "global_avg_pool",
                detail: format!("input {:?}", t.shape()),
            });
        }
        let inv = T::one() / T::of_usize(positions);
        let mut out = vec![T::zero(); n * c];
        for b in 0..n {
            let acc = &mut out[b * c..(b + 1) * c];
            for p in 0..positions {
                let row = &t.data()[(b * positions + p) * c..(b * positions + p + 1) * c];
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a = *a + v;
                }
            }
            acc.iter_mut().for_each(|a| *a = *a * inv);
        }
        let v = Tensor::new(&[n, c], out)?;
        self.push(
            "global_avg_pool",
            v,
            Op::GlobalAvgPool {
                x,
                positions,
                channels: c,
            },
            &[x],
        )
    }

    pub fn max_pool3d(&mut self, x: Var, window: [usize; 3], geom: Window3) -> Result<Var> {
        let t = &self.node(x)?.value;
        let (shape, out, argmax) = kernels::max_pool3d_forward(t.data(), t.shape(), window, geom)?;
        let v = Tensor::new(&shape, out)?;
        self.push("max_pool3d", v, Op::MaxPool { x, argmax }, &[x])
    }

    /// Batch normalization over every axis but the trailing channel axis.
    ///
    /// Train mode normalizes with batch statistics and returns them (mean and
    /// unbiased variance) for the caller's running average. Eval mode needs
    /// `running = Some((mean, var))`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        mode: Mode,
    ) -> Result<(Var, Option<(Vec<T>, Vec<T>)>)> {
        let xv = &self.node(x)?.value;
        let c = xv.channels();
        for (name, p) in [("gamma", gamma), ("beta", beta)] {
            let s = self.node(p)?.value.shape();
            if s != [c] {
                return Err(shape_err(
                    "batch_norm",
                    format!("{} shape {:?}, expected [{}]", name, s, c),
                ));
            }
        }
        let rows = xv.len() / c.max(1);
        if rows == 0 {
            return Err(Error::Empty("batch_norm over an empty tensor"));
        }
        let eps = T::of(BN_EPS);
        let (mean, var, batch) = match mode {
            Mode::Train => {
                let mut mean = vec![T::zero(); c];
                for r in 0..rows {
                    for (m, &v) in mean.iter_mut().zip(&xv.data()[r * c..(r + 1) * c]) {
                        *m = *m + v;
                    }
                }
                let inv_rows = T::one() / T::of_usize(rows);
                mean.iter_mut().for_each(|m| *m = *m * inv_rows);
                let mut var = vec![T::zero(); c];
                for r in 0..rows {
                    for ((s, &v), &m) in var.iter_mut().zip(&xv.data()[r * c..(r + 1) * c]).zip(&mean) {
                        *s = *s + (v - m) * (v - m);
                    }
                }
                let unbiased_scale = if rows > 1 {
                    T::one() / T::of_usize(rows - 1)
                } else {
                    T::zero()
                };
                let unbiased: Vec<T> = var.iter().map(|&s| s * unbiased_scale).collect();
                var.iter_mut().for_each(|s| *s = *s * inv_rows);
                let batch = Some((mean.clone(), unbiased));
                (mean, var, batch)
            }
            Mode::Eval => {
                let (m, v) = running.ok_or_else(|| {
                    shape_err("batch_norm", "eval mode requires running statistics")
                })?;
                if m.len() != c || v.len() != c {
                    return Err(shape_err(
                        "batch_norm",
                        format!("running stats length {} / {}, expected {}", m.len(), v.len(), c),
                    ));
                }
                (m.to_vec(), v.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            for ch in 0..c {
                let i = r * c + ch;
                let h = (xv.data()[i] - mean[ch]) * inv_std[ch];
                xhat[i] = h;
                out[i] = g[ch] * h + b[ch];
            }
        }
        let v = Tensor::new(xv.shape(), out)?;
        let var_out = self.push(
            "batch_norm",
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == Mode::Train,
            },
            &[x, gamma, beta],
        )?;
        Ok((var_out, batch))
    }

    /// Batch norm whose parameters and running statistics live in `store`.
    /// Train-mode statistic updates are queued on the tape until
    /// [`ParamStore::apply_stat_updates`].
    pub fn batch_norm_param(
        &mut self,
        store: &ParamStore<T>,
        params: &BatchNormParams,
        x: Var,
        mode: Mode,
    ) -> Result<Var> {
        let gamma = self.param(store, params.gamma);
        let beta = self.param(store, params.beta);
        match mode {
            Mode::Eval => {
                if store.value(params.tracked).data()[0] == T::zero() {
                    let name = store.name(params.gamma);
                    let layer = name.strip_suffix(".gamma").unwrap_or(name);
                    return Err(Error::UninitializedStats(layer.into()));
                }
                let running = Some((store.value(params.mean).data(), store.value(params.var).data()));
                Ok(self.batch_norm(x, gamma, beta, running, mode)?.0)
            }
            Mode::Train => {
                let (y, stats) = self.batch_norm(x, gamma, beta, None, mode)?;
                if let Some((batch_mean, batch_var)) = stats {
                    self.stat_updates.push(StatUpdate {
                        store: store.uid(),
                        params: *params,
                        batch_mean,
                        batch_var,
                    });
                }
                Ok(y)
            }
        }
    }

    /// Mean over the batch of `-log softmax(logits)[label]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = &self.node(logits)?.value;
        if lv.rank() != 2 || lv.shape()[0] != labels.len() {
            return Err(shape_err(
                "softmax_cross_entropy",
                format!("logits {:?} with {} labels", lv.shape(), labels.len()),
            ));
        }
        let (n, k) = (lv.shape()[0], lv.shape()[1]);
        if n == 0 || k == 0 {
            return Err(Error::Empty("softmax_cross_entropy over an empty batch"));
        }
        if let Some(&label) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::LabelOutOfRange { label, classes: k });
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for r in 0..n {
            let row = &lv.data()[r * k..(r + 1) * k];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (p, &v) in probs[r * k..(r + 1) * k].iter_mut().zip(row) {
                *p = (v - m).exp();
                z = z + *p;
            }
            probs[r * k..(r + 1) * k].iter_mut().for_each(|p| *p = *p / z);
            total = total + (m + z.ln() - row[labels[r]]);
        }
        let loss = Tensor::scalar(total / T::of_usize(n));
        self.push(
            "softmax_cross_entropy",
            loss,
            Op::SoftmaxCe {
                logits,
                probs,
                labels: labels.to_vec(),
            },
            &[logits],
        )
    }

    /// Reverse sweep from the scalar `loss`. Consumes the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        let lv = &self.node(loss)?.value;
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else {
                continue;
            };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backprop_node(i, &dy, &mut grads);
            grads[i] = Some(dy);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, node)| {
                g.filter(|_| node.requires_grad)
                    .map(|g| Tensor::new(node.value.shape(), g).expect("gradient shape"))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, dy: &[T], grads: &mut [Option<Vec<T>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, g: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                slot @ None => *slot = Some(g),
            }
        };
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, k, dims } => {
                let (dx, dk) = kernels::conv3d_backward(
                    dims,
                    self.value(*x).data(),
                    self.value(*k).data(),
                    dy,
                    wants(*x),
                    wants(*k),
                );
                if let Some(dx) = dx {
                    send(*x, dx);
                }
                if let Some(dk) = dk {
                    send(*k, dk);
                }
            }
            Op::Matmul {
                x,
                w,
                b,
                rows,
                cin,
                cout,
            } => {
                let g = kernels::rows_matmul_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    *rows,
                    *cin,
                    *cout,
                    [wants(*x), wants(*w), b.is_some_and(wants)],
                );
                if let Some(dx) = g.dx {
                    send(*x, dx);
                }
                if let Some(dw) = g.dw {
                    send(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, g.db) {
                    send(*b, db);
                }
            }
            Op::Act { x, kind } => {
                let xd = self.value(*x).data();
                let g = match kind {
                    Activation::Sigmoid => dy
                        .iter()
                        .zip(y)
                        .map(|(&d, &s)| d * s * (T::one() - s))
                        .collect(),
                    Activation::Tanh => dy.iter().zip(y).map(|(&d, &t)| d * (T::one() - t * t)).collect(),
                    Activation::Relu => dy
                        .iter()
                        .zip(xd)
                        .map(|(&d, &v)| if v > T::zero() { d } else { T::zero() })
                        .collect(),
                };
                send(*x, g);
            }
            Op::Add(a, b) => {
                send(*a, dy.to_vec());
                send(*b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, dy.to_vec());
                send(*b, dy.iter().map(|&d| -d).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    send(*a, dy.iter().zip(bv).map(|(&d, &q)| d * q).collect());
                }
                if wants(*b) {
                    send(*b, dy.iter().zip(av).map(|(&d, &p)| d * p).collect());
                }
            }
            Op::ConvexMix { a, b, z } => {
                let (av, bv, zv) = (self.value(*a).data(), self.value(*b).data(), self.value(*z).data());
                if wants(*a) {
                    send(*a, dy.iter().zip(zv).map(|(&d, &w)| d * (T::one() - w)).collect());
                }
                if wants(*b) {
                    send(*b, dy.iter().zip(zv).map(|(&d, &w)| d * w).collect());
                }
                if wants(*z) {
                    send(
                        *z,
                        dy.iter()
                            .zip(av.iter().zip(bv))
                            .map(|(&d, (&p, &q))| d * (q - p))
                            .collect(),
                    );
                }
            }
            Op::Scale(x, s) => send(*x, dy.iter().map(|&d| d * *s).collect()),
            Op::Sum(x) => send(*x, vec![dy[0]; self.value(*x).len()]),
            Op::Mean(x) => {
                let n = self.value(*x).len();
                send(*x, vec![dy[0] / T::of_usize(n); n]);
            }
            Op::Reshape(x) => send(*x, dy.to_vec()),
            Op::GlobalAvgPool {
                x,
                positions,
                channels,
            } => {
                let inv = T::one() / T::of_usize(*positions);
                let n = dy.len() / channels;
                let mut g = Vec::with_capacity(n * positions * channels);
                for b in 0..n {
                    let row = &dy[b * channels..(b + 1) * channels];
                    for _ in 0..*positions {
                        g.extend(row.iter().map(|&d| d * inv));
                    }
                }
                send(*x, g);
            }
            Op::MaxPool { x, argmax } => {
                let mut g = vec![T::zero(); self.value(*x).len()];
                for (&src, &d) in argmax.iter().zip(dy) {
                    g[src] = g[src] + d;
                }
                send(*x, g);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let c = inv_std.len();
                let rows = dy.len() / c;
                let gv = self.value(*gamma).data();
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for r in 0..rows {
                    for ch in 0..c {
                        let i = r * c + ch;
                        sum_dy[ch] = sum_dy[ch] + dy[i];
                        sum_dy_xhat[ch] = sum_dy_xhat[ch] + dy[i] * xhat[i];
                    }
                }
                if wants(*x) {
                    let mut g = vec![T::zero(); dy.len()];
                    let m = T::of_usize(rows);
                    for r in 0..rows {
                        for ch in 0..c {
                            let i = r * c + ch;
                            g[i] = if *train {
                                gv[ch] * inv_std[ch] / m
                                    * (m * dy[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch])
                            } else {
                                dy[i] * gv[ch] * inv_std[ch]
                            };
                        }
                    }
                    send(*x, g);
                }
                send(*gamma, sum_dy_xhat);
                send(*beta, sum_dy);
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let n = labels.len();
                let k = probs.len() / n;
                let scale = dy[0] / T::of_usize(n);
                let mut g: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    g[r * k + l] = g[r * k + l] - scale;
                }
                send(*logits, g);
            }
        }
    }
}
