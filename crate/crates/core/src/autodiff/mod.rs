//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every primitive as it executes. Calling
//! [`Tape::backward`] on a scalar node replays the record in reverse and
//! returns the gradient of every registered parameter. Tapes are plain
//! values with no shared state, so independent tapes can be driven from
//! different threads.

mod gradcheck;
pub(crate) mod kernels;

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use kernels::ConvDims;

pub use gradcheck::{
    grad_check, grad_check_params, grad_check_params_with, grad_check_terms_with, relative_error, Stencil,
};

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Avg,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Nearest,
    Bilinear,
}

enum Op {
    Leaf,
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool {
        input: Var,
        factor: usize,
    },
    Upsample {
        input: Var,
        factor: usize,
        mode: UpsampleMode,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Add(Var, Var),
    Hadamard(Var, Var),
    Concat(Vec<Var>),
    Scale(Var, f64),
    Sum(Var),
    WeightedCe {
        logits: Var,
        labels: Vec<u32>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
    param: Option<String>,
}

/// Gradients of the registered parameters, keyed by name.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    by_name: BTreeMap<String, Tensor>,
    visited: Vec<usize>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.by_name.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.by_name.iter()
    }

    pub fn into_map(self) -> BTreeMap<String, Tensor> {
        self.by_name
    }

    /// Node indices in the order backward processed them.
    pub fn visit_order(&self) -> &[usize] {
        &self.visited
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: BTreeMap<String, Var>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Hash of every piecewise branch taken so far: ReLU input signs and
    /// max-pool winners. Two recordings with equal signatures lie in the
    /// same smooth region of the recorded function.
    pub fn branch_signature(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for &v in self.nodes[x.0].value.data() {
                        (v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Records an input that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a named learnable leaf.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor) -> Result<Var> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::InvalidArgument(format!(
                "parameter `{name}` registered twice on one tape"
            )));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
            param: Some(name.clone()),
        });
        let v = Var(self.nodes.len() - 1);
        self.params.insert(name, v);
        Ok(v)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if !value.all_finite() {
            return Err(Error::Numeric(format!("{op_name} produced a non-finite value")));
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Same-padded, stride-1 convolution. `kernel` is `K × K × Cin × Cout` with odd `K`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let (h, w, cin) = self.value(input).hwc()?;
        let d = conv_dims(self.value(kernel), h, w, cin)?;
        if let Some(b) = bias {
            if self.value(b).shape() != [d.cout] {
                return Err(Error::shape(
                    "conv2d",
                    format!("bias shape {:?}, expected [{}]", self.value(b).shape(), d.cout),
                ));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(input).data(),
            self.value(kernel).data(),
            bias.map(|b| self.value(b).data()),
            &d,
        );
        let value = Tensor::new(vec![h, w, d.cout], out)?;
        let mut inputs = vec![input, kernel];
        inputs.extend(bias);
        self.push("conv2d", value, Op::Conv2d { input, kernel, bias }, &inputs)
    }

    pub fn pool2d(&mut self, input: Var, mode: PoolMode, factor: usize) -> Result<Var> {
        let (h, w, c) = self.value(input).hwc()?;
        if factor == 0 || h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(
                "pool2d",
                format!("{h}×{w} is not divisible by pooling factor {factor}; pad the input first"),
            ));
        }
        let shape = vec![h / factor, w / factor, c];
        let data = self.value(input).data();
        match mode {
            PoolMode::Max => {
                let (out, argmax) = kernels::max_pool(data, h, w, c, factor);
                self.push("max_pool", Tensor::new(shape, out)?, Op::MaxPool { input, argmax }, &[input])
            }
            PoolMode::Avg => {
                let out = kernels::avg_pool(data, h, w, c, factor);
                self.push("avg_pool", Tensor::new(shape, out)?, Op::AvgPool { input, factor }, &[input])
            }
        }
    }

    pub fn upsample2d(&mut self, input: Var, factor: usize, mode: UpsampleMode) -> Result<Var> {
        let (h, w, c) = self.value(input).hwc()?;
        if factor == 0 {
            return Err(Error::InvalidArgument("upsample factor must be ≥ 1".into()));
        }
        let data = self.value(input).data();
        let out = match mode {
            UpsampleMode::Nearest => kernels::upsample_nearest(data, h, w, c, factor),
            UpsampleMode::Bilinear => kernels::upsample_bilinear(data, h, w, c, factor),
        };
        let value = Tensor::new(vec![h * factor, w * factor, c], out)?;
        self.push("upsample2d", value, Op::Upsample { input, factor, mode }, &[input])
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let src = self.value(x);
        let value = Tensor::new(src.shape().to_vec(), src.data().iter().map(|&v| f(v)).collect())?;
        self.push(name, value, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.map("tanh", x, f64::tanh, Op::Tanh(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.map("scale", x, |v| v * factor, Op::Scale(x, factor))
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                name,
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(name, value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("hadamard", a, b, |x, y| x * y, Op::Hadamard(a, b))
    }

    /// Stacks feature maps with equal `H × W` along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        };
        let (h, w, _) = self.value(first).hwc()?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (ph, pw, pc) = self.value(p).hwc()?;
            if (ph, pw) != (h, w) {
                return Err(Error::shape(
                    "concat_channels",
                    format!("spatial extents {ph}×{pw} vs {h}×{w}"),
                ));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(h * w * total);
        for px in 0..h * w {
            for (&p, &c) in parts.iter().zip(&chans) {
                out.extend_from_slice(&self.value(p).data()[px * c..(px + 1) * c]);
            }
        }
        let value = Tensor::new(vec![h, w, total], out)?;
        self.push("concat_channels", value, Op::Concat(parts.to_vec()), parts)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Class-weighted softmax cross entropy averaged over pixels.
    ///
    /// `logits` is `H × W × Q`, `labels` holds one class per pixel in
    /// row-major order, `weights` one positive weight per class.
    pub fn weighted_softmax_ce(&mut self, logits: Var, labels: &[u32], weights: &[f64]) -> Result<Var> {
        let (h, w, q) = self.value(logits).hwc()?;
        if labels.len() != h * w {
            return Err(Error::shape(
                "weighted_softmax_ce",
                format!("{} labels for {h}×{w} logits", labels.len()),
            ));
        }
        if weights.len() != q {
            return Err(Error::shape(
                "weighted_softmax_ce",
                format!("{} class weights for Q = {q}", weights.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= q) {
            return Err(Error::InvalidArgument(format!("label {bad} out of range for Q = {q}")));
        }
        let data = self.value(logits).data();
        let mut probs = vec![0.0; data.len()];
        let mut total = 0.0;
        for (px, (row, prow)) in data.chunks_exact(q).zip(probs.chunks_exact_mut(q)).enumerate() {
            let (lse, _) = softmax_into(row, prow);
            let l = labels[px] as usize;
            total += weights[l] * (lse - row[l]);
        }
        let loss = total / (h * w) as f64;
        let op = Op::WeightedCe {
            logits,
            labels: labels.to_vec(),
            weights: weights.to_vec(),
            probs,
        };
        self.push("weighted_softmax_ce", Tensor::scalar(loss), op, &[logits])
    }

    /// Back-propagates from the scalar `loss` and returns parameter gradients.
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::TapeConsumed);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got shape {:?}", self.value(loss).shape()),
            ));
        }
        self.consumed = true;

        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            out.visited.push(i);
            if let Some(name) = &node.param {
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                out.by_name.insert(name.clone(), t);
                continue;
            }
            self.backward_node(i, &g, &mut grads)?;
        }
        // Parameters that do not influence the loss get explicit zeros.
        for (name, v) in &self.params {
            out.by_name
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        Ok(out)
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let nodes = &self.nodes;
        let needs = |v: Var| nodes[v.0].needs_grad;
        let val = |v: Var| &nodes[v.0].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d { input, kernel, bias } => {
                let (h, w, cin) = val(*input).hwc()?;
                let d = conv_dims(val(*kernel), h, w, cin)?;
                let want = [needs(*input), needs(*kernel), bias.is_some_and(needs)];
                let (dx, dk, db) =
                    kernels::conv2d_backward(val(*input).data(), val(*kernel).data(), g, &d, want);
                accumulate(grads, *input, dx);
                accumulate(grads, *kernel, dk);
                if let Some(b) = bias {
                    accumulate(grads, *b, db);
                }
            }
            Op::MaxPool { input, argmax } => {
                if needs(*input) {
                    let mut dx = vec![0.0; val(*input).len()];
                    for (&src, &gv) in argmax.iter().zip(g) {
                        dx[src] += gv;
                    }
                    accumulate(grads, *input, Some(dx));
                }
            }
            Op::AvgPool { input, factor } => {
                if needs(*input) {
                    let (h, w, c) = val(*input).hwc()?;
                    accumulate(grads, *input, Some(kernels::avg_pool_backward(g, h, w, c, *factor)));
                }
            }
            Op::Upsample { input, factor, mode } => {
                if needs(*input) {
                    let (h, w, c) = val(*input).hwc()?;
                    let dx = match mode {
                        UpsampleMode::Nearest => kernels::upsample_nearest_backward(g, h, w, c, *factor),
                        UpsampleMode::Bilinear => kernels::upsample_bilinear_backward(g, h, w, c, *factor),
                    };
                    accumulate(grads, *input, Some(dx));
                }
            }
            Op::Sigmoid(x) => {
                let y = nodes[i].value.data();
                let dx = g.iter().zip(y).map(|(gv, s)| gv * s * (1.0 - s)).collect();
                accumulate(grads, *x, Some(dx));
            }
            Op::Tanh(x) => {
                let y = nodes[i].value.data();
                let dx = g.iter().zip(y).map(|(gv, t)| gv * (1.0 - t * t)).collect();
                accumulate(grads, *x, Some(dx));
            }
            Op::Relu(x) => {
                let xs = val(*x).data();
                let dx = g
                    .iter()
                    .zip(xs)
                    .map(|(gv, &v)| if v > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate(grads, *x, Some(dx));
            }
            Op::Add(a, b) => {
                if needs(*a) {
                    accumulate(grads, *a, Some(g.to_vec()));
                }
                if needs(*b) {
                    accumulate(grads, *b, Some(g.to_vec()));
                }
            }
            Op::Hadamard(a, b) => {
                if needs(*a) {
                    let da = g.iter().zip(val(*b).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *a, Some(da));
                }
                if needs(*b) {
                    let db = g.iter().zip(val(*a).data()).map(|(x, y)| x * y).collect();
                    accumulate(grads, *b, Some(db));
                }
            }
            Op::Concat(parts) => {
                let (h, w, total) = nodes[i].value.hwc()?;
                let mut offset = 0;
                for &p in parts {
                    let c = val(p).hwc()?.2;
                    if needs(p) {
                        let mut dp = Vec::with_capacity(h * w * c);
                        for px in 0..h * w {
                            dp.extend_from_slice(&g[px * total + offset..px * total + offset + c]);
                        }
                        accumulate(grads, p, Some(dp));
                    }
                    offset += c;
                }
            }
            Op::Scale(x, f) => {
                accumulate(grads, *x, Some(g.iter().map(|v| v * f).collect()));
            }
            Op::Sum(x) => {
                accumulate(grads, *x, Some(vec![g[0]; val(*x).len()]));
            }
            Op::WeightedCe {
                logits,
                labels,
                weights,
                probs,
            } => {
                let (h, w, q) = val(*logits).hwc()?;
                let norm = g[0] / (h * w) as f64;
                let mut dx = probs.clone();
                for (px, row) in dx.chunks_exact_mut(q).enumerate() {
                    let l = labels[px] as usize;
                    row[l] -= 1.0;
                    let s = norm * weights[l];
                    row.iter_mut().for_each(|v| *v *= s);
                }
                accumulate(grads, *logits, Some(dx));
            }
        }
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: Option<Vec<f64>>) {
    let Some(g) = g else { return };
    match &mut grads[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn conv_dims(kernel: &Tensor, h: usize, w: usize, cin: usize) -> Result<ConvDims> {
    let &[k, k2, kcin, cout] = kernel.shape() else {
        return Err(Error::shape(
            "conv2d",
            format!("kernel must be K×K×Cin×Cout, got {:?}", kernel.shape()),
        ));
    };
    if k != k2 || k % 2 == 0 {
        return Err(Error::shape("conv2d", format!("kernel must be square with odd size, got {k}×{k2}")));
    }
    if kcin != cin {
        return Err(Error::shape(
            "conv2d",
            format!("input has {cin} channels, kernel expects {kcin}"),
        ));
    }
    Ok(ConvDims { h, w, cin, cout, k })
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Writes the softmax of `row` into `out`; returns `(log-sum-exp, max)`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) -> (f64, f64) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - m).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
    (m + z.ln(), m)
}
