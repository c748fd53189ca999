//! Reverse-mode differentiation over a linear tape.
//!
//! Forward calls append nodes holding their value; `backward` walks the
//! tape in reverse and accumulates gradients into every node that requires
//! one. Parameter leaves remember their [`ParamId`] so the gradients can be
//! folded back into a [`ParamStore`].

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::numerics::kernels::{self, GroupNormSaved};
use crate::numerics::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Model part an executed op is billed to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    Embed,
    HighIn,
    Low,
    HighOut,
    Adaptor,
    Other,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Embed,
        Component::HighIn,
        Component::Low,
        Component::HighOut,
        Component::Adaptor,
        Component::Other,
    ];

    fn index(self) -> usize {
        self as usize
    }
}

/// Per-component tally of executed FLOPs and op invocations.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct FlopCounter {
    flops: [u64; 6],
    ops: [u64; 6],
    attention_ops: [u64; 6],
}

impl FlopCounter {
    pub fn flops(&self, c: Component) -> u64 {
        self.flops[c.index()]
    }

    pub fn ops(&self, c: Component) -> u64 {
        self.ops[c.index()]
    }

    pub fn attention_ops(&self, c: Component) -> u64 {
        self.attention_ops[c.index()]
    }

    pub fn total(&self) -> u64 {
        self.flops.iter().sum()
    }

    pub fn merge(&mut self, other: &FlopCounter) {
        for i in 0..6 {
            self.flops[i] += other.flops[i];
            self.ops[i] += other.ops[i];
            self.attention_ops[i] += other.attention_ops[i];
        }
    }

    fn record(&mut self, c: Component, flops: u64) {
        self.flops[c.index()] += flops;
        self.ops[c.index()] += 1;
    }
}

/// A named trainable tensor with its accumulated gradient.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Ordered, uniquely named parameter collection.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
    frozen: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return config_err(format!("duplicate parameter name `{name}`"));
        }
        let id = self.params.len();
        self.index.insert(name.clone(), id);
        let grad = Tensor::zeros(value.shape());
        self.params.push(Parameter { name, value, grad });
        Ok(ParamId(id))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    /// Total scalar count across all parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// A frozen store contributes constants to the tape, never gradients.
    pub fn set_frozen(&mut self, frozen: bool) {
        self.frozen = frozen;
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds the gradients of every parameter leaf on `tape` into `grad`.
    pub fn accumulate(&mut self, tape: &Tape, grads: &Gradients) -> Result<()> {
        for (i, node) in tape.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = &grads.grads[i] {
                    let p = &mut self.params[id.0];
                    p.grad.expect_same_shape(g)?;
                    p.grad.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    ConvT2d { x: Var, w: Var, b: Var, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Var },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, saved: GroupNormSaved },
    Silu(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f32),
    AddChannel { x: Var, v: Var },
    Concat(Vec<Var>),
    Upsample(Var),
    ToTokens(Var),
    FromTokens(Var),
    Attention { q: Var, k: Var, v: Var, probs: Tensor },
    Embedding { table: Var, ids: Vec<usize> },
    MseLoss { pred: Var, target: Tensor },
    L2NormMean { pred: Var, target: Tensor, norms: Vec<f32> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param(_) => "param",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvT2d { .. } => "conv_transpose2d",
            Op::Linear { .. } => "linear",
            Op::GroupNorm { .. } => "group_norm",
            Op::Silu(_) => "silu",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Scale(..) => "scale",
            Op::AddChannel { .. } => "add_channel",
            Op::Concat(_) => "concat",
            Op::Upsample(_) => "upsample",
            Op::ToTokens(_) => "to_tokens",
            Op::FromTokens(_) => "from_tokens",
            Op::Attention { .. } => "attention",
            Op::Embedding { .. } => "embedding",
            Op::MseLoss { .. } => "mse_loss",
            Op::L2NormMean { .. } => "l2_norm_mean",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`]. Only leaf and parameter
/// nodes keep theirs; intermediate gradients are released as the walk
/// passes them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Recording context for one forward (and optionally backward) pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    counter: FlopCounter,
    component: Option<Component>,
    corrupt: Option<&'static str>,
    no_grad: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape that never tracks gradients; parameters enter as constants.
    pub fn inference() -> Self {
        Self { no_grad: true, ..Self::default() }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn take_value(&self, v: Var) -> Tensor {
        self.nodes[v.0].value.clone()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn counter(&self) -> &FlopCounter {
        &self.counter
    }

    /// Component subsequent ops are billed to; returns the previous one.
    pub fn set_component(&mut self, c: Component) -> Option<Component> {
        self.component.replace(c)
    }

    pub fn restore_component(&mut self, prev: Option<Component>) {
        self.component = prev;
    }

    /// Test hook: negates the input gradients produced by ops named `op`.
    #[doc(hidden)]
    pub fn corrupt_backward(&mut self, op: &'static str) {
        self.corrupt = Some(op);
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.get(id).value.clone();
        self.nodes.push(Node { value, op: Op::Param(id), requires_grad: !(store.is_frozen() || self.no_grad) });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], flops: u64) -> Result<Var> {
        value.ensure_finite(op.name())?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        if op_is_attention(&op) {
            let c = self.component.unwrap_or(Component::Other);
            self.counter.attention_ops[c.index()] += 1;
        }
        if flops > 0 {
            self.counter.record(self.component.unwrap_or(Component::Other), flops);
        }
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (y, flops) = kernels::conv2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        self.push(y, Op::Conv2d { x, w, b, stride, pad }, &[x, w, b], flops)
    }

    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let (y, flops) = kernels::conv_transpose2d(self.value(x), self.value(w), self.value(b), stride, pad)?;
        self.push(y, Op::ConvT2d { x, w, b, stride, pad }, &[x, w, b], flops)
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (y, flops) = kernels::linear(self.value(x), self.value(w), self.value(b))?;
        self.push(y, Op::Linear { x, w, b }, &[x, w, b], flops)
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var) -> Result<Var> {
        let (y, saved, flops) =
            kernels::group_norm(self.value(x), groups, self.value(gamma), self.value(beta), 1e-5)?;
        self.push(y, Op::GroupNorm { x, gamma, beta, groups, saved }, &[x, gamma, beta], flops)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        let y = self.value(x).map(kernels::silu);
        let flops = 4 * y.numel() as u64;
        self.push(y, Op::Silu(x), &[x], flops)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).add(self.value(b))?;
        let flops = y.numel() as u64;
        self.push(y, Op::Add(a, b), &[a, b], flops)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = self.value(a).sub(self.value(b))?;
        let flops = y.numel() as u64;
        self.push(y, Op::Sub(a, b), &[a, b], flops)
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        let y = self.value(x).scale(s);
        let flops = y.numel() as u64;
        self.push(y, Op::Scale(x, s), &[x], flops)
    }

    /// `x[n, c, h, w] + v[n, c]`.
    pub fn add_channel(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if self.value(v).shape() != [n, c] {
            return config_err(format!(
                "channel bias {:?} does not broadcast over {:?}",
                self.value(v).shape(),
                self.value(x).shape()
            ));
        }
        let mut y = self.value(x).clone();
        let vd = self.value(v).data().to_vec();
        for (plane, chunk) in y.data_mut().chunks_mut(h * w).enumerate() {
            let add = vd[plane];
            chunk.iter_mut().for_each(|e| *e += add);
        }
        let flops = y.numel() as u64;
        self.push(y, Op::AddChannel { x, v }, &[x, v], flops)
    }

    /// Concatenation along the channel axis of NCHW tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let (n, _, h, w) = match parts.first() {
            Some(p) => self.value(*p).dims4()?,
            None => return config_err("concat of zero tensors"),
        };
        let mut channels = 0;
        for p in parts {
            let (pn, pc, ph, pw) = self.value(*p).dims4()?;
            if (pn, ph, pw) != (n, h, w) {
                return config_err(format!(
                    "cannot concatenate {:?} with {:?}",
                    self.value(parts[0]).shape(),
                    self.value(*p).shape()
                ));
            }
            channels += pc;
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * channels * plane);
        for b in 0..n {
            for p in parts {
                let t = self.value(*p);
                let pc = t.shape()[1];
                out.extend_from_slice(&t.data()[b * pc * plane..(b + 1) * pc * plane]);
            }
        }
        let y = Tensor::from_vec(&[n, channels, h, w], out)?;
        self.push(y, Op::Concat(parts.to_vec()), parts, 0)
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let y = kernels::upsample_nearest2x(self.value(x))?;
        self.push(y, Op::Upsample(x), &[x], 0)
    }

    pub fn to_tokens(&mut self, x: Var) -> Result<Var> {
        let y = kernels::to_tokens(self.value(x))?;
        self.push(y, Op::ToTokens(x), &[x], 0)
    }

    pub fn from_tokens(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let y = kernels::from_tokens(self.value(x), h, w)?;
        self.push(y, Op::FromTokens(x), &[x], 0)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (y, probs, flops) = kernels::attention(self.value(q), self.value(k), self.value(v))?;
        self.push(y, Op::Attention { q, k, v, probs }, &[q, k, v], flops)
    }

    /// Gathers rows `ids` of a `[rows, dim]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, dim) = match t.shape()[..] {
            [r, d] => (r, d),
            _ => return config_err("embedding table must be 2-D"),
        };
        let mut out = Vec::with_capacity(ids.len() * dim);
        for &id in ids {
            if id >= rows {
                return config_err(format!("embedding id {id} out of range for {rows} rows"));
            }
            out.extend_from_slice(&t.data()[id * dim..(id + 1) * dim]);
        }
        let y = Tensor::from_vec(&[ids.len(), dim], out)?;
        self.push(y, Op::Embedding { table, ids: ids.to_vec() }, &[table], 0)
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        p.expect_same_shape(target)?;
        let mse = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| ((a - b) as f64).powi(2))
            .sum::<f64>()
            / p.numel() as f64;
        let y = Tensor::scalar(mse as f32);
        self.push(y, Op::MseLoss { pred, target: target.clone() }, &[pred], 0)
    }

    /// Batch mean of the per-item Euclidean norm of `pred − target`.
    pub fn l2_norm_mean(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        p.expect_same_shape(target)?;
        let n = p.shape()[0];
        let per = p.numel() / n.max(1);
        let norms: Vec<f32> = (0..n)
            .map(|b| {
                let r = b * per..(b + 1) * per;
                p.data()[r.clone()]
                    .iter()
                    .zip(&target.data()[r])
                    .map(|(a, t)| ((a - t) as f64).powi(2))
                    .sum::<f64>()
                    .sqrt() as f32
            })
            .collect();
        let mean = norms.iter().map(|&x| x as f64).sum::<f64>() / n.max(1) as f64;
        let y = Tensor::scalar(mean as f32);
        self.push(y, Op::L2NormMean { pred, target: target.clone(), norms }, &[pred], 0)
    }

    /// Backpropagates from a scalar output with unit seed.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let seed = Tensor::full(self.value(output).shape(), 1.0);
        self.backward_with(output, seed)
    }

    /// Backpropagates an arbitrary upstream gradient `seed` from `output`.
    pub fn backward_with(&self, output: Var, seed: Tensor) -> Result<Gradients> {
        self.value(output).expect_same_shape(&seed)?;
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[output.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[output.0] = Some(seed);
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let dy = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let mut contributions = self.local_grads(&node.op, &dy)?;
            if self.corrupt == Some(node.op.name()) {
                for (_, g) in contributions.iter_mut() {
                    *g = g.scale(-1.0);
                }
            }
            for (var, g) in contributions {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                g.ensure_finite("gradient")?;
                match &mut grads[var.0] {
                    Some(acc) => acc.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                grads[i] = Some(dy);
            }
        }
        Ok(Gradients { grads })
    }

    fn local_grads(&self, op: &Op, dy: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        Ok(match op {
            Op::Leaf | Op::Param(_) => Vec::new(),
            Op::Conv2d { x, w, b, stride, pad } => {
                let (dx, dw, db) = kernels::conv2d_backward(self.value(*x), self.value(*w), dy, *stride, *pad)?;
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::ConvT2d { x, w, b, stride, pad } => {
                let (dx, dw, db) =
                    kernels::conv_transpose2d_backward(self.value(*x), self.value(*w), dy, *stride, *pad)?;
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::Linear { x, w, b } => {
                let (dx, dw, db) = kernels::linear_backward(self.value(*x), self.value(*w), dy)?;
                vec![(*x, dx), (*w, dw), (*b, db)]
            }
            Op::GroupNorm { x, gamma, beta, groups, saved } => {
                let (dx, dg, db) =
                    kernels::group_norm_backward(self.value(*x), *groups, self.value(*gamma), saved, dy)?;
                vec![(*x, dx), (*gamma, dg), (*beta, db)]
            }
            Op::Silu(x) => {
                let dx = self.value(*x).zip_map(dy, |v, g| g * kernels::silu_grad(v))?;
                vec![(*x, dx)]
            }
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Sub(a, b) => vec![(*a, dy.clone()), (*b, dy.scale(-1.0))],
            Op::Scale(x, s) => vec![(*x, dy.scale(*s))],
            Op::AddChannel { x, v } => {
                let (n, c, h, w) = dy.dims4()?;
                let dv: Vec<f32> = dy.data().chunks(h * w).map(|p| p.iter().sum()).collect();
                vec![(*x, dy.clone()), (*v, Tensor::from_vec(&[n, c], dv)?)]
            }
            Op::Concat(parts) => {
                let (n, _, h, w) = dy.dims4()?;
                let plane = h * w;
                let total_c = dy.shape()[1];
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let pc = self.value(*p).shape()[1];
                    let mut g = Vec::with_capacity(n * pc * plane);
                    for b in 0..n {
                        let start = (b * total_c + offset) * plane;
                        g.extend_from_slice(&dy.data()[start..start + pc * plane]);
                    }
                    out.push((*p, Tensor::from_vec(&[n, pc, h, w], g)?));
                    offset += pc;
                }
                out
            }
            Op::Upsample(x) => vec![(*x, kernels::upsample_nearest2x_backward(dy)?)],
            Op::ToTokens(x) => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                vec![(*x, kernels::from_tokens(dy, h, w)?)]
            }
            Op::FromTokens(x) => vec![(*x, kernels::to_tokens(dy)?)],
            Op::Attention { q, k, v, probs } => {
                let (dq, dk, dv) =
                    kernels::attention_backward(self.value(*q), self.value(*k), self.value(*v), probs, dy)?;
                vec![(*q, dq), (*k, dk), (*v, dv)]
            }
            Op::Embedding { table, ids } => {
                let t = self.value(*table);
                let dim = t.shape()[1];
                let mut g = Tensor::zeros(t.shape());
                for (row, &id) in ids.iter().enumerate() {
                    let src = &dy.data()[row * dim..(row + 1) * dim];
                    g.data_mut()[id * dim..(id + 1) * dim].iter_mut().zip(src).for_each(|(a, b)| *a += b);
                }
                vec![(*table, g)]
            }
            Op::MseLoss { pred, target } => {
                let p = self.value(*pred);
                let k = 2.0 * dy.data()[0] / p.numel() as f32;
                vec![(*pred, p.zip_map(target, |a, b| k * (a - b))?)]
            }
            Op::L2NormMean { pred, target, norms } => {
                let p = self.value(*pred);
                let n = p.shape()[0];
                let per = p.numel() / n.max(1);
                let mut g = p.sub(target)?;
                for (b, chunk) in g.data_mut().chunks_mut(per).enumerate() {
                    // the norm is not differentiable at zero; use the zero subgradient there
                    let k = if norms[b] > 0.0 { dy.data()[0] / (n as f32 * norms[b]) } else { 0.0 };
                    chunk.iter_mut().for_each(|e| *e *= k);
                }
                vec![(*pred, g)]
            }
        })
    }
}

fn op_is_attention(op: &Op) -> bool {
    matches!(op, Op::Attention { .. })
}

/// Runs `f` with ops billed to `component`.
pub fn in_component<T>(tape: &mut Tape, component: Component, f: impl FnOnce(&mut Tape) -> Result<T>) -> Result<T> {
    let prev = tape.set_component(component);
    let out = f(tape);
    tape.restore_component(prev);
    out
}

impl std::fmt::Display for Component {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Component::Embed => "embed",
            Component::HighIn => "high_in",
            Component::Low => "low",
            Component::HighOut => "high_out",
            Component::Adaptor => "adaptor",
            Component::Other => "other",
        };
        f.write_str(s)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn duplicate_parameter_names_are_rejected() {
        let mut store = ParamStore::new();
        store.add("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(matches!(store.add("a.w", Tensor::zeros(&[2])), Err(Error::Config(_))));
    }

    #[test]
    fn shared_inputs_accumulate_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::from_vec(&[2], vec![1.0, -2.0]).unwrap(), true);
        let y = tape.add(x, x).unwrap();
        let loss = tape.mse_loss(y, &Tensor::zeros(&[2])).unwrap();
        let g = tape.backward(loss).unwrap();
        // d/dx mean((2x)^2) = 4x
        assert_eq!(g.wrt(x).unwrap().data(), &[4.0, -8.0]);
    }

    #[test]
    fn frozen_store_yields_no_gradients() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[3], 2.0)).unwrap();
        store.set_frozen(true);
        let mut tape = Tape::new();
        let w = tape.param(&store, id);
        let loss = tape.mse_loss(w, &Tensor::zeros(&[3])).unwrap();
        let grads = tape.backward(loss).unwrap();
        assert!(grads.wrt(w).is_none());
    }

    #[test]
    fn counter_bills_active_component() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[4]));
        in_component(&mut tape, Component::Low, |t| t.add(a, a)).unwrap();
        tape.add(a, a).unwrap();
        assert_eq!(tape.counter().flops(Component::Low), 4);
        assert_eq!(tape.counter().flops(Component::Other), 4);
        assert_eq!(tape.counter().ops(Component::Low), 1);
    }
}
