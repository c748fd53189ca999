//! Parameterized building blocks shared by the UNet and the adaptors.
//!
//! Each block registers its tensors in a [`ParamStore`] under a dotted
//! name prefix, runs on a [`Tape`], and can describe itself as a list of
//! [`LayerDesc`] for the analytic cost model.

use rand::Rng;

use crate::cost::layers::LayerDesc;
use crate::error::{config_err, Result};
use crate::numerics::kernels::{conv_out_extent, conv_transpose_out_extent};
use crate::numerics::tape::{ParamId, ParamStore, Tape, Var};
use crate::numerics::Tensor;

/// Weight initialization scheme.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Uniform with variance 1/fan_in; zero bias.
    FanIn,
    Zero,
}

fn init_weight<R: Rng + ?Sized>(shape: &[usize], fan_in: usize, init: Init, rng: &mut R) -> Tensor {
    match init {
        Init::FanIn => Tensor::uniform(shape, (3.0 / fan_in as f32).sqrt(), rng),
        Init::Zero => Tensor::zeros(shape),
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), init_weight(&[c_out, c_in, k, k], c_in * k * k, init, rng))?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self { w, b, c_in, c_out, k, stride, pad })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, b, self.stride, self.pad)
    }

    /// Appends this layer's descriptor; returns the output spatial extent.
    pub fn describe(&self, h: usize, w: usize, plan: &mut Vec<LayerDesc>) -> Result<(usize, usize)> {
        plan.push(LayerDesc::Conv2d {
            c_in: self.c_in,
            c_out: self.c_out,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
            h,
            w,
        });
        Ok((conv_out_extent(h, self.k, self.stride, self.pad)?, conv_out_extent(w, self.k, self.stride, self.pad)?))
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    w: ParamId,
    b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), init_weight(&[c_in, c_out, k, k], c_in * k * k, init, rng))?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[c_out]))?;
        Ok(Self { w, b, c_in, c_out, k, stride, pad })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv_transpose2d(x, w, b, self.stride, self.pad)
    }

    pub fn describe(&self, h: usize, w: usize, plan: &mut Vec<LayerDesc>) -> Result<(usize, usize)> {
        plan.push(LayerDesc::ConvTranspose2d {
            c_in: self.c_in,
            c_out: self.c_out,
            k: self.k,
            stride: self.stride,
            pad: self.pad,
            h,
            w,
        });
        Ok((
            conv_transpose_out_extent(h, self.k, self.stride, self.pad)?,
            conv_transpose_out_extent(w, self.k, self.stride, self.pad)?,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
    pub f_in: usize,
    pub f_out: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        f_in: usize,
        f_out: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let w = store.add(format!("{name}.weight"), init_weight(&[f_out, f_in], f_in, init, rng))?;
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[f_out]))?;
        Ok(Self { w, b, f_in, f_out })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.linear(x, w, b)
    }

    pub fn describe(&self, plan: &mut Vec<LayerDesc>) {
        plan.push(LayerDesc::Linear { f_in: self.f_in, f_out: self.f_out });
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    pub groups: usize,
    pub channels: usize,
}

impl GroupNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, groups: usize) -> Result<Self> {
        let groups = groups.min(channels);
        if groups == 0 || channels % groups != 0 {
            return config_err(format!("{channels} channels cannot be split into {groups} norm groups"));
        }
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0))?;
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[channels]))?;
        Ok(Self { gamma, beta, groups, channels })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.group_norm(x, self.groups, g, b)
    }

    pub fn describe(&self, h: usize, w: usize, plan: &mut Vec<LayerDesc>) {
        plan.push(LayerDesc::GroupNorm { numel: self.channels * h * w });
    }
}

/// GroupNorm → SiLU → conv → (+ embedding projection) → GroupNorm → SiLU →
/// conv, plus a residual path (1×1 conv when channel counts differ).
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: GroupNorm,
    conv1: Conv2d,
    emb_proj: Option<Linear>,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
    pub c_in: usize,
    pub c_out: usize,
}

impl ResBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        emb_dim: Option<usize>,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let norm1 = GroupNorm::new(store, &format!("{name}.norm1"), c_in, groups)?;
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, 1, 1, Init::FanIn, rng)?;
        let emb_proj = match emb_dim {
            Some(e) => Some(Linear::new(store, &format!("{name}.emb_proj"), e, c_out, Init::FanIn, rng)?),
            None => None,
        };
        let norm2 = GroupNorm::new(store, &format!("{name}.norm2"), c_out, groups)?;
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, 1, Init::FanIn, rng)?;
        let skip = if c_in != c_out {
            Some(Conv2d::new(store, &format!("{name}.skip"), c_in, c_out, 1, 1, 0, Init::FanIn, rng)?)
        } else {
            None
        };
        Ok(Self { norm1, conv1, emb_proj, norm2, conv2, skip, c_in, c_out })
    }

    /// `emb` is the already-activated conditioning vector `[N, E]`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, emb: Option<Var>) -> Result<Var> {
        let h = self.norm1.forward(tape, store, x)?;
        let h = tape.silu(h)?;
        let mut h = self.conv1.forward(tape, store, h)?;
        if let (Some(proj), Some(e)) = (&self.emb_proj, emb) {
            let e = proj.forward(tape, store, e)?;
            h = tape.add_channel(h, e)?;
        }
        let h = self.norm2.forward(tape, store, h)?;
        let h = tape.silu(h)?;
        let h = self.conv2.forward(tape, store, h)?;
        let residual = match &self.skip {
            Some(s) => s.forward(tape, store, x)?,
            None => x,
        };
        tape.add(h, residual)
    }

    pub fn describe(&self, h: usize, w: usize, with_emb: bool, plan: &mut Vec<LayerDesc>) -> Result<()> {
        self.norm1.describe(h, w, plan);
        plan.push(LayerDesc::Silu { numel: self.c_in * h * w });
        self.conv1.describe(h, w, plan)?;
        let out = self.c_out * h * w;
        if let (Some(proj), true) = (&self.emb_proj, with_emb) {
            proj.describe(plan);
            plan.push(LayerDesc::Add { numel: out });
        }
        self.norm2.describe(h, w, plan);
        plan.push(LayerDesc::Silu { numel: out });
        self.conv2.describe(h, w, plan)?;
        if let Some(s) = &self.skip {
            s.describe(h, w, plan)?;
        }
        plan.push(LayerDesc::Add { numel: out });
        Ok(())
    }
}

/// Spatial self-attention with a residual connection.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    norm: GroupNorm,
    q: Conv2d,
    k: Conv2d,
    v: Conv2d,
    proj: Conv2d,
    pub channels: usize,
}

impl AttentionBlock {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        groups: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let c = channels;
        Ok(Self {
            norm: GroupNorm::new(store, &format!("{name}.norm"), c, groups)?,
            q: Conv2d::new(store, &format!("{name}.q"), c, c, 1, 1, 0, Init::FanIn, rng)?,
            k: Conv2d::new(store, &format!("{name}.k"), c, c, 1, 1, 0, Init::FanIn, rng)?,
            v: Conv2d::new(store, &format!("{name}.v"), c, c, 1, 1, 0, Init::FanIn, rng)?,
            proj: Conv2d::new(store, &format!("{name}.proj"), c, c, 1, 1, 0, Init::FanIn, rng)?,
            channels,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let (_, _, h, w) = tape.value(x).dims4()?;
        let n = self.norm.forward(tape, store, x)?;
        let q = self.q.forward(tape, store, n)?;
        let k = self.k.forward(tape, store, n)?;
        let v = self.v.forward(tape, store, n)?;
        let (q, k, v) = (tape.to_tokens(q)?, tape.to_tokens(k)?, tape.to_tokens(v)?);
        let o = tape.attention(q, k, v)?;
        let o = tape.from_tokens(o, h, w)?;
        let o = self.proj.forward(tape, store, o)?;
        tape.add(x, o)
    }

    pub fn describe(&self, h: usize, w: usize, plan: &mut Vec<LayerDesc>) -> Result<()> {
        self.norm.describe(h, w, plan);
        for conv in [&self.q, &self.k, &self.v] {
            conv.describe(h, w, plan)?;
        }
        plan.push(LayerDesc::Attention { tokens: h * w, dim: self.channels });
        self.proj.describe(h, w, plan)?;
        plan.push(LayerDesc::Add { numel: self.channels * h * w });
        Ok(())
    }
}
