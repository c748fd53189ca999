//! Lightweight substitutes for the low-resolution core.
//!
//! Every variant maps `(r_in, r_out_prev, t_emb, c_emb)` to a tensor shaped
//! like `r_in`. Learned variants end in a zero-initialized layer and add a
//! residual, so a freshly built adaptor reproduces its residual source.

use serde::{Deserialize, Serialize};

use crate::cost::layers::LayerDesc;
use crate::error::{config_err, Error, Result};
use crate::numerics::layers::{Conv2d, ConvTranspose2d, GroupNorm, Init, Linear, ResBlock};
use crate::numerics::tape::in_component;
use crate::numerics::{rng, Component, ParamStore, Tape, Var};

const GROUPS: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptorKind {
    Identity,
    Resnet,
    UnetLight,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptorInput {
    RIn,
    ROutPrev,
    TEmb,
    CEmb,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Residual {
    ROutPrev,
    RIn,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptorSpec {
    pub kind: AdaptorKind,
    /// Width of the resnet variant.
    pub channels: usize,
    pub inputs: Vec<AdaptorInput>,
    /// Residual source; `r_out_prev` falls back to `r_in` when the previous
    /// output is not among the inputs.
    pub residual: Residual,
    /// Base width `C` and middle depth `N` of the unet_light variant.
    pub light_channels: usize,
    pub light_depth: usize,
}

impl Default for AdaptorSpec {
    fn default() -> Self {
        Self {
            kind: AdaptorKind::Resnet,
            channels: 64,
            inputs: vec![AdaptorInput::RIn, AdaptorInput::ROutPrev, AdaptorInput::TEmb, AdaptorInput::CEmb],
            residual: Residual::ROutPrev,
            light_channels: 24,
            light_depth: 2,
        }
    }
}

impl AdaptorSpec {
    pub fn identity() -> Self {
        Self { kind: AdaptorKind::Identity, ..Self::default() }
    }

    pub fn uses(&self, input: AdaptorInput) -> bool {
        self.inputs.contains(&input)
    }

    /// Whether the adaptor reads the previous step's `r_out`.
    pub fn needs_previous(&self) -> bool {
        self.kind == AdaptorKind::Identity || self.uses(AdaptorInput::ROutPrev)
    }

    fn residual_source(&self) -> Residual {
        if self.residual == Residual::ROutPrev && self.uses(AdaptorInput::ROutPrev) {
            Residual::ROutPrev
        } else {
            Residual::RIn
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind == AdaptorKind::Identity {
            return Ok(());
        }
        if !self.uses(AdaptorInput::RIn) && !self.uses(AdaptorInput::ROutPrev) {
            return config_err("a learned adaptor needs r_in or r_out_prev among its inputs");
        }
        let width = match self.kind {
            AdaptorKind::Resnet => self.channels,
            _ => self.light_channels,
        };
        if width == 0 || width % GROUPS.min(width) != 0 {
            return config_err(format!("adaptor width {width} must be a positive multiple of {GROUPS}"));
        }
        Ok(())
    }
}

/// Conditioning vectors available to an adaptor call.
#[derive(Clone, Copy, Debug, Default)]
pub struct AdaptorInputs {
    pub r_in: Option<Var>,
    pub r_out_prev: Option<Var>,
    pub t_emb: Option<Var>,
    pub c_emb: Option<Var>,
}

#[derive(Clone, Debug)]
struct ResnetNet {
    down: Conv2d,
    cond: Option<Linear>,
    blocks: [ResBlock; 2],
    up: ConvTranspose2d,
}

#[derive(Clone, Debug)]
struct LightNet {
    conv_in: Conv2d,
    cond: Option<Linear>,
    res0: ResBlock,
    down0: Conv2d,
    res1: ResBlock,
    down1: Conv2d,
    middle: Vec<ResBlock>,
    up1: Conv2d,
    dec1: ResBlock,
    up0: Conv2d,
    dec0: ResBlock,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

#[derive(Clone, Debug)]
enum Net {
    Identity,
    Resnet(ResnetNet),
    Light(LightNet),
}

#[derive(Clone, Debug)]
pub struct Adaptor {
    pub spec: AdaptorSpec,
    pub params: ParamStore,
    /// `[C, H, W]` of the representation it substitutes.
    pub rep_shape: [usize; 3],
    pub emb_dim: usize,
    net: Net,
}

impl Adaptor {
    pub fn new(spec: AdaptorSpec, rep_shape: [usize; 3], emb_dim: usize, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let r = &mut rng(seed, 2);
        let [c, h, w] = rep_shape;
        let c_in = c * (spec.uses(AdaptorInput::RIn) as usize + spec.uses(AdaptorInput::ROutPrev) as usize);
        let t_dim = spec.uses(AdaptorInput::TEmb).then_some(emb_dim);
        let net = match spec.kind {
            AdaptorKind::Identity => Net::Identity,
            AdaptorKind::Resnet => {
                if h % 2 != 0 || w % 2 != 0 {
                    return config_err(format!("resnet adaptor needs even extents, got {h}×{w}"));
                }
                let a = spec.channels;
                let down = Conv2d::new(&mut store, "adaptor.down", c_in, a, 3, 2, 1, Init::FanIn, r)?;
                let cond = match spec.uses(AdaptorInput::CEmb) {
                    true => Some(Linear::new(&mut store, "adaptor.cond", emb_dim, a, Init::FanIn, r)?),
                    false => None,
                };
                let blocks = [
                    ResBlock::new(&mut store, "adaptor.res0", a, a, t_dim, GROUPS, r)?,
                    ResBlock::new(&mut store, "adaptor.res1", a, a, t_dim, GROUPS, r)?,
                ];
                let up = ConvTranspose2d::new(&mut store, "adaptor.up", a, c, 4, 2, 1, Init::Zero, r)?;
                Net::Resnet(ResnetNet { down, cond, blocks, up })
            }
            AdaptorKind::UnetLight => {
                if h % 4 != 0 || w % 4 != 0 {
                    return config_err(format!("unet_light adaptor needs extents divisible by 4, got {h}×{w}"));
                }
                let b = spec.light_channels;
                let s = &mut store;
                let res = |s: &mut ParamStore, name: &str, i: usize, o: usize, r: &mut _| {
                    ResBlock::new(s, &format!("adaptor.{name}"), i, o, t_dim, GROUPS, r)
                };
                let conv_in = Conv2d::new(s, "adaptor.conv_in", c_in, b, 3, 1, 1, Init::FanIn, r)?;
                let cond = match spec.uses(AdaptorInput::CEmb) {
                    true => Some(Linear::new(s, "adaptor.cond", emb_dim, b, Init::FanIn, r)?),
                    false => None,
                };
                let res0 = res(s, "res0", b, b, r)?;
                let down0 = Conv2d::new(s, "adaptor.down0", b, 2 * b, 3, 2, 1, Init::FanIn, r)?;
                let res1 = res(s, "res1", 2 * b, 2 * b, r)?;
                let down1 = Conv2d::new(s, "adaptor.down1", 2 * b, 2 * b, 3, 2, 1, Init::FanIn, r)?;
                let middle = (0..spec.light_depth)
                    .map(|i| res(s, &format!("mid{i}"), 2 * b, 2 * b, r))
                    .collect::<Result<Vec<_>>>()?;
                let up1 = Conv2d::new(s, "adaptor.up1", 2 * b, 2 * b, 3, 1, 1, Init::FanIn, r)?;
                let dec1 = res(s, "dec1", 4 * b, 2 * b, r)?;
                let up0 = Conv2d::new(s, "adaptor.up0", 2 * b, b, 3, 1, 1, Init::FanIn, r)?;
                let dec0 = res(s, "dec0", 2 * b, b, r)?;
                let out_norm = GroupNorm::new(s, "adaptor.out.norm", b, GROUPS)?;
                let out_conv = Conv2d::new(s, "adaptor.out.conv", b, c, 3, 1, 1, Init::Zero, r)?;
                Net::Light(LightNet {
                    conv_in,
                    cond,
                    res0,
                    down0,
                    res1,
                    down1,
                    middle,
                    up1,
                    dec1,
                    up0,
                    dec0,
                    out_norm,
                    out_conv,
                })
            }
        };
        Ok(Self { spec, params: store, rep_shape, emb_dim, net })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Produces `r̂_out`. Inputs not listed in the spec are ignored.
    pub fn forward(&self, tape: &mut Tape, inputs: AdaptorInputs) -> Result<Var> {
        let spec = &self.spec;
        if spec.needs_previous() && inputs.r_out_prev.is_none() {
            return Err(Error::Protocol("adaptor invoked without a cached r_out from the previous step".into()));
        }
        let r_in = match inputs.r_in {
            Some(v) => v,
            None if spec.kind == AdaptorKind::Identity => return Ok(inputs.r_out_prev.unwrap()),
            None => return config_err("adaptor call is missing r_in"),
        };
        let want = self.rep_shape;
        if tape.value(r_in).shape()[1..] != want {
            return config_err(format!("r_in shape {:?} does not match adaptor {want:?}", tape.value(r_in).shape()));
        }
        if let Some(prev) = inputs.r_out_prev {
            tape.value(r_in).expect_same_shape(tape.value(prev))?;
        }
        if let Net::Identity = self.net {
            return Ok(inputs.r_out_prev.unwrap());
        }
        let store = &self.params;
        in_component(tape, Component::Adaptor, |tape| {
            let mut parts = Vec::new();
            if spec.uses(AdaptorInput::RIn) {
                parts.push(r_in);
            }
            if spec.uses(AdaptorInput::ROutPrev) {
                parts.push(inputs.r_out_prev.unwrap());
            }
            let x = if parts.len() == 1 { parts[0] } else { tape.concat(&parts)? };
            let t_act = match (spec.uses(AdaptorInput::TEmb), inputs.t_emb) {
                (true, Some(t)) => Some(tape.silu(t)?),
                (true, None) => return config_err("adaptor expects a timestep embedding"),
                _ => None,
            };
            let c_emb = match (spec.uses(AdaptorInput::CEmb), inputs.c_emb) {
                (true, Some(c)) => Some(c),
                (true, None) => return config_err("adaptor expects a condition embedding"),
                _ => None,
            };
            let add_cond = |tape: &mut Tape, h: Var, proj: &Option<Linear>| -> Result<Var> {
                match (proj, c_emb) {
                    (Some(p), Some(c)) => {
                        let v = p.forward(tape, store, c)?;
                        tape.add_channel(h, v)
                    }
                    _ => Ok(h),
                }
            };
            let delta = match &self.net {
                Net::Identity => unreachable!(),
                Net::Resnet(n) => {
                    let mut h = n.down.forward(tape, store, x)?;
                    h = add_cond(tape, h, &n.cond)?;
                    for b in &n.blocks {
                        h = b.forward(tape, store, h, t_act)?;
                    }
                    n.up.forward(tape, store, h)?
                }
                Net::Light(n) => {
                    let mut h = n.conv_in.forward(tape, store, x)?;
                    h = add_cond(tape, h, &n.cond)?;
                    let s0 = n.res0.forward(tape, store, h, t_act)?;
                    h = n.down0.forward(tape, store, s0)?;
                    let s1 = n.res1.forward(tape, store, h, t_act)?;
                    h = n.down1.forward(tape, store, s1)?;
                    for b in &n.middle {
                        h = b.forward(tape, store, h, t_act)?;
                    }
                    h = tape.upsample2x(h)?;
                    h = n.up1.forward(tape, store, h)?;
                    h = tape.concat(&[h, s1])?;
                    h = n.dec1.forward(tape, store, h, t_act)?;
                    h = tape.upsample2x(h)?;
                    h = n.up0.forward(tape, store, h)?;
                    h = tape.concat(&[h, s0])?;
                    h = n.dec0.forward(tape, store, h, t_act)?;
                    h = n.out_norm.forward(tape, store, h)?;
                    h = tape.silu(h)?;
                    n.out_conv.forward(tape, store, h)?
                }
            };
            let base = match spec.residual_source() {
                Residual::ROutPrev => inputs.r_out_prev.unwrap(),
                Residual::RIn => r_in,
            };
            tape.add(delta, base)
        })
    }

    /// Per-sample layer plan.
    pub fn plan(&self) -> Result<Vec<LayerDesc>> {
        let [c, h, w] = self.rep_shape;
        let mut plan = Vec::new();
        let t_emb = self.spec.uses(AdaptorInput::TEmb);
        if t_emb && !matches!(self.net, Net::Identity) {
            plan.push(LayerDesc::Silu { numel: self.emb_dim });
        }
        let cond = |plan: &mut Vec<LayerDesc>, proj: &Option<Linear>, numel: usize| {
            if let Some(p) = proj {
                p.describe(plan);
                plan.push(LayerDesc::Add { numel });
            }
        };
        match &self.net {
            Net::Identity => return Ok(plan),
            Net::Resnet(n) => {
                let (hh, ww) = n.down.describe(h, w, &mut plan)?;
                cond(&mut plan, &n.cond, n.down.c_out * hh * ww);
                for b in &n.blocks {
                    b.describe(hh, ww, t_emb, &mut plan)?;
                }
                n.up.describe(hh, ww, &mut plan)?;
            }
            Net::Light(n) => {
                n.conv_in.describe(h, w, &mut plan)?;
                cond(&mut plan, &n.cond, n.conv_in.c_out * h * w);
                n.res0.describe(h, w, t_emb, &mut plan)?;
                let (h1, w1) = n.down0.describe(h, w, &mut plan)?;
                n.res1.describe(h1, w1, t_emb, &mut plan)?;
                let (h2, w2) = n.down1.describe(h1, w1, &mut plan)?;
                for b in &n.middle {
                    b.describe(h2, w2, t_emb, &mut plan)?;
                }
                n.up1.describe(h1, w1, &mut plan)?;
                n.dec1.describe(h1, w1, t_emb, &mut plan)?;
                n.up0.describe(h, w, &mut plan)?;
                n.dec0.describe(h, w, t_emb, &mut plan)?;
                n.out_norm.describe(h, w, &mut plan);
                plan.push(LayerDesc::Silu { numel: n.out_norm.channels * h * w });
                n.out_conv.describe(h, w, &mut plan)?;
            }
        }
        plan.push(LayerDesc::Add { numel: c * h * w });
        Ok(plan)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn run(a: &Adaptor, r_in: &Tensor, prev: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::inference();
        let n = r_in.shape()[0];
        let inputs = AdaptorInputs {
            r_in: Some(tape.constant(r_in.clone())),
            r_out_prev: prev.map(|p| tape.constant(p.clone())),
            t_emb: Some(tape.constant(Tensor::randn(&[n, a.emb_dim], &mut rng(5, 0)))),
            c_emb: Some(tape.constant(Tensor::randn(&[n, a.emb_dim], &mut rng(6, 0)))),
        };
        let out = a.forward(&mut tape, inputs)?;
        Ok(tape.take_value(out))
    }

    #[test]
    fn identity_returns_previous_output() {
        let a = Adaptor::new(AdaptorSpec::identity(), [8, 4, 4], 16, 0).unwrap();
        assert_eq!(a.param_count(), 0);
        let r_in = Tensor::randn(&[2, 8, 4, 4], &mut rng(1, 0));
        let prev = Tensor::randn(&[2, 8, 4, 4], &mut rng(2, 0));
        assert_eq!(run(&a, &r_in, Some(&prev)).unwrap(), prev);
    }

    #[test]
    fn fresh_learned_adaptors_match_identity() {
        for kind in [AdaptorKind::Resnet, AdaptorKind::UnetLight] {
            let spec = AdaptorSpec { kind, channels: 16, light_channels: 8, ..AdaptorSpec::default() };
            let a = Adaptor::new(spec, [8, 8, 8], 16, 3).unwrap();
            assert!(a.param_count() > 0);
            let r_in = Tensor::randn(&[2, 8, 8, 8], &mut rng(1, 0));
            let prev = Tensor::randn(&[2, 8, 8, 8], &mut rng(2, 0));
            assert_eq!(run(&a, &r_in, Some(&prev)).unwrap(), prev, "{kind:?}");
        }
    }

    #[test]
    fn missing_previous_output_is_a_protocol_error() {
        let a = Adaptor::new(AdaptorSpec::default(), [8, 4, 4], 16, 0).unwrap();
        let r_in = Tensor::randn(&[1, 8, 4, 4], &mut rng(1, 0));
        assert!(matches!(run(&a, &r_in, None), Err(Error::Protocol(_))));
    }
}
