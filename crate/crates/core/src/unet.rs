//! The split denoiser.
//!
//! Stage `s` runs at resolution `image / 2^s` with `channels[s]` features.
//! With cut-off `k`, the high-res input path covers the stem, encoder
//! stages `< k` and the downsample into stage `k`; the low-res core covers
//! encoder stages `≥ k`, the middle block and decoder stages `≥ k`; the
//! high-res output path is the upsample out of stage `k`, decoder stages
//! `< k` and the output head.

use serde::{Deserialize, Serialize};

use crate::cost::layers::LayerDesc;
use crate::error::{config_err, Result};
use crate::numerics::layers::{AttentionBlock, Conv2d, GroupNorm, Init, Linear, ResBlock};
use crate::numerics::tape::in_component;
use crate::numerics::{rng, Component, FlopCounter, ParamId, ParamStore, Tape, Tensor, Var};
use crate::sampler::cfg_combine;

pub const RES_BLOCKS: usize = 2;
const GROUPS: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum Conditioning {
    None,
    Class { classes: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct UNetConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub cutoff_stage: usize,
    /// Stages with self-attention; `None` means the lowest stage only.
    pub attention_at: Option<Vec<usize>>,
    /// Drops attention from stage 0.
    pub efficient: bool,
    pub conditioning: Conditioning,
    /// Width of the sinusoidal timestep features.
    pub time_dim: usize,
    /// Width of the time/class embedding fed to the ResBlocks.
    pub emb_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_size: 32,
            in_channels: 3,
            channels: vec![32, 64, 128],
            cutoff_stage: 1,
            attention_at: None,
            efficient: false,
            conditioning: Conditioning::Class { classes: 16 },
            time_dim: 64,
            emb_dim: 128,
        }
    }
}

impl UNetConfig {
    pub fn stages(&self) -> usize {
        self.channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.stages();
        if s < 2 {
            return config_err("the UNet needs at least two stages");
        }
        if self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return config_err(format!("channel list {:?} must be strictly increasing", self.channels));
        }
        if self.cutoff_stage == 0 || self.cutoff_stage >= s {
            return config_err(format!("cutoff_stage must be in 1..={}, got {}", s - 1, self.cutoff_stage));
        }
        if self.image_size == 0 || self.image_size % (1 << (s - 1)) != 0 {
            return config_err(format!("image size {} is not divisible by 2^{}", self.image_size, s - 1));
        }
        if self.in_channels == 0 || self.time_dim == 0 || self.time_dim % 2 != 0 || self.emb_dim == 0 {
            return config_err("in_channels, emb_dim and an even time_dim must be positive");
        }
        for &c in &self.channels {
            if c % GROUPS.min(c) != 0 {
                return config_err(format!("{c} channels are not divisible into {GROUPS} norm groups"));
            }
        }
        if let Some(at) = &self.attention_at {
            if let Some(bad) = at.iter().find(|&&a| a >= s) {
                return config_err(format!("attention stage {bad} does not exist"));
            }
        }
        if let Conditioning::Class { classes: 0 } = self.conditioning {
            return config_err("class conditioning needs at least one class");
        }
        Ok(())
    }

    pub fn has_attention(&self, stage: usize) -> bool {
        if self.efficient && stage == 0 {
            return false;
        }
        match &self.attention_at {
            Some(at) => at.contains(&stage),
            None => stage + 1 == self.stages(),
        }
    }

    pub fn extent(&self, stage: usize) -> usize {
        self.image_size >> stage
    }

    pub fn num_classes(&self) -> Option<usize> {
        match self.conditioning {
            Conditioning::None => None,
            Conditioning::Class { classes } => Some(classes),
        }
    }

    /// Class id used for unconditional passes.
    pub fn null_class(&self) -> usize {
        self.num_classes().unwrap_or(0)
    }

    /// `[C, H, W]` of `r_in` / `r_out`.
    pub fn rep_shape(&self) -> [usize; 3] {
        let k = self.cutoff_stage;
        [self.channels[k], self.extent(k), self.extent(k)]
    }

    pub fn skip_count(&self) -> usize {
        (RES_BLOCKS + 1) * self.cutoff_stage
    }
}

/// Named internal tensors a [`Probe`] can observe or replace.
/// Serialized in its display form (`r_in`, `r_out`, `mid`, `dec1`, `skip0`).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Site {
    RIn,
    ROut,
    /// Output of the middle block.
    Mid,
    /// Output of decoder stage `s`, before its upsample.
    Decoder(usize),
    /// High-res skip tensor `j`, in production order.
    Skip(usize),
}

impl std::fmt::Display for Site {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Site::RIn => f.write_str("r_in"),
            Site::ROut => f.write_str("r_out"),
            Site::Mid => f.write_str("mid"),
            Site::Decoder(s) => write!(f, "dec{s}"),
            Site::Skip(j) => write!(f, "skip{j}"),
        }
    }
}

impl From<Site> for String {
    fn from(s: Site) -> String {
        s.to_string()
    }
}

impl TryFrom<String> for Site {
    type Error = crate::Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl std::str::FromStr for Site {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |rest: &str| {
            rest.parse::<usize>().map_err(|_| crate::Error::Config(format!("unknown site `{s}`")))
        };
        match s {
            "r_in" => Ok(Site::RIn),
            "r_out" => Ok(Site::ROut),
            "mid" => Ok(Site::Mid),
            _ if s.starts_with("dec") => Ok(Site::Decoder(num(&s[3..])?)),
            _ if s.starts_with("skip") => Ok(Site::Skip(num(&s[4..])?)),
            _ => config_err(format!("unknown site `{s}`")),
        }
    }
}

/// Observes internal tensors during a forward pass and may replace them.
pub trait Probe {
    fn visit(&mut self, site: Site, value: &Tensor) -> Result<Option<Tensor>>;
}

pub struct NoProbe;

impl Probe for NoProbe {
    fn visit(&mut self, _: Site, _: &Tensor) -> Result<Option<Tensor>> {
        Ok(None)
    }
}

fn probe_at(tape: &mut Tape, probe: &mut dyn Probe, site: Site, v: Var) -> Result<Var> {
    match probe.visit(site, tape.value(v))? {
        Some(t) => {
            tape.value(v).expect_same_shape(&t)?;
            Ok(tape.constant(t))
        }
        None => Ok(v),
    }
}

/// Embedding vectors shared by every block of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Embeddings {
    pub t_emb: Var,
    pub c_emb: Option<Var>,
    /// `SiLU(t_emb + c_emb)`, the vector the ResBlocks project.
    pub act: Var,
}

#[derive(Clone, Debug)]
pub struct HighIn {
    pub r_in: Var,
    pub skips: Vec<Var>,
}

#[derive(Clone, Debug)]
struct Stage {
    res: Vec<ResBlock>,
    attn: Vec<Option<AttentionBlock>>,
}

impl Stage {
    fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        j: usize,
        h: Var,
        act: Var,
    ) -> Result<Var> {
        let mut h = self.res[j].forward(tape, store, h, Some(act))?;
        if let Some(a) = &self.attn[j] {
            h = a.forward(tape, store, h)?;
        }
        Ok(h)
    }

    fn describe(&self, j: usize, e: usize, plan: &mut Vec<LayerDesc>) -> Result<()> {
        self.res[j].describe(e, e, true, plan)?;
        if let Some(a) = &self.attn[j] {
            a.describe(e, e, plan)?;
        }
        Ok(())
    }
}

/// Parameters and structure of the split denoiser.
#[derive(Clone, Debug)]
pub struct SplitUNet {
    pub config: UNetConfig,
    pub params: ParamStore,
    time1: Linear,
    time2: Linear,
    class_table: Option<ParamId>,
    conv_in: Conv2d,
    enc: Vec<Stage>,
    downs: Vec<Conv2d>,
    mid1: ResBlock,
    mid_attn: Option<AttentionBlock>,
    mid2: ResBlock,
    dec: Vec<Stage>,
    ups: Vec<Conv2d>,
    out_norm: GroupNorm,
    out_conv: Conv2d,
}

/// Result of a tensor-level denoiser call.
#[derive(Clone, Debug)]
pub struct UNetOutput {
    pub eps: Tensor,
    pub r_in: Tensor,
    pub r_out: Tensor,
    pub flops: FlopCounter,
}

/// Sinusoidal timestep features `[sin(t·f_i), cos(t·f_i)]`.
pub fn timestep_features(t: &[usize], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = Vec::with_capacity(t.len() * dim);
    for &ti in t {
        let mut row = vec![0.0f32; dim];
        for i in 0..half {
            let freq = (-(10000f64).ln() * i as f64 / half as f64).exp();
            let arg = ti as f64 * freq;
            row[i] = arg.sin() as f32;
            row[half + i] = arg.cos() as f32;
        }
        data.extend(row);
    }
    Tensor::from_vec(&[t.len(), dim], data).expect("feature table size")
}

impl SplitUNet {
    pub fn new(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let r = &mut rng(seed, 1);
        let c = &config.channels;
        let s_count = config.stages();
        let e = config.emb_dim;
        let time1 = Linear::new(&mut store, "unet.time.fc1", config.time_dim, e, Init::FanIn, r)?;
        let time2 = Linear::new(&mut store, "unet.time.fc2", e, e, Init::FanIn, r)?;
        let class_table = match config.num_classes() {
            Some(k) => Some(store.add("unet.class_table", Tensor::randn(&[k + 1, e], r))?),
            None => None,
        };
        let conv_in = Conv2d::new(&mut store, "unet.conv_in", config.in_channels, c[0], 3, 1, 1, Init::FanIn, r)?;
        let attn_for = |store: &mut ParamStore, name: String, s: usize, r: &mut _| -> Result<Option<AttentionBlock>> {
            if config.has_attention(s) {
                Ok(Some(AttentionBlock::new(store, &name, c[s], GROUPS, r)?))
            } else {
                Ok(None)
            }
        };
        let mut enc = Vec::new();
        let mut downs = Vec::new();
        for s in 0..s_count {
            let mut res = Vec::new();
            let mut attn = Vec::new();
            for j in 0..RES_BLOCKS {
                res.push(ResBlock::new(&mut store, &format!("unet.enc{s}.res{j}"), c[s], c[s], Some(e), GROUPS, r)?);
                attn.push(attn_for(&mut store, format!("unet.enc{s}.attn{j}"), s, r)?);
            }
            enc.push(Stage { res, attn });
            if s + 1 < s_count {
                downs.push(Conv2d::new(&mut store, &format!("unet.down{s}"), c[s], c[s + 1], 3, 2, 1, Init::FanIn, r)?);
            }
        }
        let low = s_count - 1;
        let mid1 = ResBlock::new(&mut store, "unet.mid.res0", c[low], c[low], Some(e), GROUPS, r)?;
        let mid_attn = attn_for(&mut store, "unet.mid.attn".into(), low, r)?;
        let mid2 = ResBlock::new(&mut store, "unet.mid.res1", c[low], c[low], Some(e), GROUPS, r)?;
        let mut dec = Vec::new();
        let mut ups = Vec::new();
        for s in 0..s_count {
            let mut res = Vec::new();
            let mut attn = Vec::new();
            for j in 0..=RES_BLOCKS {
                res.push(ResBlock::new(&mut store, &format!("unet.dec{s}.res{j}"), 2 * c[s], c[s], Some(e), GROUPS, r)?);
                attn.push(attn_for(&mut store, format!("unet.dec{s}.attn{j}"), s, r)?);
            }
            dec.push(Stage { res, attn });
            if s > 0 {
                ups.push(Conv2d::new(&mut store, &format!("unet.up{s}"), c[s], c[s - 1], 3, 1, 1, Init::FanIn, r)?);
            }
        }
        let out_norm = GroupNorm::new(&mut store, "unet.out.norm", c[0], GROUPS)?;
        let out_conv = Conv2d::new(&mut store, "unet.out.conv", c[0], config.in_channels, 3, 1, 1, Init::Zero, r)?;
        Ok(Self {
            config,
            params: store,
            time1,
            time2,
            class_table,
            conv_in,
            enc,
            downs,
            mid1,
            mid_attn,
            mid2,
            dec,
            ups,
            out_norm,
            out_conv,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn check_input(&self, tape: &Tape, x: Var, batch: usize) -> Result<()> {
        let cfg = &self.config;
        let want = [batch, cfg.in_channels, cfg.image_size, cfg.image_size];
        if tape.value(x).shape() != want {
            return config_err(format!("latent shape {:?}, expected {want:?}", tape.value(x).shape()));
        }
        Ok(())
    }

    /// Time and class embeddings for a batch. Class id `num_classes` is the
    /// null (unconditional) row.
    pub fn embed(&self, tape: &mut Tape, t: &[usize], classes: &[usize]) -> Result<Embeddings> {
        let store = &self.params;
        in_component(tape, Component::Embed, |tape| {
            let feats = tape.constant(timestep_features(t, self.config.time_dim));
            let h = self.time1.forward(tape, store, feats)?;
            let h = tape.silu(h)?;
            let t_emb = self.time2.forward(tape, store, h)?;
            let (c_emb, sum) = match self.class_table {
                Some(id) => {
                    if classes.len() != t.len() {
                        return config_err(format!("{} timesteps but {} class ids", t.len(), classes.len()));
                    }
                    let table = tape.param(store, id);
                    let c = tape.embedding(table, classes)?;
                    let sum = tape.add(t_emb, c)?;
                    (Some(c), sum)
                }
                None => (None, t_emb),
            };
            let act = tape.silu(sum)?;
            Ok(Embeddings { t_emb, c_emb, act })
        })
    }

    fn encoder_stage(
        &self,
        tape: &mut Tape,
        s: usize,
        mut h: Var,
        act: Var,
        skips: &mut Vec<Var>,
    ) -> Result<Var> {
        skips.push(h);
        for j in 0..RES_BLOCKS {
            h = self.enc[s].forward(tape, &self.params, j, h, act)?;
            skips.push(h);
        }
        if s + 1 < self.config.stages() {
            h = self.downs[s].forward(tape, &self.params, h)?;
        }
        Ok(h)
    }

    fn decoder_stage(
        &self,
        tape: &mut Tape,
        s: usize,
        mut h: Var,
        act: Var,
        skips: &mut Vec<Var>,
        probe: &mut dyn Probe,
    ) -> Result<Var> {
        for j in 0..=RES_BLOCKS {
            let skip = match skips.pop() {
                Some(v) => v,
                None => return config_err(format!("decoder stage {s} ran out of skip tensors")),
            };
            let cat = tape.concat(&[h, skip])?;
            h = self.dec[s].forward(tape, &self.params, j, cat, act)?;
        }
        probe_at(tape, probe, Site::Decoder(s), h)
    }

    fn upsample(&self, tape: &mut Tape, s: usize, h: Var) -> Result<Var> {
        let u = tape.upsample2x(h)?;
        self.ups[s - 1].forward(tape, &self.params, u)
    }

    fn middle(&self, tape: &mut Tape, h: Var, act: Var, probe: &mut dyn Probe) -> Result<Var> {
        let mut h = self.mid1.forward(tape, &self.params, h, Some(act))?;
        if let Some(a) = &self.mid_attn {
            h = a.forward(tape, &self.params, h)?;
        }
        let h = self.mid2.forward(tape, &self.params, h, Some(act))?;
        probe_at(tape, probe, Site::Mid, h)
    }

    fn head(&self, tape: &mut Tape, h: Var) -> Result<Var> {
        let h = self.out_norm.forward(tape, &self.params, h)?;
        let h = tape.silu(h)?;
        self.out_conv.forward(tape, &self.params, h)
    }

    /// ε_H^in: stem and encoder stages below the cut-off.
    pub fn encode_high(&self, tape: &mut Tape, x: Var, emb: &Embeddings, probe: &mut dyn Probe) -> Result<HighIn> {
        let batch = tape.value(emb.act).shape()[0];
        self.check_input(tape, x, batch)?;
        in_component(tape, Component::HighIn, |tape| {
            let mut h = self.conv_in.forward(tape, &self.params, x)?;
            let mut skips = Vec::with_capacity(self.config.skip_count());
            for s in 0..self.config.cutoff_stage {
                h = self.encoder_stage(tape, s, h, emb.act, &mut skips)?;
            }
            for (j, skip) in skips.iter_mut().enumerate() {
                *skip = probe_at(tape, probe, Site::Skip(j), *skip)?;
            }
            let r_in = probe_at(tape, probe, Site::RIn, h)?;
            Ok(HighIn { r_in, skips })
        })
    }

    /// ε_L: maps `r_in` to `r_out` of the same shape.
    pub fn run_low(&self, tape: &mut Tape, r_in: Var, emb: &Embeddings, probe: &mut dyn Probe) -> Result<Var> {
        let want = self.config.rep_shape();
        if tape.value(r_in).shape()[1..] != want {
            return config_err(format!("r_in shape {:?} does not match {want:?}", tape.value(r_in).shape()));
        }
        in_component(tape, Component::Low, |tape| {
            let k = self.config.cutoff_stage;
            let top = self.config.stages() - 1;
            let mut skips = Vec::new();
            let mut h = r_in;
            for s in k..=top {
                h = self.encoder_stage(tape, s, h, emb.act, &mut skips)?;
            }
            h = self.middle(tape, h, emb.act, probe)?;
            for s in (k..=top).rev() {
                if s < top {
                    h = self.upsample(tape, s + 1, h)?;
                }
                h = self.decoder_stage(tape, s, h, emb.act, &mut skips, probe)?;
            }
            probe_at(tape, probe, Site::ROut, h)
        })
    }

    /// ε_H^out: upsample out of the cut-off stage, high-res decoder stages
    /// and the output head.
    pub fn decode_high(
        &self,
        tape: &mut Tape,
        r_out: Var,
        skips: &[Var],
        emb: &Embeddings,
        probe: &mut dyn Probe,
    ) -> Result<Var> {
        if skips.len() != self.config.skip_count() {
            return config_err(format!("expected {} skip tensors, got {}", self.config.skip_count(), skips.len()));
        }
        in_component(tape, Component::HighOut, |tape| {
            let k = self.config.cutoff_stage;
            let mut skips = skips.to_vec();
            let mut h = r_out;
            for s in (0..k).rev() {
                h = self.upsample(tape, s + 1, h)?;
                h = self.decoder_stage(tape, s, h, emb.act, &mut skips, probe)?;
            }
            self.head(tape, h)
        })
    }

    /// The unsplit network, stage by stage, without the cut-off boundary.
    pub fn forward_full(&self, tape: &mut Tape, x: Var, emb: &Embeddings) -> Result<Var> {
        let batch = tape.value(emb.act).shape()[0];
        self.check_input(tape, x, batch)?;
        let top = self.config.stages() - 1;
        let mut skips = Vec::new();
        let mut h = self.conv_in.forward(tape, &self.params, x)?;
        for s in 0..=top {
            h = self.encoder_stage(tape, s, h, emb.act, &mut skips)?;
        }
        h = self.middle(tape, h, emb.act, &mut NoProbe)?;
        for s in (0..=top).rev() {
            if s < top {
                h = self.upsample(tape, s + 1, h)?;
            }
            h = self.decoder_stage(tape, s, h, emb.act, &mut skips, &mut NoProbe)?;
        }
        self.head(tape, h)
    }

    /// decode_high ∘ run_low ∘ encode_high on a tape; returns (ε̂, r_in, r_out).
    pub fn predict_noise_on(
        &self,
        tape: &mut Tape,
        x: Var,
        emb: &Embeddings,
        probe: &mut dyn Probe,
    ) -> Result<(Var, Var, Var)> {
        let high = self.encode_high(tape, x, emb, probe)?;
        let r_out = self.run_low(tape, high.r_in, emb, probe)?;
        let eps = self.decode_high(tape, r_out, &high.skips, emb, probe)?;
        Ok((eps, high.r_in, r_out))
    }

    pub fn predict_noise(&self, x: &Tensor, t: &[usize], classes: &[usize]) -> Result<UNetOutput> {
        self.predict_noise_probed(x, t, classes, &mut NoProbe)
    }

    pub fn predict_noise_probed(
        &self,
        x: &Tensor,
        t: &[usize],
        classes: &[usize],
        probe: &mut dyn Probe,
    ) -> Result<UNetOutput> {
        let mut tape = Tape::inference();
        let emb = self.embed(&mut tape, t, classes)?;
        let xv = tape.constant(x.clone());
        let (eps, r_in, r_out) = self.predict_noise_on(&mut tape, xv, &emb, probe)?;
        Ok(UNetOutput {
            eps: tape.take_value(eps),
            r_in: tape.take_value(r_in),
            r_out: tape.take_value(r_out),
            flops: tape.counter().clone(),
        })
    }

    /// Per-sample layer plan of one component.
    pub fn plan(&self, component: Component) -> Result<Vec<LayerDesc>> {
        let cfg = &self.config;
        let k = cfg.cutoff_stage;
        let top = cfg.stages() - 1;
        let mut plan = Vec::new();
        match component {
            Component::Embed => {
                self.time1.describe(&mut plan);
                plan.push(LayerDesc::Silu { numel: cfg.emb_dim });
                self.time2.describe(&mut plan);
                if self.class_table.is_some() {
                    plan.push(LayerDesc::Add { numel: cfg.emb_dim });
                }
                plan.push(LayerDesc::Silu { numel: cfg.emb_dim });
            }
            Component::HighIn => {
                self.conv_in.describe(cfg.image_size, cfg.image_size, &mut plan)?;
                for s in 0..k {
                    self.describe_encoder(s, &mut plan)?;
                }
            }
            Component::Low => {
                for s in k..=top {
                    self.describe_encoder(s, &mut plan)?;
                }
                let e = cfg.extent(top);
                self.mid1.describe(e, e, true, &mut plan)?;
                if let Some(a) = &self.mid_attn {
                    a.describe(e, e, &mut plan)?;
                }
                self.mid2.describe(e, e, true, &mut plan)?;
                for s in (k..=top).rev() {
                    if s < top {
                        self.describe_up(s + 1, &mut plan)?;
                    }
                    self.describe_decoder(s, &mut plan)?;
                }
            }
            Component::HighOut => {
                for s in (0..k).rev() {
                    self.describe_up(s + 1, &mut plan)?;
                    self.describe_decoder(s, &mut plan)?;
                }
                let e = cfg.image_size;
                self.out_norm.describe(e, e, &mut plan);
                plan.push(LayerDesc::Silu { numel: cfg.channels[0] * e * e });
                self.out_conv.describe(e, e, &mut plan)?;
            }
            Component::Adaptor | Component::Other => {}
        }
        Ok(plan)
    }

    fn describe_encoder(&self, s: usize, plan: &mut Vec<LayerDesc>) -> Result<()> {
        let e = self.config.extent(s);
        for j in 0..RES_BLOCKS {
            self.enc[s].describe(j, e, plan)?;
        }
        if s + 1 < self.config.stages() {
            self.downs[s].describe(e, e, plan)?;
        }
        Ok(())
    }

    fn describe_decoder(&self, s: usize, plan: &mut Vec<LayerDesc>) -> Result<()> {
        let e = self.config.extent(s);
        for j in 0..=RES_BLOCKS {
            self.dec[s].describe(j, e, plan)?;
        }
        Ok(())
    }

    fn describe_up(&self, s: usize, plan: &mut Vec<LayerDesc>) -> Result<()> {
        let e = self.config.extent(s - 1);
        self.ups[s - 1].describe(e, e, plan)?;
        Ok(())
    }
}

/// Batch layout for a guided pass: conditional rows first, then the same
/// latents with the null class. With `w == 1` or no conditioning only the
/// conditional half is run.
#[derive(Clone, Debug)]
pub struct GuidanceBatch {
    pub x: Tensor,
    pub t: Vec<usize>,
    pub classes: Vec<usize>,
    pub guided: bool,
}

impl GuidanceBatch {
    pub fn new(config: &UNetConfig, x: &Tensor, t: usize, classes: &[usize], w: f32) -> Result<Self> {
        let n = x.shape()[0];
        if classes.len() != n {
            return config_err(format!("{} class ids for a batch of {n}", classes.len()));
        }
        if let Some(k) = config.num_classes() {
            if let Some(bad) = classes.iter().find(|&&c| c > k) {
                return config_err(format!("class id {bad} outside 0..={k}"));
            }
        }
        let guided = config.num_classes().is_some() && w != 1.0;
        if !guided {
            return Ok(Self { x: x.clone(), t: vec![t; n], classes: classes.to_vec(), guided });
        }
        let mut cls = classes.to_vec();
        cls.extend(std::iter::repeat_n(config.null_class(), n));
        Ok(Self { x: Tensor::cat_batch(&[x, x])?, t: vec![t; 2 * n], classes: cls, guided })
    }

    /// Folds a batched prediction back to one ε̂ per latent.
    pub fn combine(&self, eps: &Tensor, w: f32) -> Result<Tensor> {
        if !self.guided {
            return Ok(eps.clone());
        }
        let n = eps.shape()[0] / 2;
        let cond = eps.slice_batch(0, n)?;
        let uncond = eps.slice_batch(n, 2 * n)?;
        cfg_combine(&uncond, &cond, w)
    }
}
