//! Whole-trajectory FLOP reports, analytic and instrumented.

use serde::{Deserialize, Serialize};

use crate::adaptor::Adaptor;
use crate::clockwork::ClockSchedule;
use crate::cost::layers::plan_flops;
use crate::error::{config_err, Result};
use crate::numerics::{Component, FlopCounter};
use crate::sampler::Trajectory;
use crate::unet::SplitUNet;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ComponentFlops {
    pub embed: u64,
    pub high_in: u64,
    pub low: u64,
    pub high_out: u64,
    pub adaptor: u64,
}

impl ComponentFlops {
    pub fn total(&self) -> u64 {
        self.embed + self.high_in + self.low + self.high_out + self.adaptor
    }

    /// Everything except the low-res core and the adaptor.
    pub fn high(&self) -> u64 {
        self.embed + self.high_in + self.high_out
    }

    fn add(&mut self, o: &ComponentFlops) {
        self.embed += o.embed;
        self.high_in += o.high_in;
        self.low += o.low;
        self.high_out += o.high_out;
        self.adaptor += o.adaptor;
    }

    fn scaled(&self, k: u64) -> Self {
        Self {
            embed: self.embed * k,
            high_in: self.high_in * k,
            low: self.low * k,
            high_out: self.high_out * k,
            adaptor: self.adaptor * k,
        }
    }

    fn from_counter(c: &FlopCounter) -> Result<Self> {
        if c.flops(Component::Other) != 0 {
            return config_err("instrumented counter holds unattributed FLOPs");
        }
        Ok(Self {
            embed: c.flops(Component::Embed),
            high_in: c.flops(Component::HighIn),
            low: c.flops(Component::Low),
            high_out: c.flops(Component::HighOut),
            adaptor: c.flops(Component::Adaptor),
        })
    }

    /// Per-sample analytic cost of each model part.
    pub fn of_model(model: &SplitUNet) -> Result<Self> {
        Ok(Self {
            embed: plan_flops(&model.plan(Component::Embed)?)?,
            high_in: plan_flops(&model.plan(Component::HighIn)?)?,
            low: plan_flops(&model.plan(Component::Low)?)?,
            high_out: plan_flops(&model.plan(Component::HighOut)?)?,
            adaptor: 0,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepFlops {
    pub step: usize,
    pub approximated: bool,
    pub flops: ComponentFlops,
    pub total: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FlopReport {
    pub per_component: ComponentFlops,
    pub per_step: Vec<StepFlops>,
    pub total: u64,
    /// Cost of the same trajectory with every step a full pass.
    pub baseline_total: u64,
    pub savings_fraction: f64,
}

impl FlopReport {
    fn assemble(per_step: Vec<StepFlops>, baseline_total: u64) -> Self {
        let mut per_component = ComponentFlops::default();
        for s in &per_step {
            per_component.add(&s.flops);
        }
        let total = per_step.iter().map(|s| s.total).sum();
        let savings_fraction = if baseline_total == 0 { 0.0 } else { 1.0 - total as f64 / baseline_total as f64 };
        Self { per_component, per_step, total, baseline_total, savings_fraction }
    }

    /// Report from the runtime counters of a generation. The denoiser batch
    /// of each step is read from the recorded `r_in`.
    pub fn from_instrumented(model: &SplitUNet, counters: &[FlopCounter], trajectory: &Trajectory) -> Result<Self> {
        if counters.len() != trajectory.len() {
            return config_err("one counter per trajectory step is required");
        }
        let full = ComponentFlops::of_model(model)?.total();
        let mut baseline = 0;
        let mut per_step = Vec::with_capacity(counters.len());
        for (c, rec) in counters.iter().zip(&trajectory.records) {
            let passes = rec.r_in.as_ref().map(|r| r.shape()[0]).unwrap_or(0) as u64;
            baseline += passes * full;
            let flops = ComponentFlops::from_counter(c)?;
            per_step.push(StepFlops { step: rec.step, approximated: rec.approximated, total: flops.total(), flops });
        }
        Ok(Self::assemble(per_step, baseline))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Analytic report for `steps` gated steps over `batch` latents; `cfg`
/// doubles the denoiser passes.
pub fn pipeline_flops(
    model: &SplitUNet,
    adaptor: &Adaptor,
    clock: &ClockSchedule,
    steps: usize,
    cfg: bool,
    batch: usize,
) -> Result<FlopReport> {
    let per = ComponentFlops::of_model(model)?;
    let adaptor_flops = plan_flops(&adaptor.plan()?)?;
    let passes = (batch * if cfg { 2 } else { 1 }) as u64;
    let mut per_step = Vec::with_capacity(steps);
    for i in 1..=steps {
        let approximated = clock.is_adaptor(i);
        let mut f = per;
        if approximated {
            f.low = 0;
            f.adaptor = adaptor_flops;
        }
        let flops = f.scaled(passes);
        per_step.push(StepFlops { step: i, approximated, total: flops.total(), flops });
    }
    Ok(FlopReport::assemble(per_step, steps as u64 * passes * per.total()))
}

/// `(T − T/N)·F_full + (T/N)·(F_high + F_adaptor)` for a periodic clock
/// with `T` divisible by `N`.
pub fn closed_form_total(steps: u64, clock: u64, f_full: u64, f_high: u64, f_adaptor: u64) -> Result<u64> {
    if clock == 0 || steps % clock != 0 {
        return config_err(format!("{steps} steps are not a multiple of clock {clock}"));
    }
    let approx = steps / clock;
    Ok((steps - approx) * f_full + approx * (f_high + f_adaptor))
}
