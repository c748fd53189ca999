//! Clock-gated denoising: full low-res passes on some steps, the adaptor
//! with the cached previous `r_out` on the others.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptor::{Adaptor, AdaptorInputs};
use crate::cost::FlopReport;
use crate::error::{config_err, Result};
use crate::numerics::{rng, FlopCounter, Tape, Tensor};
use crate::sampler::{sample_loop, NoiseSchedule, Solver, StepCtx, StepOutput, TimestepGrid, Trajectory};
use crate::unet::{GuidanceBatch, NoProbe, Probe, SplitUNet};

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", deny_unknown_fields)]
pub enum ClockSpec {
    /// Every step is a full pass.
    #[default]
    Off,
    /// Adaptor at step `i` iff `i mod n == 0`.
    Periodic { n: usize },
    /// Adaptor at the listed 1-based steps.
    Explicit { steps: Vec<usize> },
}

/// The predicate C(i) over 1-based grid steps.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClockSchedule {
    spec: ClockSpec,
}

impl ClockSchedule {
    pub fn new(spec: ClockSpec) -> Result<Self> {
        match &spec {
            ClockSpec::Off => {}
            ClockSpec::Periodic { n: 0 } => return config_err("clock period must be at least 1"),
            ClockSpec::Periodic { .. } => {}
            ClockSpec::Explicit { steps } => {
                if steps.contains(&0) {
                    return config_err("adaptor steps are 1-based");
                }
            }
        }
        Ok(Self { spec })
    }

    pub fn off() -> Self {
        Self { spec: ClockSpec::Off }
    }

    pub fn periodic(n: usize) -> Result<Self> {
        Self::new(ClockSpec::Periodic { n })
    }

    pub fn explicit(steps: impl IntoIterator<Item = usize>) -> Result<Self> {
        Self::new(ClockSpec::Explicit { steps: steps.into_iter().collect() })
    }

    pub fn spec(&self) -> &ClockSpec {
        &self.spec
    }

    /// C(i): true when step `i` uses the adaptor.
    pub fn is_adaptor(&self, i: usize) -> bool {
        match &self.spec {
            ClockSpec::Off => false,
            ClockSpec::Periodic { n } => i % n == 0,
            ClockSpec::Explicit { steps } => steps.contains(&i),
        }
    }

    pub fn adaptor_steps(&self, total: usize) -> Vec<usize> {
        (1..=total).filter(|&i| self.is_adaptor(i)).collect()
    }

    pub fn is_off_for(&self, total: usize) -> bool {
        self.adaptor_steps(total).is_empty()
    }
}

/// The most recent `r_out` and the step that produced it.
#[derive(Clone, Debug, Default)]
pub struct RepCache {
    pub r_out: Option<Tensor>,
    pub step: usize,
}

/// The pieces a gated step needs.
#[derive(Clone, Copy)]
pub struct Pipeline<'a> {
    pub model: &'a SplitUNet,
    pub adaptor: &'a Adaptor,
    pub clock: &'a ClockSchedule,
}

impl Pipeline<'_> {
    /// Rejects clocks that fire on step 1 with an adaptor that reads the
    /// previous step's output, which does not exist there.
    pub fn validate(&self) -> Result<()> {
        if self.clock.is_adaptor(1) && self.adaptor.spec.needs_previous() {
            return config_err("the clock fires on step 1 but the adaptor needs the previous r_out");
        }
        Ok(())
    }
}

/// One gated denoiser evaluation at 1-based step `i`, guided with scale `w`.
pub fn clockwork_predict_noise(
    pipe: Pipeline<'_>,
    cache: &mut RepCache,
    x_t: &Tensor,
    i: usize,
    t: usize,
    classes: &[usize],
    w: f32,
    probe: &mut dyn Probe,
) -> Result<(StepOutput, FlopCounter)> {
    let model = pipe.model;
    let batch = GuidanceBatch::new(&model.config, x_t, t, classes, w)?;
    let mut tape = Tape::inference();
    let emb = model.embed(&mut tape, &batch.t, &batch.classes)?;
    let x = tape.constant(batch.x.clone());
    let high = model.encode_high(&mut tape, x, &emb, probe)?;
    let approximated = pipe.clock.is_adaptor(i);
    let r_out = if approximated {
        let prev = cache.r_out.as_ref().map(|r| tape.constant(r.clone()));
        pipe.adaptor.forward(
            &mut tape,
            AdaptorInputs { r_in: Some(high.r_in), r_out_prev: prev, t_emb: Some(emb.t_emb), c_emb: emb.c_emb },
        )?
    } else {
        model.run_low(&mut tape, high.r_in, &emb, probe)?
    };
    let eps = model.decode_high(&mut tape, r_out, &high.skips, &emb, probe)?;
    let eps = batch.combine(tape.value(eps), w)?;
    let r_out = tape.take_value(r_out);
    cache.r_out = Some(r_out.clone());
    cache.step = i;
    let out = StepOutput { eps, r_in: Some(tape.take_value(high.r_in)), r_out: Some(r_out), approximated };
    Ok((out, tape.counter().clone()))
}

/// Sampling settings shared by every generation call.
#[derive(Clone, Debug)]
pub struct SampleSpec<'a> {
    pub schedule: &'a NoiseSchedule,
    pub grid: &'a TimestepGrid,
    pub solver: Solver,
    pub guidance: f32,
}

#[derive(Clone, Debug)]
pub struct Generation {
    pub trajectory: Trajectory,
    pub step_flops: Vec<FlopCounter>,
    pub report: FlopReport,
}

/// Full gated sampling run for one batch of class ids.
pub fn generate(pipe: Pipeline<'_>, spec: &SampleSpec<'_>, classes: &[usize], seed: u64) -> Result<Generation> {
    generate_probed(pipe, spec, classes, seed, &mut |_| Box::new(NoProbe))
}

/// As [`generate`], with a per-step probe factory (indexed by 1-based step).
pub fn generate_probed(
    pipe: Pipeline<'_>,
    spec: &SampleSpec<'_>,
    classes: &[usize],
    seed: u64,
    probes: &mut dyn FnMut(usize) -> Box<dyn Probe>,
) -> Result<Generation> {
    pipe.validate()?;
    let cfg = &pipe.model.config;
    let shape = [classes.len(), cfg.in_channels, cfg.image_size, cfg.image_size];
    let mut cache = RepCache::default();
    let mut step_flops = Vec::with_capacity(spec.grid.len());
    let noise_fn = |x: &Tensor, ctx: StepCtx| {
        let mut probe = probes(ctx.step);
        let (out, flops) =
            clockwork_predict_noise(pipe, &mut cache, x, ctx.step, ctx.t, classes, spec.guidance, probe.as_mut())?;
        step_flops.push(flops);
        Ok(out)
    };
    let trajectory = sample_loop(noise_fn, spec.schedule, spec.grid, spec.solver, &shape, classes, seed)?;
    let report = FlopReport::from_instrumented(pipe.model, &step_flops, &trajectory)?;
    Ok(Generation { trajectory, step_flops, report })
}

/// Final latents for `classes` generated in chunks of `batch`; chunk `k`
/// uses a seed derived from `(seed, k)`. Chunks run on the current rayon
/// pool and the result does not depend on its size. Also returns the FLOP
/// report of each chunk.
pub fn generate_many(
    pipe: Pipeline<'_>,
    spec: &SampleSpec<'_>,
    classes: &[usize],
    batch: usize,
    seed: u64,
) -> Result<(Tensor, Vec<FlopReport>)> {
    if classes.is_empty() || batch == 0 {
        return config_err("need at least one sample and a positive batch");
    }
    let chunks: Vec<&[usize]> = classes.chunks(batch).collect();
    let runs: Vec<(Tensor, FlopReport)> = chunks
        .par_iter()
        .enumerate()
        .map(|(k, cls)| {
            let g = generate(pipe, spec, cls, rng(seed, k as u64).random())?;
            Ok((g.trajectory.final_latent, g.report))
        })
        .collect::<Result<_>>()?;
    let latents = Tensor::cat_batch(&runs.iter().map(|(t, _)| t).collect::<Vec<_>>())?;
    Ok((latents, runs.into_iter().map(|(_, r)| r).collect()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn periodic_two_over_eight_steps() {
        let c = ClockSchedule::periodic(2).unwrap();
        assert_eq!(c.adaptor_steps(8), vec![2, 4, 6, 8]);
    }

    #[test]
    fn explicit_schedules_and_rejections() {
        assert_eq!(ClockSchedule::explicit([5, 6, 7, 8]).unwrap().adaptor_steps(8), vec![5, 6, 7, 8]);
        assert_eq!(ClockSchedule::explicit([3, 4, 5, 6]).unwrap().adaptor_steps(8), vec![3, 4, 5, 6]);
        assert_eq!(ClockSchedule::periodic(1).unwrap().adaptor_steps(3), vec![1, 2, 3]);
        assert!(ClockSchedule::periodic(0).is_err());
        assert!(ClockSchedule::explicit([0, 2]).is_err());
        assert!(ClockSchedule::off().adaptor_steps(8).is_empty());
    }
}
