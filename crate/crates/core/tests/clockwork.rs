use clockwork::adaptor::{Adaptor, AdaptorSpec};
use clockwork::clockwork::{clockwork_predict_noise, generate, ClockSchedule, Pipeline, RepCache, SampleSpec};
use clockwork::numerics::{rng, Component, Tensor};
use clockwork::sampler::{sample_loop, NoiseSchedule, ScheduleKind, Solver, StepOutput, TimestepGrid};
use clockwork::unet::{Conditioning, GuidanceBatch, NoProbe, SplitUNet, UNetConfig};
use clockwork::Error;

fn tiny_model(seed: u64) -> SplitUNet {
    let cfg = UNetConfig {
        image_size: 8,
        channels: vec![8, 16],
        emb_dim: 16,
        time_dim: 8,
        conditioning: Conditioning::Class { classes: 3 },
        ..UNetConfig::default()
    };
    let mut m = SplitUNet::new(cfg, seed).unwrap();
    let mut r = rng(seed, 9);
    for p in m.params.iter_mut() {
        if p.value.data().iter().all(|&v| v == 0.0) {
            p.value = Tensor::randn(p.value.shape(), &mut r).scale(0.1);
        }
    }
    m
}

fn identity_for(model: &SplitUNet) -> Adaptor {
    Adaptor::new(AdaptorSpec::identity(), model.config.rep_shape(), model.config.emb_dim, 0).unwrap()
}

#[test]
fn degenerate_clock_reproduces_baseline_bit_exactly() {
    let model = tiny_model(1);
    let schedule = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();
    let grid = TimestepGrid::uniform(1000, 6).unwrap();
    let adaptor = identity_for(&model);
    let classes = [0, 2];
    for solver in [Solver::Ddim, Solver::DpmPp2m] {
        for w in [1.0f32, 3.0] {
            let baseline = sample_loop(
                |x: &Tensor, ctx| {
                    let batch = GuidanceBatch::new(&model.config, x, ctx.t, &classes, w)?;
                    let out = model.predict_noise(&batch.x, &batch.t, &batch.classes)?;
                    Ok(StepOutput::plain(batch.combine(&out.eps, w)?))
                },
                &schedule,
                &grid,
                solver,
                &[2, 3, 8, 8],
                &classes,
                5,
            )
            .unwrap();
            for clock in [ClockSchedule::off(), ClockSchedule::periodic(7).unwrap(), ClockSchedule::explicit([9]).unwrap()]
            {
                let pipe = Pipeline { model: &model, adaptor: &adaptor, clock: &clock };
                let spec = SampleSpec { schedule: &schedule, grid: &grid, solver, guidance: w };
                let g = generate(pipe, &spec, &classes, 5).unwrap();
                assert_eq!(g.trajectory.final_latent, baseline.final_latent);
                assert!(g.trajectory.records.iter().all(|r| !r.approximated));
                assert_eq!(g.report.savings_fraction, 0.0);
            }
        }
    }
}

#[test]
fn identity_adaptor_reuses_previous_representation_and_skips_low_core() {
    let model = tiny_model(2);
    let schedule = NoiseSchedule::new(ScheduleKind::Cosine, 1000).unwrap();
    let grid = TimestepGrid::uniform(1000, 8).unwrap();
    let adaptor = identity_for(&model);
    let clock = ClockSchedule::periodic(2).unwrap();
    let pipe = Pipeline { model: &model, adaptor: &adaptor, clock: &clock };
    let spec = SampleSpec { schedule: &schedule, grid: &grid, solver: Solver::DpmPp2m, guidance: 3.0 };
    let g = generate(pipe, &spec, &[1], 0).unwrap();
    let recs = &g.trajectory.records;
    let full: Vec<_> = g.step_flops.iter().filter(|c| c.flops(Component::Low) > 0).collect();
    assert_eq!(full.len(), 4);
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.approximated, (i + 1) % 2 == 0);
        if r.approximated {
            assert_eq!(r.r_out, recs[i - 1].r_out, "step {}", i + 1);
            assert_eq!(g.step_flops[i].flops(Component::Low), 0);
            assert_eq!(g.step_flops[i].attention_ops(Component::Low), 0);
        }
    }
}

#[test]
fn engine_popcount_matches_predicate_exhaustively() {
    let model = tiny_model(3);
    let schedule = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();
    let adaptor = identity_for(&model);
    for steps in 1..=16 {
        let grid = TimestepGrid::uniform(1000, steps).unwrap();
        for n in 2..=4 {
            let clock = ClockSchedule::periodic(n).unwrap();
            let pipe = Pipeline { model: &model, adaptor: &adaptor, clock: &clock };
            let spec = SampleSpec { schedule: &schedule, grid: &grid, solver: Solver::Ddim, guidance: 1.0 };
            let g = generate(pipe, &spec, &[0], steps as u64).unwrap();
            let approximated = g.trajectory.records.iter().filter(|r| r.approximated).count();
            let low_skipped = g.step_flops.iter().filter(|c| c.flops(Component::Low) == 0).count();
            assert_eq!(approximated, clock.adaptor_steps(steps).len(), "T={steps} N={n}");
            assert_eq!(approximated, steps / n);
            assert_eq!(low_skipped, approximated);
            assert_eq!(g.trajectory.len(), steps);
        }
    }
}

#[test]
fn adaptor_step_without_cache_is_a_protocol_error() {
    let model = tiny_model(4);
    let adaptor = identity_for(&model);
    let clock = ClockSchedule::explicit([2]).unwrap();
    let pipe = Pipeline { model: &model, adaptor: &adaptor, clock: &clock };
    let x = Tensor::randn(&[1, 3, 8, 8], &mut rng(0, 0));
    let mut cache = RepCache::default();
    let err = clockwork_predict_noise(pipe, &mut cache, &x, 2, 500, &[0], 1.0, &mut NoProbe);
    assert!(matches!(err, Err(Error::Protocol(_))));
    clockwork_predict_noise(pipe, &mut cache, &x, 1, 600, &[0], 1.0, &mut NoProbe).unwrap();
    assert_eq!(cache.step, 1);
    let (out, _) = clockwork_predict_noise(pipe, &mut cache, &x, 2, 500, &[0], 1.0, &mut NoProbe).unwrap();
    assert!(out.approximated);
    assert_eq!(cache.step, 2);
}

#[test]
fn every_step_clock_needs_a_memoryless_adaptor() {
    use clockwork::adaptor::AdaptorInput;
    let model = tiny_model(3);
    let schedule = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();
    let grid = TimestepGrid::uniform(1000, 4).unwrap();
    let spec = SampleSpec { schedule: &schedule, grid: &grid, solver: Solver::DpmPp2m, guidance: 1.0 };
    let clock = ClockSchedule::periodic(1).unwrap();
    let shape = model.config.rep_shape();
    let with_prev = Adaptor::new(AdaptorSpec::default(), shape, 16, 1).unwrap();
    let pipe = Pipeline { model: &model, adaptor: &with_prev, clock: &clock };
    assert!(matches!(generate(pipe, &spec, &[0], 1), Err(Error::Config(_))));
    let memoryless = AdaptorSpec { inputs: vec![AdaptorInput::RIn, AdaptorInput::TEmb, AdaptorInput::CEmb], ..AdaptorSpec::default() };
    let adaptor = Adaptor::new(memoryless, shape, 16, 1).unwrap();
    let g = generate(Pipeline { model: &model, adaptor: &adaptor, clock: &clock }, &spec, &[0], 1).unwrap();
    assert!(g.trajectory.records.iter().all(|r| r.approximated));
    assert!(g.step_flops.iter().all(|f| f.flops(Component::Low) == 0));
}
