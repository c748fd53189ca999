use clockwork::adaptor::{Adaptor, AdaptorKind, AdaptorSpec};
use clockwork::clockwork::{ClockSchedule, SampleSpec};
use clockwork::distill::{
    adaptor_step_loss, mean_adaptor_loss, regular_examples, train_adaptor_regular, train_adaptor_unrolled, train_base,
    unroll_dataset, unrolled_examples, AdaptorTrainConfig, BaseTrainConfig, OperatingPoint, StepExample, ToyDataset,
};
use clockwork::numerics::{rng, Tape, Tensor};
use clockwork::sampler::{NoiseSchedule, ScheduleKind, Solver, TimestepGrid};
use clockwork::unet::{Conditioning, GuidanceBatch, NoProbe, SplitUNet, UNetConfig};
use clockwork::Error;

fn tiny_model(seed: u64) -> SplitUNet {
    let cfg = UNetConfig {
        image_size: 8,
        channels: vec![8, 16],
        emb_dim: 16,
        time_dim: 8,
        conditioning: Conditioning::Class { classes: 16 },
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

fn data() -> ToyDataset {
    ToyDataset { image_size: 8, enabled: true }
}

struct Setup {
    schedule: NoiseSchedule,
    grid: TimestepGrid,
}

impl Setup {
    fn new(steps: usize) -> Self {
        Self {
            schedule: NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap(),
            grid: TimestepGrid::uniform(1000, steps).unwrap(),
        }
    }

    fn spec(&self, w: f32) -> SampleSpec<'_> {
        SampleSpec { schedule: &self.schedule, grid: &self.grid, solver: Solver::DpmPp2m, guidance: w }
    }
}

#[test]
fn unrolled_records_are_full_teacher_passes() {
    let teacher = tiny_model(1);
    let s = Setup::new(5);
    let trajs = unroll_dataset(&teacher, &s.spec(2.0), &[3, 7], 3, 11, 1).unwrap();
    assert_eq!(trajs.len(), 3);
    assert_eq!(trajs[2].conditions, vec![3]);
    for traj in &trajs {
        assert_eq!(traj.len(), 5);
        for rec in &traj.records {
            assert!(!rec.approximated);
            let r_in = rec.r_in.as_ref().unwrap();
            // guided records carry the [cond; null] rows
            assert_eq!(r_in.shape()[0], 2);
            let batch = GuidanceBatch::new(&teacher.config, &rec.x_t, rec.t, &traj.conditions, 2.0).unwrap();
            let mut tape = Tape::inference();
            let emb = teacher.embed(&mut tape, &batch.t, &batch.classes).unwrap();
            let x = tape.constant(batch.x);
            let high = teacher.encode_high(&mut tape, x, &emb, &mut NoProbe).unwrap();
            assert_eq!(tape.value(high.r_in), r_in);
            let low = teacher.run_low(&mut tape, high.r_in, &emb, &mut NoProbe).unwrap();
            assert_eq!(tape.value(low), rec.r_out.as_ref().unwrap());
        }
    }
    let threaded = unroll_dataset(&teacher, &s.spec(2.0), &[3, 7], 3, 11, 3).unwrap();
    for (a, b) in trajs.iter().zip(&threaded) {
        assert_eq!(a.final_latent, b.final_latent);
        assert_eq!(a.seed, b.seed);
    }
    assert_ne!(trajs[0].final_latent, trajs[1].final_latent);
}

#[test]
fn examples_follow_the_clock() {
    let teacher = tiny_model(2);
    let s = Setup::new(8);
    let trajs = unroll_dataset(&teacher, &s.spec(1.0), &[0], 2, 3, 1).unwrap();
    let clock = ClockSchedule::periodic(2).unwrap();
    let ex = unrolled_examples(&teacher.config, &trajs, &clock, 1.0).unwrap();
    assert_eq!(ex.len(), 2 * 4);
    // step 4 of the first trajectory
    let e = &ex[1];
    let recs = &trajs[0].records;
    assert_eq!(e.t, recs[3].t);
    assert_eq!(&e.r_in, recs[3].r_in.as_ref().unwrap());
    assert_eq!(&e.target, recs[3].r_out.as_ref().unwrap());
    assert_eq!(e.r_out_prev.as_ref(), recs[2].r_out.as_ref());
    assert_eq!(e.classes, vec![0]);
}

fn example(prev: Tensor, target: Tensor) -> StepExample {
    let r_in = Tensor::randn(prev.shape(), &mut rng(0, 1));
    let n = prev.shape()[0];
    StepExample { r_in, r_out_prev: Some(prev), target, t: 500, classes: vec![1; n] }
}

#[test]
fn identity_and_fresh_resnet_losses_by_hand() {
    let teacher = tiny_model(3);
    let shape = teacher.config.rep_shape();
    let numel: usize = shape.iter().product();
    let identity = Adaptor::new(AdaptorSpec::identity(), shape.clone(), 16, 0).unwrap();
    let resnet = Adaptor::new(AdaptorSpec::default(), shape.clone(), 16, 5).unwrap();
    assert_eq!(resnet.spec.kind, AdaptorKind::Resnet);

    let mut dims = vec![2];
    dims.extend_from_slice(&shape);
    let prev = Tensor::randn(&dims, &mut rng(1, 0));
    let same = example(prev.clone(), prev.clone());
    assert_eq!(adaptor_step_loss(&identity, &teacher, &same).unwrap(), 0.0);

    // row 0 off by 3 everywhere, row 1 exact
    let mut target = prev.clone();
    for v in &mut target.data_mut()[..numel] {
        *v += 3.0;
    }
    let shifted = example(prev, target);
    let want = 3.0 * (numel as f64).sqrt() / 2.0;
    let id_loss = adaptor_step_loss(&identity, &teacher, &shifted).unwrap();
    assert!((id_loss - want).abs() < 1e-4 * want, "{id_loss} vs {want}");
    let rn_loss = adaptor_step_loss(&resnet, &teacher, &shifted).unwrap();
    assert_eq!(rn_loss, id_loss);
    let mean = mean_adaptor_loss(&identity, &teacher, &[same, shifted]).unwrap();
    assert!((mean - want / 2.0).abs() < 1e-4 * want);
}

#[test]
fn unrolled_training_beats_identity_and_leaves_teacher_alone() {
    let teacher = tiny_model(4);
    let before: Vec<Tensor> = teacher.params.iter().map(|p| p.value.clone()).collect();
    let s = Setup::new(6);
    let clock = ClockSchedule::periodic(2).unwrap();
    let op = OperatingPoint { sample: s.spec(1.0), clock: &clock };
    let cfg = AdaptorTrainConfig { epochs: 6, batch: 8, lr: 2e-3, trajectories_per_epoch: 24, regenerate: false, workers: 1 };
    let shape = teacher.config.rep_shape();
    let mut adaptor = Adaptor::new(AdaptorSpec::default(), shape.clone(), 16, 6).unwrap();
    let classes: Vec<usize> = (0..16).collect();
    let rows = train_adaptor_unrolled(&teacher, &mut adaptor, &op, &classes, &cfg, 21).unwrap();
    assert_eq!(rows.len(), 6 * 72usize.div_ceil(8));
    assert!(teacher.params.iter().zip(&before).all(|(p, b)| &p.value == b));

    let held = unroll_dataset(&teacher, &op.sample, &classes, 16, 999, 1).unwrap();
    let held = unrolled_examples(&teacher.config, &held, &clock, 1.0).unwrap();
    let identity = Adaptor::new(AdaptorSpec::identity(), shape, 16, 0).unwrap();
    let trained = mean_adaptor_loss(&adaptor, &teacher, &held).unwrap();
    let base = mean_adaptor_loss(&identity, &teacher, &held).unwrap();
    assert!(trained < base, "trained {trained} vs identity {base}");

    let mut again = Adaptor::new(AdaptorSpec::default(), teacher.config.rep_shape(), 16, 6).unwrap();
    let rows2 = train_adaptor_unrolled(&teacher, &mut again, &op, &classes, &AdaptorTrainConfig { workers: 2, ..cfg }, 21).unwrap();
    assert_eq!(rows, rows2);
}

#[test]
fn unrolled_training_needs_no_images() {
    let teacher = tiny_model(5);
    let s = Setup::new(4);
    let clock = ClockSchedule::periodic(2).unwrap();
    let op = OperatingPoint { sample: s.spec(1.0), clock: &clock };
    let cfg = AdaptorTrainConfig { epochs: 1, batch: 4, lr: 1e-3, trajectories_per_epoch: 4, regenerate: true, workers: 1 };
    let mut adaptor = Adaptor::new(AdaptorSpec::default(), teacher.config.rep_shape(), 16, 1).unwrap();
    train_adaptor_unrolled(&teacher, &mut adaptor, &op, &[0, 1], &cfg, 2).unwrap();
    let disabled = ToyDataset { enabled: false, ..data() };
    assert!(matches!(
        train_adaptor_regular(&teacher, &mut adaptor, &op, &disabled, &cfg, 2),
        Err(Error::Config(_))
    ));
    let off = ClockSchedule::off();
    let op_off = OperatingPoint { sample: s.spec(1.0), clock: &off };
    assert!(train_adaptor_unrolled(&teacher, &mut adaptor, &op_off, &[0], &cfg, 2).is_err());
}

#[test]
fn regular_examples_pair_neighbouring_noise_levels() {
    let teacher = tiny_model(6);
    let s = Setup::new(4);
    let clock = ClockSchedule::periodic(2).unwrap();
    let op = OperatingPoint { sample: s.spec(3.0), clock: &clock };
    let ex = regular_examples(&teacher, &data(), &op, 3, 8, 1).unwrap();
    assert_eq!(ex.len(), 2 * 3);
    assert_eq!(ex[0].t, s.grid.t(2));
    assert_eq!(ex[5].t, s.grid.t(4));
    assert_eq!(ex[0].r_in.shape()[0], 2);
    assert_eq!(ex[0].classes[1], teacher.config.null_class());
    let threaded = regular_examples(&teacher, &data(), &op, 3, 8, 3).unwrap();
    for (a, b) in ex.iter().zip(&threaded) {
        assert_eq!(a.target, b.target);
        assert_eq!(a.r_out_prev, b.r_out_prev);
    }
    assert_ne!(ex[0].target, ex[1].target);
}

#[test]
fn base_training_is_deterministic_and_overfits() {
    let schedule = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();
    let cfg = BaseTrainConfig { steps: 4, batch: 4, lr: 1e-3, steps_per_epoch: 2, ..BaseTrainConfig::default() };
    let mut a = tiny_model(7);
    let mut b = tiny_model(7);
    let ra = train_base(&mut a, &data(), &schedule, &cfg, 3).unwrap();
    let rb = train_base(&mut b, &data(), &schedule, &cfg, 3).unwrap();
    assert_eq!(ra, rb);
    assert_eq!(ra.last().unwrap().epoch, 1);
    assert!(a.params.iter().zip(b.params.iter()).all(|(x, y)| x.value == y.value));

    let mut m = tiny_model(8);
    let cfg = BaseTrainConfig {
        steps: 300,
        batch: 8,
        lr: 3e-3,
        cond_dropout: 0.0,
        steps_per_epoch: 50,
        dataset_size: Some(2),
    };
    let rows = train_base(&mut m, &data(), &schedule, &cfg, 4).unwrap();
    let avg = |r: &[_]| r.iter().map(|x: &clockwork::distill::LossRow| x.loss).sum::<f64>() / r.len() as f64;
    let (first, last) = (avg(&rows[..50]), avg(&rows[250..]));
    assert!(last < 0.6 * first, "loss {first} -> {last}");
}

#[test]
fn divergence_is_reported() {
    let schedule = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();
    let cfg = BaseTrainConfig { steps: 20, batch: 2, lr: 1e30, ..BaseTrainConfig::default() };
    let mut m = tiny_model(9);
    match train_base(&mut m, &data(), &schedule, &cfg, 1) {
        Err(Error::Numeric(msg)) => assert!(msg.contains("step"), "{msg}"),
        other => panic!("expected a numeric error, got {other:?}"),
    }
}

#[test]
fn all_step_distillation_uses_step_one_without_history() {
    use clockwork::adaptor::AdaptorInput;
    let teacher = tiny_model(10);
    let s = Setup::new(4);
    let clock = ClockSchedule::periodic(1).unwrap();
    let trajs = unroll_dataset(&teacher, &s.spec(1.0), &[2], 1, 5, 1).unwrap();
    let ex = unrolled_examples(&teacher.config, &trajs, &clock, 1.0).unwrap();
    assert_eq!(ex.len(), 4);
    assert!(ex[0].r_out_prev.is_none() && ex[1].r_out_prev.is_some());

    let op = OperatingPoint { sample: s.spec(1.0), clock: &clock };
    let cfg = AdaptorTrainConfig { epochs: 1, batch: 4, lr: 1e-3, trajectories_per_epoch: 2, regenerate: false, workers: 1 };
    let shape = teacher.config.rep_shape();
    let mut needs_prev = Adaptor::new(AdaptorSpec::default(), shape, 16, 1).unwrap();
    assert!(matches!(train_adaptor_unrolled(&teacher, &mut needs_prev, &op, &[0], &cfg, 1), Err(Error::Config(_))));
    let spec = AdaptorSpec { inputs: vec![AdaptorInput::RIn, AdaptorInput::TEmb, AdaptorInput::CEmb], ..AdaptorSpec::default() };
    let mut memoryless = Adaptor::new(spec, shape, 16, 1).unwrap();
    let rows = train_adaptor_unrolled(&teacher, &mut memoryless, &op, &[0], &cfg, 1).unwrap();
    assert_eq!(rows.len(), 2);
    let regular = regular_examples(&teacher, &data(), &op, 1, 2, 1).unwrap();
    assert!(regular[0].r_out_prev.is_none());
}
