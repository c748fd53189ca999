use clockwork::cost::{plan_flops, ComponentFlops};
use clockwork::numerics::{directional_grad_check, finite_diff_grad_check, rng, Component, ParamStore, Tape, Tensor};
use clockwork::unet::{Conditioning, NoProbe, SplitUNet, UNetConfig};

fn tiny(cutoff: usize, attention_at: Option<Vec<usize>>) -> UNetConfig {
    UNetConfig {
        image_size: 16,
        channels: vec![8, 16, 32],
        cutoff_stage: cutoff,
        attention_at,
        emb_dim: 32,
        time_dim: 16,
        conditioning: Conditioning::Class { classes: 4 },
        ..UNetConfig::default()
    }
}

fn configs() -> Vec<UNetConfig> {
    vec![
        tiny(1, None),
        tiny(2, Some(vec![0, 2])),
        UNetConfig { conditioning: Conditioning::None, ..tiny(1, Some(vec![1])) },
    ]
}

/// Gives every zero-initialized tensor random values so outputs are non-trivial.
fn randomize(model: &mut SplitUNet, seed: u64) {
    let mut r = rng(seed, 9);
    for p in model.params.iter_mut() {
        if p.value.data().iter().all(|&v| v == 0.0) {
            p.value = Tensor::randn(p.value.shape(), &mut r).scale(0.1);
        }
    }
}

#[test]
fn split_pipeline_is_bit_identical_to_monolithic_forward() {
    for (ci, cfg) in configs().into_iter().enumerate() {
        let mut model = SplitUNet::new(cfg.clone(), ci as u64).unwrap();
        randomize(&mut model, ci as u64);
        let classes = cfg.num_classes().map(|k| (0..=k).collect::<Vec<_>>());
        for trial in 0..4 {
            let n = 2;
            let x = Tensor::randn(&[n, 3, 16, 16], &mut rng(100 + trial, ci as u64));
            let t = [trial as usize * 97, 999 - trial as usize * 13];
            let cls: Vec<usize> = match &classes {
                Some(c) => vec![c[trial as usize % c.len()], c[(trial as usize + 1) % c.len()]],
                None => vec![0, 0],
            };
            let split = model.predict_noise(&x, &t, &cls).unwrap();
            let mut tape = Tape::inference();
            let emb = model.embed(&mut tape, &t, &cls).unwrap();
            let xv = tape.constant(x.clone());
            let full = model.forward_full(&mut tape, xv, &emb).unwrap();
            assert_eq!(split.eps.data(), tape.value(full).data(), "config {ci} trial {trial}");
            assert!(split.eps.data().iter().any(|&v| v != 0.0));
        }
    }
}

#[test]
fn representation_shapes_follow_cutoff() {
    let x = Tensor::randn(&[1, 3, 16, 16], &mut rng(0, 0));
    for (cutoff, extent, ch) in [(1, 8, 16), (2, 4, 32)] {
        let model = SplitUNet::new(tiny(cutoff, None), 0).unwrap();
        let out = model.predict_noise(&x, &[5], &[1]).unwrap();
        assert_eq!(out.r_in.shape(), &[1, ch, extent, extent]);
        assert_eq!(out.r_out.shape(), out.r_in.shape());
        assert!(out.eps.data().iter().all(|&v| v == 0.0));
    }
}

#[test]
fn build_is_deterministic_and_efficient_flag_removes_stage0_attention() {
    let a = SplitUNet::new(tiny(1, Some(vec![0, 2])), 3).unwrap();
    let b = SplitUNet::new(tiny(1, Some(vec![0, 2])), 3).unwrap();
    assert_eq!(a.param_count(), b.param_count());
    assert!(a.params.iter().zip(b.params.iter()).all(|(p, q)| p.value == q.value));
    let eff = SplitUNet::new(UNetConfig { efficient: true, ..tiny(1, Some(vec![0, 2])) }, 3).unwrap();
    assert!(eff.param_count() < a.param_count());

    let x = Tensor::randn(&[1, 3, 16, 16], &mut rng(0, 0));
    let full = a.predict_noise(&x, &[5], &[1]).unwrap().flops;
    let lean = eff.predict_noise(&x, &[5], &[1]).unwrap().flops;
    assert!(full.attention_ops(Component::HighIn) > 0);
    assert_eq!(lean.attention_ops(Component::HighIn), 0);
    assert_eq!(lean.attention_ops(Component::HighOut), 0);
    assert!(lean.flops(Component::HighIn) < full.flops(Component::HighIn));
}

#[test]
fn analytic_plan_matches_instrumented_counter_per_component() {
    for cfg in configs() {
        let model = SplitUNet::new(cfg.clone(), 1).unwrap();
        let x = Tensor::randn(&[3, 3, 16, 16], &mut rng(0, 0));
        let out = model.predict_noise(&x, &[1, 2, 3], &[0, 0, 0]).unwrap();
        let per = ComponentFlops::of_model(&model).unwrap();
        for (c, analytic) in [
            (Component::Embed, per.embed),
            (Component::HighIn, per.high_in),
            (Component::Low, per.low),
            (Component::HighOut, per.high_out),
        ] {
            assert_eq!(out.flops.flops(c), 3 * analytic, "{c} for {cfg:?}");
        }
        assert_eq!(out.flops.flops(Component::Other), 0);
        assert_eq!(plan_flops(&model.plan(Component::Adaptor).unwrap()).unwrap(), 0);
    }
}

#[test]
fn skip_count_mismatch_is_rejected() {
    let model = SplitUNet::new(tiny(1, None), 0).unwrap();
    let mut tape = Tape::inference();
    let emb = model.embed(&mut tape, &[1], &[0]).unwrap();
    let x = tape.constant(Tensor::zeros(&[1, 3, 16, 16]));
    let high = model.encode_high(&mut tape, x, &emb, &mut NoProbe).unwrap();
    let r_out = model.run_low(&mut tape, high.r_in, &emb, &mut NoProbe).unwrap();
    assert!(model.decode_high(&mut tape, r_out, &high.skips[1..], &emb, &mut NoProbe).is_err());
    let bad = tape.constant(Tensor::zeros(&[1, 3, 8, 8]));
    assert!(model.encode_high(&mut tape, bad, &emb, &mut NoProbe).is_err());
}

#[test]
fn gradient_check_through_full_model() {
    let cfg = UNetConfig {
        image_size: 8,
        channels: vec![8, 16],
        emb_dim: 8,
        time_dim: 8,
        conditioning: Conditioning::Class { classes: 2 },
        ..UNetConfig::default()
    };
    let mut model = SplitUNet::new(cfg, 4).unwrap();
    randomize(&mut model, 4);
    let x = Tensor::randn(&[1, 3, 8, 8], &mut rng(7, 0));
    let model_ref = &model;
    let mut store: ParamStore = model.params.clone();
    let f = |tape: &mut Tape, s: &ParamStore| {
        let mut m = model_ref.clone();
        m.params = s.clone();
        let emb = m.embed(tape, &[300], &[1])?;
        let xv = tape.constant(x.clone());
        let (eps, _, _) = m.predict_noise_on(tape, xv, &emb, &mut NoProbe)?;
        Ok(eps)
    };
    let err = directional_grad_check(&f, &mut store, 1e0, 6, 11).unwrap();
    assert!(err < 1e-3, "directional relative error {err}");
    // single coordinates of a deep f32 graph sit near the rounding floor
    let coord = finite_diff_grad_check(&f, &mut store, 1e-1, 60, 11).unwrap();
    assert!(coord < 5e-3, "coordinate relative error {coord}");
}
