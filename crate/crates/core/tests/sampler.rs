use clockwork::numerics::{rng, Tensor};
use clockwork::sampler::{
    ddim_step, dpm2m_step, dpmpp2m_step, predict_x0, sample_loop, NoiseSchedule, SamplerState, ScheduleKind, Solver,
    StepOutput, TimestepGrid,
};
use proptest::prelude::*;

fn linear() -> NoiseSchedule {
    NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap()
}

#[test]
fn ddim_with_linear_denoiser_matches_closed_form_on_two_pixels() {
    // eps_hat = A x with A = [[0.5, 0.2], [-0.1, 0.9]]
    let s = linear();
    let x = [1.3f64, -0.4];
    let eps = [0.5 * x[0] + 0.2 * x[1], -0.1 * x[0] + 0.9 * x[1]];
    let (t, tp) = (999, 874);
    let (a, sg) = ((s.alpha_bar(t)).sqrt(), (1.0 - s.alpha_bar(t)).sqrt());
    let (ap, sp) = ((s.alpha_bar(tp)).sqrt(), (1.0 - s.alpha_bar(tp)).sqrt());
    let want: Vec<f64> = (0..2).map(|k| ap * (x[k] - sg * eps[k]) / a + sp * eps[k]).collect();

    let xt = Tensor::from_vec(&[1, 2], x.iter().map(|&v| v as f32).collect()).unwrap();
    let et = Tensor::from_vec(&[1, 2], eps.iter().map(|&v| v as f32).collect()).unwrap();
    let got = ddim_step(&s, &xt, &et, t, tp).unwrap();
    for (g, w) in got.data().iter().zip(&want) {
        assert!((*g as f64 - w).abs() < 1e-5 * w.abs().max(1.0), "{g} vs {w}");
    }
}

#[test]
fn dpmpp_first_step_is_the_exponential_integrator_formula() {
    let s = NoiseSchedule::new(ScheduleKind::Cosine, 1000).unwrap();
    let x = Tensor::from_vec(&[3], vec![0.7, -1.1, 0.2]).unwrap();
    let x0 = Tensor::from_vec(&[3], vec![0.1, 0.4, -0.6]).unwrap();
    let (t, tp) = (800, 550);
    let h = s.lambda(tp) - s.lambda(t);
    let mut st = SamplerState::new(x.clone(), 0);
    let got = dpmpp2m_step(&s, &mut st, &x0, t, tp).unwrap();
    for k in 0..3 {
        let want = s.sigma(tp) / s.sigma(t) * x.data()[k] as f64 - s.alpha(tp) * ((-h).exp() - 1.0) * x0.data()[k] as f64;
        assert!((got.data()[k] as f64 - want).abs() < 1e-6);
    }
    assert_eq!(st.history_len(), 1);
}

#[test]
fn one_step_with_perfect_denoiser_recovers_the_mode() {
    let s = linear();
    let mode = Tensor::from_vec(&[1, 4], vec![0.8, -0.5, 0.3, 1.0]).unwrap();
    let grid = TimestepGrid::uniform(1000, 1).unwrap();
    let denoise = |x: &Tensor, ctx: clockwork::sampler::StepCtx| {
        let (a, sg) = (s.alpha(ctx.t), s.sigma(ctx.t));
        let eps = x.zip_map(&mode, |xv, m| ((xv as f64 - a * m as f64) / sg) as f32)?;
        Ok(StepOutput::plain(eps))
    };
    let traj = sample_loop(denoise, &s, &grid, Solver::Ddim, &[1, 4], &[0], 3).unwrap();
    // the final step lands on t=0, whose residual noise level is σ_0
    let x_t = &traj.records[0].x_t;
    let eps_max = x_t.data().iter().zip(mode.data()).map(|(&x, &m)| {
        ((x as f64 - s.alpha(999) * m as f64) / s.sigma(999)).abs()
    });
    let bound = (1.0 - s.alpha(0)) + s.sigma(0) * eps_max.fold(0.0, f64::max) + 1e-5;
    assert!(traj.final_latent.max_abs_diff(&mode).unwrap() as f64 <= bound);
    assert!(bound < 0.05);
}

fn wobbly(x: &Tensor, ctx: clockwork::sampler::StepCtx) -> clockwork::Result<StepOutput> {
    let phase = ctx.t as f32 / 1000.0;
    Ok(StepOutput::plain(x.map(|v| 0.6 * v + phase.sin() * 0.1)))
}

#[test]
fn sampling_is_deterministic_and_records_every_step() {
    let s = linear();
    let grid = TimestepGrid::uniform(1000, 8).unwrap();
    for solver in [Solver::Ddim, Solver::DpmPp2m, Solver::Dpm2m] {
        let a = sample_loop(wobbly, &s, &grid, solver, &[2, 3, 4, 4], &[1, 2], 9).unwrap();
        let b = sample_loop(wobbly, &s, &grid, solver, &[2, 3, 4, 4], &[1, 2], 9).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 8);
        assert_eq!(a.records.iter().map(|r| r.t).collect::<Vec<_>>(), grid.steps());
        let c = sample_loop(wobbly, &s, &grid, solver, &[2, 3, 4, 4], &[1, 2], 10).unwrap();
        assert_ne!(a.final_latent, c.final_latent);
    }
}

#[test]
fn non_finite_prediction_aborts() {
    let s = linear();
    let grid = TimestepGrid::uniform(1000, 4).unwrap();
    let bad = |x: &Tensor, _| Ok(StepOutput::plain(x.map(|_| f32::NAN)));
    assert!(sample_loop(bad, &s, &grid, Solver::Ddim, &[1, 2], &[0], 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn multistep_history_stays_bounded(steps in 2usize..20, seed in 0u64..1000) {
        let s = linear();
        let grid = TimestepGrid::uniform(1000, steps).unwrap();
        let x = Tensor::randn(&[6], &mut rng(seed, 1));
        let mut st = SamplerState::new(x.clone(), seed);
        let mut dst = SamplerState::new(x, seed);
        for i in 1..=grid.len() {
            let (t, tp) = (grid.t(i), grid.t_prev(i));
            prop_assert!(s.lambda(tp) > s.lambda(t));
            let eps = st.x.map(|v| 0.5 * v);
            let x0 = predict_x0(&s, &st.x, &eps, t).unwrap();
            dpmpp2m_step(&s, &mut st, &x0, t, tp).unwrap();
            let deps = dst.x.map(|v| 0.5 * v);
            dpm2m_step(&s, &mut dst, &deps, t, tp).unwrap();
            prop_assert!(st.history_len() <= 2 && dst.history_len() <= 2);
            prop_assert_eq!(st.x.shape(), &[6]);
        }
    }

    #[test]
    fn ddim_round_trip_with_zero_noise_is_a_pure_rescale(t in 1usize..1000, frac in 0.0f64..1.0, v in -3.0f32..3.0) {
        let s = linear();
        let tp = (t as f64 * frac) as usize;
        let x = Tensor::from_vec(&[1], vec![v]).unwrap();
        let y = ddim_step(&s, &x, &Tensor::zeros(&[1]), t, tp).unwrap();
        let want = s.alpha(tp) / s.alpha(t) * v as f64;
        prop_assert!((y.data()[0] as f64 - want).abs() <= 1e-5 * want.abs().max(1.0));
    }
}
