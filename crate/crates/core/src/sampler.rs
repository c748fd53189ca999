//! Noise schedules, inference grids, the DDIM / DPM-Solver update rules and
//! the guided sampling loop.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Error, Result};
use crate::numerics::{rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// β and ᾱ tables over the training discretization. Index `t` runs over
/// `0..t_train`; `alpha_bars[0] = 1 − betas[0]`.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bars: Vec<f64>,
}

impl NoiseSchedule {
    pub fn new(kind: ScheduleKind, t_train: usize) -> Result<Self> {
        if t_train < 10 {
            return config_err(format!("T_train must be at least 10, got {t_train}"));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => {
                let (lo, hi) = (1e-4, 2e-2);
                (0..t_train).map(|i| lo + (hi - lo) * i as f64 / (t_train - 1) as f64).collect()
            }
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| (((t / t_train as f64) + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (1..=t_train).map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, 0.999)).collect()
            }
        };
        let mut alpha_bars = Vec::with_capacity(t_train);
        let mut acc = 1.0f64;
        for b in &betas {
            acc *= 1.0 - b;
            alpha_bars.push(acc);
        }
        Ok(Self { kind, betas, alpha_bars })
    }

    pub fn t_train(&self) -> usize {
        self.betas.len()
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha_bars[t].sqrt()
    }

    pub fn sigma(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bars[t]).sqrt()
    }

    /// Half log-SNR, `ln(α_t/σ_t)`.
    pub fn lambda(&self, t: usize) -> f64 {
        self.alpha(t).ln() - self.sigma(t).ln()
    }

    fn check(&self, t: usize) -> Result<()> {
        if t >= self.t_train() {
            return config_err(format!("timestep {t} outside schedule of length {}", self.t_train()));
        }
        Ok(())
    }

    /// `x_t = α_t·x_0 + σ_t·ε`.
    pub fn add_noise(&self, x0: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
        self.check(t)?;
        x0.axpby(self.alpha(t) as f32, eps, self.sigma(t) as f32)
    }
}

/// Inference timesteps `t_1 > … > t_T`, evenly spaced in training index with
/// `t_1 = T_train − 1`. The step after `t_T` lands on index 0.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimestepGrid {
    steps: Vec<usize>,
}

impl TimestepGrid {
    pub fn uniform(t_train: usize, steps: usize) -> Result<Self> {
        if steps == 0 || steps >= t_train {
            return config_err(format!("cannot place {steps} steps on a schedule of length {t_train}"));
        }
        let top = (t_train - 1) as f64;
        let grid = (1..=steps)
            .map(|i| (top * (steps - i + 1) as f64 / steps as f64).round() as usize)
            .collect();
        Self::from_steps(grid)
    }

    pub fn from_steps(steps: Vec<usize>) -> Result<Self> {
        if steps.is_empty() {
            return config_err("empty timestep grid");
        }
        if steps.windows(2).any(|w| w[1] >= w[0]) {
            return Err(Error::Ordering(format!("grid {steps:?} is not strictly decreasing")));
        }
        if *steps.last().unwrap() == 0 {
            return config_err("the last grid timestep must be above 0");
        }
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[usize] {
        &self.steps
    }

    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Timestep at 1-based step `i`.
    pub fn t(&self, i: usize) -> usize {
        self.steps[i - 1]
    }

    /// Target timestep of 1-based step `i`.
    pub fn t_prev(&self, i: usize) -> usize {
        self.steps.get(i).copied().unwrap_or(0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Solver {
    Ddim,
    /// Second-order multistep in data-prediction form.
    DpmPp2m,
    /// Second-order multistep in noise-prediction form.
    Dpm2m,
}

/// Latent plus the multistep history (at most two entries of prediction
/// and the λ at which it was made).
#[derive(Clone, Debug)]
pub struct SamplerState {
    pub x: Tensor,
    history: Vec<(Tensor, f64)>,
    pub seed: u64,
}

impl SamplerState {
    pub fn new(x: Tensor, seed: u64) -> Self {
        Self { x, history: Vec::new(), seed }
    }

    pub fn history_len(&self) -> usize {
        self.history.len()
    }

    fn push_history(&mut self, pred: Tensor, lambda: f64) {
        self.history.push((pred, lambda));
        if self.history.len() > 2 {
            self.history.remove(0);
        }
    }
}

/// Deterministic DDIM update. `t_prev == t` is the identity.
pub fn ddim_step(schedule: &NoiseSchedule, x: &Tensor, eps: &Tensor, t: usize, t_prev: usize) -> Result<Tensor> {
    schedule.check(t)?;
    x.expect_same_shape(eps)?;
    if t_prev > t {
        return Err(Error::Ordering(format!("DDIM step from {t} to later timestep {t_prev}")));
    }
    if t_prev == t {
        return Ok(x.clone());
    }
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let (ap, sp) = (schedule.alpha(t_prev), schedule.sigma(t_prev));
    let data = x
        .data()
        .iter()
        .zip(eps.data())
        .map(|(&xv, &e)| {
            let x0 = (xv as f64 - s * e as f64) / a;
            (ap * x0 + sp * e as f64) as f32
        })
        .collect();
    Tensor::from_vec(x.shape(), data)
}

/// `x̂_0 = (x_t − σ_t·ε̂)/α_t`.
pub fn predict_x0(schedule: &NoiseSchedule, x: &Tensor, eps: &Tensor, t: usize) -> Result<Tensor> {
    schedule.check(t)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    x.zip_map(eps, |xv, e| ((xv as f64 - s * e as f64) / a) as f32)
}

fn step_size(schedule: &NoiseSchedule, t: usize, t_prev: usize) -> Result<f64> {
    schedule.check(t)?;
    schedule.check(t_prev)?;
    let h = schedule.lambda(t_prev) - schedule.lambda(t);
    if !(h > 0.0) {
        return Err(Error::Ordering(format!("λ does not increase from t={t} to t={t_prev}")));
    }
    Ok(h)
}

/// Two-point extrapolation of a multistep prediction, or the prediction
/// itself when there is no usable history.
fn extrapolate(state: &SamplerState, pred: &Tensor, lambda_t: f64, h: f64) -> Result<Tensor> {
    match state.history.last() {
        None => Ok(pred.clone()),
        Some((prev, lambda_prev)) => {
            let h_prev = lambda_t - lambda_prev;
            if !(h_prev > 0.0) {
                return Err(Error::Ordering("λ history is not increasing".into()));
            }
            let r = h_prev / h;
            let c = 1.0 / (2.0 * r);
            pred.zip_map(prev, |p, q| ((1.0 + c) * p as f64 - c * q as f64) as f32)
        }
    }
}

/// DPM-Solver++(2M) step from data prediction `x0_hat`.
pub fn dpmpp2m_step(
    schedule: &NoiseSchedule,
    state: &mut SamplerState,
    x0_hat: &Tensor,
    t: usize,
    t_prev: usize,
) -> Result<Tensor> {
    state.x.expect_same_shape(x0_hat)?;
    let h = step_size(schedule, t, t_prev)?;
    let lambda_t = schedule.lambda(t);
    let d = extrapolate(state, x0_hat, lambda_t, h)?;
    let ratio = schedule.sigma(t_prev) / schedule.sigma(t);
    let coef = -schedule.alpha(t_prev) * ((-h).exp() - 1.0);
    let next = state.x.zip_map(&d, |x, dv| (ratio * x as f64 + coef * dv as f64) as f32)?;
    state.push_history(x0_hat.clone(), lambda_t);
    state.x = next.clone();
    Ok(next)
}

/// DPM-Solver-2M step from noise prediction `eps`. The first-order case
/// coincides with DDIM.
pub fn dpm2m_step(
    schedule: &NoiseSchedule,
    state: &mut SamplerState,
    eps: &Tensor,
    t: usize,
    t_prev: usize,
) -> Result<Tensor> {
    state.x.expect_same_shape(eps)?;
    let h = step_size(schedule, t, t_prev)?;
    let lambda_t = schedule.lambda(t);
    let d = extrapolate(state, eps, lambda_t, h)?;
    let ratio = schedule.alpha(t_prev) / schedule.alpha(t);
    let coef = -schedule.sigma(t_prev) * h.exp_m1();
    let next = state.x.zip_map(&d, |x, dv| (ratio * x as f64 + coef * dv as f64) as f32)?;
    state.push_history(eps.clone(), lambda_t);
    state.x = next.clone();
    Ok(next)
}

/// Classifier-free guidance `ε_u + w(ε_c − ε_u)`.
pub fn cfg_combine(eps_uncond: &Tensor, eps_cond: &Tensor, w: f32) -> Result<Tensor> {
    eps_uncond.zip_map(eps_cond, |u, c| u + w * (c - u))
}

/// What a noise function reports for one step.
#[derive(Clone, Debug)]
pub struct StepOutput {
    pub eps: Tensor,
    pub r_in: Option<Tensor>,
    pub r_out: Option<Tensor>,
    /// Whether the low-resolution core was replaced by an adaptor.
    pub approximated: bool,
}

impl StepOutput {
    pub fn plain(eps: Tensor) -> Self {
        Self { eps, r_in: None, r_out: None, approximated: false }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryRecord {
    /// 1-based step index on the grid.
    pub step: usize,
    pub t: usize,
    pub x_t: Tensor,
    pub r_in: Option<Tensor>,
    pub r_out: Option<Tensor>,
    pub approximated: bool,
}

/// A full sampling run: one record per grid step plus the final latent.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub conditions: Vec<usize>,
    pub seed: u64,
    pub records: Vec<TrajectoryRecord>,
    pub final_latent: Tensor,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Latent after each step; the last entry is the final latent.
    pub fn outputs(&self) -> Vec<&Tensor> {
        let mut out: Vec<&Tensor> = self.records.iter().skip(1).map(|r| &r.x_t).collect();
        out.push(&self.final_latent);
        out
    }
}

/// Per-step context handed to a noise function.
#[derive(Clone, Copy, Debug)]
pub struct StepCtx {
    pub step: usize,
    pub t: usize,
}

/// Runs `noise_fn` over `grid` starting from `x_T` drawn from `seed`.
pub fn sample_loop<F>(
    mut noise_fn: F,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    solver: Solver,
    shape: &[usize],
    conditions: &[usize],
    seed: u64,
) -> Result<Trajectory>
where
    F: FnMut(&Tensor, StepCtx) -> Result<StepOutput>,
{
    let x_t = Tensor::randn(shape, &mut rng(seed, 0x5a4d));
    sample_loop_from(&mut noise_fn, schedule, grid, solver, x_t, conditions, seed)
}

/// As [`sample_loop`] but from a given starting latent.
pub fn sample_loop_from<F>(
    noise_fn: &mut F,
    schedule: &NoiseSchedule,
    grid: &TimestepGrid,
    solver: Solver,
    x_start: Tensor,
    conditions: &[usize],
    seed: u64,
) -> Result<Trajectory>
where
    F: FnMut(&Tensor, StepCtx) -> Result<StepOutput>,
{
    if grid.steps()[0] >= schedule.t_train() {
        return config_err("grid exceeds the schedule");
    }
    let mut state = SamplerState::new(x_start, seed);
    let mut records = Vec::with_capacity(grid.len());
    for i in 1..=grid.len() {
        let (t, t_prev) = (grid.t(i), grid.t_prev(i));
        let out = noise_fn(&state.x, StepCtx { step: i, t })?;
        out.eps.ensure_finite("noise prediction")?;
        records.push(TrajectoryRecord {
            step: i,
            t,
            x_t: state.x.clone(),
            r_in: out.r_in,
            r_out: out.r_out,
            approximated: out.approximated,
        });
        match solver {
            Solver::Ddim => state.x = ddim_step(schedule, &state.x, &out.eps, t, t_prev)?,
            Solver::DpmPp2m => {
                let x0 = predict_x0(schedule, &state.x, &out.eps, t)?;
                dpmpp2m_step(schedule, &mut state, &x0, t, t_prev)?;
            }
            Solver::Dpm2m => {
                dpm2m_step(schedule, &mut state, &out.eps, t, t_prev)?;
            }
        }
        state.x.ensure_finite("latent")?;
    }
    Ok(Trajectory { conditions: conditions.to_vec(), seed, records, final_latent: state.x })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_schedule_invariants() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();
        assert!(s.alpha_bar(999) < 5e-3);
        assert!((s.alpha_bar(0) - (1.0 - 1e-4)).abs() < 1e-12);
        assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]));
        assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
        assert!((0..999).all(|t| s.lambda(t + 1) < s.lambda(t)));
    }

    #[test]
    fn cosine_and_tiny_schedules_are_monotone() {
        for (kind, n) in [(ScheduleKind::Cosine, 1000), (ScheduleKind::Linear, 10), (ScheduleKind::Cosine, 10)] {
            let s = NoiseSchedule::new(kind, n).unwrap();
            assert!(s.alpha_bars().windows(2).all(|w| w[1] < w[0]), "{kind:?} {n}");
            assert!(s.alpha_bars().iter().all(|&a| a > 0.0 && a < 1.0));
            assert!((0..n - 1).all(|t| s.lambda(t + 1) < s.lambda(t)));
        }
        assert!(NoiseSchedule::new(ScheduleKind::Linear, 9).is_err());
    }

    #[test]
    fn grid_is_even_and_endpoint_inclusive() {
        let g = TimestepGrid::uniform(1000, 8).unwrap();
        assert_eq!(g.steps(), &[999, 874, 749, 624, 500, 375, 250, 125]);
        assert_eq!(g.t_prev(8), 0);
        assert!(TimestepGrid::uniform(10, 10).is_err());
        assert!(matches!(TimestepGrid::from_steps(vec![5, 7]), Err(Error::Ordering(_))));
    }

    #[test]
    fn ddim_zero_noise_and_identity_cases() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();
        let x = Tensor::from_vec(&[2], vec![0.5, -1.5]).unwrap();
        let y = ddim_step(&s, &x, &Tensor::zeros(&[2]), 600, 300).unwrap();
        let ratio = s.alpha(300) / s.alpha(600);
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((*a as f64 - ratio * *b as f64).abs() < 1e-6);
        }
        assert_eq!(ddim_step(&s, &x, &x, 300, 300).unwrap(), x);
        assert!(matches!(ddim_step(&s, &x, &x, 300, 301), Err(Error::Ordering(_))));
    }

    #[test]
    fn dpmpp_constant_prediction_matches_first_order() {
        let s = NoiseSchedule::new(ScheduleKind::Linear, 1000).unwrap();
        let x0 = Tensor::from_vec(&[3], vec![0.2, -0.4, 0.9]).unwrap();
        let start = Tensor::from_vec(&[3], vec![1.0, 0.3, -0.7]).unwrap();
        let mut multi = SamplerState::new(start.clone(), 0);
        dpmpp2m_step(&s, &mut multi, &x0, 999, 749).unwrap();
        let second = dpmpp2m_step(&s, &mut multi, &x0, 749, 500).unwrap();
        let mut fresh = SamplerState::new(multi_prev(&s, &start, &x0), 0);
        let first = dpmpp2m_step(&s, &mut fresh, &x0, 749, 500).unwrap();
        assert!(second.max_abs_diff(&first).unwrap() < 1e-6);
        assert_eq!(multi.history_len(), 2);
        dpmpp2m_step(&s, &mut multi, &x0, 500, 250).unwrap();
        assert_eq!(multi.history_len(), 2);
    }

    fn multi_prev(s: &NoiseSchedule, start: &Tensor, x0: &Tensor) -> Tensor {
        let mut st = SamplerState::new(start.clone(), 0);
        dpmpp2m_step(s, &mut st, x0, 999, 749).unwrap()
    }

    #[test]
    fn dpm_first_order_equals_ddim() {
        let s = NoiseSchedule::new(ScheduleKind::Cosine, 1000).unwrap();
        let x = Tensor::from_vec(&[2], vec![0.8, -0.1]).unwrap();
        let e = Tensor::from_vec(&[2], vec![0.3, 1.2]).unwrap();
        let mut st = SamplerState::new(x.clone(), 0);
        let a = dpm2m_step(&s, &mut st, &e, 700, 400).unwrap();
        let b = ddim_step(&s, &x, &e, 700, 400).unwrap();
        assert!(a.max_abs_diff(&b).unwrap() < 1e-5);
    }

    #[test]
    fn cfg_limits() {
        let u = Tensor::from_vec(&[2], vec![1.0, 2.0]).unwrap();
        let c = Tensor::from_vec(&[2], vec![-1.0, 5.0]).unwrap();
        assert_eq!(cfg_combine(&u, &c, 0.0).unwrap(), u);
        assert_eq!(cfg_combine(&u, &c, 1.0).unwrap(), c);
        assert_eq!(cfg_combine(&u, &c, 3.0).unwrap().data(), &[-5.0, 11.0]);
    }
}
