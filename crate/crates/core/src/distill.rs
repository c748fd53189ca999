//! Teacher training, unrolled trajectories and adaptor distillation.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adaptor::{Adaptor, AdaptorInputs};
use crate::clockwork::{generate, ClockSchedule, Pipeline, SampleSpec};
use crate::error::{config_err, Error, Result};
use crate::numerics::{rng, AdamState, Tape, Tensor};
use crate::sampler::{NoiseSchedule, Trajectory};
use crate::unet::{GuidanceBatch, NoProbe, SplitUNet, UNetConfig};

pub const SHAPES: usize = 4;
pub const COLORS: usize = 4;

/// Procedural scenes: one of four shapes in one of four colors on a
/// textured background. Class `c` is shape `c / 4`, color `c % 4`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ToyDataset {
    pub image_size: usize,
    /// When false, every image request fails. Unrolled distillation never
    /// asks for one.
    pub enabled: bool,
}

impl Default for ToyDataset {
    fn default() -> Self {
        Self { image_size: 32, enabled: true }
    }
}

const PALETTE: [[f32; 3]; COLORS] = [[0.9, -0.7, -0.7], [-0.7, 0.8, -0.6], [-0.6, -0.5, 0.9], [0.9, 0.8, -0.7]];

impl ToyDataset {
    pub fn classes(&self) -> usize {
        SHAPES * COLORS
    }

    /// `[3, S, S]` image in `[-1, 1]`, fixed by `(class, seed)`.
    pub fn render(&self, class: usize, seed: u64) -> Result<Tensor> {
        if !self.enabled {
            return config_err("the image dataset is disabled");
        }
        if class >= self.classes() {
            return config_err(format!("class {class} outside 0..{}", self.classes()));
        }
        let s = self.image_size;
        let sf = s as f32;
        let r = &mut rng(seed, 0x1000 + class as u64);
        let (fx, fy, phase) = (r.random_range(0.3..0.9f32), r.random_range(0.3..0.9f32), r.random_range(0.0..6.28f32));
        let tint = r.random_range(-0.35..-0.05f32);
        let cx = sf / 2.0 + r.random_range(-sf / 8.0..sf / 8.0);
        let cy = sf / 2.0 + r.random_range(-sf / 8.0..sf / 8.0);
        let rad = sf * r.random_range(0.22..0.32f32);
        let color = PALETTE[class % COLORS];
        let shape = class / COLORS;
        let mut data = vec![0f32; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                let (px, py) = (x as f32 + 0.5 - cx, y as f32 + 0.5 - cy);
                let inside = match shape {
                    0 => px * px + py * py <= rad * rad,
                    1 => px.abs() <= rad * 0.85 && py.abs() <= rad * 0.85,
                    2 => py <= rad * 0.8 && py >= -rad && px.abs() <= (py + rad) * 0.6,
                    _ => (px.abs() <= rad * 0.3 && py.abs() <= rad) || (py.abs() <= rad * 0.3 && px.abs() <= rad),
                };
                let grain = r.random_range(-0.05..0.05f32);
                let bg = tint + 0.15 * (fx * x as f32 + fy * y as f32 + phase).sin() + grain;
                for ch in 0..3 {
                    data[(ch * s + y) * s + x] = if inside { color[ch] + 0.5 * grain } else { bg };
                }
            }
        }
        Tensor::from_vec(&[3, s, s], data)
    }

    pub fn batch(&self, items: &[(usize, u64)]) -> Result<Tensor> {
        let imgs = items.iter().map(|&(c, s)| self.render(c, s)).collect::<Result<Vec<_>>>()?;
        let refs: Vec<&Tensor> = imgs.iter().collect();
        let s = self.image_size;
        Tensor::cat_batch(&refs)?.reshape(&[items.len(), 3, s, s])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRow {
    pub epoch: usize,
    pub step: usize,
    pub loss: f64,
}

pub fn loss_csv(rows: &[LossRow]) -> String {
    let mut out = String::from("epoch,step,loss\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.8}\n", r.epoch, r.step, r.loss));
    }
    out
}

fn recent_losses(history: &[LossRow]) -> String {
    let recent: Vec<String> = history.iter().rev().take(5).map(|r| format!("{:.4}", r.loss)).collect();
    recent.join(", ")
}

fn check_loss(loss: f64, step: usize, history: &[LossRow]) -> Result<()> {
    if loss.is_finite() {
        return Ok(());
    }
    Err(Error::Numeric(format!("loss diverged to {loss} at step {step}; last losses [{}]", recent_losses(history))))
}

/// Adds the step and recent losses to numeric failures raised mid-step.
fn at_step<T>(r: Result<T>, step: usize, history: &[LossRow]) -> Result<T> {
    r.map_err(|e| match e {
        Error::Numeric(m) => Error::Numeric(format!("{m} at step {step}; last losses [{}]", recent_losses(history))),
        e => e,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaseTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f32,
    pub cond_dropout: f64,
    pub steps_per_epoch: usize,
    /// Restricts training to this many fixed images (overfitting runs).
    pub dataset_size: Option<usize>,
}

impl Default for BaseTrainConfig {
    fn default() -> Self {
        Self { steps: 4000, batch: 16, lr: 1e-3, cond_dropout: 0.1, steps_per_epoch: 100, dataset_size: None }
    }
}

/// ε-matching DDPM training of `model` on the toy scenes.
pub fn train_base(
    model: &mut SplitUNet,
    data: &ToyDataset,
    schedule: &NoiseSchedule,
    cfg: &BaseTrainConfig,
    seed: u64,
) -> Result<Vec<LossRow>> {
    let k = match model.config.num_classes() {
        Some(k) if k == data.classes() => k,
        Some(k) => return config_err(format!("model has {k} classes, dataset {}", data.classes())),
        None => data.classes(),
    };
    if model.config.image_size != data.image_size {
        return config_err("model and dataset image sizes differ");
    }
    if cfg.batch == 0 || cfg.steps_per_epoch == 0 {
        return config_err("batch and steps_per_epoch must be positive");
    }
    let null = model.config.null_class();
    let mut adam = AdamState::new(&model.params, cfg.lr);
    let r = &mut rng(seed, 0xba5e);
    let mut rows = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut items = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            match cfg.dataset_size {
                Some(n) => {
                    let idx = r.random_range(0..n as u64);
                    items.push(((idx as usize) % k, idx));
                }
                None => items.push((r.random_range(0..k), r.random())),
            }
        }
        let x0 = data.batch(&items)?;
        let eps = Tensor::randn(x0.shape(), r);
        let ts: Vec<usize> = (0..cfg.batch).map(|_| r.random_range(0..schedule.t_train())).collect();
        let mut xt = Vec::with_capacity(cfg.batch);
        for (b, &t) in ts.iter().enumerate() {
            xt.push(schedule.add_noise(&x0.batch_item(b)?, &eps.batch_item(b)?, t)?);
        }
        let xt = Tensor::cat_batch(&xt.iter().collect::<Vec<_>>())?;
        let classes: Vec<usize> =
            items.iter().map(|&(c, _)| if r.random_bool(cfg.cond_dropout) { null } else { c }).collect();

        let loss = at_step(
            (|| {
                let mut tape = Tape::new();
                let emb = model.embed(&mut tape, &ts, &classes)?;
                let xv = tape.constant(xt);
                let (pred, _, _) = model.predict_noise_on(&mut tape, xv, &emb, &mut NoProbe)?;
                let loss_v = tape.mse_loss(pred, &eps)?;
                let loss = tape.value(loss_v).data()[0] as f64;
                check_loss(loss, step, &rows)?;
                let grads = tape.backward(loss_v)?;
                model.params.zero_grad();
                model.params.accumulate(&tape, &grads)?;
                adam.step(&mut model.params)?;
                Ok(loss)
            })(),
            step,
            &rows,
        )?;
        rows.push(LossRow { epoch: step / cfg.steps_per_epoch, step, loss });
    }
    Ok(rows)
}

/// Where an adaptor is meant to run: sampler settings and clock.
#[derive(Clone)]
pub struct OperatingPoint<'a> {
    pub sample: SampleSpec<'a>,
    pub clock: &'a ClockSchedule,
}

/// Class ids of the denoiser batch for `conditions` under guidance `w`.
pub fn guided_classes(config: &UNetConfig, conditions: &[usize], w: f32) -> Vec<usize> {
    let mut cls = conditions.to_vec();
    if config.num_classes().is_some() && w != 1.0 {
        cls.extend(std::iter::repeat_n(config.null_class(), conditions.len()));
    }
    cls
}

fn pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Teacher trajectories with `r_in`/`r_out` recorded at every step.
/// Trajectory `k` uses seed `(seed, k)` and class `conditions[k % len]`, so
/// the set does not depend on `workers`.
pub fn unroll_dataset(
    teacher: &SplitUNet,
    sample: &SampleSpec<'_>,
    conditions: &[usize],
    n: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<Trajectory>> {
    if conditions.is_empty() {
        return config_err("unrolling needs at least one condition");
    }
    let identity = Adaptor::new(crate::adaptor::AdaptorSpec::identity(), teacher.config.rep_shape(), 1, 0)?;
    let off = ClockSchedule::off();
    let pipe = Pipeline { model: teacher, adaptor: &identity, clock: &off };
    pool(workers)?.install(|| {
        (0..n)
            .into_par_iter()
            .map(|k| {
                let s = rng(seed, k as u64).random::<u64>();
                Ok(generate(pipe, sample, &[conditions[k % conditions.len()]], s)?.trajectory)
            })
            .collect()
    })
}

/// One adaptor training example: the denoiser rows of one step.
#[derive(Clone, Debug)]
pub struct StepExample {
    pub r_in: Tensor,
    /// Absent on step 1.
    pub r_out_prev: Option<Tensor>,
    pub target: Tensor,
    pub t: usize,
    pub classes: Vec<usize>,
}

/// Examples at every step of `trajectories` where the clock fires.
pub fn unrolled_examples(
    config: &UNetConfig,
    trajectories: &[Trajectory],
    clock: &ClockSchedule,
    w: f32,
) -> Result<Vec<StepExample>> {
    let mut out = Vec::new();
    for traj in trajectories {
        let classes = guided_classes(config, &traj.conditions, w);
        for i in clock.adaptor_steps(traj.len()) {
            let rec = &traj.records[i - 1];
            let missing = || Error::Protocol(format!("trajectory step {i} lacks recorded representations"));
            let r_out_prev = match i {
                1 => None,
                _ => Some(traj.records[i - 2].r_out.clone().ok_or_else(missing)?),
            };
            out.push(StepExample {
                r_in: rec.r_in.clone().ok_or_else(missing)?,
                r_out_prev,
                target: rec.r_out.clone().ok_or_else(missing)?,
                t: rec.t,
                classes: classes.clone(),
            });
        }
    }
    Ok(out)
}

/// Embedding values from the frozen teacher.
fn teacher_embeddings(teacher: &SplitUNet, ts: &[usize], classes: &[usize]) -> Result<(Tensor, Option<Tensor>)> {
    let mut tape = Tape::inference();
    let emb = teacher.embed(&mut tape, ts, classes)?;
    Ok((tape.take_value(emb.t_emb), emb.c_emb.map(|c| tape.take_value(c))))
}

/// Mean over rows of `‖r_out − φ(r_in, r_out_prev, t_emb, c_emb)‖₂` on a
/// fresh tape; returns the tape and the loss node.
fn batch_loss(adaptor: &Adaptor, teacher: &SplitUNet, examples: &[&StepExample], train: bool) -> Result<(Tape, crate::numerics::Var)> {
    let cat = |f: &dyn Fn(&StepExample) -> &Tensor| Tensor::cat_batch(&examples.iter().map(|e| f(e)).collect::<Vec<_>>());
    let r_in = cat(&|e| &e.r_in)?;
    let prev = match examples.iter().map(|e| e.r_out_prev.as_ref()).collect::<Option<Vec<_>>>() {
        Some(p) => Some(Tensor::cat_batch(&p)?),
        None => None,
    };
    let target = cat(&|e| &e.target)?;
    let mut ts = Vec::new();
    let mut cls = Vec::new();
    for e in examples {
        if e.classes.len() != e.r_in.shape()[0] {
            return config_err("example class count does not match its rows");
        }
        ts.extend(std::iter::repeat_n(e.t, e.classes.len()));
        cls.extend_from_slice(&e.classes);
    }
    let (t_emb, c_emb) = teacher_embeddings(teacher, &ts, &cls)?;
    let mut tape = if train { Tape::new() } else { Tape::inference() };
    let inputs = AdaptorInputs {
        r_in: Some(tape.constant(r_in)),
        r_out_prev: prev.map(|p| tape.constant(p)),
        t_emb: Some(tape.constant(t_emb)),
        c_emb: c_emb.map(|c| tape.constant(c)),
    };
    let pred = adaptor.forward(&mut tape, inputs)?;
    let loss = tape.l2_norm_mean(pred, &target)?;
    Ok((tape, loss))
}

/// The adaptor loss on one example.
pub fn adaptor_step_loss(adaptor: &Adaptor, teacher: &SplitUNet, example: &StepExample) -> Result<f64> {
    let (tape, loss) = batch_loss(adaptor, teacher, &[example], false)?;
    Ok(tape.value(loss).data()[0] as f64)
}

/// Row-weighted mean loss over `examples`.
pub fn mean_adaptor_loss(adaptor: &Adaptor, teacher: &SplitUNet, examples: &[StepExample]) -> Result<f64> {
    if examples.is_empty() {
        return config_err("no examples to evaluate");
    }
    let mut total = 0.0;
    let mut rows = 0;
    for chunk in examples.chunks(16) {
        let refs: Vec<&StepExample> = chunk.iter().collect();
        let n: usize = chunk.iter().map(|e| e.classes.len()).sum();
        let (tape, loss) = batch_loss(adaptor, teacher, &refs, false)?;
        total += tape.value(loss).data()[0] as f64 * n as f64;
        rows += n;
    }
    Ok(total / rows as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptorTrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f32,
    pub trajectories_per_epoch: usize,
    /// Unroll a fresh trajectory set every epoch instead of reusing one.
    pub regenerate: bool,
    pub workers: usize,
}

impl Default for AdaptorTrainConfig {
    fn default() -> Self {
        Self { epochs: 20, batch: 16, lr: 1e-4, trajectories_per_epoch: 256, regenerate: false, workers: 1 }
    }
}

fn fit_epoch(
    adaptor: &mut Adaptor,
    teacher: &SplitUNet,
    adam: &mut AdamState,
    examples: &[StepExample],
    cfg: &AdaptorTrainConfig,
    epoch: usize,
    seed: u64,
    rows: &mut Vec<LossRow>,
) -> Result<()> {
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut rng(seed, 0x5400 + epoch as u64));
    for chunk in order.chunks(cfg.batch.max(1)) {
        let batch: Vec<&StepExample> = chunk.iter().map(|&k| &examples[k]).collect();
        let loss = at_step(
            (|| {
                let (tape, loss_v) = batch_loss(adaptor, teacher, &batch, true)?;
                let loss = tape.value(loss_v).data()[0] as f64;
                check_loss(loss, rows.len(), rows)?;
                let grads = tape.backward(loss_v)?;
                adaptor.params.zero_grad();
                adaptor.params.accumulate(&tape, &grads)?;
                adam.step(&mut adaptor.params)?;
                Ok(loss)
            })(),
            rows.len(),
            rows,
        )?;
        rows.push(LossRow { epoch, step: rows.len(), loss });
    }
    Ok(())
}

fn check_operating_point(teacher: &SplitUNet, adaptor: &Adaptor, op: &OperatingPoint<'_>) -> Result<()> {
    if adaptor.rep_shape != teacher.config.rep_shape() || adaptor.emb_dim != teacher.config.emb_dim {
        return config_err("adaptor does not fit the teacher's representation");
    }
    if op.clock.is_adaptor(1) && adaptor.spec.needs_previous() {
        return config_err("the clock fires on step 1 but the adaptor needs the previous r_out");
    }
    if op.clock.is_off_for(op.sample.grid.len()) {
        return config_err("the clock never fires on this grid; nothing to train");
    }
    Ok(())
}

/// Adaptor training on teacher trajectories. Needs class ids only.
pub fn train_adaptor_unrolled(
    teacher: &SplitUNet,
    adaptor: &mut Adaptor,
    op: &OperatingPoint<'_>,
    conditions: &[usize],
    cfg: &AdaptorTrainConfig,
    seed: u64,
) -> Result<Vec<LossRow>> {
    check_operating_point(teacher, adaptor, op)?;
    let mut adam = AdamState::new(&adaptor.params, cfg.lr);
    let mut rows = Vec::new();
    let unroll = |epoch: u64| -> Result<Vec<StepExample>> {
        let set = unroll_dataset(teacher, &op.sample, conditions, cfg.trajectories_per_epoch, seed ^ (epoch << 32), cfg.workers)?;
        unrolled_examples(&teacher.config, &set, op.clock, op.sample.guidance)
    };
    let mut examples = unroll(0)?;
    for epoch in 0..cfg.epochs {
        if cfg.regenerate && epoch > 0 {
            examples = unroll(epoch as u64)?;
        }
        fit_epoch(adaptor, teacher, &mut adam, &examples, cfg, epoch, seed, &mut rows)?;
    }
    Ok(rows)
}

/// `r_in` and `r_out` of the teacher on a guided batch.
fn teacher_reps(teacher: &SplitUNet, x: &Tensor, t: usize, conditions: &[usize], w: f32) -> Result<(Tensor, Tensor)> {
    let batch = GuidanceBatch::new(&teacher.config, x, t, conditions, w)?;
    let mut tape = Tape::inference();
    let emb = teacher.embed(&mut tape, &batch.t, &batch.classes)?;
    let xv = tape.constant(batch.x);
    let high = teacher.encode_high(&mut tape, xv, &emb, &mut NoProbe)?;
    let r_out = teacher.run_low(&mut tape, high.r_in, &emb, &mut NoProbe)?;
    Ok((tape.take_value(high.r_in), tape.take_value(r_out)))
}

/// Examples built by forward-noising dataset images: for an adaptor step
/// `i`, the same `x_0` and `ε` give `x` at `t_i` and at `t_{i−1}`, and the
/// teacher supplies `r_out` at `t_{i−1}` plus `r_in`, `r_out` at `t_i`.
pub fn regular_examples(
    teacher: &SplitUNet,
    data: &ToyDataset,
    op: &OperatingPoint<'_>,
    per_step: usize,
    seed: u64,
    workers: usize,
) -> Result<Vec<StepExample>> {
    let grid = op.sample.grid;
    let steps = op.clock.adaptor_steps(grid.len());
    let w = op.sample.guidance;
    let k = data.classes();
    let jobs: Vec<(usize, usize)> = steps.iter().flat_map(|&i| (0..per_step).map(move |j| (i, j))).collect();
    pool(workers)?.install(|| {
        jobs.par_iter()
            .map(|&(i, j)| {
                let r = &mut rng(seed, ((i as u64) << 32) | j as u64);
                let class = r.random_range(0..k);
                let x0 = data.batch(&[(class, r.random())])?;
                let eps = Tensor::randn(x0.shape(), r);
                let t = grid.t(i);
                let x_t = op.sample.schedule.add_noise(&x0, &eps, t)?;
                let r_out_prev = match i {
                    1 => None,
                    _ => {
                        let t_before = grid.t(i - 1);
                        let x_before = op.sample.schedule.add_noise(&x0, &eps, t_before)?;
                        Some(teacher_reps(teacher, &x_before, t_before, &[class], w)?.1)
                    }
                };
                let (r_in, target) = teacher_reps(teacher, &x_t, t, &[class], w)?;
                Ok(StepExample { r_in, r_out_prev, target, t, classes: guided_classes(&teacher.config, &[class], w) })
            })
            .collect()
    })
}

/// Adaptor training on forward-noised images (two teacher passes per
/// example). Uses as many examples per epoch as the unrolled scheme would.
pub fn train_adaptor_regular(
    teacher: &SplitUNet,
    adaptor: &mut Adaptor,
    op: &OperatingPoint<'_>,
    data: &ToyDataset,
    cfg: &AdaptorTrainConfig,
    seed: u64,
) -> Result<Vec<LossRow>> {
    check_operating_point(teacher, adaptor, op)?;
    let mut adam = AdamState::new(&adaptor.params, cfg.lr);
    let mut rows = Vec::new();
    let draw = |epoch: u64| regular_examples(teacher, data, op, cfg.trajectories_per_epoch, seed ^ (epoch << 32), cfg.workers);
    let mut examples = draw(0)?;
    for epoch in 0..cfg.epochs {
        if cfg.regenerate && epoch > 0 {
            examples = draw(epoch as u64)?;
        }
        fit_epoch(adaptor, teacher, &mut adam, &examples, cfg, epoch, seed, &mut rows)?;
    }
    Ok(rows)
}
