//! Command-line front end.
//!
//! Precedence: built-in defaults < `--config` file < flags. The resolved
//! configuration is written to `<runs-dir>/<name>/config.json`; running the
//! same subcommand with `--config` pointing at that file reproduces every
//! output except wall-clock latency.
//!
//! Exit codes: 0 success, 2 bad configuration or usage, 3 numeric failure,
//! 1 anything else.

pub mod config;

use std::ffi::OsString;
use std::fs;
use std::path::PathBuf;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde_json::{json, Value};

use crate::adaptor::{Adaptor, AdaptorKind, AdaptorSpec};
use crate::analysis::{perturb_sweep, quality, sweep_csv, to_unit_range, FeatureNet};
use crate::clockwork::{generate, generate_many, ClockSchedule, Pipeline, SampleSpec};
use crate::cost::{latency_bench, latency_csv, pipeline_flops, pnp_flops, FlopReport};
use crate::distill::{loss_csv, train_adaptor_regular, train_adaptor_unrolled, train_base, LossRow, OperatingPoint};
use crate::error::Error;
use crate::store::{write_ppm, Archive};
use crate::unet::SplitUNet;
pub use config::RunConfig;
use config::{group_thousands, parse_clock, parse_pnp};

pub const NO_PROVENANCE: &str = "checkpoint lacks training provenance";

#[derive(Parser, Debug)]
#[command(name = "clockwork", version, about = "Split-UNet diffusion with clock-scheduled adaptors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the base denoiser on the toy scenes.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Optimizer steps.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        lr: Option<f32>,
        /// Image size of both the dataset and the model.
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Train an adaptor against a teacher checkpoint.
    Distill {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        /// Forward-noised dataset images instead of unrolled trajectories.
        #[arg(long)]
        regular: bool,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Generate samples, with or without the clock.
    Sample {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Perturbation robustness sweep over the configured sites.
    Perturb {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// FLOP report, latency timings and plug-and-play cost.
    Profile {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
        /// Plug-and-play cost terms: N_I=.. C_I=.. N_G=.. C_G=.. F=.. FH=..
        #[arg(long, num_args = 6, value_name = "KEY=VALUE")]
        pnp: Option<Vec<String>>,
    },
    /// Paired baseline and clockwork runs with quality and cost.
    Compare {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        sampling: Sampling,
    },
}

#[derive(Args, Debug)]
struct Common {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run name; outputs go under <runs-dir>/<name>/ (defaults to the subcommand).
    #[arg(long)]
    name: Option<String>,
    #[arg(long, default_value = "runs")]
    runs_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Threads for trajectory generation; results do not depend on it.
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct Sampling {
    /// Teacher (base model) checkpoint.
    #[arg(long)]
    teacher: Option<String>,
    /// Trained adaptor checkpoint.
    #[arg(long)]
    adaptor_ckpt: Option<String>,
    /// Adaptor kind: identity, resnet or unet-light.
    #[arg(long)]
    adaptor: Option<String>,
    /// off, a period N, or a comma-separated list of adaptor steps.
    #[arg(long)]
    clock: Option<String>,
    /// Inference steps.
    #[arg(long)]
    steps: Option<usize>,
    /// ddim, dpm-pp2m or dpm2m.
    #[arg(long)]
    solver: Option<String>,
    /// Classifier-free guidance scale (1 disables guidance).
    #[arg(long)]
    guidance: Option<f32>,
    #[arg(long)]
    samples: Option<usize>,
}

/// Parses `args` (without the program name) and runs the subcommand.
/// Diagnostics go to stderr; the return value is the exit code.
pub fn dispatch<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv = std::iter::once(OsString::from("clockwork")).chain(args.into_iter().map(Into::into));
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            let kind = match code {
                2 => "config",
                3 => "numeric",
                _ => "runtime",
            };
            eprintln!("clockwork: error[{kind}]: {e:#}");
            code
        }
    }
}

fn exit_code(e: &anyhow::Error) -> i32 {
    match e.chain().find_map(|c| c.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Parse { .. } | Error::Version { .. } | Error::Json(_) | Error::Statistical(_)) => 2,
        Some(Error::Numeric(_)) => 3,
        _ => 1,
    }
}

type Res<T> = anyhow::Result<T>;

fn enum_arg<T: DeserializeOwned>(what: &str, s: &str) -> Res<T> {
    serde_json::from_value(json!(s.replace('-', "_")))
        .map_err(|_| Error::Config(format!("unknown {what} `{s}`")).into())
}

/// Built-in defaults, then the config file, then `--seed`.
fn base_config(common: &Common) -> Res<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => match common.seed {
            Some(seed) => RunConfig::with_seed(seed),
            None => return Err(Error::Config("a seed is required (--seed or \"seed\" in --config)".into()).into()),
        },
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(w) = common.workers {
        cfg.train.adaptor.workers = w;
    }
    Ok(cfg)
}

fn apply_sampling(cfg: &mut RunConfig, s: &Sampling) -> Res<()> {
    if let Some(t) = &s.teacher {
        cfg.checkpoints.teacher = Some(t.clone());
    }
    if let Some(a) = &s.adaptor_ckpt {
        cfg.checkpoints.adaptor = Some(a.clone());
    }
    if let Some(k) = &s.adaptor {
        cfg.adaptor.kind = enum_arg::<AdaptorKind>("adaptor kind", k)?;
    }
    if let Some(c) = &s.clock {
        cfg.clock = parse_clock(c)?;
    }
    if let Some(n) = s.steps {
        cfg.sampler.steps = n;
    }
    if let Some(v) = &s.solver {
        cfg.sampler.solver = enum_arg("solver", v)?;
    }
    if let Some(w) = s.guidance {
        cfg.sampler.guidance = w;
    }
    if let Some(n) = s.samples {
        cfg.sampler.samples = n;
    }
    Ok(())
}

struct RunDir(PathBuf);

impl RunDir {
    fn create(common: &Common, default_name: &str, cfg: &RunConfig) -> Res<Self> {
        let dir = common.runs_dir.join(common.name.as_deref().unwrap_or(default_name));
        for sub in ["ckpt", "samples", "csv"] {
            fs::create_dir_all(dir.join(sub)).with_context(|| format!("creating {}", dir.display()))?;
        }
        fs::write(dir.join("config.json"), cfg.to_json()? + "\n")?;
        Ok(Self(dir))
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.0.join(rel)
    }

    fn write(&self, rel: &str, text: &str) -> Res<()> {
        let p = self.path(rel);
        fs::write(&p, text).with_context(|| format!("writing {}", p.display()))
    }
}

fn load_archive(path: &str) -> Res<Archive> {
    Archive::load(path).with_context(|| format!("loading checkpoint {path}"))
}

/// The teacher from `checkpoints.teacher`, whose architecture replaces the
/// `unet` section, or an untrained model built from the seed.
fn load_model(cfg: &mut RunConfig) -> Res<(SplitUNet, Value)> {
    let Some(path) = cfg.checkpoints.teacher.clone() else {
        return Ok((SplitUNet::new(cfg.unet.clone(), cfg.seed)?, Value::Null));
    };
    let archive = load_archive(&path)?;
    let unet = archive.config.get("unet").cloned().ok_or_else(|| Error::Config(format!("{path} is not a model checkpoint")))?;
    cfg.unet = serde_json::from_value(unet).map_err(|e| Error::Config(format!("{path}: {e}")))?;
    let mut model = SplitUNet::new(cfg.unet.clone(), 0)?;
    archive.load_params(&mut model.params, "unet.").with_context(|| format!("restoring {path}"))?;
    Ok((model, archive.config))
}

/// The adaptor from `checkpoints.adaptor` (its spec replaces the `adaptor`
/// section), or a freshly initialized one.
fn load_adaptor(cfg: &mut RunConfig, model: &SplitUNet) -> Res<Adaptor> {
    let shape = model.config.rep_shape();
    let Some(path) = cfg.checkpoints.adaptor.clone() else {
        return Ok(Adaptor::new(cfg.adaptor.clone(), shape, model.config.emb_dim, cfg.seed)?);
    };
    let archive = load_archive(&path)?;
    let spec = archive.config.get("adaptor").cloned().ok_or_else(|| Error::Config(format!("{path} is not an adaptor checkpoint")))?;
    cfg.adaptor = serde_json::from_value::<AdaptorSpec>(spec).map_err(|e| Error::Config(format!("{path}: {e}")))?;
    let mut adaptor = Adaptor::new(cfg.adaptor.clone(), shape, model.config.emb_dim, 0)?;
    archive.load_params(&mut adaptor.params, "adaptor.").with_context(|| format!("restoring {path}"))?;
    Ok(adaptor)
}

/// True when a checkpoint's provenance records at least one training step.
pub fn has_training(provenance: &Value) -> bool {
    provenance.get("training").and_then(|t| t.get("steps")).and_then(Value::as_u64).is_some_and(|s| s > 0)
}

fn training_json(kind: &str, rows: &[LossRow]) -> Value {
    json!({
        "kind": kind,
        "steps": rows.len(),
        "epochs": rows.last().map_or(0, |r| r.epoch + 1),
        "final_loss": rows.last().map(|r| r.loss),
    })
}

fn pool(cfg: &RunConfig) -> Res<rayon::ThreadPool> {
    Ok(rayon::ThreadPoolBuilder::new().num_threads(cfg.train.adaptor.workers.max(1)).build()?)
}

fn flops_csv(report: &FlopReport) -> String {
    let mut out = String::from("step,approximated,embed,high_in,low,high_out,adaptor,total\n");
    for s in &report.per_step {
        let f = &s.flops;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            s.step, s.approximated, f.embed, f.high_in, f.low, f.high_out, f.adaptor, s.total
        ));
    }
    out
}

fn guided(cfg: &RunConfig) -> bool {
    cfg.unet.num_classes().is_some() && cfg.sampler.guidance != 1.0
}

fn run(command: Command) -> Res<()> {
    match command {
        Command::Pretrain { common, steps, batch, lr, image_size } => {
            let mut cfg = base_config(&common)?;
            let base = &mut cfg.train.base;
            if let Some(v) = steps {
                base.steps = v;
            }
            if let Some(v) = batch {
                base.batch = v;
            }
            if let Some(v) = lr {
                base.lr = v;
            }
            if let Some(v) = image_size {
                cfg.unet.image_size = v;
                cfg.dataset.image_size = v;
            }
            pretrain(&common, cfg)
        }
        Command::Distill { common, sampling, regular, epochs } => {
            let mut cfg = base_config(&common)?;
            apply_sampling(&mut cfg, &sampling)?;
            cfg.train.regular |= regular;
            if let Some(e) = epochs {
                cfg.train.adaptor.epochs = e;
            }
            distill(&common, cfg)
        }
        Command::Sample { common, sampling } => {
            let mut cfg = base_config(&common)?;
            apply_sampling(&mut cfg, &sampling)?;
            sample(&common, cfg)
        }
        Command::Perturb { common, sampling } => {
            let mut cfg = base_config(&common)?;
            apply_sampling(&mut cfg, &sampling)?;
            perturb(&common, cfg)
        }
        Command::Profile { common, sampling, pnp } => {
            let mut cfg = base_config(&common)?;
            apply_sampling(&mut cfg, &sampling)?;
            if let Some(items) = pnp {
                cfg.cost.pnp = Some(parse_pnp(&items)?);
            }
            profile(&common, cfg)
        }
        Command::Compare { common, sampling } => {
            let mut cfg = base_config(&common)?;
            apply_sampling(&mut cfg, &sampling)?;
            compare(&common, cfg)
        }
    }
}

fn pretrain(common: &Common, cfg: RunConfig) -> Res<()> {
    let dir = RunDir::create(common, "pretrain", &cfg)?;
    let mut model = SplitUNet::new(cfg.unet.clone(), cfg.seed)?;
    let rows = train_base(&mut model, &cfg.dataset, &cfg.schedule()?, &cfg.train.base, cfg.seed)?;
    dir.write("csv/loss.csv", &loss_csv(&rows))?;
    let provenance = json!({
        "kind": "unet",
        "unet": cfg.unet,
        "schedule": cfg.sampler.schedule,
        "t_train": cfg.sampler.t_train,
        "seed": cfg.seed,
        "training": training_json("base", &rows),
    });
    Archive::from_params(&model.params, provenance).save(dir.path("ckpt/unet.cwkt"))?;
    println!("pretrain: {} steps, final loss {:.6}", rows.len(), rows.last().map_or(f64::NAN, |r| r.loss));
    println!("wrote {}", dir.0.display());
    Ok(())
}

fn distill(common: &Common, mut cfg: RunConfig) -> Res<()> {
    if cfg.checkpoints.teacher.is_none() {
        return Err(Error::Config("distill needs a teacher checkpoint (--teacher)".into()).into());
    }
    let (teacher, _) = load_model(&mut cfg)?;
    let dir = RunDir::create(common, "distill", &cfg)?;
    let (schedule, grid, clock) = (cfg.schedule()?, cfg.grid()?, cfg.clock()?);
    let op = OperatingPoint {
        sample: SampleSpec { schedule: &schedule, grid: &grid, solver: cfg.sampler.solver, guidance: cfg.sampler.guidance },
        clock: &clock,
    };
    let mut adaptor = Adaptor::new(cfg.adaptor.clone(), teacher.config.rep_shape(), teacher.config.emb_dim, cfg.seed)?;
    let rows = if cfg.train.regular {
        train_adaptor_regular(&teacher, &mut adaptor, &op, &cfg.dataset, &cfg.train.adaptor, cfg.seed)?
    } else {
        let conditions: Vec<usize> = (0..teacher.config.num_classes().unwrap_or(1)).collect();
        train_adaptor_unrolled(&teacher, &mut adaptor, &op, &conditions, &cfg.train.adaptor, cfg.seed)?
    };
    dir.write("csv/loss.csv", &loss_csv(&rows))?;
    let provenance = json!({
        "kind": "adaptor",
        "adaptor": cfg.adaptor,
        "rep_shape": teacher.config.rep_shape(),
        "emb_dim": teacher.config.emb_dim,
        "teacher": cfg.checkpoints.teacher,
        "sampler": cfg.sampler,
        "clock": cfg.clock,
        "seed": cfg.seed,
        "training": training_json(if cfg.train.regular { "regular" } else { "unrolled" }, &rows),
    });
    Archive::from_params(&adaptor.params, provenance).save(dir.path("ckpt/adaptor.cwkt"))?;
    println!("distill: {} steps, final loss {:.6}", rows.len(), rows.last().map_or(f64::NAN, |r| r.loss));
    println!("wrote {}", dir.0.display());
    Ok(())
}

fn sample(common: &Common, mut cfg: RunConfig) -> Res<()> {
    let (model, _) = load_model(&mut cfg)?;
    let adaptor = load_adaptor(&mut cfg, &model)?;
    let dir = RunDir::create(common, "sample", &cfg)?;
    let (schedule, grid, clock) = (cfg.schedule()?, cfg.grid()?, cfg.clock()?);
    let spec = SampleSpec { schedule: &schedule, grid: &grid, solver: cfg.sampler.solver, guidance: cfg.sampler.guidance };
    let pipe = Pipeline { model: &model, adaptor: &adaptor, clock: &clock };
    let classes = cfg.sample_classes();
    let (latents, _) = pool(&cfg)?.install(|| generate_many(pipe, &spec, &classes, cfg.sampler.batch, cfg.seed))?;
    let cols = (classes.len() as f64).sqrt().ceil() as usize;
    write_ppm(&to_unit_range(&latents), dir.path("samples/samples.ppm"), cols)?;
    let mut archive = Archive::new(json!({ "kind": "samples", "classes": classes, "seed": cfg.seed }));
    archive.push("latents", latents);
    archive.save(dir.path("samples/latents.cwkt"))?;
    let report = pipeline_flops(&model, &adaptor, &clock, grid.len(), guided(&cfg), classes.len())?;
    dir.write("csv/flops.csv", &flops_csv(&report))?;
    println!(
        "sample: {} images, {} FLOPs ({:.1}% below baseline)",
        classes.len(),
        group_thousands(report.total as f64),
        100.0 * report.savings_fraction
    );
    println!("wrote {}", dir.0.display());
    Ok(())
}

fn perturb(common: &Common, mut cfg: RunConfig) -> Res<()> {
    let (model, _) = load_model(&mut cfg)?;
    let adaptor = load_adaptor(&mut cfg, &model)?;
    let dir = RunDir::create(common, "perturb", &cfg)?;
    let (schedule, grid, clock) = (cfg.schedule()?, cfg.grid()?, cfg.clock()?);
    let spec = SampleSpec { schedule: &schedule, grid: &grid, solver: cfg.sampler.solver, guidance: cfg.sampler.guidance };
    let pipe = Pipeline { model: &model, adaptor: &adaptor, clock: &clock };
    let k = model.config.num_classes().unwrap_or(1) as u64;
    let class_of = move |s: u64| vec![(s % k) as usize];
    let rows = pool(&cfg)?.install(|| perturb_sweep(pipe, &spec, &cfg.sweep_grid(), &class_of))?;
    dir.write("csv/sweep.csv", &sweep_csv(&rows))?;
    println!("perturb: {} cells", rows.len());
    println!("wrote {}", dir.0.display());
    Ok(())
}

fn profile(common: &Common, mut cfg: RunConfig) -> Res<()> {
    let (model, _) = load_model(&mut cfg)?;
    let adaptor = load_adaptor(&mut cfg, &model)?;
    let dir = RunDir::create(common, "profile", &cfg)?;
    let (schedule, grid, clock) = (cfg.schedule()?, cfg.grid()?, cfg.clock()?);
    let report = pipeline_flops(&model, &adaptor, &clock, grid.len(), guided(&cfg), 1)?;
    dir.write("csv/flops.csv", &flops_csv(&report))?;
    dir.write("csv/flops.json", &report.to_json()?)?;
    println!(
        "profile: {} FLOPs per sample over {} steps, baseline {}, savings {:.2}%",
        group_thousands(report.total as f64),
        grid.len(),
        group_thousands(report.baseline_total as f64),
        100.0 * report.savings_fraction
    );
    if cfg.cost.latency_iters > 0 {
        let spec = SampleSpec { schedule: &schedule, grid: &grid, solver: cfg.sampler.solver, guidance: cfg.sampler.guidance };
        let off = ClockSchedule::off();
        let mut rows = Vec::new();
        for (label, clk) in [("baseline", &off), ("clockwork", &clock)] {
            let pipe = Pipeline { model: &model, adaptor: &adaptor, clock: clk };
            let stats = latency_bench(|| generate(pipe, &spec, &[0], cfg.seed).map(drop), cfg.cost.latency_warmup, cfg.cost.latency_iters)?;
            println!("latency {label}: median {:.3} ms", stats.median_ms);
            rows.push((label.to_string(), stats));
        }
        // wall-clock timings are the one output that does not reproduce
        dir.write("csv/latency.csv", &latency_csv(&rows))?;
    }
    if let Some(input) = &cfg.cost.pnp {
        let c = pnp_flops(input)?;
        println!("F_I = {} GFLOPs", group_thousands(c.f_inversion));
        println!("F_G = {} GFLOPs", group_thousands(c.f_generation));
        println!("F = {} GFLOPs", group_thousands(c.total));
        dir.write("csv/pnp.json", &serde_json::to_string_pretty(&c)?)?;
    }
    println!("wrote {}", dir.0.display());
    Ok(())
}

fn compare(common: &Common, mut cfg: RunConfig) -> Res<()> {
    let (model, provenance) = load_model(&mut cfg)?;
    if !has_training(&provenance) {
        return Err(Error::Config(NO_PROVENANCE.into()).into());
    }
    let adaptor = load_adaptor(&mut cfg, &model)?;
    let dir = RunDir::create(common, "compare", &cfg)?;
    let (schedule, grid, clock) = (cfg.schedule()?, cfg.grid()?, cfg.clock()?);
    let spec = SampleSpec { schedule: &schedule, grid: &grid, solver: cfg.sampler.solver, guidance: cfg.sampler.guidance };
    let classes = cfg.sample_classes();
    let off = ClockSchedule::off();
    let identity = Adaptor::new(AdaptorSpec::identity(), model.config.rep_shape(), model.config.emb_dim, 0)?;
    let pool = pool(&cfg)?;
    let run = |pipe| pool.install(|| generate_many(pipe, &spec, &classes, cfg.sampler.batch, cfg.seed));
    let (base, _) = run(Pipeline { model: &model, adaptor: &identity, clock: &off })?;
    let (cw, _) = run(Pipeline { model: &model, adaptor: &adaptor, clock: &clock })?;
    let (base, cw) = (to_unit_range(&base), to_unit_range(&cw));
    let cols = (classes.len() as f64).sqrt().ceil() as usize;
    write_ppm(&base, dir.path("samples/baseline.ppm"), cols)?;
    write_ppm(&cw, dir.path("samples/clockwork.ppm"), cols)?;
    let q = quality(&FeatureNet::new(), &cw, &base, true)?;
    let report = pipeline_flops(&model, &adaptor, &clock, grid.len(), guided(&cfg), classes.len())?;
    dir.write("csv/quality.json", &serde_json::to_string_pretty(&q)?)?;
    dir.write("csv/flops.json", &report.to_json()?)?;
    println!(
        "compare: rf_fid {:.6}, mean L2 {:.6}, FLOPs {} vs baseline {} ({:.2}% saved)",
        q.rf_fid,
        q.mean_l2,
        group_thousands(report.total as f64),
        group_thousands(report.baseline_total as f64),
        100.0 * report.savings_fraction
    );
    println!("wrote {}", dir.0.display());
    Ok(())
}
