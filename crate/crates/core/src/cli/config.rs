//! The JSON run configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adaptor::AdaptorSpec;
use crate::analysis::SweepGrid;
use crate::clockwork::{ClockSchedule, ClockSpec};
use crate::cost::PnpCostInput;
use crate::distill::{AdaptorTrainConfig, BaseTrainConfig, ToyDataset};
use crate::error::{Error, Result};
use crate::sampler::{NoiseSchedule, ScheduleKind, Solver, TimestepGrid};
use crate::unet::{Site, UNetConfig};

/// Every section defaults; `seed` does not.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    #[serde(default)]
    pub checkpoints: Checkpoints,
    #[serde(default)]
    pub dataset: ToyDataset,
    #[serde(default)]
    pub unet: UNetConfig,
    #[serde(default)]
    pub adaptor: AdaptorSpec,
    #[serde(default)]
    pub clock: ClockSpec,
    #[serde(default)]
    pub sampler: SamplerSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub analysis: AnalysisSection,
    #[serde(default)]
    pub cost: CostSection,
}

/// Input checkpoints (paths as given on the command line).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Checkpoints {
    pub teacher: Option<String>,
    pub adaptor: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub schedule: ScheduleKind,
    pub t_train: usize,
    pub steps: usize,
    pub solver: Solver,
    pub guidance: f32,
    pub samples: usize,
    pub batch: usize,
    /// Class of every sample; cycles through all classes when absent.
    pub classes: Option<Vec<usize>>,
}

impl Default for SamplerSection {
    fn default() -> Self {
        Self {
            schedule: ScheduleKind::Linear,
            t_train: 1000,
            steps: 8,
            solver: Solver::DpmPp2m,
            guidance: 1.0,
            samples: 16,
            batch: 16,
            classes: None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub base: BaseTrainConfig,
    pub adaptor: AdaptorTrainConfig,
    /// Forward-noised dataset images instead of unrolled trajectories.
    pub regular: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisSection {
    pub sites: Vec<Site>,
    pub alphas: Vec<f64>,
    pub start_steps: Vec<usize>,
    pub seeds: Vec<u64>,
    pub per_channel: bool,
}

impl Default for AnalysisSection {
    fn default() -> Self {
        Self {
            sites: vec![Site::ROut, Site::Decoder(0), Site::Skip(0)],
            alphas: vec![0.3, 0.7],
            start_steps: vec![2, 4, 6],
            seeds: (0..4).collect(),
            per_channel: false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CostSection {
    pub latency_warmup: usize,
    pub latency_iters: usize,
    pub pnp: Option<PnpCostInput>,
}

impl Default for CostSection {
    fn default() -> Self {
        Self { latency_warmup: 2, latency_iters: 10, pnp: None }
    }
}

impl RunConfig {
    pub fn with_seed(seed: u64) -> Self {
        serde_json::from_value(serde_json::json!({ "seed": seed })).expect("defaults deserialize")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("run config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::new(self.sampler.schedule, self.sampler.t_train)
    }

    pub fn grid(&self) -> Result<TimestepGrid> {
        TimestepGrid::uniform(self.sampler.t_train, self.sampler.steps)
    }

    pub fn clock(&self) -> Result<ClockSchedule> {
        ClockSchedule::new(self.clock.clone())
    }

    /// Sample classes: the configured list, or `0, 1, …` cycling through
    /// the model's classes (all zeros when unconditional).
    pub fn sample_classes(&self) -> Vec<usize> {
        match &self.sampler.classes {
            Some(c) => c.clone(),
            None => {
                let k = self.unet.num_classes().unwrap_or(1);
                (0..self.sampler.samples).map(|i| i % k).collect()
            }
        }
    }

    pub fn sweep_grid(&self) -> SweepGrid {
        let a = &self.analysis;
        SweepGrid {
            sites: a.sites.clone(),
            alphas: a.alphas.clone(),
            start_steps: a.start_steps.clone(),
            seeds: a.seeds.clone(),
            per_channel: a.per_channel,
        }
    }
}

/// `off`, a clock period `N`, or a comma-separated list of adaptor steps.
pub fn parse_clock(s: &str) -> Result<ClockSpec> {
    let s = s.trim();
    if s == "off" || s == "0" {
        return Ok(ClockSpec::Off);
    }
    let bad = |_| Error::Config(format!("clock `{s}`: expected off, N or a step list"));
    if s.contains(',') {
        let steps = s.split(',').map(|p| p.trim().parse::<usize>()).collect::<std::result::Result<_, _>>().map_err(bad)?;
        return Ok(ClockSpec::Explicit { steps });
    }
    Ok(ClockSpec::Periodic { n: s.parse().map_err(bad)? })
}

/// `N_I=.. C_I=.. N_G=.. C_G=.. F=.. FH=..` in any order.
pub fn parse_pnp(items: &[String]) -> Result<PnpCostInput> {
    let mut vals: [Option<f64>; 6] = [None; 6];
    const KEYS: [&str; 6] = ["N_I", "C_I", "N_G", "C_G", "F", "FH"];
    for item in items {
        let (k, v) = item.split_once('=').ok_or_else(|| Error::Config(format!("pnp term `{item}` is not KEY=VALUE")))?;
        let idx = KEYS
            .iter()
            .position(|key| key.eq_ignore_ascii_case(k.trim()))
            .ok_or_else(|| Error::Config(format!("unknown pnp key `{k}`; expected {}", KEYS.join(", "))))?;
        let v: f64 = v.trim().parse().map_err(|_| Error::Config(format!("pnp value `{v}` is not a number")))?;
        vals[idx] = Some(v);
    }
    let get = |i: usize| vals[i].ok_or_else(|| Error::Config(format!("pnp key {} missing", KEYS[i])));
    let count = |i: usize| -> Result<u64> {
        let v = get(i)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::Config(format!("pnp {} must be a non-negative integer", KEYS[i])));
        }
        Ok(v as u64)
    };
    Ok(PnpCostInput { n_i: count(0)?, c_i: count(1)?, n_g: count(2)?, c_g: count(3)?, f_full: get(4)?, f_high: get(5)? })
}

/// `521065` → `521,065`; fractional parts are kept up to three places.
pub fn group_thousands(v: f64) -> String {
    let rounded = (v * 1000.0).round() / 1000.0;
    let int = rounded.trunc().abs() as u128;
    let digits = int.to_string();
    let mut out = String::new();
    for (k, ch) in digits.chars().enumerate() {
        if k > 0 && (digits.len() - k) % 3 == 0 {
            out.push(',');
        }
        out.push(ch);
    }
    let frac = rounded.fract().abs();
    if frac > 0.0 {
        let f = format!("{frac:.3}");
        out.push_str(f.trim_start_matches('0').trim_end_matches('0'));
    }
    if rounded < 0.0 {
        out.insert(0, '-');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory_and_unknown_keys_fail() {
        assert!(RunConfig::from_json("{}").is_err());
        assert!(RunConfig::from_json(r#"{"seed": 1, "extra": 2}"#).is_err());
        assert!(RunConfig::from_json(r#"{"seed": 1, "sampler": {"stepz": 2}}"#).is_err());
        let c = RunConfig::from_json(r#"{"seed": 1, "clock": {"kind": "periodic", "n": 2}}"#).unwrap();
        assert_eq!(c.clock, ClockSpec::Periodic { n: 2 });
        assert_eq!(RunConfig::from_json(&c.to_json().unwrap()).unwrap(), c);
    }

    #[test]
    fn clock_and_pnp_parsing() {
        assert_eq!(parse_clock("off").unwrap(), ClockSpec::Off);
        assert_eq!(parse_clock("2").unwrap(), ClockSpec::Periodic { n: 2 });
        assert_eq!(parse_clock("5,6,7,8").unwrap(), ClockSpec::Explicit { steps: vec![5, 6, 7, 8] });
        assert!(parse_clock("two").is_err());
        let items: Vec<String> =
            "N_I=1000 C_I=2 N_G=50 C_G=2 F=677.8 FH=228.4".split(' ').map(String::from).collect();
        let p = parse_pnp(&items).unwrap();
        assert_eq!((p.n_i, p.c_g, p.f_high), (1000, 2, 228.4));
        assert!(parse_pnp(&items[..5]).is_err());
    }

    #[test]
    fn thousands() {
        assert_eq!(group_thousands(521_065.0), "521,065");
        assert_eq!(group_thousands(453_100.00000000006), "453,100");
        assert_eq!(group_thousands(999.0), "999");
        assert_eq!(group_thousands(1234.5), "1,234.5");
    }
}
