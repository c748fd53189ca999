//! FLOP accounting, the plug-and-play cost formulas and a latency timer.

pub mod latency;
pub mod layers;
pub mod pipeline;
pub mod pnp;

pub use latency::{latency_bench, latency_csv, LatencyStats};
pub use layers::{layer_flops, plan_flops, LayerDesc};
pub use pipeline::{closed_form_total, pipeline_flops, ComponentFlops, FlopReport, StepFlops};
pub use pnp::{pnp_flops, PnpCost, PnpCostInput};
