//! Cost of plug-and-play editing with clocked inversion and generation.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PnpCostInput {
    pub n_i: u64,
    pub c_i: u64,
    pub n_g: u64,
    pub c_g: u64,
    /// FLOPs of one full denoiser pass.
    pub f_full: f64,
    /// FLOPs of one pass through the high-res paths only.
    pub f_high: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PnpCost {
    pub f_inversion: f64,
    pub f_generation: f64,
    pub total: f64,
}

/// Inversion runs one pass per step; generation runs a batch of three
/// (cached latent, conditional, unconditional). Full passes per phase are
/// `N div C`, the rest touch only the high-res paths.
pub fn pnp_flops(input: &PnpCostInput) -> Result<PnpCost> {
    let PnpCostInput { n_i, c_i, n_g, c_g, f_full, f_high } = *input;
    if c_i < 1 || c_g < 1 || n_i < 1 || n_g < 1 {
        return config_err("step counts and clocks must be at least 1");
    }
    let full_i = n_i / c_i;
    let full_g = n_g / c_g;
    let f_inversion = full_i as f64 * f_full + (n_i - full_i) as f64 * f_high;
    let f_generation = 3.0 * (full_g as f64 * f_full + (n_g - full_g) as f64 * f_high);
    Ok(PnpCost { f_inversion, f_generation, total: f_inversion + f_generation })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clock_one_is_all_full_passes() {
        let c = pnp_flops(&PnpCostInput { n_i: 10, c_i: 1, n_g: 4, c_g: 1, f_full: 2.0, f_high: 0.5 }).unwrap();
        assert_eq!(c.total, 10.0 * 2.0 + 3.0 * 4.0 * 2.0);
        assert!(pnp_flops(&PnpCostInput { n_i: 10, c_i: 0, n_g: 4, c_g: 1, f_full: 2.0, f_high: 0.5 }).is_err());
    }
}
