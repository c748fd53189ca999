//! Analytic per-layer FLOP formulas.
//!
//! Convention: one multiply-accumulate counts as two FLOPs. Per sample:
//!
//! | layer | FLOPs |
//! |---|---|
//! | conv2d | 2·K²·C_in·C_out·H_out·W_out + C_out·H_out·W_out (bias) |
//! | conv_transpose2d | 2·K²·C_in·C_out·H_in·W_in + C_out·H_out·W_out (bias) |
//! | linear | 2·in·out + out |
//! | group_norm | 8 per element (statistics 3, normalize 3, affine 2) |
//! | SiLU | 4 per element |
//! | add / broadcast add / scale | 1 per element |
//! | attention (L tokens, width D) | 4·L²·D (two matmuls) + 6·L² (scale + softmax) |
//!
//! Concatenation, upsampling, token permutes and embedding lookups are free.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::numerics::kernels::{conv_out_extent, conv_transpose_out_extent};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerDesc {
    Conv2d { c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, h: usize, w: usize },
    ConvTranspose2d { c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, h: usize, w: usize },
    Linear { f_in: usize, f_out: usize },
    GroupNorm { numel: usize },
    Silu { numel: usize },
    Add { numel: usize },
    Attention { tokens: usize, dim: usize },
}

/// FLOPs of one layer for a single sample.
pub fn layer_flops(desc: &LayerDesc) -> Result<u64> {
    Ok(match *desc {
        LayerDesc::Conv2d { c_in, c_out, k, stride, pad, h, w } => {
            let ho = conv_out_extent(h, k, stride, pad)? as u64;
            let wo = conv_out_extent(w, k, stride, pad)? as u64;
            let (k, ci, co) = (k as u64, c_in as u64, c_out as u64);
            2 * k * k * ci * co * ho * wo + co * ho * wo
        }
        LayerDesc::ConvTranspose2d { c_in, c_out, k, stride, pad, h, w } => {
            let ho = conv_transpose_out_extent(h, k, stride, pad)? as u64;
            let wo = conv_transpose_out_extent(w, k, stride, pad)? as u64;
            let (k, ci, co) = (k as u64, c_in as u64, c_out as u64);
            2 * k * k * ci * co * (h * w) as u64 + co * ho * wo
        }
        LayerDesc::Linear { f_in, f_out } => 2 * (f_in * f_out) as u64 + f_out as u64,
        LayerDesc::GroupNorm { numel } => 8 * numel as u64,
        LayerDesc::Silu { numel } => 4 * numel as u64,
        LayerDesc::Add { numel } => numel as u64,
        LayerDesc::Attention { tokens, dim } => {
            let (l, d) = (tokens as u64, dim as u64);
            4 * l * l * d + 6 * l * l
        }
    })
}

/// Sum of [`layer_flops`] over a layer list.
pub fn plan_flops(plan: &[LayerDesc]) -> Result<u64> {
    plan.iter().map(layer_flops).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pointwise_conv_base_case() {
        let d = LayerDesc::Conv2d { c_in: 1, c_out: 1, k: 1, stride: 1, pad: 0, h: 1, w: 1 };
        // 2 FLOPs for the multiply-accumulate plus 1 bias add
        assert_eq!(layer_flops(&d).unwrap(), 3);
    }

    #[test]
    fn three_by_three_conv_matches_hand_arithmetic() {
        let d = LayerDesc::Conv2d { c_in: 32, c_out: 64, k: 3, stride: 1, pad: 1, h: 16, w: 16 };
        let macs_flops = 2u64 * 9 * 32 * 64 * 256;
        assert_eq!(macs_flops, 9_437_184);
        assert_eq!(layer_flops(&d).unwrap(), macs_flops + 64 * 256);
    }
}
