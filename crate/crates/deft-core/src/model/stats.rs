//! Cost estimators. FLOPs counts multiply-accumulates ×2 for conv, linear,
//! and attention matmuls at batch 1; normalization, activations, pooling,
//! and resampling are omitted as usual for this kind of estimate.

use super::config::ModelConfig;
use super::forward::pooled_token_len;

fn conv_flops(out_hw: usize, c_out: usize, c_in_per_group: usize, k: usize) -> u64 {
    2 * out_hw as u64 * c_out as u64 * (c_in_per_group * k * k) as u64
}

fn linear_flops(tokens: usize, d_in: usize, d_out: usize) -> u64 {
    2 * tokens as u64 * d_in as u64 * d_out as u64
}

pub fn flops_estimate(config: &ModelConfig, input_size: usize) -> u64 {
    let s = input_size;
    let c0 = config.base_channels;
    let chans = config.stage_channels();
    let t = config.toggles;
    let mut total = 0u64;

    if t.use_csb {
        let hw = (s / 2) * (s / 2);
        total += conv_flops(hw, c0, config.in_channels, 3);
        total += 2 * conv_flops(hw, c0, c0, 3);
    } else {
        total += conv_flops((s / 4) * (s / 4), c0, config.in_channels, 4);
    }

    for stage in 0..4 {
        let side = s / (4 << stage);
        let hw = side * side;
        let c = chans[stage];
        let has_embed = stage > 0 || t.use_csb;
        if has_embed {
            let cin = if stage == 0 { c0 } else { chans[stage - 1] };
            let k = if t.use_pab { 3 } else { 2 };
            total += conv_flops(hw, c, cin, k);
        }
        let l = hw;
        let lp = if t.use_lmps {
            pooled_token_len(side, side, &config.pool_ratios[stage])
        } else {
            let r = config.sr_ratios[stage];
            (side / r).max(1) * (side / r).max(1)
        };
        let kv_reduce = if !t.use_lmps && config.sr_ratios[stage] > 1 {
            let r = config.sr_ratios[stage];
            conv_flops(lp, c, c, r)
        } else {
            0
        };
        let mut block = 0u64;
        if t.use_lpb {
            block += conv_flops(hw, c, 1, 3);
        }
        block += kv_reduce;
        block += linear_flops(l, c, c); // q
        block += 2 * linear_flops(lp, c, c); // k, v
        block += 2 * (l as u64) * (lp as u64) * (c as u64) * 2; // scores + weighted sum
        block += linear_flops(l, c, c); // output projection
        let hidden = config.expansion * c;
        block += conv_flops(hw, hidden, c, 1);
        if t.use_cffn {
            block += conv_flops(hw, hidden, 1, 3);
        }
        block += conv_flops(hw, c, hidden, 1);
        total += block * config.depths[stage] as u64;
    }

    let pyr = config.pyramid_channels();
    let strides = config.pyramid_strides();
    let n = pyr.len();
    for i in 0..n - 1 {
        let deep = if i == 0 { pyr[n - 1] } else { pyr[n - 1 - i] };
        let skip = pyr[n - 2 - i];
        let side = s / strides[n - 2 - i];
        let hw = side * side;
        total += conv_flops(hw, skip, deep + skip, 3);
        total += conv_flops(hw, 1, skip, 3);
    }
    let head_side = s / strides[0];
    total += conv_flops(head_side * head_side, 1, pyr[0], 3);
    total
}
