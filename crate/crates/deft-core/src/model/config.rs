//! Model hyperparameters. Serialized as TOML inside checkpoints, so field
//! names are part of the on-disk format; change them only with a version
//! bump.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Structural switches for ablation. Everything on is the full model; each
/// `false` swaps that component for its plain baseline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    /// Convolutional stem (three 3×3 convs). Off: single 4×4 stride-4
    /// patchify stem, which drops the stride-2 pyramid level.
    #[serde(default = "default_true")]
    pub use_csb: bool,
    /// Overlapping 3×3 stride-2 patch aggregation. Off: non-overlapping 2×2.
    #[serde(default = "default_true")]
    pub use_pab: bool,
    /// Depthwise-conv position block. Off: no position encoding.
    #[serde(default = "default_true")]
    pub use_lpb: bool,
    /// Multi-ratio pooled attention. Off: single-ratio strided-conv
    /// downsampling of keys/values (`sr_ratios`).
    #[serde(default = "default_true")]
    pub use_lmps: bool,
    /// Depthwise 3×3 inside the feed-forward block. Off: plain two-layer FFN.
    #[serde(default = "default_true")]
    pub use_cffn: bool,
}

impl Default for Toggles {
    fn default() -> Self {
        Toggles {
            use_csb: true,
            use_pab: true,
            use_lpb: true,
            use_lmps: true,
            use_cffn: true,
        }
    }
}

fn default_true() -> bool {
    true
}

fn default_base_channels() -> usize {
    64
}

fn default_depths() -> [usize; 4] {
    [3, 3, 18, 3]
}

fn default_heads() -> [usize; 4] {
    [1, 2, 4, 8]
}

fn default_pool_ratios() -> [[usize; 4]; 4] {
    [
        [12, 16, 20, 24],
        [6, 8, 10, 12],
        [3, 4, 5, 6],
        [1, 2, 3, 4],
    ]
}

fn default_sr_ratios() -> [usize; 4] {
    [8, 4, 2, 1]
}

fn default_expansion() -> usize {
    4
}

fn default_in_channels() -> usize {
    3
}

fn default_input_size() -> usize {
    224
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Stage widths are {C, 2C, 4C, 8C}.
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    /// Blocks per stage.
    #[serde(default = "default_depths")]
    pub depths: [usize; 4],
    #[serde(default = "default_heads")]
    pub heads: [usize; 4],
    /// Per-stage pooling ratios for the multi-ratio attention.
    #[serde(default = "default_pool_ratios")]
    pub pool_ratios: [[usize; 4]; 4],
    /// Key/value downsample ratios for the baseline attention used when
    /// `toggles.use_lmps` is false.
    #[serde(default = "default_sr_ratios")]
    pub sr_ratios: [usize; 4],
    /// Feed-forward hidden width multiplier.
    #[serde(default = "default_expansion")]
    pub expansion: usize,
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default)]
    pub toggles: Toggles,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: default_base_channels(),
            depths: default_depths(),
            heads: default_heads(),
            pool_ratios: default_pool_ratios(),
            sr_ratios: default_sr_ratios(),
            expansion: default_expansion(),
            in_channels: default_in_channels(),
            input_size: default_input_size(),
            toggles: Toggles::default(),
        }
    }
}

impl ModelConfig {
    /// Small instance for gradient checking: C=8, one block per stage, 32×32.
    pub fn reduced() -> Self {
        ModelConfig {
            base_channels: 8,
            depths: [1, 1, 1, 1],
            heads: [1, 2, 4, 8],
            input_size: 32,
            ..Self::default()
        }
    }

    pub fn stage_channels(&self) -> [usize; 4] {
        let c = self.base_channels;
        [c, 2 * c, 4 * c, 8 * c]
    }

    /// Channel widths of the encoder pyramid, shallow to deep. The conv stem
    /// contributes an extra stride-2 level; the patchify baseline starts at
    /// stride 4.
    pub fn pyramid_channels(&self) -> Vec<usize> {
        let s = self.stage_channels();
        if self.toggles.use_csb {
            vec![self.base_channels, s[0], s[1], s[2], s[3]]
        } else {
            vec![s[0], s[1], s[2], s[3]]
        }
    }

    /// Stride of each pyramid level relative to the input.
    pub fn pyramid_strides(&self) -> Vec<usize> {
        if self.toggles.use_csb {
            vec![2, 4, 8, 16, 32]
        } else {
            vec![4, 8, 16, 32]
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::config("base_channels must be >= 1".to_string()));
        }
        if self.in_channels == 0 {
            return Err(Error::config("in_channels must be >= 1".to_string()));
        }
        if self.expansion == 0 {
            return Err(Error::config("expansion must be >= 1".to_string()));
        }
        if self.input_size == 0 || self.input_size % 32 != 0 {
            return Err(Error::config(format!(
                "input_size must be a positive multiple of 32, got {}",
                self.input_size
            )));
        }
        for (s, &d) in self.depths.iter().enumerate() {
            if d == 0 {
                return Err(Error::config(format!("depths[{s}] must be >= 1")));
            }
        }
        let chans = self.stage_channels();
        for s in 0..4 {
            let h = self.heads[s];
            if h == 0 {
                return Err(Error::config(format!("heads[{s}] must be >= 1")));
            }
            if chans[s] % h != 0 {
                return Err(Error::config(format!(
                    "stage {} width {} not divisible by heads {}",
                    s + 1,
                    chans[s],
                    h
                )));
            }
            for &r in &self.pool_ratios[s] {
                if r == 0 {
                    return Err(Error::config(format!("pool_ratios[{s}] entries must be >= 1")));
                }
            }
            if self.sr_ratios[s] == 0 {
                return Err(Error::config(format!("sr_ratios[{s}] must be >= 1")));
            }
        }
        Ok(())
    }

    /// Canonical textual form stored inside checkpoints.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model config serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self> {
        let cfg: ModelConfig =
            toml::from_str(s).map_err(|e| Error::format(format!("bad model config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
