//! Segmentation model: convolutional stem, four transformer stages over a
//! shrinking pyramid, and a skip-merge decoder with one prediction head plus
//! side heads for deep supervision.
//!
//! Parameters live in a flat registry ordered by construction; that order is
//! the checkpoint record order. All structural decisions are functions of
//! `ModelConfig` alone, so equal configs produce identical registries.

mod config;
mod forward;
mod stats;

pub use config::{ModelConfig, Toggles};
pub use forward::{lmps_pool_tokens, pooled_token_len, ModelOutputs};
pub use stats::flops_estimate;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub struct NamedTensor<T: Element> {
    pub name: String,
    pub tensor: Tensor<T>,
}

/// Index pair into the parameter registry for a conv kernel + bias. Kernel
/// size lives in the weight shape. Convs feeding straight into a batch norm
/// carry no bias: the batch-mean subtraction would cancel it exactly,
/// leaving a parameter no gradient can reach.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvP {
    pub w: usize,
    pub b: Option<usize>,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct AffineP {
    pub gamma: usize,
    pub beta: usize,
}

/// Buffer indices for batch-norm running statistics.
#[derive(Debug, Clone, Copy)]
pub(crate) struct BnRunP {
    pub mean: usize,
    pub var: usize,
}

/// The key projection has no bias: adding a constant to every key shifts
/// all logits in a softmax row by the same amount, which softmax ignores,
/// so a key bias could never receive a gradient.
#[derive(Debug, Clone, Copy)]
pub(crate) struct LinP {
    pub w: usize,
    pub b: Option<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct StemLayerP {
    pub conv: ConvP,
    pub norm: AffineP,
    pub run: BnRunP,
}

#[derive(Debug, Clone)]
pub(crate) struct AttnP {
    pub q: LinP,
    pub k: LinP,
    pub v: LinP,
    pub o: LinP,
    /// Baseline attention only: strided conv + token norm on keys/values.
    pub sr: Option<(ConvP, AffineP)>,
}

#[derive(Debug, Clone)]
pub(crate) struct FfnP {
    pub expand: ConvP,
    pub dw: Option<ConvP>,
    pub shrink: ConvP,
}

#[derive(Debug, Clone)]
pub(crate) struct BlockP {
    pub lpb: Option<ConvP>,
    pub norm1: AffineP,
    pub attn: AttnP,
    pub norm2: AffineP,
    pub ffn: FfnP,
}

#[derive(Debug, Clone)]
pub(crate) struct StageP {
    pub embed: Option<ConvP>,
    pub blocks: Vec<BlockP>,
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderP {
    /// Deepest merge first.
    pub merges: Vec<ConvP>,
    pub sides: Vec<ConvP>,
    pub head: ConvP,
}

#[derive(Debug, Clone)]
pub(crate) struct Arch {
    pub stem: Vec<StemLayerP>,
    pub stages: Vec<StageP>,
    pub decoder: DecoderP,
}

pub struct DefTModel<T: Element> {
    pub config: ModelConfig,
    params: Vec<NamedTensor<T>>,
    buffers: Vec<NamedTensor<T>>,
    name_index: HashMap<String, usize>,
    pub(crate) arch: Arch,
}

pub(crate) const BN_EPS: f64 = 1e-5;
pub(crate) const LN_EPS: f64 = 1e-5;
/// Running-stat blend factor per training step.
pub const BN_MOMENTUM: f64 = 0.1;

/// Batch statistics observed by one normalization layer during a training
/// forward pass, for folding into the running buffers.
pub struct BnBatchStats<T> {
    pub mean_buf: usize,
    pub var_buf: usize,
    pub mean: Vec<T>,
    /// Biased (divide by M) batch variance.
    pub var: Vec<T>,
    /// Number of samples per channel in the batch (N·H·W).
    pub count: usize,
}

struct Builder<'r, T: Element> {
    params: Vec<NamedTensor<T>>,
    buffers: Vec<NamedTensor<T>>,
    rng: &'r mut ChaCha8Rng,
}

impl<T: Element> Builder<'_, T> {
    fn push_param(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.params.push(NamedTensor {
            name,
            tensor: tensor.requires_grad(true),
        });
        self.params.len() - 1
    }

    fn push_buffer(&mut self, name: String, tensor: Tensor<T>) -> usize {
        self.buffers.push(NamedTensor { name, tensor });
        self.buffers.len() - 1
    }

    /// Conv kernel: zero-mean normal scaled by fan-out, the usual choice for
    /// ReLU-family conv stacks. Bias starts at zero; pass `bias = false`
    /// for convs that feed a batch norm.
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: &str,
        c_out: usize,
        c_in_g: usize,
        k: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    ) -> ConvP {
        let fan_out = (c_out * k * k / groups).max(1);
        let std = (2.0 / fan_out as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("normal");
        let n = c_out * c_in_g * k * k;
        let data: Vec<T> = (0..n)
            .map(|_| T::from_f64(dist.sample(self.rng)))
            .collect();
        let w = self.push_param(
            format!("{name}.weight"),
            Tensor::new(&[c_out, c_in_g, k, k], data).expect("conv weight"),
        );
        let b =
            bias.then(|| self.push_param(format!("{name}.bias"), Tensor::zeros(&[c_out])));
        ConvP {
            w,
            b,
            stride,
            padding,
            groups,
        }
    }

    /// Projection matrix: truncated normal, std 0.02, resampled beyond 2σ.
    /// `bias = false` for the key projection (see `LinP`).
    fn lin(&mut self, name: &str, d_in: usize, d_out: usize, bias: bool) -> LinP {
        let dist = Normal::new(0.0, 0.02).expect("normal");
        let data: Vec<T> = (0..d_in * d_out)
            .map(|_| loop {
                let v: f64 = dist.sample(self.rng);
                if v.abs() <= 0.04 {
                    break T::from_f64(v);
                }
            })
            .collect();
        let w = self.push_param(
            format!("{name}.weight"),
            Tensor::new(&[d_in, d_out], data).expect("linear weight"),
        );
        let b = bias.then(|| self.push_param(format!("{name}.bias"), Tensor::zeros(&[d_out])));
        LinP { w, b }
    }

    fn affine(&mut self, name: &str, c: usize) -> AffineP {
        let gamma = self.push_param(format!("{name}.gamma"), Tensor::full(&[c], 1.0));
        let beta = self.push_param(format!("{name}.beta"), Tensor::zeros(&[c]));
        AffineP { gamma, beta }
    }

    fn bn_buffers(&mut self, name: &str, c: usize) -> BnRunP {
        let mean = self.push_buffer(format!("{name}.running_mean"), Tensor::zeros(&[c]));
        let var = self.push_buffer(format!("{name}.running_var"), Tensor::full(&[c], 1.0));
        BnRunP { mean, var }
    }
}

impl<T: Element> DefTModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: Vec::new(),
            buffers: Vec::new(),
            rng: &mut rng,
        };
        let t = config.toggles;
        let chans = config.stage_channels();
        let c0 = config.base_channels;

        let stem = if t.use_csb {
            let specs = [
                (config.in_channels, c0, 3usize, 2usize, 1usize),
                (c0, c0, 3, 1, 1),
                (c0, c0, 3, 1, 1),
            ];
            specs
                .iter()
                .enumerate()
                .map(|(i, &(cin, cout, k, s, p))| {
                    let conv = b.conv(&format!("stem.{i}.conv"), cout, cin, k, s, p, 1, false);
                    let norm = b.affine(&format!("stem.{i}.norm"), cout);
                    let run = b.bn_buffers(&format!("stem.{i}.norm"), cout);
                    StemLayerP { conv, norm, run }
                })
                .collect()
        } else {
            let conv = b.conv("stem.0.conv", c0, config.in_channels, 4, 4, 0, 1, false);
            let norm = b.affine("stem.0.norm", c0);
            let run = b.bn_buffers("stem.0.norm", c0);
            vec![StemLayerP { conv, norm, run }]
        };

        let mut stages = Vec::with_capacity(4);
        for s in 0..4 {
            let sname = format!("stage{}", s + 1);
            let c = chans[s];
            // Stage 1's embed halves the stem map; the patchify stem already
            // sits at that stride, so it goes without one.
            let embed = if s == 0 && !t.use_csb {
                None
            } else {
                let cin = if s == 0 { c0 } else { chans[s - 1] };
                let (k, stride, p) = if t.use_pab { (3, 2, 1) } else { (2, 2, 0) };
                Some(b.conv(&format!("{sname}.embed"), c, cin, k, stride, p, 1, true))
            };
            let mut blocks = Vec::with_capacity(config.depths[s]);
            for blk in 0..config.depths[s] {
                let bname = format!("{sname}.block{blk}");
                let lpb = t
                    .use_lpb
                    .then(|| b.conv(&format!("{bname}.lpb"), c, 1, 3, 1, 1, c, true));
                let norm1 = b.affine(&format!("{bname}.norm1"), c);
                let q = b.lin(&format!("{bname}.attn.q"), c, c, true);
                let k = b.lin(&format!("{bname}.attn.k"), c, c, false);
                let v = b.lin(&format!("{bname}.attn.v"), c, c, true);
                let o = b.lin(&format!("{bname}.attn.o"), c, c, true);
                let sr = if !t.use_lmps && config.sr_ratios[s] > 1 {
                    let r = config.sr_ratios[s];
                    let conv = b.conv(&format!("{bname}.attn.sr"), c, c, r, r, 0, 1, true);
                    let norm = b.affine(&format!("{bname}.attn.srnorm"), c);
                    Some((conv, norm))
                } else {
                    None
                };
                let norm2 = b.affine(&format!("{bname}.norm2"), c);
                let hidden = config.expansion * c;
                let expand = b.conv(&format!("{bname}.ffn.expand"), hidden, c, 1, 1, 0, 1, true);
                let dw = t
                    .use_cffn
                    .then(|| b.conv(&format!("{bname}.ffn.dw"), hidden, 1, 3, 1, 1, hidden, true));
                let shrink = b.conv(&format!("{bname}.ffn.shrink"), c, hidden, 1, 1, 0, 1, true);
                blocks.push(BlockP {
                    lpb,
                    norm1,
                    attn: AttnP { q, k, v, o, sr },
                    norm2,
                    ffn: FfnP {
                        expand,
                        dw,
                        shrink,
                    },
                });
            }
            stages.push(StageP { embed, blocks });
        }

        let pyr = config.pyramid_channels();
        let n = pyr.len();
        let mut merges = Vec::new();
        let mut sides = Vec::new();
        for i in 0..n - 1 {
            let deep = if i == 0 { pyr[n - 1] } else { pyr[n - 1 - i] };
            let skip = pyr[n - 2 - i];
            merges.push(b.conv(
                &format!("decoder.merge{i}"),
                skip,
                deep + skip,
                3,
                1,
                1,
                1,
                true,
            ));
            sides.push(b.conv(&format!("decoder.side{i}"), 1, skip, 3, 1, 1, 1, true));
        }
        let head = b.conv("decoder.head", 1, pyr[0], 3, 1, 1, 1, true);

        let name_index = b
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(DefTModel {
            config,
            params: b.params,
            buffers: b.buffers,
            name_index,
            arch: Arch {
                stem,
                stages,
                decoder: DecoderP {
                    merges,
                    sides,
                    head,
                },
            },
        })
    }

    pub fn params(&self) -> &[NamedTensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.params
    }

    pub fn buffers(&self) -> &[NamedTensor<T>] {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut [NamedTensor<T>] {
        &mut self.buffers
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.name_index.get(name).map(|&i| &self.params[i].tensor)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        let i = *self.name_index.get(name)?;
        Some(&mut self.params[i].tensor)
    }

    /// Overwrites every parameter and buffer value by name. Missing or
    /// shape-mismatched records are errors; extra records likewise.
    pub fn load_state(&mut self, state: Vec<(String, Tensor<T>)>) -> Result<()> {
        let mut provided = std::collections::HashSet::new();
        for (name, tensor) in state {
            let slot = self
                .params
                .iter_mut()
                .chain(self.buffers.iter_mut())
                .find(|nt| nt.name == name)
                .ok_or_else(|| Error::format(format!("unknown parameter '{name}'")))?;
            if slot.tensor.shape() != tensor.shape() {
                return Err(Error::format(format!(
                    "parameter '{name}' shape {:?} does not match model {:?}",
                    tensor.shape(),
                    slot.tensor.shape()
                )));
            }
            let rg = slot.tensor.requires_grad;
            slot.tensor = tensor.requires_grad(rg);
            provided.insert(name);
        }
        for nt in self.params.iter().chain(self.buffers.iter()) {
            if !provided.contains(&nt.name) {
                return Err(Error::format(format!("missing parameter '{}'", nt.name)));
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Scalar parameter totals per top-level module, in construction order.
    pub fn param_breakdown(&self) -> Vec<(String, usize)> {
        let groups = ["stem", "stage1", "stage2", "stage3", "stage4", "decoder"];
        groups
            .iter()
            .map(|g| {
                let total = self
                    .params
                    .iter()
                    .filter(|p| p.name.starts_with(&format!("{g}.")))
                    .map(|p| p.tensor.numel())
                    .sum();
                (g.to_string(), total)
            })
            .collect()
    }

    /// Folds one step of batch statistics into the running buffers:
    /// running ← (1−m)·running + m·batch, with the unbiased variance.
    pub fn apply_bn_updates(&mut self, stats: &[BnBatchStats<T>], momentum: f64) {
        let m = T::from_f64(momentum);
        let keep = T::from_f64(1.0 - momentum);
        for s in stats {
            let correction = if s.count > 1 {
                s.count as f64 / (s.count - 1) as f64
            } else {
                1.0
            };
            let corr = T::from_f64(correction);
            let rm = self.buffers[s.mean_buf].tensor.data_mut();
            for (r, &b) in rm.iter_mut().zip(&s.mean) {
                *r = keep * *r + m * b;
            }
            let rv = self.buffers[s.var_buf].tensor.data_mut();
            for (r, &b) in rv.iter_mut().zip(&s.var) {
                *r = keep * *r + m * b * corr;
            }
        }
    }

    /// Precision conversion, e.g. loading an f32 checkpoint for f64 gradient
    /// checking.
    pub fn cast<U: Element>(&self) -> DefTModel<U> {
        DefTModel {
            config: self.config.clone(),
            params: self
                .params
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    tensor: p.tensor.cast::<U>().requires_grad(true),
                })
                .collect(),
            buffers: self
                .buffers
                .iter()
                .map(|p| NamedTensor {
                    name: p.name.clone(),
                    tensor: p.tensor.cast::<U>(),
                })
                .collect(),
            name_index: self.name_index.clone(),
            arch: self.arch.clone(),
        }
    }
}
