//! Central-difference gradient verification. Always runs in f64: finite
//! differences at f32 precision cannot resolve the tolerances we assert.
//!
//! The builder closure is re-invoked for every probe, so it must be a pure
//! function of the input tensors.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::{DefTModel, ModelConfig};
use crate::tensor::Tensor;

#[derive(Clone)]
pub struct GradCheckSettings {
    pub tolerance: f64,
    /// None checks every element; Some(k) probes k seeded coordinates per
    /// input, which keeps whole-model checks inside a sane time budget.
    pub samples_per_input: Option<usize>,
    pub seed: u64,
    /// Negative control: perturbs one analytic gradient entry before
    /// comparison so the check must fail. Verifies the harness can fail.
    pub corrupt: bool,
}

impl GradCheckSettings {
    pub fn exhaustive(tolerance: f64) -> Self {
        GradCheckSettings {
            tolerance,
            samples_per_input: None,
            seed: 0,
            corrupt: false,
        }
    }

    pub fn sampled(tolerance: f64, samples_per_input: usize, seed: u64) -> Self {
        GradCheckSettings {
            tolerance,
            samples_per_input: Some(samples_per_input),
            seed,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_err: f64,
    /// Number of coordinates probed across all inputs.
    pub checked: usize,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn pass(&self) -> bool {
        self.max_rel_err < self.tolerance
    }
}

/// Compares analytic gradients of a scalar loss against central differences
/// with step h = 1e-5·(1+|x|). Relative error per coordinate is
/// |analytic − numeric| / max(1, |numeric|); the report carries the maximum.
/// Inputs with requires_grad = false participate in the forward pass but are
/// not probed.
pub fn grad_check<F>(
    name: &str,
    inputs: &[Tensor<f64>],
    settings: &GradCheckSettings,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[NodeId]) -> Result<NodeId>,
{
    let eval = |tensors: &[Tensor<f64>]| -> Result<(Graph<f64>, Vec<NodeId>, NodeId)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = tensors.iter().map(|t| g.leaf(t.clone())).collect();
        let loss = build(&mut g, &ids)?;
        if g.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "grad_check '{name}': builder must return a scalar loss, got {:?}",
                g.shape(loss)
            )));
        }
        Ok((g, ids, loss))
    };

    let (mut g0, ids0, loss0) = eval(inputs)?;
    g0.backward(loss0)?;
    let mut analytic: Vec<Option<Vec<f64>>> = ids0
        .iter()
        .map(|&id| g0.grad(id).map(|s| s.to_vec()))
        .collect();

    if settings.corrupt {
        let target = analytic
            .iter_mut()
            .find_map(|a| a.as_mut())
            .ok_or_else(|| Error::usage(format!("grad_check '{name}': no gradients to corrupt")))?;
        target[0] += 1e-2 * (1.0 + target[0].abs());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(settings.seed);
    let mut max_rel_err = 0.0f64;
    let mut checked = 0usize;
    for (i, input) in inputs.iter().enumerate() {
        if !input.requires_grad {
            continue;
        }
        let a = analytic[i]
            .as_ref()
            .ok_or_else(|| Error::numeric(format!("grad_check '{name}': missing grad on input {i}")))?;
        let n_el = input.numel();
        let coords: Vec<usize> = match settings.samples_per_input {
            Some(k) if k < n_el => rand::seq::index::sample(&mut rng, n_el, k).into_vec(),
            _ => (0..n_el).collect(),
        };
        for &c in &coords {
            let x = input.data()[c];
            let h = 1e-5 * (1.0 + x.abs());
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[c] = x + h;
            let (gp, _, lp) = eval(&plus)?;
            let lp_v = gp.value(lp).data()[0];
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[c] = x - h;
            let (gm, _, lm) = eval(&minus)?;
            let lm_v = gm.value(lm).data()[0];
            let numeric = (lp_v - lm_v) / (2.0 * h);
            if !numeric.is_finite() {
                return Err(Error::numeric(format!(
                    "grad_check '{name}': non-finite numeric gradient at input {i} elem {c}"
                )));
            }
            let rel = (a[c] - numeric).abs() / numeric.abs().max(1.0);
            if rel > max_rel_err {
                max_rel_err = rel;
            }
            checked += 1;
        }
    }
    if checked == 0 {
        return Err(Error::usage(format!(
            "grad_check '{name}': no requires_grad inputs to probe"
        )));
    }
    Ok(GradCheckReport {
        name: name.to_string(),
        max_rel_err,
        checked,
        tolerance: settings.tolerance,
    })
}

/// One gradient check per graph op, with deterministic random inputs sized
/// so exhaustive probing stays fast. Shared by the test suite and the CLI so
/// "op scope" always means the same coverage.
pub fn op_suite(corrupt: bool) -> Result<Vec<GradCheckReport>> {
    use rand::Rng;

    fn rand_t(seed: u64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
        Tensor::new(shape, data).expect("rand_t").requires_grad(true)
    }

    /// Keeps FD probes away from a kink at `kink` so the two-sided stencil
    /// never straddles it.
    fn rand_away_from(seed: u64, shape: &[usize], kink: f64, margin: f64) -> Tensor<f64> {
        let mut t = rand_t(seed, shape, -1.0, 1.0);
        for v in t.data_mut() {
            if (*v - kink).abs() < margin {
                *v = kink + margin * if *v >= kink { 1.5 } else { -1.5 };
            }
        }
        t
    }

    // Loss = sum(out ⊙ fixed random weights): exercises every output element
    // with distinct upstream gradients.
    fn weighted_sum(
        g: &mut Graph<f64>,
        out: NodeId,
        seed: u64,
    ) -> Result<NodeId> {
        let shape = g.shape(out).to_vec();
        let w = g.constant(rand_t(seed ^ 0xab, &shape, -1.0, 1.0));
        let prod = g.mul(out, w)?;
        Ok(g.sum(prod))
    }

    let mut settings = GradCheckSettings::exhaustive(1e-5);
    settings.corrupt = corrupt;
    // Elementwise/linear rules are analytically simple; hold them to 1e-6.
    let mut tight = settings.clone();
    tight.tolerance = 1e-6;

    let mut out = Vec::new();
    out.push(grad_check(
        "conv2d",
        &[
            rand_t(1, &[2, 3, 6, 6], -1.0, 1.0),
            rand_t(2, &[4, 3, 3, 3], -0.5, 0.5),
            rand_t(3, &[4], -0.5, 0.5),
        ],
        &settings,
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1, 1)?;
            weighted_sum(g, y, 10)
        },
    )?);
    out.push(grad_check(
        "conv2d_grouped",
        &[
            rand_t(4, &[2, 4, 5, 5], -1.0, 1.0),
            rand_t(5, &[6, 2, 3, 3], -0.5, 0.5),
        ],
        &settings,
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], None, 1, 1, 2)?;
            weighted_sum(g, y, 11)
        },
    )?);
    out.push(grad_check(
        "conv2d_depthwise",
        &[
            rand_t(6, &[1, 3, 5, 5], -1.0, 1.0),
            rand_t(7, &[3, 1, 3, 3], -0.5, 0.5),
            rand_t(8, &[3], -0.5, 0.5),
        ],
        &settings,
        |g, ids| {
            let y = g.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1, 3)?;
            weighted_sum(g, y, 12)
        },
    )?);
    out.push(grad_check(
        "batch_norm2d",
        &[
            rand_t(9, &[2, 3, 4, 4], -1.0, 1.0),
            rand_t(10, &[3], 0.5, 1.5),
            rand_t(11, &[3], -0.5, 0.5),
        ],
        &settings,
        |g, ids| {
            let (y, _, _) = g.batch_norm2d_train(ids[0], ids[1], ids[2], 1e-5)?;
            weighted_sum(g, y, 13)
        },
    )?);
    out.push(grad_check(
        "batch_norm2d_eval",
        &[
            rand_t(12, &[2, 3, 4, 4], -1.0, 1.0),
            rand_t(13, &[3], 0.5, 1.5),
            rand_t(14, &[3], -0.5, 0.5),
        ],
        &settings,
        |g, ids| {
            let rm = [0.1, -0.2, 0.05];
            let rv = [1.1, 0.9, 1.3];
            let y = g.batch_norm2d_eval(ids[0], ids[1], ids[2], &rm, &rv, 1e-5)?;
            weighted_sum(g, y, 14)
        },
    )?);
    out.push(grad_check(
        "layer_norm",
        &[
            rand_t(15, &[2, 5, 6], -1.0, 1.0),
            rand_t(16, &[6], 0.5, 1.5),
            rand_t(17, &[6], -0.5, 0.5),
        ],
        &tight,
        |g, ids| {
            let y = g.layer_norm(ids[0], ids[1], ids[2], 1e-5)?;
            weighted_sum(g, y, 15)
        },
    )?);
    out.push(grad_check(
        "adaptive_avgpool2d",
        &[rand_t(18, &[2, 3, 7, 7], -1.0, 1.0)],
        &settings,
        |g, ids| {
            // 7→4 produces overlapping bins, the worst case for backward.
            let y = g.adaptive_avgpool2d(ids[0], 4, 4)?;
            weighted_sum(g, y, 16)
        },
    )?);
    out.push(grad_check(
        "linear",
        &[
            rand_t(19, &[2, 4, 5], -1.0, 1.0),
            rand_t(20, &[5, 3], -0.5, 0.5),
            rand_t(21, &[3], -0.5, 0.5),
        ],
        &tight,
        |g, ids| {
            let y = g.linear(ids[0], ids[1], Some(ids[2]))?;
            weighted_sum(g, y, 17)
        },
    )?);
    out.push(grad_check(
        "matmul",
        &[
            rand_t(22, &[2, 3, 4], -1.0, 1.0),
            rand_t(23, &[2, 4, 5], -1.0, 1.0),
        ],
        &settings,
        |g, ids| {
            let y = g.matmul(ids[0], ids[1], false)?;
            weighted_sum(g, y, 18)
        },
    )?);
    out.push(grad_check(
        "matmul_nt",
        &[
            rand_t(24, &[2, 3, 4], -1.0, 1.0),
            rand_t(25, &[2, 5, 4], -1.0, 1.0),
        ],
        &settings,
        |g, ids| {
            let y = g.matmul(ids[0], ids[1], true)?;
            weighted_sum(g, y, 19)
        },
    )?);
    out.push(grad_check(
        "softmax",
        &[rand_t(26, &[2, 4, 5], -2.0, 2.0)],
        &settings,
        |g, ids| {
            let y = g.softmax(ids[0], 2)?;
            weighted_sum(g, y, 20)
        },
    )?);
    out.push(grad_check(
        "relu",
        &[rand_away_from(27, &[3, 7], 0.0, 0.05)],
        &settings,
        |g, ids| {
            let y = g.relu(ids[0]);
            weighted_sum(g, y, 21)
        },
    )?);
    out.push(grad_check(
        "gelu",
        &[rand_t(28, &[3, 7], -2.0, 2.0)],
        &tight,
        |g, ids| {
            let y = g.gelu(ids[0]);
            weighted_sum(g, y, 22)
        },
    )?);
    out.push(grad_check(
        "sigmoid",
        &[rand_t(29, &[3, 7], -3.0, 3.0)],
        &settings,
        |g, ids| {
            let y = g.sigmoid(ids[0]);
            weighted_sum(g, y, 23)
        },
    )?);
    out.push(grad_check(
        "softplus",
        &[rand_t(47, &[3, 7], -4.0, 4.0)],
        &settings,
        |g, ids| {
            let y = g.softplus(ids[0]);
            weighted_sum(g, y, 39)
        },
    )?);
    out.push(grad_check(
        "ln",
        &[rand_t(30, &[3, 7], 0.2, 2.0)],
        &settings,
        |g, ids| {
            let y = g.ln(ids[0]);
            weighted_sum(g, y, 24)
        },
    )?);
    out.push(grad_check(
        "clamp",
        &[{
            let mut t = rand_t(31, &[3, 7], -1.5, 1.5);
            // Keep probes off both clamp edges at ±1.
            for v in t.data_mut() {
                if (v.abs() - 1.0).abs() < 0.05 {
                    *v *= 0.9;
                }
            }
            t
        }],
        &settings,
        |g, ids| {
            let y = g.clamp(ids[0], -1.0, 1.0);
            weighted_sum(g, y, 25)
        },
    )?);
    out.push(grad_check(
        "bilinear_upsample",
        &[rand_t(32, &[1, 2, 3, 4], -1.0, 1.0)],
        &settings,
        |g, ids| {
            let y = g.bilinear_upsample(ids[0], 2)?;
            weighted_sum(g, y, 26)
        },
    )?);
    out.push(grad_check(
        "concat",
        &[
            rand_t(33, &[2, 3, 4], -1.0, 1.0),
            rand_t(34, &[2, 5, 4], -1.0, 1.0),
            rand_t(35, &[2, 1, 4], -1.0, 1.0),
        ],
        &settings,
        |g, ids| {
            let y = g.concat(&[ids[0], ids[1], ids[2]], 1)?;
            weighted_sum(g, y, 27)
        },
    )?);
    out.push(grad_check(
        "reshape",
        &[rand_t(36, &[2, 3, 4], -1.0, 1.0)],
        &settings,
        |g, ids| {
            let y = g.reshape(ids[0], &[4, 6])?;
            weighted_sum(g, y, 28)
        },
    )?);
    out.push(grad_check(
        "permute",
        &[rand_t(37, &[2, 3, 4, 5], -1.0, 1.0)],
        &settings,
        |g, ids| {
            let y = g.permute(ids[0], &[3, 1, 0, 2])?;
            weighted_sum(g, y, 29)
        },
    )?);
    out.push(grad_check(
        "img2seq_seq2img",
        &[rand_t(38, &[2, 3, 4, 5], -1.0, 1.0)],
        &settings,
        |g, ids| {
            let seq = g.img2seq(ids[0])?;
            let back = g.seq2img(seq, 4, 5)?;
            weighted_sum(g, back, 30)
        },
    )?);
    out.push(grad_check(
        "add",
        &[rand_t(39, &[3, 4], -1.0, 1.0), rand_t(40, &[3, 4], -1.0, 1.0)],
        &settings,
        |g, ids| {
            let y = g.add(ids[0], ids[1])?;
            weighted_sum(g, y, 31)
        },
    )?);
    out.push(grad_check(
        "sub",
        &[rand_t(41, &[3, 4], -1.0, 1.0), rand_t(42, &[3, 4], -1.0, 1.0)],
        &settings,
        |g, ids| {
            let y = g.sub(ids[0], ids[1])?;
            weighted_sum(g, y, 32)
        },
    )?);
    out.push(grad_check(
        "mul",
        &[rand_t(43, &[3, 4], -1.0, 1.0), rand_t(44, &[3, 4], -1.0, 1.0)],
        &settings,
        |g, ids| {
            let y = g.mul(ids[0], ids[1])?;
            weighted_sum(g, y, 33)
        },
    )?);
    out.push(grad_check(
        "div",
        &[rand_t(45, &[3, 4], -1.0, 1.0), {
            let mut t = rand_t(46, &[3, 4], 0.5, 1.5);
            // Alternate signs while keeping |denominator| ≥ 0.5.
            for (i, v) in t.data_mut().iter_mut().enumerate() {
                if i % 2 == 0 {
                    *v = -*v;
                }
            }
            t
        }],
        &settings,
        |g, ids| {
            let y = g.div(ids[0], ids[1])?;
            weighted_sum(g, y, 34)
        },
    )?);
    out.push(grad_check(
        "add_scalar",
        &[rand_t(47, &[3, 4], -1.0, 1.0)],
        &settings,
        |g, ids| {
            let y = g.add_scalar(ids[0], 0.37);
            weighted_sum(g, y, 35)
        },
    )?);
    out.push(grad_check(
        "mul_scalar",
        &[rand_t(48, &[3, 4], -1.0, 1.0)],
        &settings,
        |g, ids| {
            let y = g.mul_scalar(ids[0], -1.7);
            weighted_sum(g, y, 36)
        },
    )?);
    out.push(grad_check(
        "sum",
        &[rand_t(49, &[3, 4], -1.0, 1.0)],
        &settings,
        |g, ids| Ok(g.sum(ids[0])),
    )?);
    out.push(grad_check(
        "mean",
        &[rand_t(50, &[3, 4], -1.0, 1.0)],
        &settings,
        |g, ids| Ok(g.mean(ids[0])),
    )?);
    Ok(out)
}

/// Exhaustive check of one full transformer block (attention, position
/// block, feed-forward, their norms) on a 4×4 map. Stage-1 pool ratios are
/// shrunk to {1,2,3,4}: the defaults would pool a map this small to a single
/// repeated token, attention would go uniform, and the query path would
/// carry an exactly-zero gradient instead of being exercised.
pub fn block_suite(corrupt: bool) -> Result<Vec<GradCheckReport>> {
    let mut cfg = ModelConfig::reduced();
    cfg.pool_ratios[0] = [1, 2, 3, 4];
    let model = DefTModel::<f64>::new(cfg, 11)?;
    let mut inputs: Vec<Tensor<f64>> = model
        .params()
        .iter()
        .map(|p| {
            let rg = p.name.starts_with("stage1.block0.");
            p.tensor.clone().requires_grad(rg)
        })
        .collect();
    inputs.push(
        Tensor::from_fn(&[1, 8, 4, 4], |i| ((i * 97 % 51) as f64 / 25.0 - 1.0) * 0.8)
            .requires_grad(true),
    );
    let mut settings = GradCheckSettings::exhaustive(1e-4);
    settings.corrupt = corrupt;
    let rep = grad_check("deft_block", &inputs, &settings, |g, ids| {
        let pids = &ids[..ids.len() - 1];
        let x = ids[ids.len() - 1];
        let y = model.block_forward(g, pids, 0, 0, x)?;
        let shape = g.shape(y).to_vec();
        let w = g.constant(Tensor::from_fn(&shape, |i| ((i * 31 % 17) as f64) * 0.1 - 0.8));
        let p = g.mul(y, w)?;
        Ok(g.sum(p))
    })?;
    Ok(vec![rep])
}

/// Sampled whole-model check on the reduced config: every parameter tensor
/// is probed at a few seeded coordinates through a weighted sum over the
/// prediction and all side outputs, so decoder heads are covered too.
pub fn model_suite(corrupt: bool) -> Result<Vec<GradCheckReport>> {
    let model = DefTModel::<f64>::new(ModelConfig::reduced(), 13)?;
    let mut inputs: Vec<Tensor<f64>> = model
        .params()
        .iter()
        .map(|p| p.tensor.clone().requires_grad(true))
        .collect();
    inputs.push(
        Tensor::from_fn(&[1, 3, 32, 32], |i| ((i * 89 % 29) as f64 / 14.0 - 1.0) * 0.9)
            .requires_grad(true),
    );
    let mut settings = GradCheckSettings::sampled(1e-3, 3, 99);
    settings.corrupt = corrupt;
    let rep = grad_check("deft_model", &inputs, &settings, |g, ids| {
        let pids = &ids[..ids.len() - 1];
        let x = ids[ids.len() - 1];
        let out = model.forward(g, pids, x, true)?;
        let mut loss = {
            let shape = g.shape(out.pred).to_vec();
            let w = g.constant(Tensor::from_fn(&shape, |i| ((i * 13 % 7) as f64) * 0.2 - 0.6));
            let p = g.mul(out.pred, w)?;
            g.sum(p)
        };
        for (si, &s) in out.side.iter().enumerate() {
            let shape = g.shape(s).to_vec();
            let w = g.constant(Tensor::from_fn(&shape, |i| {
                (((i + si * 3) * 11 % 5) as f64) * 0.25 - 0.5
            }));
            let p = g.mul(s, w)?;
            let ps = g.sum(p);
            loss = g.add(loss, ps)?;
        }
        Ok(loss)
    })?;
    Ok(vec![rep])
}
