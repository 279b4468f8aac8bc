//! Differentiable training objective: binary cross-entropy + structural
//! similarity + intersection-over-union, equally weighted by default.
//! The loss takes pre-sigmoid logits: BCE uses the softplus identity
//! softplus(z) − z·y, whose gradient σ(z) − y never dies, while SSIM and
//! IoU see the sigmoid output. Computing BCE on clamped probabilities
//! instead leaves any saturated pixel with exactly zero gradient, which
//! turns all-background and all-foreground into absorbing states.

use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::model::ModelOutputs;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// SSIM window: 11×11 Gaussian, σ = 1.5, with the usual stabilizers.
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub bce: f64,
    pub ssim: f64,
    pub iou: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { bce: 1.0, ssim: 1.0, iou: 1.0 }
    }
}

/// The weighted total stays a graph node (for backward); the three raw
/// unweighted term values are copied out for logging.
pub struct LossParts {
    pub total: NodeId,
    pub bce: f64,
    pub ssim: f64,
    pub iou: f64,
}

/// Normalized Gaussian window as a [1,1,K,K] conv kernel.
fn gaussian_window<T: Element>() -> Tensor<T> {
    let k = SSIM_WINDOW;
    let c = (k - 1) as f64 / 2.0;
    let mut one_d = Vec::with_capacity(k);
    for i in 0..k {
        let d = i as f64 - c;
        one_d.push((-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp());
    }
    let norm: f64 = one_d.iter().sum();
    let mut data = Vec::with_capacity(k * k);
    for y in 0..k {
        for x in 0..k {
            data.push(T::from_f64(one_d[y] * one_d[x] / (norm * norm)));
        }
    }
    Tensor::new(&[1, 1, k, k], data).expect("window shape")
}

/// Mean SSIM between prediction and target over zero-padded 11×11 windows.
/// Returns the graph node holding the scalar mean.
fn ssim_mean<T: Element>(g: &mut Graph<T>, pred: NodeId, target: NodeId) -> Result<NodeId> {
    let w = g.constant(gaussian_window());
    let pad = SSIM_WINDOW / 2;
    let conv = |g: &mut Graph<T>, x: NodeId| g.conv2d(x, w, None, 1, pad, 1);
    let mu_p = conv(g, pred)?;
    let mu_t = conv(g, target)?;
    let mu_pp = g.mul(mu_p, mu_p)?;
    let mu_tt = g.mul(mu_t, mu_t)?;
    let mu_pt = g.mul(mu_p, mu_t)?;
    let pp = g.mul(pred, pred)?;
    let tt = g.mul(target, target)?;
    let pt = g.mul(pred, target)?;
    let e_pp = conv(g, pp)?;
    let e_tt = conv(g, tt)?;
    let e_pt = conv(g, pt)?;
    let var_p = g.sub(e_pp, mu_pp)?;
    let var_t = g.sub(e_tt, mu_tt)?;
    let cov = g.sub(e_pt, mu_pt)?;

    let two_mu = g.mul_scalar(mu_pt, 2.0);
    let lum_num = g.add_scalar(two_mu, SSIM_C1);
    let two_cov = g.mul_scalar(cov, 2.0);
    let con_num = g.add_scalar(two_cov, SSIM_C2);
    let num = g.mul(lum_num, con_num)?;
    let mu_sum = g.add(mu_pp, mu_tt)?;
    let lum_den = g.add_scalar(mu_sum, SSIM_C1);
    let var_sum = g.add(var_p, var_t)?;
    let con_den = g.add_scalar(var_sum, SSIM_C2);
    let den = g.mul(lum_den, con_den)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

/// L = w_bce·BCE + w_ssim·(1 − SSIM) + w_iou·(1 − ΣPG/(ΣP+ΣG−ΣPG)),
/// with P = σ(logit). `target` must be binary and shaped like `logit`
/// ([N,1,H,W]).
pub fn hybrid_loss<T: Element>(
    g: &mut Graph<T>,
    logit: NodeId,
    target: NodeId,
    weights: &LossWeights,
) -> Result<LossParts> {
    let ps = g.shape(logit).to_vec();
    let ts = g.shape(target).to_vec();
    if ps != ts {
        return Err(Error::shape(format!(
            "loss operands disagree: prediction {ps:?}, target {ts:?}"
        )));
    }
    if ps.len() != 4 || ps[1] != 1 {
        return Err(Error::shape(format!("loss expects [N,1,H,W], got {ps:?}")));
    }
    g.assert_finite(logit, "prediction entering the loss")?;
    let pred = g.sigmoid(logit);

    // BCE from logits: −[y·ln σ(z) + (1−y)·ln σ(−z)] = softplus(z) − z·y.
    let sp = g.softplus(logit);
    let zy = g.mul(logit, target)?;
    let per_pixel = g.sub(sp, zy)?;
    let bce = g.mean(per_pixel);

    // SSIM on the sigmoid output.
    let ssim = ssim_mean(g, pred, target)?;
    let neg_ssim = g.mul_scalar(ssim, -1.0);
    let ssim_loss = g.add_scalar(neg_ssim, 1.0);

    // IoU on the sigmoid output, pooled over the whole batch.
    let inter_map = g.mul(pred, target)?;
    let inter = g.sum(inter_map);
    let p_sum = g.sum(pred);
    let t_sum = g.sum(target);
    let pt_sum = g.add(p_sum, t_sum)?;
    let union = g.sub(pt_sum, inter)?;
    let iou = g.div(inter, union)?;
    let neg_iou = g.mul_scalar(iou, -1.0);
    let iou_loss = g.add_scalar(neg_iou, 1.0);

    let wb = g.mul_scalar(bce, weights.bce);
    let ws = g.mul_scalar(ssim_loss, weights.ssim);
    let wi = g.mul_scalar(iou_loss, weights.iou);
    let partial = g.add(wb, ws)?;
    let total = g.add(partial, wi)?;

    Ok(LossParts {
        total,
        bce: g.value(bce).data()[0].as_f64(),
        ssim: g.value(ssim_loss).data()[0].as_f64(),
        iou: g.value(iou_loss).data()[0].as_f64(),
    })
}

/// Deep supervision: the hybrid loss summed with equal weight over the
/// final prediction and every side output (their logit nodes). Component
/// values are summed across heads for logging.
pub fn deep_supervised_loss<T: Element>(
    g: &mut Graph<T>,
    outputs: &ModelOutputs<T>,
    target: NodeId,
    weights: &LossWeights,
) -> Result<LossParts> {
    let mut heads = vec![outputs.logit];
    heads.extend_from_slice(&outputs.side_logits);
    let mut total: Option<NodeId> = None;
    let (mut bce, mut ssim, mut iou) = (0.0, 0.0, 0.0);
    for &head in &heads {
        let parts = hybrid_loss(g, head, target, weights)?;
        bce += parts.bce;
        ssim += parts.ssim;
        iou += parts.iou;
        total = Some(match total {
            None => parts.total,
            Some(acc) => g.add(acc, parts.total)?,
        });
    }
    Ok(LossParts {
        total: total.expect("at least the final prediction"),
        bce,
        ssim,
        iou,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn scalar_of<T: Element>(g: &Graph<T>, id: NodeId) -> f64 {
        g.value(id).data()[0].as_f64()
    }

    /// Plain-loop re-computation of all three terms from logits, sharing no
    /// code with the graph path.
    fn loose_oracle(logit: &[f64], target: &[f64], h: usize, w: usize) -> (f64, f64, f64) {
        let n = logit.len();
        let pred: Vec<f64> = logit.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
        let mut bce = 0.0;
        for i in 0..n {
            bce -= target[i] * pred[i].ln() + (1.0 - target[i]) * (1.0 - pred[i]).ln();
        }
        bce /= n as f64;

        // SSIM with an explicitly materialized window and zero padding.
        let k = SSIM_WINDOW;
        let c = (k - 1) as f64 / 2.0;
        let g1: Vec<f64> = (0..k)
            .map(|i| {
                let d = i as f64 - c;
                (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
            })
            .collect();
        let norm: f64 = g1.iter().sum();
        let win: Vec<f64> = (0..k * k)
            .map(|i| g1[i / k] * g1[i % k] / (norm * norm))
            .collect();
        let pad = k / 2;
        let conv_at = |img: &[f64], y: usize, x: usize| -> f64 {
            let mut acc = 0.0;
            for wy in 0..k {
                for wx in 0..k {
                    let iy = y as isize + wy as isize - pad as isize;
                    let ix = x as isize + wx as isize - pad as isize;
                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                        acc += win[wy * k + wx] * img[iy as usize * w + ix as usize];
                    }
                }
            }
            acc
        };
        let pp: Vec<f64> = pred.iter().map(|v| v * v).collect();
        let tt: Vec<f64> = target.iter().map(|v| v * v).collect();
        let pt: Vec<f64> = pred.iter().zip(target).map(|(a, b)| a * b).collect();
        let mut ssim_sum = 0.0;
        for y in 0..h {
            for x in 0..w {
                let mp = conv_at(&pred, y, x);
                let mt = conv_at(target, y, x);
                let vp = conv_at(&pp, y, x) - mp * mp;
                let vt = conv_at(&tt, y, x) - mt * mt;
                let cv = conv_at(&pt, y, x) - mp * mt;
                ssim_sum += (2.0 * mp * mt + SSIM_C1) * (2.0 * cv + SSIM_C2)
                    / ((mp * mp + mt * mt + SSIM_C1) * (vp + vt + SSIM_C2));
            }
        }
        let ssim = 1.0 - ssim_sum / n as f64;

        let inter: f64 = pt.iter().sum();
        let union = pred.iter().sum::<f64>() + target.iter().sum::<f64>() - inter;
        let iou = 1.0 - inter / union;
        (bce, ssim, iou)
    }

    fn node(g: &mut Graph<f64>, shape: &[usize], data: Vec<f64>) -> NodeId {
        g.constant(Tensor::new(shape, data).unwrap())
    }

    #[test]
    fn perfect_prediction_is_nearly_free() {
        // Logits ±30 put the sigmoid within 1e-13 of the binary target.
        let mut g = Graph::new();
        let t: Vec<f64> = (0..64).map(|i| if i % 3 == 0 { 1.0 } else { 0.0 }).collect();
        let z: Vec<f64> = t.iter().map(|&v| if v == 1.0 { 30.0 } else { -30.0 }).collect();
        let target = node(&mut g, &[1, 1, 8, 8], t);
        let logit = node(&mut g, &[1, 1, 8, 8], z);
        let parts = hybrid_loss(&mut g, logit, target, &LossWeights::default()).unwrap();
        assert!(scalar_of(&g, parts.total) < 1e-9);
    }

    #[test]
    fn inverted_prediction_costs_the_full_iou_term() {
        let mut g = Graph::new();
        let t: Vec<f64> = (0..64).map(|i| if i < 20 { 1.0 } else { 0.0 }).collect();
        let inv: Vec<f64> = t.iter().map(|&v| if v == 1.0 { -30.0 } else { 30.0 }).collect();
        let target = node(&mut g, &[1, 1, 8, 8], t);
        let logit = node(&mut g, &[1, 1, 8, 8], inv);
        let parts = hybrid_loss(&mut g, logit, target, &LossWeights::default()).unwrap();
        assert!((parts.iou - 1.0).abs() < 1e-12, "iou term {}", parts.iou);
    }

    #[test]
    fn random_instance_matches_scalar_re_implementation() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..5 {
            let logit: Vec<f64> = (0..64).map(|_| rng.random_range(-2.5..2.5)).collect();
            let target: Vec<f64> =
                (0..64).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
            let (eb, es, ei) = loose_oracle(&logit, &target, 8, 8);
            let mut g = Graph::new();
            let p = node(&mut g, &[1, 1, 8, 8], logit);
            let t = node(&mut g, &[1, 1, 8, 8], target);
            let parts = hybrid_loss(&mut g, p, t, &LossWeights::default()).unwrap();
            assert!((parts.bce - eb).abs() < 1e-9, "bce {} vs {eb}", parts.bce);
            assert!((parts.ssim - es).abs() < 1e-9, "ssim {} vs {es}", parts.ssim);
            assert!((parts.iou - ei).abs() < 1e-9, "iou {} vs {ei}", parts.iou);
            let total = scalar_of(&g, parts.total);
            assert!((total - (eb + es + ei)).abs() < 1e-9);
        }
    }

    #[test]
    fn weights_scale_their_terms() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let logit: Vec<f64> = (0..16).map(|_| rng.random_range(-2.0..2.0)).collect();
        let target: Vec<f64> =
            (0..16).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
        let run = |w: LossWeights| {
            let mut g = Graph::new();
            let p = node(&mut g, &[1, 1, 4, 4], logit.clone());
            let t = node(&mut g, &[1, 1, 4, 4], target.clone());
            let parts = hybrid_loss(&mut g, p, t, &w).unwrap();
            scalar_of(&g, parts.total)
        };
        let bce_only = run(LossWeights { bce: 1.0, ssim: 0.0, iou: 0.0 });
        let double = run(LossWeights { bce: 2.0, ssim: 0.0, iou: 0.0 });
        assert!((double - 2.0 * bce_only).abs() < 1e-12);
    }

    #[test]
    fn five_identical_heads_cost_five_times_one() {
        let mut g = Graph::new();
        let logit_data: Vec<f64> = (0..16).map(|i| -1.5 + 0.2 * i as f64).collect();
        let t: Vec<f64> = (0..16).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect();
        let target = node(&mut g, &[1, 1, 4, 4], t);
        let logit = node(&mut g, &[1, 1, 4, 4], logit_data);
        let pred = g.sigmoid(logit);
        let single = hybrid_loss(&mut g, logit, target, &LossWeights::default()).unwrap();
        let outputs = ModelOutputs {
            pred,
            logit,
            side: vec![pred; 4],
            side_logits: vec![logit; 4],
            bn_stats: Vec::new(),
        };
        let five =
            deep_supervised_loss(&mut g, &outputs, target, &LossWeights::default()).unwrap();
        let s = scalar_of(&g, single.total);
        let f = scalar_of(&g, five.total);
        assert!((f - 5.0 * s).abs() < 1e-12, "{f} vs {}", 5.0 * s);
    }

    #[test]
    fn mismatched_shapes_are_rejected() {
        let mut g = Graph::new();
        let p = node(&mut g, &[1, 1, 4, 4], vec![0.5; 16]);
        let t = node(&mut g, &[1, 1, 2, 2], vec![1.0; 4]);
        assert!(hybrid_loss(&mut g, p, t, &LossWeights::default()).is_err());
    }

    #[test]
    fn loss_gradient_passes_finite_difference_check() {
        use crate::gradcheck::{grad_check, GradCheckSettings};
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let pred_t = Tensor::new(
            &[1, 1, 6, 6],
            (0..36).map(|_| rng.random_range(-2.5..2.5)).collect::<Vec<f64>>(),
        )
        .unwrap()
        .requires_grad(true);
        let targ: Vec<f64> =
            (0..36).map(|_| if rng.random::<f64>() < 0.5 { 1.0 } else { 0.0 }).collect();
        let report = grad_check(
            "hybrid_loss",
            &[pred_t],
            &GradCheckSettings::exhaustive(2e-5),
            move |g, ids| {
                let t = g.constant(Tensor::new(&[1, 1, 6, 6], targ.clone()).unwrap());
                let parts = hybrid_loss(g, ids[0], t, &LossWeights::default())?;
                Ok(parts.total)
            },
        )
        .unwrap();
        assert!(report.pass(), "max rel err {}", report.max_rel_err);
    }
}
