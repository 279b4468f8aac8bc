//! Segmentation evaluation: confusion counts at a binarization threshold,
//! the five scalar metrics (FPR, FNR, accuracy, F1, MAE), and threshold-sweep
//! precision/recall/F-measure curves. All ratio arithmetic is f64 regardless
//! of the model precision.
//!
//! Zero-denominator conventions (documented limits, so all-background images
//! stay well-defined): fpr = 0 when fp+tn = 0, fnr = 0 when fn+tp = 0,
//! f1 = precision = recall = 1 when the respective denominator is 0 (an
//! empty prediction matching an empty ground truth is vacuously right).
//! Dataset aggregation is micro-averaged: counts pool over every pixel of
//! every image first, ratios come last.

use serde::Serialize;

use crate::data::Sample;
use crate::element::Element;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::model::DefTModel;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.tn += other.tn;
        self.fn_ += other.fn_;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsReport {
    pub fpr: f64,
    pub fnr: f64,
    pub acc: f64,
    pub f1: f64,
    pub mae: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub curves: Option<Vec<CurvePoint>>,
}

impl MetricsReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report always serializes")
    }
}

/// CSV with header `threshold,precision,recall,f_measure`.
pub fn curves_to_csv(points: &[CurvePoint]) -> String {
    let mut out = String::from("threshold,precision,recall,f_measure\n");
    for p in points {
        out.push_str(&format!(
            "{},{},{},{}\n",
            p.threshold, p.precision, p.recall, p.f_measure
        ));
    }
    out
}

/// Pixelwise confusion counts after binarizing `pred` at `threshold`
/// (pred ≥ threshold counts as positive). `gt` must be strictly binary.
pub fn confusion<T: Element>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    threshold: f64,
) -> Result<ConfusionCounts> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(format!(
            "prediction {:?} and ground truth {:?} disagree",
            pred.shape(),
            gt.shape()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let g = g.as_f64();
        if g != 0.0 && g != 1.0 {
            return Err(Error::usage(format!("ground truth value {g} is not binary")));
        }
        let pos = p.as_f64() >= threshold;
        match (pos, g == 1.0) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

fn div_or(num: f64, den: f64, fallback: f64) -> f64 {
    if den == 0.0 { fallback } else { num / den }
}

fn ratios(c: &ConfusionCounts, mae: f64) -> MetricsReport {
    let (tp, fp, tn, fn_) = (c.tp as f64, c.fp as f64, c.tn as f64, c.fn_ as f64);
    MetricsReport {
        fpr: div_or(fp, fp + tn, 0.0),
        fnr: div_or(fn_, fn_ + tp, 0.0),
        acc: div_or(tp + tn, c.total() as f64, 1.0),
        f1: div_or(2.0 * tp, 2.0 * tp + fp + fn_, 1.0),
        mae,
        curves: None,
    }
}

/// Mean absolute difference over continuous predictions (no binarization).
pub fn mean_abs_error<T: Element>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<f64> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape("mae operands disagree in shape"));
    }
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p.as_f64() - g.as_f64()).abs())
        .sum();
    Ok(sum / pred.data().len() as f64)
}

/// Scalar metrics for one prediction/ground-truth pair. `counts` must come
/// from the same pair (callers that aggregate across images pool counts and
/// absolute differences themselves; see [`evaluate`]).
pub fn scalar_metrics<T: Element>(
    counts: &ConfusionCounts,
    pred: &Tensor<T>,
    gt: &Tensor<T>,
) -> Result<MetricsReport> {
    if counts.total() as usize != pred.data().len() {
        return Err(Error::usage(
            "confusion counts do not cover the prediction's pixels",
        ));
    }
    Ok(ratios(counts, mean_abs_error(pred, gt)?))
}

/// Precision/recall/F-measure at `n_thresholds` evenly spaced thresholds
/// k/(n−1), counts pooled over all pairs per threshold, emitted in
/// ascending threshold order.
pub fn curve_sweep<T: Element>(
    pairs: &[(Tensor<T>, Tensor<T>)],
    n_thresholds: usize,
) -> Result<Vec<CurvePoint>> {
    if pairs.is_empty() {
        return Err(Error::usage("curve sweep needs at least one pair"));
    }
    if n_thresholds < 2 {
        return Err(Error::usage("curve sweep needs at least two thresholds"));
    }
    let mut points = Vec::with_capacity(n_thresholds);
    for k in 0..n_thresholds {
        let t = k as f64 / (n_thresholds - 1) as f64;
        let mut c = ConfusionCounts::default();
        for (pred, gt) in pairs {
            c.merge(&confusion(pred, gt, t)?);
        }
        let (tp, fp, fn_) = (c.tp as f64, c.fp as f64, c.fn_ as f64);
        points.push(CurvePoint {
            threshold: t,
            precision: div_or(tp, tp + fp, 1.0),
            recall: div_or(tp, tp + fn_, 1.0),
            f_measure: div_or(2.0 * tp, 2.0 * tp + fp + fn_, 1.0),
        });
    }
    Ok(points)
}

/// Runs the model in inference mode over the dataset and micro-averages:
/// confusion counts and absolute differences pool over every pixel of every
/// image before any ratio is taken. Samples must already be sized for the
/// model (resize rule applied by the caller). `n_thresholds > 0` additionally
/// sweeps curves over that many thresholds.
pub fn evaluate<T: Element>(
    model: &DefTModel<T>,
    samples: &[Sample<T>],
    threshold: f64,
    n_thresholds: usize,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(Error::usage("cannot evaluate an empty dataset"));
    }
    let mut counts = ConfusionCounts::default();
    let mut abs_sum = 0.0f64;
    let mut pixels = 0usize;
    let mut pairs: Vec<(Tensor<T>, Tensor<T>)> = Vec::new();
    for s in samples {
        let (h, w) = s.hw()?;
        let pred = predict(model, s, h, w)?;
        counts.merge(&confusion(&pred, &s.mask, threshold)?);
        abs_sum += mean_abs_error(&pred, &s.mask)? * (h * w) as f64;
        pixels += h * w;
        if n_thresholds > 0 {
            pairs.push((pred, s.mask.clone()));
        }
    }
    let mut report = ratios(&counts, abs_sum / pixels as f64);
    if n_thresholds > 0 {
        report.curves = Some(curve_sweep(&pairs, n_thresholds)?);
    }
    Ok(report)
}

/// Single-sample inference; returns the prediction as [1,H,W].
pub fn predict<T: Element>(
    model: &DefTModel<T>,
    sample: &Sample<T>,
    h: usize,
    w: usize,
) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let pids = model.bind(&mut g);
    let x = g.constant(Tensor::new(&[1, 3, h, w], sample.image.data().to_vec())?);
    let out = model.forward(&mut g, &pids, x, false)?;
    let pred = g.take_value(out.pred);
    Tensor::new(&[1, h, w], pred.into_data())
}
