//! MAE and F-measure threshold curves against clean ground truth.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::model::{self, ModelError, PredictorParams};
use crate::tensor::Tensor;

pub const THRESHOLDS: usize = 256;
pub const BETA2: f64 = 0.3;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("prediction has {pred} values, ground truth {gt}")]
    Shape { pred: usize, gt: usize },
    #[error("ground truth value {0} is not binary")]
    NonBinary(f64),
    #[error("dataset has no clean labels to evaluate against")]
    MissingClean,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Image(#[from] image::ImageError),
    #[error("{0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

fn check(pred: &[f64], gt: &[f64]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(EvalError::Shape {
            pred: pred.len(),
            gt: gt.len(),
        });
    }
    Ok(())
}

pub fn mae(pred: &[f64], gt: &[f64]) -> Result<f64> {
    check(pred, gt)?;
    if pred.is_empty() {
        return Ok(0.0);
    }
    Ok(pred.iter().zip(gt).map(|(a, b)| (a - b).abs()).sum::<f64>() / pred.len() as f64)
}

/// `(1+β²)PR / (β²P + R)`, zero when nothing is predicted or nothing is salient.
pub fn f_beta(tp: u64, predicted: u64, positives: u64) -> f64 {
    if predicted == 0 || positives == 0 || tp == 0 {
        return 0.0;
    }
    let p = tp as f64 / predicted as f64;
    let r = tp as f64 / positives as f64;
    (1.0 + BETA2) * p * r / (BETA2 * p + r)
}

/// Largest `k` with `v ≥ k/255`.
fn bin(v: f64) -> usize {
    let v = v.clamp(0.0, 1.0);
    let mut k = ((v * 255.0).floor() as usize).min(255);
    while k < 255 && v >= (k + 1) as f64 / 255.0 {
        k += 1;
    }
    while k > 0 && v < k as f64 / 255.0 {
        k -= 1;
    }
    k
}

/// F-measure at thresholds `k/255`, `k = 0..=255`, predicting salient where `pred ≥ k/255`.
pub fn f_measure_curve(pred: &[f64], gt: &[f64]) -> Result<Vec<f64>> {
    check(pred, gt)?;
    let mut hist_all = [0u64; THRESHOLDS];
    let mut hist_pos = [0u64; THRESHOLDS];
    let mut positives = 0;
    for (&p, &g) in pred.iter().zip(gt) {
        let k = bin(p);
        hist_all[k] += 1;
        if g == 1.0 {
            hist_pos[k] += 1;
            positives += 1;
        } else if g != 0.0 {
            return Err(EvalError::NonBinary(g));
        }
    }
    let mut curve = vec![0.0; THRESHOLDS];
    let (mut predicted, mut tp) = (0, 0);
    for k in (0..THRESHOLDS).rev() {
        predicted += hist_all[k];
        tp += hist_pos[k];
        curve[k] = f_beta(tp, predicted, positives);
    }
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub id: usize,
    pub mae: f64,
    pub mean_f: f64,
    pub mean_pred: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub f_curve: Vec<f64>,
    pub mean_f: f64,
    pub max_f: f64,
    /// Mean predicted saliency over all pixels and images.
    pub mean_pred: f64,
    pub per_image: Vec<ImageMetrics>,
}

impl MetricReport {
    /// Macro-averages per-image metrics over `(id, prediction, ground truth)` triples.
    pub fn from_maps<'a>(items: impl IntoIterator<Item = (usize, &'a [f64], &'a [f64])>) -> Result<Self> {
        let mut per_image = Vec::new();
        let mut curve = vec![0.0; THRESHOLDS];
        for (id, pred, gt) in items {
            let c = f_measure_curve(pred, gt)?;
            for (a, b) in curve.iter_mut().zip(&c) {
                *a += b;
            }
            per_image.push(ImageMetrics {
                id,
                mae: mae(pred, gt)?,
                mean_f: c.iter().sum::<f64>() / THRESHOLDS as f64,
                mean_pred: pred.iter().sum::<f64>() / pred.len().max(1) as f64,
            });
        }
        let n = per_image.len().max(1) as f64;
        curve.iter_mut().for_each(|v| *v /= n);
        let mean = |f: fn(&ImageMetrics) -> f64| per_image.iter().map(f).sum::<f64>() / n;
        Ok(Self {
            mae: mean(|m| m.mae),
            mean_f: curve.iter().sum::<f64>() / THRESHOLDS as f64,
            max_f: curve.iter().copied().fold(0.0, f64::max),
            mean_pred: mean(|m| m.mean_pred),
            f_curve: curve,
            per_image,
        })
    }

    /// Tab-separated report: summary lines, the curve, then per-image rows.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        writeln!(s, "mae\t{:.6}", self.mae).unwrap();
        writeln!(s, "mean_f\t{:.6}", self.mean_f).unwrap();
        writeln!(s, "max_f\t{:.6}", self.max_f).unwrap();
        writeln!(s, "mean_pred\t{:.6}", self.mean_pred).unwrap();
        writeln!(s, "\nthreshold\tf").unwrap();
        for (k, f) in self.f_curve.iter().enumerate() {
            writeln!(s, "{k}\t{f:.6}").unwrap();
        }
        writeln!(s, "\nid\tmae\tmean_f\tmean_pred").unwrap();
        for m in &self.per_image {
            writeln!(s, "{}\t{:.6}\t{:.6}\t{:.6}", m.id, m.mae, m.mean_f, m.mean_pred).unwrap();
        }
        s
    }
}

/// Saliency maps for every example, computed in chunks of `batch`.
pub fn predict_dataset(params: &PredictorParams, data: &Dataset, batch: usize) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch.max(1)) {
        let (x, _) = data.batch(chunk);
        let s = model::predict_saliency(params, &x)?;
        out.extend((0..chunk.len()).map(|i| s.sample(i)));
    }
    Ok(out)
}

/// Runs the predictor over a clean-labelled dataset and aggregates metrics.
pub fn evaluate(params: &PredictorParams, data: &Dataset) -> Result<(MetricReport, Vec<Tensor>)> {
    if !data.has_clean() {
        return Err(EvalError::MissingClean);
    }
    let preds = predict_dataset(params, data, 20)?;
    let report = MetricReport::from_maps(
        data.pairs
            .iter()
            .zip(&preds)
            .map(|(p, s)| (p.id, s.data(), p.clean.as_ref().expect("checked").data())),
    )?;
    Ok((report, preds))
}

const PALETTE: [[u8; 3]; 6] = [[31, 119, 180], [214, 39, 40], [44, 160, 44], [255, 127, 14], [148, 103, 189], [23, 190, 207]];

/// Plots F-measure curves (x: threshold 0–255, y: F 0–1) as a PNG.
pub fn write_curve_png(path: &Path, curves: &[&[f64]]) -> Result<()> {
    let (w, h, m) = (296u32, 236u32, 20u32);
    let mut img = image::RgbImage::from_pixel(w, h, image::Rgb([255, 255, 255]));
    let (pw, ph) = (w - 2 * m, h - 2 * m);
    for x in m..=m + pw {
        img.put_pixel(x, m + ph, image::Rgb([0, 0, 0]));
    }
    for y in m..=m + ph {
        img.put_pixel(m, y, image::Rgb([0, 0, 0]));
    }
    for tick in 1..=4 {
        let y = m + ph - ph * tick / 4;
        for x in (m..m + pw).step_by(4) {
            img.put_pixel(x, y, image::Rgb([200, 200, 200]));
        }
    }
    let to_px = |k: usize, f: f64| -> (f64, f64) { (m as f64 + k as f64 / 255.0 * pw as f64, (m + ph) as f64 - f.clamp(0.0, 1.0) * ph as f64) };
    for (ci, curve) in curves.iter().enumerate() {
        let color = image::Rgb(PALETTE[ci % PALETTE.len()]);
        for k in 1..curve.len() {
            let (x0, y0) = to_px(k - 1, curve[k - 1]);
            let (x1, y1) = to_px(k, curve[k]);
            let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
            for s in 0..=steps {
                let t = s as f64 / steps as f64;
                let (x, y) = (x0 + t * (x1 - x0), y0 + t * (y1 - y0));
                img.put_pixel((x.round() as u32).min(w - 1), (y.round() as u32).min(h - 1), color);
            }
        }
    }
    img.save(path)?;
    Ok(())
}
