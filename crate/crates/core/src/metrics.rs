//! One-pass evaluation: center-error precision, overlap success and AUC.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data_model::BoundingBox;
use crate::error::{Error, Result};

/// Distance threshold of the headline precision score, in pixels.
pub const DP_THRESHOLD: f64 = 20.0;

pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn giou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = intersection(a, b);
    let union = a.area() + b.area() - inter;
    let enclosing = (a.right().max(b.right()) - a.x.min(b.x)) * (a.bottom().max(b.bottom()) - a.y.min(b.y));
    inter / union - (enclosing - union) / enclosing
}

fn intersection(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.right().min(b.right()) - a.x.max(b.x)).max(0.0);
    let h = (a.bottom().min(b.bottom()) - a.y.max(b.y)).max(0.0);
    w * h
}

pub fn center_distance(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax, ay) = a.center();
    let (bx, by) = b.center();
    (ax - bx).hypot(ay - by)
}

/// Thresholds 0, 1, ..., 50 pixels.
pub fn precision_thresholds() -> Vec<f64> {
    (0..=50).map(f64::from).collect()
}

/// Thresholds 0.00, 0.05, ..., 1.00.
pub fn success_thresholds() -> Vec<f64> {
    (0..=20).map(|i| i as f64 / 20.0).collect()
}

/// `(threshold, value)` pairs.
pub type Curve = Vec<(f64, f64)>;

/// Fraction of frames whose center error is at most `t`, for each threshold.
pub fn precision_curve(errors: &[f64]) -> Result<Curve> {
    if errors.is_empty() {
        return Err(Error::Argument("precision curve of an empty error list".into()));
    }
    let n = errors.len() as f64;
    Ok(precision_thresholds()
        .into_iter()
        .map(|t| (t, errors.iter().filter(|&&e| e <= t).count() as f64 / n))
        .collect())
}

/// Fraction of frames whose overlap strictly exceeds `t`, and the mean of
/// those fractions. An overlap of exactly 1 never exceeds the last threshold,
/// so perfect tracking scores 20/21.
pub fn success_auc(overlaps: &[f64]) -> Result<(Curve, f64)> {
    if overlaps.is_empty() {
        return Err(Error::Argument("success curve of an empty overlap list".into()));
    }
    let n = overlaps.len() as f64;
    let curve: Curve = success_thresholds()
        .into_iter()
        .map(|t| (t, overlaps.iter().filter(|&&o| o > t).count() as f64 / n))
        .collect();
    let auc = curve.iter().map(|(_, v)| v).sum::<f64>() / curve.len() as f64;
    Ok((curve, auc))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub sequence: String,
    pub center_errors: Vec<f64>,
    pub overlaps: Vec<f64>,
    pub dp_20: f64,
    pub auc: f64,
    pub precision_curve: Curve,
    pub success_curve: Curve,
}

impl EvalResult {
    pub fn new(sequence: &str, predictions: &[BoundingBox], ground_truth: &[BoundingBox]) -> Result<Self> {
        if predictions.len() != ground_truth.len() {
            return Err(Error::Evaluation {
                sequence: sequence.to_string(),
                reason: format!(
                    "{} predictions for {} ground-truth frames",
                    predictions.len(),
                    ground_truth.len()
                ),
            });
        }
        if predictions.is_empty() {
            return Err(Error::Evaluation {
                sequence: sequence.to_string(),
                reason: "no frames to score".into(),
            });
        }
        let center_errors: Vec<f64> = predictions.iter().zip(ground_truth).map(|(p, g)| center_distance(p, g)).collect();
        let overlaps: Vec<f64> = predictions.iter().zip(ground_truth).map(|(p, g)| iou(p, g)).collect();
        let precision_curve = precision_curve(&center_errors)?;
        let (success_curve, auc) = success_auc(&overlaps)?;
        let dp_20 = precision_curve
            .iter()
            .find(|(t, _)| *t == DP_THRESHOLD)
            .map(|(_, v)| *v)
            .expect("20 px is a precision threshold");
        Ok(Self {
            sequence: sequence.to_string(),
            center_errors,
            overlaps,
            dp_20,
            auc,
            precision_curve,
            success_curve,
        })
    }
}

/// Per-sequence results and their sequence-balanced means.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpeReport {
    pub sequences: Vec<EvalResult>,
    pub dp_20: f64,
    pub auc: f64,
}

/// Scores every `(name, predictions, ground truth)` triple.
pub fn evaluate_ope(runs: &[(String, Vec<BoundingBox>, Vec<BoundingBox>)]) -> Result<OpeReport> {
    if runs.is_empty() {
        return Err(Error::Argument("no sequences to evaluate".into()));
    }
    let sequences = runs
        .iter()
        .map(|(name, pred, gt)| EvalResult::new(name, pred, gt))
        .collect::<Result<Vec<_>>>()?;
    let n = sequences.len() as f64;
    Ok(OpeReport {
        dp_20: sequences.iter().map(|r| r.dp_20).sum::<f64>() / n,
        auc: sequences.iter().map(|r| r.auc).sum::<f64>() / n,
        sequences,
    })
}

/// Mean curve over sequences.
pub fn mean_curve(curves: &[&Curve]) -> Curve {
    let n = curves.len() as f64;
    curves[0]
        .iter()
        .enumerate()
        .map(|(i, (t, _))| (*t, curves.iter().map(|c| c[i].1).sum::<f64>() / n))
        .collect()
}

pub fn curve_csv(curve: &Curve) -> String {
    let mut s = String::from("threshold,value\n");
    for (t, v) in curve {
        writeln!(s, "{t},{v}").unwrap();
    }
    s
}

pub fn parse_curve_csv(text: &str) -> Result<Curve> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, "threshold,value")) => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                reason: "expected header threshold,value".into(),
            })
        }
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |reason: String| Error::Parse { line: i + 1, reason };
            let (t, v) = l.split_once(',').ok_or_else(|| bad(format!("expected two fields in {l:?}")))?;
            let t = t.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?;
            let v = v.trim().parse::<f64>().map_err(|e| bad(e.to_string()))?;
            Ok((t, v))
        })
        .collect()
}

impl OpeReport {
    /// `sequence,dp20,auc` rows followed by an `AGGREGATE` row.
    pub fn summary_csv(&self) -> String {
        let mut s = String::from("sequence,dp20,auc\n");
        for r in &self.sequences {
            writeln!(s, "{},{},{}", r.sequence, r.dp_20, r.auc).unwrap();
        }
        writeln!(s, "AGGREGATE,{},{}", self.dp_20, self.auc).unwrap();
        s
    }

    pub fn precision_curve(&self) -> Curve {
        mean_curve(&self.sequences.iter().map(|r| &r.precision_curve).collect::<Vec<_>>())
    }

    pub fn success_curve(&self) -> Curve {
        mean_curve(&self.sequences.iter().map(|r| &r.success_curve).collect::<Vec<_>>())
    }

    /// Writes `summary.csv`, `precision.csv` and `success.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("summary.csv"), self.summary_csv())?;
        fs::write(dir.join("precision.csv"), curve_csv(&self.precision_curve()))?;
        fs::write(dir.join("success.csv"), curve_csv(&self.success_curve()))?;
        Ok(())
    }
}
