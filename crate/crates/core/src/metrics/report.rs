use std::fmt::Write as _;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use super::{bleu4, rouge_l, rouge_n, MetricError};
use crate::exec::Exec;
use crate::localization::PixelPoint;

/// One side of an evaluated sample: caption tokens and a hazard point.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalRecord<T> {
    pub caption: Vec<T>,
    pub point: PixelPoint,
}

/// The five headline indicators, text scores as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub bleu4: f64,
    pub rouge1: f64,
    pub rouge2: f64,
    #[serde(rename = "rougeL")]
    pub rouge_l: f64,
    pub mse_pixels: f64,
    pub count: usize,
}

impl MetricsReport {
    /// `key = value` lines, one per field.
    pub fn to_kv_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "bleu4 = {}", self.bleu4);
        let _ = writeln!(s, "rouge1 = {}", self.rouge1);
        let _ = writeln!(s, "rouge2 = {}", self.rouge2);
        let _ = writeln!(s, "rougeL = {}", self.rouge_l);
        let _ = writeln!(s, "mse_pixels = {}", self.mse_pixels);
        let _ = writeln!(s, "count = {}", self.count);
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report fields are plain numbers")
    }

    /// Human-readable table with text scores as percentages.
    pub fn display_table(&self) -> String {
        format!(
            "BLEU-4 (%)   {:>8.3}\nROUGE-1 (%)  {:>8.3}\nROUGE-2 (%)  {:>8.3}\nROUGE-L (%)  {:>8.3}\nMSE (px²)    {:>8.3}\nsamples      {:>8}\n",
            self.bleu4 * 100.0,
            self.rouge1 * 100.0,
            self.rouge2 * 100.0,
            self.rouge_l * 100.0,
            self.mse_pixels,
            self.count
        )
    }
}

/// Mean squared Euclidean pixel error: `(1/n) Σ ((x−x*)² + (y−y*)²)`.
pub fn pixel_mse(preds: &[PixelPoint], truths: &[PixelPoint]) -> Result<f64, MetricError> {
    if preds.len() != truths.len() {
        return Err(MetricError::LengthMismatch(preds.len(), truths.len()));
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let total: f64 = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| (p.x - t.x).powi(2) + (p.y - t.y).powi(2))
        .sum();
    Ok(total / preds.len() as f64)
}

/// Macro-averaged report over aligned `truth`/`predicted` records, truncated to
/// the first `max_samples` pairs when given. Per-sample scores may be computed
/// concurrently; the reduction is always in input order.
pub fn corpus_report<T: Eq + Hash + Sync>(
    truth: &[EvalRecord<T>],
    predicted: &[EvalRecord<T>],
    max_samples: Option<usize>,
    exec: Exec,
) -> Result<MetricsReport, MetricError> {
    if truth.len() != predicted.len() {
        return Err(MetricError::LengthMismatch(predicted.len(), truth.len()));
    }
    let n = max_samples.map_or(truth.len(), |m| m.min(truth.len()));
    if n == 0 {
        return Err(MetricError::Empty);
    }
    let pairs: Vec<(&EvalRecord<T>, &EvalRecord<T>)> =
        truth[..n].iter().zip(&predicted[..n]).collect();
    let scores = exec.map(&pairs, |(t, p)| -> Result<[f64; 4], MetricError> {
        Ok([
            bleu4(&p.caption, &t.caption)?,
            rouge_n(&p.caption, &t.caption, 1)?,
            rouge_n(&p.caption, &t.caption, 2)?,
            rouge_l(&p.caption, &t.caption),
        ])
    });
    let mut sums = [0.0; 4];
    for s in scores {
        for (acc, v) in sums.iter_mut().zip(s?) {
            *acc += v;
        }
    }
    let preds: Vec<PixelPoint> = pairs.iter().map(|(_, p)| p.point).collect();
    let truths: Vec<PixelPoint> = pairs.iter().map(|(t, _)| t.point).collect();
    let nf = n as f64;
    Ok(MetricsReport {
        bleu4: sums[0] / nf,
        rouge1: sums[1] / nf,
        rouge2: sums[2] / nf,
        rouge_l: sums[3] / nf,
        mse_pixels: pixel_mse(&preds, &truths)?,
        count: n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(s: &str, x: f64, y: f64) -> EvalRecord<String> {
        EvalRecord {
            caption: s.split_whitespace().map(str::to_owned).collect(),
            point: PixelPoint::new(x, y),
        }
    }

    #[test]
    fn pixel_mse_examples() {
        let p = [PixelPoint::new(3.0, 4.0)];
        let t = [PixelPoint::new(0.0, 0.0)];
        assert_eq!(pixel_mse(&p, &t).unwrap(), 25.0);
        assert_eq!(pixel_mse(&t, &t).unwrap(), 0.0);
        assert!(matches!(
            pixel_mse(&p, &[]),
            Err(MetricError::LengthMismatch(1, 0))
        ));
    }

    #[test]
    fn perfect_predictions() {
        let t = vec![rec("a b c d e", 4.0, 4.0), rec("x y z w", 12.0, 20.0)];
        let r = corpus_report(&t, &t, None, Exec::Sequential).unwrap();
        assert_eq!(
            (r.bleu4, r.rouge1, r.rouge2, r.rouge_l, r.mse_pixels),
            (1.0, 1.0, 1.0, 1.0, 0.0)
        );
        assert_eq!(r.count, 2);
    }

    #[test]
    fn macro_average() {
        let t = vec![rec("a b c d", 0.0, 0.0), rec("a b c d", 0.0, 0.0)];
        let p = vec![rec("a b c d", 0.0, 0.0), rec("", 0.0, 0.0)];
        let r = corpus_report(&t, &p, None, Exec::Sequential).unwrap();
        assert!((r.bleu4 - 0.5).abs() < 1e-12);
    }

    #[test]
    fn max_samples_truncates() {
        let t: Vec<_> = (0..300).map(|i| rec("a b", i as f64, 0.0)).collect();
        let r = corpus_report(&t, &t, Some(250), Exec::default()).unwrap();
        assert_eq!(r.count, 250);
    }

    #[test]
    fn misaligned_inputs() {
        let t = vec![rec("a", 0.0, 0.0)];
        assert!(corpus_report(&t, &[], None, Exec::Sequential).is_err());
    }

    #[test]
    fn serializations_carry_all_fields() {
        let r = MetricsReport {
            bleu4: 0.5,
            rouge1: 0.25,
            rouge2: 0.125,
            rouge_l: 1.0,
            mse_pixels: 3.5,
            count: 7,
        };
        let kv = r.to_kv_text();
        for key in ["bleu4", "rouge1", "rouge2", "rougeL", "mse_pixels", "count"] {
            assert!(kv.contains(&format!("{key} = ")), "{key}");
        }
        let back: MetricsReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
