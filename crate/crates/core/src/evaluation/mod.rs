//! Forecast metrics per horizon step, the evaluation protocol and reference
//! baselines.

mod baselines;
mod metrics;

pub use baselines::{fit_ar_diff, ArBaseline, ArFit, Persistence};
pub use metrics::{mae, rmse, rmsle};

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{NormStats, WindowSample};
use crate::error::{Error, Result};
use crate::model::StsgtModel;
use crate::training::predict_windows;

/// Anything producing raw-unit `H×N` forecasts (row-major, step outermost)
/// for a batch of windows.
pub trait Forecaster {
    fn name(&self) -> String;
    fn forecast(&self, windows: &[&WindowSample]) -> Result<Vec<Vec<f64>>>;
}

/// A trained network with the statistics used to normalize its inputs.
pub struct ModelForecaster<'a> {
    pub model: &'a StsgtModel,
    pub stats: NormStats,
    pub batch_size: usize,
    pub label: String,
}

impl Forecaster for ModelForecaster<'_> {
    fn name(&self) -> String {
        self.label.clone()
    }

    fn forecast(&self, windows: &[&WindowSample]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(windows.len());
        for chunk in windows.chunks(self.batch_size.max(1)) {
            let pred = predict_windows(self.model, chunk, &self.stats)?;
            let per = pred.numel() / chunk.len();
            out.extend(pred.data().chunks(per).map(<[f64]>::to_vec));
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub mae: f64,
    pub rmsle: f64,
    pub rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub algorithm: String,
    /// Index `h-1` holds horizon step `h`.
    pub steps: Vec<StepMetrics>,
    pub mean: StepMetrics,
    pub dataset: String,
    pub target: String,
    pub split: String,
}

impl MetricsReport {
    /// Pools `(truth, pred)` pairs per step and averages over steps.
    pub fn from_pooled(algorithm: String, truth: &[Vec<f64>], pred: &[Vec<f64>]) -> Result<Self> {
        if truth.is_empty() || truth.len() != pred.len() {
            return Err(Error::dim("metrics report", &[truth.len()], &[pred.len()]));
        }
        let steps = truth
            .iter()
            .zip(pred)
            .map(|(t, p)| Ok(StepMetrics { mae: mae(t, p)?, rmsle: rmsle(t, p)?, rmse: rmse(t, p)? }))
            .collect::<Result<Vec<_>>>()?;
        let k = steps.len() as f64;
        let mean = StepMetrics {
            mae: steps.iter().map(|s| s.mae).sum::<f64>() / k,
            rmsle: steps.iter().map(|s| s.rmsle).sum::<f64>() / k,
            rmse: steps.iter().map(|s| s.rmse).sum::<f64>() / k,
        };
        Ok(Self { algorithm, steps, mean, dataset: String::new(), target: String::new(), split: String::new() })
    }

    pub fn horizon(&self) -> usize {
        self.steps.len()
    }
}

/// Forecasts every window, then pools all windows × vertices per horizon step.
pub fn evaluate(f: &dyn Forecaster, windows: &[WindowSample], h: usize) -> Result<MetricsReport> {
    if windows.is_empty() {
        return Err(Error::EmptyInput("evaluation windows"));
    }
    let refs: Vec<&WindowSample> = windows.iter().collect();
    let preds = f.forecast(&refs)?;
    let n = windows[0].target.len() / h;
    let mut truth = vec![Vec::with_capacity(windows.len() * n); h];
    let mut pred = vec![Vec::with_capacity(windows.len() * n); h];
    for (w, p) in windows.iter().zip(&preds) {
        if p.len() != h * n || w.target.len() != h * n {
            return Err(Error::dim("evaluate", &[h, n], &[p.len()]));
        }
        for s in 0..h {
            truth[s].extend_from_slice(&w.target[s * n..(s + 1) * n]);
            pred[s].extend_from_slice(&p[s * n..(s + 1) * n]);
        }
    }
    MetricsReport::from_pooled(f.name(), &truth, &pred)
}

fn mean_label(h: usize) -> String {
    if h == 1 {
        "1 Day Mean".into()
    } else {
        format!("{h} Days Mean")
    }
}

/// CSV with one row per algorithm and horizon step plus a mean row:
/// `dataset,target,split,algorithm,horizon,mae,rmsle,rmse`.
pub fn write_metrics_csv<W: Write>(w: W, reports: &[MetricsReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["dataset", "target", "split", "algorithm", "horizon", "mae", "rmsle", "rmse"])?;
    for r in reports {
        let rows = r
            .steps
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("Day {}", i + 1), s))
            .chain([(mean_label(r.horizon()), &r.mean)]);
        for (label, s) in rows {
            w.write_record([
                r.dataset.as_str(),
                &r.target,
                &r.split,
                &r.algorithm,
                &label,
                &s.mae.to_string(),
                &s.rmsle.to_string(),
                &s.rmse.to_string(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Aligned text table with a "Day 1 (H=1)" row and a horizon-mean row per algorithm.
pub fn format_metrics_table(reports: &[MetricsReport]) -> String {
    let mut rows = vec![["Algorithm".to_string(), "Horizon".into(), "MAE".into(), "RMSLE".into(), "RMSE".into()]];
    for r in reports {
        for (label, s) in [("Day 1 (H=1)".to_string(), &r.steps[0]), (mean_label(r.horizon()), &r.mean)] {
            rows.push([
                r.algorithm.clone(),
                label,
                format!("{:.2}", s.mae),
                format!("{:.3}", s.rmsle),
                format!("{:.2}", s.rmse),
            ]);
        }
    }
    let widths: Vec<usize> = (0..5).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for (i, row) in rows.iter().enumerate() {
        let cells: Vec<String> = row
            .iter()
            .enumerate()
            .map(|(c, v)| if c < 2 { format!("{v:<w$}", w = widths[c]) } else { format!("{v:>w$}", w = widths[c]) })
            .collect();
        let _ = writeln!(out, "{}", cells.join("  ").trim_end());
        if i == 0 {
            let _ = writeln!(out, "{}", "-".repeat(widths.iter().sum::<usize>() + 8));
        }
    }
    out
}
