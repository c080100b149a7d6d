use std::fmt;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::series::TimeSeries;
use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl fmt::Display for SplitName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

/// How the series is cut into train/val/test.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum SplitSpec {
    /// Val and test get `floor(frac·T)` days each, train the remainder.
    Fractions { train: f64, val: f64, test: f64 },
    /// Inclusive date ranges that must tile the series.
    DateRanges { train: (NaiveDate, NaiveDate), val: (NaiveDate, NaiveDate), test: (NaiveDate, NaiveDate) },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Fractions { train: 0.8, val: 0.1, test: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub train: TimeSeries,
    pub val: TimeSeries,
    pub test: TimeSeries,
}

impl Splits {
    pub fn get(&self, name: SplitName) -> &TimeSeries {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}

/// Day counts `(train, val, test)` for a series of length `t`.
pub fn split_lengths(t: usize, spec: &SplitSpec, first: NaiveDate) -> Result<(usize, usize, usize)> {
    match *spec {
        SplitSpec::Fractions { train, val, test } => {
            if [train, val, test].iter().any(|f| !(0.0..=1.0).contains(f)) || ((train + val + test) - 1.0).abs() > 1e-9
            {
                return Err(Error::invalid(format!(
                    "split fractions must be in [0,1] and sum to 1, got ({train}, {val}, {test})"
                )));
            }
            // the small epsilon keeps e.g. 30*0.1 from flooring to 2
            let floor = |f: f64| (f * t as f64 + 1e-9).floor() as usize;
            let (v, s) = (floor(val), floor(test));
            Ok((t - v - s, v, s))
        }
        SplitSpec::DateRanges { train, val, test } => {
            let last = first + chrono::Days::new(t as u64 - 1);
            let len = |(a, b): (NaiveDate, NaiveDate)| (b - a).num_days() + 1;
            let tiles = train.0 == first
                && val.0 == train.1 + chrono::Days::new(1)
                && test.0 == val.1 + chrono::Days::new(1)
                && test.1 == last;
            if !tiles || [train, val, test].iter().any(|r| len(*r) < 1) {
                return Err(Error::invalid(format!(
                    "split date ranges {}..{}, {}..{}, {}..{} do not partition the series {first}..{last}",
                    train.0, train.1, val.0, val.1, test.0, test.1
                )));
            }
            Ok((len(train) as usize, len(val) as usize, len(test) as usize))
        }
    }
}

/// Contiguous, ordered split; each part must hold at least `min_len` days.
pub fn chronological_split(ts: &TimeSeries, spec: &SplitSpec, min_len: usize) -> Result<Splits> {
    let (a, b, c) = split_lengths(ts.len(), spec, ts.first_date())?;
    for (name, len) in [(SplitName::Train, a), (SplitName::Val, b), (SplitName::Test, c)] {
        if len < min_len {
            return Err(Error::InsufficientData { what: format!("{name} split days"), have: len, need: min_len });
        }
    }
    Ok(Splits { train: ts.slice(0, a)?, val: ts.slice(a, a + b)?, test: ts.slice(a + b, a + b + c)? })
}

/// Scalar z-score statistics of one split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub mean: f64,
    pub std: f64,
    pub scope: SplitName,
}

impl NormStats {
    /// Population mean and std over every value, std floored at [`STD_FLOOR`].
    pub fn fit(values: &[f64], scope: SplitName) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::EmptyInput("normalization values"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Ok(Self { mean, std: var.sqrt().max(STD_FLOOR), scope })
    }

    pub fn normalize(&self, v: f64) -> f64 {
        (v - self.mean) / self.std
    }

    pub fn denormalize(&self, z: f64) -> f64 {
        z * self.std + self.mean
    }
}

pub fn zscore(split: &TimeSeries, scope: SplitName) -> Result<(TimeSeries, NormStats)> {
    let stats = NormStats::fit(split.values(), scope)?;
    let z = split.values().iter().map(|&v| stats.normalize(v)).collect();
    Ok((split.with_values(z)?, stats))
}

pub fn inverse_zscore(split: &TimeSeries, stats: &NormStats) -> Result<TimeSeries> {
    split.with_values(split.values().iter().map(|&z| stats.denormalize(z)).collect())
}

/// One training/evaluation example. Arrays are row-major with time outermost.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSample {
    /// `M×N` normalized history (the single feature axis is implicit).
    pub history: Vec<f64>,
    /// `M×N` raw history.
    pub history_raw: Vec<f64>,
    /// `H×N` raw target.
    pub target: Vec<f64>,
    pub anchor_date: NaiveDate,
}

pub fn window_count(len: usize, m: usize, h: usize) -> usize {
    (len + 1).saturating_sub(m + h)
}

/// Stride-1 windows over a split; histories normalized with `stats`.
pub fn make_windows(split: &TimeSeries, stats: &NormStats, m: usize, h: usize) -> Result<Vec<WindowSample>> {
    if m == 0 || h == 0 {
        return Err(Error::invalid("window lengths M and H must be positive"));
    }
    if split.len() < m + h {
        return Err(Error::InsufficientData { what: "days for one window".into(), have: split.len(), need: m + h });
    }
    let n = split.num_vertices();
    let vals = split.values();
    Ok((0..window_count(split.len(), m, h))
        .map(|s| {
            let history_raw = vals[s * n..(s + m) * n].to_vec();
            WindowSample {
                history: history_raw.iter().map(|&v| stats.normalize(v)).collect(),
                history_raw,
                target: vals[(s + m) * n..(s + m + h) * n].to_vec(),
                anchor_date: split.dates()[s + m - 1],
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormalizationMode {
    /// Each split normalized by its own statistics.
    #[default]
    PerSplit,
    /// Every split normalized by the train statistics.
    TrainStats,
}

#[derive(Debug, Clone)]
pub struct SplitWindows {
    pub series: TimeSeries,
    pub stats: NormStats,
    pub windows: Vec<WindowSample>,
}

#[derive(Debug, Clone)]
pub struct WindowedDataset {
    pub m: usize,
    pub h: usize,
    pub train: SplitWindows,
    pub val: SplitWindows,
    pub test: SplitWindows,
}

impl WindowedDataset {
    pub fn build(ts: &TimeSeries, spec: &SplitSpec, m: usize, h: usize, mode: NormalizationMode) -> Result<Self> {
        let splits = chronological_split(ts, spec, m + h)?;
        let train_stats = NormStats::fit(splits.train.values(), SplitName::Train)?;
        let part = |name: SplitName| -> Result<SplitWindows> {
            let series = splits.get(name).clone();
            let stats = match mode {
                NormalizationMode::TrainStats => train_stats,
                NormalizationMode::PerSplit => NormStats::fit(series.values(), name)?,
            };
            let windows = make_windows(&series, &stats, m, h)?;
            Ok(SplitWindows { series, stats, windows })
        };
        Ok(Self { m, h, train: part(SplitName::Train)?, val: part(SplitName::Val)?, test: part(SplitName::Test)? })
    }

    pub fn num_vertices(&self) -> usize {
        self.train.series.num_vertices()
    }

    pub fn get(&self, name: SplitName) -> &SplitWindows {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }
}
