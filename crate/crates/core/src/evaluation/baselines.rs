use nalgebra::{DMatrix, DVector};

use super::Forecaster;
use crate::data::{TimeSeries, WindowSample};
use crate::error::{Error, Result};

/// Repeats the last observed day for every horizon step.
#[derive(Debug, Clone, Copy)]
pub struct Persistence {
    pub h: usize,
}

impl Forecaster for Persistence {
    fn name(&self) -> String {
        "Persistence".into()
    }

    fn forecast(&self, windows: &[&WindowSample]) -> Result<Vec<Vec<f64>>> {
        windows
            .iter()
            .map(|w| {
                let n = w.target.len() / self.h;
                let last = &w.history_raw[w.history_raw.len() - n..];
                Ok(last.repeat(self.h))
            })
            .collect()
    }
}

/// AR(p) on once-differenced values, with intercept:
/// `d_t = c + Σ_i φ_i d_{t-i}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ArFit {
    pub intercept: f64,
    pub coefs: Vec<f64>,
}

impl ArFit {
    /// Rolls `h` steps ahead from the raw levels `history` (oldest first),
    /// re-integrating the forecast differences.
    pub fn forecast(&self, history: &[f64], h: usize) -> Result<Vec<f64>> {
        let p = self.coefs.len();
        if history.len() < p + 1 {
            return Err(Error::InsufficientData { what: "AR history levels".into(), have: history.len(), need: p + 1 });
        }
        // most recent difference first
        let mut lags: Vec<f64> = history.windows(2).rev().take(p).map(|w| w[1] - w[0]).collect();
        let mut level = history[history.len() - 1];
        let mut out = Vec::with_capacity(h);
        for _ in 0..h {
            let d = self.intercept + self.coefs.iter().zip(&lags).map(|(c, l)| c * l).sum::<f64>();
            level += d;
            out.push(level);
            if p > 0 {
                lags.rotate_right(1);
                lags[0] = d;
            }
        }
        Ok(out)
    }
}

/// Least-squares AR(p) fit on the first differences of `levels`.
///
/// Solved through the normal equations with a vanishing ridge
/// (`1e-10` of the mean diagonal), so rank-deficient designs such as constant
/// or exactly linear series resolve to the minimum-norm fit, which still
/// reproduces their constant difference. `None` when there are too few
/// observations or the system cannot be factored.
pub fn fit_ar_diff(levels: &[f64], p: usize) -> Option<ArFit> {
    let diffs: Vec<f64> = levels.windows(2).map(|w| w[1] - w[0]).collect();
    let rows = diffs.len().checked_sub(p)?;
    if rows < p + 1 {
        return None;
    }
    let x = DMatrix::from_fn(rows, p + 1, |r, c| if c == 0 { 1.0 } else { diffs[p + r - c] });
    let y = DVector::from_iterator(rows, diffs[p..].iter().copied());
    let mut xtx = x.transpose() * &x;
    let ridge = 1e-10 * xtx.trace() / (p + 1) as f64;
    for i in 0..=p {
        xtx[(i, i)] += ridge;
    }
    let beta = xtx.cholesky()?.solve(&(x.transpose() * y));
    if beta.iter().any(|b| !b.is_finite()) {
        return None;
    }
    Some(ArFit { intercept: beta[0], coefs: beta.iter().skip(1).copied().collect() })
}

/// Per-vertex ARIMA(p, 1, 0)-style baseline fitted on a training series.
#[derive(Debug, Clone)]
pub struct ArBaseline {
    pub p: usize,
    pub h: usize,
    /// `None` marks vertices that fall back to persistence.
    pub fits: Vec<Option<ArFit>>,
}

impl ArBaseline {
    pub fn fit(train: &TimeSeries, p: usize, h: usize) -> Result<Self> {
        if train.len() <= p + 1 {
            return Err(Error::InsufficientData { what: "AR training days".into(), have: train.len(), need: p + 2 });
        }
        let fits = (0..train.num_vertices())
            .map(|v| {
                let fit = fit_ar_diff(&train.vertex(v), p);
                if fit.is_none() {
                    log::warn!("AR fit failed for vertex '{}'; using persistence", train.vertex_names()[v]);
                }
                fit
            })
            .collect();
        Ok(Self { p, h, fits })
    }
}

impl Forecaster for ArBaseline {
    fn name(&self) -> String {
        format!("ARIMA({},1,0)", self.p)
    }

    fn forecast(&self, windows: &[&WindowSample]) -> Result<Vec<Vec<f64>>> {
        let n = self.fits.len();
        windows
            .iter()
            .map(|w| {
                let m = w.history_raw.len() / n;
                let mut out = vec![0.0; self.h * n];
                for (v, fit) in self.fits.iter().enumerate() {
                    let series: Vec<f64> = (0..m).map(|t| w.history_raw[t * n + v]).collect();
                    let path = match fit {
                        Some(f) => f.forecast(&series, self.h)?,
                        None => vec![series[m - 1]; self.h],
                    };
                    for (s, val) in path.into_iter().enumerate() {
                        out[s * n + v] = val;
                    }
                }
                Ok(out)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};

    #[test]
    fn persistence_repeats_last_day() {
        let w = WindowSample {
            history: vec![0.0; 4],
            history_raw: vec![1.0, 2.0, 5.0, 7.0],
            target: vec![0.0; 6],
            anchor_date: chrono::NaiveDate::from_ymd_opt(2021, 1, 1).unwrap(),
        };
        let f = Persistence { h: 3 }.forecast(&[&w]).unwrap();
        assert_eq!(f[0], vec![5.0, 7.0, 5.0, 7.0, 5.0, 7.0]);
    }

    #[test]
    fn constant_series_gives_persistence() {
        let fit = fit_ar_diff(&[4.0; 40], 5).unwrap();
        assert!(fit.intercept.abs() < 1e-12 && fit.coefs.iter().all(|c| c.abs() < 1e-12));
        assert_eq!(fit.forecast(&[4.0; 12], 3).unwrap(), vec![4.0; 3]);
    }

    #[test]
    fn linear_series_continues_its_slope() {
        let levels: Vec<f64> = (0..40).map(|i| 3.0 + 2.5 * i as f64).collect();
        let fit = fit_ar_diff(&levels, 5).unwrap();
        let next = fit.forecast(&levels[..12], 2).unwrap();
        assert!((next[0] - (levels[11] + 2.5)).abs() < 1e-9, "{next:?}");
        assert!((next[1] - (levels[11] + 5.0)).abs() < 1e-9);
    }

    #[test]
    fn recovers_known_coefficients() {
        let truth = [0.35, -0.2, 0.15, 0.1, -0.05];
        let c = 0.3;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let noise = Normal::new(0.0, 1e-3).unwrap();
        let mut diffs = vec![0.5, -0.3, 0.8, 0.1, -0.6];
        for _ in 0..2000 {
            let k = diffs.len();
            diffs.push(c + (0..5).map(|i| truth[i] * diffs[k - 1 - i]).sum::<f64>() + noise.sample(&mut rng));
        }
        let mut levels = vec![100.0];
        for d in &diffs {
            levels.push(levels.last().unwrap() + d);
        }
        let fit = fit_ar_diff(&levels, 5).unwrap();
        for (a, b) in fit.coefs.iter().zip(truth) {
            assert!((a - b).abs() < 0.05, "{:?}", fit.coefs);
        }
        assert!((fit.intercept - c).abs() < 0.05);
    }

    #[test]
    fn zero_model_is_persistence() {
        let fit = ArFit { intercept: 0.0, coefs: vec![0.0; 5] };
        let hist = [3.0, 9.0, 1.0, 4.0, 4.5, 8.0, 2.0];
        assert_eq!(fit.forecast(&hist, 4).unwrap(), vec![2.0; 4]);
    }

    #[test]
    fn too_short_series_has_no_fit() {
        assert!(fit_ar_diff(&[1.0, 2.0, 3.0], 5).is_none());
    }
}
