//! Accuracy and precision of parameter estimates against ground truth.
//!
//! Errors are `estimate - truth`. Voxels are grouped by their ground-truth
//! tuple, which must lie on the simulation grid. For each group and each
//! parameter the report holds
//!
//! * `bias = mean(e)`
//! * `std = sqrt(mean((e - bias)^2))`, the population standard deviation
//! * `rmse = sqrt(mean(e^2))`
//!
//! so `rmse^2 = bias^2 + std^2` holds exactly up to round-off.
//!
//! Marginal rows describe a parameter's metrics as a function of its own
//! true value: the per-combination metrics are averaged, unweighted, over
//! all combinations sharing that value, with their population standard
//! deviation alongside.
//!
//! Boxplot quartiles use the `(n + 1) p` order-statistic position with
//! linear interpolation between neighbours, clamped to the sample range.
//! Whiskers extend to the most extreme errors within `median +- 1.5 IQR`.
//!
//! CSV reports have the columns `section,param,key,metric,value`:
//!
//! | section     | key                          | metrics |
//! |-------------|------------------------------|---------|
//! | combination | `S0=0.8;D=0.4` truth tuple   | bias, std, rmse, n |
//! | marginal    | true parameter value         | bias_mean, bias_std, std_mean, std_std, rmse_mean, rmse_std, n_combinations |
//! | overall     | `all`                        | bias, std, rmse, n |
//! | boxplot     | `all`                        | median, q1, q3, whisker_low, whisker_high |

use std::collections::BTreeMap;
use std::io::Write;

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigmodels::ParamGrid;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricCell {
    pub bias: f64,
    pub std: f64,
    pub rmse: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombinationMetrics {
    pub truth: Vec<f64>,
    /// One cell per parameter, in model order.
    pub metrics: Vec<MetricCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginalRow {
    pub param: String,
    pub value: f64,
    pub bias: Spread,
    pub std: Spread,
    pub rmse: Spread,
    pub n_combinations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxplotStats {
    pub median: f64,
    pub q1: f64,
    pub q3: f64,
    pub whisker_low: f64,
    pub whisker_high: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub param_names: Vec<String>,
    pub per_combination: Vec<CombinationMetrics>,
    pub marginal: Vec<MarginalRow>,
    pub overall: Vec<MetricCell>,
    pub boxplot: Vec<BoxplotStats>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn population_std(v: &[f64], mu: f64) -> f64 {
    (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Metrics of one group of errors. Sorting first makes the sums, and so the
/// report, independent of voxel order.
fn cell(errors: &mut [f64]) -> MetricCell {
    errors.sort_by(f64::total_cmp);
    let bias = mean(errors);
    MetricCell {
        bias,
        std: population_std(errors, bias),
        rmse: (errors.iter().map(|e| e * e).sum::<f64>() / errors.len() as f64).sqrt(),
        n: errors.len(),
    }
}

fn spread(v: &[f64]) -> Spread {
    let mu = mean(v);
    Spread {
        mean: mu,
        std: population_std(v, mu),
    }
}

fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    let h = ((n + 1) as f64 * p).clamp(1.0, n as f64);
    let lo = h.floor() as usize;
    let frac = h - lo as f64;
    if lo >= n {
        return sorted[n - 1];
    }
    sorted[lo - 1] + frac * (sorted[lo] - sorted[lo - 1])
}

pub fn boxplot_stats(errors: &[f64]) -> Result<BoxplotStats> {
    if errors.is_empty() {
        return Err(Error::InvalidArgument("boxplot of an empty sample".into()));
    }
    if errors.iter().any(|e| !e.is_finite()) {
        return Err(Error::InvalidArgument("boxplot sample contains non-finite values".into()));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = quantile_sorted(&sorted, 0.5);
    let q1 = quantile_sorted(&sorted, 0.25);
    let q3 = quantile_sorted(&sorted, 0.75);
    let reach = 1.5 * (q3 - q1);
    let (lo, hi) = (median - reach, median + reach);
    let mut inside = sorted.iter().copied().filter(|e| *e >= lo && *e <= hi);
    let whisker_low = inside.clone().next().unwrap_or(median);
    let whisker_high = inside.next_back().unwrap_or(median);
    Ok(BoxplotStats {
        median,
        q1,
        q3,
        whisker_low,
        whisker_high,
    })
}

/// Groups errors by ground-truth tuple and summarises them.
pub fn compute_metrics(predictions: ArrayView2<f64>, truth: ArrayView2<f64>, grid: &ParamGrid) -> Result<EvalReport> {
    if predictions.dim() != truth.dim() {
        return Err(Error::Shape(format!(
            "predictions {:?} vs truth {:?}",
            predictions.dim(),
            truth.dim()
        )));
    }
    let p = truth.ncols();
    if p != grid.values.len() {
        return Err(Error::Shape(format!("{p} columns for a {}-parameter grid", grid.values.len())));
    }
    if truth.nrows() == 0 {
        return Err(Error::Shape("no voxels to evaluate".into()));
    }

    let mut groups: BTreeMap<Vec<usize>, Vec<Vec<f64>>> = BTreeMap::new();
    let mut all: Vec<Vec<f64>> = vec![Vec::with_capacity(truth.nrows()); p];
    for (row, (t, e)) in truth.rows().into_iter().zip(predictions.rows()).enumerate() {
        let mut key = Vec::with_capacity(p);
        for (k, &v) in t.iter().enumerate() {
            let idx = grid.locate(k, v).ok_or_else(|| {
                Error::InvalidArgument(format!("voxel {row}: {} = {v} is not on the grid", grid.names[k]))
            })?;
            key.push(idx);
        }
        let errs = groups.entry(key).or_insert_with(|| vec![Vec::new(); p]);
        for k in 0..p {
            let err = e[k] - t[k];
            if !err.is_finite() {
                return Err(Error::InvalidArgument(format!("voxel {row}: non-finite estimate")));
            }
            errs[k].push(err);
            all[k].push(err);
        }
    }

    let per_combination: Vec<CombinationMetrics> = groups
        .into_iter()
        .map(|(key, mut errs)| CombinationMetrics {
            truth: key.iter().enumerate().map(|(k, &i)| grid.values[k][i]).collect(),
            metrics: errs.iter_mut().map(|e| cell(e)).collect(),
        })
        .collect();

    let mut marginal = Vec::new();
    for k in 0..p {
        for &value in &grid.values[k] {
            let cells: Vec<&MetricCell> = per_combination
                .iter()
                .filter(|c| c.truth[k] == value)
                .map(|c| &c.metrics[k])
                .collect();
            if cells.is_empty() {
                continue;
            }
            let pick = |f: fn(&MetricCell) -> f64| spread(&cells.iter().map(|c| f(c)).collect::<Vec<_>>());
            marginal.push(MarginalRow {
                param: grid.names[k].clone(),
                value,
                bias: pick(|c| c.bias),
                std: pick(|c| c.std),
                rmse: pick(|c| c.rmse),
                n_combinations: cells.len(),
            });
        }
    }

    let boxplot = all.iter().map(|e| boxplot_stats(e)).collect::<Result<Vec<_>>>()?;
    let overall = all.iter_mut().map(|e| cell(e)).collect();
    Ok(EvalReport {
        param_names: grid.names.clone(),
        per_combination,
        marginal,
        overall,
        boxplot,
    })
}

impl EvalReport {
    fn param_position(&self, param: &str) -> Result<usize> {
        self.param_names
            .iter()
            .position(|n| n == param)
            .ok_or_else(|| Error::InvalidArgument(format!("no parameter named {param}")))
    }

    /// Marginal row of `param` at the grid value closest to `value`.
    pub fn marginal_at(&self, param: &str, value: f64) -> Result<&MarginalRow> {
        self.param_position(param)?;
        self.marginal
            .iter()
            .filter(|r| r.param == param)
            .min_by(|a, b| (a.value - value).abs().total_cmp(&(b.value - value).abs()))
            .ok_or_else(|| Error::InvalidArgument(format!("no marginal rows for {param}")))
    }

    pub fn overall_for(&self, param: &str) -> Result<&MetricCell> {
        Ok(&self.overall[self.param_position(param)?])
    }

    pub fn boxplot_for(&self, param: &str) -> Result<&BoxplotStats> {
        Ok(&self.boxplot[self.param_position(param)?])
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["section", "param", "key", "metric", "value"])?;
        let mut row = |section: &str, param: &str, key: &str, metric: &str, value: String| {
            w.write_record([section, param, key, metric, value.as_str()])
        };
        for c in &self.per_combination {
            let key = self
                .param_names
                .iter()
                .zip(&c.truth)
                .map(|(n, v)| format!("{n}={v}"))
                .collect::<Vec<_>>()
                .join(";");
            for (name, m) in self.param_names.iter().zip(&c.metrics) {
                row("combination", name, &key, "bias", m.bias.to_string())?;
                row("combination", name, &key, "std", m.std.to_string())?;
                row("combination", name, &key, "rmse", m.rmse.to_string())?;
                row("combination", name, &key, "n", m.n.to_string())?;
            }
        }
        for r in &self.marginal {
            let key = r.value.to_string();
            for (metric, s) in [("bias", r.bias), ("std", r.std), ("rmse", r.rmse)] {
                row("marginal", &r.param, &key, &format!("{metric}_mean"), s.mean.to_string())?;
                row("marginal", &r.param, &key, &format!("{metric}_std"), s.std.to_string())?;
            }
            row("marginal", &r.param, &key, "n_combinations", r.n_combinations.to_string())?;
        }
        for (name, m) in self.param_names.iter().zip(&self.overall) {
            row("overall", name, "all", "bias", m.bias.to_string())?;
            row("overall", name, "all", "std", m.std.to_string())?;
            row("overall", name, "all", "rmse", m.rmse.to_string())?;
            row("overall", name, "all", "n", m.n.to_string())?;
        }
        for (name, b) in self.param_names.iter().zip(&self.boxplot) {
            row("boxplot", name, "all", "median", b.median.to_string())?;
            row("boxplot", name, "all", "q1", b.q1.to_string())?;
            row("boxplot", name, "all", "q3", b.q3.to_string())?;
            row("boxplot", name, "all", "whisker_low", b.whisker_low.to_string())?;
            row("boxplot", name, "all", "whisker_high", b.whisker_high.to_string())?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Pearson correlation coefficient of two equally long samples.
pub fn pearson_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::Shape(format!("correlation of {} and {} values", x.len(), y.len())));
    }
    let (mx, my) = (mean(x), mean(y));
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::InvalidArgument("correlation of a constant sample".into()));
    }
    Ok(sxy / (sxx * syy).sqrt())
}
