//! Count panels indexed by (time, area).

use crate::error::{Error, Result};

/// A named time-varying covariate column, stored area-major (`j * T + t`).
#[derive(Debug, Clone, PartialEq)]
pub struct Covariate {
    pub name: String,
    pub values: Vec<f64>,
}

/// Observed outcome counts, exposure series, offsets, covariates and the
/// area-level modifier. All per-row vectors are area-major: row `j * T + t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeSeriesPanel {
    pub area_ids: Vec<String>,
    /// Ordinal time index of each of the `T` time points (e.g. days since epoch).
    pub times: Vec<i64>,
    pub counts: Vec<f64>,
    /// Per-area exposure series, each of length `T`.
    pub exposure: Vec<Vec<f64>>,
    /// Log offset per row (log population when supplied, zero otherwise).
    pub log_offset: Vec<f64>,
    /// Area-level modifier `z_j`; empty when the panel carries none.
    pub modifier: Vec<f64>,
    pub covariates: Vec<Covariate>,
}

impl TimeSeriesPanel {
    pub fn n_areas(&self) -> usize {
        self.area_ids.len()
    }

    pub fn n_times(&self) -> usize {
        self.times.len()
    }

    pub fn n_rows(&self) -> usize {
        self.n_areas() * self.n_times()
    }

    pub fn row(&self, area: usize, time: usize) -> usize {
        area * self.n_times() + time
    }

    pub fn area_index(&self, id: &str) -> Option<usize> {
        self.area_ids.iter().position(|a| a == id)
    }

    pub fn validate(&self) -> Result<()> {
        let (j, t) = (self.n_areas(), self.n_times());
        if j == 0 || t == 0 {
            return Err(Error::Shape("panel has no areas or no time points".into()));
        }
        let n = j * t;
        if self.counts.len() != n {
            return Err(Error::Shape(format!("{} counts for {j} areas x {t} times", self.counts.len())));
        }
        if self.log_offset.len() != n {
            return Err(Error::Shape(format!("{} offsets for {n} rows", self.log_offset.len())));
        }
        if self.exposure.len() != j || self.exposure.iter().any(|s| s.len() != t) {
            return Err(Error::Shape("exposure must hold one series of length T per area".into()));
        }
        if !self.modifier.is_empty() && self.modifier.len() != j {
            return Err(Error::Shape(format!("{} modifier values for {j} areas", self.modifier.len())));
        }
        for c in &self.covariates {
            if c.values.len() != n {
                return Err(Error::Shape(format!("covariate {} has {} values for {n} rows", c.name, c.values.len())));
            }
        }
        if let Some(bad) = self.counts.iter().find(|y| !(y.is_finite() && **y >= 0.0)) {
            return Err(Error::Argument(format!("invalid count {bad}")));
        }
        Ok(())
    }

    /// Replaces each area's exposure by its empirical percentile (midpoint ties).
    pub fn to_percentiles(&mut self) {
        for series in &mut self.exposure {
            *series = empirical_percentiles(series);
        }
    }

    /// Exposure range over all areas.
    pub fn exposure_range(&self) -> (f64, f64) {
        self.exposure.iter().flatten().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
    }
}

/// `F(x) = (#{x' < x} + #{x' = x} / 2) / n` for each element.
pub fn empirical_percentiles(values: &[f64]) -> Vec<f64> {
    let n = values.len();
    let mut sorted: Vec<f64> = values.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    values
        .iter()
        .map(|x| {
            let below = sorted.partition_point(|v| v < x);
            let upto = sorted.partition_point(|v| v <= x);
            (below as f64 + 0.5 * (upto - below) as f64) / n as f64
        })
        .collect()
}

/// Sample quantile with linear interpolation between order statistics.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    let mut s: Vec<f64> = values.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    quantile_sorted(&s, p)
}

pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 0 {
        return f64::NAN;
    }
    let h = (n - 1) as f64 * p.clamp(0.0, 1.0);
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percentiles_with_ties() {
        let p = empirical_percentiles(&[3.0, 1.0, 2.0, 2.0]);
        assert_eq!(p, vec![0.875, 0.125, 0.5, 0.5]);
    }

    #[test]
    fn quantiles_interpolate() {
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.5), 2.5);
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 0.0), 1.0);
        assert_eq!(quantile(&[4.0, 1.0, 3.0, 2.0], 1.0), 4.0);
    }
}
