//! Relative risks, ratios of relative risks, exceedance probabilities and
//! backward attributable fractions from a fitted model.
//!
//! Intervals are quantiles of draws from the Gaussian approximation
//! `N(ξ̂, Σ̂)` restricted to the cross-basis coefficients `(θ⁽¹⁾, θ⁽²⁾)`.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::laplace::FitResult;
use crate::linalg::cholesky_with_jitter;
use crate::model::Model;
use crate::panel::{quantile_sorted, TimeSeriesPanel};

pub const DEFAULT_DRAWS: usize = 2000;
const LOWER: f64 = 0.025;
const UPPER: f64 = 0.975;

/// Lag selection for a relative-risk contrast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LagSel {
    Lag(usize),
    /// Cumulated over all lags.
    Overall,
}

/// Point estimate and 95% interval of one contrast.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RRCell {
    pub x: f64,
    pub z: f64,
    pub lag: LagSel,
    /// Log relative risk at the mode.
    pub estimate: f64,
    pub lo: f64,
    pub hi: f64,
    /// Closed-form Gaussian standard deviation `sqrt(cᵀΣ̂c)`.
    pub sd: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExceedanceCell {
    pub x: f64,
    pub z: f64,
    pub probability: f64,
    /// The contrast is identically zero; the probability is reported as 0.
    pub degenerate: bool,
}

/// Curve of ratios of relative risks on the RR scale.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RRRCell {
    pub x: f64,
    pub rrr: f64,
    pub lo: f64,
    pub hi: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AreaAF {
    pub area: String,
    pub af: f64,
    pub lo: f64,
    pub hi: f64,
    pub counterfactual: Option<(f64, f64, f64)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AFSummary {
    pub areas: Vec<AreaAF>,
    /// Set when the period holds fewer than `L + 1` time points.
    pub short_period: bool,
}

/// Fitted cross-basis coefficients with a fixed set of posterior draws.
#[derive(Debug, Clone)]
pub struct Posterior<'a> {
    pub model: &'a Model,
    pub theta_hat: DVector<f64>,
    pub sigma_theta: DMatrix<f64>,
    /// `n_θ x n_draws`, one draw per column.
    pub draws: DMatrix<f64>,
    mu_hat: Vec<DVector<f64>>,
}

fn summarize(values: &mut [f64]) -> (f64, f64) {
    values.sort_by(|a, b| a.total_cmp(b));
    (quantile_sorted(values, LOWER), quantile_sorted(values, UPPER))
}

impl<'a> Posterior<'a> {
    pub fn new(model: &'a Model, fit: &FitResult, n_draws: usize, seed: u64) -> Result<Self> {
        let layout = model.layout();
        if fit.xi.len() != layout.n_xi {
            return Err(Error::Consistency(format!("fit has {} coefficients, model has {}", fit.xi.len(), layout.n_xi)));
        }
        if n_draws == 0 {
            return Err(Error::Argument("at least one posterior draw is required".into()));
        }
        let start = layout.theta1.0;
        let n = layout.theta1.1 + layout.theta2.1;
        let theta_hat = fit.xi.rows(start, n).into_owned();
        let sigma_theta = fit.sigma.view((start, start), (n, n)).into_owned();
        let chol = cholesky_with_jitter(sigma_theta.clone(), "posterior covariance of the cross-basis coefficients")?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let z = DMatrix::from_fn(n, n_draws, |_, _| StandardNormal.sample(&mut rng));
        let mut draws = chol.l() * z;
        for mut col in draws.column_iter_mut() {
            col += &theta_hat;
        }
        let mu_hat = model.design.eta(&fit.xi).into_iter().map(|e| e.map(f64::exp)).collect();
        Ok(Self { model, theta_hat, sigma_theta, draws, mu_hat })
    }

    pub fn n_draws(&self) -> usize {
        self.draws.ncols()
    }

    fn p(&self) -> usize {
        self.model.crossbasis.n_coef()
    }

    /// Weights `(1, c_1(z), ..., c_vz(z))` of the coefficient blocks at `z`.
    fn block_weights(&self, z: f64) -> Result<Vec<f64>> {
        let mut w = vec![1.0];
        w.extend(self.model.modifier_row(z)?);
        Ok(w)
    }

    /// Modified coefficients `θ_z = θ⁽¹⁾ + Σ_r c_r(z) θ⁽²⁾_r` at the mode and per draw.
    fn theta_at(&self, z: f64) -> Result<(DVector<f64>, DMatrix<f64>)> {
        let p = self.p();
        let w = self.block_weights(z)?;
        let mut hat = DVector::zeros(p);
        let mut draws = DMatrix::zeros(p, self.n_draws());
        for (r, &c) in w.iter().enumerate() {
            if c == 0.0 {
                continue;
            }
            hat += self.theta_hat.rows(r * p, p) * c;
            draws += self.draws.rows(r * p, p) * c;
        }
        Ok((hat, draws))
    }

    /// Contrast over `(θ⁽¹⁾, θ⁽²⁾)` for one cell.
    pub fn contrast(&self, x: f64, x0: f64, z: f64, lag: LagSel) -> Result<DVector<f64>> {
        let cb = &self.model.crossbasis;
        let a = match lag {
            LagSel::Lag(l) => cb.lag_contrast(x, x0, l)?,
            LagSel::Overall => cb.overall_contrast(x, x0)?,
        };
        let w = self.block_weights(z)?;
        let p = a.len();
        let mut c = DVector::zeros(p * w.len());
        for (r, &wr) in w.iter().enumerate() {
            for q in 0..p {
                c[r * p + q] = wr * a[q];
            }
        }
        Ok(c)
    }

    /// Log-RR cells for every `(x, lag)` at one modifier value.
    pub fn surface(&self, xs: &[f64], x0: f64, z: f64, lags: &[LagSel]) -> Result<Vec<RRCell>> {
        let cb = &self.model.crossbasis;
        let (hat, draws) = self.theta_at(z)?;
        let cells: Vec<(f64, LagSel)> = xs.iter().flat_map(|&x| lags.iter().map(move |&l| (x, l))).collect();
        let p = self.p();
        let mut a = DMatrix::zeros(cells.len(), p);
        let mut full = Vec::with_capacity(cells.len());
        for (i, &(x, l)) in cells.iter().enumerate() {
            let row = match l {
                LagSel::Lag(k) => cb.lag_contrast(x, x0, k)?,
                LagSel::Overall => cb.overall_contrast(x, x0)?,
            };
            for q in 0..p {
                a[(i, q)] = row[q];
            }
            full.push(self.contrast(x, x0, z, l)?);
        }
        let est = &a * hat;
        let vals = &a * draws;
        let mut out = Vec::with_capacity(cells.len());
        for (i, &(x, lag)) in cells.iter().enumerate() {
            let mut v: Vec<f64> = vals.row(i).iter().copied().collect();
            let (lo, hi) = summarize(&mut v);
            let c = &full[i];
            let sd = (c.dot(&(&self.sigma_theta * c))).max(0.0).sqrt();
            out.push(RRCell { x, z, lag, estimate: est[i], lo, hi, sd });
        }
        Ok(out)
    }

    /// Log-RR over a grid of `(x, z, lag)`.
    pub fn log_rr(&self, xs: &[f64], x0: f64, zs: &[f64], lags: &[LagSel]) -> Result<Vec<RRCell>> {
        let mut out = Vec::new();
        for &z in zs {
            out.extend(self.surface(xs, x0, z, lags)?);
        }
        Ok(out)
    }

    fn overall_values(&self, x: f64, x0: f64, z: f64) -> Result<(f64, Vec<f64>, bool)> {
        let c = self.contrast(x, x0, z, LagSel::Overall)?;
        let degenerate = c.iter().all(|v| *v == 0.0);
        let est = c.dot(&self.theta_hat);
        let vals = self.draws.tr_mul(&c);
        Ok((est, vals.iter().copied().collect(), degenerate))
    }

    /// `exp(log RR_overall(z_hi) − log RR_overall(z_lo))` with paired draws.
    pub fn rrr(&self, xs: &[f64], x0: f64, z_hi: f64, z_lo: f64) -> Result<Vec<RRRCell>> {
        xs.iter()
            .map(|&x| {
                let (eh, vh, _) = self.overall_values(x, x0, z_hi)?;
                let (el, vl, _) = self.overall_values(x, x0, z_lo)?;
                let mut d: Vec<f64> = vh.iter().zip(&vl).map(|(a, b)| a - b).collect();
                let (lo, hi) = summarize(&mut d);
                Ok(RRRCell { x, rrr: (eh - el).exp(), lo: lo.exp(), hi: hi.exp() })
            })
            .collect()
    }

    /// Posterior probability that the overall RR exceeds `threshold`.
    pub fn exceedance(&self, xs: &[f64], zs: &[f64], x0: f64, threshold: f64) -> Result<Vec<ExceedanceCell>> {
        if !(threshold >= 0.0) {
            return Err(Error::Argument(format!("RR threshold must be non-negative, got {threshold}")));
        }
        let cut = threshold.ln();
        let mut out = Vec::new();
        for &z in zs {
            for &x in xs {
                let (_, vals, degenerate) = self.overall_values(x, x0, z)?;
                let probability = if degenerate && cut >= 0.0 {
                    0.0
                } else {
                    vals.iter().filter(|v| **v > cut).count() as f64 / vals.len() as f64
                };
                out.push(ExceedanceCell { x, z, probability, degenerate });
            }
        }
        Ok(out)
    }

    /// Backward attributable fraction per area over time indices `period`.
    pub fn attributable_fraction(
        &self,
        panel: &TimeSeriesPanel,
        x0: f64,
        period: std::ops::Range<usize>,
        counterfactual_z: Option<&[f64]>,
    ) -> Result<AFSummary> {
        let n_areas = panel.n_areas();
        let n_times = panel.n_times();
        if period.start >= period.end || period.end > n_times {
            return Err(Error::Argument(format!("period {period:?} is outside 0..{n_times}")));
        }
        if let Some(cf) = counterfactual_z {
            if cf.len() != n_areas {
                return Err(Error::Argument(format!("{} counterfactual modifier values for {n_areas} areas", cf.len())));
            }
        }
        let cb = &self.model.crossbasis;
        let reference = cb.row_for_lags(&vec![x0; cb.max_lag + 1])?;
        let reference = DVector::from_vec(reference);
        let z_obs = |j: usize| panel.modifier.get(j).copied().unwrap_or(0.0);
        let mut areas = Vec::with_capacity(n_areas);
        for (j, area) in self.model.design.areas.iter().enumerate() {
            let picks: Vec<usize> = area
                .rows
                .iter()
                .enumerate()
                .filter(|(_, &r)| (period.start..period.end).contains(&(r % n_times)))
                .map(|(i, _)| i)
                .collect();
            let mut d = DMatrix::zeros(picks.len(), cb.n_coef());
            let mut weights = DVector::zeros(picks.len());
            for (k, &i) in picks.iter().enumerate() {
                let r = area.rows[i];
                for q in 0..cb.n_coef() {
                    d[(k, q)] = cb.w[(r, q)] - reference[q];
                }
                weights[k] = self.mu_hat[j][i];
            }
            let eval = |z: f64| -> Result<(f64, f64, f64)> {
                if picks.is_empty() {
                    return Ok((f64::NAN, f64::NAN, f64::NAN));
                }
                let (hat, draws) = self.theta_at(z)?;
                let total = weights.sum();
                let af_of = |eta: &DVector<f64>| -> f64 {
                    eta.iter().zip(weights.iter()).map(|(e, w)| (1.0 - (-e).exp()) * w).sum::<f64>() / total
                };
                let point = af_of(&(&d * hat));
                let sims = &d * draws;
                let mut per_draw: Vec<f64> = sims.column_iter().map(|c| af_of(&c.into_owned())).collect();
                let (lo, hi) = summarize(&mut per_draw);
                Ok((point, lo, hi))
            };
            let (af, lo, hi) = eval(z_obs(j))?;
            let counterfactual = match counterfactual_z {
                Some(cf) => Some(eval(cf[j])?),
                None => None,
            };
            areas.push(AreaAF { area: panel.area_ids[j].clone(), af, lo, hi, counterfactual });
        }
        Ok(AFSummary { areas, short_period: period.len() < cb.max_lag + 1 })
    }
}
