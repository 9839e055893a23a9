//! Exposure-lag cross-basis and its interaction with an area-level modifier.
//!
//! Rows are laid out area-major: row `j * T + t` belongs to area `j` at time
//! `t` (both zero-based). Cross-basis coefficients are ordered exposure-major,
//! lag-minor (`i * v_l + k`); interaction coefficients add the modifier basis
//! index as the slowest-varying dimension (`r * v_x * v_l + i * v_l + k`).

use nalgebra::DMatrix;

use crate::basis::{eval_basis, BasisKind, BasisSpec};
use crate::error::{Error, Result};

/// Lagged exposure vectors `q_{t,j} = (x_{t,j}, x_{t-1,j}, ..., x_{t-L,j})`.
#[derive(Debug, Clone)]
pub struct ExposureHistory {
    pub values: DMatrix<f64>,
    pub max_lag: usize,
    pub valid_mask: Vec<bool>,
    pub n_times: usize,
    pub n_areas: usize,
}

impl ExposureHistory {
    pub fn row_index(&self, area: usize, time: usize) -> usize {
        area * self.n_times + time
    }

    pub fn n_valid(&self) -> usize {
        self.valid_mask.iter().filter(|v| **v).count()
    }

    pub fn lags(&self, row: usize) -> Vec<f64> {
        self.values.row(row).iter().copied().collect()
    }
}

/// Builds the lag matrix for per-area exposure series of a common length.
pub fn build_history(exposure: &[Vec<f64>], max_lag: usize) -> Result<ExposureHistory> {
    let n_areas = exposure.len();
    if n_areas == 0 {
        return Err(Error::Shape("no exposure series supplied".into()));
    }
    let n_times = exposure[0].len();
    if let Some((j, s)) = exposure.iter().enumerate().find(|(_, s)| s.len() != n_times) {
        return Err(Error::Shape(format!("area {j} has {} time points, expected {n_times}", s.len())));
    }
    if n_times < max_lag + 1 {
        return Err(Error::Shape(format!("series of length {n_times} too short for maximum lag {max_lag}")));
    }
    let rows = n_areas * n_times;
    let mut values = DMatrix::from_element(rows, max_lag + 1, f64::NAN);
    let mut valid_mask = vec![false; rows];
    for (j, series) in exposure.iter().enumerate() {
        for t in 0..n_times {
            let row = j * n_times + t;
            for l in 0..=max_lag.min(t) {
                values[(row, l)] = series[t - l];
            }
            valid_mask[row] = t >= max_lag;
        }
    }
    Ok(ExposureHistory { values, max_lag, valid_mask, n_times, n_areas })
}

/// The cross-basis matrix `W` with the bases that generated it.
#[derive(Debug, Clone)]
pub struct CrossBasis {
    pub w: DMatrix<f64>,
    pub exposure_spec: BasisSpec,
    pub lag_spec: BasisSpec,
    pub max_lag: usize,
    pub valid_mask: Vec<bool>,
    pub n_times: usize,
    pub n_areas: usize,
    /// Lag basis evaluated at `0..=L`, `(L + 1) x v_l`.
    pub lag_matrix: DMatrix<f64>,
}

impl CrossBasis {
    pub fn v_x(&self) -> usize {
        self.exposure_spec.num_basis
    }

    pub fn v_l(&self) -> usize {
        self.lag_spec.num_basis
    }

    pub fn n_coef(&self) -> usize {
        self.v_x() * self.v_l()
    }

    /// Cross-basis row for a single lag vector `(x_t, x_{t-1}, ..., x_{t-L})`.
    pub fn row_for_lags(&self, lags: &[f64]) -> Result<Vec<f64>> {
        if lags.len() != self.max_lag + 1 {
            return Err(Error::Shape(format!("expected {} lagged values, got {}", self.max_lag + 1, lags.len())));
        }
        let mut out = vec![0.0; self.n_coef()];
        let mut bx = vec![0.0; self.v_x()];
        let vl = self.v_l();
        for (l, &x) in lags.iter().enumerate() {
            self.exposure_spec.eval_into(x, &mut bx)?;
            for (i, b) in bx.iter().enumerate() {
                if *b == 0.0 {
                    continue;
                }
                for k in 0..vl {
                    out[i * vl + k] += b * self.lag_matrix[(l, k)];
                }
            }
        }
        Ok(out)
    }

    /// Lag-specific contrast `(b(x) - b(x0)) ⊗ b_lag(l)`.
    pub fn lag_contrast(&self, x: f64, x0: f64, lag: usize) -> Result<Vec<f64>> {
        if lag > self.max_lag {
            return Err(Error::Argument(format!("lag {lag} exceeds maximum lag {}", self.max_lag)));
        }
        let bx = self.exposure_spec.eval_point(x)?;
        let b0 = self.exposure_spec.eval_point(x0)?;
        let vl = self.v_l();
        let mut out = vec![0.0; self.n_coef()];
        for i in 0..self.v_x() {
            let d = bx[i] - b0[i];
            for k in 0..vl {
                out[i * vl + k] = d * self.lag_matrix[(lag, k)];
            }
        }
        Ok(out)
    }

    /// Contrast cumulated over all lags `0..=L`.
    pub fn overall_contrast(&self, x: f64, x0: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.n_coef()];
        for l in 0..=self.max_lag {
            for (o, c) in out.iter_mut().zip(self.lag_contrast(x, x0, l)?) {
                *o += c;
            }
        }
        Ok(out)
    }
}

/// Builds `W`; rows without complete lag history are left at zero.
pub fn build_crossbasis(history: &ExposureHistory, exposure_spec: &BasisSpec, lag_spec: &BasisSpec) -> Result<CrossBasis> {
    exposure_spec.validate()?;
    lag_spec.validate()?;
    let lag_points: Vec<f64> = (0..=history.max_lag).map(|l| l as f64).collect();
    let lag_matrix = eval_basis(lag_spec, &lag_points)?;
    let mut cb = CrossBasis {
        w: DMatrix::zeros(0, 0),
        exposure_spec: exposure_spec.clone(),
        lag_spec: lag_spec.clone(),
        max_lag: history.max_lag,
        valid_mask: history.valid_mask.clone(),
        n_times: history.n_times,
        n_areas: history.n_areas,
        lag_matrix,
    };
    let rows = history.values.nrows();
    let mut w = DMatrix::zeros(rows, cb.n_coef());
    let mut lags = vec![0.0; history.max_lag + 1];
    for row in 0..rows {
        if !history.valid_mask[row] {
            continue;
        }
        for (l, v) in lags.iter_mut().enumerate() {
            *v = history.values[(row, l)];
        }
        let r = cb.row_for_lags(&lags)?;
        for (c, v) in r.into_iter().enumerate() {
            w[(row, c)] = v;
        }
    }
    cb.w = w;
    Ok(cb)
}

/// Modifier interaction: per-area modifier basis rows `c(z_j)`.
///
/// The dense interaction matrix `V` is materialized on demand by
/// [`InteractionBasis::v_matrix`]; model assembly only needs `c(z_j)`.
#[derive(Debug, Clone)]
pub struct InteractionBasis {
    pub modifier_spec: BasisSpec,
    pub modifier_values: Vec<f64>,
    /// `J x v_z`, row `j` holds `c(z_j)`.
    pub area_coefficients: DMatrix<f64>,
}

impl InteractionBasis {
    pub fn v_z(&self) -> usize {
        self.modifier_spec.num_basis
    }

    /// Dense `V` with row `(t, j)` equal to `(w_tj c_1(z_j), ..., w_tj c_vz(z_j))`.
    pub fn v_matrix(&self, cb: &CrossBasis) -> DMatrix<f64> {
        let p = cb.n_coef();
        let vz = self.v_z();
        let mut v = DMatrix::zeros(cb.w.nrows(), p * vz);
        for j in 0..cb.n_areas {
            for t in 0..cb.n_times {
                let row = j * cb.n_times + t;
                for r in 0..vz {
                    let c = self.area_coefficients[(j, r)];
                    if c == 0.0 {
                        continue;
                    }
                    for q in 0..p {
                        v[(row, r * p + q)] = cb.w[(row, q)] * c;
                    }
                }
            }
        }
        v
    }
}

pub fn build_interaction(cb: &CrossBasis, modifier_spec: &BasisSpec, z: &[f64]) -> Result<InteractionBasis> {
    modifier_spec.validate()?;
    if z.len() != cb.n_areas {
        return Err(Error::Shape(format!("{} modifier values for {} areas", z.len(), cb.n_areas)));
    }
    if modifier_spec.kind == BasisKind::BSpline && modifier_spec.intercept {
        return Err(Error::Argument("a smooth modifier basis must exclude the intercept".into()));
    }
    if let Some(bad) = z.iter().find(|v| !v.is_finite()) {
        return Err(Error::Argument(format!("non-finite modifier value {bad}")));
    }
    let area_coefficients = eval_basis(modifier_spec, z)?;
    Ok(InteractionBasis { modifier_spec: modifier_spec.clone(), modifier_values: z.to_vec(), area_coefficients })
}
