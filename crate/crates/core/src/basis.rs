//! Univariate spline bases and difference penalties.
//!
//! Four basis families are supported:
//!
//! * B-splines of arbitrary degree on a knot sequence (boundary knots are
//!   replicated internally), optionally dropping the first column so that the
//!   basis no longer spans the constants;
//! * natural cubic splines (truncated-power construction), linear beyond the
//!   boundary knots and therefore valid for extrapolation;
//! * the identity map `x -> x` (a one-column "linear" basis);
//! * dummy coding of a categorical variable with categories `1..=F`, giving
//!   `F - 1` indicator columns for categories `2..=F`.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

/// Default ridge added to difference penalties so that they are full rank.
pub const DEFAULT_RIDGE: f64 = 1e-12;
/// Default prior precision for unpenalized coefficient blocks.
pub const DEFAULT_UNPENALIZED: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BasisKind {
    BSpline,
    NaturalCubic,
    LinearIdentity,
    Dummy,
}

/// A fully specified univariate basis.
///
/// For spline kinds `knots` holds the boundary knots and the interior knots in
/// strictly increasing order (first and last entries are the boundaries).
/// For `Dummy`, `num_basis` is `F - 1` and `knots` is empty.
#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    pub kind: BasisKind,
    pub degree: usize,
    pub num_basis: usize,
    pub knots: Vec<f64>,
    pub intercept: bool,
}

impl BasisSpec {
    /// B-spline basis on the given boundary+interior knots.
    pub fn bspline(knots: Vec<f64>, degree: usize, intercept: bool) -> Result<Self> {
        if knots.len() < 2 {
            return Err(Error::Argument("a B-spline basis needs two boundary knots".into()));
        }
        let full = knots.len() - 2 + degree + 1;
        let num_basis = if intercept { full } else { full.saturating_sub(1) };
        let spec = Self { kind: BasisKind::BSpline, degree, num_basis, knots, intercept };
        spec.validate()?;
        Ok(spec)
    }

    /// B-spline basis with `num_basis` columns and equally spaced knots on `[lo, hi]`.
    pub fn bspline_equispaced(lo: f64, hi: f64, num_basis: usize, degree: usize, intercept: bool) -> Result<Self> {
        if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
            return Err(Error::Argument(format!("invalid basis range [{lo}, {hi}]")));
        }
        let full = if intercept { num_basis } else { num_basis + 1 };
        if full < degree + 1 {
            return Err(Error::Argument(format!(
                "{num_basis} basis functions are too few for a degree-{degree} B-spline (intercept={intercept})"
            )));
        }
        let interior = full - degree - 1;
        let n_knots = interior + 2;
        let knots =
            (0..n_knots).map(|i| if i == n_knots - 1 { hi } else { lo + (hi - lo) * i as f64 / (n_knots - 1) as f64 }).collect();
        Self::bspline(knots, degree, intercept)
    }

    /// Natural cubic spline on boundary+interior knots.
    pub fn natural_cubic(knots: Vec<f64>, intercept: bool) -> Result<Self> {
        let num_basis = if intercept { knots.len() } else { knots.len().saturating_sub(1) };
        let spec = Self { kind: BasisKind::NaturalCubic, degree: 3, num_basis, knots, intercept };
        spec.validate()?;
        Ok(spec)
    }

    /// The one-column identity basis `c(z) = z`.
    pub fn linear() -> Self {
        Self { kind: BasisKind::LinearIdentity, degree: 1, num_basis: 1, knots: Vec::new(), intercept: false }
    }

    /// Dummy coding of categories `1..=categories` against category 1.
    pub fn dummy(categories: usize) -> Result<Self> {
        if categories < 2 {
            return Err(Error::Argument(format!("dummy coding needs at least 2 categories, got {categories}")));
        }
        Ok(Self { kind: BasisKind::Dummy, degree: 0, num_basis: categories - 1, knots: Vec::new(), intercept: false })
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            BasisKind::BSpline | BasisKind::NaturalCubic => {
                if self.knots.len() < 2 {
                    return Err(Error::Argument("spline basis needs at least two knots".into()));
                }
                if self.knots.iter().any(|k| !k.is_finite()) {
                    return Err(Error::Argument("knots must be finite".into()));
                }
                if self.knots.windows(2).any(|w| w[1] <= w[0]) {
                    return Err(Error::Argument(format!("knots must be strictly increasing: {:?}", self.knots)));
                }
                let expected = match self.kind {
                    BasisKind::BSpline => self.knots.len() - 2 + self.degree + 1 - usize::from(!self.intercept),
                    _ => self.knots.len() - usize::from(!self.intercept),
                };
                if expected != self.num_basis || self.num_basis == 0 {
                    return Err(Error::Argument(format!(
                        "num_basis {} inconsistent with {} knots (expected {expected})",
                        self.num_basis,
                        self.knots.len()
                    )));
                }
            }
            BasisKind::LinearIdentity => {
                if self.num_basis != 1 {
                    return Err(Error::Argument("the linear basis has exactly one column".into()));
                }
            }
            BasisKind::Dummy => {
                if self.num_basis == 0 {
                    return Err(Error::Argument("dummy basis needs at least 2 categories".into()));
                }
            }
        }
        Ok(())
    }

    /// Boundary knots for spline kinds.
    pub fn boundary(&self) -> Option<(f64, f64)> {
        match self.kind {
            BasisKind::BSpline | BasisKind::NaturalCubic => Some((self.knots[0], self.knots[self.knots.len() - 1])),
            _ => None,
        }
    }

    pub fn categories(&self) -> Option<usize> {
        (self.kind == BasisKind::Dummy).then_some(self.num_basis + 1)
    }

    /// Evaluates all basis functions at `x`, writing `num_basis` values into `out`.
    pub fn eval_into(&self, x: f64, out: &mut [f64]) -> Result<()> {
        debug_assert_eq!(out.len(), self.num_basis);
        match self.kind {
            BasisKind::BSpline => self.bspline_row(x, out),
            BasisKind::NaturalCubic => {
                if !x.is_finite() {
                    return Err(Error::Domain { value: x, lo: self.knots[0], hi: self.knots[self.knots.len() - 1] });
                }
                natural_row(&self.knots, self.intercept, x, out);
                Ok(())
            }
            BasisKind::LinearIdentity => {
                out[0] = x;
                Ok(())
            }
            BasisKind::Dummy => {
                let f = self.num_basis + 1;
                let cat = x.round();
                if (x - cat).abs() > 1e-9 || cat < 1.0 || cat > f as f64 {
                    return Err(Error::Category { value: x, categories: f });
                }
                out.iter_mut().for_each(|v| *v = 0.0);
                let c = cat as usize;
                if c >= 2 {
                    out[c - 2] = 1.0;
                }
                Ok(())
            }
        }
    }

    pub fn eval_point(&self, x: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.num_basis];
        self.eval_into(x, &mut out)?;
        Ok(out)
    }

    fn bspline_row(&self, x: f64, out: &mut [f64]) -> Result<()> {
        let lo = self.knots[0];
        let hi = self.knots[self.knots.len() - 1];
        if !(x >= lo && x <= hi) {
            return Err(Error::Domain { value: x, lo, hi });
        }
        let p = self.degree;
        let t = augmented_knots(&self.knots, p);
        let n = t.len() - p - 1;
        // knot span: t[span] <= x < t[span + 1], closed on the right boundary
        let span = if x >= hi {
            n - 1
        } else {
            let mut s = p;
            while s + 1 < n && t[s + 1] <= x {
                s += 1;
            }
            s
        };
        let mut vals = vec![0.0; p + 1];
        let mut left = vec![0.0; p + 1];
        let mut right = vec![0.0; p + 1];
        vals[0] = 1.0;
        for j in 1..=p {
            left[j] = x - t[span + 1 - j];
            right[j] = t[span + j] - x;
            let mut saved = 0.0;
            for r in 0..j {
                let denom = right[r + 1] + left[j - r];
                let temp = if denom == 0.0 { 0.0 } else { vals[r] / denom };
                vals[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            vals[j] = saved;
        }
        out.iter_mut().for_each(|v| *v = 0.0);
        let shift = usize::from(!self.intercept);
        for (r, v) in vals.iter().enumerate() {
            let col = span - p + r;
            if col >= shift {
                out[col - shift] = *v;
            }
        }
        Ok(())
    }
}

fn augmented_knots(knots: &[f64], degree: usize) -> Vec<f64> {
    let lo = knots[0];
    let hi = knots[knots.len() - 1];
    let mut t = Vec::with_capacity(knots.len() + 2 * degree);
    t.extend(std::iter::repeat_n(lo, degree));
    t.extend_from_slice(knots);
    t.extend(std::iter::repeat_n(hi, degree));
    t
}

// Truncated-power natural cubic spline: 1, x, d_k(x) - d_{K-1}(x).
fn natural_row(knots: &[f64], intercept: bool, x: f64, out: &mut [f64]) {
    let k = knots.len();
    let last = knots[k - 1];
    let cube = |v: f64| if v > 0.0 { v * v * v } else { 0.0 };
    let d = |i: usize| (cube(x - knots[i]) - cube(x - last)) / (last - knots[i]);
    let mut col = 0;
    if intercept {
        out[col] = 1.0;
        col += 1;
    }
    out[col] = x;
    col += 1;
    if k > 2 {
        let d_last = d(k - 2);
        for i in 0..k - 2 {
            out[col] = d(i) - d_last;
            col += 1;
        }
    }
}

/// Evaluates `spec` at every point; row `r` holds the basis at `points[r]`.
pub fn eval_basis(spec: &BasisSpec, points: &[f64]) -> Result<DMatrix<f64>> {
    spec.validate()?;
    let mut m = DMatrix::zeros(points.len(), spec.num_basis);
    let mut row = vec![0.0; spec.num_basis];
    for (r, &x) in points.iter().enumerate() {
        spec.eval_into(x, &mut row)?;
        for (c, v) in row.iter().enumerate() {
            m[(r, c)] = *v;
        }
    }
    Ok(m)
}

/// Order-`m` forward difference matrix of size `(v - m) x v`.
pub fn difference_matrix(v: usize, m: usize) -> Result<DMatrix<f64>> {
    if m == 0 || v <= m {
        return Err(Error::Argument(format!("difference order {m} requires more than {m} coefficients, got {v}")));
    }
    // Row i holds (-1)^(m-j) * C(m, j) at column i + j.
    let mut binom = vec![1.0f64; m + 1];
    for j in 1..=m {
        binom[j] = binom[j - 1] * (m + 1 - j) as f64 / j as f64;
    }
    let mut d = DMatrix::zeros(v - m, v);
    for i in 0..v - m {
        for j in 0..=m {
            let sign = if (m - j).is_multiple_of(2) { 1.0 } else { -1.0 };
            d[(i, i + j)] = sign * binom[j];
        }
    }
    Ok(d)
}

/// A full-rank symmetric penalty matrix together with the order and ridge that built it.
///
/// `matrix = rootᵀ root + ridge I`.
#[derive(Debug, Clone, PartialEq)]
pub struct PenaltyBlock {
    pub matrix: DMatrix<f64>,
    pub root: DMatrix<f64>,
    pub order: usize,
    pub ridge: f64,
}

impl PenaltyBlock {
    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    /// `‖root θ‖² + ridge ‖θ‖²`, evaluated from the factor so the ridge is not lost to rounding.
    pub fn quadratic_form(&self, theta: &[f64]) -> f64 {
        let t = nalgebra::DVector::from_column_slice(theta);
        (&self.root * &t).norm_squared() + self.ridge * t.norm_squared()
    }
}

pub(crate) fn quad_form(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += m[(i, j)] * x[j];
        }
        acc += x[i] * row;
    }
    acc
}

/// `D^T D + ridge I` for the order-`m` difference matrix on `v` coefficients.
pub fn penalty_block(v: usize, m: usize, ridge: f64) -> Result<PenaltyBlock> {
    if !(ridge > 0.0) {
        return Err(Error::Argument(format!("ridge must be positive, got {ridge}")));
    }
    let d = difference_matrix(v, m)?;
    let mut s = d.transpose() * &d;
    for i in 0..v {
        s[(i, i)] += ridge;
    }
    Ok(PenaltyBlock { matrix: s, root: d, order: m, ridge })
}

/// Lag-shrinkage penalty `diag(0, 1, 4, ..., (v_l - 1)^2) + ridge I`.
///
/// Penalizes coefficients of late lag basis functions more heavily, pulling
/// the lag-response curve towards zero at long lags.
pub fn lag_shrink_block(v_l: usize, ridge: f64) -> Result<PenaltyBlock> {
    if v_l == 0 {
        return Err(Error::Argument("lag basis dimension must be at least 1".into()));
    }
    if !(ridge > 0.0) {
        return Err(Error::Argument(format!("ridge must be positive, got {ridge}")));
    }
    let diag = nalgebra::DVector::from_iterator(v_l, (0..v_l).map(|k| (k * k) as f64 + ridge));
    let root = DMatrix::from_diagonal(&nalgebra::DVector::from_iterator(v_l, (0..v_l).map(|k| k as f64)));
    Ok(PenaltyBlock { matrix: DMatrix::from_diagonal(&diag), root, order: 0, ridge })
}
