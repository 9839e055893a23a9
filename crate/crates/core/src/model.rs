//! Model specification, design assembly and the joint prior precision.
//!
//! The design `H = [A : Z : W : V : M]` is never stored densely. Within an
//! area every column of `H` is a scalar multiple of one column of the
//! area's *base block* `B_j = [A_j : 1 : W_j]`:
//!
//! * `A` columns map to themselves,
//! * `Z` columns are `d_q(z_j)` times the ones column,
//! * `W` columns map to themselves,
//! * `V` columns are `c_r(z_j)` times the matching `W` column,
//! * `M` column `j` is the ones column (and zero in other areas).
//!
//! Products with `H` and the weighted cross-product `Hᵀ Λ H` are assembled
//! from per-area base-block products, which is what makes desk-scale fits cheap.

use nalgebra::{DMatrix, DVector};

use crate::basis::{lag_shrink_block, penalty_block, BasisKind, BasisSpec, DEFAULT_RIDGE, DEFAULT_UNPENALIZED};
use crate::crossbasis::{build_crossbasis, build_history, build_interaction, CrossBasis, InteractionBasis};
use crate::error::{Error, Result};
use crate::likelihood::Family;
use crate::linalg::{identity, kron, logdet_spd};
use crate::panel::{quantile, TimeSeriesPanel};
use crate::spatial::{precision, SpatialSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modifier {
    None,
    Linear,
    Smooth { v_z: usize },
    Categorical { categories: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MainEffect {
    Absent,
    Linear,
    Smooth { v_z2: usize },
    Dummy { categories: usize },
}

/// Spline family for the exposure, lag and smooth-modifier bases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplineKind {
    /// Equally spaced cubic B-splines.
    PSpline,
    /// Natural cubic splines: exposure knots at the 10% / 90% quantiles, lag
    /// knots equally spaced on `log(1 + lag)`.
    Natural,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub family: Family,
    pub modifier: Modifier,
    pub main_effect: MainEffect,
    pub spatial: SpatialSpec,
    pub v_x: usize,
    pub v_l: usize,
    pub max_lag: usize,
    pub lag_shrink: bool,
    pub diff_order: usize,
    pub ridge: f64,
    pub unpenalized: f64,
    /// `false` replaces every smoothing penalty by `unpenalized * I`.
    pub penalized: bool,
    pub spline: SplineKind,
    /// Exposure basis domain; defaults to the observed exposure range.
    pub exposure_range: Option<(f64, f64)>,
    /// Smooth modifier / main-effect basis domain; defaults to the observed range of `z`.
    pub modifier_range: Option<(f64, f64)>,
}

impl ModelSpec {
    /// Penalized DLNM with `v_x = v_l = 8`, maximum lag 8 and a Poisson likelihood.
    pub fn new(modifier: Modifier, main_effect: MainEffect, spatial: SpatialSpec) -> Self {
        Self {
            family: Family::Poisson,
            modifier,
            main_effect,
            spatial,
            v_x: 8,
            v_l: 8,
            max_lag: 8,
            lag_shrink: false,
            diff_order: 2,
            ridge: DEFAULT_RIDGE,
            unpenalized: DEFAULT_UNPENALIZED,
            penalized: true,
            spline: SplineKind::PSpline,
            exposure_range: None,
            modifier_range: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match (self.modifier, self.main_effect) {
            (Modifier::Smooth { .. }, MainEffect::Smooth { .. } | MainEffect::Linear) => {}
            (Modifier::Smooth { .. }, m) => {
                return Err(Error::Spec(format!("a smooth modifier needs a linear or smooth main effect, got {m:?}")))
            }
            (Modifier::Linear, MainEffect::Dummy { .. }) => {
                return Err(Error::Spec("a linear modifier cannot be paired with a dummy main effect".into()))
            }
            (Modifier::Categorical { categories }, MainEffect::Dummy { categories: f }) if categories == f => {}
            (Modifier::Categorical { categories }, m) => {
                return Err(Error::Spec(format!(
                    "a categorical modifier with {categories} categories needs a dummy main effect with matching categories, got {m:?}"
                )))
            }
            _ => {}
        }
        if let Modifier::Smooth { v_z } = self.modifier {
            if v_z < 2 {
                return Err(Error::Spec("a smooth modifier needs v_z >= 2".into()));
            }
        }
        if let Modifier::Categorical { categories } = self.modifier {
            if categories < 2 {
                return Err(Error::Spec("a categorical modifier needs at least 2 categories".into()));
            }
        }
        if let MainEffect::Smooth { v_z2 } = self.main_effect {
            if v_z2 <= self.diff_order {
                return Err(Error::Spec(format!("smooth main effect dimension {v_z2} must exceed the difference order")));
            }
        }
        if self.penalized && self.spline == SplineKind::PSpline && (self.v_x <= self.diff_order || self.v_l <= self.diff_order) {
            return Err(Error::Spec(format!(
                "basis dimensions ({}, {}) must exceed the difference order {}",
                self.v_x, self.v_l, self.diff_order
            )));
        }
        if !(self.ridge > 0.0 && self.unpenalized > 0.0) {
            return Err(Error::Spec("ridge and unpenalized precision must be positive".into()));
        }
        Ok(())
    }

    fn modifier_needed(&self) -> bool {
        self.modifier != Modifier::None || self.main_effect != MainEffect::Absent
    }
}

/// Offsets and lengths of `(β, γ, θ⁽¹⁾, θ⁽²⁾, u)` inside `ξ`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockLayout {
    pub beta: (usize, usize),
    pub gamma: (usize, usize),
    pub theta1: (usize, usize),
    pub theta2: (usize, usize),
    pub u: (usize, usize),
    pub n_xi: usize,
}

impl BlockLayout {
    pub fn new(n_beta: usize, n_gamma: usize, n_theta1: usize, n_theta2: usize, n_u: usize) -> Self {
        let beta = (0, n_beta);
        let gamma = (n_beta, n_gamma);
        let theta1 = (gamma.0 + n_gamma, n_theta1);
        let theta2 = (theta1.0 + n_theta1, n_theta2);
        let u = (theta2.0 + n_theta2, n_u);
        Self { beta, gamma, theta1, theta2, u, n_xi: u.0 + n_u }
    }

    pub fn range(block: (usize, usize)) -> std::ops::Range<usize> {
        block.0..block.0 + block.1
    }
}

/// Bases chosen for a model on a particular panel.
#[derive(Debug, Clone)]
pub struct ModelBases {
    pub exposure: BasisSpec,
    pub lag: BasisSpec,
    pub modifier: Option<BasisSpec>,
    pub main: Option<BasisSpec>,
}

fn data_range(values: impl Iterator<Item = f64>) -> Result<(f64, f64)> {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(Error::Argument("cannot derive a basis range from empty or non-finite data".into()));
    }
    if hi > lo {
        Ok((lo, hi))
    } else {
        Ok((lo - 0.5, hi + 0.5))
    }
}

fn natural_quantile_knots(values: &[f64], range: (f64, f64), probs: &[f64]) -> Vec<f64> {
    let mut knots = vec![range.0];
    for &p in probs {
        let q = quantile(values, p);
        if q > *knots.last().unwrap() && q < range.1 {
            knots.push(q);
        }
    }
    knots.push(range.1);
    knots
}

/// Chooses knots from the data and the spec.
pub fn build_bases(spec: &ModelSpec, panel: &TimeSeriesPanel) -> Result<ModelBases> {
    let (exposure, lag) = match spec.spline {
        SplineKind::PSpline => {
            let (lo, hi) = match spec.exposure_range {
                Some(r) => r,
                None => data_range(panel.exposure.iter().flatten().copied())?,
            };
            let exposure = BasisSpec::bspline_equispaced(lo, hi, spec.v_x, 3, false)?;
            let lag = if spec.max_lag == 0 {
                BasisSpec::bspline(vec![-0.5, 0.5], 0, true)?
            } else {
                BasisSpec::bspline_equispaced(0.0, spec.max_lag as f64, spec.v_l, 3, true)?
            };
            (exposure, lag)
        }
        SplineKind::Natural => {
            let all: Vec<f64> = panel.exposure.iter().flatten().copied().collect();
            let range = match spec.exposure_range {
                Some(r) => r,
                None => data_range(all.iter().copied())?,
            };
            let exposure = BasisSpec::natural_cubic(natural_quantile_knots(&all, range, &[0.1, 0.9]), false)?;
            let lag = if spec.max_lag == 0 {
                BasisSpec::bspline(vec![-0.5, 0.5], 0, true)?
            } else {
                let top = (1.0 + spec.max_lag as f64).ln();
                let mut knots = vec![0.0];
                for i in 1..=2 {
                    let k = (top * i as f64 / 3.0).exp() - 1.0;
                    if k > *knots.last().unwrap() && k < spec.max_lag as f64 {
                        knots.push(k);
                    }
                }
                knots.push(spec.max_lag as f64);
                BasisSpec::natural_cubic(knots, true)?
            };
            (exposure, lag)
        }
    };
    let z_range = if spec.modifier_needed() {
        if panel.modifier.len() != panel.n_areas() {
            return Err(Error::Consistency("the model uses a modifier but the panel carries none".into()));
        }
        Some(match spec.modifier_range {
            Some(r) => r,
            None => data_range(panel.modifier.iter().copied())?,
        })
    } else {
        None
    };
    let smooth_basis = |v: usize| -> Result<BasisSpec> {
        let (lo, hi) = z_range.unwrap();
        match spec.spline {
            SplineKind::PSpline => BasisSpec::bspline_equispaced(lo, hi, v, 3, false),
            SplineKind::Natural => {
                let probs: Vec<f64> = (1..v).map(|i| i as f64 / v as f64).collect();
                BasisSpec::natural_cubic(natural_quantile_knots(&panel.modifier, (lo, hi), &probs), false)
            }
        }
    };
    let modifier = match spec.modifier {
        Modifier::None => None,
        Modifier::Linear => Some(BasisSpec::linear()),
        Modifier::Smooth { v_z } => Some(smooth_basis(v_z)?),
        Modifier::Categorical { categories } => Some(BasisSpec::dummy(categories)?),
    };
    let main = match spec.main_effect {
        MainEffect::Absent => None,
        MainEffect::Linear => Some(BasisSpec::linear()),
        MainEffect::Smooth { v_z2 } => Some(match spec.spline {
            SplineKind::PSpline => {
                let (lo, hi) = z_range.unwrap();
                BasisSpec::bspline_equispaced(lo, hi, v_z2, 3, false)?
            }
            SplineKind::Natural => smooth_basis(v_z2)?,
        }),
        MainEffect::Dummy { categories } => Some(BasisSpec::dummy(categories)?),
    };
    Ok(ModelBases { exposure, lag, modifier, main })
}

/// Base block and area-level multipliers for one area.
#[derive(Debug, Clone)]
pub struct AreaDesign {
    pub area: usize,
    /// `[A_j : 1 : W_j]` restricted to rows with complete lag history.
    pub base: DMatrix<f64>,
    pub offset: DVector<f64>,
    pub y: DVector<f64>,
    /// Panel row index of each base row.
    pub rows: Vec<usize>,
    /// `d(z_j)`, the main-effect basis at this area's modifier.
    pub main: Vec<f64>,
    /// `c(z_j)`, the interaction basis at this area's modifier.
    pub modifier: Vec<f64>,
    /// `(ξ index, base column, multiplier)` for every column of `H` active in this area.
    pub columns: Vec<(usize, usize, f64)>,
}

/// Design matrix `H` in area-factored form.
#[derive(Debug, Clone)]
pub struct Design {
    pub layout: BlockLayout,
    pub areas: Vec<AreaDesign>,
    pub n_a: usize,
    pub n_rows: usize,
    pub covariate_names: Vec<String>,
}

impl Design {
    /// Wraps a dense design as a single block; every column is treated as `β`.
    pub fn from_dense(h: DMatrix<f64>, offset: DVector<f64>, y: DVector<f64>) -> Self {
        let (n, p) = h.shape();
        let columns = (0..p).map(|i| (i, i, 1.0)).collect();
        Self {
            layout: BlockLayout::new(p, 0, 0, 0, 0),
            areas: vec![AreaDesign {
                area: 0,
                base: h,
                offset,
                y,
                rows: (0..n).collect(),
                main: vec![],
                modifier: vec![],
                columns,
            }],
            n_a: p,
            n_rows: n,
            covariate_names: vec![],
        }
    }

    pub fn n_xi(&self) -> usize {
        self.layout.n_xi
    }

    fn area_coef(&self, area: &AreaDesign, xi: &DVector<f64>) -> DVector<f64> {
        let mut e = DVector::zeros(area.base.ncols());
        for &(x, b, c) in &area.columns {
            e[b] += c * xi[x];
        }
        e
    }

    /// Linear predictor `H ξ + offset` per area.
    pub fn eta(&self, xi: &DVector<f64>) -> Vec<DVector<f64>> {
        self.areas.iter().map(|a| &a.base * self.area_coef(a, xi) + &a.offset).collect()
    }

    /// `H v` without the offset.
    pub fn mul(&self, v: &DVector<f64>) -> Vec<DVector<f64>> {
        self.areas.iter().map(|a| &a.base * self.area_coef(a, v)).collect()
    }

    /// Diagonal of `H Σ Hᵀ` per area.
    pub fn leverages(&self, sigma: &DMatrix<f64>) -> Vec<DVector<f64>> {
        self.areas
            .iter()
            .map(|a| {
                let nb = a.base.ncols();
                let mut m = DMatrix::zeros(nb, nb);
                for &(xa, ba, ca) in &a.columns {
                    for &(xb, bb, cb) in &a.columns {
                        m[(ba, bb)] += ca * cb * sigma[(xa, xb)];
                    }
                }
                let bm = &a.base * m;
                DVector::from_fn(a.base.nrows(), |i, _| bm.row(i).dot(&a.base.row(i)))
            })
            .collect()
    }

    /// `Hᵀ r` for per-area vectors `r`.
    pub fn transpose_mul(&self, r: &[DVector<f64>]) -> DVector<f64> {
        let mut g = DVector::zeros(self.n_xi());
        for (a, ra) in self.areas.iter().zip(r) {
            let s = a.base.tr_mul(ra);
            for &(x, b, c) in &a.columns {
                g[x] += c * s[b];
            }
        }
        g
    }

    /// `Hᵀ diag(w) H` for per-area weights `w`.
    pub fn weighted_crossprod(&self, w: &[DVector<f64>]) -> DMatrix<f64> {
        let n = self.n_xi();
        let mut out = DMatrix::zeros(n, n);
        for (a, wa) in self.areas.iter().zip(w) {
            let mut scaled = a.base.clone();
            for (mut row, &wi) in scaled.row_iter_mut().zip(wa.iter()) {
                row *= wi;
            }
            let k = a.base.transpose() * scaled;
            let cols = &a.columns;
            for (ia, &(xa, ba, ca)) in cols.iter().enumerate() {
                for &(xb, bb, cb) in &cols[ia..] {
                    let v = ca * cb * k[(ba, bb)];
                    out[(xa, xb)] += v;
                    if xa != xb {
                        out[(xb, xa)] += v;
                    }
                }
            }
        }
        out
    }

    /// Responses over the design rows, concatenated area by area.
    pub fn y(&self) -> DVector<f64> {
        DVector::from_iterator(self.n_rows, self.areas.iter().flat_map(|a| a.y.iter().copied()))
    }

    /// Dense `H` and offset over the design rows (area by area, valid rows only).
    pub fn to_dense(&self) -> (DMatrix<f64>, DVector<f64>) {
        let mut h = DMatrix::zeros(self.n_rows, self.n_xi());
        let mut off = DVector::zeros(self.n_rows);
        let mut r0 = 0;
        for a in &self.areas {
            for i in 0..a.base.nrows() {
                for &(x, b, c) in &a.columns {
                    h[(r0 + i, x)] += c * a.base[(i, b)];
                }
                off[r0 + i] = a.offset[i];
            }
            r0 += a.base.nrows();
        }
        (h, off)
    }

    pub fn split_rows(&self, v: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(self.areas.len());
        let mut r0 = 0;
        for a in &self.areas {
            let n = a.base.nrows();
            out.push(v.rows(r0, n).into_owned());
            r0 += n;
        }
        out
    }
}

/// Assembles the area-factored design from a panel and its bases.
pub fn assemble_design(
    panel: &TimeSeriesPanel,
    cb: &CrossBasis,
    ib: Option<&InteractionBasis>,
    main: Option<&BasisSpec>,
    spatial: &SpatialSpec,
) -> Result<Design> {
    panel.validate()?;
    let (n_areas, n_times) = (panel.n_areas(), panel.n_times());
    if cb.n_areas != n_areas || cb.n_times != n_times {
        return Err(Error::Consistency(format!(
            "cross-basis covers {} areas x {} times, panel has {n_areas} x {n_times}",
            cb.n_areas, cb.n_times
        )));
    }
    spatial.validate(n_areas)?;
    let n_a = 1 + panel.covariates.len();
    let n_gamma = main.map_or(0, |m| m.num_basis);
    let p = cb.n_coef();
    let v_z = ib.map_or(0, |b| b.v_z());
    let layout = BlockLayout::new(n_a, n_gamma, p, p * v_z, n_areas);
    let main_rows = match main {
        Some(spec) => {
            if panel.modifier.len() != n_areas {
                return Err(Error::Consistency("main effect requested but the panel has no modifier".into()));
            }
            Some(crate::basis::eval_basis(spec, &panel.modifier)?)
        }
        None => None,
    };
    let n_base = n_a + 1 + p;
    let ones_col = n_a;
    let mut areas = Vec::with_capacity(n_areas);
    let mut n_rows = 0;
    for j in 0..n_areas {
        let rows: Vec<usize> = (0..n_times).map(|t| j * n_times + t).filter(|&r| cb.valid_mask[r]).collect();
        let mut base = DMatrix::zeros(rows.len(), n_base);
        for (i, &r) in rows.iter().enumerate() {
            base[(i, 0)] = 1.0;
            for (c, cov) in panel.covariates.iter().enumerate() {
                base[(i, 1 + c)] = cov.values[r];
            }
            base[(i, ones_col)] = 1.0;
            for q in 0..p {
                base[(i, n_a + 1 + q)] = cb.w[(r, q)];
            }
        }
        let offset = DVector::from_iterator(rows.len(), rows.iter().map(|&r| panel.log_offset[r]));
        let y = DVector::from_iterator(rows.len(), rows.iter().map(|&r| panel.counts[r]));
        let main_j: Vec<f64> = main_rows.as_ref().map_or(Vec::new(), |m| m.row(j).iter().copied().collect());
        let mod_j: Vec<f64> = ib.map_or(Vec::new(), |b| b.area_coefficients.row(j).iter().copied().collect());

        let mut columns = Vec::new();
        for i in 0..n_a {
            columns.push((layout.beta.0 + i, i, 1.0));
        }
        for (q, &d) in main_j.iter().enumerate() {
            if d != 0.0 {
                columns.push((layout.gamma.0 + q, ones_col, d));
            }
        }
        for q in 0..p {
            columns.push((layout.theta1.0 + q, n_a + 1 + q, 1.0));
        }
        for (r, &c) in mod_j.iter().enumerate() {
            if c != 0.0 {
                for q in 0..p {
                    columns.push((layout.theta2.0 + r * p + q, n_a + 1 + q, c));
                }
            }
        }
        columns.push((layout.u.0 + j, ones_col, 1.0));
        n_rows += rows.len();
        areas.push(AreaDesign { area: j, base, offset, y, rows, main: main_j, modifier: mod_j, columns });
    }
    Ok(Design { layout, areas, n_a, n_rows, covariate_names: panel.covariates.iter().map(|c| c.name.clone()).collect() })
}

/// One `λ`-scaled template inside a penalized block.
#[derive(Debug, Clone)]
pub struct PenaltyTerm {
    pub lambda: usize,
    pub matrix: DMatrix<f64>,
}

/// A diagonal block of `P(λ̄)`: either `Σ λ_k S_k` or a fixed `ζ I`.
#[derive(Debug, Clone)]
pub struct PenaltyBlockTemplate {
    pub name: &'static str,
    pub offset: usize,
    pub dim: usize,
    pub terms: Vec<PenaltyTerm>,
    pub fixed: Option<f64>,
}

impl PenaltyBlockTemplate {
    pub fn assemble(&self, lambdas: &[f64]) -> DMatrix<f64> {
        match self.fixed {
            Some(z) => identity(self.dim) * z,
            None => {
                let mut m = DMatrix::zeros(self.dim, self.dim);
                for t in &self.terms {
                    m += &t.matrix * lambdas[t.lambda];
                }
                m
            }
        }
    }
}

/// Block templates for `P(λ̄)` over `(γ, θ⁽¹⁾, θ⁽²⁾)`.
#[derive(Debug, Clone)]
pub struct PenaltyAssembly {
    pub lambda_names: Vec<String>,
    pub blocks: Vec<PenaltyBlockTemplate>,
}

impl PenaltyAssembly {
    pub fn n_lambda(&self) -> usize {
        self.lambda_names.len()
    }

    /// Dense `P(λ̄)` over the contiguous `(γ, θ⁽¹⁾, θ⁽²⁾)` range, in local coordinates.
    pub fn assemble(&self, lambdas: &[f64]) -> DMatrix<f64> {
        let start = self.blocks.iter().map(|b| b.offset).min().unwrap_or(0);
        let end = self.blocks.iter().map(|b| b.offset + b.dim).max().unwrap_or(0);
        let mut p = DMatrix::zeros(end - start, end - start);
        for b in &self.blocks {
            p.view_mut((b.offset - start, b.offset - start), (b.dim, b.dim)).copy_from(&b.assemble(lambdas));
        }
        p
    }
}

/// Builds the penalty templates for the spec's modifier case.
pub fn assemble_penalty(spec: &ModelSpec, layout: &BlockLayout) -> Result<PenaltyAssembly> {
    spec.validate()?;
    let zeta = spec.unpenalized;
    let mut blocks = Vec::new();
    let (v_x, v_l) = (spec.v_x, spec.v_l);
    if !spec.penalized {
        for (name, blk) in [("gamma", layout.gamma), ("theta1", layout.theta1), ("theta2", layout.theta2)] {
            if blk.1 > 0 {
                blocks.push(PenaltyBlockTemplate { name, offset: blk.0, dim: blk.1, terms: vec![], fixed: Some(zeta) });
            }
        }
        return Ok(PenaltyAssembly { lambda_names: vec![], blocks });
    }
    if layout.theta1.1 != v_x * v_l {
        return Err(Error::Consistency(format!(
            "cross-basis block has {} coefficients, spec implies {}",
            layout.theta1.1,
            v_x * v_l
        )));
    }
    let m = spec.diff_order;
    let s_x = penalty_block(v_x, m, spec.ridge)?.matrix;
    let mut s_l = penalty_block(v_l, m, spec.ridge)?.matrix;
    if spec.lag_shrink {
        let shrink = lag_shrink_block(v_l, spec.ridge)?;
        // both blocks already carry δI; keep a single ridge
        s_l += &shrink.matrix - identity(v_l) * spec.ridge;
    }
    let (i_x, i_l) = (identity(v_x), identity(v_l));
    let x_term = kron(&s_x, &i_l);
    let l_term = kron(&i_x, &s_l);

    let mut names: Vec<&str> = vec!["lambda_x1"];
    let idx = |names: &mut Vec<&str>, n: &'static str| -> usize {
        match names.iter().position(|x| *x == n) {
            Some(i) => i,
            None => {
                names.push(n);
                names.len() - 1
            }
        }
    };
    // order: x1, x2, l1, l2, z, z2
    let has_theta2 = spec.modifier != Modifier::None;
    if has_theta2 {
        idx(&mut names, "lambda_x2");
    }
    idx(&mut names, "lambda_l1");
    if has_theta2 {
        idx(&mut names, "lambda_l2");
    }
    if matches!(spec.modifier, Modifier::Smooth { .. }) {
        idx(&mut names, "lambda_z");
    }
    if matches!(spec.main_effect, MainEffect::Smooth { .. }) {
        idx(&mut names, "lambda_z2");
    }
    let pos = |n: &str| names.iter().position(|x| *x == n).unwrap();

    if layout.gamma.1 > 0 {
        let block = match spec.main_effect {
            MainEffect::Smooth { v_z2 } => PenaltyBlockTemplate {
                name: "gamma",
                offset: layout.gamma.0,
                dim: layout.gamma.1,
                terms: vec![PenaltyTerm { lambda: pos("lambda_z2"), matrix: penalty_block(v_z2, m, spec.ridge)?.matrix }],
                fixed: None,
            },
            _ => PenaltyBlockTemplate {
                name: "gamma",
                offset: layout.gamma.0,
                dim: layout.gamma.1,
                terms: vec![],
                fixed: Some(zeta),
            },
        };
        blocks.push(block);
    }
    blocks.push(PenaltyBlockTemplate {
        name: "theta1",
        offset: layout.theta1.0,
        dim: layout.theta1.1,
        terms: vec![
            PenaltyTerm { lambda: pos("lambda_x1"), matrix: x_term.clone() },
            PenaltyTerm { lambda: pos("lambda_l1"), matrix: l_term.clone() },
        ],
        fixed: None,
    });
    if has_theta2 {
        let v_z = layout.theta2.1 / (v_x * v_l);
        let i_z = identity(v_z);
        let mut terms = vec![
            PenaltyTerm { lambda: pos("lambda_x2"), matrix: kron(&i_z, &x_term) },
            PenaltyTerm { lambda: pos("lambda_l2"), matrix: kron(&i_z, &l_term) },
        ];
        if let Modifier::Smooth { .. } = spec.modifier {
            let s_z = penalty_block(v_z, m, spec.ridge)?.matrix;
            terms.push(PenaltyTerm { lambda: pos("lambda_z"), matrix: kron(&s_z, &identity(v_x * v_l)) });
        }
        blocks.push(PenaltyBlockTemplate { name: "theta2", offset: layout.theta2.0, dim: layout.theta2.1, terms, fixed: None });
    }
    Ok(PenaltyAssembly { lambda_names: names.into_iter().map(String::from).collect(), blocks })
}

/// Joint prior precision `Q = blkdiag(ζ I, P(λ̄), G)` with its log-determinant.
#[derive(Debug, Clone)]
pub struct PriorPrecision {
    pub q: DMatrix<f64>,
    pub logdet: f64,
}

pub fn assemble_q(
    pa: &PenaltyAssembly,
    lambdas: &[f64],
    random: Option<(&SpatialSpec, f64, Option<f64>)>,
    layout: &BlockLayout,
    zeta: f64,
) -> Result<PriorPrecision> {
    if lambdas.len() != pa.n_lambda() {
        return Err(Error::Argument(format!("{} smoothing parameters for {} penalty terms", lambdas.len(), pa.n_lambda())));
    }
    if let Some(bad) = lambdas.iter().find(|l| !(**l > 0.0 && l.is_finite())) {
        return Err(Error::Argument(format!("smoothing parameters must be positive, got {bad}")));
    }
    let n = layout.n_xi;
    let mut q = DMatrix::zeros(n, n);
    let mut logdet = 0.0;
    for i in BlockLayout::range(layout.beta) {
        q[(i, i)] = zeta;
    }
    logdet += layout.beta.1 as f64 * zeta.ln();
    for b in &pa.blocks {
        let m = b.assemble(lambdas);
        logdet += match b.fixed {
            Some(z) => b.dim as f64 * z.ln(),
            None => logdet_spd(m.clone(), &format!("penalty block {}", b.name))?,
        };
        q.view_mut((b.offset, b.offset), (b.dim, b.dim)).copy_from(&m);
    }
    match random {
        Some((spatial, tau, rho)) => {
            let g = precision(spatial, layout.u.1, tau, rho)?;
            logdet += logdet_spd(g.clone(), "random-effect precision")?;
            q.view_mut((layout.u.0, layout.u.0), (layout.u.1, layout.u.1)).copy_from(&g);
        }
        None if layout.u.1 > 0 => return Err(Error::Argument("random effects present but no precision given".into())),
        None => {}
    }
    Ok(PriorPrecision { q, logdet })
}

/// Everything needed to fit and post-process one model on one panel.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub bases: ModelBases,
    pub crossbasis: CrossBasis,
    pub interaction: Option<InteractionBasis>,
    pub design: Design,
    pub penalty: PenaltyAssembly,
}

impl Model {
    pub fn build(spec: &ModelSpec, panel: &TimeSeriesPanel) -> Result<Self> {
        spec.validate()?;
        panel.validate()?;
        let bases = build_bases(spec, panel)?;
        let history = build_history(&panel.exposure, spec.max_lag)?;
        let crossbasis = build_crossbasis(&history, &bases.exposure, &bases.lag)?;
        let interaction = match &bases.modifier {
            Some(m) => Some(build_interaction(&crossbasis, m, &panel.modifier)?),
            None => None,
        };
        let design = assemble_design(panel, &crossbasis, interaction.as_ref(), bases.main.as_ref(), &spec.spatial)?;
        let mut spec_eff = spec.clone();
        spec_eff.v_x = crossbasis.v_x();
        spec_eff.v_l = crossbasis.v_l();
        let penalty = assemble_penalty(&spec_eff, &design.layout)?;
        Ok(Self { spec: spec_eff, bases, crossbasis, interaction, design, penalty })
    }

    pub fn layout(&self) -> &BlockLayout {
        &self.design.layout
    }

    pub fn prior_precision(&self, lambdas: &[f64], tau: f64, rho: Option<f64>) -> Result<PriorPrecision> {
        assemble_q(&self.penalty, lambdas, Some((&self.spec.spatial, tau, rho)), &self.design.layout, self.spec.unpenalized)
    }

    /// Modifier basis row `c(z)`; empty without an interaction.
    pub fn modifier_row(&self, z: f64) -> Result<Vec<f64>> {
        match &self.bases.modifier {
            Some(m) => m.eval_point(z),
            None => Ok(Vec::new()),
        }
    }

    pub fn uses_exposure_kind(&self) -> BasisKind {
        self.bases.exposure.kind
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::basis::quad_form;
    use crate::spatial::AdjacencyGraph;

    fn toy_panel(n_areas: usize, n_times: usize) -> TimeSeriesPanel {
        let exposure: Vec<Vec<f64>> =
            (0..n_areas).map(|j| (0..n_times).map(|t| 5.0 + 4.0 * ((t as f64 * 0.37 + j as f64).sin())).collect()).collect();
        let n = n_areas * n_times;
        TimeSeriesPanel {
            area_ids: (0..n_areas).map(|j| format!("a{j}")).collect(),
            times: (0..n_times as i64).collect(),
            counts: (0..n).map(|i| (i % 5) as f64).collect(),
            exposure,
            log_offset: vec![0.0; n],
            modifier: (0..n_areas).map(|j| -0.5 + j as f64 / n_areas as f64).collect(),
            covariates: vec![],
        }
    }

    #[test]
    fn rejects_inconsistent_specs() {
        let s = ModelSpec::new(Modifier::Smooth { v_z: 5 }, MainEffect::Dummy { categories: 2 }, SpatialSpec::iid());
        assert!(matches!(s.validate(), Err(Error::Spec(_))));
        let s = ModelSpec::new(Modifier::Categorical { categories: 3 }, MainEffect::Dummy { categories: 2 }, SpatialSpec::iid());
        assert!(s.validate().is_err());
        let s = ModelSpec::new(Modifier::Categorical { categories: 3 }, MainEffect::Dummy { categories: 3 }, SpatialSpec::iid());
        assert!(s.validate().is_ok());
    }

    #[test]
    fn layout_dimension_arithmetic() {
        let panel = toy_panel(2, 10);
        let mut spec = ModelSpec::new(Modifier::Linear, MainEffect::Linear, SpatialSpec::iid());
        spec.max_lag = 0;
        spec.v_x = 1;
        spec.v_l = 1;
        spec.penalized = false;
        // v_x = 1 needs a degree-0 exposure basis; build by hand
        let history = build_history(&panel.exposure, 0).unwrap();
        let ex = BasisSpec::bspline(vec![0.0, 10.0], 0, true).unwrap();
        let lg = BasisSpec::bspline(vec![-0.5, 0.5], 0, true).unwrap();
        let cb = build_crossbasis(&history, &ex, &lg).unwrap();
        let ib = build_interaction(&cb, &BasisSpec::linear(), &panel.modifier).unwrap();
        let d = assemble_design(&panel, &cb, Some(&ib), Some(&BasisSpec::linear()), &spec.spatial).unwrap();
        assert_eq!(d.n_xi(), 1 + 1 + 1 + 1 + 2);
        assert_eq!(d.to_dense().0.ncols(), 6);

        let none = ModelSpec::new(Modifier::None, MainEffect::Absent, SpatialSpec::iid());
        let m = Model::build(&none, &toy_panel(3, 30)).unwrap();
        assert_eq!(m.layout().theta2.1, 0);
        assert_eq!(m.layout().gamma.1, 0);
        assert_eq!(m.layout().n_xi, 1 + 64 + 3);
    }

    #[test]
    fn dense_design_matches_block_definition() {
        let panel = toy_panel(3, 25);
        let spec = ModelSpec {
            v_x: 4,
            v_l: 4,
            max_lag: 3,
            ..ModelSpec::new(Modifier::Smooth { v_z: 3 }, MainEffect::Smooth { v_z2: 4 }, SpatialSpec::iid())
        };
        let m = Model::build(&spec, &panel).unwrap();
        let (h, _) = m.design.to_dense();
        let lay = m.layout();
        let v = m.interaction.as_ref().unwrap().v_matrix(&m.crossbasis);
        let mut r = 0;
        for j in 0..3 {
            for t in 3..25 {
                let row = j * 25 + t;
                assert_eq!(h[(r, 0)], 1.0);
                for q in 0..16 {
                    assert_eq!(h[(r, lay.theta1.0 + q)], m.crossbasis.w[(row, q)]);
                }
                for q in 0..48 {
                    assert!((h[(r, lay.theta2.0 + q)] - v[(row, q)]).abs() < 1e-15);
                }
                for k in 0..3 {
                    assert_eq!(h[(r, lay.u.0 + k)], if k == j { 1.0 } else { 0.0 });
                }
                r += 1;
            }
        }
        // products agree with the dense definition
        let xi = DVector::from_iterator(lay.n_xi, (0..lay.n_xi).map(|i| ((i * 13) % 7) as f64 * 0.1 - 0.3));
        let eta: Vec<f64> = m.design.eta(&xi).into_iter().flat_map(|e| e.iter().copied().collect::<Vec<_>>()).collect();
        let dense = &h * &xi;
        for (a, b) in eta.iter().zip(dense.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
        let w: Vec<DVector<f64>> =
            m.design.areas.iter().map(|a| DVector::from_fn(a.base.nrows(), |i, _| 0.5 + i as f64 * 0.01)).collect();
        let wd = DVector::from_iterator(h.nrows(), w.iter().flat_map(|x| x.iter().copied().collect::<Vec<_>>()));
        let mut hw = h.clone();
        for (mut row, wi) in hw.row_iter_mut().zip(wd.iter()) {
            row *= *wi;
        }
        let dense_k = h.transpose() * hw;
        assert!((m.design.weighted_crossprod(&w) - dense_k).amax() < 1e-9);
        let g = m.design.transpose_mul(&w);
        assert!((g - h.transpose() * wd).amax() < 1e-10);
    }

    #[test]
    fn simulation_scale_dimensions() {
        let panel = toy_panel(73, 1220);
        let mut spec = ModelSpec::new(Modifier::Linear, MainEffect::Linear, SpatialSpec::leroux(AdjacencyGraph::lattice(73)));
        spec.lag_shrink = true;
        let m = Model::build(&spec, &panel).unwrap();
        assert_eq!(m.design.n_rows, 73 * 1212);
        assert_eq!(m.layout().n_xi, 203);
    }

    fn lay(v_x: usize, v_l: usize, v_z: usize, gamma: usize) -> BlockLayout {
        BlockLayout::new(1, gamma, v_x * v_l, v_x * v_l * v_z, 2)
    }

    #[test]
    fn penalty_kronecker_examples() {
        let mut spec = ModelSpec::new(Modifier::Linear, MainEffect::Linear, SpatialSpec::iid());
        spec.v_x = 3;
        spec.v_l = 2;
        spec.diff_order = 1;
        let l = lay(3, 2, 1, 1);
        let pa = assemble_penalty(&spec, &l).unwrap();
        assert_eq!(pa.lambda_names, vec!["lambda_x1", "lambda_x2", "lambda_l1", "lambda_l2"]);
        let theta2 = pa.blocks.iter().find(|b| b.name == "theta2").unwrap();
        let s_x = penalty_block(3, 1, spec.ridge).unwrap().matrix;
        let expect = kron(&s_x, &identity(2));
        assert_eq!(theta2.assemble(&[0.0, 1.0, 0.0, 0.0]), expect);

        let mut smooth = ModelSpec::new(Modifier::Smooth { v_z: 3 }, MainEffect::Linear, SpatialSpec::iid());
        smooth.v_x = 3;
        smooth.v_l = 3;
        let l = lay(3, 3, 3, 1);
        let pa = assemble_penalty(&smooth, &l).unwrap();
        assert_eq!(pa.lambda_names, vec!["lambda_x1", "lambda_x2", "lambda_l1", "lambda_l2", "lambda_z"]);
        let theta2 = pa.blocks.iter().find(|b| b.name == "theta2").unwrap();
        let s_z = penalty_block(3, 2, smooth.ridge).unwrap().matrix;
        assert_eq!(theta2.assemble(&[0.0, 0.0, 0.0, 0.0, 1.0]), kron(&s_z, &identity(9)));
    }

    // Explicit difference loops over a (v_z, v_x, v_l) coefficient cube.
    fn brute_force_penalty(theta: &[f64], v_x: usize, v_l: usize, v_z: usize, lam: [f64; 3], ridge: f64) -> f64 {
        let at = |r: usize, i: usize, k: usize| theta[r * v_x * v_l + i * v_l + k];
        let mut total = 0.0;
        for r in 0..v_z {
            for k in 0..v_l {
                for i in 0..v_x - 2 {
                    let d = at(r, i, k) - 2.0 * at(r, i + 1, k) + at(r, i + 2, k);
                    total += lam[0] * d * d;
                }
            }
            for i in 0..v_x {
                for k in 0..v_l - 2 {
                    let d = at(r, i, k) - 2.0 * at(r, i, k + 1) + at(r, i, k + 2);
                    total += lam[1] * d * d;
                }
            }
        }
        if v_z > 2 {
            for i in 0..v_x {
                for k in 0..v_l {
                    for r in 0..v_z - 2 {
                        let d = at(r, i, k) - 2.0 * at(r + 1, i, k) + at(r + 2, i, k);
                        total += lam[2] * d * d;
                    }
                }
            }
        }
        let n2: f64 = theta.iter().map(|t| t * t).sum();
        let n_lam = if v_z > 2 { lam[0] + lam[1] + lam[2] } else { lam[0] + lam[1] };
        total + ridge * n_lam * n2
    }

    #[test]
    fn penalty_matches_difference_loops() {
        let mut spec = ModelSpec::new(Modifier::Linear, MainEffect::Linear, SpatialSpec::iid());
        spec.v_x = 3;
        spec.v_l = 3;
        let l = lay(3, 3, 1, 1);
        let pa = assemble_penalty(&spec, &l).unwrap();
        let p = pa.assemble(&[1.0; 4]);
        let theta: Vec<f64> = (0..19).map(|i| ((i * 37) % 11) as f64 / 3.0 - 1.5).collect();
        let q = quad_form(&p, &theta);
        let gamma_part = spec.unpenalized * theta[0] * theta[0];
        let t1 = brute_force_penalty(&theta[1..10], 3, 3, 1, [1.0, 1.0, 0.0], spec.ridge);
        let t2 = brute_force_penalty(&theta[10..19], 3, 3, 1, [1.0, 1.0, 0.0], spec.ridge);
        assert!((q - (gamma_part + t1 + t2)).abs() < 1e-10);

        let mut smooth = ModelSpec::new(Modifier::Smooth { v_z: 4 }, MainEffect::Linear, SpatialSpec::iid());
        smooth.v_x = 3;
        smooth.v_l = 4;
        let l = lay(3, 4, 4, 1);
        let pa = assemble_penalty(&smooth, &l).unwrap();
        let lam = [0.7, 2.0, 1.3, 0.4, 3.1];
        let p = pa.assemble(&lam);
        let theta: Vec<f64> = (0..61).map(|i| ((i * 53) % 17) as f64 / 5.0 - 1.7).collect();
        let q = quad_form(&p, &theta);
        let t1 = brute_force_penalty(&theta[1..13], 3, 4, 1, [lam[0], lam[2], 0.0], smooth.ridge);
        let t2 = brute_force_penalty(&theta[13..61], 3, 4, 4, [lam[1], lam[3], lam[4]], smooth.ridge);
        assert!((q - (smooth.unpenalized * theta[0] * theta[0] + t1 + t2)).abs() < 1e-9);
    }

    #[test]
    fn penalty_pd_over_lambda_grid_and_monotone() {
        let grid: [f64; 5] = [1e-4, 1e-2, 1.0, 1e2, 1e4];
        for modifier in [Modifier::None, Modifier::Linear, Modifier::Smooth { v_z: 3 }, Modifier::Categorical { categories: 3 }] {
            let main = match modifier {
                Modifier::Categorical { categories } => MainEffect::Dummy { categories },
                Modifier::Smooth { .. } => MainEffect::Smooth { v_z2: 4 },
                _ => MainEffect::Linear,
            };
            let mut spec = ModelSpec::new(modifier, main, SpatialSpec::iid());
            spec.v_x = 4;
            spec.v_l = 4;
            spec.lag_shrink = true;
            let v_z = match modifier {
                Modifier::None => 0,
                Modifier::Linear => 1,
                Modifier::Smooth { v_z } => v_z,
                Modifier::Categorical { categories } => categories - 1,
            };
            let n_gamma = match main {
                MainEffect::Smooth { v_z2 } => v_z2,
                MainEffect::Dummy { categories } => categories - 1,
                _ => 1,
            };
            let l = lay(4, 4, v_z, n_gamma);
            let pa = assemble_penalty(&spec, &l).unwrap();
            let k = pa.n_lambda();
            let theta: Vec<f64> = (0..l.n_xi - 3).map(|i| ((i * 29) % 13) as f64 / 4.0 - 1.5).collect();
            for (gi, &g) in grid.iter().enumerate() {
                let lam: Vec<f64> = (0..k).map(|i| grid[(gi + i) % grid.len()] * g.sqrt()).collect();
                let p = pa.assemble(&lam);
                assert!((p.clone() - p.transpose()).amax() == 0.0);
                assert!(p.clone().cholesky().is_some(), "{modifier:?} {lam:?}");
                let base = quad_form(&p, &theta);
                for c in 0..k {
                    let mut bumped = lam.clone();
                    bumped[c] *= 10.0;
                    assert!(quad_form(&pa.assemble(&bumped), &theta) >= base - 1e-9 * base.abs());
                }
            }
        }
    }

    #[test]
    fn theta1_null_space_is_bilinear() {
        let mut spec = ModelSpec::new(Modifier::None, MainEffect::Absent, SpatialSpec::iid());
        spec.v_x = 5;
        spec.v_l = 5;
        spec.ridge = 1e-300;
        let l = BlockLayout::new(1, 0, 25, 0, 1);
        let pa = assemble_penalty(&spec, &l).unwrap();
        let p = pa.assemble(&[1.0, 1.0]);
        let eig = p.symmetric_eigenvalues();
        assert_eq!(eig.iter().filter(|e| e.abs() < 1e-9).count(), 4);
    }

    #[test]
    fn q_is_block_diagonal_with_additive_logdet() {
        let panel = toy_panel(4, 30);
        let mut spec = ModelSpec::new(Modifier::Linear, MainEffect::Linear, SpatialSpec::leroux(AdjacencyGraph::lattice(4)));
        spec.v_x = 4;
        spec.v_l = 4;
        spec.max_lag = 3;
        let m = Model::build(&spec, &panel).unwrap();
        let lam = [0.3, 2.0, 5.0, 0.01];
        let pq = m.prior_precision(&lam, 2.5, Some(0.7)).unwrap();
        let lay = m.layout();
        let xi: Vec<f64> = (0..lay.n_xi).map(|i| ((i * 31) % 9) as f64 / 3.0 - 1.0).collect();
        let mut blocks = 0.0;
        blocks += spec.unpenalized * xi[0] * xi[0];
        let p = m.penalty.assemble(&lam);
        blocks += quad_form(&p, &xi[lay.gamma.0..lay.u.0]);
        let g = precision(&spec.spatial, 4, 2.5, Some(0.7)).unwrap();
        blocks += quad_form(&g, &xi[lay.u.0..]);
        assert!((quad_form(&pq.q, &xi) - blocks).abs() < 1e-10);
        let dense_logdet = logdet_spd(pq.q.clone(), "q").unwrap();
        assert!((dense_logdet - pq.logdet).abs() < 1e-8);

        let mut unpen = spec.clone();
        unpen.penalized = false;
        let mu = Model::build(&unpen, &panel).unwrap();
        assert!(mu.penalty.lambda_names.is_empty());
        let q0 = mu.prior_precision(&[], 1.0, Some(0.5)).unwrap().q;
        for i in 0..lay.u.0 {
            assert_eq!(q0[(i, i)], spec.unpenalized);
        }
    }
}
