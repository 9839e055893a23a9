//! Synthetic effect-modification scenarios and RMSE / coverage scoring.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, LogNormal, Normal, Poisson, StandardNormal};

use crate::error::{Error, Result};
use crate::inference::{LagSel, Posterior};
use crate::laplace::{fit, FitOptions};
use crate::likelihood::Family;
use crate::linalg::cholesky_with_jitter;
use crate::model::{MainEffect, Model, ModelSpec, Modifier, SplineKind};
use crate::panel::TimeSeriesPanel;
use crate::spatial::{precision, AdjacencyGraph, SpatialSpec};

/// Baseline polynomial coefficients of the true surface.
pub const DELTA: [f64; 5] = [0.211881, 0.1406585, -0.0982663, 0.0153671, -0.0006265];
/// Relative modification of each coefficient.
pub const DELTA_MOD: [f64; 5] = [0.2, 0.1, 0.5, 0.3, 0.15];
/// Reference exposure of all contrasts.
pub const REFERENCE_EXPOSURE: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modification {
    /// Coefficients scale linearly with `z`; constant lag decay.
    Linear,
    /// `z` is mapped to `[0, 2π]` and enters through `cos` and `sin`.
    Complex,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AreaRegime {
    /// Log-normal population with log-mean `log 12000` and sd 1.8.
    Small,
    /// Log-normal population with log-mean `log 6e6` and sd 0.9.
    Large,
}

impl AreaRegime {
    pub fn population_params(self) -> (f64, f64) {
        match self {
            AreaRegime::Small => (12_000f64.ln(), 1.8),
            AreaRegime::Large => (6_000_000f64.ln(), 0.9),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSpec {
    pub modification: Modification,
    pub area_regime: AreaRegime,
    pub n_areas: usize,
    pub n_times: usize,
    pub max_lag: usize,
    pub family: Family,
    /// Dispersion of negative-binomial counts.
    pub phi: f64,
    pub beta0: f64,
    pub beta1: f64,
    pub rho: f64,
    pub sigma2: f64,
    pub z_sd: f64,
    /// Multiplies the exposure-lag surface; 0 generates data without any exposure effect.
    pub effect_scale: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    pub fn new(modification: Modification, area_regime: AreaRegime, n_areas: usize, n_times: usize, seed: u64) -> Self {
        Self {
            modification,
            area_regime,
            n_areas,
            n_times,
            max_lag: 8,
            family: Family::Poisson,
            phi: 5.0,
            // daily rate near 0.03 per 1000 inhabitants
            beta0: match modification {
                Modification::Linear => -10.5,
                Modification::Complex => -8.0,
            },
            beta1: -1.0,
            rho: 0.95,
            sigma2: 0.2,
            z_sd: 0.4,
            effect_scale: 1.0,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_areas == 0 || self.n_times <= self.max_lag {
            return Err(Error::Argument(format!("scenario needs at least one area and more than {} time points", self.max_lag)));
        }
        if !(0.0..1.0).contains(&self.rho) || !(self.sigma2 >= 0.0) || !(self.z_sd >= 0.0) {
            return Err(Error::Argument("rho must lie in [0, 1) and variances must be non-negative".into()));
        }
        if self.family == Family::NegativeBinomial && !(self.phi > 0.0) {
            return Err(Error::Argument("negative-binomial dispersion must be positive".into()));
        }
        if self.family == Family::Gaussian {
            return Err(Error::Argument("scenarios generate counts".into()));
        }
        Ok(())
    }
}

/// The data-generating exposure-lag-response surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrueSurface {
    pub modification: Modification,
    /// Sample range of `z` mapped affinely onto `[0, 2π]` in the complex case.
    pub z_range: Option<(f64, f64)>,
    /// Scales the whole surface; 1 for the generator, 0 switches it off.
    pub scale: f64,
}

impl TrueSurface {
    pub fn linear() -> Self {
        Self { modification: Modification::Linear, z_range: None, scale: 1.0 }
    }

    pub fn complex(z_min: f64, z_max: f64) -> Self {
        Self { modification: Modification::Complex, z_range: Some((z_min, z_max)), scale: 1.0 }
    }

    fn mapped(&self, z: f64) -> f64 {
        match self.z_range {
            Some((lo, hi)) if hi > lo => (z - lo) / (hi - lo) * 2.0 * std::f64::consts::PI,
            _ => 0.0,
        }
    }

    fn coefficients(&self, z: f64) -> ([f64; 5], f64) {
        let mut c = [0.0; 5];
        match self.modification {
            Modification::Linear => {
                for p in 0..5 {
                    c[p] = DELTA[p] * (1.0 + DELTA_MOD[p] * z);
                }
                (c, 2.0)
            }
            Modification::Complex => {
                let s = self.mapped(z);
                for p in 0..5 {
                    c[p] = DELTA[p] * (1.0 + DELTA_MOD[p] * s.cos());
                }
                (c, 2.0 * (1.0 + 0.1 * s.sin()))
            }
        }
    }

    /// Surface value at exposure `x`, lag `l`, modifier `z`.
    pub fn value(&self, x: f64, l: f64, z: f64) -> f64 {
        let (c, d) = self.coefficients(z);
        let u = x - REFERENCE_EXPOSURE;
        let poly = c.iter().rev().fold(0.0, |acc, ci| acc * u + ci);
        self.scale * 0.1 * poly * (-l / d).exp()
    }

    /// True lag-specific log-RR against the reference exposure.
    pub fn log_rr(&self, x: f64, l: usize, z: f64) -> f64 {
        self.value(x, l as f64, z) - self.value(REFERENCE_EXPOSURE, l as f64, z)
    }

    pub fn log_rr_overall(&self, x: f64, max_lag: usize, z: f64) -> f64 {
        (0..=max_lag).map(|l| self.log_rr(x, l, z)).sum()
    }
}

/// Raw surface value; see [`TrueSurface::value`].
pub fn true_log_rr(surface: &TrueSurface, x: f64, l: f64, z: f64) -> f64 {
    surface.value(x, l, z)
}

/// A generated panel with the latent quantities behind it.
#[derive(Debug, Clone)]
pub struct SimulatedPanel {
    pub panel: TimeSeriesPanel,
    pub truth: TrueSurface,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
    pub population: Vec<f64>,
    /// `log μ` per row, area-major.
    pub log_mu: Vec<f64>,
}

/// Draws `u ~ N(0, G⁻¹)` for the Leroux precision with `τ = 1/σ²`.
pub fn draw_leroux(graph: &AdjacencyGraph, rho: f64, sigma2: f64, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let n = graph.n_areas;
    let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    if sigma2 == 0.0 {
        return Ok(vec![0.0; n]);
    }
    let g = precision(&SpatialSpec::leroux(graph.clone()), n, 1.0 / sigma2, Some(rho))?;
    let chol = cholesky_with_jitter(g, "Leroux precision")?;
    let l = chol.l();
    let u = l
        .transpose()
        .solve_upper_triangular(&DVector::from_vec(eps))
        .ok_or_else(|| Error::NotPositiveDefinite("Leroux factor".into()))?;
    Ok(u.iter().copied().collect())
}

/// Generates one panel from `exposure` (one series per area, at least `T` long, on `[0, 10]`).
pub fn generate_panel(spec: &ScenarioSpec, exposure: &[Vec<f64>], graph: Option<&AdjacencyGraph>) -> Result<SimulatedPanel> {
    spec.validate()?;
    let (j_n, t_n, l_max) = (spec.n_areas, spec.n_times, spec.max_lag);
    let graph = graph.ok_or_else(|| Error::Argument("the Leroux random effect needs an adjacency graph".into()))?;
    if graph.n_areas != j_n {
        return Err(Error::Consistency(format!("adjacency has {} areas, scenario has {j_n}", graph.n_areas)));
    }
    if exposure.len() != j_n || exposure.iter().any(|s| s.len() < t_n) {
        return Err(Error::Shape(format!("need {j_n} exposure series of length at least {t_n}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let zdist = Normal::new(0.0, spec.z_sd).map_err(|e| Error::Argument(e.to_string()))?;
    let z: Vec<f64> = (0..j_n).map(|_| zdist.sample(&mut rng)).collect();
    let u = draw_leroux(graph, spec.rho, spec.sigma2, &mut rng)?;
    let (mean, sd) = spec.area_regime.population_params();
    let pop_dist = LogNormal::new(mean, sd).map_err(|e| Error::Argument(e.to_string()))?;
    let population: Vec<f64> = (0..j_n).map(|_| pop_dist.sample(&mut rng)).collect();
    let mut truth = match spec.modification {
        Modification::Linear => TrueSurface::linear(),
        Modification::Complex => {
            let lo = z.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            TrueSurface::complex(lo, hi)
        }
    };
    truth.scale = spec.effect_scale;
    let mut counts = Vec::with_capacity(j_n * t_n);
    let mut log_mu = Vec::with_capacity(j_n * t_n);
    for j in 0..j_n {
        let x = &exposure[j];
        for t in 0..t_n {
            // early rows use the lags that exist; they are dropped when fitting
            let effect: f64 = (0..=l_max.min(t)).map(|l| truth.value(x[t - l], l as f64, z[j])).sum();
            let eta = spec.beta0 + spec.beta1 * z[j] + effect + u[j] + population[j].ln();
            let mu = eta.exp();
            let y = match spec.family {
                Family::Poisson => sample_poisson(mu, &mut rng)?,
                _ => {
                    let g = Gamma::new(spec.phi, mu / spec.phi).map_err(|e| Error::Argument(e.to_string()))?;
                    sample_poisson(g.sample(&mut rng), &mut rng)?
                }
            };
            counts.push(y);
            log_mu.push(eta);
        }
    }
    let panel = TimeSeriesPanel {
        area_ids: (0..j_n).map(|j| format!("area{:03}", j + 1)).collect(),
        times: (0..t_n as i64).collect(),
        counts,
        exposure: exposure.iter().map(|s| s[..t_n].to_vec()).collect(),
        log_offset: (0..j_n).flat_map(|j| std::iter::repeat_n(population[j].ln(), t_n)).collect(),
        modifier: z.clone(),
        covariates: vec![],
    };
    Ok(SimulatedPanel { panel, truth, z, u, population, log_mu })
}

fn sample_poisson(mu: f64, rng: &mut ChaCha8Rng) -> Result<f64> {
    if mu <= 0.0 {
        return Ok(0.0);
    }
    let d = Poisson::new(mu).map_err(|e| Error::Evaluation(format!("Poisson mean {mu}: {e}")))?;
    Ok(d.sample(rng))
}

fn std_normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Shared seasonal cycle plus area-level AR(1) noise, rescaled jointly to `[0, 10]`.
pub fn synthetic_exposure(n_areas: usize, n_times: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let season = 365.25;
    let common: Vec<f64> = {
        let mut prev = 0.0;
        (0..n_times)
            .map(|t| {
                prev = 0.8 * prev + 0.3 * std_normal(&mut rng);
                (2.0 * std::f64::consts::PI * t as f64 / season).sin() * 3.0 + prev
            })
            .collect()
    };
    let mut series: Vec<Vec<f64>> = (0..n_areas)
        .map(|_| {
            let shift = 0.3 * std_normal(&mut rng);
            let mut prev = 0.0;
            common
                .iter()
                .map(|c| {
                    prev = 0.7 * prev + 0.25 * std_normal(&mut rng);
                    c + shift + prev
                })
                .collect()
        })
        .collect();
    let lo = series.iter().flatten().copied().fold(f64::INFINITY, f64::min);
    let hi = series.iter().flatten().copied().fold(f64::NEG_INFINITY, f64::max);
    for s in &mut series {
        for v in s.iter_mut() {
            *v = (10.0 * (*v - lo) / (hi - lo)).clamp(0.0, 10.0);
        }
    }
    series
}

/// Evaluation grid: exposures `0, 0.25, …, 10` and lags `0..=L` in every area.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreGrid {
    pub xs: Vec<f64>,
    pub max_lag: usize,
    pub n_areas: usize,
}

impl ScoreGrid {
    pub fn standard(n_areas: usize, max_lag: usize) -> Self {
        Self { xs: (0..=40).map(|i| i as f64 * 0.25).collect(), max_lag, n_areas }
    }

    pub fn n_lag_cells(&self) -> usize {
        self.n_areas * self.xs.len() * (self.max_lag + 1)
    }

    pub fn n_overall_cells(&self) -> usize {
        self.n_areas * self.xs.len()
    }

    /// Lag cells ordered area, exposure, lag.
    pub fn lag_index(&self, j: usize, xi: usize, l: usize) -> usize {
        (j * self.xs.len() + xi) * (self.max_lag + 1) + l
    }
}

/// Estimates (or truth) over a [`ScoreGrid`].
#[derive(Debug, Clone, PartialEq)]
pub struct GridValues {
    pub lag: Vec<f64>,
    pub lag_lo: Vec<f64>,
    pub lag_hi: Vec<f64>,
    pub overall: Vec<f64>,
    pub overall_lo: Vec<f64>,
    pub overall_hi: Vec<f64>,
}

impl GridValues {
    /// Point values with degenerate intervals.
    pub fn exact(lag: Vec<f64>, overall: Vec<f64>) -> Self {
        Self { lag_lo: lag.clone(), lag_hi: lag.clone(), overall_lo: overall.clone(), overall_hi: overall.clone(), lag, overall }
    }

    fn check(&self, grid: &ScoreGrid) -> Result<()> {
        let nl = grid.n_lag_cells();
        let no = grid.n_overall_cells();
        let ok = [self.lag.len(), self.lag_lo.len(), self.lag_hi.len()].iter().all(|&n| n == nl)
            && [self.overall.len(), self.overall_lo.len(), self.overall_hi.len()].iter().all(|&n| n == no);
        if ok {
            Ok(())
        } else {
            Err(Error::Scoring(format!("grid needs {nl} lag cells and {no} overall cells")))
        }
    }
}

/// True log-RR over the grid for the areas' modifier values.
pub fn truth_grid(surface: &TrueSurface, grid: &ScoreGrid, z: &[f64]) -> GridValues {
    let mut lag = Vec::with_capacity(grid.n_lag_cells());
    let mut overall = Vec::with_capacity(grid.n_overall_cells());
    for &zj in &z[..grid.n_areas] {
        for &x in &grid.xs {
            let mut total = 0.0;
            for l in 0..=grid.max_lag {
                let v = surface.log_rr(x, l, zj);
                total += v;
                lag.push(v);
            }
            overall.push(total);
        }
    }
    GridValues::exact(lag, overall)
}

/// Posterior summaries over the grid from a fitted model.
pub fn estimate_grid(post: &Posterior, grid: &ScoreGrid, z: &[f64]) -> Result<GridValues> {
    let mut lags: Vec<LagSel> = (0..=grid.max_lag).map(LagSel::Lag).collect();
    lags.push(LagSel::Overall);
    let mut g = GridValues {
        lag: Vec::with_capacity(grid.n_lag_cells()),
        lag_lo: Vec::with_capacity(grid.n_lag_cells()),
        lag_hi: Vec::with_capacity(grid.n_lag_cells()),
        overall: Vec::with_capacity(grid.n_overall_cells()),
        overall_lo: Vec::with_capacity(grid.n_overall_cells()),
        overall_hi: Vec::with_capacity(grid.n_overall_cells()),
    };
    for &zj in &z[..grid.n_areas] {
        for cell in post.surface(&grid.xs, REFERENCE_EXPOSURE, zj, &lags)? {
            match cell.lag {
                LagSel::Lag(_) => {
                    g.lag.push(cell.estimate);
                    g.lag_lo.push(cell.lo);
                    g.lag_hi.push(cell.hi);
                }
                LagSel::Overall => {
                    g.overall.push(cell.estimate);
                    g.overall_lo.push(cell.lo);
                    g.overall_hi.push(cell.hi);
                }
            }
        }
    }
    Ok(g)
}

/// Across-the-surface RMSE and coverage of lag-specific and overall log-RR.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scores {
    pub rmse_lag: f64,
    pub rmse_overall: f64,
    pub cov_lag: f64,
    pub cov_overall: f64,
}

/// Estimate, lower and upper columns of one kind of grid cell.
type Bands<'a> = (&'a [f64], &'a [f64], &'a [f64]);

/// Scores `(estimate, truth)` pairs, one per replicate.
pub fn score(replicates: &[(GridValues, GridValues)], grid: &ScoreGrid) -> Result<Scores> {
    if replicates.is_empty() {
        return Err(Error::Scoring("no replicates to score".into()));
    }
    for (est, truth) in replicates {
        est.check(grid)?;
        truth.check(grid)?;
    }
    let s = replicates.len() as f64;
    let summarize = |n: usize, pick: &dyn Fn(&GridValues) -> Bands<'_>| -> (f64, f64) {
        let (mut mse, mut hits) = (0.0, 0.0);
        for c in 0..n {
            let (mut se, mut hit) = (0.0, 0.0);
            for (est, truth) in replicates {
                let (e, lo, hi) = pick(est);
                let t = pick(truth).0[c];
                se += (e[c] - t).powi(2);
                if lo[c] <= t && t <= hi[c] {
                    hit += 1.0;
                }
            }
            mse += se / s;
            hits += hit / s;
        }
        ((mse / n as f64).sqrt(), hits / n as f64)
    };
    let (rmse_lag, cov_lag) = summarize(grid.n_lag_cells(), &|g| (&g.lag, &g.lag_lo, &g.lag_hi));
    let (rmse_overall, cov_overall) = summarize(grid.n_overall_cells(), &|g| (&g.overall, &g.overall_lo, &g.overall_hi));
    Ok(Scores { rmse_lag, rmse_overall, cov_lag, cov_overall })
}

/// How a variant sees the generated modifier.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModifierCoding {
    Raw,
    /// Category 2 above the sample median, 1 otherwise.
    MedianSplit,
}

impl ModifierCoding {
    pub fn apply(self, z: &[f64]) -> Vec<f64> {
        match self {
            ModifierCoding::Raw => z.to_vec(),
            ModifierCoding::MedianSplit => {
                let m = crate::panel::quantile(z, 0.5);
                z.iter().map(|&v| if v > m { 2.0 } else { 1.0 }).collect()
            }
        }
    }
}

/// A named model fitted to every replicate.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub spec: ModelSpec,
    pub coding: ModifierCoding,
}

#[derive(Debug, Clone)]
pub struct VariantOutcome {
    pub name: String,
    pub grid: Option<GridValues>,
    pub dic: Option<f64>,
    pub converged: bool,
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ReplicateOutcome {
    pub replicate: usize,
    pub seed: u64,
    pub truth: GridValues,
    pub variants: Vec<VariantOutcome>,
}

/// Study-level settings shared by all replicates.
#[derive(Debug, Clone)]
pub struct StudyConfig {
    pub scenario: ScenarioSpec,
    pub variants: Vec<Variant>,
    pub n_replicates: usize,
    pub n_draws: usize,
    pub fit: FitOptions,
    /// Exposure series shared by all replicates; synthetic when absent.
    pub exposure: Option<Vec<Vec<f64>>>,
    /// Adjacency; a lattice over the areas when absent.
    pub graph: Option<AdjacencyGraph>,
}

impl StudyConfig {
    pub fn graph(&self) -> AdjacencyGraph {
        self.graph.clone().unwrap_or_else(|| AdjacencyGraph::lattice(self.scenario.n_areas))
    }

    pub fn exposure(&self) -> Vec<Vec<f64>> {
        self.exposure
            .clone()
            .unwrap_or_else(|| synthetic_exposure(self.scenario.n_areas, self.scenario.n_times, self.scenario.seed))
    }
}

/// Fits every variant to replicate `rep` (seed `scenario.seed + rep`).
pub fn run_replicate(
    config: &StudyConfig,
    exposure: &[Vec<f64>],
    graph: &AdjacencyGraph,
    rep: usize,
) -> Result<ReplicateOutcome> {
    let mut scenario = config.scenario.clone();
    scenario.seed = config.scenario.seed.wrapping_add(rep as u64);
    let sim = generate_panel(&scenario, exposure, Some(graph))?;
    let grid = ScoreGrid::standard(scenario.n_areas, scenario.max_lag);
    let truth = truth_grid(&sim.truth, &grid, &sim.z);
    let mut variants = Vec::with_capacity(config.variants.len());
    for v in &config.variants {
        let start = Instant::now();
        let result = (|| -> Result<(GridValues, f64, bool)> {
            let z = v.coding.apply(&sim.z);
            let mut panel = sim.panel.clone();
            panel.modifier = z.clone();
            let model = Model::build(&v.spec, &panel)?;
            let f = fit(&model, &config.fit)?;
            let post = Posterior::new(&model, &f, config.n_draws, scenario.seed)?;
            Ok((estimate_grid(&post, &grid, &z)?, f.dic, f.converged))
        })();
        let seconds = start.elapsed().as_secs_f64();
        variants.push(match result {
            Ok((g, dic, converged)) => {
                VariantOutcome { name: v.name.clone(), grid: Some(g), dic: Some(dic), converged, seconds, error: None }
            }
            Err(e) => VariantOutcome {
                name: v.name.clone(),
                grid: None,
                dic: None,
                converged: false,
                seconds,
                error: Some(e.to_string()),
            },
        });
    }
    Ok(ReplicateOutcome { replicate: rep, seed: scenario.seed, truth, variants })
}

/// Per-variant scores in the column layout of the simulation tables.
#[derive(Debug, Clone, PartialEq)]
pub struct VariantScores {
    pub name: String,
    pub scores: Option<Scores>,
    /// Mean wall-clock seconds per fit.
    pub time: f64,
    /// Proportion of replicates whose fit failed.
    pub failed: f64,
}

/// Scores each variant over the replicates where it succeeded.
pub fn summarize_study(outcomes: &[ReplicateOutcome], n_areas: usize, max_lag: usize) -> Result<Vec<VariantScores>> {
    let grid = ScoreGrid::standard(n_areas, max_lag);
    let Some(first) = outcomes.first() else {
        return Err(Error::Scoring("no replicates".into()));
    };
    let mut out = Vec::new();
    for (k, v) in first.variants.iter().enumerate() {
        let mut pairs = Vec::new();
        let mut time = 0.0;
        let mut failed = 0usize;
        for o in outcomes {
            let vo = &o.variants[k];
            time += vo.seconds;
            match &vo.grid {
                Some(g) => pairs.push((g.clone(), o.truth.clone())),
                None => failed += 1,
            }
        }
        let scores = if pairs.is_empty() { None } else { Some(score(&pairs, &grid)?) };
        out.push(VariantScores {
            name: v.name.clone(),
            scores,
            time: time / outcomes.len() as f64,
            failed: failed as f64 / outcomes.len() as f64,
        });
    }
    Ok(out)
}

/// Runs all replicates in order and scores them.
pub fn run_study(config: &StudyConfig) -> Result<(Vec<ReplicateOutcome>, Vec<VariantScores>)> {
    run_study_threaded(config, 1)
}

/// Like [`run_study`], spreading replicates over `threads` workers. Results are
/// gathered by replicate index, so the output does not depend on scheduling.
pub fn run_study_threaded(config: &StudyConfig, threads: usize) -> Result<(Vec<ReplicateOutcome>, Vec<VariantScores>)> {
    let exposure = config.exposure();
    let graph = config.graph();
    let n = config.n_replicates;
    let threads = threads.clamp(1, n.max(1));
    let mut slots: Vec<Option<Result<ReplicateOutcome>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let (exposure, graph) = (&exposure, &graph);
                scope.spawn(move || {
                    (w..n).step_by(threads).map(|rep| (rep, run_replicate(config, exposure, graph, rep))).collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (rep, r) in h.join().expect("replicate worker panicked") {
                slots[rep] = Some(r);
            }
        }
    });
    let outcomes = slots.into_iter().map(|r| r.expect("every replicate is assigned")).collect::<Result<Vec<_>>>()?;
    let scores = summarize_study(&outcomes, config.scenario.n_areas, config.scenario.max_lag)?;
    Ok((outcomes, scores))
}

/// Desk-scale variant: Leroux prior, linear main effect, lag shrinkage,
/// exposure basis on `[0, 10]`.
pub fn simulation_variant(name: &str, modifier: Modifier, graph: &AdjacencyGraph) -> Variant {
    let mut spec = ModelSpec::new(modifier, MainEffect::Linear, SpatialSpec::leroux(graph.clone()));
    spec.lag_shrink = true;
    spec.exposure_range = Some((0.0, 10.0));
    Variant { name: name.to_string(), spec, coding: ModifierCoding::Raw }
}

/// Named variants of the simulation tables: `linear`, `smooth` (5 df),
/// `binary` (median split), `none` / `common`, and `natural` (unpenalized
/// natural splines with a linear modifier).
pub fn standard_variant(name: &str, graph: &AdjacencyGraph) -> Result<Variant> {
    Ok(match name {
        "linear" => simulation_variant(name, Modifier::Linear, graph),
        "smooth" => simulation_variant(name, Modifier::Smooth { v_z: 5 }, graph),
        "none" | "common" => simulation_variant(name, Modifier::None, graph),
        "binary" => {
            let mut v = simulation_variant(name, Modifier::Categorical { categories: 2 }, graph);
            v.spec.main_effect = MainEffect::Dummy { categories: 2 };
            v.coding = ModifierCoding::MedianSplit;
            v
        }
        "natural" => {
            let mut v = simulation_variant(name, Modifier::Linear, graph);
            v.spec.spline = SplineKind::Natural;
            v.spec.penalized = false;
            v.spec.lag_shrink = false;
            v
        }
        other => return Err(Error::Argument(format!("unknown model variant '{other}'"))),
    })
}

/// Empirical covariance helper used by generator checks.
pub fn sample_variance(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let m = values.iter().sum::<f64>() / n;
    values.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0)
}

#[doc(hidden)]
pub fn leroux_marginal_variance(graph: &AdjacencyGraph, rho: f64, sigma2: f64) -> Result<f64> {
    let g = precision(&SpatialSpec::leroux(graph.clone()), graph.n_areas, 1.0 / sigma2, Some(rho))?;
    let inv: DMatrix<f64> = cholesky_with_jitter(g, "Leroux precision")?.inverse();
    Ok(inv.trace() / graph.n_areas as f64)
}
