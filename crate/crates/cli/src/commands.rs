//! The five subcommands.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use dlnm_lps::inference::{LagSel, Posterior, DEFAULT_DRAWS};
use dlnm_lps::laplace::{fit, FitOptions, FitResult};
use dlnm_lps::likelihood::Family;
use dlnm_lps::model::{Model, Modifier};
use dlnm_lps::panel::quantile;
use dlnm_lps::simgen::{
    generate_panel, run_study_threaded, score, standard_variant, synthetic_exposure, GridValues, ScenarioSpec, ScoreGrid,
    StudyConfig, VariantScores,
};
use dlnm_lps::spatial::AdjacencyGraph;

use crate::config::{parse_family, DataConfig, LoadedConfig, ModelConfig};
use crate::data::{read_adjacency, read_exposure_matrix, read_panel, LoadedPanel};
use crate::error::{CliError, CliResult};
use crate::output::{create_dir, fmt_f64, write_json, Meta, Table};

/// Resolved invocation: configuration plus command-line overrides.
pub struct Context {
    pub loaded: LoadedConfig,
    pub seed: u64,
    pub threads: usize,
    pub out: PathBuf,
}

impl Context {
    pub fn new(loaded: LoadedConfig, seed: Option<u64>, threads: Option<usize>, out: Option<PathBuf>) -> CliResult<Self> {
        let seed = seed.or(loaded.config.seed).unwrap_or(1);
        let threads = threads.or(loaded.config.threads).unwrap_or(1);
        if threads == 0 {
            return Err(CliError::Config("threads must be at least 1".into()));
        }
        let out = match out {
            Some(o) => o,
            None => loaded.config.out.as_ref().map(|o| loaded.resolve(o)).unwrap_or_else(|| PathBuf::from("out")),
        };
        create_dir(&out)?;
        Ok(Self { loaded, seed, threads, out })
    }

    fn meta(&self) -> Meta {
        Meta { config_hash: self.loaded.hash.clone(), seed: self.seed }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn data_config(&self) -> CliResult<&DataConfig> {
        self.loaded.config.data.as_ref().ok_or_else(|| CliError::Config("this command needs a [data] section".into()))
    }

    fn load_data(&self, percentiles: Option<bool>) -> CliResult<(LoadedPanel, Option<AdjacencyGraph>)> {
        let mut cfg = self.data_config()?.clone();
        if let Some(p) = percentiles {
            cfg.percentiles = p;
        }
        let path = self.loaded.resolve(&cfg.panel);
        let panel = read_panel(&path, &cfg)?;
        let graph = match &cfg.adjacency {
            Some(a) => Some(read_adjacency(&self.loaded.resolve(a), &panel.panel.area_ids)?),
            None => None,
        };
        Ok((panel, graph))
    }
}

fn family_name(f: Family) -> &'static str {
    match f {
        Family::Poisson => "poisson",
        Family::NegativeBinomial => "negative_binomial",
        Family::Gaussian => "gaussian",
    }
}

#[derive(Serialize)]
struct NamedValue {
    name: String,
    value: f64,
}

#[derive(Serialize)]
struct FitSummary {
    #[serde(flatten)]
    meta: Meta,
    family: &'static str,
    converged: bool,
    n_coefficients: usize,
    n_observations: usize,
    smoothing: Vec<NamedValue>,
    tau: Option<f64>,
    rho: Option<f64>,
    phi: Option<f64>,
    dic: f64,
    p_d: f64,
    deviance: f64,
    loglik: f64,
    log_marginal: f64,
    inner_iterations: usize,
    outer_iterations: usize,
    evaluations: usize,
    hyper_grad_norm: f64,
    wall_time_seconds: f64,
}

fn fit_summary(meta: Meta, model: &Model, f: &FitResult, seconds: f64) -> FitSummary {
    FitSummary {
        meta,
        family: family_name(model.spec.family),
        converged: f.converged,
        n_coefficients: f.xi.len(),
        n_observations: model.design.n_rows,
        smoothing: f.lambda_names.iter().zip(&f.hyper.lambdas).map(|(n, v)| NamedValue { name: n.clone(), value: *v }).collect(),
        tau: f.hyper.tau,
        rho: f.hyper.rho,
        phi: f.hyper.phi,
        dic: f.dic,
        p_d: f.p_d,
        deviance: f.deviance,
        loglik: f.loglik,
        log_marginal: f.log_marginal,
        inner_iterations: f.inner_iterations,
        outer_iterations: f.outer_iterations,
        evaluations: f.evaluations,
        hyper_grad_norm: f.hyper_grad_norm,
        wall_time_seconds: seconds,
    }
}

fn coefficient_names(model: &Model, panel: &LoadedPanel) -> Vec<(String, String)> {
    let l = model.layout();
    let mut names = vec![("beta".to_string(), "intercept".to_string())];
    names.extend(model.design.covariate_names.iter().map(|n| ("beta".to_string(), n.clone())));
    names.extend((0..l.gamma.1).map(|q| ("gamma".to_string(), format!("z{}", q + 1))));
    let v_l = model.crossbasis.v_l();
    names.extend((0..l.theta1.1).map(|q| ("theta1".to_string(), format!("x{}:l{}", q / v_l + 1, q % v_l + 1))));
    let p = l.theta1.1.max(1);
    names.extend(
        (0..l.theta2.1).map(|q| ("theta2".to_string(), format!("z{}:x{}:l{}", q / p + 1, (q % p) / v_l + 1, q % v_l + 1))),
    );
    names.extend(panel.panel.area_ids.iter().take(l.u.1).map(|a| ("u".to_string(), a.clone())));
    names
}

/// Modifier values at which RR grids are reported.
fn modifier_values(ctx: &Context, model: &Model, panel: &LoadedPanel) -> Vec<f64> {
    if let Some(z) = &ctx.loaded.config.inference.modifier_values {
        return z.clone();
    }
    let z = &panel.panel.modifier;
    match model.spec.modifier {
        Modifier::None => vec![if z.is_empty() { 0.0 } else { quantile(z, 0.5) }],
        Modifier::Categorical { categories } => (1..=categories).map(|c| c as f64).collect(),
        _ => [0.1, 0.5, 0.9].iter().map(|&p| quantile(z, p)).collect(),
    }
}

fn exposure_grid(ctx: &Context, model: &Model) -> CliResult<Vec<f64>> {
    if let Some([from, to, step]) = ctx.loaded.config.inference.exposure_grid {
        if !(step > 0.0 && to >= from) {
            return Err(CliError::Config("exposure_grid must be [from, to, step] with step > 0".into()));
        }
        let n = ((to - from) / step + 1e-9).floor() as usize;
        return Ok((0..=n).map(|i| from + i as f64 * step).collect());
    }
    let (lo, hi) = model.bases.exposure.boundary().ok_or_else(|| CliError::Config("exposure basis has no boundary".into()))?;
    Ok((0..=40).map(|i| lo + (hi - lo) * i as f64 / 40.0).collect())
}

fn lag_label(l: LagSel) -> String {
    match l {
        LagSel::Lag(k) => k.to_string(),
        LagSel::Overall => "overall".to_string(),
    }
}

/// `fit` writes the fit summary, coefficients and the RR grid; `report` adds
/// RRR, exceedance and attributable-fraction tables.
pub fn run_fit(ctx: &Context, full_report: bool) -> CliResult<()> {
    let (panel, graph) = ctx.load_data(None)?;
    let spec = ctx.loaded.config.model.to_spec(graph.as_ref())?;
    let model = Model::build(&spec, &panel.panel)?;
    let start = Instant::now();
    let f = fit(&model, &FitOptions::default())?;
    let seconds = start.elapsed().as_secs_f64();
    if !f.converged {
        eprintln!("warning: hyperparameter optimization did not converge; writing the best iterate");
    }
    let meta = ctx.meta();
    write_json(&ctx.path("fit.json"), &fit_summary(meta.clone(), &model, &f, seconds))?;

    let mut xi = Table::new(&["block", "name", "estimate", "sd"]);
    for (i, (block, name)) in coefficient_names(&model, &panel).into_iter().enumerate() {
        xi.push(vec![block, name, fmt_f64(f.xi[i]), fmt_f64(f.sigma[(i, i)].max(0.0).sqrt())]);
    }
    xi.write(&ctx.path("xi.csv"), &meta)?;

    let inf = &ctx.loaded.config.inference;
    let draws = inf.draws.unwrap_or(DEFAULT_DRAWS);
    let post = Posterior::new(&model, &f, draws, ctx.seed)?;
    let x0 = inf.reference.unwrap_or_else(|| quantile(&panel.panel.exposure.concat(), 0.5));
    let xs = exposure_grid(ctx, &model)?;
    let zs = modifier_values(ctx, &model, &panel);
    let mut lags: Vec<LagSel> = (0..=model.crossbasis.max_lag).map(LagSel::Lag).collect();
    lags.push(LagSel::Overall);

    let mut rr = Table::new(&["x", "z", "lag", "estimate", "lo", "hi", "sd"]);
    for c in post.log_rr(&xs, x0, &zs, &lags)? {
        rr.push(vec![
            fmt_f64(c.x),
            fmt_f64(c.z),
            lag_label(c.lag),
            fmt_f64(c.estimate),
            fmt_f64(c.lo),
            fmt_f64(c.hi),
            fmt_f64(c.sd),
        ]);
    }
    rr.write(&ctx.path("rr_grid.csv"), &meta)?;

    if full_report || inf.exceedance_threshold.is_some() {
        let threshold = inf.exceedance_threshold.unwrap_or(1.0);
        let mut ex = Table::new(&["x", "z", "threshold", "probability", "degenerate"]);
        for c in post.exceedance(&xs, &zs, x0, threshold)? {
            ex.push(vec![fmt_f64(c.x), fmt_f64(c.z), fmt_f64(threshold), fmt_f64(c.probability), c.degenerate.to_string()]);
        }
        ex.write(&ctx.path("exceedance.csv"), &meta)?;
    }

    if full_report && model.spec.modifier != Modifier::None && !panel.panel.modifier.is_empty() {
        let [hi_q, lo_q] = inf.rrr_quantiles.unwrap_or([0.9, 0.1]);
        let (z_hi, z_lo) = (quantile(&panel.panel.modifier, hi_q), quantile(&panel.panel.modifier, lo_q));
        let mut t = Table::new(&["x", "z_hi", "z_lo", "rrr", "lo", "hi"]);
        for c in post.rrr(&xs, x0, z_hi, z_lo)? {
            t.push(vec![fmt_f64(c.x), fmt_f64(z_hi), fmt_f64(z_lo), fmt_f64(c.rrr), fmt_f64(c.lo), fmt_f64(c.hi)]);
        }
        t.write(&ctx.path("rrr.csv"), &meta)?;
    }

    if full_report || inf.af_period.is_some() || inf.counterfactual.is_some() {
        write_af(ctx, &post, &panel, x0, &meta)?;
    }
    Ok(())
}

#[derive(Serialize)]
struct AfRow {
    area: String,
    af: f64,
    lo: f64,
    hi: f64,
    counterfactual_af: Option<f64>,
    counterfactual_lo: Option<f64>,
    counterfactual_hi: Option<f64>,
}

#[derive(Serialize)]
struct AfReport {
    #[serde(flatten)]
    meta: Meta,
    reference: f64,
    period: [usize; 2],
    /// First and last time stamp inside the period.
    period_labels: [Option<String>; 2],
    short_period: bool,
    counterfactual: Option<String>,
    areas: Vec<AfRow>,
}

fn write_af(ctx: &Context, post: &Posterior, panel: &LoadedPanel, x0: f64, meta: &Meta) -> CliResult<()> {
    let inf = &ctx.loaded.config.inference;
    let n_t = panel.panel.n_times();
    let [a, b] = inf.af_period.unwrap_or([0, n_t]);
    let cf: Option<Vec<f64>> = match inf.counterfactual.as_deref() {
        None | Some("none") => None,
        Some("median") => {
            if panel.panel.modifier.is_empty() {
                return Err(CliError::Config("a counterfactual needs a modifier column".into()));
            }
            Some(vec![quantile(&panel.panel.modifier, 0.5); panel.panel.n_areas()])
        }
        Some(other) => return Err(CliError::Config(format!("unknown counterfactual '{other}' (use \"median\" or \"none\")"))),
    };
    let summary = post.attributable_fraction(&panel.panel, x0, a..b, cf.as_deref())?;
    if summary.short_period {
        eprintln!("warning: the attributable-fraction period is shorter than the maximum lag + 1");
    }
    let rows: Vec<AfRow> = summary
        .areas
        .iter()
        .map(|r| AfRow {
            area: r.area.clone(),
            af: r.af,
            lo: r.lo,
            hi: r.hi,
            counterfactual_af: r.counterfactual.map(|c| c.0),
            counterfactual_lo: r.counterfactual.map(|c| c.1),
            counterfactual_hi: r.counterfactual.map(|c| c.2),
        })
        .collect();
    // caterpillar order: increasing AF, ties by area id
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&i, &j| rows[i].af.total_cmp(&rows[j].af).then_with(|| rows[i].area.cmp(&rows[j].area)));
    let mut table =
        Table::new(&["rank", "area", "af", "lo", "hi", "counterfactual_af", "counterfactual_lo", "counterfactual_hi"]);
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), fmt_f64);
    for (rank, &i) in order.iter().enumerate() {
        let r = &rows[i];
        table.push(vec![
            (rank + 1).to_string(),
            r.area.clone(),
            fmt_f64(r.af),
            fmt_f64(r.lo),
            fmt_f64(r.hi),
            opt(r.counterfactual_af),
            opt(r.counterfactual_lo),
            opt(r.counterfactual_hi),
        ]);
    }
    table.write(&ctx.path("af_table.csv"), meta)?;
    let report = AfReport {
        meta: meta.clone(),
        reference: x0,
        period: [a, b],
        period_labels: [panel.axis.label(a), b.checked_sub(1).and_then(|k| panel.axis.label(k))],
        short_period: summary.short_period,
        counterfactual: inf.counterfactual.clone(),
        areas: rows,
    };
    write_json(&ctx.path("af.json"), &report)
}

#[derive(Serialize)]
struct CompareRow {
    row: String,
    model: String,
    dic: Option<f64>,
    delta_dic: Option<f64>,
    p_d: Option<f64>,
    converged: bool,
    error: Option<String>,
}

#[derive(Serialize)]
struct CompareReport {
    #[serde(flatten)]
    meta: Meta,
    rows: Vec<String>,
    columns: Vec<String>,
    /// ΔDIC per row and column; null where a model failed or is absent.
    delta_dic: Vec<Vec<Option<f64>>>,
    models: Vec<CompareRow>,
}

/// Fits every listed model on the shared panel and tabulates ΔDIC.
pub fn run_compare(ctx: &Context) -> CliResult<()> {
    let cfg = ctx.loaded.config.compare.as_ref().ok_or_else(|| CliError::Config("compare needs [[compare.models]]".into()))?;
    if cfg.models.is_empty() {
        return Err(CliError::Config("compare needs at least one model".into()));
    }
    let base_pct = ctx.data_config()?.percentiles;
    let mut panels: BTreeMap<bool, (LoadedPanel, Option<AdjacencyGraph>)> = BTreeMap::new();
    let mut jobs = Vec::new();
    for m in &cfg.models {
        if let Some(k) = m.unknown.keys().next() {
            return Err(CliError::Config(format!("unknown key '{k}' in compare model '{}'", m.name)));
        }
        let pct = m.percentiles.unwrap_or(base_pct);
        if let std::collections::btree_map::Entry::Vacant(e) = panels.entry(pct) {
            e.insert(ctx.load_data(Some(pct))?);
        }
        let merged: ModelConfig = ctx.loaded.config.model.overlay(&m.model);
        let spec = merged.to_spec(panels[&pct].1.as_ref())?;
        let row = m
            .row
            .clone()
            .unwrap_or_else(|| format!("{}, {}", family_name(spec.family), if pct { "percentile" } else { "absolute" }));
        jobs.push((m.name.clone(), row, pct, spec));
    }
    let n = jobs.len();
    let threads = ctx.threads.min(n);
    let mut results: Vec<Option<CliResult<FitResult>>> = (0..n).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let (jobs, panels) = (&jobs, &panels);
                scope.spawn(move || {
                    (w..n)
                        .step_by(threads)
                        .map(|k| {
                            let (_, _, pct, spec) = &jobs[k];
                            let r = Model::build(spec, &panels[pct].0.panel)
                                .and_then(|model| fit(&model, &FitOptions::default()))
                                .map_err(CliError::from);
                            (k, r)
                        })
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (k, r) in h.join().expect("compare worker panicked") {
                results[k] = Some(r);
            }
        }
    });
    let best = results
        .iter()
        .filter_map(|r| r.as_ref().and_then(|r| r.as_ref().ok()).map(|f| f.dic))
        .filter(|d| d.is_finite())
        .fold(f64::INFINITY, f64::min);
    let mut models = Vec::with_capacity(n);
    for ((name, row, _, _), r) in jobs.iter().zip(results) {
        models.push(match r.expect("every model is assigned") {
            Ok(f) => CompareRow {
                row: row.clone(),
                model: name.clone(),
                dic: Some(f.dic),
                delta_dic: Some(f.dic - best),
                p_d: Some(f.p_d),
                converged: f.converged,
                error: None,
            },
            Err(e) => {
                eprintln!("warning: model '{name}' failed: {e}");
                CompareRow {
                    row: row.clone(),
                    model: name.clone(),
                    dic: None,
                    delta_dic: None,
                    p_d: None,
                    converged: false,
                    error: Some(e.to_string()),
                }
            }
        });
    }
    let mut rows: Vec<String> = Vec::new();
    let mut columns: Vec<String> = Vec::new();
    for m in &models {
        if !rows.contains(&m.row) {
            rows.push(m.row.clone());
        }
        if !columns.contains(&m.model) {
            columns.push(m.model.clone());
        }
    }
    let delta_dic = rows
        .iter()
        .map(|r| columns.iter().map(|c| models.iter().find(|m| &m.row == r && &m.model == c).and_then(|m| m.delta_dic)).collect())
        .collect();
    let meta = ctx.meta();
    let mut table = Table::new(&["row", "model", "dic", "delta_dic", "p_d", "converged", "status"]);
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), fmt_f64);
    for m in &models {
        table.push(vec![
            m.row.clone(),
            m.model.clone(),
            opt(m.dic),
            opt(m.delta_dic),
            opt(m.p_d),
            m.converged.to_string(),
            m.error.as_ref().map_or("ok".to_string(), |e| format!("failed: {e}")),
        ]);
    }
    table.write(&ctx.path("compare.csv"), &meta)?;
    write_json(&ctx.path("compare.json"), &CompareReport { meta, rows, columns, delta_dic, models })
}

#[derive(Serialize)]
struct ScoreRow {
    name: String,
    #[serde(rename = "cov RR")]
    cov_rr: Option<f64>,
    #[serde(rename = "cov RR overall")]
    cov_rr_overall: Option<f64>,
    #[serde(rename = "RMSE RR")]
    rmse_rr: Option<f64>,
    #[serde(rename = "RMSE RR overall")]
    rmse_rr_overall: Option<f64>,
    time: Option<f64>,
    failed: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mean_dic: Option<f64>,
}

impl ScoreRow {
    fn new(v: &VariantScores, time: Option<f64>, mean_dic: Option<f64>) -> Self {
        let s = v.scores;
        Self {
            name: v.name.clone(),
            cov_rr: s.map(|s| s.cov_lag),
            cov_rr_overall: s.map(|s| s.cov_overall),
            rmse_rr: s.map(|s| s.rmse_lag),
            rmse_rr_overall: s.map(|s| s.rmse_overall),
            time,
            failed: v.failed,
            mean_dic,
        }
    }
}

fn score_table(rows: &[ScoreRow]) -> Table {
    let mut t = Table::new(&["name", "cov RR", "cov RR overall", "RMSE RR", "RMSE RR overall", "time", "failed"]);
    let opt = |v: Option<f64>| v.map_or("NA".to_string(), fmt_f64);
    for r in rows {
        t.push(vec![
            r.name.clone(),
            opt(r.cov_rr),
            opt(r.cov_rr_overall),
            opt(r.rmse_rr),
            opt(r.rmse_rr_overall),
            opt(r.time),
            fmt_f64(r.failed),
        ]);
    }
    t
}

#[derive(Serialize)]
struct ReplicateSummary {
    replicate: usize,
    seed: u64,
    /// Sample range of `z` mapped onto `[0, 2π]` (complex scenario).
    z_map: Option<[f64; 2]>,
    variants: Vec<ReplicateVariant>,
}

#[derive(Serialize)]
struct ReplicateVariant {
    name: String,
    dic: Option<f64>,
    converged: bool,
    error: Option<String>,
}

#[derive(Serialize)]
struct ScenarioSummary {
    modification: String,
    regime: String,
    areas: usize,
    times: usize,
    replicates: usize,
    family: &'static str,
    beta0: f64,
    beta1: f64,
    rho: f64,
    sigma2: f64,
}

#[derive(Serialize)]
struct SimulationReport {
    #[serde(flatten)]
    meta: Meta,
    scenario: ScenarioSummary,
    scores: Vec<ScoreRow>,
    replicates: Vec<ReplicateSummary>,
}

fn grid_table(grid: &ScoreGrid, g: &GridValues, area_ids: &[String], z: &[f64]) -> Table {
    let mut t = Table::new(&["area", "x", "z", "lag", "estimate", "lo", "hi"]);
    let nx = grid.xs.len();
    for j in 0..grid.n_areas {
        for (xi, &x) in grid.xs.iter().enumerate() {
            for l in 0..=grid.max_lag {
                let c = grid.lag_index(j, xi, l);
                t.push(vec![
                    area_ids[j].clone(),
                    fmt_f64(x),
                    fmt_f64(z[j]),
                    l.to_string(),
                    fmt_f64(g.lag[c]),
                    fmt_f64(g.lag_lo[c]),
                    fmt_f64(g.lag_hi[c]),
                ]);
            }
            let c = j * nx + xi;
            t.push(vec![
                area_ids[j].clone(),
                fmt_f64(x),
                fmt_f64(z[j]),
                "overall".into(),
                fmt_f64(g.overall[c]),
                fmt_f64(g.overall_lo[c]),
                fmt_f64(g.overall_hi[c]),
            ]);
        }
    }
    t
}

/// Generates replicates, fits the configured variants and writes the scores.
pub fn run_simulate(ctx: &Context) -> CliResult<()> {
    let sc =
        ctx.loaded.config.simulation.as_ref().ok_or_else(|| CliError::Config("simulate needs a [simulation] section".into()))?;
    if sc.variants.is_empty() || sc.replicates == 0 {
        return Err(CliError::Config("simulation needs at least one variant and one replicate".into()));
    }
    let mut scenario = ScenarioSpec::new(sc.modification()?, sc.regime()?, sc.areas, sc.times, ctx.seed);
    if let Some(f) = &sc.family {
        scenario.family = parse_family(f)?;
    }
    scenario.validate()?;
    let area_ids: Vec<String> = (0..sc.areas).map(|j| format!("area{:03}", j + 1)).collect();
    let graph = match &sc.adjacency {
        Some(p) => read_adjacency(&ctx.loaded.resolve(p), &area_ids)?,
        None => AdjacencyGraph::lattice(sc.areas),
    };
    let exposure = match &sc.exposure {
        Some(p) => read_exposure_matrix(&ctx.loaded.resolve(p), sc.areas, sc.times)?,
        None => synthetic_exposure(sc.areas, sc.times, ctx.seed),
    };
    let variants = sc.variants.iter().map(|v| standard_variant(v, &graph)).collect::<Result<Vec<_>, _>>()?;
    let study = StudyConfig {
        scenario: scenario.clone(),
        variants,
        n_replicates: sc.replicates,
        n_draws: sc.draws.unwrap_or(1000),
        fit: FitOptions::default(),
        exposure: Some(exposure.clone()),
        graph: Some(graph.clone()),
    };
    let (outcomes, scores) = run_study_threaded(&study, ctx.threads)?;
    let meta = ctx.meta();
    let grid = ScoreGrid::standard(sc.areas, scenario.max_lag);
    let grid_dir = ctx.path("grids");
    let panel_dir = ctx.path("panels");
    if sc.write_grids {
        create_dir(&grid_dir)?;
    }
    if sc.write_panels {
        create_dir(&panel_dir)?;
    }
    let mut replicates = Vec::with_capacity(outcomes.len());
    for o in &outcomes {
        // regenerate the replicate (seeded) for its modifier values and panel
        let mut rs = scenario.clone();
        rs.seed = o.seed;
        let sim = generate_panel(&rs, &exposure, Some(&graph))?;
        if sc.write_grids {
            grid_table(&grid, &o.truth, &area_ids, &sim.z)
                .write(&grid_dir.join(format!("rep_{:03}_truth.csv", o.replicate)), &meta)?;
            for v in &o.variants {
                if let Some(g) = &v.grid {
                    grid_table(&grid, g, &area_ids, &sim.z)
                        .write(&grid_dir.join(format!("rep_{:03}_{}.csv", o.replicate, v.name)), &meta)?;
                }
            }
        }
        if sc.write_panels {
            write_panel(&panel_dir.join(format!("rep_{:03}.csv", o.replicate)), &sim.panel, &sim.population, &meta)?;
        }
        replicates.push(ReplicateSummary {
            replicate: o.replicate,
            seed: o.seed,
            z_map: sim.truth.z_range.map(|(a, b)| [a, b]),
            variants: o
                .variants
                .iter()
                .map(|v| ReplicateVariant { name: v.name.clone(), dic: v.dic, converged: v.converged, error: v.error.clone() })
                .collect(),
        });
    }
    let rows: Vec<ScoreRow> = scores
        .iter()
        .enumerate()
        .map(|(k, v)| {
            let dics: Vec<f64> = outcomes.iter().filter_map(|o| o.variants[k].dic).collect();
            let mean = (!dics.is_empty()).then(|| dics.iter().sum::<f64>() / dics.len() as f64);
            ScoreRow::new(v, Some(v.time), mean)
        })
        .collect();
    score_table(&rows).write(&ctx.path("scores.csv"), &meta)?;
    let report = SimulationReport {
        meta,
        scenario: ScenarioSummary {
            modification: sc.modification.clone().unwrap_or_else(|| "linear".into()),
            regime: sc.regime.clone().unwrap_or_else(|| "large".into()),
            areas: sc.areas,
            times: sc.times,
            replicates: sc.replicates,
            family: family_name(scenario.family),
            beta0: scenario.beta0,
            beta1: scenario.beta1,
            rho: scenario.rho,
            sigma2: scenario.sigma2,
        },
        scores: rows,
        replicates,
    };
    write_json(&ctx.path("scores.json"), &report)
}

fn write_panel(path: &Path, panel: &dlnm_lps::panel::TimeSeriesPanel, population: &[f64], meta: &Meta) -> CliResult<()> {
    let mut t = Table::new(&["time", "area", "count", "exposure", "population", "z"]);
    for (j, pop) in population.iter().enumerate().take(panel.n_areas()) {
        for (k, time) in panel.times.iter().enumerate() {
            t.push(vec![
                time.to_string(),
                panel.area_ids[j].clone(),
                format!("{}", panel.counts[panel.row(j, k)] as u64),
                fmt_f64(panel.exposure[j][k]),
                fmt_f64(*pop),
                fmt_f64(panel.modifier[j]),
            ]);
        }
    }
    t.write(path, meta)
}

/// Grid CSV as written by `simulate` (or by any external estimator).
fn read_grid(path: &Path) -> CliResult<(ScoreGrid, GridValues)> {
    let err = |m: String| CliError::Data(format!("{}: {m}", path.display()));
    let mut reader =
        csv::ReaderBuilder::new().comment(Some(b'#')).trim(csv::Trim::All).from_path(path).map_err(|e| err(e.to_string()))?;
    let headers = reader.headers().map_err(|e| err(e.to_string()))?.clone();
    let col = |n: &str| headers.iter().position(|h| h == n).ok_or_else(|| err(format!("missing column '{n}'")));
    let (ca, cx, cl, ce, clo, chi) = (col("area")?, col("x")?, col("lag")?, col("estimate")?, col("lo")?, col("hi")?);
    struct Cell {
        area: String,
        x: f64,
        lag: Option<usize>,
        v: [f64; 3],
    }
    let mut cells = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k + 3;
        let rec = rec.map_err(|e| err(format!("line {line}: {e}")))?;
        let num = |c: usize| -> CliResult<f64> {
            let s = &rec[c];
            if s == "NA" {
                return Ok(f64::NAN);
            }
            s.parse().map_err(|_| err(format!("line {line}: '{s}' is not a number")))
        };
        let lag = match &rec[cl] {
            "overall" => None,
            s => Some(s.parse().map_err(|_| err(format!("line {line}: bad lag '{s}'")))?),
        };
        cells.push(Cell { area: rec[ca].to_string(), x: num(cx)?, lag, v: [num(ce)?, num(clo)?, num(chi)?] });
    }
    let mut areas: Vec<String> = Vec::new();
    for c in &cells {
        if !areas.contains(&c.area) {
            areas.push(c.area.clone());
        }
    }
    let mut xs: Vec<f64> = cells.iter().map(|c| c.x).collect();
    xs.sort_by(|a, b| a.total_cmp(b));
    xs.dedup();
    let max_lag = cells.iter().filter_map(|c| c.lag).max().ok_or_else(|| err("no lag-specific rows".into()))?;
    let grid = ScoreGrid { xs, max_lag, n_areas: areas.len() };
    let (nl, no) = (grid.n_lag_cells(), grid.n_overall_cells());
    let mut g = GridValues {
        lag: vec![f64::NAN; nl],
        lag_lo: vec![f64::NAN; nl],
        lag_hi: vec![f64::NAN; nl],
        overall: vec![f64::NAN; no],
        overall_lo: vec![f64::NAN; no],
        overall_hi: vec![f64::NAN; no],
    };
    let mut seen_lag = vec![false; nl];
    let mut seen_overall = vec![false; no];
    for c in &cells {
        let j = areas.iter().position(|a| a == &c.area).unwrap();
        let xi = grid.xs.iter().position(|x| *x == c.x).unwrap();
        match c.lag {
            Some(l) => {
                let i = grid.lag_index(j, xi, l);
                (g.lag[i], g.lag_lo[i], g.lag_hi[i]) = (c.v[0], c.v[1], c.v[2]);
                seen_lag[i] = true;
            }
            None => {
                let i = j * grid.xs.len() + xi;
                (g.overall[i], g.overall_lo[i], g.overall_hi[i]) = (c.v[0], c.v[1], c.v[2]);
                seen_overall[i] = true;
            }
        }
    }
    if seen_lag.iter().chain(&seen_overall).any(|s| !s) {
        return Err(err("grid cells are missing".into()));
    }
    Ok((grid, g))
}

#[derive(Serialize)]
struct ScoreReport {
    #[serde(flatten)]
    meta: Meta,
    replicates: usize,
    scores: Vec<ScoreRow>,
}

/// Scores estimator grids against truth grids.
pub fn run_score(ctx: &Context) -> CliResult<()> {
    let sc = ctx.loaded.config.score.as_ref().ok_or_else(|| CliError::Config("score needs a [score] section".into()))?;
    let (truth_paths, estimates): (Vec<PathBuf>, BTreeMap<String, Vec<Option<PathBuf>>>) = match &sc.directory {
        Some(dir) => {
            let dir = ctx.loaded.resolve(dir).join("grids");
            let mut truth: Vec<PathBuf> = std::fs::read_dir(&dir)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", dir.display())))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| {
                    p.file_name().and_then(|n| n.to_str()).is_some_and(|n| n.starts_with("rep_") && n.ends_with("_truth.csv"))
                })
                .collect();
            truth.sort();
            let est = sc
                .estimators
                .iter()
                .map(|name| {
                    let files = truth
                        .iter()
                        .map(|t| {
                            let f = t.to_string_lossy().replace("_truth.csv", &format!("_{name}.csv"));
                            let p = PathBuf::from(f);
                            p.exists().then_some(p)
                        })
                        .collect();
                    (name.clone(), files)
                })
                .collect();
            (truth, est)
        }
        None => {
            let truth: Vec<PathBuf> = sc.truth.iter().map(|p| ctx.loaded.resolve(p)).collect();
            let mut est = BTreeMap::new();
            for (name, files) in &sc.estimates {
                if files.len() != truth.len() {
                    return Err(CliError::Config(format!(
                        "estimator '{name}' lists {} grids for {} truth grids",
                        files.len(),
                        truth.len()
                    )));
                }
                est.insert(name.clone(), files.iter().map(|p| Some(ctx.loaded.resolve(p))).collect());
            }
            (truth, est)
        }
    };
    if truth_paths.is_empty() || estimates.is_empty() {
        return Err(CliError::Config("nothing to score: need truth grids and at least one estimator".into()));
    }
    let truths = truth_paths.iter().map(|p| read_grid(p)).collect::<CliResult<Vec<_>>>()?;
    let grid = truths[0].0.clone();
    if truths.iter().any(|(g, _)| *g != grid) {
        return Err(CliError::Data("truth grids do not share one layout".into()));
    }
    let order: Vec<&String> = if sc.directory.is_some() { sc.estimators.iter().collect() } else { estimates.keys().collect() };
    let mut rows = Vec::new();
    for name in order {
        let mut pairs = Vec::new();
        let mut failed = 0usize;
        for (k, file) in estimates[name].iter().enumerate() {
            match file {
                Some(p) => {
                    let (g, values) = read_grid(p)?;
                    if g != grid {
                        return Err(CliError::Data(format!("{}: grid layout differs from the truth grid", p.display())));
                    }
                    pairs.push((values, truths[k].1.clone()));
                }
                None => failed += 1,
            }
        }
        let scores = if pairs.is_empty() { None } else { Some(score(&pairs, &grid)?) };
        let v = VariantScores { name: name.clone(), scores, time: f64::NAN, failed: failed as f64 / truths.len() as f64 };
        rows.push(ScoreRow::new(&v, None, None));
    }
    let meta = ctx.meta();
    score_table(&rows).write(&ctx.path("scores.csv"), &meta)?;
    write_json(&ctx.path("scores.json"), &ScoreReport { meta, replicates: truths.len(), scores: rows })
}
