//! Panel and adjacency CSV input.
//!
//! Panel columns: `time` (ISO date or integer), `area`, `count`, `exposure`,
//! optional `population` and `z`, plus the factor and numeric covariate
//! columns declared in the configuration. Any other column is rejected.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use chrono::{Datelike, NaiveDate};

use dlnm_lps::basis::{eval_basis, BasisSpec};
use dlnm_lps::panel::{quantile, Covariate, TimeSeriesPanel};
use dlnm_lps::spatial::AdjacencyGraph;

use crate::config::DataConfig;
use crate::error::{CliError, CliResult};

const REQUIRED: [&str; 4] = ["time", "area", "count", "exposure"];
const OPTIONAL: [&str; 2] = ["population", "z"];

/// Time stamps of a panel: calendar days or plain integers.
#[derive(Debug, Clone, PartialEq)]
pub enum TimeAxis {
    Dates(Vec<NaiveDate>),
    Index(Vec<i64>),
}

impl TimeAxis {
    /// Time in years: calendar year fraction, or index / 365.25.
    fn years(&self) -> Vec<f64> {
        match self {
            TimeAxis::Dates(d) => d.iter().map(|d| d.year() as f64 + d.ordinal0() as f64 / 365.25).collect(),
            TimeAxis::Index(i) => i.iter().map(|&t| t as f64 / 365.25).collect(),
        }
    }

    /// Label of time index `k` as it appeared in the input.
    pub fn label(&self, k: usize) -> Option<String> {
        match self {
            TimeAxis::Dates(d) => d.get(k).map(|d| d.to_string()),
            TimeAxis::Index(i) => i.get(k).map(|t| t.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedPanel {
    pub panel: TimeSeriesPanel,
    pub axis: TimeAxis,
}

/// A file named by the configuration that cannot be opened is a configuration error.
fn open_err(what: &str, path: &Path, e: csv::Error) -> CliError {
    CliError::Config(format!("cannot open {what} file {}: {e}", path.display()))
}

fn data_err(path: &Path, line: usize, msg: impl std::fmt::Display) -> CliError {
    CliError::Data(format!("{}, line {line}: {msg}", path.display()))
}

fn parse_f64(path: &Path, line: usize, col: &str, s: &str) -> CliResult<f64> {
    let v: f64 = s.trim().parse().map_err(|_| data_err(path, line, format!("column '{col}': '{s}' is not a number")))?;
    if !v.is_finite() {
        return Err(data_err(path, line, format!("column '{col}': non-finite value")));
    }
    Ok(v)
}

enum Stamp {
    Date(NaiveDate),
    Index(i64),
}

fn parse_time(path: &Path, line: usize, s: &str) -> CliResult<Stamp> {
    let s = s.trim();
    if let Ok(i) = s.parse::<i64>() {
        return Ok(Stamp::Index(i));
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d")
        .map(Stamp::Date)
        .map_err(|_| data_err(path, line, format!("time '{s}' is neither an integer nor an ISO date")))
}

struct Row {
    line: usize,
    time: i64,
    count: f64,
    exposure: f64,
    population: Option<f64>,
    z: Option<f64>,
    factors: Vec<String>,
    numeric: Vec<f64>,
}

/// Reads and validates a panel CSV, then adds the configured covariates.
pub fn read_panel(path: &Path, cfg: &DataConfig) -> CliResult<LoadedPanel> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| open_err("panel", path, e))?;
    let headers = reader.headers().map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    for h in headers.iter() {
        let known = REQUIRED.contains(&h)
            || OPTIONAL.contains(&h)
            || cfg.factors.iter().any(|f| f == h)
            || cfg.covariates.iter().any(|c| c == h);
        if !known {
            return Err(data_err(path, 1, format!("unknown column '{h}' (declare covariates in the configuration)")));
        }
    }
    let idx: Vec<usize> = REQUIRED
        .iter()
        .map(|c| col(c).ok_or_else(|| data_err(path, 1, format!("missing required column '{c}'"))))
        .collect::<CliResult<_>>()?;
    let (c_time, c_area, c_count, c_exp) = (idx[0], idx[1], idx[2], idx[3]);
    let (c_pop, c_z) = (col("population"), col("z"));
    let f_idx: Vec<usize> = cfg
        .factors
        .iter()
        .map(|f| col(f).ok_or_else(|| data_err(path, 1, format!("declared factor '{f}' is missing"))))
        .collect::<CliResult<_>>()?;
    let n_idx: Vec<usize> = cfg
        .covariates
        .iter()
        .map(|f| col(f).ok_or_else(|| data_err(path, 1, format!("declared covariate '{f}' is missing"))))
        .collect::<CliResult<_>>()?;

    let mut area_ids: Vec<String> = Vec::new();
    let mut area_pos: HashMap<String, usize> = HashMap::new();
    let mut rows: Vec<Vec<Row>> = Vec::new();
    let mut dates: Option<bool> = None;
    let mut date_of: BTreeMap<i64, NaiveDate> = BTreeMap::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| data_err(path, line, e))?;
        let get = |c: usize| rec.get(c).unwrap_or("");
        let (time, is_date) = match parse_time(path, line, get(c_time))? {
            Stamp::Date(d) => {
                let o = d.num_days_from_ce() as i64;
                date_of.insert(o, d);
                (o, true)
            }
            Stamp::Index(i) => (i, false),
        };
        match dates {
            None => dates = Some(is_date),
            Some(d) if d != is_date => return Err(data_err(path, line, "mixed date and integer time stamps")),
            _ => {}
        }
        let count = parse_f64(path, line, "count", get(c_count))?;
        if count < 0.0 || count.fract() != 0.0 {
            return Err(data_err(path, line, format!("count {count} is not a non-negative integer")));
        }
        let population = match c_pop {
            Some(c) => {
                let p = parse_f64(path, line, "population", get(c))?;
                if p <= 0.0 {
                    return Err(data_err(path, line, "population must be positive"));
                }
                Some(p)
            }
            None => None,
        };
        let row = Row {
            line,
            time,
            count,
            exposure: parse_f64(path, line, "exposure", get(c_exp))?,
            population,
            z: c_z.map(|c| parse_f64(path, line, "z", get(c))).transpose()?,
            factors: f_idx.iter().map(|&c| get(c).to_string()).collect(),
            numeric: n_idx
                .iter()
                .zip(&cfg.covariates)
                .map(|(&c, name)| parse_f64(path, line, name, get(c)))
                .collect::<CliResult<_>>()?,
        };
        let area = get(c_area).to_string();
        if area.is_empty() {
            return Err(data_err(path, line, "empty area identifier"));
        }
        let j = *area_pos.entry(area.clone()).or_insert_with(|| {
            area_ids.push(area);
            rows.push(Vec::new());
            rows.len() - 1
        });
        rows[j].push(row);
    }
    if rows.is_empty() {
        return Err(CliError::Data(format!("{}: panel has no rows", path.display())));
    }
    for r in &mut rows {
        r.sort_by_key(|r| r.time);
    }
    let times: Vec<i64> = rows[0].iter().map(|r| r.time).collect();
    // lags count time steps, so the series must be gap-free
    if let Some(w) = rows[0].windows(2).find(|w| w[1].time - w[0].time > 1) {
        return Err(data_err(path, w[1].line, format!("gap in the time axis before this row (area '{}')", area_ids[0])));
    }
    for (j, r) in rows.iter().enumerate() {
        if let Some(w) = r.windows(2).find(|w| w[0].time == w[1].time) {
            return Err(data_err(path, w[1].line, format!("duplicate time for area '{}'", area_ids[j])));
        }
        if r.len() != times.len() || r.iter().zip(&times).any(|(a, &t)| a.time != t) {
            return Err(CliError::Data(format!(
                "{}: area '{}' does not cover the same time points as area '{}'",
                path.display(),
                area_ids[j],
                area_ids[0]
            )));
        }
        if let Some(z0) = r[0].z {
            if let Some(bad) = r.iter().find(|x| x.z != Some(z0)) {
                return Err(data_err(path, bad.line, format!("modifier z varies within area '{}'", area_ids[j])));
            }
        }
    }
    let all = || rows.iter().flatten();
    let mut panel = TimeSeriesPanel {
        area_ids,
        times: times.clone(),
        counts: all().map(|r| r.count).collect(),
        exposure: rows.iter().map(|r| r.iter().map(|x| x.exposure).collect()).collect(),
        log_offset: all().map(|r| r.population.map_or(0.0, f64::ln)).collect(),
        modifier: if c_z.is_some() { rows.iter().map(|r| r[0].z.unwrap()).collect() } else { vec![] },
        covariates: vec![],
    };
    let axis =
        if dates == Some(true) { TimeAxis::Dates(times.iter().map(|t| date_of[t]).collect()) } else { TimeAxis::Index(times) };

    for (k, name) in cfg.covariates.iter().enumerate() {
        panel.covariates.push(Covariate { name: name.clone(), values: all().map(|r| r.numeric[k]).collect() });
    }
    for (k, name) in cfg.factors.iter().enumerate() {
        let levels: Vec<String> = {
            let mut l: Vec<String> = all().map(|r| r.factors[k].clone()).collect();
            l.sort();
            l.dedup();
            l
        };
        for level in levels.iter().skip(1) {
            panel.covariates.push(Covariate {
                name: format!("{name}={level}"),
                values: all().map(|r| f64::from(u8::from(&r.factors[k] == level))).collect(),
            });
        }
    }
    if cfg.day_of_week {
        let TimeAxis::Dates(d) = &axis else {
            return Err(CliError::Config("day_of_week needs ISO dates in the time column".into()));
        };
        let names = ["Tue", "Wed", "Thu", "Fri", "Sat", "Sun"];
        for (k, name) in names.iter().enumerate() {
            let per_t: Vec<f64> =
                d.iter().map(|d| f64::from(u8::from(d.weekday().num_days_from_monday() as usize == k + 1))).collect();
            panel.covariates.push(Covariate { name: format!("dow={name}"), values: repeat_areas(&per_t, panel.n_areas()) });
        }
    }
    if let Some(df_year) = cfg.trend_df_per_year {
        for c in trend_columns(&axis.years(), df_year)? {
            panel.covariates.push(Covariate { name: c.0, values: repeat_areas(&c.1, panel.n_areas()) });
        }
    }
    if cfg.percentiles {
        panel.to_percentiles();
    }
    panel.validate()?;
    Ok(LoadedPanel { panel, axis })
}

fn repeat_areas(per_t: &[f64], n_areas: usize) -> Vec<f64> {
    (0..n_areas).flat_map(|_| per_t.iter().copied()).collect()
}

/// Natural cubic spline of time with `df_year` degrees of freedom per year,
/// knots at equally spaced quantiles; the constant is absorbed by the intercept.
fn trend_columns(years: &[f64], df_year: f64) -> CliResult<Vec<(String, Vec<f64>)>> {
    if !(df_year > 0.0) {
        return Err(CliError::Config("trend_df_per_year must be positive".into()));
    }
    let (lo, hi) = (years[0], years[years.len() - 1]);
    let df = ((hi - lo) * df_year).round().max(1.0) as usize;
    if df >= years.len() {
        return Err(CliError::Config(format!("trend with {df} degrees of freedom exceeds the {} time points", years.len())));
    }
    let mut knots = vec![lo];
    for i in 1..df {
        knots.push(quantile(years, i as f64 / df as f64));
    }
    knots.push(hi);
    knots.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let spec = BasisSpec::natural_cubic(knots, false)?;
    let m = eval_basis(&spec, years)?;
    Ok((0..m.ncols()).map(|c| (format!("trend{}", c + 1), m.column(c).iter().copied().collect())).collect())
}

/// Reads an edge list with columns `area_a,area_b` against the panel's areas.
pub fn read_adjacency(path: &Path, area_ids: &[String]) -> CliResult<AdjacencyGraph> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| open_err("adjacency", path, e))?;
    let mut edges = Vec::new();
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| data_err(path, line, e))?;
        if rec.len() != 2 {
            return Err(data_err(path, line, "expected two area identifiers"));
        }
        let find =
            |s: &str| area_ids.iter().position(|a| a == s).ok_or_else(|| data_err(path, line, format!("unknown area '{s}'")));
        let (a, b) = (find(&rec[0])?, find(&rec[1])?);
        if a == b {
            return Err(data_err(path, line, "self-loop"));
        }
        let e = (a.min(b), a.max(b));
        if !edges.contains(&e) {
            edges.push(e);
        }
    }
    Ok(AdjacencyGraph::new(area_ids.len(), edges)?)
}

/// Wide exposure CSV: one column per area, one row per time point.
pub fn read_exposure_matrix(path: &Path, n_areas: usize, n_times: usize) -> CliResult<Vec<Vec<f64>>> {
    let mut reader = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| open_err("exposure", path, e))?;
    let mut series = vec![Vec::new(); n_areas];
    for (k, rec) in reader.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| data_err(path, line, e))?;
        if rec.len() < n_areas {
            return Err(data_err(path, line, format!("expected {n_areas} exposure columns")));
        }
        for (j, s) in series.iter_mut().enumerate() {
            s.push(parse_f64(path, line, "exposure", &rec[j])?);
        }
    }
    if series[0].len() < n_times {
        return Err(CliError::Data(format!("{}: {} rows, need {n_times}", path.display(), series[0].len())));
    }
    if series.iter().flatten().any(|v| !(0.0..=10.0).contains(v)) {
        return Err(CliError::Data(format!("{}: exposures must be standardized to [0, 10]", path.display())));
    }
    Ok(series)
}
