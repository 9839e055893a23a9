#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use dlnm_lps::simgen::{generate_panel, synthetic_exposure, AreaRegime, Modification, ScenarioSpec, SimulatedPanel};
use dlnm_lps::spatial::AdjacencyGraph;

pub fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_dlnm-lps")
}

/// The bundled example directory.
pub fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data").canonicalize().unwrap()
}

pub fn run(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(bin()).arg(cmd).arg("--config").arg(config).arg("--out").arg(out).args(extra).output().expect("binary runs")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Writes `body` as a config file in `dir`.
pub fn config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

/// Simulated LinearEM panel written as `panel.csv` and `adjacency.csv` in `dir`.
pub fn write_simulated(dir: &Path, j: usize, t: usize, seed: u64) -> SimulatedPanel {
    let graph = AdjacencyGraph::lattice(j);
    let spec = ScenarioSpec::new(Modification::Linear, AreaRegime::Large, j, t, seed);
    let sim = generate_panel(&spec, &synthetic_exposure(j, t, seed), Some(&graph)).unwrap();
    let p = &sim.panel;
    let mut s = String::from("time,area,count,exposure,population,z\n");
    for a in 0..j {
        for k in 0..t {
            s += &format!(
                "{},{},{},{:e},{:e},{:e}\n",
                p.times[k],
                p.area_ids[a],
                p.counts[a * t + k] as u64,
                p.exposure[a][k],
                sim.population[a],
                sim.z[a]
            );
        }
    }
    fs::write(dir.join("panel.csv"), s).unwrap();
    let mut adj = String::from("a,b\n");
    for &(a, b) in &graph.edges {
        adj += &format!("{},{}\n", p.area_ids[a], p.area_ids[b]);
    }
    fs::write(dir.join("adjacency.csv"), adj).unwrap();
    sim
}

/// Every file under `dir` (recursively) with its contents, keyed by relative path.
pub fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.push((rel, strip_timing(&fs::read(&p).unwrap())));
            }
        }
    }
    out.sort();
    out
}

/// Drops wall-clock fields, the only artifacts allowed to differ between runs.
fn strip_timing(bytes: &[u8]) -> Vec<u8> {
    let text = String::from_utf8_lossy(bytes);
    let mut lines = Vec::new();
    let mut time_col = None;
    for line in text.lines() {
        let t = line.trim_start();
        if t.starts_with("\"wall_time_seconds\"") || t.starts_with("\"time\"") {
            continue;
        }
        let cells: Vec<&str> = line.split(',').collect();
        if time_col.is_none() && line.starts_with("name,") {
            time_col = cells.iter().position(|c| *c == "time");
        }
        match time_col {
            Some(c) if cells.len() > c => {
                let kept: Vec<&str> = cells.iter().enumerate().filter(|(i, _)| *i != c).map(|(_, v)| *v).collect();
                lines.push(kept.join(","));
            }
            _ => lines.push(line.to_string()),
        }
    }
    lines.join("\n").into_bytes()
}

pub fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}
