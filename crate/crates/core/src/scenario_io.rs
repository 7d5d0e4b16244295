//! Scenario files and result bundles.
//!
//! Scenarios are JSON documents validated by hand so that every error names the JSON
//! path at fault. Results are a directory of CSV files plus `summary.json` and a
//! `manifest.json` with SHA-256 digests of every other file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};

use crate::chance::{Budget, ChanceSpec, HalfSpace, KnotWindow, Obstacle, Route};
use crate::dynamics::{mat, LtvSystem, TimeGrid};
use crate::error::{Error, Result};
use crate::gaussmix::{Gaussian, GaussianMixture};
use crate::linalg::{from_lower_triangle, lower_triangle, Mat, Vector};
use crate::meanfield::{MfsbResult, Scenario};
use crate::mixture::MixtureSolution;
use crate::ocs::ConditionalPolicy;
use crate::sim::{predicted_violation, write_trajectories_csv, SwarmRun};
use crate::transport::{CostTensor, TransportPlan, WEIGHT_SUM_TOLERANCE};

/// A JSON value together with its path, for error messages.
#[derive(Clone, Copy)]
struct Node<'a> {
    value: &'a Value,
    path: &'a str,
}

fn schema(path: &str, message: impl Into<String>) -> Error {
    Error::schema(path, message)
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

impl<'a> Node<'a> {
    fn object(&self) -> Result<&'a Map<String, Value>> {
        self.value
            .as_object()
            .ok_or_else(|| schema(self.path, "expected an object"))
    }

    fn get(&self, key: &str) -> Result<Option<&'a Value>> {
        Ok(self.object()?.get(key).filter(|v| !v.is_null()))
    }

    fn f64(&self) -> Result<f64> {
        self.value
            .as_f64()
            .filter(|v| v.is_finite())
            .ok_or_else(|| schema(self.path, "expected a finite number"))
    }

    fn usize(&self) -> Result<usize> {
        self.value
            .as_u64()
            .map(|v| v as usize)
            .ok_or_else(|| schema(self.path, "expected a non-negative integer"))
    }

    fn array(&self) -> Result<&'a Vec<Value>> {
        self.value
            .as_array()
            .ok_or_else(|| schema(self.path, "expected an array"))
    }

    fn numbers(&self) -> Result<Vec<f64>> {
        self.array()?
            .iter()
            .enumerate()
            .map(|(i, v)| {
                v.as_f64()
                    .filter(|x| x.is_finite())
                    .ok_or_else(|| schema(&format!("{}[{i}]", self.path), "expected a finite number"))
            })
            .collect()
    }
}

/// Calls `f` on a required child.
fn field<T>(node: Node<'_>, key: &str, f: impl FnOnce(Node<'_>) -> Result<T>) -> Result<T> {
    let path = join(node.path, key);
    let value = node.get(key)?.ok_or_else(|| schema(&path, "missing required field"))?;
    f(Node { value, path: &path })
}

/// Calls `f` on an optional child.
fn optional<T>(node: Node<'_>, key: &str, f: impl FnOnce(Node<'_>) -> Result<T>) -> Result<Option<T>> {
    let path = join(node.path, key);
    match node.get(key)? {
        None => Ok(None),
        Some(value) => f(Node { value, path: &path }).map(Some),
    }
}

/// Calls `f` on every element of an array.
fn elements<T>(node: Node<'_>, mut f: impl FnMut(usize, Node<'_>) -> Result<T>) -> Result<Vec<T>> {
    node.array()?
        .iter()
        .enumerate()
        .map(|(i, value)| {
            let path = format!("{}[{i}]", node.path);
            f(i, Node { value, path: &path })
        })
        .collect()
}

/// A constant row-major matrix or a list with one per knot.
fn matrices(node: Node<'_>, rows: usize, cols: usize, knots: usize) -> Result<Vec<Mat>> {
    let arr = node.array()?;
    let per_knot = arr.first().is_some_and(Value::is_array);
    let one = |n: Node<'_>| -> Result<Mat> {
        let v = n.numbers()?;
        if v.len() != rows * cols {
            return Err(schema(n.path, format!("expected {rows}x{cols} = {} entries, got {}", rows * cols, v.len())));
        }
        Ok(mat(rows, cols, &v))
    };
    if per_knot {
        let list = elements(node, |_, n| one(n))?;
        if list.len() != knots {
            return Err(schema(node.path, format!("expected {knots} per-knot matrices, got {}", list.len())));
        }
        Ok(list)
    } else {
        Ok(vec![one(node)?; knots])
    }
}

fn mixture(node: Node<'_>, n: usize) -> Result<GaussianMixture> {
    let parts = elements(node, |i, c| {
        let weight = field(c, "weight", |w| w.f64())?;
        let mean = field(c, "mean", |m| m.numbers())?;
        if mean.len() != n {
            return Err(schema(&format!("{}.mean", c.path), format!("expected {n} entries, got {}", mean.len())));
        }
        let tri = field(c, "cov_lower_triangle", |m| m.numbers())?;
        let cov = from_lower_triangle(n, &tri)
            .map_err(|e| schema(&format!("{}.cov_lower_triangle", c.path), e.to_string()))?;
        let g = Gaussian::new(Vector::from_vec(mean), cov)
            .map_err(|e| schema(c.path, format!("component {i}: {e}")))?;
        if crate::linalg::min_eigenvalue(g.cov()) <= 0.0 {
            return Err(schema(c.path, format!("component {i}: covariance is not positive definite")));
        }
        Ok((weight, g))
    })?;
    if parts.is_empty() {
        return Err(schema(node.path, "mixture needs at least one component"));
    }
    let total: f64 = parts.iter().map(|p| p.0).sum();
    if (total - 1.0).abs() > WEIGHT_SUM_TOLERANCE {
        return Err(schema(node.path, format!("weights sum to {total}, expected 1")));
    }
    let (weights, comps): (Vec<f64>, Vec<Gaussian>) = parts.into_iter().map(|(w, g)| (w / total, g)).unzip();
    GaussianMixture::new(weights, comps).map_err(|e| schema(node.path, e.to_string()))
}

/// Parses a scenario document. `knots` overrides `grid.knots`.
pub fn scenario_from_json(value: &Value, knots: Option<usize>) -> Result<Scenario> {
    let root = Node { value, path: "" };
    root.object()?;
    let knots = match knots {
        Some(k) => k,
        None => field(root, "grid", |g| field(g, "knots", |k| k.usize()))?,
    };
    let grid = TimeGrid::uniform(knots).map_err(|e| schema("grid.knots", e.to_string()))?;
    let sys = field(root, "system", |s| {
        let n = field(s, "n", |v| v.usize())?;
        let m = field(s, "m", |v| v.usize())?;
        let q = field(s, "q", |v| v.usize())?;
        let a = field(s, "A", |v| matrices(v, n, n, knots))?;
        let abar = optional(s, "Abar", |v| matrices(v, n, n, knots))?.unwrap_or_else(|| vec![Mat::zeros(n, n); knots]);
        let b = field(s, "B", |v| matrices(v, n, m, knots))?;
        let d = field(s, "D", |v| matrices(v, n, q, knots))?;
        LtvSystem::new(a, abar, b, d).map_err(|e| schema(s.path, e.to_string()))
    })?;
    let n = sys.n();
    let rho0 = field(root, "rho0", |v| mixture(v, n))?;
    let rho1 = field(root, "rho1", |v| mixture(v, n))?;

    let chance = optional(root, "chance", |c| {
        let total = optional(c, "total_budget", |v| v.f64())?;
        let per_face = optional(c, "per_face_budget", |v| v.f64())?;
        let budget = match (total, per_face) {
            (Some(d), None) => Budget::Total(d),
            (None, Some(d)) => Budget::PerFace(d),
            _ => return Err(schema(c.path, "give exactly one of total_budget and per_face_budget")),
        };
        let window = optional(c, "knot_window", |w| {
            let ks = elements(w, |_, k| k.usize())?;
            match ks[..] {
                [k0, k1] => KnotWindow::from_knots(&grid, k0, k1).map_err(|e| schema(w.path, e.to_string())),
                _ => Err(schema(w.path, "expected [first, last]")),
            }
        })?
        .unwrap_or_default();
        let spec = ChanceSpec { budget, window };
        spec.validate().map_err(|e| schema(c.path, e.to_string()))?;
        Ok(spec)
    })?;
    let window = chance.map(|c| c.window).unwrap_or_default();
    let obstacles = optional(root, "obstacles", |o| {
        elements(o, |_, obs| {
            let faces = field(obs, "faces", |f| {
                elements(f, |_, face| {
                    let a = field(face, "a", |v| v.numbers())?;
                    if a.len() != n {
                        return Err(schema(&format!("{}.a", face.path), format!("expected {n} entries")));
                    }
                    let beta = field(face, "beta", |v| v.f64())?;
                    HalfSpace::new(Vector::from_vec(a), beta, window).map_err(|e| schema(face.path, e.to_string()))
                })
            })?;
            Obstacle::new(faces).map_err(|e| schema(obs.path, e.to_string()))
        })
    })?
    .unwrap_or_default();
    let routes = optional(root, "routes", |r| {
        elements(r, |i, route| {
            let name = optional(route, "name", |v| {
                v.value.as_str().map(str::to_string).ok_or_else(|| schema(v.path, "expected a string"))
            })?
            .unwrap_or_else(|| format!("route{i}"));
            let face_choice = field(route, "face_choice", |f| elements(f, |_, k| k.usize()))?;
            Ok(Route { name, face_choice })
        })
    })?
    .filter(|r| !r.is_empty())
    .unwrap_or_else(|| vec![Route::direct()]);

    let scn = Scenario {
        sys,
        grid,
        rho0,
        rho1,
        obstacles,
        routes,
        chance,
    };
    scn.validate()?;
    Ok(scn)
}

pub fn parse_scenario_str(text: &str, knots: Option<usize>) -> Result<Scenario> {
    let value: Value = serde_json::from_str(text).map_err(|e| schema("", format!("invalid JSON: {e}")))?;
    scenario_from_json(&value, knots)
}

pub fn parse_scenario(path: impl AsRef<Path>, knots: Option<usize>) -> Result<Scenario> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scenario_str(&text, knots)
}

fn row_major(m: &Mat) -> Vec<f64> {
    (0..m.nrows()).flat_map(|i| (0..m.ncols()).map(move |j| m[(i, j)])).collect()
}

fn matrices_json(grid: &TimeGrid, f: impl Fn(usize) -> Mat) -> Value {
    let all: Vec<Vec<f64>> = (0..grid.len()).map(|k| row_major(&f(k))).collect();
    if all.iter().all(|m| *m == all[0]) {
        json!(all[0])
    } else {
        json!(all)
    }
}

fn mixture_json(rho: &GaussianMixture) -> Value {
    Value::Array(
        rho.weights()
            .iter()
            .zip(rho.components())
            .map(|(w, g)| {
                json!({
                    "weight": w,
                    "mean": g.mean().as_slice(),
                    "cov_lower_triangle": lower_triangle(g.cov()),
                })
            })
            .collect(),
    )
}

/// Serializes a scenario in the same format `scenario_from_json` reads.
pub fn scenario_to_json(scn: &Scenario) -> Value {
    let sys = &scn.sys;
    let grid = &scn.grid;
    let mut root = json!({
        "grid": { "knots": grid.len() },
        "system": {
            "n": sys.n(), "m": sys.m(), "q": sys.q(),
            "A": matrices_json(grid, |k| sys.a(k).clone()),
            "Abar": matrices_json(grid, |k| sys.abar(k).clone()),
            "B": matrices_json(grid, |k| sys.b(k).clone()),
            "D": matrices_json(grid, |k| sys.d(k).clone()),
        },
        "rho0": mixture_json(&scn.rho0),
        "rho1": mixture_json(&scn.rho1),
    });
    let obj = root.as_object_mut().expect("object literal");
    if !scn.obstacles.is_empty() {
        let obstacles: Vec<Value> = scn
            .obstacles
            .iter()
            .map(|o| {
                let faces: Vec<Value> = o
                    .faces()
                    .iter()
                    .map(|h| json!({ "a": h.normal().as_slice(), "beta": h.offset() }))
                    .collect();
                json!({ "faces": faces })
            })
            .collect();
        obj.insert("obstacles".into(), Value::Array(obstacles));
        let routes: Vec<Value> = scn
            .routes
            .iter()
            .map(|r| json!({ "name": r.name, "face_choice": r.face_choice }))
            .collect();
        obj.insert("routes".into(), Value::Array(routes));
    }
    if let Some(spec) = scn.chance {
        let mut c = Map::new();
        match spec.budget {
            Budget::Total(d) => c.insert("total_budget".into(), json!(d)),
            Budget::PerFace(d) => c.insert("per_face_budget".into(), json!(d)),
        };
        let ks: Vec<usize> = spec.window.knots(grid).collect();
        if spec.window != KnotWindow::all() {
            if let (Some(first), Some(last)) = (ks.first(), ks.last()) {
                c.insert("knot_window".into(), json!([first, last]));
            }
        }
        obj.insert("chance".into(), Value::Object(c));
    }
    root
}

pub fn write_scenario(scn: &Scenario, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(&scenario_to_json(scn)).expect("JSON values serialize");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSummary {
    pub agents: usize,
    pub seed: u64,
    pub total_cost: f64,
    pub total_cost_std_error: f64,
    pub max_violation: f64,
    pub max_violation_std_error: f64,
    pub bound_holds: bool,
    pub terminal_mean_error: Vec<f64>,
    pub terminal_frequency: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GapSummary {
    pub samples: usize,
    pub seed: u64,
    pub gap: f64,
    pub std_error: f64,
    pub mixture_cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub status: String,
    pub cost_upper_bound: f64,
    pub knots: usize,
    pub iterations: usize,
    pub active_pairs: usize,
    /// Worst per-knot violation bound implied by the flow's Gaussian tails.
    pub predicted_max_violation: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulation: Option<SimulationSummary>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap: Option<GapSummary>,
    /// Wall-clock seconds per phase; only present when requested, since it breaks
    /// byte-identical reruns.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timings: Option<BTreeMap<String, f64>>,
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> std::io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).and_then(|_| w.flush()).map_err(|e| Error::io(path, e))
}

fn policy_file(i: usize, j: usize, r: usize) -> String {
    format!("policies/pair_{i}_{j}_{r}.csv")
}

/// Writes the solution part of a bundle and the manifest.
pub fn write_results(
    out: impl AsRef<Path>,
    scn: &Scenario,
    result: &MfsbResult,
    timings: Option<BTreeMap<String, f64>>,
) -> Result<Manifest> {
    let out = out.as_ref();
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let sol = &result.solution;
    let grid = sol.grid();
    write_scenario(scn, out.join("scenario.json"))?;
    write_with(&out.join("plan.csv"), |w| sol.plan().write_csv(w))?;
    for e in sol.plan().entries() {
        if let Some(p) = sol.policy(e.i, e.j, e.route) {
            write_with(&out.join(policy_file(e.i, e.j, e.route)), |w| p.write_csv(grid, w))?;
        }
    }
    for k in 0..grid.len() {
        write_with(&out.join(format!("flow/knot_{k:04}.csv")), |w| sol.write_flow_csv(k, w))?;
    }
    let n = scn.sys.n();
    write_with(&out.join("meanfield.csv"), |w| {
        let mut header = vec!["t".to_string()];
        header.extend((0..n).map(|i| format!("xbar{i}")));
        writeln!(w, "{}", header.join(","))?;
        for (k, x) in sol.meanfield().iter().enumerate() {
            let cells: Vec<String> = std::iter::once(grid.time(k)).chain(x.iter().copied()).map(|v| format!("{v:.17e}")).collect();
            writeln!(w, "{}", cells.join(","))?;
        }
        Ok(())
    })?;
    write_with(&out.join("iterations.csv"), |w| {
        writeln!(w, "iteration,bound,relative_change,plan_changed")?;
        for r in &result.iterations {
            writeln!(w, "{},{:.17e},{:.17e},{}", r.iteration, r.bound, r.relative_change, r.plan_changed)?;
        }
        Ok(())
    })?;
    let predicted = predicted_violation(scn, sol)?;
    let summary = Summary {
        status: result.status.to_string(),
        cost_upper_bound: sol.bound(),
        knots: grid.len(),
        iterations: result.iterations.len().saturating_sub(1),
        active_pairs: sol.active_count(),
        predicted_max_violation: predicted.iter().copied().fold(0.0, f64::max),
        simulation: None,
        gap: None,
        timings,
    };
    write_summary(out, &summary)?;
    write_manifest(out)
}

pub fn write_summary(out: &Path, summary: &Summary) -> Result<()> {
    let text = serde_json::to_string_pretty(summary).expect("summary serializes");
    let path = out.join("summary.json");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_summary(out: &Path) -> Result<Summary> {
    let path = out.join("summary.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| schema("summary.json", e.to_string()))
}

/// Writes `trajectories.csv` with every `thin`-th agent.
pub fn write_trajectories(out: &Path, run: &SwarmRun, scn: &Scenario, thin: usize) -> Result<()> {
    write_with(&out.join("trajectories.csv"), |w| write_trajectories_csv(run, scn, thin, w))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub files: Vec<ManifestEntry>,
}

fn collect_files(root: &Path, dir: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            collect_files(root, &path, out)?;
        } else if path != root.join("manifest.json") {
            out.push(path);
        }
    }
    Ok(())
}

/// Digests every file in the bundle except the manifest itself and writes `manifest.json`.
pub fn write_manifest(out: &Path) -> Result<Manifest> {
    let mut files = Vec::new();
    collect_files(out, out, &mut files)?;
    let mut entries: Vec<ManifestEntry> = files
        .iter()
        .map(|p| {
            let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
            let digest = Sha256::digest(&bytes);
            let mut hex = String::with_capacity(64);
            for b in digest.iter() {
                write!(hex, "{b:02x}").expect("writing to a String");
            }
            let rel = p.strip_prefix(out).expect("inside bundle").to_string_lossy().replace('\\', "/");
            Ok(ManifestEntry { path: rel, sha256: hex })
        })
        .collect::<Result<_>>()?;
    entries.sort_by(|a, b| a.path.cmp(&b.path));
    let manifest = Manifest { files: entries };
    let path = out.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

fn read_csv(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect())
}

fn number(path: &Path, cell: &str) -> Result<f64> {
    cell.trim()
        .parse()
        .map_err(|_| Error::Input(format!("{}: `{cell}` is not a number", path.display())))
}

fn read_policy(path: &Path, n: usize, m: usize, dt: f64) -> Result<ConditionalPolicy> {
    let rows = read_csv(path)?;
    let width = 1 + m * n + m + n + n * (n + 1) / 2;
    let (mut gains, mut ff, mut means, mut covs) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for row in rows {
        if row.len() != width {
            return Err(Error::Input(format!("{}: expected {width} columns, got {}", path.display(), row.len())));
        }
        let v: Vec<f64> = row.iter().map(|c| number(path, c)).collect::<Result<_>>()?;
        let mut at = 1;
        let mut take = |len: usize| {
            let s = v[at..at + len].to_vec();
            at += len;
            s
        };
        gains.push(mat(m, n, &take(m * n)));
        ff.push(Vector::from_vec(take(m)));
        means.push(Vector::from_vec(take(n)));
        covs.push(from_lower_triangle(n, &take(n * (n + 1) / 2))?);
    }
    Ok(ConditionalPolicy::new(gains, ff, means, covs, dt))
}

/// A bundle read back from disk.
#[derive(Debug, Clone)]
pub struct LoadedBundle {
    pub scenario: Scenario,
    pub solution: MixtureSolution,
    pub summary: Summary,
}

/// Reads a bundle written by [`write_results`].
pub fn read_results(out: impl AsRef<Path>) -> Result<LoadedBundle> {
    let out = out.as_ref();
    let scenario = parse_scenario(out.join("scenario.json"), None)?;
    let summary = read_summary(out)?;
    let (n0, n1, routes) = (scenario.rho0.len(), scenario.rho1.len(), scenario.routes.len());
    let plan_path = out.join("plan.csv");
    let mut lambda = vec![0.0; n0 * n1 * routes];
    let mut costs = vec![0.0; n0 * n1 * routes];
    for row in read_csv(&plan_path)? {
        let idx: Vec<usize> = row[..3]
            .iter()
            .map(|c| c.parse().map_err(|_| Error::Input(format!("{}: bad index `{c}`", plan_path.display()))))
            .collect::<Result<_>>()?;
        let a = (idx[0] * n1 + idx[1]) * routes + idx[2];
        if idx[0] >= n0 || idx[1] >= n1 || idx[2] >= routes {
            return Err(Error::Input(format!("{}: index out of range", plan_path.display())));
        }
        lambda[a] = number(&plan_path, &row[3])?;
        costs[a] = number(&plan_path, &row[4])?;
    }
    let dt = scenario.grid.dt();
    let (n, m) = (scenario.sys.n(), scenario.sys.m());
    let mut policies = Vec::with_capacity(lambda.len());
    for i in 0..n0 {
        for j in 0..n1 {
            for r in 0..routes {
                let path = out.join(policy_file(i, j, r));
                policies.push(if path.exists() { Some(read_policy(&path, n, m, dt)?) } else { None });
            }
        }
    }
    let tensor = CostTensor::new(n0, n1, routes, costs)?;
    let plan = TransportPlan::from_lambda(&tensor, scenario.rho0.weights(), scenario.rho1.weights(), lambda)?;
    let mf_path = out.join("meanfield.csv");
    let meanfield: Vec<Vector> = read_csv(&mf_path)?
        .iter()
        .map(|row| row[1..].iter().map(|c| number(&mf_path, c)).collect::<Result<Vec<_>>>().map(Vector::from_vec))
        .collect::<Result<_>>()?;
    let solution = MixtureSolution::new(scenario.grid.clone(), plan, policies, Some(meanfield))?;
    Ok(LoadedBundle {
        scenario,
        solution,
        summary,
    })
}
