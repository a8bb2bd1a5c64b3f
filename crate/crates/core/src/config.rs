//! Run configuration.
//!
//! Values are layered: built-in defaults, then a TOML file, then environment
//! variables, then command-line flags. Every layer is reduced to `section.key
//! = raw string` pairs and parsed by one routine, so all of them accept the
//! same syntax and every bad entry is reported, not just the first.

use std::collections::BTreeMap;
use std::path::Path;

use log::warn;

use crate::error::{Error, Result};
use crate::lls::{LlsCriterion, ScanOptions, DEFAULT_CANDIDATE_CAP, DEFAULT_MIN_CROSSINGS, DEFAULT_THRESHOLD};
use crate::profile::{canonical_mu_over_n, Boundary, MAX_SITES};
use crate::propagator::{default_t_max, Method, PropagatorConfig, TimeGrid, DEFAULT_DT};
use crate::sector::{FockState, DEFAULT_MAX_DIM};
use crate::spectral::{DEFAULT_DEGENERACY_TOL, DEFAULT_DENSE_LIMIT};
use crate::tli::DEFAULT_COST_TOL;

pub const ENV_PREFIX: &str = "KCCHAIN_";

pub const DEFAULT_MU_GRID: &str = "0.05:0.5:0.025";

/// Every recognised key, in snapshot order.
pub const KEYS: &[&str] = &[
    "model.n",
    "model.mu",
    "model.mu_over_n",
    "model.epsilon",
    "model.min_range",
    "model.boundary",
    "model.ranges",
    "ensemble.realisations",
    "ensemble.realisation_start",
    "ensemble.realisation_index",
    "ensemble.seed",
    "ensemble.workers",
    "time.tmax",
    "time.dt",
    "lls.threshold",
    "lls.min_crossings",
    "lls.candidate_cap",
    "propagator.method",
    "propagator.dense_limit",
    "propagator.krylov_dim",
    "propagator.substep_tol",
    "propagator.max_substeps",
    "propagator.max_dim",
    "tli.cost_tol",
    "levels.degeneracy_tol",
    "levels.central_fraction",
    "levels.resolve_symmetries",
    "defect.site",
    "defect.q",
    "evolve.state",
    "evolve.density",
];

/// A `start:stop:step` sweep (inclusive), a comma list, or a single value.
#[derive(Debug, Clone, PartialEq)]
pub struct MuGrid {
    pub spec: String,
    pub values: Vec<f64>,
}

impl std::str::FromStr for MuGrid {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parse = |x: &str| x.trim().parse::<f64>().map_err(|_| format!("'{x}' is not a number"));
        let values = if s.contains(':') {
            let parts: Vec<&str> = s.split(':').collect();
            if parts.len() != 3 {
                return Err(format!("'{s}' is not start:stop:step"));
            }
            let (a, b, h) = (parse(parts[0])?, parse(parts[1])?, parse(parts[2])?);
            if !(h > 0.0) || b < a {
                return Err(format!("'{s}' needs step > 0 and stop >= start"));
            }
            let count = ((b - a) / h + 1e-9).floor() as usize + 1;
            (0..count).map(|k| canonical_mu_over_n(a + k as f64 * h)).collect()
        } else {
            s.split(',')
                .map(|x| parse(x).map(canonical_mu_over_n))
                .collect::<std::result::Result<Vec<_>, _>>()?
        };
        if values.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(format!("'{s}' contains negative or non-finite values"));
        }
        let mut sorted = values.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        if sorted.len() != values.len() {
            return Err(format!("'{s}' repeats a value"));
        }
        Ok(MuGrid {
            spec: s.to_string(),
            values,
        })
    }
}

/// Initial product state for `evolve` and `defect`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StateSpec {
    Neel,
    Facilitating,
    Bits(FockState),
}

impl StateSpec {
    pub fn state(self, n_sites: usize) -> FockState {
        match self {
            StateSpec::Neel => FockState::neel(n_sites),
            StateSpec::Facilitating => FockState::FACILITATING,
            StateSpec::Bits(s) => s,
        }
    }
}

impl std::str::FromStr for StateSpec {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "neel" | "z2" => Ok(StateSpec::Neel),
            "zero" | "facilitating" => Ok(StateSpec::Facilitating),
            bits => FockState::from_bit_string(bits)
                .map(StateSpec::Bits)
                .map_err(|_| format!("'{bits}' is neither neel, zero nor a bit string")),
        }
    }
}

impl std::fmt::Display for StateSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            StateSpec::Neel => f.write_str("neel"),
            StateSpec::Facilitating => f.write_str("zero"),
            StateSpec::Bits(s) => {
                let width = 64 - s.0.leading_zeros() as usize;
                f.write_str(&s.to_bit_string(width.max(1)))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub n_sites: usize,
    pub mu: Option<f64>,
    pub mu_over_n: MuGrid,
    pub epsilon: u32,
    pub min_range: u32,
    pub boundary: Boundary,
    pub ranges: Option<Vec<u32>>,
    pub realisations: usize,
    pub realisation_start: u64,
    pub realisation_index: u64,
    pub seed: u64,
    pub workers: usize,
    pub t_max: Option<f64>,
    pub dt: f64,
    pub thresholds: Vec<f64>,
    pub min_crossings: usize,
    pub candidate_cap: usize,
    pub method: Method,
    pub dense_limit: usize,
    pub krylov_dim: usize,
    pub substep_tol: f64,
    pub max_substeps: usize,
    pub max_dim: usize,
    pub cost_tol: f64,
    pub degeneracy_tol: f64,
    pub central_fraction: Option<f64>,
    pub resolve_symmetries: bool,
    pub defect_site: Option<usize>,
    pub defect_q: u32,
    pub state: StateSpec,
    pub density: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let prop = PropagatorConfig::default();
        Self {
            n_sites: 12,
            mu: None,
            mu_over_n: DEFAULT_MU_GRID.parse().expect("default grid"),
            epsilon: 1,
            min_range: 1,
            boundary: Boundary::Periodic,
            ranges: None,
            realisations: 100,
            realisation_start: 0,
            realisation_index: 0,
            seed: 0,
            workers: 0,
            t_max: None,
            dt: DEFAULT_DT,
            thresholds: vec![DEFAULT_THRESHOLD],
            min_crossings: DEFAULT_MIN_CROSSINGS,
            candidate_cap: DEFAULT_CANDIDATE_CAP,
            method: Method::Auto,
            dense_limit: DEFAULT_DENSE_LIMIT,
            krylov_dim: prop.krylov_dim,
            substep_tol: prop.substep_tol,
            max_substeps: prop.max_substeps,
            max_dim: DEFAULT_MAX_DIM,
            cost_tol: DEFAULT_COST_TOL,
            degeneracy_tol: DEFAULT_DEGENERACY_TOL,
            central_fraction: None,
            resolve_symmetries: true,
            defect_site: None,
            defect_q: 2,
            state: StateSpec::Neel,
            density: true,
        }
    }
}

fn num<T: std::str::FromStr>(raw: &str) -> std::result::Result<T, String> {
    raw.trim().parse().map_err(|_| format!("cannot parse '{raw}'"))
}

fn optional<T: std::str::FromStr>(raw: &str) -> std::result::Result<Option<T>, String> {
    match raw.trim() {
        "" | "none" => Ok(None),
        s => num(s).map(Some),
    }
}

fn list<T: std::str::FromStr>(raw: &str) -> std::result::Result<Vec<T>, String> {
    raw.split(',').map(num).collect()
}

fn join<T: ToString>(xs: &[T]) -> String {
    xs.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn show<T: ToString>(x: &Option<T>) -> String {
    x.as_ref().map_or_else(|| "none".to_string(), T::to_string)
}

impl RunConfig {
    /// Parses `raw` into the field named by `key`.
    pub fn set(&mut self, key: &str, raw: &str) -> std::result::Result<(), String> {
        match key {
            "model.n" => self.n_sites = num(raw)?,
            "model.mu" => self.mu = optional(raw)?,
            "model.mu_over_n" => self.mu_over_n = raw.parse()?,
            "model.epsilon" => self.epsilon = num(raw)?,
            "model.min_range" => self.min_range = num(raw)?,
            "model.boundary" => self.boundary = raw.parse().map_err(|e: Error| e.to_string())?,
            "model.ranges" => {
                self.ranges = match raw.trim() {
                    "" | "none" => None,
                    s => Some(list(s)?),
                }
            }
            "ensemble.realisations" => self.realisations = num(raw)?,
            "ensemble.realisation_start" => self.realisation_start = num(raw)?,
            "ensemble.realisation_index" => self.realisation_index = num(raw)?,
            "ensemble.seed" => self.seed = num(raw)?,
            "ensemble.workers" => self.workers = num(raw)?,
            "time.tmax" => self.t_max = optional(raw)?,
            "time.dt" => self.dt = num(raw)?,
            "lls.threshold" => self.thresholds = list(raw)?,
            "lls.min_crossings" => self.min_crossings = num(raw)?,
            "lls.candidate_cap" => self.candidate_cap = num(raw)?,
            "propagator.method" => self.method = raw.parse().map_err(|e: Error| e.to_string())?,
            "propagator.dense_limit" => self.dense_limit = num(raw)?,
            "propagator.krylov_dim" => self.krylov_dim = num(raw)?,
            "propagator.substep_tol" => self.substep_tol = num(raw)?,
            "propagator.max_substeps" => self.max_substeps = num(raw)?,
            "propagator.max_dim" => self.max_dim = num(raw)?,
            "tli.cost_tol" => self.cost_tol = num(raw)?,
            "levels.degeneracy_tol" => self.degeneracy_tol = num(raw)?,
            "levels.central_fraction" => self.central_fraction = optional(raw)?,
            "levels.resolve_symmetries" => self.resolve_symmetries = num(raw)?,
            "defect.site" => self.defect_site = optional(raw)?,
            "defect.q" => self.defect_q = num(raw)?,
            "evolve.state" => self.state = raw.parse()?,
            "evolve.density" => self.density = num(raw)?,
            _ => return Err("unknown key".into()),
        }
        Ok(())
    }

    /// The raw value of `key`, in a form `set` accepts back.
    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "model.n" => self.n_sites.to_string(),
            "model.mu" => show(&self.mu),
            "model.mu_over_n" => self.mu_over_n.spec.clone(),
            "model.epsilon" => self.epsilon.to_string(),
            "model.min_range" => self.min_range.to_string(),
            "model.boundary" => self.boundary.to_string(),
            "model.ranges" => self.ranges.as_deref().map_or_else(|| "none".into(), join),
            "ensemble.realisations" => self.realisations.to_string(),
            "ensemble.realisation_start" => self.realisation_start.to_string(),
            "ensemble.realisation_index" => self.realisation_index.to_string(),
            "ensemble.seed" => self.seed.to_string(),
            "ensemble.workers" => self.workers.to_string(),
            "time.tmax" => show(&self.t_max),
            "time.dt" => self.dt.to_string(),
            "lls.threshold" => join(&self.thresholds),
            "lls.min_crossings" => self.min_crossings.to_string(),
            "lls.candidate_cap" => self.candidate_cap.to_string(),
            "propagator.method" => format!("{:?}", self.method).to_lowercase(),
            "propagator.dense_limit" => self.dense_limit.to_string(),
            "propagator.krylov_dim" => self.krylov_dim.to_string(),
            "propagator.substep_tol" => self.substep_tol.to_string(),
            "propagator.max_substeps" => self.max_substeps.to_string(),
            "propagator.max_dim" => self.max_dim.to_string(),
            "tli.cost_tol" => self.cost_tol.to_string(),
            "levels.degeneracy_tol" => self.degeneracy_tol.to_string(),
            "levels.central_fraction" => show(&self.central_fraction),
            "levels.resolve_symmetries" => self.resolve_symmetries.to_string(),
            "defect.site" => show(&self.defect_site),
            "defect.q" => self.defect_q.to_string(),
            "evolve.state" => self.state.to_string(),
            "evolve.density" => self.density.to_string(),
            _ => return None,
        })
    }

    pub fn snapshot(&self) -> BTreeMap<String, String> {
        KEYS.iter()
            .map(|k| (k.to_string(), self.get(k).expect("known key")))
            .collect()
    }

    /// TOML text that reproduces this configuration when loaded.
    pub fn to_toml(&self) -> String {
        let mut out = String::new();
        let mut section = "";
        for key in KEYS {
            let (sec, name) = key.split_once('.').expect("dotted key");
            if sec != section {
                if !section.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{sec}]\n"));
                section = sec;
            }
            let value = toml::Value::String(self.get(key).expect("known key"));
            out.push_str(&format!("{name} = {value}\n"));
        }
        out
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let mut check = |ok: bool, msg: String| {
            if !ok {
                errs.push(msg);
            }
        };
        check(
            (2..=MAX_SITES).contains(&self.n_sites),
            format!("model.n: must lie in 2..={MAX_SITES}, got {}", self.n_sites),
        );
        if let Some(mu) = self.mu {
            check(mu.is_finite() && mu >= 0.0, format!("model.mu: must be >= 0, got {mu}"));
        }
        if let Some(r) = &self.ranges {
            check(
                r.len() == self.n_sites,
                format!("model.ranges: {} entries for {} sites", r.len(), self.n_sites),
            );
        }
        check(self.realisations >= 1, "ensemble.realisations: must be >= 1".into());
        if let Some(t) = self.t_max {
            check(t.is_finite() && t >= 0.0, format!("time.tmax: must be >= 0, got {t}"));
        }
        check(
            self.dt.is_finite() && self.dt > 0.0,
            format!("time.dt: must be > 0, got {}", self.dt),
        );
        check(
            !self.thresholds.is_empty(),
            "lls.threshold: at least one value needed".into(),
        );
        for &t in &self.thresholds {
            check(t > 0.0 && t < 1.0, format!("lls.threshold: {t} is outside (0, 1)"));
        }
        let mut sorted = self.thresholds.clone();
        sorted.sort_by(f64::total_cmp);
        sorted.dedup();
        check(
            sorted.len() == self.thresholds.len(),
            "lls.threshold: repeated value".into(),
        );
        check(self.min_crossings >= 1, "lls.min_crossings: must be >= 1".into());
        check(self.candidate_cap >= 1, "lls.candidate_cap: must be >= 1".into());
        check(self.krylov_dim >= 2, "propagator.krylov_dim: must be >= 2".into());
        check(
            self.substep_tol > 0.0,
            format!("propagator.substep_tol: must be > 0, got {}", self.substep_tol),
        );
        check(self.max_substeps >= 1, "propagator.max_substeps: must be >= 1".into());
        check(self.max_dim >= 1, "propagator.max_dim: must be >= 1".into());
        check(
            self.cost_tol > 0.0,
            format!("tli.cost_tol: must be > 0, got {}", self.cost_tol),
        );
        check(
            self.degeneracy_tol >= 0.0,
            format!("levels.degeneracy_tol: must be >= 0, got {}", self.degeneracy_tol),
        );
        if let Some(f) = self.central_fraction {
            check(
                f > 0.0 && f <= 1.0,
                format!("levels.central_fraction: {f} is outside (0, 1]"),
            );
        }
        if let Some(site) = self.defect_site {
            check(
                site < self.n_sites,
                format!("defect.site: {site} is out of range for {} sites", self.n_sites),
            );
        }
        check(self.defect_q >= 1, "defect.q: must be >= 1".into());
        if let StateSpec::Bits(s) = self.state {
            check(
                self.n_sites >= 64 || s.0 >> self.n_sites == 0,
                format!("evolve.state: more bits than {} sites", self.n_sites),
            );
        }
        errs
    }

    pub fn t_max(&self) -> f64 {
        self.t_max.unwrap_or_else(|| default_t_max(self.n_sites))
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.t_max(), self.dt)
    }

    pub fn criteria(&self) -> Result<Vec<LlsCriterion>> {
        self.thresholds
            .iter()
            .map(|&t| LlsCriterion::new(t, self.min_crossings))
            .collect()
    }

    pub fn propagator(&self) -> PropagatorConfig {
        PropagatorConfig {
            dense_limit: self.dense_limit,
            krylov_dim: self.krylov_dim,
            substep_tol: self.substep_tol,
            max_substeps: self.max_substeps,
        }
    }

    pub fn scan_options(&self) -> ScanOptions {
        ScanOptions {
            candidate_cap: self.candidate_cap,
            sample_seed: 0,
            propagator: self.propagator(),
        }
    }

    pub fn defect_site(&self) -> usize {
        self.defect_site.unwrap_or(self.n_sites / 2)
    }
}

pub fn env_name(key: &str) -> String {
    format!("{ENV_PREFIX}{}", key.replace('.', "_").to_uppercase())
}

fn toml_raw(value: &toml::Value) -> std::result::Result<String, String> {
    Ok(match value {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(xs) => xs
            .iter()
            .map(toml_raw)
            .collect::<std::result::Result<Vec<_>, _>>()?
            .join(","),
        other => return Err(format!("unsupported value {other}")),
    })
}

/// `section.key = raw` pairs from a TOML document; unknown keys and
/// malformed entries are appended to `errs`.
pub fn file_entries(text: &str, origin: &str, errs: &mut Vec<String>) -> Vec<(String, String)> {
    let table: toml::Table = match text.parse() {
        Ok(t) => t,
        Err(e) => {
            errs.push(format!("{origin}: {e}"));
            return Vec::new();
        }
    };
    let mut out = Vec::new();
    for (section, body) in &table {
        let Some(body) = body.as_table() else {
            errs.push(format!("{origin}: '{section}' must be a section"));
            continue;
        };
        for (name, value) in body {
            let key = format!("{section}.{name}");
            if !KEYS.contains(&key.as_str()) {
                errs.push(format!("{origin}: unknown key '{key}'"));
                continue;
            }
            match toml_raw(value) {
                Ok(raw) => out.push((key, raw)),
                Err(e) => errs.push(format!("{origin}: {key}: {e}")),
            }
        }
    }
    out
}

/// A fully resolved configuration and where each non-default value came from.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub origins: BTreeMap<String, String>,
    pub conflicts: Vec<String>,
}

/// Layers file, environment and flag entries over the defaults.
pub fn resolve(file: Option<&Path>, env: &[(String, String)], flags: &[(String, String)]) -> Result<Resolved> {
    let mut errs = Vec::new();
    let mut layers: Vec<(String, Vec<(String, String)>)> = Vec::new();
    if let Some(path) = file {
        let origin = path.display().to_string();
        match std::fs::read_to_string(path) {
            Ok(text) => {
                let entries = file_entries(&text, &origin, &mut errs);
                layers.push((format!("file {origin}"), entries));
            }
            Err(e) => errs.push(format!("{origin}: {e}")),
        }
    }
    let by_env: BTreeMap<String, &str> = KEYS.iter().map(|k| (env_name(k), *k)).collect();
    let mut env_entries = Vec::new();
    for (name, value) in env {
        if !name.starts_with(ENV_PREFIX) {
            continue;
        }
        match by_env.get(name) {
            Some(key) => env_entries.push((key.to_string(), value.clone())),
            None => errs.push(format!("environment: unknown variable {name}")),
        }
    }
    layers.push(("environment".into(), env_entries));
    layers.push(("flag".into(), flags.to_vec()));

    let mut config = RunConfig::default();
    let mut origins: BTreeMap<String, String> = BTreeMap::new();
    let mut values: BTreeMap<String, String> = BTreeMap::new();
    let mut conflicts = Vec::new();
    for (origin, entries) in &layers {
        for (key, raw) in entries {
            if let Err(e) = config.set(key, raw) {
                errs.push(format!("{origin}: {key} = '{raw}': {e}"));
                continue;
            }
            if let (Some(prev), Some(prev_origin)) = (values.get(key), origins.get(key)) {
                if prev != raw && prev_origin != origin {
                    let msg = format!("{key}: {origin} value '{raw}' overrides {prev_origin} value '{prev}'");
                    warn!("{msg}");
                    conflicts.push(msg);
                }
            }
            values.insert(key.clone(), raw.clone());
            origins.insert(key.clone(), origin.clone());
        }
    }
    errs.extend(config.validate());
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    Ok(Resolved {
        config,
        origins,
        conflicts,
    })
}
