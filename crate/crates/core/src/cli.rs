//! The `kcchain` command line.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::{Deserialize, Serialize};

use crate::config::{resolve, RunConfig};
use crate::ensemble::{
    aggregate_levels, aggregate_lls, aggregate_mc, level_outcomes, lls_outcomes, mc_outcomes, LevelOptions,
    LevelOutcome, LlsOutcome, McOutcome, SweepSpec, Task,
};
use crate::error::{Error, Result};
use crate::lls::{scan_sector_multi, LlsCriterion};
use crate::output::{read_table, unix_now, write_raw, write_table, Metadata, RunManifest, SeedEntry};
use crate::profile::{point_seed, sample_constraints, ConstraintProfile, DefectSpec, EnsembleParams};
use crate::propagator::{fock_vector, return_probability, site_density, DensityProfile, ReturnSeries};
use crate::sector::SparseHamiltonian;
use crate::selftest::run_selftest;
use crate::spectral::{diagonalize, overlaps};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;
pub const EXIT_SELFTEST: i32 = 3;

/// Oscillation window for the lightcone table, about one revival period.
pub const CONTRAST_WINDOW: f64 = 5.0;
pub const LIGHTCONE_HORIZON: f64 = 10.0;

#[derive(Parser, Debug)]
#[command(
    name = "kcchain",
    version,
    about = "Randomly constrained spin chains: sectors, dynamics, long-lived states"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    opts: Opts,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Return probability and site densities of one product state.
    Evolve,
    /// Classify every state of one realisation.
    Scan,
    /// LLS probability and density across a mu/N sweep.
    Ensemble,
    /// Minimal Krylov order of the long-lived states across a mu/N sweep.
    Tli,
    /// PXP chain with one modified constraint range.
    Defect,
    /// Mean level-spacing ratio across a mu/N sweep.
    Levels,
    /// Combine per-realisation tables from split runs.
    Merge {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Check the analytic oracles.
    Selftest,
}

#[derive(Args, Debug, Default)]
struct Opts {
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[arg(long, global = true)]
    n: Option<String>,
    #[arg(long, global = true)]
    mu: Option<String>,
    /// start:stop:step, a comma list, or one value.
    #[arg(long, global = true)]
    mu_over_n: Option<String>,
    #[arg(long, global = true)]
    epsilon: Option<String>,
    #[arg(long, global = true)]
    min_range: Option<String>,
    #[arg(long, global = true)]
    boundary: Option<String>,
    /// Explicit comma-separated ranges for evolve and scan.
    #[arg(long, global = true)]
    ranges: Option<String>,
    #[arg(long, global = true)]
    realisations: Option<String>,
    #[arg(long, global = true)]
    realisation_start: Option<String>,
    #[arg(long, global = true)]
    realisation_index: Option<String>,
    #[arg(long, global = true)]
    seed: Option<String>,
    #[arg(long, global = true)]
    workers: Option<String>,
    #[arg(long, global = true)]
    tmax: Option<String>,
    #[arg(long, global = true)]
    dt: Option<String>,
    /// One threshold or a comma list; the evolution is shared between them.
    #[arg(long, global = true)]
    threshold: Option<String>,
    #[arg(long, global = true)]
    min_crossings: Option<String>,
    #[arg(long, global = true)]
    cost_tol: Option<String>,
    #[arg(long, global = true)]
    candidate_cap: Option<String>,
    #[arg(long, global = true)]
    dense_limit: Option<String>,
    #[arg(long, global = true)]
    method: Option<String>,
    #[arg(long, global = true)]
    site: Option<String>,
    #[arg(long, global = true)]
    q: Option<String>,
    /// neel, zero, or a bit string with site 0 first.
    #[arg(long, global = true)]
    state: Option<String>,
}

impl Opts {
    fn entries(&self) -> Vec<(String, String)> {
        let pairs: [(&str, &Option<String>); 23] = [
            ("model.n", &self.n),
            ("model.mu", &self.mu),
            ("model.mu_over_n", &self.mu_over_n),
            ("model.epsilon", &self.epsilon),
            ("model.min_range", &self.min_range),
            ("model.boundary", &self.boundary),
            ("model.ranges", &self.ranges),
            ("ensemble.realisations", &self.realisations),
            ("ensemble.realisation_start", &self.realisation_start),
            ("ensemble.realisation_index", &self.realisation_index),
            ("ensemble.seed", &self.seed),
            ("ensemble.workers", &self.workers),
            ("time.tmax", &self.tmax),
            ("time.dt", &self.dt),
            ("lls.threshold", &self.threshold),
            ("lls.min_crossings", &self.min_crossings),
            ("lls.candidate_cap", &self.candidate_cap),
            ("propagator.dense_limit", &self.dense_limit),
            ("propagator.method", &self.method),
            ("tli.cost_tol", &self.cost_tol),
            ("defect.site", &self.site),
            ("defect.q", &self.q),
            ("evolve.state", &self.state),
        ];
        pairs
            .into_iter()
            .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
            .collect()
    }
}

/// Runs the CLI with the process environment.
pub fn main_with_args<I: IntoIterator<Item = OsString>>(args: I) -> i32 {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let env: Vec<(String, String)> = std::env::vars().collect();
    run(args, &env)
}

/// Runs the CLI with an explicit environment, for embedding and tests.
pub fn run<I: IntoIterator<Item = OsString>>(args: I, env: &[(String, String)]) -> i32 {
    let args: Vec<OsString> = args.into_iter().collect();
    let cli = match Cli::try_parse_from(&args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let command_line: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    match execute(&cli, command_line, env) {
        Ok(code) => code,
        Err(e @ Error::Config(_)) => {
            eprintln!("kcchain: {e}");
            EXIT_CONFIG
        }
        Err(e) => {
            eprintln!("kcchain: {e}");
            EXIT_RUNTIME
        }
    }
}

fn execute(cli: &Cli, command_line: Vec<String>, env: &[(String, String)]) -> Result<i32> {
    let resolved = resolve(cli.opts.config.as_deref(), env, &cli.opts.entries())?;
    let cfg = resolved.config;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
    if let Command::Selftest = cli.command {
        return Ok(pool.install(selftest));
    }
    let out = &cli.opts.out;
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest {
        command_line,
        subcommand: subcommand_name(&cli.command).into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config: cfg.snapshot(),
        config_origins: resolved.origins,
        master_seed: cfg.seed,
        seeds: Vec::new(),
        realisation_indices: None,
        profile: None,
        inputs: Vec::new(),
        started_unix: unix_now(),
        finished_unix: 0,
        outputs: BTreeMap::new(),
    };
    let files = pool.install(|| match &cli.command {
        Command::Evolve => evolve(&cfg, out, &mut manifest),
        Command::Scan => scan(&cfg, out, &mut manifest),
        Command::Ensemble => ensemble(&cfg, out, &mut manifest),
        Command::Tli => tli(&cfg, out, &mut manifest),
        Command::Defect => defect(&cfg, out, &mut manifest),
        Command::Levels => levels(&cfg, out, &mut manifest),
        Command::Merge { inputs } => merge(inputs, out, &mut manifest),
        Command::Selftest => unreachable!(),
    })?;
    let config_path = out.join("config.toml");
    std::fs::write(&config_path, cfg.to_toml())?;
    let path = manifest.finish(out, &files)?;
    info!("wrote {}", path.display());
    Ok(EXIT_OK)
}

fn subcommand_name(c: &Command) -> &'static str {
    match c {
        Command::Evolve => "evolve",
        Command::Scan => "scan",
        Command::Ensemble => "ensemble",
        Command::Tli => "tli",
        Command::Defect => "defect",
        Command::Levels => "levels",
        Command::Merge { .. } => "merge",
        Command::Selftest => "selftest",
    }
}

fn selftest() -> i32 {
    let checks = run_selftest();
    for c in &checks {
        println!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
    }
    if checks.iter().all(|c| c.passed) {
        EXIT_OK
    } else {
        EXIT_SELFTEST
    }
}

fn meta(pairs: &[(&str, String)]) -> Metadata {
    pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
}

/// Profile for single-realisation commands: explicit ranges, a draw at
/// `model.mu`, or PXP when neither is given.
fn single_profile(cfg: &RunConfig) -> Result<ConstraintProfile> {
    if let Some(r) = &cfg.ranges {
        return ConstraintProfile::from_ranges(r.clone(), cfg.boundary);
    }
    match cfg.mu {
        Some(mu) => {
            let params = EnsembleParams {
                n_sites: cfg.n_sites,
                mu,
                epsilon: cfg.epsilon,
                min_range: cfg.min_range,
                boundary: cfg.boundary,
            };
            sample_constraints(&params, cfg.seed, cfg.realisation_index)
        }
        None => ConstraintProfile::pxp(cfg.n_sites, cfg.boundary),
    }
}

fn profile_meta(p: &ConstraintProfile) -> Vec<(&'static str, String)> {
    vec![
        ("N", p.n_sites.to_string()),
        ("boundary", p.boundary.to_string()),
        (
            "ranges",
            p.ranges.iter().map(u32::to_string).collect::<Vec<_>>().join(" "),
        ),
    ]
}

fn write_series(path: &Path, meta: &Metadata, s: &ReturnSeries) -> Result<()> {
    #[derive(Serialize)]
    struct Row {
        t: f64,
        #[serde(rename = "L")]
        l: f64,
    }
    let rows: Vec<Row> = s
        .values
        .iter()
        .enumerate()
        .map(|(k, &l)| Row { t: s.grid.time(k), l })
        .collect();
    write_table(path, meta, &rows)
}

fn write_density(path: &Path, meta: &Metadata, d: &DensityProfile) -> Result<()> {
    let n = d.occupation.first().map_or(0, Vec::len);
    let mut header = vec!["t".to_string()];
    header.extend((0..n).map(|i| format!("n_{i}")));
    let rows: Vec<Vec<String>> = d
        .occupation
        .iter()
        .enumerate()
        .map(|(k, row)| {
            std::iter::once(d.grid.time(k).to_string())
                .chain(row.iter().map(f64::to_string))
                .collect()
        })
        .collect();
    write_raw(path, meta, &header, &rows)
}

fn evolve(cfg: &RunConfig, out: &Path, manifest: &mut RunManifest) -> Result<Vec<PathBuf>> {
    let profile = single_profile(cfg)?;
    let h = SparseHamiltonian::from_profile(&profile, cfg.max_dim)?;
    let state = cfg.state.state(cfg.n_sites);
    let grid = cfg.grid()?;
    let prop = cfg.propagator();
    let series = return_probability(&h, state, &grid, cfg.method, &prop)?;
    let mut m = vec![("kind", "return".to_string())];
    m.extend(profile_meta(&profile));
    m.push(("state", state.to_bit_string(cfg.n_sites)));
    m.push(("D_H", h.dim().to_string()));
    let mut files = vec![out.join("return.csv")];
    write_series(&files[0], &meta(&m), &series)?;
    if cfg.density {
        let d = site_density(&h, &fock_vector(&h, state)?, &grid, cfg.method, &prop)?;
        m[0].1 = "density".into();
        files.push(out.join("density.csv"));
        write_density(&files[1], &meta(&m), &d)?;
    }
    manifest.profile = Some(serde_json::to_value(&profile)?);
    Ok(files)
}

#[derive(Serialize)]
struct ScanRow {
    state: String,
    threshold: f64,
    crossings: usize,
    qualifies: bool,
}

#[derive(Serialize)]
struct ScanSummary {
    threshold: f64,
    min_crossings: usize,
    #[serde(rename = "D_H")]
    dim: usize,
    n_scanned: usize,
    sampled: bool,
    n_lls: usize,
    rho: f64,
    n_lls_estimate: f64,
}

fn scan(cfg: &RunConfig, out: &Path, manifest: &mut RunManifest) -> Result<Vec<PathBuf>> {
    let profile = single_profile(cfg)?;
    let h = SparseHamiltonian::from_profile(&profile, cfg.max_dim)?;
    let grid = cfg.grid()?;
    let criteria = cfg.criteria()?;
    // Same candidate sample as the matching ensemble realisation.
    let task = Task {
        mu_over_n: profile.mu / profile.n_sites as f64,
        params: EnsembleParams::new(profile.n_sites, profile.mu),
        seed: cfg.seed,
        realisation_index: cfg.realisation_index,
    };
    let mut options = cfg.scan_options();
    options.sample_seed = task.sample_seed();
    let scans = scan_sector_multi(&h, &grid, &criteria, &options)?;
    let mut rows = Vec::new();
    for (c, s) in criteria.iter().zip(&scans) {
        for r in &s.records {
            rows.push(ScanRow {
                state: crate::sector::FockState(r.state).to_bit_string(cfg.n_sites),
                threshold: c.threshold,
                crossings: r.crossings,
                qualifies: r.qualifies,
            });
        }
    }
    let summary: Vec<ScanSummary> = criteria
        .iter()
        .zip(&scans)
        .map(|(c, s)| ScanSummary {
            threshold: c.threshold,
            min_crossings: c.min_crossings,
            dim: s.dim,
            n_scanned: s.n_scanned,
            sampled: s.sampled,
            n_lls: s.n_lls,
            rho: s.rho,
            n_lls_estimate: s.n_lls_estimate(),
        })
        .collect();
    let mut m = vec![("kind", "scan".to_string())];
    m.extend(profile_meta(&profile));
    m.push(("tmax", grid.t_max().to_string()));
    m.push(("dt", grid.dt().to_string()));
    let files = vec![out.join("lls.csv"), out.join("lls_summary.csv")];
    write_table(&files[0], &meta(&m), &rows)?;
    m[0].1 = "scan-summary".into();
    write_table(&files[1], &meta(&m), &summary)?;
    manifest.profile = Some(serde_json::to_value(&profile)?);
    Ok(files)
}

fn sweep_spec(cfg: &RunConfig) -> SweepSpec {
    SweepSpec {
        n_sites: cfg.n_sites,
        mu_over_n: cfg.mu_over_n.values.clone(),
        n_realisations: cfg.realisations,
        realisation_start: cfg.realisation_start,
        epsilon: cfg.epsilon,
        min_range: cfg.min_range,
        boundary: cfg.boundary,
        master_seed: cfg.seed,
        max_dim: cfg.max_dim,
    }
}

fn record_sweep(cfg: &RunConfig, sweep: &SweepSpec, manifest: &mut RunManifest) {
    manifest.seeds = sweep
        .mu_over_n
        .iter()
        .map(|&x| SeedEntry {
            mu_over_n: x,
            mu: sweep.params(x).mu,
            seed: point_seed(cfg.seed, x),
        })
        .collect();
    manifest.realisation_indices = Some((
        sweep.realisation_start,
        sweep.realisation_start + sweep.n_realisations as u64 - 1,
    ));
}

/// Settings that must agree between partial results of one sweep.
fn sweep_metadata(kind: &str, cfg: &RunConfig) -> Metadata {
    let mut m = vec![
        ("kind", kind.to_string()),
        ("N", cfg.n_sites.to_string()),
        ("epsilon", cfg.epsilon.to_string()),
        ("min_range", cfg.min_range.to_string()),
        ("boundary", cfg.boundary.to_string()),
        ("seed", cfg.seed.to_string()),
        ("max_dim", cfg.max_dim.to_string()),
        ("dense_limit", cfg.dense_limit.to_string()),
    ];
    let base = kind.trim_end_matches("-realisations");
    if base == "ensemble" || base == "tli" {
        m.extend([
            ("tmax", cfg.t_max().to_string()),
            ("dt", cfg.dt.to_string()),
            ("threshold", cfg.get("lls.threshold").unwrap_or_default()),
            ("min_crossings", cfg.min_crossings.to_string()),
            ("candidate_cap", cfg.candidate_cap.to_string()),
            ("krylov_dim", cfg.krylov_dim.to_string()),
            ("substep_tol", cfg.substep_tol.to_string()),
            ("max_substeps", cfg.max_substeps.to_string()),
        ]);
    }
    if base == "tli" {
        m.push(("cost_tol", cfg.cost_tol.to_string()));
    }
    if base == "levels" {
        m.push(("degeneracy_tol", cfg.degeneracy_tol.to_string()));
        m.push((
            "central_fraction",
            cfg.get("levels.central_fraction").unwrap_or_default(),
        ));
        m.push(("resolve_symmetries", cfg.resolve_symmetries.to_string()));
    }
    meta(&m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LlsRow {
    threshold: f64,
    min_crossings: usize,
    mu: f64,
    #[serde(rename = "mu_over_N")]
    mu_over_n: f64,
    #[serde(rename = "N")]
    n_sites: usize,
    realisation_index: u64,
    seed: u64,
    #[serde(rename = "D_H")]
    dim: usize,
    n_scanned: usize,
    n_lls: usize,
    rho: f64,
    error: Option<String>,
}

impl LlsRow {
    fn new(c: &LlsCriterion, o: &LlsOutcome) -> Self {
        Self {
            threshold: c.threshold,
            min_crossings: c.min_crossings,
            mu: o.mu,
            mu_over_n: o.mu_over_n,
            n_sites: o.n_sites,
            realisation_index: o.realisation_index,
            seed: o.seed,
            dim: o.dim,
            n_scanned: o.n_scanned,
            n_lls: o.n_lls,
            rho: o.rho,
            error: o.error.clone(),
        }
    }

    fn outcome(&self) -> LlsOutcome {
        LlsOutcome {
            mu_over_n: self.mu_over_n,
            mu: self.mu,
            n_sites: self.n_sites,
            realisation_index: self.realisation_index,
            seed: self.seed,
            dim: self.dim,
            n_scanned: self.n_scanned,
            n_lls: self.n_lls,
            rho: self.rho,
            error: self.error.clone(),
        }
    }
}

#[derive(Serialize)]
struct EnsembleRow {
    threshold: f64,
    min_crossings: usize,
    mu: f64,
    #[serde(rename = "mu_over_N")]
    mu_over_n: f64,
    #[serde(rename = "N")]
    n_sites: usize,
    realisations: usize,
    p: f64,
    p_err: f64,
    rho_mean: f64,
    rho_stderr: f64,
    #[serde(rename = "mean_D_H")]
    mean_dim: f64,
    excluded: usize,
}

/// Aggregates per-criterion rows into the ensemble table.
fn ensemble_table(rows: &[LlsRow]) -> Result<Vec<EnsembleRow>> {
    let mut by_criterion: BTreeMap<(u64, usize), Vec<LlsOutcome>> = BTreeMap::new();
    for r in rows {
        by_criterion
            .entry((r.threshold.to_bits(), r.min_crossings))
            .or_default()
            .push(r.outcome());
    }
    let mut table = Vec::new();
    for ((t, min_crossings), outcomes) in by_criterion {
        for p in aggregate_lls(&outcomes)? {
            table.push(EnsembleRow {
                threshold: f64::from_bits(t),
                min_crossings,
                mu: p.mu,
                mu_over_n: p.mu_over_n,
                n_sites: p.n_sites,
                realisations: p.realisations,
                p: p.p,
                p_err: p.p_err,
                rho_mean: p.rho_mean,
                rho_stderr: p.rho_stderr,
                mean_dim: p.mean_sector_dim,
                excluded: p.excluded,
            });
        }
    }
    Ok(table)
}

fn sort_lls_rows(rows: &mut [LlsRow]) {
    rows.sort_by(|a, b| {
        a.threshold
            .total_cmp(&b.threshold)
            .then(a.mu_over_n.total_cmp(&b.mu_over_n))
            .then(a.realisation_index.cmp(&b.realisation_index))
    });
}

fn ensemble(cfg: &RunConfig, out: &Path, manifest: &mut RunManifest) -> Result<Vec<PathBuf>> {
    let sweep = sweep_spec(cfg);
    record_sweep(cfg, &sweep, manifest);
    let criteria = cfg.criteria()?;
    let outcomes = lls_outcomes(&sweep, &cfg.grid()?, &criteria, &cfg.scan_options())?;
    let mut rows: Vec<LlsRow> = criteria
        .iter()
        .zip(&outcomes)
        .flat_map(|(c, os)| os.iter().map(move |o| LlsRow::new(c, o)))
        .collect();
    sort_lls_rows(&mut rows);
    write_ensemble(cfg, out, &rows)
}

fn write_ensemble(cfg: &RunConfig, out: &Path, rows: &[LlsRow]) -> Result<Vec<PathBuf>> {
    let files = vec![out.join("realisations.csv"), out.join("ensemble.csv")];
    write_table(&files[0], &sweep_metadata("ensemble-realisations", cfg), rows)?;
    write_table(&files[1], &sweep_metadata("ensemble", cfg), &ensemble_table(rows)?)?;
    Ok(files)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct McRow {
    mu: f64,
    #[serde(rename = "mu_over_N")]
    mu_over_n: f64,
    #[serde(rename = "N")]
    n_sites: usize,
    realisation_index: u64,
    seed: u64,
    #[serde(rename = "D_H")]
    dim: usize,
    n_lls: usize,
    /// `m_c` of each LLS, separated by `;`.
    m_c: String,
    error: Option<String>,
}

impl McRow {
    fn new(o: &McOutcome) -> Self {
        Self {
            mu: o.mu,
            mu_over_n: o.mu_over_n,
            n_sites: o.n_sites,
            realisation_index: o.realisation_index,
            seed: o.seed,
            dim: o.dim,
            n_lls: o.n_lls,
            m_c: o.m_c.iter().map(usize::to_string).collect::<Vec<_>>().join(";"),
            error: o.error.clone(),
        }
    }

    fn outcome(&self) -> Result<McOutcome> {
        let m_c = if self.m_c.is_empty() {
            Vec::new()
        } else {
            self.m_c
                .split(';')
                .map(|x| x.parse().map_err(|_| Error::Merge(format!("bad m_c entry '{x}'"))))
                .collect::<Result<Vec<usize>>>()?
        };
        Ok(McOutcome {
            mu_over_n: self.mu_over_n,
            mu: self.mu,
            n_sites: self.n_sites,
            realisation_index: self.realisation_index,
            seed: self.seed,
            dim: self.dim,
            n_lls: m_c.len(),
            m_c,
            error: self.error.clone(),
        })
    }
}

#[derive(Serialize)]
struct TliRow {
    mu: f64,
    #[serde(rename = "mu_over_N")]
    mu_over_n: f64,
    #[serde(rename = "N")]
    n_sites: usize,
    mean_mc: f64,
    mean_mc_stderr: f64,
    #[serde(rename = "mean_mc_over_N")]
    mean_mc_over_n: f64,
    #[serde(rename = "mean_mc_over_D_H")]
    mean_mc_over_dh: f64,
    pooled_mean_mc: f64,
    n_lls_used: usize,
    realisations: usize,
    realisations_without_lls: usize,
    excluded: usize,
}

fn tli_table(rows: &[McRow]) -> Result<Vec<TliRow>> {
    let outcomes = rows.iter().map(McRow::outcome).collect::<Result<Vec<_>>>()?;
    Ok(aggregate_mc(&outcomes)?
        .into_iter()
        .map(|p| TliRow {
            mu: p.mu,
            mu_over_n: p.mu_over_n,
            n_sites: p.n_sites,
            mean_mc: p.mean_mc,
            mean_mc_stderr: p.mean_mc_stderr,
            mean_mc_over_n: p.mean_mc_over_n,
            mean_mc_over_dh: p.mean_mc_over_dh,
            pooled_mean_mc: p.pooled_mean_mc,
            n_lls_used: p.n_lls_used,
            realisations: p.realisations,
            realisations_without_lls: p.realisations_without_lls,
            excluded: p.excluded,
        })
        .collect())
}

fn tli(cfg: &RunConfig, out: &Path, manifest: &mut RunManifest) -> Result<Vec<PathBuf>> {
    let criteria = cfg.criteria()?;
    if criteria.len() != 1 {
        return Err(Error::Config(
            vec!["lls.threshold: tli takes a single threshold".into()],
        ));
    }
    let sweep = sweep_spec(cfg);
    record_sweep(cfg, &sweep, manifest);
    let outcomes = mc_outcomes(&sweep, &cfg.grid()?, &criteria[0], cfg.cost_tol, &cfg.scan_options())?;
    let mut rows: Vec<McRow> = outcomes.iter().map(McRow::new).collect();
    sort_by_point(&mut rows, |r| (r.mu_over_n, r.realisation_index));
    write_tli(cfg, out, &rows)
}

fn write_tli(cfg: &RunConfig, out: &Path, rows: &[McRow]) -> Result<Vec<PathBuf>> {
    let files = vec![out.join("tli_realisations.csv"), out.join("tli.csv")];
    write_table(&files[0], &sweep_metadata("tli-realisations", cfg), rows)?;
    write_table(&files[1], &sweep_metadata("tli", cfg), &tli_table(rows)?)?;
    Ok(files)
}

fn sort_by_point<T, F: Fn(&T) -> (f64, u64)>(rows: &mut [T], key: F) {
    rows.sort_by(|a, b| {
        let (x, i) = key(a);
        let (y, j) = key(b);
        x.total_cmp(&y).then(i.cmp(&j))
    });
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LevelRealisationRow {
    mu: f64,
    #[serde(rename = "mu_over_N")]
    mu_over_n: f64,
    #[serde(rename = "N")]
    n_sites: usize,
    realisation_index: u64,
    seed: u64,
    #[serde(rename = "D_H")]
    dim: usize,
    mean_r: Option<f64>,
    n_collapsed: usize,
    symmetry_order: usize,
    error: Option<String>,
}

impl From<&LevelOutcome> for LevelRealisationRow {
    fn from(o: &LevelOutcome) -> Self {
        Self {
            mu: o.mu,
            mu_over_n: o.mu_over_n,
            n_sites: o.n_sites,
            realisation_index: o.realisation_index,
            seed: o.seed,
            dim: o.dim,
            mean_r: o.mean_r,
            n_collapsed: o.n_collapsed,
            symmetry_order: o.symmetry_order,
            error: o.error.clone(),
        }
    }
}

impl LevelRealisationRow {
    fn outcome(&self) -> LevelOutcome {
        LevelOutcome {
            mu_over_n: self.mu_over_n,
            mu: self.mu,
            n_sites: self.n_sites,
            realisation_index: self.realisation_index,
            seed: self.seed,
            dim: self.dim,
            mean_r: self.mean_r,
            n_collapsed: self.n_collapsed,
            symmetry_order: self.symmetry_order,
            error: self.error.clone(),
        }
    }
}

#[derive(Serialize)]
struct LevelRow {
    mu: f64,
    #[serde(rename = "mu_over_N")]
    mu_over_n: f64,
    #[serde(rename = "N")]
    n_sites: usize,
    mean_r: f64,
    stderr: f64,
    realisations: usize,
    skipped: usize,
}

fn level_table(rows: &[LevelRealisationRow]) -> Result<Vec<LevelRow>> {
    let outcomes: Vec<LevelOutcome> = rows.iter().map(LevelRealisationRow::outcome).collect();
    Ok(aggregate_levels(&outcomes)?
        .into_iter()
        .map(|p| LevelRow {
            mu: p.mu,
            mu_over_n: p.mu_over_n,
            n_sites: p.n_sites,
            mean_r: p.mean_r,
            stderr: p.stderr,
            realisations: p.realisations,
            skipped: p.skipped,
        })
        .collect())
}

fn levels(cfg: &RunConfig, out: &Path, manifest: &mut RunManifest) -> Result<Vec<PathBuf>> {
    let sweep = sweep_spec(cfg);
    record_sweep(cfg, &sweep, manifest);
    let options = LevelOptions {
        dense_limit: cfg.dense_limit,
        degeneracy_tol: cfg.degeneracy_tol,
        central_fraction: cfg.central_fraction,
        resolve_symmetries: cfg.resolve_symmetries,
    };
    let mut rows: Vec<LevelRealisationRow> = level_outcomes(&sweep, &options)?.iter().map(Into::into).collect();
    sort_by_point(&mut rows, |r| (r.mu_over_n, r.realisation_index));
    write_levels(cfg, out, &rows)
}

fn write_levels(cfg: &RunConfig, out: &Path, rows: &[LevelRealisationRow]) -> Result<Vec<PathBuf>> {
    let files = vec![out.join("level_realisations.csv"), out.join("levels.csv")];
    write_table(&files[0], &sweep_metadata("levels-realisations", cfg), rows)?;
    write_table(&files[1], &sweep_metadata("levels", cfg), &level_table(rows)?)?;
    Ok(files)
}

fn defect(cfg: &RunConfig, out: &Path, manifest: &mut RunManifest) -> Result<Vec<PathBuf>> {
    let spec = DefectSpec::new(cfg.defect_site(), cfg.defect_q)?;
    let profile = ConstraintProfile::pxp(cfg.n_sites, cfg.boundary)?.apply_defect(&spec)?;
    let h = SparseHamiltonian::from_profile(&profile, cfg.max_dim)?;
    let state = cfg.state.state(cfg.n_sites);
    let grid = cfg.grid()?;
    let prop = cfg.propagator();
    let mut m = vec![("kind", "return".to_string())];
    m.extend(profile_meta(&profile));
    m.push(("site", spec.site.to_string()));
    m.push(("q", spec.strength.to_string()));
    m.push(("state", state.to_bit_string(cfg.n_sites)));
    m.push(("D_H", h.dim().to_string()));
    let files = vec![
        out.join("return.csv"),
        out.join("overlaps.csv"),
        out.join("density.csv"),
        out.join("lightcone.csv"),
    ];

    let series = return_probability(&h, state, &grid, cfg.method, &prop)?;
    write_series(&files[0], &meta(&m), &series)?;

    #[derive(Serialize)]
    struct OverlapRow {
        #[serde(rename = "E_k")]
        energy: f64,
        overlap: f64,
    }
    let spec_data = diagonalize(&h, true, cfg.dense_limit)?;
    let rows: Vec<OverlapRow> = overlaps(&spec_data, &h, state)?
        .into_iter()
        .map(|o| OverlapRow {
            energy: o.energy,
            overlap: o.weight,
        })
        .collect();
    m[0].1 = "overlaps".into();
    write_table(&files[1], &meta(&m), &rows)?;

    let density = site_density(&h, &fock_vector(&h, state)?, &grid, cfg.method, &prop)?;
    m[0].1 = "density".into();
    write_density(&files[2], &meta(&m), &density)?;

    #[derive(Serialize)]
    struct LightconeRow {
        site: usize,
        distance: usize,
        /// Empty when the contrast never halves within the horizon.
        drop_time: Option<f64>,
    }
    let n = cfg.n_sites;
    let rows: Vec<LightconeRow> = (0..n)
        .map(|i| {
            let d = i.abs_diff(spec.site);
            LightconeRow {
                site: i,
                distance: match cfg.boundary {
                    crate::profile::Boundary::Periodic => d.min(n - d),
                    crate::profile::Boundary::Open => d,
                },
                drop_time: density.contrast_drop_time(i, CONTRAST_WINDOW, LIGHTCONE_HORIZON),
            }
        })
        .collect();
    m[0].1 = "lightcone".into();
    m.push(("window", CONTRAST_WINDOW.to_string()));
    m.push(("horizon", LIGHTCONE_HORIZON.to_string()));
    write_table(&files[3], &meta(&m), &rows)?;
    manifest.profile = Some(serde_json::to_value(&profile)?);
    Ok(files)
}

/// Reads partial per-realisation tables, checks they belong to the same
/// sweep, and writes the combined table and its aggregate.
fn merge(inputs: &[PathBuf], out: &Path, manifest: &mut RunManifest) -> Result<Vec<PathBuf>> {
    manifest.inputs = inputs.iter().map(|p| p.display().to_string()).collect();
    let first_meta = read_meta(&inputs[0])?;
    let kind = lookup(&first_meta, "kind", &inputs[0])?;
    for p in &inputs[1..] {
        let m = read_meta(p)?;
        if m != first_meta {
            let diff: Vec<String> = first_meta
                .iter()
                .zip(m.iter())
                .filter(|(a, b)| a != b)
                .map(|(a, b)| format!("{} = {} vs {} = {}", a.0, a.1, b.0, b.1))
                .collect();
            return Err(Error::Merge(format!(
                "{} does not match {}: {}",
                p.display(),
                inputs[0].display(),
                if diff.is_empty() {
                    "different metadata".into()
                } else {
                    diff.join(", ")
                }
            )));
        }
    }
    let aggregate_meta: Metadata = first_meta
        .iter()
        .map(|(k, v)| {
            if k == "kind" {
                (k.clone(), v.trim_end_matches("-realisations").to_string())
            } else {
                (k.clone(), v.clone())
            }
        })
        .collect();
    let (realisation_file, aggregate_file) = match kind.as_str() {
        "ensemble-realisations" => ("realisations.csv", "ensemble.csv"),
        "tli-realisations" => ("tli_realisations.csv", "tli.csv"),
        "levels-realisations" => ("level_realisations.csv", "levels.csv"),
        other => return Err(Error::Merge(format!("cannot merge tables of kind '{other}'"))),
    };
    let files = vec![out.join(realisation_file), out.join(aggregate_file)];
    match kind.as_str() {
        "ensemble-realisations" => {
            let mut rows: Vec<LlsRow> = read_all(inputs)?;
            sort_lls_rows(&mut rows);
            write_table(&files[0], &first_meta, &rows)?;
            write_table(&files[1], &aggregate_meta, &ensemble_table(&rows)?)?;
        }
        "tli-realisations" => {
            let mut rows: Vec<McRow> = read_all(inputs)?;
            sort_by_point(&mut rows, |r| (r.mu_over_n, r.realisation_index));
            let table = tli_table(&rows)?;
            write_table(&files[0], &first_meta, &rows)?;
            write_table(&files[1], &aggregate_meta, &table)?;
        }
        _ => {
            let mut rows: Vec<LevelRealisationRow> = read_all(inputs)?;
            sort_by_point(&mut rows, |r| (r.mu_over_n, r.realisation_index));
            let table = level_table(&rows)?;
            write_table(&files[0], &first_meta, &rows)?;
            write_table(&files[1], &aggregate_meta, &table)?;
        }
    }
    if let Ok(seed) = lookup(&first_meta, "seed", &inputs[0]) {
        manifest.master_seed = seed.parse().unwrap_or(manifest.master_seed);
    }
    Ok(files)
}

fn read_meta(path: &Path) -> Result<Metadata> {
    let (m, _): (Metadata, Vec<serde::de::IgnoredAny>) = read_table(path)?;
    Ok(m)
}

fn lookup(meta: &Metadata, key: &str, path: &Path) -> Result<String> {
    meta.iter()
        .find(|(k, _)| k == key)
        .map(|(_, v)| v.clone())
        .ok_or_else(|| Error::Merge(format!("{}: no '{key}' metadata", path.display())))
}

fn read_all<T: serde::de::DeserializeOwned>(inputs: &[PathBuf]) -> Result<Vec<T>> {
    let mut rows = Vec::new();
    for p in inputs {
        let (_, mut r): (Metadata, Vec<T>) = read_table(p)?;
        rows.append(&mut r);
    }
    Ok(rows)
}
