//! Config-driven experiments: populations x role assignments x paired
//! replications, and the artifacts written from them.
//!
//! Output layout under the output directory:
//!
//! ```text
//! <population>/perm<k>/report.json   one ComparisonReport per assignment
//! <population>/averaged.json         mean over the assignments that ran
//! metrics.csv                        one row per population x permutation x method x role
//! results.json                       everything above, nested
//! skipped.json                       populations not analysed, with reasons
//! trace.jsonl                        per-replication records (when enabled)
//! ```
//!
//! Every random draw comes from a stream keyed by (seed, population,
//! permutation, replication), and results are merged in key order, so the
//! artifacts are byte-identical for any worker count.

use std::fmt;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::design::{build_design, DesignParams, Role, RoleAssignment};
use crate::error::{Error, Result};
use crate::metrics::{
    average_over_permutations, average_reports, compare, summarize, ComparisonReport,
};
use crate::population::{
    generate_synthetic, load_population, partition_by_group, standardize, PopulationFrame,
    SkippedPopulation, SyntheticSpec,
};
use crate::recruitment::{run_replication, Method, ReplicationOutcome, StageCounts};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PopulationSource {
    Csv(PathBuf),
    Synthetic(SyntheticSpec),
}

/// Restricts which populations are simulated. Excluded populations are
/// recorded in the skip log.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PopulationFilter {
    #[serde(default)]
    pub groups: Option<Vec<String>>,
    #[serde(default)]
    pub min_size: Option<usize>,
}

fn default_name() -> String {
    "national".into()
}
fn default_true() -> bool {
    true
}
fn default_n_target() -> usize {
    100
}
fn default_k() -> usize {
    5
}
fn default_p_low() -> f64 {
    0.5
}
fn default_p_high() -> f64 {
    0.25
}
fn default_replications() -> usize {
    1000
}
fn default_permutations() -> Vec<usize> {
    (1..=6).collect()
}
fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub population: PopulationSource,
    /// Name given to the full population.
    #[serde(default = "default_name")]
    pub population_name: String,
    /// Also simulate each `group_id` as its own population.
    #[serde(default = "default_true")]
    pub by_group: bool,
    #[serde(default = "default_n_target")]
    pub n_target: usize,
    #[serde(default = "default_k")]
    pub k_strata: usize,
    #[serde(default = "default_k")]
    pub k_bins: usize,
    #[serde(default = "default_p_low")]
    pub p_low: f64,
    #[serde(default = "default_p_high")]
    pub p_high: f64,
    #[serde(default = "default_replications")]
    pub replications: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub filter: PopulationFilter,
    /// 1-based role assignments to run.
    #[serde(default = "default_permutations")]
    pub permutations: Vec<usize>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub trace: bool,
}

impl ExperimentConfig {
    pub fn new(population: PopulationSource) -> Self {
        Self {
            population,
            population_name: default_name(),
            by_group: true,
            n_target: default_n_target(),
            k_strata: default_k(),
            k_bins: default_k(),
            p_low: default_p_low(),
            p_high: default_p_high(),
            replications: default_replications(),
            master_seed: 0,
            filter: PopulationFilter::default(),
            permutations: default_permutations(),
            output_dir: default_output_dir(),
            trace: false,
        }
    }

    /// Reads a JSON config. Relative paths inside it are taken relative to
    /// the config file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let mut cfg: Self = serde_json::from_reader(File::open(path)?)?;
        let base = path.parent().unwrap_or(Path::new(""));
        if let PopulationSource::Csv(p) = &mut cfg.population {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        Ok(cfg)
    }

    pub fn design_params(&self) -> DesignParams {
        DesignParams {
            n_target: self.n_target,
            k_strata: self.k_strata,
            k_bins: self.k_bins,
            p_low: self.p_low,
            p_high: self.p_high,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.design_params().validate()?;
        if self.replications == 0 {
            return Err(Error::InvalidParameter(
                "replications must be positive".into(),
            ));
        }
        if self.permutations.is_empty() {
            return Err(Error::InvalidParameter("no permutations selected".into()));
        }
        let mut seen = [false; 6];
        for &p in &self.permutations {
            RoleAssignment::from_index(p)?;
            if std::mem::replace(&mut seen[p - 1], true) {
                return Err(Error::InvalidParameter(format!(
                    "permutation {p} listed twice"
                )));
            }
        }
        Ok(())
    }

    fn all_permutations(&self) -> bool {
        let mut p = self.permutations.clone();
        p.sort();
        p == default_permutations()
    }
}

/// One replication of one method, as written to `trace.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub population: String,
    pub permutation: usize,
    pub replication: u64,
    pub method: Method,
    pub counts: StageCounts,
    pub achieved_n: usize,
    pub sample_means: Option<[f64; 3]>,
}

impl TraceRecord {
    fn new(population: &str, permutation: usize, replication: u64, o: &ReplicationOutcome) -> Self {
        Self {
            population: population.to_string(),
            permutation,
            replication,
            method: o.method,
            counts: o.counts,
            achieved_n: o.achieved_size(),
            sample_means: o.sample_means,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellReport {
    pub permutation: usize,
    pub roles: String,
    pub report: ComparisonReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopulationResult {
    pub population: String,
    pub size: usize,
    /// Size at least `n_target / mean agreement probability`.
    pub feasible: bool,
    pub cells: Vec<CellReport>,
    pub averaged: ComparisonReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub populations: Vec<PopulationResult>,
    pub skipped: Vec<SkippedPopulation>,
    #[serde(skip)]
    pub trace: Vec<TraceRecord>,
}

impl ExperimentResults {
    pub fn population(&self, name: &str) -> Option<&PopulationResult> {
        self.populations.iter().find(|p| p.population == name)
    }
}

/// Loads or generates the configured population, unstandardized.
pub fn load_source(cfg: &ExperimentConfig) -> Result<PopulationFrame> {
    match &cfg.population {
        PopulationSource::Csv(path) => load_population(File::open(path)?, &cfg.population_name),
        PopulationSource::Synthetic(spec) => {
            Ok(generate_synthetic(spec)?.renamed(cfg.population_name.clone()))
        }
    }
}

fn select_populations(
    cfg: &ExperimentConfig,
    frame: &PopulationFrame,
) -> Result<(Vec<PopulationFrame>, Vec<SkippedPopulation>)> {
    let (candidates, mut skipped) = if cfg.by_group {
        if frame
            .records()
            .iter()
            .any(|r| r.group_id == cfg.population_name)
        {
            return Err(Error::InvalidParameter(format!(
                "group id `{}` collides with the population name",
                cfg.population_name
            )));
        }
        let part = partition_by_group(frame)?;
        (part.populations, part.skipped)
    } else {
        match standardize(frame.clone()) {
            Ok(f) => (vec![f], Vec::new()),
            Err(e @ Error::DegenerateVariable(_)) => (
                Vec::new(),
                vec![SkippedPopulation {
                    population: frame.name().to_string(),
                    size: frame.len(),
                    reason: e.to_string(),
                }],
            ),
            Err(e) => return Err(e),
        }
    };

    let mut kept = Vec::with_capacity(candidates.len());
    for p in candidates {
        let reason = match (&cfg.filter.groups, cfg.filter.min_size) {
            (Some(groups), _) if !groups.iter().any(|g| g == p.name()) => {
                Some("filtered: not in the selected groups".to_string())
            }
            (_, Some(min)) if p.len() < min => Some(format!("filtered: fewer than {min} schools")),
            _ => None,
        };
        match reason {
            Some(reason) => skipped.push(SkippedPopulation {
                population: p.name().to_string(),
                size: p.len(),
                reason,
            }),
            None => kept.push(p),
        }
    }
    Ok((kept, skipped))
}

/// Runs the experiment. `jobs` bounds the worker pool (`None` = all cores).
pub fn run_experiment(cfg: &ExperimentConfig, jobs: Option<usize>) -> Result<ExperimentResults> {
    cfg.validate()?;
    let frame = load_source(cfg)?;
    run_frame(cfg, &frame, jobs)
}

/// Runs the experiment on an already loaded, unstandardized frame; the
/// config's population source is ignored.
pub fn run_frame(
    cfg: &ExperimentConfig,
    frame: &PopulationFrame,
    jobs: Option<usize>,
) -> Result<ExperimentResults> {
    cfg.validate()?;
    let frame = frame.clone().renamed(cfg.population_name.clone());
    let (populations, mut skipped) = select_populations(cfg, &frame)?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.unwrap_or(0))
        .build()
        .map_err(|e| Error::InvalidParameter(format!("worker pool: {e}")))?;
    let params = cfg.design_params();
    let mut permutations = cfg.permutations.clone();
    permutations.sort();

    let mut results = Vec::with_capacity(populations.len());
    let mut trace = Vec::new();
    for pop in &populations {
        let mut cells = Vec::with_capacity(permutations.len());
        let mut failure = None;
        for &perm in &permutations {
            let roles = RoleAssignment::from_index(perm)?;
            let design = match build_design(pop, roles, params) {
                Ok(d) => d,
                Err(e) => {
                    failure = Some(e);
                    break;
                }
            };
            let paired: Vec<_> = pool.install(|| {
                (0..cfg.replications as u64)
                    .into_par_iter()
                    .map(|rep| run_replication(pop, &design, rep, cfg.master_seed))
                    .collect()
            });
            if cfg.trace {
                for (rep, p) in paired.iter().enumerate() {
                    trace.push(TraceRecord::new(pop.name(), perm, rep as u64, &p.srs));
                    trace.push(TraceRecord::new(pop.name(), perm, rep as u64, &p.srsq));
                }
            }
            let (srs, srsq): (Vec<_>, Vec<_>) = paired.into_iter().map(|p| (p.srs, p.srsq)).unzip();
            let report = compare(&summarize(&srs, roles)?, &summarize(&srsq, roles)?)?;
            cells.push(CellReport {
                permutation: perm,
                roles: roles.label(),
                report,
            });
        }
        if let Some(e) = failure {
            skipped.push(SkippedPopulation {
                population: pop.name().to_string(),
                size: pop.len(),
                reason: e.to_string(),
            });
            continue;
        }
        let reports: Vec<_> = cells.iter().map(|c| c.report.clone()).collect();
        let averaged = if cfg.all_permutations() {
            average_over_permutations(&reports)?
        } else {
            average_reports(&reports)?
        };
        results.push(PopulationResult {
            population: pop.name().to_string(),
            size: pop.len(),
            feasible: params.is_feasible(pop.len()),
            cells,
            averaged,
        });
    }
    Ok(ExperimentResults {
        populations: results,
        skipped,
        trace,
    })
}

/// Directory-safe form of a population name.
pub fn population_dir(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.') {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub const METRICS_HEADER: [&str; 16] = [
    "population",
    "N",
    "permutation",
    "method",
    "role",
    "bias_signed",
    "bias_abs",
    "variance",
    "mse",
    "contacted",
    "excluded",
    "invited",
    "declined",
    "agreed",
    "achieved_n",
    "feasible",
];

/// Writes `metrics.csv` rows; the permutation column is `1`..`6` or `avg`.
pub fn write_metrics_csv<W: Write>(results: &ExperimentResults, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(METRICS_HEADER)?;
    for pop in &results.populations {
        let keyed = pop
            .cells
            .iter()
            .map(|c| (c.permutation.to_string(), &c.report))
            .chain(std::iter::once(("avg".to_string(), &pop.averaged)));
        for (perm, report) in keyed {
            for method in [Method::Srs, Method::Srsq] {
                let s = report.summary(method);
                for role in Role::ALL {
                    let m = s.role(role);
                    w.write_record([
                        pop.population.clone(),
                        pop.size.to_string(),
                        perm.clone(),
                        method.to_string(),
                        role.to_string(),
                        m.bias_signed.to_string(),
                        m.bias_abs.to_string(),
                        m.variance.to_string(),
                        m.mse.to_string(),
                        s.counts.contacted.to_string(),
                        s.counts.excluded.to_string(),
                        s.counts.invited.to_string(),
                        s.counts.declined.to_string(),
                        s.counts.agreed.to_string(),
                        s.achieved_n.to_string(),
                        pop.feasible.to_string(),
                    ])?;
                }
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CellFile<'a> {
    population: &'a str,
    size: usize,
    feasible: bool,
    permutation: usize,
    roles: &'a str,
    report: &'a ComparisonReport,
}

#[derive(Serialize)]
struct AveragedFile<'a> {
    population: &'a str,
    size: usize,
    feasible: bool,
    permutations: Vec<usize>,
    report: &'a ComparisonReport,
}

/// Writes every artifact under `dir`.
pub fn write_outputs(results: &ExperimentResults, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for pop in &results.populations {
        let pop_dir = dir.join(population_dir(&pop.population));
        for cell in &pop.cells {
            let cell_dir = pop_dir.join(format!("perm{}", cell.permutation));
            fs::create_dir_all(&cell_dir)?;
            write_json(
                &cell_dir.join("report.json"),
                &CellFile {
                    population: &pop.population,
                    size: pop.size,
                    feasible: pop.feasible,
                    permutation: cell.permutation,
                    roles: &cell.roles,
                    report: &cell.report,
                },
            )?;
        }
        write_json(
            &pop_dir.join("averaged.json"),
            &AveragedFile {
                population: &pop.population,
                size: pop.size,
                feasible: pop.feasible,
                permutations: pop.cells.iter().map(|c| c.permutation).collect(),
                report: &pop.averaged,
            },
        )?;
    }
    let mut metrics = BufWriter::new(File::create(dir.join("metrics.csv"))?);
    write_metrics_csv(results, &mut metrics)?;
    metrics.flush()?;
    write_json(&dir.join("results.json"), results)?;
    write_json(&dir.join("skipped.json"), &results.skipped)?;
    if !results.trace.is_empty() {
        let mut w = BufWriter::new(File::create(dir.join("trace.jsonl"))?);
        for rec in &results.trace {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    Ok(())
}

/// Plot-data series, one per figure of the state-level analysis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Figure {
    AuxBias,
    AchievedN,
    AuxVar,
    StratBias,
    StratVar,
    UnobsBias,
    UnobsVar,
}

impl Figure {
    pub const ALL: [Figure; 7] = [
        Figure::AuxBias,
        Figure::AchievedN,
        Figure::AuxVar,
        Figure::StratBias,
        Figure::StratVar,
        Figure::UnobsBias,
        Figure::UnobsVar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Figure::AuxBias => "aux_bias",
            Figure::AchievedN => "achieved_n",
            Figure::AuxVar => "aux_var",
            Figure::StratBias => "strat_bias",
            Figure::StratVar => "strat_var",
            Figure::UnobsBias => "unobs_bias",
            Figure::UnobsVar => "unobs_var",
        }
    }

    /// (role, metrics.csv column) the figure plots.
    fn source(self) -> (Role, &'static str) {
        match self {
            Figure::AuxBias => (Role::Auxiliary, "bias_abs"),
            Figure::AchievedN => (Role::Auxiliary, "achieved_n"),
            Figure::AuxVar => (Role::Auxiliary, "variance"),
            Figure::StratBias => (Role::Stratifier, "bias_abs"),
            Figure::StratVar => (Role::Stratifier, "variance"),
            Figure::UnobsBias => (Role::Unobserved, "bias_abs"),
            Figure::UnobsVar => (Role::Unobserved, "variance"),
        }
    }
}

impl fmt::Display for Figure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Figure {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Figure::ALL
            .into_iter()
            .find(|f| f.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown figure `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FigureRow {
    pub population: String,
    pub size: usize,
    pub srs: f64,
    pub srsq: f64,
}

/// Reads the permutation-averaged rows for `figure` from `metrics.csv`,
/// ordered by population size.
pub fn figure_rows(results_dir: &Path, figure: Figure) -> Result<Vec<FigureRow>> {
    let path = results_dir.join("metrics.csv");
    if !path.is_file() {
        return Err(Error::MissingResults(format!(
            "{} not found",
            path.display()
        )));
    }
    let (role, column) = figure.source();
    let mut reader = csv::Reader::from_path(&path)?;
    let headers = reader.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::MissingResults(format!("metrics.csv lacks column `{name}`")))
    };
    let (c_pop, c_n, c_perm, c_method, c_role, c_val) = (
        col("population")?,
        col("N")?,
        col("permutation")?,
        col("method")?,
        col("role")?,
        col(column)?,
    );
    let mut rows: Vec<FigureRow> = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        if &rec[c_perm] != "avg" || &rec[c_role] != role.name() {
            continue;
        }
        let bad = |what: &str| Error::ParseError {
            row: i + 1,
            message: format!("bad {what} in metrics.csv"),
        };
        let value: f64 = rec[c_val].parse().map_err(|_| bad(column))?;
        let size: usize = rec[c_n].parse().map_err(|_| bad("N"))?;
        let pop = rec[c_pop].to_string();
        let idx = match rows.iter().position(|r| r.population == pop) {
            Some(idx) => idx,
            None => {
                rows.push(FigureRow {
                    population: pop,
                    size,
                    srs: f64::NAN,
                    srsq: f64::NAN,
                });
                rows.len() - 1
            }
        };
        match &rec[c_method] {
            "SRS" => rows[idx].srs = value,
            "SRSQ" => rows[idx].srsq = value,
            other => return Err(bad(&format!("method `{other}`"))),
        }
    }
    if rows.is_empty() {
        return Err(Error::MissingResults(
            "metrics.csv has no averaged rows".into(),
        ));
    }
    rows.sort_by(|a, b| {
        a.size
            .cmp(&b.size)
            .then_with(|| a.population.cmp(&b.population))
    });
    Ok(rows)
}

/// Writes `<results_dir>/figures/<figure>.csv` and returns its path. Nothing
/// is written if the results are missing.
pub fn emit_figure(results_dir: &Path, figure: Figure) -> Result<PathBuf> {
    let rows = figure_rows(results_dir, figure)?;
    let dir = results_dir.join("figures");
    fs::create_dir_all(&dir)?;
    let path = dir.join(format!("{figure}.csv"));
    let tmp = dir.join(format!(".{figure}.csv.tmp"));
    {
        let mut w = csv::Writer::from_path(&tmp)?;
        w.write_record(["population", "N", "srs", "srsq"])?;
        for r in &rows {
            w.write_record([
                r.population.clone(),
                r.size.to_string(),
                r.srs.to_string(),
                r.srsq.to_string(),
            ])?;
        }
        w.flush()?;
    }
    fs::rename(&tmp, &path)?;
    Ok(path)
}
