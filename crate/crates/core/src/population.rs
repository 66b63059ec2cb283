//! Finite populations of schools.
//!
//! A [`PopulationFrame`] holds the three analysis variables for every school
//! in a population, raw and (after [`standardize`]) in standard-deviation
//! units. Standardization is per population, with the divide-by-N standard
//! deviation, so the population mean of every z-variable is zero and the
//! external validity bias of a sample is simply its mean.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};

use nalgebra::{Matrix3, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

/// One of the three analysis variables carried by every school.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variable {
    /// Total enrollment in the reference data.
    A,
    /// District expenditure per pupil.
    B,
    /// Percent of students eligible for free or reduced-price meals.
    C,
}

impl Variable {
    pub const ALL: [Variable; 3] = [Variable::A, Variable::B, Variable::C];

    pub fn index(self) -> usize {
        match self {
            Variable::A => 0,
            Variable::B => 1,
            Variable::C => 2,
        }
    }

    pub fn column(self) -> &'static str {
        match self {
            Variable::A => "var_a",
            Variable::B => "var_b",
            Variable::C => "var_c",
        }
    }

    pub fn tag(self) -> char {
        match self {
            Variable::A => 'a',
            Variable::B => 'b',
            Variable::C => 'c',
        }
    }
}

impl fmt::Display for Variable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SchoolRecord {
    pub school_id: String,
    pub group_id: String,
    raw: [f64; 3],
    z: Option<[f64; 3]>,
}

impl SchoolRecord {
    pub fn new(school_id: impl Into<String>, group_id: impl Into<String>, raw: [f64; 3]) -> Self {
        Self {
            school_id: school_id.into(),
            group_id: group_id.into(),
            raw,
            z: None,
        }
    }

    pub fn raw(&self, var: Variable) -> f64 {
        self.raw[var.index()]
    }

    pub fn raw_values(&self) -> [f64; 3] {
        self.raw
    }

    /// Standardized value; `None` until the owning frame is standardized.
    pub fn z(&self, var: Variable) -> Option<f64> {
        self.z.map(|z| z[var.index()])
    }

    pub fn z_values(&self) -> Option<[f64; 3]> {
        self.z
    }
}

/// Population mean and divide-by-N standard deviation of one variable, in raw units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VariableStats {
    pub mean: f64,
    pub sd: f64,
}

/// A named, non-empty population of schools with unique ids.
#[derive(Debug, Clone)]
pub struct PopulationFrame {
    name: String,
    records: Vec<SchoolRecord>,
    stats: Option<[VariableStats; 3]>,
    index: HashMap<String, usize>,
}

impl PopulationFrame {
    /// Builds an unstandardized frame. Any standardized values on the input
    /// records are discarded.
    pub fn new(name: impl Into<String>, records: Vec<SchoolRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::EmptyPopulation);
        }
        let mut index = HashMap::with_capacity(records.len());
        let mut records = records;
        for (i, rec) in records.iter_mut().enumerate() {
            if let Some(var) = Variable::ALL.into_iter().find(|v| !rec.raw(*v).is_finite()) {
                return Err(Error::ParseError {
                    row: i + 1,
                    message: format!("{var} is not a finite number"),
                });
            }
            rec.z = None;
            if index.insert(rec.school_id.clone(), i).is_some() {
                return Err(Error::DuplicateId(rec.school_id.clone()));
            }
        }
        Ok(Self {
            name: name.into(),
            records,
            stats: None,
            index,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    /// Always false: frames are non-empty by construction.
    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[SchoolRecord] {
        &self.records
    }

    pub fn record(&self, idx: usize) -> &SchoolRecord {
        &self.records[idx]
    }

    pub fn index_of(&self, school_id: &str) -> Option<usize> {
        self.index.get(school_id).copied()
    }

    pub fn is_standardized(&self) -> bool {
        self.stats.is_some()
    }

    /// Raw-unit mean and sd recorded at standardization time.
    pub fn stats(&self) -> Option<&[VariableStats; 3]> {
        self.stats.as_ref()
    }

    pub fn raw_column(&self, var: Variable) -> Vec<f64> {
        self.records.iter().map(|r| r.raw(var)).collect()
    }

    /// Standardized column, or `NotStandardized`.
    pub fn z_column(&self, var: Variable) -> Result<Vec<f64>> {
        if !self.is_standardized() {
            return Err(Error::NotStandardized(self.name.clone()));
        }
        Ok(self
            .records
            .iter()
            .map(|r| r.z(var).expect("standardized frame carries z-values"))
            .collect())
    }

    /// Writes the frame in the ingestion CSV format (raw values only).
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["school_id", "group_id", "var_a", "var_b", "var_c"])?;
        for rec in &self.records {
            w.write_record([
                rec.school_id.as_str(),
                rec.group_id.as_str(),
                &rec.raw[0].to_string(),
                &rec.raw[1].to_string(),
                &rec.raw[2].to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

const HEADER: [&str; 5] = ["school_id", "group_id", "var_a", "var_b", "var_c"];

/// Reads a population from a header-bearing CSV with columns
/// `school_id,group_id,var_a,var_b,var_c`. Row order is preserved.
pub fn load_population<R: Read>(source: R, name: &str) -> Result<PopulationFrame> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(source);
    let headers = reader.headers()?.clone();
    if headers.is_empty() || (headers.len() == 1 && headers[0].is_empty()) {
        return Err(Error::EmptyPopulation);
    }
    let mut cols = [0usize; 5];
    for (slot, col) in cols.iter_mut().zip(HEADER) {
        *slot = headers
            .iter()
            .position(|h| h == col)
            .ok_or_else(|| Error::ParseError {
                row: 0,
                message: format!("missing column `{col}`"),
            })?;
    }

    let mut records = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row_no = i + 1;
        let row = row.map_err(|e| Error::ParseError {
            row: row_no,
            message: e.to_string(),
        })?;
        let field = |c: usize| -> Result<&str> {
            row.get(c).ok_or_else(|| Error::ParseError {
                row: row_no,
                message: format!("missing field `{}`", headers.get(c).unwrap_or("?")),
            })
        };
        let school_id = field(cols[0])?;
        if school_id.is_empty() {
            return Err(Error::ParseError {
                row: row_no,
                message: "empty school_id".into(),
            });
        }
        let group_id = field(cols[1])?;
        let mut raw = [0.0; 3];
        for (v, c) in cols[2..].iter().enumerate() {
            let cell = field(*c)?;
            raw[v] = cell
                .parse::<f64>()
                .ok()
                .filter(|x| x.is_finite())
                .ok_or_else(|| Error::ParseError {
                    row: row_no,
                    message: format!("{} is not numeric: `{cell}`", Variable::ALL[v]),
                })?;
        }
        records.push(SchoolRecord::new(school_id, group_id, raw));
    }
    PopulationFrame::new(name, records)
}

fn column_stats(values: impl Iterator<Item = f64> + Clone, n: usize) -> VariableStats {
    let nf = n as f64;
    let mean = values.clone().sum::<f64>() / nf;
    let var = values.map(|x| (x - mean) * (x - mean)).sum::<f64>() / nf;
    VariableStats {
        mean,
        sd: var.sqrt(),
    }
}

/// Populates z-values as `(x - mean) / sd` with the divide-by-N sd.
pub fn standardize(frame: PopulationFrame) -> Result<PopulationFrame> {
    if frame.is_standardized() {
        return Err(Error::AlreadyStandardized(frame.name));
    }
    let n = frame.len();
    let mut stats = [VariableStats { mean: 0.0, sd: 0.0 }; 3];
    for var in Variable::ALL {
        let col = frame.records.iter().map(|r| r.raw(var));
        let first = frame.records[0].raw(var);
        let s = column_stats(col.clone(), n);
        if col.clone().all(|x| x == first) || s.sd.is_nan() || s.sd <= 0.0 {
            return Err(Error::DegenerateVariable(var));
        }
        stats[var.index()] = s;
    }
    let mut frame = frame;
    for rec in &mut frame.records {
        let mut z = [0.0; 3];
        for var in Variable::ALL {
            let s = stats[var.index()];
            z[var.index()] = (rec.raw(var) - s.mean) / s.sd;
        }
        rec.z = Some(z);
    }
    frame.stats = Some(stats);
    Ok(frame)
}

/// A population that could not be analysed, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedPopulation {
    pub population: String,
    pub size: usize,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Partition {
    /// The full frame first, then one frame per group in lexicographic order.
    pub populations: Vec<PopulationFrame>,
    pub skipped: Vec<SkippedPopulation>,
}

/// Splits a frame into one independently standardized frame per `group_id`,
/// preceded by the full frame (also standardized) under its own name.
/// Populations with a zero-variance variable are reported in `skipped`.
pub fn partition_by_group(frame: &PopulationFrame) -> Result<Partition> {
    let mut groups: BTreeMap<&str, Vec<SchoolRecord>> = BTreeMap::new();
    for rec in &frame.records {
        groups
            .entry(rec.group_id.as_str())
            .or_default()
            .push(rec.clone());
    }

    let mut candidates = Vec::with_capacity(groups.len() + 1);
    candidates.push(PopulationFrame::new(
        frame.name.clone(),
        frame.records.clone(),
    )?);
    for (group, records) in groups {
        candidates.push(PopulationFrame::new(group, records)?);
    }

    let mut populations = Vec::with_capacity(candidates.len());
    let mut skipped = Vec::new();
    for candidate in candidates {
        let name = candidate.name.clone();
        let size = candidate.len();
        match standardize(candidate) {
            Ok(f) => populations.push(f),
            Err(e @ Error::DegenerateVariable(_)) => skipped.push(SkippedPopulation {
                population: name,
                size,
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(Partition {
        populations,
        skipped,
    })
}

/// Marginal transform applied to a latent standard-normal draw.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Marginal {
    #[default]
    Normal,
    Lognormal,
    /// Standard-normal CDF scaled to 0..100.
    BoundedPercent,
}

impl Marginal {
    fn apply(self, latent: f64, normal: &Normal) -> f64 {
        match self {
            Marginal::Normal => latent,
            Marginal::Lognormal => latent.exp(),
            Marginal::BoundedPercent => normal.cdf(latent) * 100.0,
        }
    }
}

fn identity3() -> [[f64; 3]; 3] {
    [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
}

fn default_group() -> String {
    "SYN".to_string()
}

/// Parameters of a synthetic population (Gaussian-copula construction).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_schools: usize,
    #[serde(default = "identity3")]
    pub correlation: [[f64; 3]; 3],
    #[serde(default)]
    pub marginals: [Marginal; 3],
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_group")]
    pub group_id: String,
}

impl SyntheticSpec {
    pub fn new(n_schools: usize, seed: u64) -> Self {
        Self {
            n_schools,
            correlation: identity3(),
            marginals: [Marginal::Normal; 3],
            seed,
            group_id: default_group(),
        }
    }

    pub fn with_correlation(mut self, a: Variable, b: Variable, rho: f64) -> Self {
        self.correlation[a.index()][b.index()] = rho;
        self.correlation[b.index()][a.index()] = rho;
        self
    }

    pub fn with_marginal(mut self, var: Variable, marginal: Marginal) -> Self {
        self.marginals[var.index()] = marginal;
        self
    }

    /// Returns a factor `L` with `L * L^T` equal to the correlation matrix.
    fn factor(&self) -> Result<Matrix3<f64>> {
        if self.n_schools == 0 {
            return Err(Error::EmptyPopulation);
        }
        let c = Matrix3::from_fn(|i, j| self.correlation[i][j]);
        for i in 0..3 {
            if (c[(i, i)] - 1.0).abs() > 1e-12 {
                return Err(Error::InvalidCorrelation(format!(
                    "diagonal entry {i} is {}",
                    c[(i, i)]
                )));
            }
            for j in 0..3 {
                if !c[(i, j)].is_finite() || (c[(i, j)] - c[(j, i)]).abs() > 1e-12 {
                    return Err(Error::InvalidCorrelation(format!(
                        "entries ({i},{j}) and ({j},{i}) differ"
                    )));
                }
            }
        }
        if let Some(chol) = c.cholesky() {
            return Ok(chol.l());
        }
        let eig = SymmetricEigen::new(c);
        if let Some(min) = eig.eigenvalues.iter().copied().find(|&l| l < -1e-10) {
            return Err(Error::InvalidCorrelation(format!(
                "not positive semidefinite (eigenvalue {min})"
            )));
        }
        let sqrt_l = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
        Ok(eig.eigenvectors * Matrix3::from_diagonal(&sqrt_l))
    }
}

/// Draws a synthetic population. Identical specs give identical frames.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<PopulationFrame> {
    let factor = spec.factor()?;
    let normal = Normal::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let width = spec.n_schools.to_string().len().max(6);
    let mut records = Vec::with_capacity(spec.n_schools);
    for i in 0..spec.n_schools {
        let e: [f64; 3] = [
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        ];
        let mut raw = [0.0; 3];
        for (r, out) in raw.iter_mut().enumerate() {
            let latent = (0..3).map(|k| factor[(r, k)] * e[k]).sum::<f64>();
            *out = spec.marginals[r].apply(latent, &normal);
        }
        records.push(SchoolRecord::new(
            format!("S{:0width$}", i + 1),
            spec.group_id.clone(),
            raw,
        ));
    }
    PopulationFrame::new(spec.group_id.clone(), records)
}

/// Pearson correlation of two equal-length columns.
pub fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_from(values: &[[f64; 3]]) -> PopulationFrame {
        let records = values
            .iter()
            .enumerate()
            .map(|(i, v)| SchoolRecord::new(format!("S{i}"), "G", *v))
            .collect();
        PopulationFrame::new("t", records).unwrap()
    }

    #[test]
    fn loads_well_formed_csv() {
        let csv = "school_id,group_id,var_a,var_b,var_c\n\
                   S1,AK,100,9000.5,40\n\
                   \"S2\",AK,250,8000,55.5\n\
                   S3,AL,80,7000,90\n";
        let frame = load_population(csv.as_bytes(), "x").unwrap();
        assert_eq!(frame.len(), 3);
        assert!(!frame.is_standardized());
        assert_eq!(frame.record(1).school_id, "S2");
        assert_eq!(frame.record(1).raw(Variable::C), 55.5);
        assert_eq!(frame.record(2).group_id, "AL");
    }

    #[test]
    fn duplicate_id_rejected() {
        let csv = "school_id,group_id,var_a,var_b,var_c\nS1,A,1,2,3\nS1,A,4,5,6\n";
        assert!(matches!(
            load_population(csv.as_bytes(), "x"),
            Err(Error::DuplicateId(id)) if id == "S1"
        ));
    }

    #[test]
    fn non_numeric_cell_reports_row() {
        let csv = "school_id,group_id,var_a,var_b,var_c\nS1,A,1,2,3\nS2,A,4,oops,6\n";
        match load_population(csv.as_bytes(), "x") {
            Err(Error::ParseError { row, .. }) => assert_eq!(row, 2),
            other => panic!("unexpected {other:?}"),
        }
        let missing = "school_id,group_id,var_a,var_b,var_c\nS1,A,1,,3\n";
        assert!(matches!(
            load_population(missing.as_bytes(), "x"),
            Err(Error::ParseError { row: 1, .. })
        ));
        let nan = "school_id,group_id,var_a,var_b,var_c\nS1,A,1,NaN,3\n";
        assert!(matches!(
            load_population(nan.as_bytes(), "x"),
            Err(Error::ParseError { row: 1, .. })
        ));
    }

    #[test]
    fn empty_table_rejected() {
        let header_only = "school_id,group_id,var_a,var_b,var_c\n";
        assert!(matches!(
            load_population(header_only.as_bytes(), "x"),
            Err(Error::EmptyPopulation)
        ));
        assert!(matches!(
            load_population("".as_bytes(), "x"),
            Err(Error::EmptyPopulation)
        ));
    }

    #[test]
    fn standardizes_with_population_sd() {
        let frame = frame_from(&[[1.0, 1.0, 5.0], [2.0, 3.0, 6.0], [3.0, 2.0, 9.0]]);
        let z = standardize(frame).unwrap();
        let za = z.z_column(Variable::A).unwrap();
        let expected = 1.224744871391589;
        assert!((za[0] + expected).abs() < 1e-12);
        assert!(za[1].abs() < 1e-12);
        assert!((za[2] - expected).abs() < 1e-12);
        let stats = z.stats().unwrap()[0];
        assert!((stats.sd - 0.816496580927726).abs() < 1e-12);
        assert_eq!(z.record(0).raw(Variable::A), 1.0);
    }

    #[test]
    fn constant_variable_is_degenerate() {
        let frame = frame_from(&[[1.0, 7.0, 5.0], [2.0, 7.0, 6.0], [3.0, 7.0, 9.0]]);
        assert!(matches!(
            standardize(frame),
            Err(Error::DegenerateVariable(Variable::B))
        ));
    }

    #[test]
    fn restandardizing_is_an_error() {
        let frame = frame_from(&[[1.0, 1.0, 5.0], [2.0, 3.0, 6.0]]);
        let z = standardize(frame).unwrap();
        assert!(matches!(standardize(z), Err(Error::AlreadyStandardized(_))));
    }

    #[test]
    fn partition_skips_degenerate_group() {
        let mut recs = Vec::new();
        for i in 0..6 {
            recs.push(SchoolRecord::new(
                format!("A{i}"),
                "AK",
                [i as f64, (i * i) as f64, 1.0 + i as f64],
            ));
            // Single district: expenditure constant within the group.
            recs.push(SchoolRecord::new(
                format!("H{i}"),
                "HI",
                [i as f64, 12000.0, 3.0 * i as f64],
            ));
        }
        let frame = PopulationFrame::new("US", recs).unwrap();
        let part = partition_by_group(&frame).unwrap();
        let names: Vec<_> = part.populations.iter().map(|p| p.name()).collect();
        assert_eq!(names, ["US", "AK"]);
        assert_eq!(part.skipped.len(), 1);
        assert_eq!(part.skipped[0].population, "HI");
        assert!(part.populations.iter().all(|p| p.is_standardized()));
    }

    #[test]
    fn single_group_partition() {
        let frame = frame_from(&[[1.0, 1.0, 5.0], [2.0, 3.0, 6.0], [4.0, 0.0, 1.0]]);
        let part = partition_by_group(&frame).unwrap();
        assert_eq!(part.populations.len(), 2);
        let ids = |f: &PopulationFrame| {
            f.records()
                .iter()
                .map(|r| r.school_id.clone())
                .collect::<Vec<_>>()
        };
        assert_eq!(ids(&part.populations[0]), ids(&part.populations[1]));
    }

    #[test]
    fn rejects_non_psd_correlation() {
        let mut spec = SyntheticSpec::new(10, 1);
        spec.correlation = [[1.0, 0.9, -0.9], [0.9, 1.0, 0.9], [-0.9, 0.9, 1.0]];
        assert!(matches!(
            generate_synthetic(&spec),
            Err(Error::InvalidCorrelation(_))
        ));
        let asym = SyntheticSpec::new(10, 1);
        let mut asym = asym;
        asym.correlation[0][1] = 0.3;
        assert!(generate_synthetic(&asym).is_err());
    }

    #[test]
    fn singular_psd_correlation_is_accepted() {
        let spec = SyntheticSpec::new(2000, 3).with_correlation(Variable::A, Variable::B, 1.0);
        let frame = generate_synthetic(&spec).unwrap();
        let a = frame.raw_column(Variable::A);
        let b = frame.raw_column(Variable::B);
        assert!((pearson(&a, &b) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn synthetic_identity_is_uncorrelated() {
        let frame = generate_synthetic(&SyntheticSpec::new(10_000, 11)).unwrap();
        let cols: Vec<_> = Variable::ALL.iter().map(|v| frame.raw_column(*v)).collect();
        for (i, j) in [(0, 1), (0, 2), (1, 2)] {
            assert!(pearson(&cols[i], &cols[j]).abs() < 0.03);
        }
    }

    #[test]
    fn synthetic_ids_sort_in_generation_order() {
        let frame = generate_synthetic(&SyntheticSpec::new(1500, 0)).unwrap();
        let ids: Vec<_> = frame
            .records()
            .iter()
            .map(|r| r.school_id.clone())
            .collect();
        let mut sorted = ids.clone();
        sorted.sort();
        assert_eq!(ids, sorted);
    }

    #[test]
    fn synthetic_spec_json_defaults() {
        let spec: SyntheticSpec = serde_json::from_str(r#"{"n_schools": 5, "seed": 9}"#).unwrap();
        assert_eq!(spec, SyntheticSpec::new(5, 9));
        let spec: SyntheticSpec = serde_json::from_str(
            r#"{"n_schools": 5, "marginals": ["lognormal", "normal", "bounded_percent"]}"#,
        )
        .unwrap();
        assert_eq!(spec.marginals[2], Marginal::BoundedPercent);
    }
}
