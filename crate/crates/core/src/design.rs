//! Sampling design: strata, proportional targets, quota bins and caps.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::population::{PopulationFrame, Variable};

/// Role a variable plays in one simulation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    /// Observed only on contact; used to set quotas.
    Auxiliary,
    /// In the sampling frame; used to form strata.
    Stratifier,
    /// Used for neither.
    Unobserved,
}

impl Role {
    /// Reporting order: auxiliary, stratifier, unobserved.
    pub const ALL: [Role; 3] = [Role::Auxiliary, Role::Stratifier, Role::Unobserved];

    pub fn name(self) -> &'static str {
        match self {
            Role::Auxiliary => "auxiliary",
            Role::Stratifier => "stratifier",
            Role::Unobserved => "unobserved",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RoleAssignment {
    pub stratifier: Variable,
    pub auxiliary: Variable,
    pub unobserved: Variable,
}

/// Variable order used to enumerate assignments: percent FRPL, enrollment,
/// expenditure per pupil.
const ENUMERATION_ORDER: [Variable; 3] = [Variable::C, Variable::A, Variable::B];

impl RoleAssignment {
    pub fn new(stratifier: Variable, auxiliary: Variable, unobserved: Variable) -> Result<Self> {
        if stratifier == auxiliary || stratifier == unobserved || auxiliary == unobserved {
            return Err(Error::InvalidParameter(format!(
                "roles must be a permutation of a,b,c (got {}{}{})",
                stratifier.tag(),
                auxiliary.tag(),
                unobserved.tag()
            )));
        }
        Ok(Self {
            stratifier,
            auxiliary,
            unobserved,
        })
    }

    pub fn variable(&self, role: Role) -> Variable {
        match role {
            Role::Auxiliary => self.auxiliary,
            Role::Stratifier => self.stratifier,
            Role::Unobserved => self.unobserved,
        }
    }

    /// 1-based position in [`enumerate_role_permutations`].
    pub fn permutation_index(&self) -> usize {
        enumerate_role_permutations()
            .iter()
            .position(|r| r == self)
            .expect("every valid assignment is enumerated")
            + 1
    }

    /// Looks up an assignment by its 1-based permutation index.
    pub fn from_index(index: usize) -> Result<Self> {
        enumerate_role_permutations()
            .get(index.wrapping_sub(1))
            .copied()
            .ok_or_else(|| {
                Error::InvalidParameter(format!("permutation index {index} not in 1..=6"))
            })
    }

    /// Stratifier, auxiliary and unobserved tags, e.g. `cab`.
    pub fn label(&self) -> String {
        [self.stratifier, self.auxiliary, self.unobserved]
            .iter()
            .map(|v| v.tag())
            .collect()
    }
}

/// The six role assignments, stratifier-major, auxiliary-minor.
pub fn enumerate_role_permutations() -> Vec<RoleAssignment> {
    let mut out = Vec::with_capacity(6);
    for s in ENUMERATION_ORDER {
        for a in ENUMERATION_ORDER.into_iter().filter(|&a| a != s) {
            let u = ENUMERATION_ORDER
                .into_iter()
                .find(|&u| u != s && u != a)
                .unwrap();
            out.push(RoleAssignment {
                stratifier: s,
                auxiliary: a,
                unobserved: u,
            });
        }
    }
    out
}

/// Value thresholds splitting a variable into `k` half-open bins.
///
/// A value falls in bin `j` (0-based) when exactly `j` cut points are `<=`
/// the value. Equal cut points produce empty bins; those keep a population
/// count (and cap) of zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BinRule {
    cut_points: Vec<f64>,
    population_counts: Vec<usize>,
}

impl BinRule {
    pub fn bin_of(&self, value: f64) -> usize {
        self.cut_points.partition_point(|&c| c <= value)
    }

    pub fn n_bins(&self) -> usize {
        self.cut_points.len() + 1
    }

    /// All `k - 1` thresholds, non-decreasing.
    pub fn cut_points(&self) -> &[f64] {
        &self.cut_points
    }

    /// Thresholds with repeats removed; strictly ascending.
    pub fn distinct_cut_points(&self) -> Vec<f64> {
        let mut cuts = self.cut_points.clone();
        cuts.dedup();
        cuts
    }

    pub fn population_counts(&self) -> &[usize] {
        &self.population_counts
    }
}

/// Quantile bins: the `j`-th threshold is the order statistic just above
/// the lowest `ceil(N*j/k)` values, so with distinct values the bins hold
/// `floor` or `ceil` of `N/k` schools each.
pub fn quantile_bins(values: &[f64], k: usize) -> Result<BinRule> {
    let n = values.len();
    if n == 0 {
        return Err(Error::EmptyPopulation);
    }
    if k == 0 || k > n {
        return Err(Error::InvalidBinCount { k, n });
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let cut_points: Vec<f64> = (1..k).map(|j| sorted[(n * j).div_ceil(k)]).collect();
    let mut rule = BinRule {
        cut_points,
        population_counts: vec![0; k],
    };
    for &v in values {
        let b = rule.bin_of(v);
        rule.population_counts[b] += 1;
    }
    Ok(rule)
}

/// Largest-remainder apportionment of `n_target` proportional to `counts`.
/// Remainder ties go to the lower index. Integer arithmetic throughout.
pub fn proportional_targets(counts: &[usize], n_target: usize) -> Result<Vec<usize>> {
    if n_target == 0 {
        return Err(Error::InvalidTarget("target must be positive".into()));
    }
    let total: u128 = counts.iter().map(|&c| c as u128).sum();
    if total == 0 {
        return Err(Error::InvalidTarget("cell counts sum to zero".into()));
    }
    let mut out = Vec::with_capacity(counts.len());
    let mut remainders = Vec::with_capacity(counts.len());
    for (i, &c) in counts.iter().enumerate() {
        let num = c as u128 * n_target as u128;
        out.push((num / total) as usize);
        remainders.push((num % total, i));
    }
    let leftover = n_target - out.iter().sum::<usize>();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, i) in remainders.iter().take(leftover) {
        out[i] += 1;
    }
    Ok(out)
}

/// Scalar design parameters; defaults are 100 schools, quintile strata and
/// quota bins, and agreement probabilities 0.5 (bottom half) / 0.25.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DesignParams {
    pub n_target: usize,
    pub k_strata: usize,
    pub k_bins: usize,
    pub p_low: f64,
    pub p_high: f64,
}

impl Default for DesignParams {
    fn default() -> Self {
        Self {
            n_target: 100,
            k_strata: 5,
            k_bins: 5,
            p_low: 0.5,
            p_high: 0.25,
        }
    }
}

impl DesignParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_target == 0 {
            return Err(Error::InvalidTarget("target must be positive".into()));
        }
        if self.k_strata == 0 || self.k_bins == 0 {
            return Err(Error::InvalidParameter(
                "bin counts must be positive".into(),
            ));
        }
        for (name, p) in [("p_low", self.p_low), ("p_high", self.p_high)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidParameter(format!("{name}={p} not in [0,1]")));
            }
        }
        Ok(())
    }

    pub fn mean_agreement_probability(&self) -> f64 {
        (self.p_low + self.p_high) / 2.0
    }

    /// Population size below which reaching the target is implausible
    /// (`n_target / mean agreement probability`; 266.7 by default).
    pub fn feasibility_threshold(&self) -> f64 {
        self.n_target as f64 / self.mean_agreement_probability()
    }

    pub fn is_feasible(&self, population_size: usize) -> bool {
        population_size as f64 >= self.feasibility_threshold()
    }
}

/// Everything needed to run a replication on one population under one role
/// assignment. Per-school lookups are indexed by record position in the
/// frame the design was built from.
#[derive(Debug, Clone)]
pub struct SamplingDesign {
    population: String,
    roles: RoleAssignment,
    params: DesignParams,
    strata: BinRule,
    stratum_of: Vec<usize>,
    stratum_members: Vec<Vec<usize>>,
    stratum_targets: Vec<usize>,
    quota_rule: BinRule,
    bin_of: Vec<usize>,
    quota_caps: Vec<usize>,
    low_group: Vec<bool>,
    index: HashMap<String, usize>,
}

pub fn build_design(
    frame: &PopulationFrame,
    roles: RoleAssignment,
    params: DesignParams,
) -> Result<SamplingDesign> {
    params.validate()?;
    let strat_values = frame.z_column(roles.stratifier)?;
    let aux_values = frame.z_column(roles.auxiliary)?;

    let strata = quantile_bins(&strat_values, params.k_strata)?;
    let stratum_targets = proportional_targets(strata.population_counts(), params.n_target)?;
    let stratum_of: Vec<usize> = strat_values.iter().map(|&v| strata.bin_of(v)).collect();
    let mut stratum_members = vec![Vec::new(); params.k_strata];
    for (i, &s) in stratum_of.iter().enumerate() {
        stratum_members[s].push(i);
    }

    let quota_rule = quantile_bins(&aux_values, params.k_bins)?;
    let quota_caps = proportional_targets(quota_rule.population_counts(), params.n_target)?;
    let bin_of = aux_values.iter().map(|&v| quota_rule.bin_of(v)).collect();

    let n = frame.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| {
        aux_values[i]
            .total_cmp(&aux_values[j])
            .then_with(|| frame.record(i).school_id.cmp(&frame.record(j).school_id))
    });
    let mut low_group = vec![false; n];
    for &i in &order[..n / 2] {
        low_group[i] = true;
    }

    let index = frame
        .records()
        .iter()
        .enumerate()
        .map(|(i, r)| (r.school_id.clone(), i))
        .collect();

    Ok(SamplingDesign {
        population: frame.name().to_string(),
        roles,
        params,
        strata,
        stratum_of,
        stratum_members,
        stratum_targets,
        quota_rule,
        bin_of,
        quota_caps,
        low_group,
        index,
    })
}

impl SamplingDesign {
    pub fn population(&self) -> &str {
        &self.population
    }

    pub fn roles(&self) -> RoleAssignment {
        self.roles
    }

    pub fn params(&self) -> &DesignParams {
        &self.params
    }

    pub fn n_target(&self) -> usize {
        self.params.n_target
    }

    pub fn population_size(&self) -> usize {
        self.stratum_of.len()
    }

    pub fn strata(&self) -> &BinRule {
        &self.strata
    }

    pub fn n_strata(&self) -> usize {
        self.stratum_targets.len()
    }

    pub fn stratum_targets(&self) -> &[usize] {
        &self.stratum_targets
    }

    /// Record indices in each stratum, in frame order.
    pub fn stratum_members(&self) -> &[Vec<usize>] {
        &self.stratum_members
    }

    pub fn quota_rule(&self) -> &BinRule {
        &self.quota_rule
    }

    pub fn n_bins(&self) -> usize {
        self.quota_caps.len()
    }

    pub fn quota_caps(&self) -> &[usize] {
        &self.quota_caps
    }

    pub fn stratum_of(&self, school: usize) -> usize {
        self.stratum_of[school]
    }

    pub fn bin_of(&self, school: usize) -> usize {
        self.bin_of[school]
    }

    /// Whether the school is among the `floor(N/2)` lowest on the auxiliary variable.
    pub fn in_bottom_half(&self, school: usize) -> bool {
        self.low_group[school]
    }

    pub fn bottom_half_size(&self) -> usize {
        self.low_group.iter().filter(|&&b| b).count()
    }

    pub fn probability_of(&self, school: usize) -> f64 {
        if self.low_group[school] {
            self.params.p_low
        } else {
            self.params.p_high
        }
    }

    fn lookup(&self, school_id: &str) -> Result<usize> {
        self.index
            .get(school_id)
            .copied()
            .ok_or_else(|| Error::UnknownSchool(school_id.to_string()))
    }

    pub fn stratum_of_id(&self, school_id: &str) -> Result<usize> {
        Ok(self.stratum_of(self.lookup(school_id)?))
    }

    pub fn bin_of_id(&self, school_id: &str) -> Result<usize> {
        Ok(self.bin_of(self.lookup(school_id)?))
    }

    pub fn agreement_probability(&self, school_id: &str) -> Result<f64> {
        Ok(self.probability_of(self.lookup(school_id)?))
    }

    pub fn is_feasible(&self) -> bool {
        self.params.is_feasible(self.population_size())
    }
}
