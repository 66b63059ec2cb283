//! Performance measures over replications.
//!
//! Populations are standardized, so the external validity bias of a method
//! is the expected sample mean. Variance is divide-by-R across replications,
//! which makes `mse == bias_signed^2 + variance` an identity.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::design::{enumerate_role_permutations, Role, RoleAssignment};
use crate::error::{Error, Result};
use crate::recruitment::{Method, ReplicationOutcome};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RoleMetrics {
    pub bias_signed: f64,
    pub bias_abs: f64,
    pub variance: f64,
    pub mse: f64,
}

impl RoleMetrics {
    fn zip(&self, o: &Self, f: &impl Fn(f64, f64) -> f64) -> Self {
        Self {
            bias_signed: f(self.bias_signed, o.bias_signed),
            bias_abs: f(self.bias_abs, o.bias_abs),
            variance: f(self.variance, o.variance),
            mse: f(self.mse, o.mse),
        }
    }

    /// `mse - bias_signed^2 - variance`; zero up to rounding for summaries
    /// produced by [`summarize`].
    pub fn decomposition_residual(&self) -> f64 {
        self.mse - self.bias_signed * self.bias_signed - self.variance
    }
}

/// Mean stage counts per replication.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct MeanCounts {
    pub contacted: f64,
    pub excluded: f64,
    pub invited: f64,
    pub declined: f64,
    pub agreed: f64,
}

impl MeanCounts {
    fn zip(&self, o: &Self, f: &impl Fn(f64, f64) -> f64) -> Self {
        Self {
            contacted: f(self.contacted, o.contacted),
            excluded: f(self.excluded, o.excluded),
            invited: f(self.invited, o.invited),
            declined: f(self.declined, o.declined),
            agreed: f(self.agreed, o.agreed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodSummary {
    /// `None` once summaries for different assignments have been averaged.
    pub roles: Option<RoleAssignment>,
    pub auxiliary: RoleMetrics,
    pub stratifier: RoleMetrics,
    pub unobserved: RoleMetrics,
    pub counts: MeanCounts,
    pub achieved_n: f64,
    pub replications: f64,
    /// Replications that accepted no school; excluded from the moments.
    pub empty_samples: f64,
}

impl MethodSummary {
    pub fn role(&self, role: Role) -> &RoleMetrics {
        match role {
            Role::Auxiliary => &self.auxiliary,
            Role::Stratifier => &self.stratifier,
            Role::Unobserved => &self.unobserved,
        }
    }

    /// Applies `f` to every pair of numeric fields.
    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        Self {
            roles: if self.roles == other.roles {
                self.roles
            } else {
                None
            },
            auxiliary: self.auxiliary.zip(&other.auxiliary, &f),
            stratifier: self.stratifier.zip(&other.stratifier, &f),
            unobserved: self.unobserved.zip(&other.unobserved, &f),
            counts: self.counts.zip(&other.counts, &f),
            achieved_n: f(self.achieved_n, other.achieved_n),
            replications: f(self.replications, other.replications),
            empty_samples: f(self.empty_samples, other.empty_samples),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        self.zip_with(self, |a, _| f(a))
    }

    /// Every numeric field as `(measure, role, value)`, in report order.
    pub fn fields(&self) -> Vec<(&'static str, Option<Role>, f64)> {
        let mut out = Vec::with_capacity(20);
        type Getter = fn(&RoleMetrics) -> f64;
        let per_role: [(&str, Getter); 4] = [
            ("bias_abs", |m| m.bias_abs),
            ("variance", |m| m.variance),
            ("mse", |m| m.mse),
            ("bias_signed", |m| m.bias_signed),
        ];
        for (name, get) in per_role {
            for role in Role::ALL {
                out.push((name, Some(role), get(self.role(role))));
            }
        }
        let c = &self.counts;
        out.extend([
            ("contacted", None, c.contacted),
            ("excluded", None, c.excluded),
            ("invited", None, c.invited),
            ("declined", None, c.declined),
            ("agreed", None, c.agreed),
            ("achieved_n", None, self.achieved_n),
            ("replications", None, self.replications),
            ("empty_samples", None, self.empty_samples),
        ]);
        out
    }
}

fn sorted_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum()
}

fn role_metrics(mut means: Vec<f64>) -> RoleMetrics {
    if means.is_empty() {
        return RoleMetrics {
            bias_signed: f64::NAN,
            bias_abs: f64::NAN,
            variance: f64::NAN,
            mse: f64::NAN,
        };
    }
    // Sorting first makes the result independent of replication order.
    let r = means.len() as f64;
    let mean = sorted_sum(&mut means) / r;
    let variance = means.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / r;
    let mse = means.iter().map(|x| x * x).sum::<f64>() / r;
    RoleMetrics {
        bias_signed: mean,
        bias_abs: mean.abs(),
        variance,
        mse,
    }
}

/// Summarizes replications of a single method under one role assignment.
pub fn summarize(outcomes: &[ReplicationOutcome], roles: RoleAssignment) -> Result<MethodSummary> {
    let first = outcomes.first().ok_or(Error::NoReplications)?;
    if outcomes.iter().any(|o| o.method != first.method) {
        return Err(Error::MixedMethods);
    }
    let filled: Vec<[f64; 3]> = outcomes.iter().filter_map(|o| o.sample_means).collect();
    let column = |role: Role| {
        let idx = roles.variable(role).index();
        role_metrics(filled.iter().map(|m| m[idx]).collect())
    };

    let r = outcomes.len() as f64;
    let total = |f: fn(&ReplicationOutcome) -> usize| {
        outcomes.iter().map(|o| f(o) as u64).sum::<u64>() as f64 / r
    };
    Ok(MethodSummary {
        roles: Some(roles),
        auxiliary: column(Role::Auxiliary),
        stratifier: column(Role::Stratifier),
        unobserved: column(Role::Unobserved),
        counts: MeanCounts {
            contacted: total(|o| o.counts.contacted),
            excluded: total(|o| o.counts.excluded_by_quota),
            invited: total(|o| o.counts.invited),
            declined: total(|o| o.counts.declined),
            agreed: total(|o| o.counts.agreed),
        },
        achieved_n: total(ReplicationOutcome::achieved_size),
        replications: r,
        empty_samples: (outcomes.len() - filled.len()) as f64,
    })
}

/// SRS and SRSQ summaries side by side with their difference (SRSQ - SRS).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub roles: Option<RoleAssignment>,
    pub srs: MethodSummary,
    pub srsq: MethodSummary,
    pub difference: MethodSummary,
}

impl ComparisonReport {
    pub fn summary(&self, method: Method) -> &MethodSummary {
        match method {
            Method::Srs => &self.srs,
            Method::Srsq => &self.srsq,
        }
    }

    /// Plain-text table: bias, variance and MSE by role, then mean counts.
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<36}{:>12}{:>12}{:>12}", "", "SRS", "SRSQ", "SRSQ-SRS");
        let sections: [Column<RoleMetrics>; 3] = [
            ("External validity bias (abs)", |m| m.bias_abs),
            ("Variance", |m| m.variance),
            ("Mean squared error", |m| m.mse),
        ];
        for (title, get) in sections {
            let _ = writeln!(s, "{title}");
            for role in Role::ALL {
                let _ = writeln!(
                    s,
                    "  {:<34}{:>12}{:>12}{:>12}",
                    role.name(),
                    cell(get(self.srs.role(role)), 4),
                    cell(get(self.srsq.role(role)), 4),
                    cell(get(self.difference.role(role)), 4),
                );
            }
        }
        let _ = writeln!(s, "Number of schools");
        let rows: [Column<MethodSummary>; 6] = [
            ("contacted", |m| m.counts.contacted),
            ("excluded due to quotas", |m| m.counts.excluded),
            ("invited", |m| m.counts.invited),
            ("declined", |m| m.counts.declined),
            ("agreed", |m| m.counts.agreed),
            ("achieved sample size", |m| m.achieved_n),
        ];
        for (label, get) in rows {
            let _ = writeln!(
                s,
                "  {:<34}{:>12}{:>12}{:>12}",
                label,
                cell(get(&self.srs), 1),
                cell(get(&self.srsq), 1),
                cell(get(&self.difference), 1),
            );
        }
        s
    }
}

type Column<T> = (&'static str, fn(&T) -> f64);

// Fixed-point cell that never renders a negative zero.
fn cell(x: f64, digits: usize) -> String {
    let s = format!("{x:.digits$}");
    if s.starts_with('-') && s[1..].chars().all(|c| c == '0' || c == '.') {
        s[1..].to_string()
    } else {
        s
    }
}

pub fn compare(srs: &MethodSummary, srsq: &MethodSummary) -> Result<ComparisonReport> {
    if srs.roles != srsq.roles {
        return Err(Error::IncomparableSummaries(
            "role assignments differ".into(),
        ));
    }
    if srs.replications != srsq.replications {
        return Err(Error::IncomparableSummaries(format!(
            "replication counts differ ({} vs {})",
            srs.replications, srsq.replications
        )));
    }
    Ok(ComparisonReport {
        roles: srs.roles,
        srs: srs.clone(),
        srsq: srsq.clone(),
        difference: srsq.zip_with(srs, |q, s| q - s),
    })
}

/// Unweighted mean of every field across reports, aligned by role.
pub fn average_reports(reports: &[ComparisonReport]) -> Result<ComparisonReport> {
    let first = reports.first().ok_or(Error::NoReplications)?;
    let n = reports.len() as f64;
    let mean = |get: fn(&ComparisonReport) -> &MethodSummary| {
        let total = reports[1..].iter().fold(get(first).clone(), |acc, r| {
            acc.zip_with(get(r), |a, b| a + b)
        });
        let mut avg = total.map(|x| x / n);
        if reports.len() > 1 {
            avg.roles = None;
        }
        avg
    };
    Ok(ComparisonReport {
        roles: if reports.len() > 1 { None } else { first.roles },
        srs: mean(|r| &r.srs),
        srsq: mean(|r| &r.srsq),
        difference: mean(|r| &r.difference),
    })
}

/// Averages the six per-assignment reports; each assignment must appear once.
pub fn average_over_permutations(reports: &[ComparisonReport]) -> Result<ComparisonReport> {
    let all = enumerate_role_permutations();
    if reports.len() != all.len() {
        return Err(Error::PermutationSetError(format!(
            "expected {} reports, got {}",
            all.len(),
            reports.len()
        )));
    }
    let mut ordered: Vec<Option<&ComparisonReport>> = vec![None; all.len()];
    for r in reports {
        let roles = r
            .roles
            .ok_or_else(|| Error::PermutationSetError("report has no role assignment".into()))?;
        let slot = &mut ordered[roles.permutation_index() - 1];
        if slot.replace(r).is_some() {
            return Err(Error::PermutationSetError(format!(
                "assignment {} appears twice",
                roles.label()
            )));
        }
    }
    let ordered: Vec<ComparisonReport> = ordered.into_iter().flatten().cloned().collect();
    average_reports(&ordered)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffRow {
    pub measure: String,
    pub role: Option<Role>,
    /// SRSQ - SRS in the first run.
    pub first: f64,
    /// SRSQ - SRS in the second run.
    pub second: f64,
    /// `second - first`.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiffReport {
    pub rows: Vec<DiffRow>,
}

impl DiffReport {
    pub fn row(&self, measure: &str, role: Option<Role>) -> Option<&DiffRow> {
        self.rows
            .iter()
            .find(|r| r.measure == measure && r.role == role)
    }

    /// Largest `|gap|` over rows whose measure is in `measures`.
    pub fn max_abs_gap(&self, measures: &[&str]) -> f64 {
        self.rows
            .iter()
            .filter(|r| measures.contains(&r.measure.as_str()))
            .map(|r| r.gap.abs())
            .fold(0.0, f64::max)
    }

    pub fn to_table(&self, first_label: &str, second_label: &str) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<28}{:>14}{:>14}{:>14}",
            "measure", first_label, second_label, "gap"
        );
        for r in &self.rows {
            let label = match r.role {
                Some(role) => format!("{} {}", r.measure, role),
                None => r.measure.clone(),
            };
            let _ = writeln!(
                s,
                "{:<28}{:>14.4}{:>14.4}{:>14.4}",
                label, r.first, r.second, r.gap
            );
        }
        s
    }
}

/// Gaps between the SRSQ - SRS differences of two independent runs.
pub fn stability_check(first: &ComparisonReport, second: &ComparisonReport) -> DiffReport {
    let rows = first
        .difference
        .fields()
        .into_iter()
        .zip(second.difference.fields())
        .filter(|((name, _, _), _)| !matches!(*name, "replications" | "empty_samples"))
        .map(|((measure, role, a), (_, _, b))| DiffRow {
            measure: measure.to_string(),
            role,
            first: a,
            second: b,
            gap: b - a,
        })
        .collect();
    DiffReport { rows }
}
