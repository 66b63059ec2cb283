//! One paired SRS/SRSQ recruitment replication.
//!
//! Schools are shuffled within strata, pooled by within-stratum rank (with
//! the strata at each rank in random order) and given one uniform agreement
//! draw each. Both methods then walk the same roster: SRS recruits every
//! willing school until its stratum is full; SRSQ additionally screens each
//! contacted school against the quota for its auxiliary-variable bin.

use std::fmt;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::design::SamplingDesign;
use crate::error::{Error, Result};
use crate::population::{PopulationFrame, Variable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "SRS")]
    Srs,
    #[serde(rename = "SRSQ")]
    Srsq,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Srs => "SRS",
            Method::Srsq => "SRSQ",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Number of schools reaching each recruitment stage.
///
/// `contacted = excluded_by_quota + invited` and `invited = declined + agreed`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageCounts {
    pub contacted: usize,
    pub excluded_by_quota: usize,
    pub invited: usize,
    pub declined: usize,
    pub agreed: usize,
}

impl StageCounts {
    pub fn is_consistent(&self) -> bool {
        self.contacted == self.excluded_by_quota + self.invited
            && self.invited == self.declined + self.agreed
    }

    fn exclude(&mut self) {
        self.contacted += 1;
        self.excluded_by_quota += 1;
    }

    fn decline(&mut self) {
        self.contacted += 1;
        self.invited += 1;
        self.declined += 1;
    }

    fn agree(&mut self) {
        self.contacted += 1;
        self.invited += 1;
        self.agreed += 1;
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RosterEntry {
    /// Record index in the population frame.
    pub school: usize,
    pub stratum: usize,
    /// 1-based rank within the stratum.
    pub rank: usize,
    /// Uniform draw in `[0, 1)`; the school agrees iff `draw < p`.
    pub draw: f64,
}

/// The single recruitment sequence shared by both methods.
#[derive(Debug, Clone, PartialEq)]
pub struct OrderedRoster {
    entries: Vec<RosterEntry>,
}

impl OrderedRoster {
    pub fn entries(&self) -> &[RosterEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Builds a roster from an explicit school sequence and draws. Ranks are
    /// assigned by order of appearance within each stratum; the sequence must
    /// cover every school once and be ordered by those ranks.
    pub fn from_sequence(
        design: &SamplingDesign,
        schools: &[usize],
        draws: &[f64],
    ) -> Result<Self> {
        let n = design.population_size();
        if schools.len() != n || draws.len() != n {
            return Err(Error::InvalidParameter(format!(
                "roster needs {n} schools and draws, got {} and {}",
                schools.len(),
                draws.len()
            )));
        }
        let mut seen = vec![false; n];
        let mut next_rank = vec![1usize; design.n_strata()];
        let mut entries = Vec::with_capacity(n);
        for (&school, &draw) in schools.iter().zip(draws) {
            if school >= n || std::mem::replace(&mut seen[school], true) {
                return Err(Error::InvalidParameter(format!(
                    "school index {school} out of range or repeated"
                )));
            }
            if !(0.0..1.0).contains(&draw) {
                return Err(Error::InvalidParameter(format!("draw {draw} not in [0,1)")));
            }
            let stratum = design.stratum_of(school);
            let rank = next_rank[stratum];
            next_rank[stratum] += 1;
            if entries.last().is_some_and(|e: &RosterEntry| e.rank > rank) {
                return Err(Error::InvalidParameter(
                    "sequence is not ordered by within-stratum rank".into(),
                ));
            }
            entries.push(RosterEntry {
                school,
                stratum,
                rank,
                draw,
            });
        }
        Ok(Self { entries })
    }

    /// Checks the ordering invariants against a design.
    pub fn is_valid_for(&self, design: &SamplingDesign) -> bool {
        let schools: Vec<usize> = self.entries.iter().map(|e| e.school).collect();
        let draws: Vec<f64> = self.entries.iter().map(|e| e.draw).collect();
        match Self::from_sequence(design, &schools, &draws) {
            Ok(rebuilt) => rebuilt == *self,
            Err(_) => false,
        }
    }
}

/// Randomly orders schools for recruitment: uniform permutation within each
/// stratum, pooled by rank, strata at each rank in uniform random order,
/// then one agreement draw per school in roster order.
pub fn recruitment_order<R: Rng + ?Sized>(design: &SamplingDesign, rng: &mut R) -> OrderedRoster {
    let shuffled: Vec<Vec<usize>> = design
        .stratum_members()
        .iter()
        .map(|members| {
            let mut m = members.clone();
            m.shuffle(rng);
            m
        })
        .collect();
    let deepest = shuffled.iter().map(Vec::len).max().unwrap_or(0);
    let mut entries = Vec::with_capacity(design.population_size());
    let mut present = Vec::with_capacity(shuffled.len());
    for r in 0..deepest {
        present.clear();
        present.extend((0..shuffled.len()).filter(|&s| shuffled[s].len() > r));
        present.shuffle(rng);
        for &s in &present {
            entries.push(RosterEntry {
                school: shuffled[s][r],
                stratum: s,
                rank: r + 1,
                draw: 0.0,
            });
        }
    }
    for e in &mut entries {
        e.draw = rng.random::<f64>();
    }
    OrderedRoster { entries }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReplicationOutcome {
    pub method: Method,
    /// Record indices of accepted schools, in acceptance order.
    pub accepted: Vec<usize>,
    pub stratum_fill: Vec<usize>,
    /// Schools contacted per stratum.
    pub stratum_contacted: Vec<usize>,
    pub bin_fill: Vec<usize>,
    pub counts: StageCounts,
    /// Mean z-value of each variable over accepted schools; `None` if none were accepted.
    pub sample_means: Option<[f64; 3]>,
}

impl ReplicationOutcome {
    pub fn achieved_size(&self) -> usize {
        self.accepted.len()
    }

    pub fn sample_mean(&self, var: Variable) -> Option<f64> {
        self.sample_means.map(|m| m[var.index()])
    }

    pub fn accepted_ids<'a>(&self, frame: &'a PopulationFrame) -> Vec<&'a str> {
        self.accepted
            .iter()
            .map(|&i| frame.record(i).school_id.as_str())
            .collect()
    }

    /// Field-for-field equality ignoring the method tag.
    pub fn same_selection(&self, other: &ReplicationOutcome) -> bool {
        self.accepted == other.accepted
            && self.stratum_fill == other.stratum_fill
            && self.stratum_contacted == other.stratum_contacted
            && self.bin_fill == other.bin_fill
            && self.counts == other.counts
            && self.sample_means == other.sample_means
    }
}

fn walk(
    roster: &OrderedRoster,
    design: &SamplingDesign,
    frame: &PopulationFrame,
    method: Method,
) -> ReplicationOutcome {
    let targets = design.stratum_targets();
    let caps = design.quota_caps();
    let mut stratum_fill = vec![0; targets.len()];
    let mut stratum_contacted = vec![0; targets.len()];
    let mut bin_fill = vec![0; caps.len()];
    let mut counts = StageCounts::default();
    let mut accepted = Vec::with_capacity(design.n_target());
    let mut open = targets.iter().filter(|&&t| t > 0).count();

    for e in roster.entries() {
        if open == 0 {
            break;
        }
        let s = e.stratum;
        if stratum_fill[s] >= targets[s] {
            continue;
        }
        stratum_contacted[s] += 1;
        let bin = design.bin_of(e.school);
        if method == Method::Srsq && bin_fill[bin] >= caps[bin] {
            counts.exclude();
            continue;
        }
        if e.draw < design.probability_of(e.school) {
            counts.agree();
            accepted.push(e.school);
            stratum_fill[s] += 1;
            bin_fill[bin] += 1;
            if stratum_fill[s] == targets[s] {
                open -= 1;
            }
            debug_assert!(method == Method::Srs || bin_fill[bin] <= caps[bin]);
        } else {
            counts.decline();
        }
    }

    let sample_means = if accepted.is_empty() {
        None
    } else {
        let mut sums = [0.0; 3];
        for &i in &accepted {
            let z = frame
                .record(i)
                .z_values()
                .expect("designs are built on standardized frames");
            for (s, v) in sums.iter_mut().zip(z) {
                *s += v;
            }
        }
        let n = accepted.len() as f64;
        Some(sums.map(|s| s / n))
    };

    ReplicationOutcome {
        method,
        accepted,
        stratum_fill,
        stratum_contacted,
        bin_fill,
        counts,
        sample_means,
    }
}

/// Stratified random sampling: recruit willing schools in roster order
/// until every stratum target is met or the roster runs out. Schools in a
/// stratum that is already full are passed over without being contacted.
pub fn run_srs(
    roster: &OrderedRoster,
    design: &SamplingDesign,
    frame: &PopulationFrame,
) -> ReplicationOutcome {
    walk(roster, design, frame, Method::Srs)
}

/// As [`run_srs`], but a contacted school whose quota bin is already at its
/// cap is excluded before being invited.
pub fn run_srsq(
    roster: &OrderedRoster,
    design: &SamplingDesign,
    frame: &PopulationFrame,
) -> ReplicationOutcome {
    walk(roster, design, frame, Method::Srsq)
}

/// Independent generator for one (population, permutation, replication) cell.
pub fn replication_rng(
    master_seed: u64,
    population: &str,
    permutation: usize,
    replication: u64,
) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(b"srsq/replication/v1");
    h.update(master_seed.to_le_bytes());
    h.update((population.len() as u64).to_le_bytes());
    h.update(population.as_bytes());
    h.update((permutation as u64).to_le_bytes());
    h.update(replication.to_le_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedOutcome {
    pub srs: ReplicationOutcome,
    pub srsq: ReplicationOutcome,
}

/// Builds one roster from the keyed stream and runs both methods on it.
pub fn run_replication(
    frame: &PopulationFrame,
    design: &SamplingDesign,
    replication_index: u64,
    master_seed: u64,
) -> PairedOutcome {
    let mut rng = replication_rng(
        master_seed,
        design.population(),
        design.roles().permutation_index(),
        replication_index,
    );
    let roster = recruitment_order(design, &mut rng);
    PairedOutcome {
        srs: run_srs(&roster, design, frame),
        srsq: run_srsq(&roster, design, frame),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::{build_design, DesignParams, RoleAssignment};
    use crate::population::{standardize, SchoolRecord};

    fn frame_from(cols: Vec<[f64; 3]>) -> PopulationFrame {
        let recs = cols
            .into_iter()
            .enumerate()
            .map(|(i, v)| SchoolRecord::new(format!("S{i:04}"), "G", v))
            .collect();
        standardize(PopulationFrame::new("toy", recs).unwrap()).unwrap()
    }

    /// Stratifier a, auxiliary b, unobserved c.
    fn abc() -> RoleAssignment {
        RoleAssignment::new(Variable::A, Variable::B, Variable::C).unwrap()
    }

    fn grid(n_strata: usize, per: usize) -> PopulationFrame {
        frame_from(
            (0..n_strata * per)
                .map(|i| [i as f64, ((i * 7919) % 997) as f64, (i % 13) as f64])
                .collect(),
        )
    }

    #[test]
    fn roster_layout_by_rank() {
        let f = grid(5, 4);
        let params = DesignParams {
            n_target: 10,
            ..DesignParams::default()
        };
        let d = build_design(&f, abc(), params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let roster = recruitment_order(&d, &mut rng);
        assert_eq!(roster.len(), 20);
        for (chunk, rank) in roster.entries().chunks(5).zip(1..) {
            let mut strata: Vec<_> = chunk.iter().map(|e| e.stratum).collect();
            strata.sort();
            assert_eq!(strata, [0, 1, 2, 3, 4]);
            assert!(chunk.iter().all(|e| e.rank == rank));
        }
        assert!(roster.is_valid_for(&d));
        assert!(roster
            .entries()
            .iter()
            .all(|e| (0.0..1.0).contains(&e.draw)));
    }

    #[test]
    fn single_stratum_roster_is_a_permutation() {
        let f = grid(1, 12);
        let params = DesignParams {
            n_target: 4,
            k_strata: 1,
            k_bins: 2,
            ..DesignParams::default()
        };
        let d = build_design(&f, abc(), params).unwrap();
        let roster = recruitment_order(&d, &mut ChaCha8Rng::seed_from_u64(1));
        let ranks: Vec<_> = roster.entries().iter().map(|e| e.rank).collect();
        assert_eq!(ranks, (1..=12).collect::<Vec<_>>());
        let mut schools: Vec<_> = roster.entries().iter().map(|e| e.school).collect();
        schools.sort();
        assert_eq!(schools, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn first_stratum_is_uniform() {
        let f = grid(5, 4);
        let params = DesignParams {
            n_target: 10,
            ..DesignParams::default()
        };
        let d = build_design(&f, abc(), params).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let mut first = [0usize; 5];
        for _ in 0..1000 {
            first[recruitment_order(&d, &mut rng).entries()[0].stratum] += 1;
        }
        for c in first {
            let freq = c as f64 / 1000.0;
            assert!((freq - 0.2).abs() <= 0.04, "{first:?}");
        }
    }

    #[test]
    fn everyone_agrees() {
        let f = grid(5, 100);
        let params = DesignParams {
            p_low: 1.0,
            p_high: 1.0,
            ..DesignParams::default()
        };
        let d = build_design(&f, abc(), params).unwrap();
        let out = run_replication(&f, &d, 0, 9);
        assert_eq!(out.srs.counts.contacted, 100);
        assert_eq!(out.srs.counts.agreed, 100);
        assert_eq!(out.srs.counts.declined, 0);
        assert_eq!(out.srs.stratum_fill, [20; 5]);
        assert!(out.srsq.counts.is_consistent());
        assert_eq!(out.srsq.counts.agreed, 100);
    }

    /// Ten schools, one stratum, two quota bins of five; target 4, caps [2, 2].
    #[test]
    fn toy_walk_matches_hand_simulation() {
        let f = frame_from(
            (0..10)
                .map(|i| [(i % 3) as f64, (i + 1) as f64, i as f64 * 0.5 + 2.0])
                .collect(),
        );
        let params = DesignParams {
            n_target: 4,
            k_strata: 1,
            k_bins: 2,
            p_low: 0.5,
            p_high: 0.5,
        };
        let d = build_design(&f, abc(), params).unwrap();
        assert_eq!(d.quota_caps(), [2, 2]);
        let order = [9, 8, 0, 7, 1, 6, 2, 5, 3, 4];
        let draws = [0.1, 0.9, 0.2, 0.3, 0.6, 0.1, 0.4, 0.2, 0.1, 0.0];
        let roster = OrderedRoster::from_sequence(&d, &order, &draws).unwrap();

        let srs = run_srs(&roster, &d, &f);
        assert_eq!(srs.accepted, [9, 0, 7, 6]);
        assert_eq!(
            srs.counts,
            StageCounts {
                contacted: 6,
                excluded_by_quota: 0,
                invited: 6,
                declined: 2,
                agreed: 4
            }
        );

        let srsq = run_srsq(&roster, &d, &f);
        assert_eq!(srsq.accepted, [9, 0, 7, 2]);
        assert_eq!(
            srsq.counts,
            StageCounts {
                contacted: 7,
                excluded_by_quota: 1,
                invited: 6,
                declined: 2,
                agreed: 4
            }
        );
        assert_eq!(srsq.bin_fill, [2, 2]);
        assert_eq!(srsq.accepted_ids(&f), ["S0009", "S0000", "S0007", "S0002"]);
    }

    #[test]
    fn single_bin_quota_never_binds() {
        let f = grid(5, 60);
        let params = DesignParams {
            k_bins: 1,
            ..DesignParams::default()
        };
        let d = build_design(&f, abc(), params).unwrap();
        assert_eq!(d.quota_caps(), [100]);
        for rep in 0..20 {
            let out = run_replication(&f, &d, rep, 77);
            assert!(out.srs.same_selection(&out.srsq));
        }
    }

    #[test]
    fn replications_are_deterministic_and_distinct() {
        let f = grid(5, 80);
        let d = build_design(&f, abc(), DesignParams::default()).unwrap();
        assert_eq!(
            run_replication(&f, &d, 3, 42),
            run_replication(&f, &d, 3, 42)
        );
        assert_ne!(
            run_replication(&f, &d, 3, 42).srs.accepted,
            run_replication(&f, &d, 4, 42).srs.accepted
        );
    }

    #[test]
    fn shortfall_is_recorded_not_resampled() {
        let f = grid(5, 10);
        let d = build_design(&f, abc(), DesignParams::default()).unwrap();
        let out = run_replication(&f, &d, 0, 1);
        assert!(out.srs.achieved_size() < 100);
        assert_eq!(out.srs.counts.contacted, 50);
        assert!(out.srs.counts.is_consistent());
    }

    #[test]
    fn from_sequence_rejects_bad_order() {
        let f = grid(2, 3);
        let params = DesignParams {
            n_target: 2,
            k_strata: 2,
            k_bins: 1,
            ..DesignParams::default()
        };
        let d = build_design(&f, abc(), params).unwrap();
        let draws = [0.5; 6];
        // Stratum 0 holds records 0..3, stratum 1 holds 3..6.
        assert!(OrderedRoster::from_sequence(&d, &[0, 3, 1, 4, 2, 5], &draws).is_ok());
        assert!(OrderedRoster::from_sequence(&d, &[0, 1, 3, 4, 2, 5], &draws).is_err());
        assert!(OrderedRoster::from_sequence(&d, &[0, 3, 1, 4, 2, 2], &draws).is_err());
        assert!(OrderedRoster::from_sequence(&d, &[0, 3, 1, 4, 2], &draws[..5]).is_err());
    }
}
