//! Normalized sufficiency / comprehensiveness (hard and soft), AOPC,
//! diagnosticity and the rank-sum significance test.
//!
//! Every metric is normalized by the gap between the full-input likelihood
//! and the all-zero-input likelihood of the predicted class. When that gap
//! is at most [`DEGENERATE_GAP`] the normalization is undefined and the
//! instance is excluded rather than reported.

mod ranksum;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use ranksum::{midranks, rank_sum_test, EXACT_LIMIT};

/// Smallest usable `p(ŷ|X) − p(ŷ|0)`.
pub const DEGENERATE_GAP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Metric {
    #[serde(rename = "NS")]
    Ns,
    #[serde(rename = "NC")]
    Nc,
    #[serde(rename = "SoftNS")]
    SoftNs,
    #[serde(rename = "SoftNC")]
    SoftNc,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Ns, Metric::Nc, Metric::SoftNs, Metric::SoftNc];

    pub fn is_soft(self) -> bool {
        matches!(self, Metric::SoftNs | Metric::SoftNc)
    }

    /// Soft metric paired with a hard one, and vice versa.
    pub fn counterpart(self) -> Metric {
        match self {
            Metric::Ns => Metric::SoftNs,
            Metric::Nc => Metric::SoftNc,
            Metric::SoftNs => Metric::Ns,
            Metric::SoftNc => Metric::Nc,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(match self {
            Metric::Ns => "NS",
            Metric::Nc => "NC",
            Metric::SoftNs => "SoftNS",
            Metric::SoftNc => "SoftNC",
        })
    }
}

impl FromStr for Metric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NS" => Ok(Metric::Ns),
            "NC" => Ok(Metric::Nc),
            "SoftNS" => Ok(Metric::SoftNs),
            "SoftNC" => Ok(Metric::SoftNc),
            other => Err(Error::Data(format!("unknown metric '{other}'"))),
        }
    }
}

/// `p(ŷ|X)`, `p(ŷ|perturbed)` and `p(ŷ|0)` for one instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LikelihoodTriple {
    pub p_full: f64,
    pub p_perturbed: f64,
    pub p_zero: f64,
}

impl LikelihoodTriple {
    pub fn new(p_full: f64, p_perturbed: f64, p_zero: f64) -> Result<Self> {
        for p in [p_full, p_perturbed, p_zero] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::NumericInput(format!("likelihood {p} outside [0, 1]")));
            }
        }
        Ok(LikelihoodTriple {
            p_full,
            p_perturbed,
            p_zero,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Exclusion {
    /// `p(ŷ|X) ≤ p(ŷ|0) + DEGENERATE_GAP`.
    DegenerateBaseline,
}

impl fmt::Display for Exclusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exclusion::DegenerateBaseline => f.write_str("degenerate_baseline"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Outcome {
    Value(f64),
    Excluded(Exclusion),
}

impl Outcome {
    pub fn value(self) -> Option<f64> {
        match self {
            Outcome::Value(v) => Some(v),
            Outcome::Excluded(_) => None,
        }
    }
}

/// `1 − S(X, ŷ, 0) = max(0, p_full − p_zero)`, or `None` when degenerate.
pub fn baseline_gap(p_full: f64, p_zero: f64) -> Option<f64> {
    let gap = (p_full - p_zero).max(0.0);
    (gap > DEGENERATE_GAP).then_some(gap)
}

fn sufficiency_from_drop(drop: f64, gap: f64) -> f64 {
    // (S − S0)/(1 − S0) with S = 1 − drop and S0 = 1 − gap
    ((gap - drop) / gap).clamp(0.0, 1.0)
}

fn comprehensiveness_from_drop(drop: f64, gap: f64) -> f64 {
    (drop / gap).clamp(0.0, 1.0)
}

fn likelihood_drop(p_full: f64, p_perturbed: f64) -> f64 {
    (p_full - p_perturbed).max(0.0)
}

pub fn normalized_sufficiency(t: &LikelihoodTriple) -> Outcome {
    match baseline_gap(t.p_full, t.p_zero) {
        None => Outcome::Excluded(Exclusion::DegenerateBaseline),
        Some(gap) => Outcome::Value(sufficiency_from_drop(likelihood_drop(t.p_full, t.p_perturbed), gap)),
    }
}

pub fn normalized_comprehensiveness(t: &LikelihoodTriple) -> Outcome {
    match baseline_gap(t.p_full, t.p_zero) {
        None => Outcome::Excluded(Exclusion::DegenerateBaseline),
        Some(gap) => Outcome::Value(comprehensiveness_from_drop(
            likelihood_drop(t.p_full, t.p_perturbed),
            gap,
        )),
    }
}

/// How Monte Carlo samples are combined before the soft metrics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SoftAggregate {
    /// Average `p(ŷ|X′)` over masks, then apply the metric once.
    #[default]
    MeanProbability,
    /// Apply the metric per mask and average the values.
    MeanMetric,
}

impl FromStr for SoftAggregate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "mean_probability" => Ok(SoftAggregate::MeanProbability),
            "mean_metric" => Ok(SoftAggregate::MeanMetric),
            other => Err(Error::Parameter(format!("unknown soft aggregation '{other}'"))),
        }
    }
}

impl fmt::Display for SoftAggregate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SoftAggregate::MeanProbability => "mean_probability",
            SoftAggregate::MeanMetric => "mean_metric",
        })
    }
}

fn soft_metric(
    p_full: f64,
    sample_probs: &[f64],
    p_zero: f64,
    aggregate: SoftAggregate,
    per_drop: fn(f64, f64) -> f64,
) -> Result<Outcome> {
    if sample_probs.is_empty() {
        return Err(Error::Parameter("soft metrics need at least one sample".into()));
    }
    LikelihoodTriple::new(p_full, p_full, p_zero)?;
    if let Some(p) = sample_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::NumericInput(format!("likelihood {p} outside [0, 1]")));
    }
    let Some(gap) = baseline_gap(p_full, p_zero) else {
        return Ok(Outcome::Excluded(Exclusion::DegenerateBaseline));
    };
    let m = sample_probs.len() as f64;
    let value = match aggregate {
        SoftAggregate::MeanProbability => {
            let mean = sample_probs.iter().sum::<f64>() / m;
            per_drop(likelihood_drop(p_full, mean), gap)
        }
        SoftAggregate::MeanMetric => {
            sample_probs
                .iter()
                .map(|&p| per_drop(likelihood_drop(p_full, p), gap))
                .sum::<f64>()
                / m
        }
    };
    Ok(Outcome::Value(value))
}

/// Soft normalized sufficiency from retain-mode sample likelihoods.
pub fn soft_ns(p_full: f64, soft_retain_probs: &[f64], p_zero: f64) -> Result<Outcome> {
    soft_ns_with(p_full, soft_retain_probs, p_zero, SoftAggregate::MeanProbability)
}

/// Soft normalized comprehensiveness from remove-mode sample likelihoods.
pub fn soft_nc(p_full: f64, soft_remove_probs: &[f64], p_zero: f64) -> Result<Outcome> {
    soft_nc_with(p_full, soft_remove_probs, p_zero, SoftAggregate::MeanProbability)
}

pub fn soft_ns_with(
    p_full: f64,
    probs: &[f64],
    p_zero: f64,
    aggregate: SoftAggregate,
) -> Result<Outcome> {
    soft_metric(p_full, probs, p_zero, aggregate, sufficiency_from_drop)
}

pub fn soft_nc_with(
    p_full: f64,
    probs: &[f64],
    p_zero: f64,
    aggregate: SoftAggregate,
) -> Result<Outcome> {
    soft_metric(p_full, probs, p_zero, aggregate, comprehensiveness_from_drop)
}

/// Mean of a metric over the rationale-ratio grid.
pub fn aopc(values: &[Option<f64>], grid_len: usize) -> Result<f64> {
    if values.len() != grid_len || grid_len == 0 {
        return Err(Error::Parameter(format!(
            "AOPC needs one value per ratio: got {} for a grid of {grid_len}",
            values.len()
        )));
    }
    let mut total = 0.0;
    for (i, v) in values.iter().enumerate() {
        match v {
            Some(v) => total += v,
            None => {
                return Err(Error::Parameter(format!("AOPC value for ratio #{i} is missing")))
            }
        }
    }
    Ok(total / grid_len as f64)
}

/// Win/tie counts over explanation pairs `(u, v)`, `u` from an attribution
/// method and `v` from a random explanation of the same instance.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiagnosticityCount {
    pub pairs: usize,
    pub wins: usize,
    pub ties: usize,
    pub value: f64,
}

/// Fraction of pairs where `u − v > epsilon`; ties count as losses but are
/// tallied separately.
pub fn diagnosticity(pairs: &[(f64, f64)], epsilon: f64) -> Result<DiagnosticityCount> {
    if pairs.is_empty() {
        return Err(Error::Parameter("diagnosticity needs at least one pair".into()));
    }
    if !(0.0..=1.0).contains(&epsilon) {
        return Err(Error::Parameter(format!("epsilon {epsilon} outside [0, 1]")));
    }
    let wins = pairs.iter().filter(|(u, v)| u - v > epsilon).count();
    let ties = pairs.iter().filter(|(u, v)| u == v).count();
    Ok(DiagnosticityCount {
        pairs: pairs.len(),
        wins,
        ties,
        value: wins as f64 / pairs.len() as f64,
    })
}

/// One row of the diagnosticity summary.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticityReport {
    pub dataset: String,
    pub metric: Metric,
    pub fa: String,
    /// `aopc`, `soft`, or the rationale ratio for per-length rows.
    pub scope: String,
    pub pairs: usize,
    pub wins: usize,
    pub ties: usize,
    pub diagnosticity: f64,
    /// Rank-sum p-value against the counterpart metric, when computed.
    pub p_value: Option<f64>,
}
