//! Per-(student, skill) knowledge estimates.
//!
//! The mean estimators average a model's per-attempt correctness
//! predictions over every attempt a student made on a skill. The final
//! estimators take the classic end-of-practice outputs of BKT and PFA.

use std::collections::BTreeMap;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::bkt::{self, BktError, BktModel, BktTrace};
use crate::dataset::StudentSequence;
use crate::pfa::{self, PfaParams};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Prediction {
    Valid(f64),
    /// The model could not produce a usable probability for this attempt.
    Invalid,
}

impl Prediction {
    pub fn from_probability(p: f64) -> Self {
        if p.is_finite() && (0.0..=1.0).contains(&p) {
            Prediction::Valid(p)
        } else {
            Prediction::Invalid
        }
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Prediction::Valid(p) => Some(p),
            Prediction::Invalid => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttemptPrediction {
    pub student_id: String,
    pub skill_id: String,
    pub item_id: String,
    pub probability: Prediction,
}

pub fn count_invalid(predictions: &[AttemptPrediction]) -> usize {
    predictions
        .iter()
        .filter(|p| p.probability == Prediction::Invalid)
        .count()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EstimatorKind {
    #[serde(rename = "mean-DKT")]
    MeanDkt,
    #[serde(rename = "mean-DKVMN")]
    MeanDkvmn,
    #[serde(rename = "PFA")]
    Pfa,
    #[serde(rename = "mean-PFA")]
    MeanPfa,
    #[serde(rename = "BKT")]
    Bkt,
    #[serde(rename = "mean-BKT")]
    MeanBkt,
}

impl EstimatorKind {
    /// All six, in the conventional reporting order.
    pub const ALL: [EstimatorKind; 6] = [
        EstimatorKind::MeanDkt,
        EstimatorKind::MeanDkvmn,
        EstimatorKind::Pfa,
        EstimatorKind::MeanPfa,
        EstimatorKind::Bkt,
        EstimatorKind::MeanBkt,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            EstimatorKind::MeanDkt => "mean-DKT",
            EstimatorKind::MeanDkvmn => "mean-DKVMN",
            EstimatorKind::Pfa => "PFA",
            EstimatorKind::MeanPfa => "mean-PFA",
            EstimatorKind::Bkt => "BKT",
            EstimatorKind::MeanBkt => "mean-BKT",
        }
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EstimatorKind::ALL
            .into_iter()
            .find(|k| k.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown estimator `{s}`"))
    }
}

/// Estimates keyed by (student_id, skill_id). A missing key is an absent
/// estimate.
#[derive(Debug, Clone, PartialEq)]
pub struct KnowledgeTable {
    pub estimator: EstimatorKind,
    pub entries: BTreeMap<(String, String), f64>,
}

impl KnowledgeTable {
    pub fn new(estimator: EstimatorKind) -> Self {
        KnowledgeTable {
            estimator,
            entries: BTreeMap::new(),
        }
    }

    pub fn get(&self, student_id: &str, skill_id: &str) -> Option<f64> {
        self.entries
            .get(&(student_id.to_string(), skill_id.to_string()))
            .copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Rows `estimator,student_id,skill_id,estimate`, no header.
    pub fn write_rows<W: Write>(&self, w: &mut csv::Writer<W>) -> csv::Result<()> {
        for ((student, skill), v) in &self.entries {
            w.write_record([self.estimator.name(), student, skill, &v.to_string()])?;
        }
        Ok(())
    }
}

pub fn write_tables_csv<W: Write>(sink: W, tables: &[KnowledgeTable]) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["estimator", "student_id", "skill_id", "estimate"])?;
    for t in tables {
        t.write_rows(&mut w)?;
    }
    w.flush()?;
    Ok(())
}

/// Sum of values in ascending order, so the mean does not depend on the
/// order predictions arrived in.
fn ordered_mean(mut values: Vec<f64>) -> f64 {
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / values.len() as f64
}

/// Mean of the valid predictions per (student, skill). Invalid
/// predictions are left out of both numerator and denominator.
pub fn mean_aggregate(estimator: EstimatorKind, predictions: &[AttemptPrediction]) -> KnowledgeTable {
    let mut groups: BTreeMap<(String, String), Vec<f64>> = BTreeMap::new();
    for p in predictions {
        if let Some(v) = p.probability.value() {
            groups
                .entry((p.student_id.clone(), p.skill_id.clone()))
                .or_default()
                .push(v);
        }
    }
    KnowledgeTable {
        estimator,
        entries: groups.into_iter().map(|(k, v)| (k, ordered_mean(v))).collect(),
    }
}

/// BKT traces per (student_id, skill_id), for every pair with at least
/// one attempt.
pub fn bkt_traces(
    sequences: &[StudentSequence],
    model: &BktModel,
) -> Result<BTreeMap<(String, String), BktTrace>, BktError> {
    let mut out = BTreeMap::new();
    for seq in sequences {
        for (skill, skill_id) in model.skill_ids.iter().enumerate() {
            let outcomes = seq.skill_outcomes(skill);
            if outcomes.is_empty() {
                continue;
            }
            let trace = bkt::trace_student(&outcomes, model.params_for(skill))?;
            out.insert((seq.student_id.clone(), skill_id.clone()), trace);
        }
    }
    Ok(out)
}

/// Knowledge probability after the last attempt.
pub fn final_estimate_bkt(traces: &BTreeMap<(String, String), BktTrace>) -> KnowledgeTable {
    KnowledgeTable {
        estimator: EstimatorKind::Bkt,
        entries: traces
            .iter()
            .filter_map(|(k, t)| t.final_knowledge().map(|v| (k.clone(), v)))
            .collect(),
    }
}

/// Mean of the per-attempt predicted correctness (not knowledge).
pub fn mean_estimate_bkt(traces: &BTreeMap<(String, String), BktTrace>) -> KnowledgeTable {
    KnowledgeTable {
        estimator: EstimatorKind::MeanBkt,
        entries: traces
            .iter()
            .filter(|(_, t)| !t.is_empty())
            .map(|(k, t)| {
                (
                    k.clone(),
                    ordered_mean(t.steps.iter().map(|s| s.p_correct_pred).collect()),
                )
            })
            .collect(),
    }
}

fn pfa_traces(sequences: &[StudentSequence], params: &PfaParams) -> Vec<((String, String), pfa::PfaTrace)> {
    let mut out = Vec::new();
    for seq in sequences {
        for (skill, skill_id) in params.skill_ids.iter().enumerate() {
            let outcomes = seq.skill_outcomes(skill);
            if outcomes.is_empty() {
                continue;
            }
            out.push((
                (seq.student_id.clone(), skill_id.clone()),
                pfa::trace_student(&outcomes, params.for_skill(skill)),
            ));
        }
    }
    out
}

/// logistic(beta + gamma * s_total + rho * f_total) over the full history.
pub fn final_estimate_pfa(sequences: &[StudentSequence], params: &PfaParams) -> KnowledgeTable {
    KnowledgeTable {
        estimator: EstimatorKind::Pfa,
        entries: pfa_traces(sequences, params)
            .into_iter()
            .map(|(k, t)| (k, t.final_probability))
            .collect(),
    }
}

pub fn mean_estimate_pfa(sequences: &[StudentSequence], params: &PfaParams) -> KnowledgeTable {
    KnowledgeTable {
        estimator: EstimatorKind::MeanPfa,
        entries: pfa_traces(sequences, params)
            .into_iter()
            .map(|(k, t)| (k, ordered_mean(t.predictions)))
            .collect(),
    }
}
