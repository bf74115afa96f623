//! Interaction logs and posttest subscores.
//!
//! Everything here is immutable once built. Models consume
//! [`StudentSequence`]s, which hold first attempts only, in the
//! chronological order supplied by the data producer.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const INTERACTION_HEADER: [&str; 6] = [
    "student_id",
    "skill_id",
    "item_id",
    "attempt_number",
    "correct",
    "order_index",
];
pub const POSTTEST_HEADER: [&str; 3] = ["student_id", "skill_id", "score"];

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("missing column `{column}` (row {row})")]
    MissingColumn { column: &'static str, row: usize },
    #[error("row {row}: `correct` must be 0 or 1, found `{value}`")]
    BadBoolean { row: usize, value: String },
    #[error("row {row}: cannot parse `{column}` from `{value}`")]
    BadNumber {
        row: usize,
        column: &'static str,
        value: String,
    },
    #[error("row {row}: attempt_number must be at least 1")]
    BadAttemptNumber { row: usize },
    #[error("row {row}: duplicate (student, item, attempt) key ({student_id}, {item_id}, {attempt_number})")]
    DuplicateAttemptKey {
        row: usize,
        student_id: String,
        item_id: String,
        attempt_number: u32,
    },
    #[error("row {row}: score {score} outside [0, 1]")]
    ScoreOutOfRange { row: usize, score: f64 },
    #[error("row {row}: duplicate posttest entry for ({student_id}, {skill_id})")]
    DuplicateKey {
        row: usize,
        student_id: String,
        skill_id: String,
    },
    #[error("unknown skill `{0}`")]
    UnknownSkill(String),
    #[error("student `{student_id}` has two attempts at order_index {order_index}")]
    DuplicateOrderIndex { student_id: String, order_index: u64 },
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// One attempt by one student at one item.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub student_id: String,
    pub skill_id: String,
    pub item_id: String,
    pub attempt_number: u32,
    pub correct: bool,
    pub order_index: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub skill_id: String,
    /// Dense index of `skill_id` in the catalog the sequence was built with.
    pub skill: usize,
    pub item_id: String,
    pub correct: bool,
}

/// A student's first attempts, in chronological order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StudentSequence {
    pub student_id: String,
    pub steps: Vec<Step>,
}

impl StudentSequence {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    /// Outcomes on one skill, in the order they occurred.
    pub fn skill_outcomes(&self, skill: usize) -> Vec<bool> {
        self.steps
            .iter()
            .filter(|s| s.skill == skill)
            .map(|s| s.correct)
            .collect()
    }
}

/// Lexicographically ordered skill ids with a dense index.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SkillCatalog {
    skills: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

impl SkillCatalog {
    pub fn new<I, S>(skills: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = skills.into_iter().map(Into::into).collect();
        let skills: Vec<String> = set.into_iter().collect();
        let index = skills.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        SkillCatalog { skills, index }
    }

    pub fn from_records(records: &[InteractionRecord]) -> Self {
        Self::new(records.iter().map(|r| r.skill_id.clone()))
    }

    pub fn len(&self) -> usize {
        self.skills.len()
    }

    pub fn is_empty(&self) -> bool {
        self.skills.is_empty()
    }

    pub fn skills(&self) -> &[String] {
        &self.skills
    }

    pub fn index_of(&self, skill_id: &str) -> Option<usize> {
        self.index.get(skill_id).copied()
    }

    pub fn name(&self, index: usize) -> &str {
        &self.skills[index]
    }
}

/// Per-skill posttest subscores: fraction of that skill's items answered correctly.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PosttestScores {
    pub entries: BTreeMap<(String, String), f64>,
}

impl PosttestScores {
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

    pub fn skills(&self) -> BTreeSet<&str> {
        self.entries.keys().map(|(_, k)| k.as_str()).collect()
    }
}

fn column_positions<const N: usize>(
    headers: &csv::StringRecord,
    wanted: [&'static str; N],
) -> Result<[usize; N], DatasetError> {
    let mut out = [0usize; N];
    for (slot, name) in out.iter_mut().zip(wanted) {
        *slot = headers
            .iter()
            .position(|h| h.trim() == name)
            .ok_or(DatasetError::MissingColumn { column: name, row: 0 })?;
    }
    Ok(out)
}

fn field<'r>(
    record: &'r csv::StringRecord,
    pos: usize,
    column: &'static str,
    row: usize,
) -> Result<&'r str, DatasetError> {
    record
        .get(pos)
        .map(str::trim)
        .ok_or(DatasetError::MissingColumn { column, row })
}

fn number<T: std::str::FromStr>(
    record: &csv::StringRecord,
    pos: usize,
    column: &'static str,
    row: usize,
) -> Result<T, DatasetError> {
    let raw = field(record, pos, column, row)?;
    raw.parse().map_err(|_| DatasetError::BadNumber {
        row,
        column,
        value: raw.to_string(),
    })
}

fn reader<R: Read>(source: R) -> csv::Reader<R> {
    csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(source)
}

/// Parse an interaction log. Row numbers in errors count data rows from 1.
pub fn parse_interactions<R: Read>(source: R) -> Result<Vec<InteractionRecord>, DatasetError> {
    let mut rdr = reader(source);
    let headers = rdr.headers()?.clone();
    let [student, skill, item, attempt, correct, order] = column_positions(&headers, INTERACTION_HEADER)?;

    let mut seen = BTreeSet::new();
    let mut records = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let attempt_number: u32 = number(&rec, attempt, "attempt_number", row)?;
        if attempt_number == 0 {
            return Err(DatasetError::BadAttemptNumber { row });
        }
        let correct = match field(&rec, correct, "correct", row)? {
            "1" => true,
            "0" => false,
            other => {
                return Err(DatasetError::BadBoolean {
                    row,
                    value: other.to_string(),
                })
            }
        };
        let record = InteractionRecord {
            student_id: field(&rec, student, "student_id", row)?.to_string(),
            skill_id: field(&rec, skill, "skill_id", row)?.to_string(),
            item_id: field(&rec, item, "item_id", row)?.to_string(),
            attempt_number,
            correct,
            order_index: number(&rec, order, "order_index", row)?,
        };
        let key = (record.student_id.clone(), record.item_id.clone(), attempt_number);
        if !seen.insert(key) {
            return Err(DatasetError::DuplicateAttemptKey {
                row,
                student_id: record.student_id,
                item_id: record.item_id,
                attempt_number,
            });
        }
        records.push(record);
    }
    Ok(records)
}

pub fn write_interactions<W: Write>(sink: W, records: &[InteractionRecord]) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(INTERACTION_HEADER)?;
    for r in records {
        w.write_record([
            r.student_id.as_str(),
            r.skill_id.as_str(),
            r.item_id.as_str(),
            &r.attempt_number.to_string(),
            if r.correct { "1" } else { "0" },
            &r.order_index.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn first_attempts(records: &[InteractionRecord]) -> Vec<InteractionRecord> {
    records.iter().filter(|r| r.attempt_number == 1).cloned().collect()
}

/// Group first attempts by student and order them by `order_index`.
///
/// Sequences come back sorted by student id.
pub fn build_sequences(
    records: &[InteractionRecord],
    catalog: &SkillCatalog,
) -> Result<Vec<StudentSequence>, DatasetError> {
    let mut by_student: BTreeMap<&str, Vec<(u64, Step)>> = BTreeMap::new();
    for r in records {
        let skill = catalog
            .index_of(&r.skill_id)
            .ok_or_else(|| DatasetError::UnknownSkill(r.skill_id.clone()))?;
        by_student.entry(&r.student_id).or_default().push((
            r.order_index,
            Step {
                skill_id: r.skill_id.clone(),
                skill,
                item_id: r.item_id.clone(),
                correct: r.correct,
            },
        ));
    }

    let mut out = Vec::with_capacity(by_student.len());
    for (student_id, mut steps) in by_student {
        steps.sort_by_key(|(order, _)| *order);
        if let Some(w) = steps.windows(2).find(|w| w[0].0 == w[1].0) {
            return Err(DatasetError::DuplicateOrderIndex {
                student_id: student_id.to_string(),
                order_index: w[0].0,
            });
        }
        out.push(StudentSequence {
            student_id: student_id.to_string(),
            steps: steps.into_iter().map(|(_, s)| s).collect(),
        });
    }
    Ok(out)
}

pub fn parse_posttest<R: Read>(source: R) -> Result<PosttestScores, DatasetError> {
    let mut rdr = reader(source);
    let headers = rdr.headers()?.clone();
    let [student, skill, score] = column_positions(&headers, POSTTEST_HEADER)?;

    let mut scores = PosttestScores::default();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec?;
        let value: f64 = number(&rec, score, "score", row)?;
        if !(0.0..=1.0).contains(&value) {
            return Err(DatasetError::ScoreOutOfRange { row, score: value });
        }
        let key = (
            field(&rec, student, "student_id", row)?.to_string(),
            field(&rec, skill, "skill_id", row)?.to_string(),
        );
        if scores.entries.contains_key(&key) {
            return Err(DatasetError::DuplicateKey {
                row,
                student_id: key.0,
                skill_id: key.1,
            });
        }
        scores.entries.insert(key, value);
    }
    Ok(scores)
}

pub fn write_posttest<W: Write>(sink: W, scores: &PosttestScores) -> Result<(), DatasetError> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(POSTTEST_HEADER)?;
    for ((student, skill), score) in &scores.entries {
        w.write_record([student.as_str(), skill.as_str(), &score.to_string()])?;
    }
    w.flush()?;
    Ok(())
}
