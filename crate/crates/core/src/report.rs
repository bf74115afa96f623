//! The run report document and its text rendering.

use std::collections::BTreeMap;
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats::ComparisonReport;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("malformed report: {0}")]
    MalformedReport(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingSummary {
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl TrainingSummary {
    pub fn new(initial_loss: f64, final_loss: f64) -> Self {
        TrainingSummary {
            initial_loss,
            final_loss,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub tool_version: String,
    pub seed: Option<u64>,
    pub config_sha256: String,
    /// The only field that differs between identical runs.
    pub timestamp: String,
    pub interactions: usize,
    pub first_attempts: usize,
    pub students: usize,
    pub skills: Vec<String>,
    /// Per model, attempts whose prediction was not a usable probability.
    pub invalid_predictions: BTreeMap<String, usize>,
    pub training: BTreeMap<String, TrainingSummary>,
    pub table2_signs: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub metadata: RunMetadata,
    pub results: ComparisonReport,
}

impl RunReport {
    pub fn write_json<W: Write>(&self, mut sink: W) -> Result<(), String> {
        serde_json::to_writer_pretty(&mut sink, self).map_err(|e| e.to_string())?;
        sink.write_all(b"\n").map_err(|e| e.to_string())
    }

    /// Parse and check the structural contract of a report.
    pub fn from_json(text: &str) -> Result<Self, ReportError> {
        let report: RunReport = serde_json::from_str(text).map_err(|e| ReportError::MalformedReport(e.to_string()))?;
        report.validate()?;
        Ok(report)
    }

    pub fn validate(&self) -> Result<(), ReportError> {
        let bad = |m: String| Err(ReportError::MalformedReport(m));
        let r = &self.results;
        if r.estimators.is_empty() {
            return bad("no estimators".into());
        }
        if r.skills.is_empty() {
            return bad("no skills".into());
        }
        let estimators: BTreeSet<_> = r.estimators.iter().collect();
        if estimators.len() != r.estimators.len() {
            return bad("duplicate estimator".into());
        }
        let skills: BTreeSet<_> = r.skills.iter().collect();
        let mut cells = BTreeSet::new();
        for c in &r.correlations {
            if !skills.contains(&c.skill_id) || !estimators.contains(&c.estimator) {
                return bad(format!("correlation for unknown cell {} / {}", c.skill_id, c.estimator));
            }
            if c.r.is_some_and(|v| !(-1.0..=1.0).contains(&v)) {
                return bad(format!("correlation out of range at {} / {}", c.skill_id, c.estimator));
            }
            if !cells.insert((&c.skill_id, c.estimator)) {
                return bad(format!("duplicate correlation {} / {}", c.skill_id, c.estimator));
            }
        }
        if cells.len() != skills.len() * estimators.len() {
            return bad("missing correlations".into());
        }
        let mut pairs = BTreeSet::new();
        for c in &r.comparisons {
            let (a, b) = (c.estimator_a, c.estimator_b);
            if !skills.contains(&c.skill_id) || !estimators.contains(&a) || !estimators.contains(&b) || a == b {
                return bad(format!("comparison for unknown pair {} / {a} / {b}", c.skill_id));
            }
            if c.p.is_some_and(|p| !(0.0..=1.0).contains(&p)) || c.t.is_some_and(|t| !t.is_finite()) {
                return bad(format!("invalid statistic at {} / {a} / {b}", c.skill_id));
            }
            let key = (&c.skill_id, a.min(b), a.max(b));
            if !pairs.insert(key) {
                return bad(format!("duplicate comparison {} / {a} / {b}", c.skill_id));
            }
        }
        let m = estimators.len();
        if pairs.len() != skills.len() * m * (m - 1) / 2 {
            return bad("missing comparisons".into());
        }
        Ok(())
    }

    /// Correlation matrix (estimators x skills) and one upper-triangular
    /// comparison matrix per skill. `*` marks FDR-significant cells.
    pub fn render(&self, table2_signs: bool) -> String {
        let r = &self.results;
        let mut out = String::new();
        let names: Vec<String> = r.estimators.iter().map(|e| e.to_string()).collect();
        let label_w = names.iter().map(String::len).max().unwrap_or(0).max(9);

        writeln!(
            out,
            "Pearson correlations between knowledge estimates and posttest scores"
        )
        .unwrap();
        let col_w = r.skills.iter().map(String::len).max().unwrap_or(0).max(6);
        write!(out, "{:label_w$}", "estimator").unwrap();
        for s in &r.skills {
            write!(out, "  {s:>col_w$}").unwrap();
        }
        out.push('\n');
        for (e, name) in r.estimators.iter().zip(&names) {
            write!(out, "{name:label_w$}").unwrap();
            for s in &r.skills {
                let cell = r
                    .correlation(s, *e)
                    .and_then(|c| c.r)
                    .map(|v| format!("{v:.2}"))
                    .unwrap_or_else(|| "n/a".into());
                write!(out, "  {cell:>col_w$}").unwrap();
            }
            out.push('\n');
        }

        if r.estimators.len() < 2 {
            return out;
        }
        let orientation = if table2_signs {
            "positive when the column estimator correlates more strongly"
        } else {
            "positive when the row estimator correlates more strongly"
        };
        let cw = names[1..].iter().map(String::len).max().unwrap().max(8);
        for s in &r.skills {
            writeln!(
                out,
                "\n{s}: t for row vs column ({orientation}; * = significant at FDR {})",
                r.options.q
            )
            .unwrap();
            write!(out, "{:label_w$}", "").unwrap();
            for name in &names[1..] {
                write!(out, "  {name:>cw$}").unwrap();
            }
            out.push('\n');
            for (i, a) in r.estimators[..r.estimators.len() - 1].iter().enumerate() {
                write!(out, "{:label_w$}", names[i]).unwrap();
                for (j, b) in r.estimators.iter().enumerate().skip(1) {
                    let cell = if j <= i {
                        String::new()
                    } else {
                        match r.comparison(s, *a, *b) {
                            Some(c) => match c.t {
                                Some(t) => {
                                    let shown = if table2_signs { -t } else { t };
                                    // + 0.0 turns a negated zero into 0.00, not -0.00
                                    let star = if c.significant { "*" } else { "" };
                                    format!("{:.2}{star}", shown + 0.0)
                                }
                                None => "n/a".into(),
                            },
                            None => "n/a".into(),
                        }
                    };
                    write!(out, "  {cell:>cw$}").unwrap();
                }
                out.push('\n');
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::EstimatorKind;
    use crate::stats::{CompareOptions, CorrelationResult, PairComparison};

    fn sample() -> RunReport {
        let kinds = [EstimatorKind::MeanBkt, EstimatorKind::Bkt, EstimatorKind::Pfa];
        let correlations = kinds
            .iter()
            .enumerate()
            .map(|(i, &k)| CorrelationResult {
                skill_id: "A".into(),
                estimator: k,
                r: Some([0.714999, 0.3, -0.126][i]),
                n: 50,
                error: None,
            })
            .collect();
        let cmp = |a, b, t: f64, significant| PairComparison {
            skill_id: "A".into(),
            estimator_a: a,
            estimator_b: b,
            t: Some(t),
            df: Some(47),
            p: Some(0.01),
            significant,
            error: None,
        };
        RunReport {
            metadata: RunMetadata {
                tool_version: "0".into(),
                seed: Some(1),
                config_sha256: "00".into(),
                timestamp: "2020-01-01T00:00:00Z".into(),
                interactions: 10,
                first_attempts: 10,
                students: 5,
                skills: vec!["A".into()],
                invalid_predictions: BTreeMap::new(),
                training: BTreeMap::new(),
                table2_signs: false,
            },
            results: ComparisonReport {
                estimators: kinds.to_vec(),
                skills: vec!["A".into()],
                options: CompareOptions::default(),
                correlations,
                comparisons: vec![
                    cmp(kinds[0], kinds[1], 3.456, true),
                    cmp(kinds[0], kinds[2], 0.0, false),
                    cmp(kinds[1], kinds[2], -1.234, false),
                ],
            },
        }
    }

    #[test]
    fn renders_two_decimals_and_stars() {
        let text = sample().render(false);
        assert!(text.contains("0.71"), "{text}");
        assert!(!text.contains("0.715"));
        assert!(text.contains("-0.13"));
        assert!(text.contains("3.46*"));
        assert!(text.contains("-1.23"));
        assert!(!text.contains("-1.23*"));
        assert!(!text.contains("-0.00"));
    }

    #[test]
    fn table2_signs_flip_display_only() {
        let text = sample().render(true);
        assert!(text.contains("-3.46*"));
        assert!(text.contains("1.23"));
        assert!(!text.contains("-0.00"));
        assert!(text.contains("0.71"));
    }

    #[test]
    fn json_round_trip_and_validation() {
        let report = sample();
        let mut buf = Vec::new();
        report.write_json(&mut buf).unwrap();
        let parsed = RunReport::from_json(std::str::from_utf8(&buf).unwrap()).unwrap();
        assert_eq!(parsed, report);

        let mut empty = sample();
        empty.results.estimators.clear();
        let mut buf = Vec::new();
        empty.write_json(&mut buf).unwrap();
        assert!(matches!(
            RunReport::from_json(std::str::from_utf8(&buf).unwrap()),
            Err(ReportError::MalformedReport(_))
        ));

        let mut missing = sample();
        missing.results.comparisons.pop();
        assert!(missing.validate().is_err());
        assert!(RunReport::from_json("{\"metadata\": 3}").is_err());
    }
}
