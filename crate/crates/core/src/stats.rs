//! Correlations against posttest scores, pairwise tests between dependent
//! correlations, and false-discovery-rate control.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::function::beta::beta_reg;
use thiserror::Error;

use crate::dataset::PosttestScores;
use crate::estimator::{EstimatorKind, KnowledgeTable};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum StatsError {
    #[error("need at least 3 complete pairs, got {0}")]
    TooFewPairs(usize),
    #[error("a variable has zero variance")]
    ZeroVariance,
    #[error("paired vectors differ in length ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("correlation matrix is singular (determinant {0})")]
    SingularCorrelationMatrix(f64),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
}

/// Product-moment correlation of paired samples.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64, StatsError> {
    if x.len() != y.len() {
        return Err(StatsError::LengthMismatch(x.len(), y.len()));
    }
    let n = x.len();
    if n < 3 {
        return Err(StatsError::TooFewPairs(n));
    }
    let mx = x.iter().sum::<f64>() / n as f64;
    let my = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(StatsError::ZeroVariance);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

/// t statistic for the difference between two correlations sharing the
/// variable y, given the correlation between the two predictors:
///
/// t = (r_ay - r_by) * sqrt((n - 3)(1 + r_ab) / (2 |R|)),  df = n - 3
///
/// where |R| is the determinant of the 3x3 correlation matrix. Positive
/// when `a` correlates more strongly with y.
pub fn dependent_corr_t(r_ay: f64, r_by: f64, r_ab: f64, n: usize) -> Result<(f64, u64), StatsError> {
    if n < 4 {
        return Err(StatsError::TooFewPairs(n));
    }
    if [r_ay, r_by, r_ab].iter().any(|r| !(-1.0..=1.0).contains(r)) {
        return Err(StatsError::InvalidArgument("correlation outside [-1, 1]".into()));
    }
    let df = (n - 3) as u64;
    // Equal correlations carry no evidence of a difference, even when the
    // predictors are identical and the matrix is singular.
    if r_ay == r_by {
        return Ok((0.0, df));
    }
    // grouped so that swapping a and b gives a bit-identical determinant
    let det = 1.0 - (r_ay * r_ay + r_by * r_by) - r_ab * r_ab + 2.0 * (r_ay * r_by) * r_ab;
    if !(det > 0.0) {
        return Err(StatsError::SingularCorrelationMatrix(det));
    }
    let t = (r_ay - r_by) * (((n - 3) as f64 * (1.0 + r_ab)) / (2.0 * det)).sqrt();
    Ok((t, df))
}

/// Two-tailed p-value of Student's t with `df` degrees of freedom.
pub fn p_from_t(t: f64, df: u64) -> f64 {
    assert!(df >= 1, "degrees of freedom must be positive");
    if t.is_nan() {
        return f64::NAN;
    }
    let df = df as f64;
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

/// Benjamini-Hochberg step-up rejections at FDR level `q`, in input order.
pub fn benjamini_hochberg(p_values: &[f64], q: f64) -> Vec<bool> {
    step_up(p_values, q)
}

/// Benjamini-Yekutieli: B-H with q divided by the harmonic sum
/// 1 + 1/2 + ... + 1/m, valid under arbitrary dependence.
pub fn benjamini_yekutieli(p_values: &[f64], q: f64) -> Vec<bool> {
    let harmonic: f64 = (1..=p_values.len()).map(|k| 1.0 / k as f64).sum();
    step_up(p_values, q / harmonic.max(1.0))
}

fn step_up(p_values: &[f64], q: f64) -> Vec<bool> {
    let m = p_values.len();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| p_values[a].total_cmp(&p_values[b]).then(a.cmp(&b)));
    let cutoff = (1..=m)
        .rev()
        .find(|&k| p_values[order[k - 1]] <= k as f64 / m as f64 * q)
        .unwrap_or(0);
    let mut reject = vec![false; m];
    for &i in &order[..cutoff] {
        reject[i] = true;
    }
    reject
}

/// Area under the ROC curve via the rank-sum statistic, ties counted half.
/// `None` when either class is empty.
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len());
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // average 1-based rank of the tie block
        let rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += rank * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    Some((rank_sum - p * (p + 1.0) / 2.0) / (p * negatives as f64))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdrProcedure {
    BenjaminiHochberg,
    BenjaminiYekutieli,
}

/// Which comparisons share one FDR correction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdrFamily {
    /// Every pair on every skill.
    Global,
    PerSkill,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareOptions {
    pub q: f64,
    pub procedure: FdrProcedure,
    pub family: FdrFamily,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            q: 0.05,
            procedure: FdrProcedure::BenjaminiHochberg,
            family: FdrFamily::Global,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationResult {
    pub skill_id: String,
    pub estimator: EstimatorKind,
    /// `None` when the correlation is undefined; see `error`.
    pub r: Option<f64>,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairComparison {
    pub skill_id: String,
    pub estimator_a: EstimatorKind,
    pub estimator_b: EstimatorKind,
    pub t: Option<f64>,
    pub df: Option<u64>,
    pub p: Option<f64>,
    pub significant: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub estimators: Vec<EstimatorKind>,
    pub skills: Vec<String>,
    pub options: CompareOptions,
    pub correlations: Vec<CorrelationResult>,
    pub comparisons: Vec<PairComparison>,
}

impl ComparisonReport {
    pub fn correlation(&self, skill_id: &str, estimator: EstimatorKind) -> Option<&CorrelationResult> {
        self.correlations
            .iter()
            .find(|c| c.skill_id == skill_id && c.estimator == estimator)
    }

    /// Comparison of `a` against `b`, in that orientation: t is negated
    /// when the stored pair is (b, a).
    pub fn comparison(&self, skill_id: &str, a: EstimatorKind, b: EstimatorKind) -> Option<PairComparison> {
        self.comparisons.iter().find_map(|c| {
            if c.skill_id != skill_id {
                None
            } else if c.estimator_a == a && c.estimator_b == b {
                Some(c.clone())
            } else if c.estimator_a == b && c.estimator_b == a {
                let mut swapped = c.clone();
                swapped.estimator_a = a;
                swapped.estimator_b = b;
                swapped.t = c.t.map(|t| -t);
                Some(swapped)
            } else {
                None
            }
        })
    }

    /// `skill,estimator,r,n`; undefined correlations leave `r` empty.
    pub fn write_correlations_csv<W: Write>(&self, sink: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["skill", "estimator", "r", "n"])?;
        for c in &self.correlations {
            w.write_record([c.skill_id.clone(), c.estimator.to_string(), opt(c.r), c.n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }

    /// `skill,estimator_a,estimator_b,t,df,p,significant`.
    pub fn write_comparisons_csv<W: Write>(&self, sink: W) -> csv::Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["skill", "estimator_a", "estimator_b", "t", "df", "p", "significant"])?;
        for c in &self.comparisons {
            w.write_record([
                c.skill_id.clone(),
                c.estimator_a.to_string(),
                c.estimator_b.to_string(),
                opt(c.t),
                c.df.map(|d| d.to_string()).unwrap_or_default(),
                opt(c.p),
                c.significant.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Values of `columns` for students present in every column, by student id.
fn complete_cases(columns: &[&BTreeMap<&str, f64>]) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new(); columns.len()];
    for (student, &first) in columns[0] {
        let rest: Option<Vec<f64>> = columns[1..].iter().map(|c| c.get(student).copied()).collect();
        if let Some(rest) = rest {
            out[0].push(first);
            for (col, v) in out[1..].iter_mut().zip(rest) {
                col.push(v);
            }
        }
    }
    out
}

fn skill_column<'a>(entries: &'a BTreeMap<(String, String), f64>, skill: &str) -> BTreeMap<&'a str, f64> {
    entries
        .iter()
        .filter(|((_, k), _)| k == skill)
        .map(|((s, _), &v)| (s.as_str(), v))
        .collect()
}

/// Correlate every table with the posttest on every posttest skill and
/// test every unordered pair of estimators, then apply FDR control. A
/// single table yields correlations only.
///
/// Missing entries are dropped pairwise. A cell whose statistic is
/// undefined is reported with its error instead of aborting the report.
pub fn compare_all(
    tables: &[KnowledgeTable],
    posttest: &PosttestScores,
    options: &CompareOptions,
) -> Result<ComparisonReport, StatsError> {
    if tables.is_empty() {
        return Err(StatsError::InvalidArgument("no estimators to compare".into()));
    }
    if !(options.q > 0.0 && options.q < 1.0) {
        return Err(StatsError::InvalidArgument(format!("q = {} not in (0, 1)", options.q)));
    }
    let skills: Vec<String> = posttest.skills().into_iter().map(String::from).collect();
    let mut correlations = Vec::new();
    let mut comparisons = Vec::new();
    for skill in &skills {
        let y = skill_column(&posttest.entries, skill);
        let cols: Vec<BTreeMap<&str, f64>> = tables.iter().map(|t| skill_column(&t.entries, skill)).collect();
        for (table, col) in tables.iter().zip(&cols) {
            let data = complete_cases(&[col, &y]);
            let r = pearson(&data[0], &data[1]);
            correlations.push(CorrelationResult {
                skill_id: skill.clone(),
                estimator: table.estimator,
                r: r.as_ref().ok().copied(),
                n: data[0].len(),
                error: r.err().map(|e| e.to_string()),
            });
        }
        for i in 0..tables.len() {
            for j in i + 1..tables.len() {
                let data = complete_cases(&[&cols[i], &cols[j], &y]);
                let n = data[0].len();
                let result = pearson(&data[0], &data[2]).and_then(|r_ay| {
                    let r_by = pearson(&data[1], &data[2])?;
                    let r_ab = if data[0] == data[1] {
                        1.0
                    } else {
                        pearson(&data[0], &data[1])?
                    };
                    dependent_corr_t(r_ay, r_by, r_ab, n)
                });
                let (t, df, p, error) = match result {
                    Ok((t, df)) => (Some(t), Some(df), Some(p_from_t(t, df)), None),
                    Err(e) => (None, None, None, Some(e.to_string())),
                };
                comparisons.push(PairComparison {
                    skill_id: skill.clone(),
                    estimator_a: tables[i].estimator,
                    estimator_b: tables[j].estimator,
                    t,
                    df,
                    p,
                    significant: false,
                    error,
                });
            }
        }
    }

    let mut families: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, c) in comparisons.iter().enumerate() {
        if c.p.is_some() {
            let key = match options.family {
                FdrFamily::Global => "",
                FdrFamily::PerSkill => c.skill_id.as_str(),
            };
            families.entry(key).or_default().push(i);
        }
    }
    let mut flags = Vec::new();
    for members in families.values() {
        let ps: Vec<f64> = members.iter().map(|&i| comparisons[i].p.unwrap()).collect();
        let reject = match options.procedure {
            FdrProcedure::BenjaminiHochberg => benjamini_hochberg(&ps, options.q),
            FdrProcedure::BenjaminiYekutieli => benjamini_yekutieli(&ps, options.q),
        };
        flags.extend(members.iter().copied().zip(reject));
    }
    for (i, flag) in flags {
        comparisons[i].significant = flag;
    }

    Ok(ComparisonReport {
        estimators: tables.iter().map(|t| t.estimator).collect(),
        skills,
        options: options.clone(),
        correlations,
        comparisons,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn pearson_examples() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-15);
        assert!((pearson(&[1.0, 2.0, 3.0], &[6.0, 4.0, 5.0]).unwrap() + 0.5).abs() < 1e-15);
        assert_eq!(
            pearson(&[1.0, 2.0, 3.0], &[1.0, 1.0, 1.0]),
            Err(StatsError::ZeroVariance)
        );
        assert_eq!(pearson(&[1.0, 2.0], &[1.0, 2.0]), Err(StatsError::TooFewPairs(2)));
        assert!(matches!(pearson(&[1.0], &[]), Err(StatsError::LengthMismatch(1, 0))));
    }

    #[test]
    fn dependent_t_examples() {
        // |R| = 1 - .36 - .25 - .49 + 2(.6)(.5)(.7) = 0.32
        let (t, df) = dependent_corr_t(0.6, 0.5, 0.7, 103).unwrap();
        let expected = 0.1 * 170.0f64.sqrt() / 0.64f64.sqrt();
        assert!((t - expected).abs() < 1e-12);
        assert!((t - 1.6298).abs() < 1e-3);
        assert_eq!(df, 100);

        let (t, _) = dependent_corr_t(0.5, 0.6, 0.7, 103).unwrap();
        assert!((t + expected).abs() < 1e-12);
        assert_eq!(dependent_corr_t(0.4, 0.4, 1.0, 50).unwrap(), (0.0, 47));
        assert!(matches!(
            dependent_corr_t(0.9, 0.1, 1.0, 50),
            Err(StatsError::SingularCorrelationMatrix(_))
        ));
        assert!(matches!(
            dependent_corr_t(0.1, 0.2, 0.3, 3),
            Err(StatsError::TooFewPairs(3))
        ));
    }

    #[test]
    fn p_value_examples() {
        assert_eq!(p_from_t(0.0, 10), 1.0);
        // Cauchy: F(1) = 0.75
        assert!((p_from_t(1.0, 1) - 0.5).abs() < 1e-12);
        assert!((p_from_t(-1.0, 1) - 0.5).abs() < 1e-12);
        // df = 2: F(t) = 1/2 + t / (2 sqrt(2 + t^2))
        let t: f64 = 1.7;
        let p = 2.0 * (0.5 - t / (2.0 * (2.0 + t * t).sqrt()));
        assert!((p_from_t(t, 2) - p).abs() < 1e-12);
        assert_eq!(p_from_t(f64::INFINITY, 5), 0.0);
    }

    #[test]
    fn bh_examples() {
        assert_eq!(
            benjamini_hochberg(&[0.01, 0.02, 0.04, 0.5], 0.05),
            vec![true, true, false, false]
        );
        assert_eq!(benjamini_hochberg(&[1.0; 5], 0.05), vec![false; 5]);
        assert_eq!(benjamini_hochberg(&[0.04], 0.05), vec![true]);
        assert_eq!(
            benjamini_hochberg(&[0.5, 0.01, 0.04, 0.02], 0.05),
            vec![false, true, false, true]
        );
        assert!(benjamini_hochberg(&[], 0.05).is_empty());
        // harmonic sum for m = 2 is 1.5, so the thresholds are 0.0167 and 0.0333
        assert_eq!(benjamini_yekutieli(&[0.02, 0.03], 0.05), vec![true, true]);
        assert_eq!(benjamini_yekutieli(&[0.02, 0.04], 0.05), vec![false, false]);
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[false, false, true, true]), Some(1.0));
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[false, false, true, true]), Some(0.0));
        assert_eq!(auc(&[0.5; 4], &[false, true, false, true]), Some(0.5));
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[false, false, true, true]), Some(0.75));
        assert_eq!(auc(&[0.3], &[true]), None);
    }

    fn table(kind: EstimatorKind, skill: &str, values: &[f64]) -> KnowledgeTable {
        let mut t = KnowledgeTable::new(kind);
        for (i, &v) in values.iter().enumerate() {
            t.entries.insert((format!("s{i:02}"), skill.to_string()), v);
        }
        t
    }

    fn posttest(skill: &str, values: &[f64]) -> PosttestScores {
        let mut p = PosttestScores::default();
        for (i, &v) in values.iter().enumerate() {
            p.entries.insert((format!("s{i:02}"), skill.to_string()), v);
        }
        p
    }

    #[test]
    fn compare_all_structure() {
        let y: Vec<f64> = (0..20).map(|i| ((i * 7) % 11) as f64 / 10.0).collect();
        let x: Vec<f64> = y.iter().enumerate().map(|(i, v)| v + (i % 3) as f64 * 0.2).collect();
        let mut tables = Vec::new();
        for (k, kind) in EstimatorKind::ALL.iter().enumerate() {
            let vals: Vec<f64> = x
                .iter()
                .enumerate()
                .map(|(i, v)| v + ((i * k) % 5) as f64 * 0.1)
                .collect();
            tables.push(table(*kind, "A", &vals));
        }
        let report = compare_all(&tables, &posttest("A", &y), &CompareOptions::default()).unwrap();
        assert_eq!(report.correlations.len(), 6);
        assert_eq!(report.comparisons.len(), 15);
        let c = report
            .comparison("A", EstimatorKind::Pfa, EstimatorKind::MeanDkt)
            .unwrap();
        let d = report
            .comparison("A", EstimatorKind::MeanDkt, EstimatorKind::Pfa)
            .unwrap();
        assert_eq!(c.t.unwrap(), -d.t.unwrap());
        assert_eq!(c.p, d.p);
        let again = compare_all(&tables, &posttest("A", &y), &CompareOptions::default()).unwrap();
        assert_eq!(report, again);
    }

    #[test]
    fn identical_tables_compare_to_zero() {
        let y = [0.1, 0.5, 0.3, 0.9, 0.7, 0.2];
        let x = [0.2, 0.4, 0.4, 0.8, 0.9, 0.1];
        let tables = vec![
            table(EstimatorKind::Bkt, "A", &x),
            table(EstimatorKind::MeanBkt, "A", &x),
        ];
        let report = compare_all(&tables, &posttest("A", &y), &CompareOptions::default()).unwrap();
        let c = &report.comparisons[0];
        assert_eq!(c.t, Some(0.0));
        assert_eq!(c.p, Some(1.0));
        assert!(!c.significant);
    }

    #[test]
    fn undefined_cells_are_reported_not_fatal() {
        let y = [0.1, 0.5, 0.3, 0.9, 0.7, 0.2];
        let tables = vec![
            table(EstimatorKind::Bkt, "A", &[0.5; 6]),
            table(EstimatorKind::Pfa, "A", &[0.2, 0.4, 0.4, 0.8, 0.9, 0.1]),
            table(EstimatorKind::MeanPfa, "A", &[0.3, 0.4, 0.1]),
        ];
        let report = compare_all(&tables, &posttest("A", &y), &CompareOptions::default()).unwrap();
        let bkt = report.correlation("A", EstimatorKind::Bkt).unwrap();
        assert_eq!(bkt.r, None);
        assert!(bkt.error.is_some());
        assert_eq!(report.correlation("A", EstimatorKind::MeanPfa).unwrap().n, 3);
        let c = report.comparison("A", EstimatorKind::Bkt, EstimatorKind::Pfa).unwrap();
        assert_eq!(c.t, None);
        assert!(!c.significant);
        // pairwise deletion: only 3 common students, too few for the t test
        let c = report
            .comparison("A", EstimatorKind::Pfa, EstimatorKind::MeanPfa)
            .unwrap();
        assert!(c.error.unwrap().contains("3"));
    }

    #[test]
    fn rejects_bad_arguments() {
        let p = posttest("A", &[0.1, 0.2, 0.3]);
        assert!(compare_all(&[], &p, &CompareOptions::default()).is_err());
        let one = vec![table(EstimatorKind::Bkt, "A", &[0.1, 0.2, 0.3])];
        let single = compare_all(&one, &p, &CompareOptions::default()).unwrap();
        assert_eq!((single.correlations.len(), single.comparisons.len()), (1, 0));
        let two = vec![one[0].clone(), table(EstimatorKind::Pfa, "A", &[0.1, 0.2, 0.3])];
        let bad_q = CompareOptions {
            q: 1.5,
            ..CompareOptions::default()
        };
        assert!(compare_all(&two, &p, &bad_q).is_err());
    }

    fn naive_pearson(x: &[f64], y: &[f64]) -> f64 {
        let n = x.len() as f64;
        let mx = x.iter().sum::<f64>() / n;
        let my = y.iter().sum::<f64>() / n;
        let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
        let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
        let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }

    fn brute_force_bh(p: &[f64], q: f64) -> Vec<bool> {
        let m = p.len();
        // largest k such that at least k p-values are <= k q / m
        let mut best = 0.0f64;
        let mut found = false;
        for k in 1..=m {
            let threshold = k as f64 * q / m as f64;
            if p.iter().filter(|&&v| v <= threshold).count() >= k {
                best = threshold;
                found = true;
            }
        }
        p.iter().map(|&v| found && v <= best).collect()
    }

    proptest! {
        #[test]
        fn pearson_matches_naive(pairs in prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64), 3..40)) {
            let (x, y): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let r = pearson(&x, &y).unwrap();
            prop_assert!((r - naive_pearson(&x, &y)).abs() < 1e-12);
            prop_assert!(r.abs() <= 1.0);
        }

        #[test]
        fn bh_matches_brute_force(p in prop::collection::vec(0.0..1.0f64, 0..40), q in 0.01..0.5f64) {
            prop_assert_eq!(benjamini_hochberg(&p, q), brute_force_bh(&p, q));
        }

        #[test]
        fn bh_rejection_is_monotone(
            p in prop::collection::vec(0.0..1.0f64, 1..30),
            pick in any::<prop::sample::Index>(),
            shrink in 0.0..1.0f64,
        ) {
            let before = benjamini_hochberg(&p, 0.05);
            let mut lowered = p.clone();
            let i = pick.index(p.len());
            lowered[i] *= shrink;
            let after = benjamini_hochberg(&lowered, 0.05);
            for (b, a) in before.iter().zip(&after) {
                prop_assert!(!b || *a);
            }
        }

        #[test]
        fn dependent_t_antisymmetric(
            r_ay in -0.9..0.9f64, r_by in -0.9..0.9f64, r_ab in -0.9..0.9f64, n in 4usize..500,
        ) {
            match (dependent_corr_t(r_ay, r_by, r_ab, n), dependent_corr_t(r_by, r_ay, r_ab, n)) {
                (Ok((t1, d1)), Ok((t2, d2))) => {
                    prop_assert_eq!(t1, -t2);
                    prop_assert_eq!(d1, d2);
                    prop_assert!(t1 == 0.0 || (t1 > 0.0) == (r_ay > r_by));
                }
                (Err(_), Err(_)) => {}
                _ => prop_assert!(false, "asymmetric failure"),
            }
            prop_assert_eq!(dependent_corr_t(r_ay, r_ay, r_ab, n).unwrap().0, 0.0);
        }

        #[test]
        fn p_decreases_in_abs_t(a in 0.0..20.0f64, b in 0.0..20.0f64, df in 1u64..200) {
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let (pl, ph) = (p_from_t(lo, df), p_from_t(hi, df));
            prop_assert!((0.0..=1.0).contains(&pl) && (0.0..=1.0).contains(&ph));
            prop_assert!(ph <= pl);
            prop_assert_eq!(p_from_t(-a, df), p_from_t(a, df));
        }
    }
}
