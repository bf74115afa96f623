//! Performance Factors Analysis.
//!
//! Per skill: m = beta + gamma * successes + rho * failures,
//! P(correct) = logistic(m). Counts are the student's prior first-attempt
//! outcomes on the same skill.

use std::collections::BTreeMap;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{SkillCatalog, StudentSequence};
use crate::math::{sigmoid, softplus};

/// Coefficient magnitude cap; keeps separable data from diverging.
pub const COEF_CAP: f64 = 10.0;
pub const GRAD_TOL: f64 = 1e-8;
pub const MAX_ITERS: usize = 10_000;

#[derive(Debug, Error)]
pub enum PfaError {
    #[error("no observations for skill `{0}`")]
    EmptyData(String),
    #[error("parameter csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("parameter csv row {row}: {message}")]
    BadParams { row: usize, message: String },
    #[error("invalid optimizer options: {0}")]
    InvalidOptions(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PfaOptions {
    pub coef_cap: f64,
    /// Stop once the projected gradient max-norm is below this.
    pub grad_tol: f64,
    pub max_iters: usize,
}

impl Default for PfaOptions {
    fn default() -> Self {
        PfaOptions {
            coef_cap: COEF_CAP,
            grad_tol: GRAD_TOL,
            max_iters: MAX_ITERS,
        }
    }
}

impl PfaOptions {
    pub fn validate(&self) -> Result<(), PfaError> {
        if self.coef_cap > 0.0 && self.grad_tol > 0.0 && self.max_iters > 0 {
            Ok(())
        } else {
            Err(PfaError::InvalidOptions(
                "coef_cap, grad_tol and max_iters must be positive".into(),
            ))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct PfaCounts {
    pub successes: u32,
    pub failures: u32,
}

impl PfaCounts {
    pub fn record(&mut self, correct: bool) {
        if correct {
            self.successes += 1;
        } else {
            self.failures += 1;
        }
    }

    pub fn opportunities(&self) -> u32 {
        self.successes + self.failures
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PfaCoefficients {
    pub beta: f64,
    pub gamma: f64,
    pub rho: f64,
}

impl PfaCoefficients {
    pub fn new(beta: f64, gamma: f64, rho: f64) -> Self {
        PfaCoefficients { beta, gamma, rho }
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.beta, self.gamma, self.rho]
    }

    fn from_array(a: [f64; 3]) -> Self {
        PfaCoefficients::new(a[0], a[1], a[2])
    }
}

pub fn predict(counts: PfaCounts, coef: &PfaCoefficients) -> f64 {
    sigmoid(coef.beta + coef.gamma * counts.successes as f64 + coef.rho * counts.failures as f64)
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PfaTrace {
    /// Prediction for each attempt from prior outcomes only.
    pub predictions: Vec<f64>,
    /// Prediction with every observed outcome counted.
    pub final_probability: f64,
}

pub fn trace_student(outcomes: &[bool], coef: &PfaCoefficients) -> PfaTrace {
    let mut counts = PfaCounts::default();
    let mut predictions = Vec::with_capacity(outcomes.len());
    for &c in outcomes {
        predictions.push(predict(counts, coef));
        counts.record(c);
    }
    PfaTrace {
        predictions,
        final_probability: predict(counts, coef),
    }
}

/// Observations for one skill, aggregated by the (successes, failures)
/// history that preceded them. The ordered map makes every sum below
/// independent of the order students were supplied in.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SkillData {
    /// (successes, failures) -> (attempts, correct attempts)
    pub cells: BTreeMap<(u32, u32), (u64, u64)>,
}

impl SkillData {
    pub fn from_outcomes<'a, I>(sequences: I) -> Self
    where
        I: IntoIterator<Item = &'a [bool]>,
    {
        let mut data = SkillData::default();
        for seq in sequences {
            let mut counts = PfaCounts::default();
            for &c in seq {
                let cell = data.cells.entry((counts.successes, counts.failures)).or_default();
                cell.0 += 1;
                cell.1 += c as u64;
                counts.record(c);
            }
        }
        data
    }

    pub fn observations(&self) -> u64 {
        self.cells.values().map(|(n, _)| n).sum()
    }

    pub fn log_likelihood(&self, coef: &PfaCoefficients) -> f64 {
        self.cells
            .iter()
            .map(|(&(s, f), &(n, k))| {
                let m = coef.beta + coef.gamma * s as f64 + coef.rho * f as f64;
                // ln p = -ln(1 + e^-m), ln(1-p) = -ln(1 + e^m)
                let ln_p = -softplus(-m);
                let ln_q = -softplus(m);
                k as f64 * ln_p + (n - k) as f64 * ln_q
            })
            .sum()
    }

    pub fn gradient(&self, coef: &PfaCoefficients) -> [f64; 3] {
        let mut g = [0.0; 3];
        for (&(s, f), &(n, k)) in &self.cells {
            let p = predict(
                PfaCounts {
                    successes: s,
                    failures: f,
                },
                coef,
            );
            let r = k as f64 - n as f64 * p;
            g[0] += r;
            g[1] += r * s as f64;
            g[2] += r * f as f64;
        }
        g
    }

    /// Negated Hessian (positive semi-definite).
    fn information(&self, coef: &PfaCoefficients) -> [[f64; 3]; 3] {
        let mut h = [[0.0; 3]; 3];
        for (&(s, f), &(n, _)) in &self.cells {
            let p = predict(
                PfaCounts {
                    successes: s,
                    failures: f,
                },
                coef,
            );
            let w = n as f64 * p * (1.0 - p);
            let x = [1.0, s as f64, f as f64];
            for i in 0..3 {
                for j in 0..3 {
                    h[i][j] += w * x[i] * x[j];
                }
            }
        }
        h
    }
}

/// Gradient with components zeroed where the cap blocks further ascent.
fn projected_gradient(theta: &[f64; 3], g: &[f64; 3], cap: f64) -> [f64; 3] {
    let mut pg = *g;
    for i in 0..3 {
        if (theta[i] >= cap && g[i] > 0.0) || (theta[i] <= -cap && g[i] < 0.0) {
            pg[i] = 0.0;
        }
    }
    pg
}

/// Solve `a x = b` on the index subset `free` by Cholesky; `None` if the
/// subsystem is not numerically positive definite.
fn solve_subsystem(a: &[[f64; 3]; 3], b: &[f64; 3], free: &[usize]) -> Option<[f64; 3]> {
    let k = free.len();
    let mut l = [[0.0; 3]; 3];
    for i in 0..k {
        for j in 0..=i {
            let mut sum = a[free[i]][free[j]];
            for m in 0..j {
                sum -= l[i][m] * l[j][m];
            }
            if i == j {
                if sum <= 1e-12 * a[free[i]][free[i]].abs().max(1e-300) {
                    return None;
                }
                l[i][i] = sum.sqrt();
            } else {
                l[i][j] = sum / l[j][j];
            }
        }
    }
    let mut y = [0.0; 3];
    for i in 0..k {
        let mut sum = b[free[i]];
        for m in 0..i {
            sum -= l[i][m] * y[m];
        }
        y[i] = sum / l[i][i];
    }
    let mut x = [0.0; 3];
    for i in (0..k).rev() {
        let mut sum = y[i];
        for m in i + 1..k {
            sum -= l[m][i] * x[m];
        }
        x[i] = sum / l[i][i];
    }
    let mut out = [0.0; 3];
    for (i, &f) in free.iter().enumerate() {
        out[f] = x[i];
    }
    Some(out)
}

/// Maximum-likelihood coefficients for one skill.
///
/// Ascent from all-zeros along the Newton direction restricted to the
/// coordinates not pinned at the cap, with Armijo backtracking and a
/// fallback to the projected gradient. Stops when the projected gradient
/// max-norm drops below the tolerance or after the iteration limit.
pub fn fit_skill(data: &SkillData) -> Option<PfaCoefficients> {
    fit_skill_with(data, &PfaOptions::default())
}

pub fn fit_skill_with(data: &SkillData, opts: &PfaOptions) -> Option<PfaCoefficients> {
    if data.observations() == 0 {
        return None;
    }
    let mut theta = [0.0f64; 3];
    let mut ll = data.log_likelihood(&PfaCoefficients::from_array(theta));
    for _ in 0..opts.max_iters {
        let coef = PfaCoefficients::from_array(theta);
        let g = data.gradient(&coef);
        let pg = projected_gradient(&theta, &g, opts.coef_cap);
        if pg.iter().all(|v| v.abs() < opts.grad_tol) {
            break;
        }
        let info = data.information(&coef);
        let blocked = |i: usize| pg[i] == 0.0 && g[i] != 0.0;
        let free: Vec<usize> = (0..3).filter(|&i| !blocked(i) && info[i][i] > 0.0).collect();
        let direction = solve_subsystem(&info, &pg, &free)
            .filter(|d| d.iter().zip(&pg).map(|(a, b)| a * b).sum::<f64>() > 0.0)
            .unwrap_or(pg);

        let mut step = 1.0;
        let mut accepted = false;
        while step > 1e-20 {
            let mut cand = theta;
            for i in 0..3 {
                cand[i] = (theta[i] + step * direction[i]).clamp(-opts.coef_cap, opts.coef_cap);
            }
            let cand_ll = data.log_likelihood(&PfaCoefficients::from_array(cand));
            let predicted: f64 = (0..3).map(|i| g[i] * (cand[i] - theta[i])).sum();
            let slack = 1e-13 * ll.abs().max(1.0);
            if cand_ll >= ll + 1e-4 * predicted - slack {
                theta = cand;
                ll = cand_ll;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Some(PfaCoefficients::from_array(theta))
}

/// Fitted coefficients per skill, indexed like the catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct PfaParams {
    pub skill_ids: Vec<String>,
    pub coefficients: Vec<PfaCoefficients>,
}

impl PfaParams {
    pub fn for_skill(&self, skill: usize) -> &PfaCoefficients {
        &self.coefficients[skill]
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<(), PfaError> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["skill_id", "beta", "gamma", "rho"])?;
        for (skill, c) in self.skill_ids.iter().zip(&self.coefficients) {
            w.write_record([
                skill.clone(),
                c.beta.to_string(),
                c.gamma.to_string(),
                c.rho.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(source: R) -> Result<Self, PfaError> {
        let mut rdr = csv::Reader::from_reader(source);
        let mut out = PfaParams {
            skill_ids: Vec::new(),
            coefficients: Vec::new(),
        };
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |message: &str| PfaError::BadParams {
                row: i + 1,
                message: message.to_string(),
            };
            if rec.len() != 4 {
                return Err(bad("expected 4 fields"));
            }
            let mut vals = [0.0f64; 3];
            for (v, raw) in vals.iter_mut().zip(rec.iter().skip(1)) {
                *v = raw.trim().parse().map_err(|_| bad("non-numeric coefficient"))?;
                if !v.is_finite() {
                    return Err(bad("non-finite coefficient"));
                }
            }
            out.skill_ids.push(rec[0].to_string());
            out.coefficients.push(PfaCoefficients::from_array(vals));
        }
        Ok(out)
    }
}

pub fn fit(sequences: &[StudentSequence], catalog: &SkillCatalog, opts: &PfaOptions) -> Result<PfaParams, PfaError> {
    opts.validate()?;
    let coefficients = (0..catalog.len())
        .map(|skill| {
            let outcomes: Vec<Vec<bool>> = sequences.iter().map(|s| s.skill_outcomes(skill)).collect();
            let data = SkillData::from_outcomes(outcomes.iter().map(Vec::as_slice));
            fit_skill_with(&data, opts).ok_or_else(|| PfaError::EmptyData(catalog.name(skill).to_string()))
        })
        .collect::<Result<_, _>>()?;
    Ok(PfaParams {
        skill_ids: catalog.skills().to_vec(),
        coefficients,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn predict_examples() {
        assert_eq!(predict(PfaCounts::default(), &PfaCoefficients::default()), 0.5);
        let c = PfaCoefficients::new(-1.0, 0.5, -0.2);
        let p = predict(
            PfaCounts {
                successes: 2,
                failures: 1,
            },
            &c,
        );
        assert!((p - 1.0 / (1.0 + 0.2f64.exp())).abs() < 1e-15);
        assert!((p - 0.450_166).abs() < 1e-6);
        let more = predict(
            PfaCounts {
                successes: 3,
                failures: 1,
            },
            &c,
        );
        assert!(more > p);
    }

    #[test]
    fn trace_examples() {
        let c = PfaCoefficients::new(0.7, 0.3, -0.1);
        assert_eq!(trace_student(&[false], &c).predictions[0], sigmoid(0.7));

        let c = PfaCoefficients::new(0.0, 1.0, -1.0);
        let t = trace_student(&[true, false], &c);
        assert_eq!(t.predictions[0], 0.5);
        assert!((t.predictions[1] - 0.731_059).abs() < 1e-6);
        assert_eq!(t.final_probability, 0.5);

        let t = trace_student(&[true, false, true, true], &PfaCoefficients::default());
        assert!(t.predictions.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn separable_data_stops_at_cap() {
        let seqs = vec![vec![true; 6]; 30];
        let data = SkillData::from_outcomes(seqs.iter().map(Vec::as_slice));
        let c = fit_skill(&data).unwrap();
        assert!(c.beta.abs() <= COEF_CAP && c.gamma.abs() <= COEF_CAP && c.rho.abs() <= COEF_CAP);
        assert!(c.as_array().iter().any(|v| v.abs() == COEF_CAP));
        assert!(c.as_array().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn empty_skill_is_an_error() {
        let catalog = SkillCatalog::new(["a", "b"]);
        let seqs = vec![StudentSequence {
            student_id: "s".into(),
            steps: vec![crate::dataset::Step {
                skill_id: "a".into(),
                skill: 0,
                item_id: "i".into(),
                correct: true,
            }],
        }];
        assert!(matches!(fit(&seqs, &catalog, &PfaOptions::default()), Err(PfaError::EmptyData(s)) if s == "b"));
    }

    #[test]
    fn csv_round_trip() {
        let p = PfaParams {
            skill_ids: vec!["x".into()],
            coefficients: vec![PfaCoefficients::new(-0.123_456_789, 0.5, -10.0)],
        };
        let mut buf = Vec::new();
        p.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"skill_id,beta,gamma,rho\n"));
        assert_eq!(PfaParams::read_csv(buf.as_slice()).unwrap(), p);
    }

    fn data_strategy() -> impl Strategy<Value = SkillData> {
        prop::collection::vec(prop::collection::vec(any::<bool>(), 1..12), 1..30)
            .prop_map(|seqs| SkillData::from_outcomes(seqs.iter().map(Vec::as_slice)))
    }

    proptest! {
        #[test]
        fn gradient_matches_central_differences(
            data in data_strategy(),
            b in -2.0..2.0f64, g in -1.0..1.0f64, r in -1.0..1.0f64,
        ) {
            let c = [b, g, r];
            let analytic = data.gradient(&PfaCoefficients::from_array(c));
            let h = 1e-5;
            for i in 0..3 {
                let (mut up, mut dn) = (c, c);
                up[i] += h;
                dn[i] -= h;
                let fd = (data.log_likelihood(&PfaCoefficients::from_array(up))
                    - data.log_likelihood(&PfaCoefficients::from_array(dn))) / (2.0 * h);
                let scale = analytic[i].abs().max(fd.abs()).max(1e-3);
                prop_assert!((analytic[i] - fd).abs() / scale < 1e-6, "coord {i}: {} vs {fd}", analytic[i]);
            }
        }

        #[test]
        fn fit_is_invariant_to_student_order(
            seqs in prop::collection::vec(prop::collection::vec(any::<bool>(), 1..10), 2..20)
        ) {
            let forward = SkillData::from_outcomes(seqs.iter().map(Vec::as_slice));
            let backward = SkillData::from_outcomes(seqs.iter().rev().map(Vec::as_slice));
            prop_assert_eq!(fit_skill(&forward), fit_skill(&backward));
        }

        #[test]
        fn predictions_are_open_unit_interval(s in 0u32..10, f in 0u32..10,
            b in -5.0..5.0f64, g in -1.0..1.0f64, r in -1.0..1.0f64) {
            let p = predict(PfaCounts { successes: s, failures: f }, &PfaCoefficients::new(b, g, r));
            prop_assert!(p > 0.0 && p < 1.0);
        }
    }
}
