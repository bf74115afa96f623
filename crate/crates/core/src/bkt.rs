//! Bayesian Knowledge Tracing.
//!
//! Two-state (unknown/known) model per skill with guess and slip emissions
//! and a no-forgetting learning transition. Fitting maximizes the
//! log-likelihood of first-attempt correctness inside the usual
//! anti-degeneracy box.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{SkillCatalog, StudentSequence};

pub const PROB_FLOOR: f64 = 0.01;
pub const GUESS_SLIP_CEILING: f64 = 0.3;
pub const PROB_CEILING: f64 = 0.99;

const COARSE_STEP: f64 = 0.05;
const REFINE_START: f64 = 0.0128;
const REFINE_END: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum BktError {
    #[error("Bayes denominator is zero (L={l}, correct={correct})")]
    DegenerateDenominator { l: f64, correct: bool },
    #[error("no observations to fit{}", .0.as_deref().map(|s| format!(" for skill `{s}`")).unwrap_or_default())]
    EmptyData(Option<String>),
    #[error("parameter csv: {0}")]
    Csv(#[from] csv::Error),
    #[error("parameter csv row {row}: {message}")]
    BadParams { row: usize, message: String },
    #[error("invalid bounds: {0}")]
    InvalidBounds(String),
}

/// The box the fitter searches. Guess and slip share the lower ceiling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BktBounds {
    pub floor: f64,
    pub guess_slip_ceiling: f64,
    pub ceiling: f64,
}

impl Default for BktBounds {
    fn default() -> Self {
        BktBounds {
            floor: PROB_FLOOR,
            guess_slip_ceiling: GUESS_SLIP_CEILING,
            ceiling: PROB_CEILING,
        }
    }
}

impl BktBounds {
    pub fn validate(&self) -> Result<(), BktError> {
        let ok = 0.0 < self.floor
            && self.floor < self.guess_slip_ceiling
            && self.guess_slip_ceiling <= self.ceiling
            && self.ceiling < 1.0;
        if ok {
            Ok(())
        } else {
            Err(BktError::InvalidBounds(format!(
                "need 0 < floor ({}) < guess_slip_ceiling ({}) <= ceiling ({}) < 1",
                self.floor, self.guess_slip_ceiling, self.ceiling
            )))
        }
    }

    fn ceilings(&self) -> [f64; 4] {
        [
            self.ceiling,
            self.ceiling,
            self.guess_slip_ceiling,
            self.guess_slip_ceiling,
        ]
    }

    pub fn contains(&self, p: &BktParams) -> bool {
        p.as_array()
            .iter()
            .zip(self.ceilings())
            .all(|(v, c)| (self.floor..=c).contains(v))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BktParams {
    pub p_init: f64,
    pub p_transit: f64,
    pub p_guess: f64,
    pub p_slip: f64,
}

impl BktParams {
    pub fn new(p_init: f64, p_transit: f64, p_guess: f64, p_slip: f64) -> Self {
        BktParams {
            p_init,
            p_transit,
            p_guess,
            p_slip,
        }
    }

    /// True when every parameter lies inside the fitting box.
    pub fn within_bounds(&self) -> bool {
        BktBounds::default().contains(self)
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.p_init, self.p_transit, self.p_guess, self.p_slip]
    }

    fn from_array(a: [f64; 4]) -> Self {
        BktParams::new(a[0], a[1], a[2], a[3])
    }
}

/// P(correct) = L(1 - s) + (1 - L)g.
pub fn predict_correct(l: f64, params: &BktParams) -> f64 {
    l * (1.0 - params.p_slip) + (1.0 - l) * params.p_guess
}

/// Bayes posterior on the observation, without the learning step.
pub fn posterior(l: f64, observed_correct: bool, params: &BktParams) -> Result<f64, BktError> {
    let (known, unknown) = if observed_correct {
        (l * (1.0 - params.p_slip), (1.0 - l) * params.p_guess)
    } else {
        (l * params.p_slip, (1.0 - l) * (1.0 - params.p_guess))
    };
    let denom = known + unknown;
    if denom == 0.0 {
        return Err(BktError::DegenerateDenominator {
            l,
            correct: observed_correct,
        });
    }
    Ok(known / denom)
}

/// Posterior on the observation followed by the learning transition.
pub fn update_knowledge(l: f64, observed_correct: bool, params: &BktParams) -> Result<f64, BktError> {
    let post = posterior(l, observed_correct, params)?;
    Ok(post + (1.0 - post) * params.p_transit)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BktStep {
    pub p_known_before: f64,
    /// Probability of a correct answer, assigned before the answer is seen.
    pub p_correct_pred: f64,
    pub p_known_after: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct BktTrace {
    pub steps: Vec<BktStep>,
}

impl BktTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn final_knowledge(&self) -> Option<f64> {
        self.steps.last().map(|s| s.p_known_after)
    }
}

pub fn trace_student(outcomes: &[bool], params: &BktParams) -> Result<BktTrace, BktError> {
    let mut l = params.p_init;
    let mut steps = Vec::with_capacity(outcomes.len());
    for &correct in outcomes {
        let next = update_knowledge(l, correct, params)?;
        steps.push(BktStep {
            p_known_before: l,
            p_correct_pred: predict_correct(l, params),
            p_known_after: next,
        });
        l = next;
    }
    Ok(BktTrace { steps })
}

/// Total log-likelihood of the observed outcomes.
pub fn log_likelihood(sequences: &[Vec<bool>], params: &BktParams) -> f64 {
    sequences
        .iter()
        .map(|seq| {
            let mut l = params.p_init;
            let mut ll = 0.0;
            for &correct in seq {
                let pc = predict_correct(l, params);
                ll += if correct { pc.ln() } else { (1.0 - pc).ln() };
                l = match update_knowledge(l, correct, params) {
                    Ok(v) => v,
                    Err(_) => return f64::NEG_INFINITY,
                };
            }
            ll
        })
        .sum()
}

/// Response patterns folded into a prefix tree, so that students sharing
/// a history prefix are evaluated once.
struct PatternTrie {
    // children[node][outcome] and edge multiplicities
    children: Vec<[u32; 2]>,
    counts: Vec<[u32; 2]>,
}

impl PatternTrie {
    const NONE: u32 = u32::MAX;

    fn build(sequences: &[Vec<bool>]) -> Self {
        let mut trie = PatternTrie {
            children: vec![[Self::NONE; 2]],
            counts: vec![[0; 2]],
        };
        for seq in sequences {
            let mut node = 0usize;
            for &c in seq {
                let o = c as usize;
                trie.counts[node][o] += 1;
                if trie.children[node][o] == Self::NONE {
                    trie.children.push([Self::NONE; 2]);
                    trie.counts.push([0; 2]);
                    trie.children[node][o] = (trie.children.len() - 1) as u32;
                }
                node = trie.children[node][o] as usize;
            }
        }
        trie
    }

    fn log_likelihood(&self, p: &BktParams, stack: &mut Vec<(u32, f64)>) -> f64 {
        let (g, s, t) = (p.p_guess, p.p_slip, p.p_transit);
        let mut ll = 0.0;
        stack.clear();
        stack.push((0, p.p_init));
        while let Some((node, l)) = stack.pop() {
            let node = node as usize;
            let known_c = l * (1.0 - s);
            let unknown_c = (1.0 - l) * g;
            let pc = known_c + unknown_c;
            let [n_wrong, n_right] = self.counts[node];
            if n_right > 0 {
                ll += n_right as f64 * pc.ln();
                let post = known_c / pc;
                stack.push((self.children[node][1], post + (1.0 - post) * t));
            }
            if n_wrong > 0 {
                ll += n_wrong as f64 * (1.0 - pc).ln();
                let post = l * s / (1.0 - pc);
                stack.push((self.children[node][0], post + (1.0 - post) * t));
            }
        }
        ll
    }
}

fn axis(floor: f64, ceiling: f64) -> Vec<f64> {
    let mut v: Vec<f64> = (0..)
        .map(|k| floor + k as f64 * COARSE_STEP)
        .take_while(|x| *x < ceiling - 1e-9)
        .collect();
    v.push(ceiling);
    v
}

/// Maximum-likelihood parameters for one skill inside the default box.
pub fn fit_skill(sequences: &[Vec<bool>]) -> Result<BktParams, BktError> {
    fit_skill_within(sequences, &BktBounds::default())
}

/// Maximum-likelihood parameters for one skill inside `bounds`.
///
/// A coarse grid over the box is followed by best-improvement coordinate
/// moves whose step halves down to 1e-4. Candidates only replace the
/// incumbent on a strict improvement and are visited in lexicographic
/// order, so ties resolve to the lexicographically smallest point.
pub fn fit_skill_within(sequences: &[Vec<bool>], bounds: &BktBounds) -> Result<BktParams, BktError> {
    bounds.validate()?;
    if sequences.iter().all(|s| s.is_empty()) {
        return Err(BktError::EmptyData(None));
    }
    let trie = PatternTrie::build(sequences);
    let mut stack = Vec::new();

    let ceilings = bounds.ceilings();
    let axes: Vec<Vec<f64>> = ceilings.iter().map(|&c| axis(bounds.floor, c)).collect();
    let mut best = [axes[0][0], axes[1][0], axes[2][0], axes[3][0]];
    let mut best_ll = f64::NEG_INFINITY;
    for &a in &axes[0] {
        for &b in &axes[1] {
            for &c in &axes[2] {
                for &d in &axes[3] {
                    let ll = trie.log_likelihood(&BktParams::new(a, b, c, d), &mut stack);
                    if ll > best_ll {
                        best_ll = ll;
                        best = [a, b, c, d];
                    }
                }
            }
        }
    }

    let mut step = REFINE_START;
    while step >= REFINE_END * (1.0 - 1e-9) {
        loop {
            let mut improved = None;
            let mut improved_ll = best_ll;
            for dim in 0..4 {
                for dir in [-1.0, 1.0] {
                    let mut cand = best;
                    cand[dim] = (cand[dim] + dir * step).clamp(bounds.floor, ceilings[dim]);
                    if cand[dim] == best[dim] {
                        continue;
                    }
                    let ll = trie.log_likelihood(&BktParams::from_array(cand), &mut stack);
                    if ll > improved_ll || (ll == improved_ll && improved.is_some_and(|p: [f64; 4]| cand < p)) {
                        improved_ll = ll;
                        improved = Some(cand);
                    }
                }
            }
            match improved {
                Some(p) => {
                    best = p;
                    best_ll = improved_ll;
                }
                None => break,
            }
        }
        step /= 2.0;
    }
    Ok(BktParams::from_array(best))
}

/// Fitted parameters for every skill in a catalog, indexed like the catalog.
#[derive(Debug, Clone, PartialEq)]
pub struct BktModel {
    pub skill_ids: Vec<String>,
    pub params: Vec<BktParams>,
}

impl BktModel {
    pub fn params_for(&self, skill: usize) -> &BktParams {
        &self.params[skill]
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<(), BktError> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["skill_id", "p_init", "p_transit", "p_guess", "p_slip"])?;
        for (skill, p) in self.skill_ids.iter().zip(&self.params) {
            w.write_record([
                skill.clone(),
                p.p_init.to_string(),
                p.p_transit.to_string(),
                p.p_guess.to_string(),
                p.p_slip.to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(source: R) -> Result<Self, BktError> {
        let mut rdr = csv::Reader::from_reader(source);
        let mut model = BktModel {
            skill_ids: Vec::new(),
            params: Vec::new(),
        };
        for (i, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |message: &str| BktError::BadParams {
                row: i + 1,
                message: message.to_string(),
            };
            if rec.len() != 5 {
                return Err(bad("expected 5 fields"));
            }
            let mut vals = [0.0; 4];
            for (v, raw) in vals.iter_mut().zip(rec.iter().skip(1)) {
                *v = raw.trim().parse().map_err(|_| bad("non-numeric parameter"))?;
            }
            model.skill_ids.push(rec[0].to_string());
            model.params.push(BktParams::from_array(vals));
        }
        Ok(model)
    }
}

/// Per-skill outcome lists in chronological order, one per student with at
/// least one attempt on the skill.
pub fn skill_sequences(sequences: &[StudentSequence], skill: usize) -> Vec<Vec<bool>> {
    sequences
        .iter()
        .map(|s| s.skill_outcomes(skill))
        .filter(|o| !o.is_empty())
        .collect()
}

/// Fit every skill independently, one thread per skill.
pub fn fit_all(
    sequences: &[StudentSequence],
    catalog: &SkillCatalog,
    bounds: &BktBounds,
) -> Result<BktModel, BktError> {
    bounds.validate()?;
    let results: Vec<Result<BktParams, BktError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..catalog.len())
            .map(|skill| {
                scope.spawn(move || {
                    fit_skill_within(&skill_sequences(sequences, skill), bounds).map_err(|e| match e {
                        BktError::EmptyData(_) => BktError::EmptyData(Some(catalog.name(skill).to_string())),
                        other => other,
                    })
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("bkt fit thread panicked"))
            .collect()
    });
    Ok(BktModel {
        skill_ids: catalog.skills().to_vec(),
        params: results.into_iter().collect::<Result<_, _>>()?,
    })
}
