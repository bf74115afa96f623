//! Synthetic cohorts from the BKT generative process, with a per-student
//! ability offset on the emission logits and a posttest drawn from each
//! student's final latent knowledge.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bkt::BktParams;
use crate::dataset::{InteractionRecord, PosttestScores};
use crate::math::{logit, sigmoid};

#[derive(Debug, Error)]
pub enum SimulatorError {
    #[error("invalid cohort spec: {0}")]
    InvalidSpec(String),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillSpec {
    pub skill_id: String,
    pub opportunities: usize,
    pub params: BktParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CohortSpec {
    pub num_students: usize,
    pub skills: Vec<SkillSpec>,
    /// Standard deviation of the per-student logit offset.
    pub ability_sd: f64,
    pub posttest_items_per_skill: usize,
    pub posttest_guess: f64,
    pub posttest_slip: f64,
    pub seed: u64,
}

impl CohortSpec {
    pub fn validate(&self) -> Result<(), SimulatorError> {
        let bad = |m: String| Err(SimulatorError::InvalidSpec(m));
        if self.num_students == 0 || self.skills.is_empty() || self.posttest_items_per_skill == 0 {
            return bad("num_students, skills and posttest_items_per_skill must be non-empty".into());
        }
        if !(self.ability_sd >= 0.0 && self.ability_sd.is_finite()) {
            return bad(format!(
                "ability_sd {} must be finite and non-negative",
                self.ability_sd
            ));
        }
        let unit = |p: f64| (0.0..=1.0).contains(&p);
        if !unit(self.posttest_guess) || !unit(self.posttest_slip) {
            return bad("posttest guess/slip must lie in [0, 1]".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for s in &self.skills {
            if !seen.insert(&s.skill_id) {
                return bad(format!("duplicate skill {}", s.skill_id));
            }
            if s.skill_id.is_empty() || s.skill_id.contains(':') {
                return bad(format!("skill id {:?} must be non-empty and free of ':'", s.skill_id));
            }
            if s.opportunities == 0 {
                return bad(format!("skill {} needs at least one opportunity", s.skill_id));
            }
            let p = &s.params;
            if ![p.p_init, p.p_transit, p.p_guess, p.p_slip].into_iter().all(unit) {
                return bad(format!("skill {} has a probability outside [0, 1]", s.skill_id));
            }
        }
        Ok(())
    }

    pub fn student_id(&self, index: usize) -> String {
        let width = self.num_students.saturating_sub(1).to_string().len().max(3);
        format!("s{index:0width$}")
    }
}

/// The latent state a cohort was generated from.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruth {
    /// Knowledge after the transition following the last attempt.
    pub final_known: BTreeMap<(String, String), bool>,
    pub ability: BTreeMap<String, f64>,
}

impl GroundTruth {
    /// `student_id,skill_id,final_known,ability`
    pub fn write_csv<W: Write>(&self, sink: W) -> Result<(), SimulatorError> {
        let mut w = csv::Writer::from_writer(sink);
        w.write_record(["student_id", "skill_id", "final_known", "ability"])?;
        for ((student, skill), &known) in &self.final_known {
            w.write_record([
                student.as_str(),
                skill.as_str(),
                if known { "1" } else { "0" },
                &self.ability[student].to_string(),
            ])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Fraction of students whose final state is "known", per skill.
    pub fn known_fraction(&self) -> BTreeMap<String, f64> {
        let mut counts: BTreeMap<String, (usize, usize)> = BTreeMap::new();
        for ((_, skill), &known) in &self.final_known {
            let c = counts.entry(skill.clone()).or_default();
            c.0 += known as usize;
            c.1 += 1;
        }
        counts
            .into_iter()
            .map(|(k, (yes, all))| (k, yes as f64 / all as f64))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cohort {
    pub interactions: Vec<InteractionRecord>,
    pub posttest: PosttestScores,
    pub truth: GroundTruth,
}

/// P(correct) for a student with logit offset `ability` in each latent state.
fn emission(guess: f64, slip: f64, ability: f64) -> (f64, f64) {
    (sigmoid(logit(guess) + ability), sigmoid(logit(1.0 - slip) + ability))
}

fn bernoulli<R: Rng>(rng: &mut R, p: f64) -> bool {
    rng.random::<f64>() < p
}

/// Students draw from independent streams of one seeded generator, so each
/// student's data depends only on the seed and their index.
pub fn generate_cohort(spec: &CohortSpec) -> Result<Cohort, SimulatorError> {
    spec.validate()?;
    let ability_dist = Normal::new(0.0, spec.ability_sd).map_err(|e| SimulatorError::InvalidSpec(e.to_string()))?;
    let mut cohort = Cohort {
        interactions: Vec::new(),
        posttest: PosttestScores::default(),
        truth: GroundTruth::default(),
    };
    for index in 0..spec.num_students {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(index as u64);
        let student = spec.student_id(index);
        let ability = if spec.ability_sd > 0.0 {
            ability_dist.sample(&mut rng)
        } else {
            0.0
        };

        let mut known: Vec<bool> = spec
            .skills
            .iter()
            .map(|s| bernoulli(&mut rng, s.params.p_init))
            .collect();
        let mut schedule: Vec<usize> = spec
            .skills
            .iter()
            .enumerate()
            .flat_map(|(k, s)| std::iter::repeat_n(k, s.opportunities))
            .collect();
        schedule.shuffle(&mut rng);

        let mut seen = vec![0usize; spec.skills.len()];
        for (order, &k) in schedule.iter().enumerate() {
            let skill = &spec.skills[k];
            let (p_unknown, p_known) = emission(skill.params.p_guess, skill.params.p_slip, ability);
            let correct = bernoulli(&mut rng, if known[k] { p_known } else { p_unknown });
            if !known[k] {
                known[k] = bernoulli(&mut rng, skill.params.p_transit);
            }
            cohort.interactions.push(InteractionRecord {
                student_id: student.clone(),
                skill_id: skill.skill_id.clone(),
                item_id: format!("{}:{}", skill.skill_id, seen[k]),
                attempt_number: 1,
                correct,
                order_index: order as u64,
            });
            seen[k] += 1;
        }

        let (p_unknown, p_known) = emission(spec.posttest_guess, spec.posttest_slip, ability);
        for (k, skill) in spec.skills.iter().enumerate() {
            let p = if known[k] { p_known } else { p_unknown };
            let right = (0..spec.posttest_items_per_skill)
                .filter(|_| bernoulli(&mut rng, p))
                .count();
            let key = (student.clone(), skill.skill_id.clone());
            cohort
                .posttest
                .entries
                .insert(key.clone(), right as f64 / spec.posttest_items_per_skill as f64);
            cohort.truth.final_known.insert(key, known[k]);
        }
        cohort.truth.ability.insert(student, ability);
    }
    Ok(cohort)
}

fn skill(id: &str, opportunities: usize, l0: f64, t: f64, g: f64, s: f64) -> SkillSpec {
    SkillSpec {
        skill_id: id.to_string(),
        opportunities,
        params: BktParams::new(l0, t, g, s),
    }
}

/// Four skills with distinct difficulty and learning rates, 9 to 12
/// practice opportunities each, 500 students of varying ability.
pub fn default_scenario(seed: u64) -> CohortSpec {
    CohortSpec {
        num_students: 500,
        skills: vec![
            skill("addition", 12, 0.35, 0.15, 0.2, 0.1),
            skill("comparison", 12, 0.2, 0.1, 0.25, 0.1),
            skill("ordering", 9, 0.45, 0.2, 0.15, 0.08),
            skill("placement", 10, 0.1, 0.12, 0.2, 0.15),
        ],
        ability_sd: 1.0,
        posttest_items_per_skill: 10,
        posttest_guess: 0.2,
        posttest_slip: 0.1,
        seed,
    }
}

/// Fast learning and plenty of practice: nearly every student ends in the
/// known state. Reliable in-system answering once a skill is known hides
/// ability from the final attempts, while the noisier posttest and the
/// pre-mastery guessing still reveal it.
pub fn mastery_saturation_scenario(seed: u64) -> CohortSpec {
    CohortSpec {
        num_students: 400,
        skills: vec![
            skill("addition", 12, 0.1, 0.3, 0.25, 0.03),
            skill("comparison", 12, 0.15, 0.3, 0.2, 0.04),
            skill("ordering", 12, 0.1, 0.35, 0.25, 0.03),
            skill("placement", 12, 0.05, 0.3, 0.2, 0.05),
        ],
        ability_sd: 1.2,
        posttest_items_per_skill: 10,
        posttest_guess: 0.25,
        posttest_slip: 0.25,
        seed,
    }
}

/// Scenario names accepted by [`scenario`].
pub const SCENARIOS: [&str; 2] = ["default", "mastery-saturation"];

pub fn scenario(name: &str, seed: u64) -> Option<CohortSpec> {
    match name {
        "default" => Some(default_scenario(seed)),
        "mastery-saturation" => Some(mastery_saturation_scenario(seed)),
        _ => None,
    }
}
