//! Deep Knowledge Tracing with prediction-consistent regularization.
//!
//! An LSTM reads one-hot (skill, correctness) inputs of width 2S and emits a
//! vector of S next-attempt correctness probabilities after every step.
//! `y_0` comes from the zero initial state, so every attempt, including
//! the first, has a prediction made before it is observed.
//!
//! Training loss, averaged over all attempts in the corpus:
//!
//! ```text
//! L = CE(y_{t-1}[q_t], a_t)                      next-attempt term
//!   + lambda_r  * CE(y_t[q_t], a_t)              reconstruction
//!   + lambda_w1 * |y_t - y_{t-1}|_1 / S          waviness, L1
//!   + lambda_w2 * |y_t - y_{t-1}|_2^2 / S        waviness, L2
//! ```

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::StudentSequence;
use crate::estimator::{AttemptPrediction, Prediction};
use crate::math::{cross_entropy_logit, sigmoid};
use crate::nn::{axpy, seeded_rng, Adam, Mat, Parameters};

const CHECKPOINT_FORMAT: &str = "ktrace-dkt";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DktError {
    #[error("skill index {index} out of range for {num_skills} skills")]
    IndexOutOfRange { index: usize, num_skills: usize },
    #[error("training loss became non-finite in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("empty training corpus")]
    EmptyCorpus,
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DktConfig {
    pub hidden_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub lambda_r: f64,
    pub lambda_w1: f64,
    pub lambda_w2: f64,
    pub seed: u64,
    pub max_grad_norm: f64,
}

impl Default for DktConfig {
    fn default() -> Self {
        DktConfig {
            hidden_size: 64,
            learning_rate: 0.01,
            epochs: 50,
            lambda_r: 0.1,
            lambda_w1: 0.03,
            lambda_w2: 3.0,
            seed: 42,
            max_grad_norm: 5.0,
        }
    }
}

impl DktConfig {
    pub fn validate(&self) -> Result<(), DktError> {
        let bad = |m: &str| Err(DktError::InvalidConfig(m.to_string()));
        if self.hidden_size == 0 {
            return bad("hidden_size must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("learning_rate and max_grad_norm must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        if [self.lambda_r, self.lambda_w1, self.lambda_w2]
            .iter()
            .any(|l| !(*l >= 0.0) || !l.is_finite())
        {
            return bad("regularization weights must be finite and non-negative");
        }
        Ok(())
    }

    /// The same configuration with every regularizer switched off.
    pub fn unregularized(&self) -> Self {
        DktConfig {
            lambda_r: 0.0,
            lambda_w1: 0.0,
            lambda_w2: 0.0,
            ..self.clone()
        }
    }
}

/// LSTM parameters. Gate blocks of the 4H pre-activation are ordered
/// input, forget, output, candidate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DktModel {
    pub num_skills: usize,
    pub hidden_size: usize,
    /// 2S x 4H; row `x` is the gate contribution of one-hot input `x`.
    pub w_in: Mat,
    /// 4H x H
    pub w_rec: Mat,
    pub b_gates: Vec<f64>,
    /// S x H
    pub w_out: Mat,
    pub b_out: Vec<f64>,
}

impl Parameters for DktModel {
    fn groups(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("w_in", &self.w_in.data),
            ("w_rec", &self.w_rec.data),
            ("b_gates", &self.b_gates),
            ("w_out", &self.w_out.data),
            ("b_out", &self.b_out),
        ]
    }

    fn groups_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("w_in", &mut self.w_in.data),
            ("w_rec", &mut self.w_rec.data),
            ("b_gates", &mut self.b_gates),
            ("w_out", &mut self.w_out.data),
            ("b_out", &mut self.b_out),
        ]
    }

    fn zeros_like(&self) -> Self {
        let (s, h) = (self.num_skills, self.hidden_size);
        DktModel {
            num_skills: s,
            hidden_size: h,
            w_in: Mat::zeros(2 * s, 4 * h),
            w_rec: Mat::zeros(4 * h, h),
            b_gates: vec![0.0; 4 * h],
            w_out: Mat::zeros(s, h),
            b_out: vec![0.0; s],
        }
    }
}

/// Position of the one-hot coordinate for an attempt.
pub fn input_index(skill: usize, correct: bool, num_skills: usize) -> usize {
    skill + num_skills * correct as usize
}

pub fn encode_input(skill: usize, correct: bool, num_skills: usize) -> Result<Vec<f64>, DktError> {
    if skill >= num_skills {
        return Err(DktError::IndexOutOfRange {
            index: skill,
            num_skills,
        });
    }
    let mut v = vec![0.0; 2 * num_skills];
    v[input_index(skill, correct, num_skills)] = 1.0;
    Ok(v)
}

/// Activations of one sequence, kept for backpropagation.
struct Tape {
    /// h_0..h_T, c_0..c_T
    h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
    /// post-activation gates for steps 1..T, each 4H
    gates: Vec<Vec<f64>>,
    /// output logits z_0..z_T and probabilities y_0..y_T
    logits: Vec<Vec<f64>>,
    y: Vec<Vec<f64>>,
}

/// Unnormalized loss sums for one sequence.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossParts {
    pub next: f64,
    pub current: f64,
    pub wave_l1: f64,
    pub wave_l2: f64,
    pub attempts: usize,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.next += o.next;
        self.current += o.current;
        self.wave_l1 += o.wave_l1;
        self.wave_l2 += o.wave_l2;
        self.attempts += o.attempts;
    }

    pub fn total(&self, cfg: &DktConfig, num_skills: usize) -> f64 {
        let n = self.attempts as f64;
        (self.next + cfg.lambda_r * self.current) / n
            + (cfg.lambda_w1 * self.wave_l1 + cfg.lambda_w2 * self.wave_l2) / (n * num_skills as f64)
    }
}

fn steps_of(seq: &StudentSequence) -> Vec<(usize, bool)> {
    seq.steps.iter().map(|s| (s.skill, s.correct)).collect()
}

impl DktModel {
    /// Uniform(+-1/sqrt(fan_in)) weights, zero biases, forget-gate bias 1.
    pub fn new<R: Rng>(num_skills: usize, hidden_size: usize, rng: &mut R) -> Self {
        let (s, h) = (num_skills, hidden_size);
        let fan_in = 2 * s + h;
        let mut b_gates = vec![0.0; 4 * h];
        b_gates[h..2 * h].fill(1.0);
        DktModel {
            num_skills: s,
            hidden_size: h,
            w_in: Mat::uniform(2 * s, 4 * h, fan_in, rng),
            w_rec: Mat::uniform(4 * h, h, fan_in, rng),
            b_gates,
            w_out: Mat::uniform(s, h, h, rng),
            b_out: vec![0.0; s],
        }
    }

    fn output(&self, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut z = self.b_out.clone();
        self.w_out.matvec_acc(h, &mut z);
        let y = z.iter().map(|&v| sigmoid(v)).collect();
        (z, y)
    }

    fn run(&self, steps: &[(usize, bool)]) -> Tape {
        let hs = self.hidden_size;
        let t_len = steps.len();
        let mut tape = Tape {
            h: Vec::with_capacity(t_len + 1),
            c: Vec::with_capacity(t_len + 1),
            gates: Vec::with_capacity(t_len),
            logits: Vec::with_capacity(t_len + 1),
            y: Vec::with_capacity(t_len + 1),
        };
        tape.h.push(vec![0.0; hs]);
        tape.c.push(vec![0.0; hs]);
        let (z, y) = self.output(&tape.h[0]);
        tape.logits.push(z);
        tape.y.push(y);

        for &(skill, correct) in steps {
            let h_prev = tape.h.last().unwrap();
            let c_prev = tape.c.last().unwrap();
            let mut pre = self.b_gates.clone();
            axpy(
                1.0,
                self.w_in.row(input_index(skill, correct, self.num_skills)),
                &mut pre,
            );
            self.w_rec.matvec_acc(h_prev, &mut pre);
            let mut gates = pre;
            for (k, v) in gates.iter_mut().enumerate() {
                *v = if k < 3 * hs { sigmoid(*v) } else { v.tanh() };
            }
            let mut c = vec![0.0; hs];
            let mut h = vec![0.0; hs];
            for j in 0..hs {
                let (i, f, o, g) = (gates[j], gates[hs + j], gates[2 * hs + j], gates[3 * hs + j]);
                c[j] = f * c_prev[j] + i * g;
                h[j] = o * c[j].tanh();
            }
            let (z, y) = self.output(&h);
            tape.gates.push(gates);
            tape.c.push(c);
            tape.h.push(h);
            tape.logits.push(z);
            tape.y.push(y);
        }
        tape
    }

    /// Prediction vector from the initial state, used for every first attempt.
    pub fn initial_prediction(&self) -> Vec<f64> {
        self.output(&vec![0.0; self.hidden_size]).1
    }

    /// T x S matrix whose row t is y_t, the prediction after consuming
    /// attempts 1..=t.
    pub fn forward(&self, seq: &StudentSequence) -> Vec<Vec<f64>> {
        let mut y = self.run(&steps_of(seq)).y;
        y.remove(0);
        y
    }

    /// Total L1 variation of the prediction trajectory y_0..y_T.
    pub fn total_variation(&self, seq: &StudentSequence) -> f64 {
        self.run(&steps_of(seq))
            .y
            .windows(2)
            .map(|w| w[1].iter().zip(&w[0]).map(|(a, b)| (a - b).abs()).sum::<f64>())
            .sum()
    }

    pub fn predict_attempts(&self, seq: &StudentSequence) -> Vec<AttemptPrediction> {
        let tape = self.run(&steps_of(seq));
        seq.steps
            .iter()
            .enumerate()
            .map(|(t, step)| {
                let p = tape.y[t][step.skill];
                AttemptPrediction {
                    student_id: seq.student_id.clone(),
                    skill_id: step.skill_id.clone(),
                    item_id: step.item_id.clone(),
                    probability: Prediction::from_probability(p),
                }
            })
            .collect()
    }

    fn loss_parts_of(&self, steps: &[(usize, bool)]) -> LossParts {
        let tape = self.run(steps);
        loss_parts(&tape, steps)
    }

    /// Mean loss over every attempt in the corpus.
    pub fn loss(&self, sequences: &[StudentSequence], cfg: &DktConfig) -> f64 {
        let mut parts = LossParts::default();
        for seq in sequences.iter().filter(|s| !s.is_empty()) {
            parts.add(&self.loss_parts_of(&steps_of(seq)));
        }
        parts.total(cfg, self.num_skills)
    }

    /// Accumulate into `grads` the gradient of this sequence's loss terms
    /// divided by `norm` (the attempt count of the enclosing objective).
    fn backward(&self, steps: &[(usize, bool)], cfg: &DktConfig, norm: f64, grads: &mut DktModel) -> LossParts {
        let tape = self.run(steps);
        let parts = loss_parts(&tape, steps);
        let (s_n, hs) = (self.num_skills, self.hidden_size);
        let t_len = steps.len();

        // d loss / d output logits, for y_0..y_T
        let mut dz: Vec<Vec<f64>> = vec![vec![0.0; s_n]; t_len + 1];
        for (t, &(q, a)) in steps.iter().enumerate() {
            let target = a as u8 as f64;
            dz[t][q] += (tape.y[t][q] - target) / norm;
            dz[t + 1][q] += cfg.lambda_r * (tape.y[t + 1][q] - target) / norm;
        }
        let wave_scale = norm * s_n as f64;
        for t in 0..t_len {
            for k in 0..s_n {
                let d = tape.y[t + 1][k] - tape.y[t][k];
                let g = (cfg.lambda_w1 * d.signum() * (d != 0.0) as u8 as f64 + 2.0 * cfg.lambda_w2 * d) / wave_scale;
                dz[t + 1][k] += g * tape.y[t + 1][k] * (1.0 - tape.y[t + 1][k]);
                dz[t][k] -= g * tape.y[t][k] * (1.0 - tape.y[t][k]);
            }
        }

        let mut dh_out: Vec<Vec<f64>> = vec![vec![0.0; hs]; t_len + 1];
        for t in 0..=t_len {
            grads.w_out.add_outer(&dz[t], &tape.h[t]);
            axpy(1.0, &dz[t], &mut grads.b_out);
            self.w_out.matvec_t_acc(&dz[t], &mut dh_out[t]);
        }

        let mut dh_carry = vec![0.0; hs];
        let mut dc_carry = vec![0.0; hs];
        let mut dpre = vec![0.0; 4 * hs];
        for t in (1..=t_len).rev() {
            let gates = &tape.gates[t - 1];
            let c = &tape.c[t];
            let c_prev = &tape.c[t - 1];
            for j in 0..hs {
                let (i, f, o, g) = (gates[j], gates[hs + j], gates[2 * hs + j], gates[3 * hs + j]);
                let dh = dh_out[t][j] + dh_carry[j];
                let tc = c[j].tanh();
                let d_o = dh * tc;
                let dc = dc_carry[j] + dh * o * (1.0 - tc * tc);
                let d_i = dc * g;
                let d_g = dc * i;
                let d_f = dc * c_prev[j];
                dc_carry[j] = dc * f;
                dpre[j] = d_i * i * (1.0 - i);
                dpre[hs + j] = d_f * f * (1.0 - f);
                dpre[2 * hs + j] = d_o * o * (1.0 - o);
                dpre[3 * hs + j] = d_g * (1.0 - g * g);
            }
            let (skill, correct) = steps[t - 1];
            axpy(1.0, &dpre, grads.w_in.row_mut(input_index(skill, correct, s_n)));
            grads.w_rec.add_outer(&dpre, &tape.h[t - 1]);
            axpy(1.0, &dpre, &mut grads.b_gates);
            dh_carry.fill(0.0);
            self.w_rec.matvec_t_acc(&dpre, &mut dh_carry);
        }
        parts
    }

    /// Loss and its gradient over a whole corpus.
    pub fn loss_and_gradient(&self, sequences: &[StudentSequence], cfg: &DktConfig) -> (f64, DktModel) {
        let seqs: Vec<Vec<(usize, bool)>> = sequences.iter().filter(|s| !s.is_empty()).map(steps_of).collect();
        let norm = seqs.iter().map(Vec::len).sum::<usize>() as f64;
        let mut grads = self.zeros_like();
        let mut parts = LossParts::default();
        for steps in &seqs {
            parts.add(&self.backward(steps, cfg, norm, &mut grads));
        }
        (parts.total(cfg, self.num_skills), grads)
    }

    pub fn save<W: Write>(&self, cfg: &DktConfig, sink: W) -> Result<(), DktError> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: cfg.clone(),
            model: self.clone(),
        };
        serde_json::to_writer(sink, &ckpt).map_err(|e| DktError::Checkpoint(e.to_string()))
    }

    pub fn load<R: Read>(source: R) -> Result<(DktModel, DktConfig), DktError> {
        let ckpt: Checkpoint = serde_json::from_reader(source).map_err(|e| DktError::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(DktError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let m = &ckpt.model;
        let (s, h) = (m.num_skills, m.hidden_size);
        let shapes_ok = m.w_in.rows == 2 * s
            && m.w_in.cols == 4 * h
            && m.w_rec.rows == 4 * h
            && m.w_rec.cols == h
            && m.b_gates.len() == 4 * h
            && m.w_out.rows == s
            && m.w_out.cols == h
            && m.b_out.len() == s
            && m.groups()
                .iter()
                .zip(m.zeros_like().groups())
                .all(|(a, b)| a.1.len() == b.1.len());
        if !shapes_ok {
            return Err(DktError::Checkpoint("matrix shapes do not match dimensions".into()));
        }
        Ok((ckpt.model, ckpt.config))
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: DktConfig,
    model: DktModel,
}

fn loss_parts(tape: &Tape, steps: &[(usize, bool)]) -> LossParts {
    let mut parts = LossParts {
        attempts: steps.len(),
        ..LossParts::default()
    };
    for (t, &(q, a)) in steps.iter().enumerate() {
        parts.next += cross_entropy_logit(tape.logits[t][q], a);
        parts.current += cross_entropy_logit(tape.logits[t + 1][q], a);
        for (after, before) in tape.y[t + 1].iter().zip(&tape.y[t]) {
            let d = after - before;
            parts.wave_l1 += d.abs();
            parts.wave_l2 += d * d;
        }
    }
    parts
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    /// Mean per-sequence loss seen during each epoch's updates.
    pub epoch_losses: Vec<f64>,
}

/// Per-sequence Adam updates over `epochs` passes, in one shuffled order
/// drawn from the seed. Gradients are clipped to `max_grad_norm`.
pub fn train(
    sequences: &[StudentSequence],
    num_skills: usize,
    cfg: &DktConfig,
) -> Result<(DktModel, TrainingReport), DktError> {
    cfg.validate()?;
    let seqs: Vec<Vec<(usize, bool)>> = sequences.iter().filter(|s| !s.is_empty()).map(steps_of).collect();
    if seqs.is_empty() {
        return Err(DktError::EmptyCorpus);
    }
    if let Some(&(index, _)) = seqs.iter().flatten().find(|(k, _)| *k >= num_skills) {
        return Err(DktError::IndexOutOfRange { index, num_skills });
    }

    let mut rng = seeded_rng(cfg.seed);
    let mut model = DktModel::new(num_skills, cfg.hidden_size, &mut rng);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut rng);

    let corpus_loss = |m: &DktModel| {
        let mut parts = LossParts::default();
        for s in &seqs {
            parts.add(&m.loss_parts_of(s));
        }
        parts.total(cfg, num_skills)
    };
    let initial_loss = corpus_loss(&model);
    let mut adam = Adam::new(&model, cfg.learning_rate);
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut grads = model.zeros_like();
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        for &i in &order {
            let steps = &seqs[i];
            for (_, g) in grads.groups_mut() {
                g.fill(0.0);
            }
            let parts = model.backward(steps, cfg, steps.len() as f64, &mut grads);
            let loss = parts.total(cfg, num_skills);
            if !loss.is_finite() || !grads.is_finite() {
                return Err(DktError::NonFiniteLoss { epoch });
            }
            sum += loss;
            grads.clip_global_norm(cfg.max_grad_norm);
            adam.step(&mut model, &grads);
        }
        epoch_losses.push(sum / seqs.len() as f64);
    }
    let final_loss = corpus_loss(&model);
    if !final_loss.is_finite() {
        return Err(DktError::NonFiniteLoss { epoch: cfg.epochs });
    }
    Ok((
        model,
        TrainingReport {
            initial_loss,
            final_loss,
            epoch_losses,
        },
    ))
}
