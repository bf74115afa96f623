//! Dynamic Key-Value Memory Networks for knowledge tracing.
//!
//! Per attempt on skill q with answer a:
//!
//! ```text
//! k_t = query_embed[q]                         attention key
//! w_t = softmax(key_memory * k_t)              weights over N slots
//! r_t = sum_i w_t(i) * M_t(i)                  read from value memory
//! f_t = tanh(W_1 [r_t; k_t] + b_1)             summary
//! p_t = logistic(w_2 . f_t + b_2)              P(correct), before a is seen
//! v_t = answer_embed[q + S*a]
//! e_t = logistic(E v_t + b_e),  a_t = tanh(A v_t + b_a)
//! M_{t+1}(i) = M_t(i) * (1 - w_t(i) e_t) + w_t(i) a_t
//! ```
//!
//! `M_0` is a trained parameter copied for every student.

use std::io::{Read, Write};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::StudentSequence;
use crate::estimator::{AttemptPrediction, Prediction};
use crate::math::{cross_entropy_logit, sigmoid};
use crate::nn::{axpy, dot, seeded_rng, Adam, Mat, Parameters};

const CHECKPOINT_FORMAT: &str = "ktrace-dkvmn";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DkvmnError {
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
pub struct DkvmnConfig {
    pub memory_slots: usize,
    pub key_dim: usize,
    pub value_dim: usize,
    /// Width of the summary layer f_t.
    pub summary_dim: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub max_grad_norm: f64,
}

impl Default for DkvmnConfig {
    fn default() -> Self {
        DkvmnConfig {
            memory_slots: 8,
            key_dim: 16,
            value_dim: 16,
            summary_dim: 16,
            learning_rate: 0.01,
            epochs: 50,
            seed: 42,
            max_grad_norm: 5.0,
        }
    }
}

impl DkvmnConfig {
    pub fn validate(&self) -> Result<(), DkvmnError> {
        let bad = |m: &str| Err(DkvmnError::InvalidConfig(m.to_string()));
        if self.memory_slots == 0 || self.key_dim == 0 || self.value_dim == 0 || self.summary_dim == 0 {
            return bad("memory_slots, key_dim, value_dim and summary_dim must be at least 1");
        }
        if !(self.learning_rate > 0.0) || !(self.max_grad_norm > 0.0) {
            return bad("learning_rate and max_grad_norm must be positive");
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DkvmnModel {
    pub num_skills: usize,
    /// N x d_k
    pub key_memory: Mat,
    /// N x d_v, the value memory every student starts from
    pub value_init: Mat,
    /// S x d_k
    pub query_embed: Mat,
    /// 2S x d_v
    pub answer_embed: Mat,
    /// F x (d_v + d_k)
    pub w_summary: Mat,
    pub b_summary: Vec<f64>,
    pub w_pred: Vec<f64>,
    pub b_pred: Vec<f64>,
    /// d_v x d_v
    pub w_erase: Mat,
    pub b_erase: Vec<f64>,
    /// d_v x d_v
    pub w_add: Mat,
    pub b_add: Vec<f64>,
}

impl Parameters for DkvmnModel {
    fn groups(&self) -> Vec<(&'static str, &[f64])> {
        vec![
            ("key_memory", &self.key_memory.data),
            ("value_init", &self.value_init.data),
            ("query_embed", &self.query_embed.data),
            ("answer_embed", &self.answer_embed.data),
            ("w_summary", &self.w_summary.data),
            ("b_summary", &self.b_summary),
            ("w_pred", &self.w_pred),
            ("b_pred", &self.b_pred),
            ("w_erase", &self.w_erase.data),
            ("b_erase", &self.b_erase),
            ("w_add", &self.w_add.data),
            ("b_add", &self.b_add),
        ]
    }

    fn groups_mut(&mut self) -> Vec<(&'static str, &mut [f64])> {
        vec![
            ("key_memory", &mut self.key_memory.data),
            ("value_init", &mut self.value_init.data),
            ("query_embed", &mut self.query_embed.data),
            ("answer_embed", &mut self.answer_embed.data),
            ("w_summary", &mut self.w_summary.data),
            ("b_summary", &mut self.b_summary),
            ("w_pred", &mut self.w_pred),
            ("b_pred", &mut self.b_pred),
            ("w_erase", &mut self.w_erase.data),
            ("b_erase", &mut self.b_erase),
            ("w_add", &mut self.w_add.data),
            ("b_add", &mut self.b_add),
        ]
    }

    fn zeros_like(&self) -> Self {
        let z = |m: &Mat| Mat::zeros(m.rows, m.cols);
        DkvmnModel {
            num_skills: self.num_skills,
            key_memory: z(&self.key_memory),
            value_init: z(&self.value_init),
            query_embed: z(&self.query_embed),
            answer_embed: z(&self.answer_embed),
            w_summary: z(&self.w_summary),
            b_summary: vec![0.0; self.b_summary.len()],
            w_pred: vec![0.0; self.w_pred.len()],
            b_pred: vec![0.0; 1],
            w_erase: z(&self.w_erase),
            b_erase: vec![0.0; self.b_erase.len()],
            w_add: z(&self.w_add),
            b_add: vec![0.0; self.b_add.len()],
        }
    }
}

/// A student's value memory.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueMemoryState(pub Mat);

/// softmax(key_memory * k).
pub fn attention(k: &[f64], key_memory: &Mat) -> Vec<f64> {
    let logits = key_memory.matvec(k);
    softmax(&logits)
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Attention-weighted read of the memory rows.
fn read(memory: &Mat, w: &[f64]) -> Vec<f64> {
    let mut r = vec![0.0; memory.cols];
    for (i, &wi) in w.iter().enumerate() {
        axpy(wi, memory.row(i), &mut r);
    }
    r
}

/// Erase then add; slots with zero attention are copied unchanged.
fn write_memory(memory: &Mat, w: &[f64], erase: &[f64], add: &[f64]) -> Mat {
    let mut next = memory.clone();
    for (i, &wi) in w.iter().enumerate() {
        if wi == 0.0 {
            continue;
        }
        for (j, m) in next.row_mut(i).iter_mut().enumerate() {
            *m = *m * (1.0 - wi * erase[j]) + wi * add[j];
        }
    }
    next
}

struct StepTape {
    skill: usize,
    answer_index: usize,
    correct: bool,
    memory: Mat,
    w: Vec<f64>,
    input: Vec<f64>,
    summary: Vec<f64>,
    logit: f64,
    p: f64,
    erase: Vec<f64>,
    add: Vec<f64>,
}

fn steps_of(seq: &StudentSequence) -> Vec<(usize, bool)> {
    seq.steps.iter().map(|s| (s.skill, s.correct)).collect()
}

impl DkvmnModel {
    pub fn new<R: Rng>(num_skills: usize, cfg: &DkvmnConfig, rng: &mut R) -> Self {
        let (n, dk, dv, f) = (cfg.memory_slots, cfg.key_dim, cfg.value_dim, cfg.summary_dim);
        DkvmnModel {
            num_skills,
            key_memory: Mat::uniform(n, dk, dk, rng),
            value_init: Mat::uniform(n, dv, dv, rng),
            query_embed: Mat::uniform(num_skills, dk, dk, rng),
            answer_embed: Mat::uniform(2 * num_skills, dv, dv, rng),
            w_summary: Mat::uniform(f, dv + dk, dv + dk, rng),
            b_summary: vec![0.0; f],
            w_pred: Mat::uniform(1, f, f, rng).data,
            b_pred: vec![0.0],
            w_erase: Mat::uniform(dv, dv, dv, rng),
            b_erase: vec![0.0; dv],
            w_add: Mat::uniform(dv, dv, dv, rng),
            b_add: vec![0.0; dv],
        }
    }

    pub fn memory_slots(&self) -> usize {
        self.key_memory.rows
    }

    pub fn key_dim(&self) -> usize {
        self.key_memory.cols
    }

    pub fn value_dim(&self) -> usize {
        self.value_init.cols
    }

    pub fn initial_state(&self) -> ValueMemoryState {
        ValueMemoryState(self.value_init.clone())
    }

    pub fn query(&self, skill: usize) -> &[f64] {
        self.query_embed.row(skill)
    }

    pub fn answer_embedding(&self, skill: usize, correct: bool) -> &[f64] {
        self.answer_embed.row(skill + self.num_skills * correct as usize)
    }

    fn summarize(&self, r: &[f64], k: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
        let mut input = r.to_vec();
        input.extend_from_slice(k);
        let mut f = self.b_summary.clone();
        self.w_summary.matvec_acc(&input, &mut f);
        f.iter_mut().for_each(|v| *v = v.tanh());
        let z = dot(&self.w_pred, &f) + self.b_pred[0];
        (input, f, z)
    }

    /// P(correct) from the current memory, attention and key.
    pub fn read_predict(&self, state: &ValueMemoryState, w: &[f64], k: &[f64]) -> f64 {
        let r = read(&state.0, w);
        sigmoid(self.summarize(&r, k).2)
    }

    fn erase_add(&self, v: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let mut e = self.b_erase.clone();
        self.w_erase.matvec_acc(v, &mut e);
        e.iter_mut().for_each(|x| *x = sigmoid(*x));
        let mut a = self.b_add.clone();
        self.w_add.matvec_acc(v, &mut a);
        a.iter_mut().for_each(|x| *x = x.tanh());
        (e, a)
    }

    /// New memory after writing answer embedding `v` with attention `w`.
    pub fn write(&self, state: &ValueMemoryState, w: &[f64], v: &[f64]) -> ValueMemoryState {
        let (e, a) = self.erase_add(v);
        ValueMemoryState(write_memory(&state.0, w, &e, &a))
    }

    fn run(&self, steps: &[(usize, bool)]) -> Vec<StepTape> {
        let mut memory = self.value_init.clone();
        let mut tape = Vec::with_capacity(steps.len());
        for &(skill, correct) in steps {
            let k = self.query(skill);
            let w = attention(k, &self.key_memory);
            let r = read(&memory, &w);
            let (input, summary, z) = self.summarize(&r, k);
            let answer_index = skill + self.num_skills * correct as usize;
            let (erase, add) = self.erase_add(self.answer_embed.row(answer_index));
            let next = write_memory(&memory, &w, &erase, &add);
            tape.push(StepTape {
                skill,
                answer_index,
                correct,
                memory: std::mem::replace(&mut memory, next),
                w,
                input,
                summary,
                logit: z,
                p: sigmoid(z),
                erase,
                add,
            });
        }
        tape
    }

    /// Pre-observation predictions for every attempt, writing each observed
    /// answer into a private copy of the memory.
    pub fn predict_attempts(&self, seq: &StudentSequence) -> Vec<AttemptPrediction> {
        let tape = self.run(&steps_of(seq));
        seq.steps
            .iter()
            .zip(&tape)
            .map(|(step, t)| AttemptPrediction {
                student_id: seq.student_id.clone(),
                skill_id: step.skill_id.clone(),
                item_id: step.item_id.clone(),
                probability: Prediction::from_probability(t.p),
            })
            .collect()
    }

    fn sequence_loss(tape: &[StepTape]) -> f64 {
        tape.iter().map(|t| cross_entropy_logit(t.logit, t.correct)).sum()
    }

    /// Mean next-attempt cross-entropy over the corpus.
    pub fn loss(&self, sequences: &[StudentSequence]) -> f64 {
        let mut total = 0.0;
        let mut n = 0usize;
        for seq in sequences.iter().filter(|s| !s.is_empty()) {
            let steps = steps_of(seq);
            total += Self::sequence_loss(&self.run(&steps));
            n += steps.len();
        }
        total / n as f64
    }

    /// Accumulate the gradient of this sequence's summed cross-entropy
    /// divided by `norm`; returns the unnormalized loss sum.
    fn backward(&self, steps: &[(usize, bool)], norm: f64, grads: &mut DkvmnModel) -> f64 {
        let tape = self.run(steps);
        let loss = Self::sequence_loss(&tape);
        let (n, dk, dv) = (self.memory_slots(), self.key_dim(), self.value_dim());

        // gradient w.r.t. the memory produced by the current step's write
        let mut dmem = Mat::zeros(n, dv);
        for t in tape.iter().rev() {
            let mem = &t.memory;
            let mut dw = vec![0.0; n];
            let mut de = vec![0.0; dv];
            let mut dadd = vec![0.0; dv];
            let mut dmem_prev = Mat::zeros(n, dv);
            for i in 0..n {
                let wi = t.w[i];
                let g_row = dmem.row(i);
                let m_row = mem.row(i);
                let prev_row = dmem_prev.row_mut(i);
                for j in 0..dv {
                    let g = g_row[j];
                    prev_row[j] = g * (1.0 - wi * t.erase[j]);
                    dw[i] += g * (t.add[j] - m_row[j] * t.erase[j]);
                    de[j] -= g * m_row[j] * wi;
                    dadd[j] += g * wi;
                }
            }

            let f = &t.summary;
            let dz = (t.p - t.correct as u8 as f64) / norm;
            axpy(dz, f, &mut grads.w_pred);
            grads.b_pred[0] += dz;
            let dpre_f: Vec<f64> = f
                .iter()
                .zip(&self.w_pred)
                .map(|(fv, wv)| dz * wv * (1.0 - fv * fv))
                .collect();
            grads.w_summary.add_outer(&dpre_f, &t.input);
            axpy(1.0, &dpre_f, &mut grads.b_summary);
            let mut dinput = vec![0.0; dv + dk];
            self.w_summary.matvec_t_acc(&dpre_f, &mut dinput);
            let (dr, dk_vec) = dinput.split_at(dv);
            let mut dk_vec = dk_vec.to_vec();

            for i in 0..n {
                dw[i] += dot(dr, mem.row(i));
                axpy(t.w[i], dr, dmem_prev.row_mut(i));
            }

            let weighted: f64 = t.w.iter().zip(&dw).map(|(a, b)| a * b).sum();
            let dlogit: Vec<f64> = t.w.iter().zip(&dw).map(|(w, g)| w * (g - weighted)).collect();
            let k = self.query(t.skill);
            grads.key_memory.add_outer(&dlogit, k);
            self.key_memory.matvec_t_acc(&dlogit, &mut dk_vec);
            axpy(1.0, &dk_vec, grads.query_embed.row_mut(t.skill));

            let v = self.answer_embed.row(t.answer_index);
            let dpre_e: Vec<f64> = de.iter().zip(&t.erase).map(|(g, e)| g * e * (1.0 - e)).collect();
            let dpre_a: Vec<f64> = dadd.iter().zip(&t.add).map(|(g, a)| g * (1.0 - a * a)).collect();
            grads.w_erase.add_outer(&dpre_e, v);
            axpy(1.0, &dpre_e, &mut grads.b_erase);
            grads.w_add.add_outer(&dpre_a, v);
            axpy(1.0, &dpre_a, &mut grads.b_add);
            let dv_row = grads.answer_embed.row_mut(t.answer_index);
            self.w_erase.matvec_t_acc(&dpre_e, dv_row);
            self.w_add.matvec_t_acc(&dpre_a, dv_row);

            dmem = dmem_prev;
        }
        axpy(1.0, &dmem.data, &mut grads.value_init.data);
        loss
    }

    pub fn loss_and_gradient(&self, sequences: &[StudentSequence]) -> (f64, DkvmnModel) {
        let seqs: Vec<Vec<(usize, bool)>> = sequences.iter().filter(|s| !s.is_empty()).map(steps_of).collect();
        let norm = seqs.iter().map(Vec::len).sum::<usize>() as f64;
        let mut grads = self.zeros_like();
        let total: f64 = seqs.iter().map(|s| self.backward(s, norm, &mut grads)).sum();
        (total / norm, grads)
    }

    pub fn save<W: Write>(&self, cfg: &DkvmnConfig, sink: W) -> Result<(), DkvmnError> {
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            memory_slots: self.memory_slots(),
            key_dim: self.key_dim(),
            value_dim: self.value_dim(),
            config: cfg.clone(),
            model: self.clone(),
        };
        serde_json::to_writer(sink, &ckpt).map_err(|e| DkvmnError::Checkpoint(e.to_string()))
    }

    pub fn load<R: Read>(source: R) -> Result<(DkvmnModel, DkvmnConfig), DkvmnError> {
        let ckpt: Checkpoint = serde_json::from_reader(source).map_err(|e| DkvmnError::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(DkvmnError::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let m = &ckpt.model;
        let (n, dk, dv, s) = (ckpt.memory_slots, ckpt.key_dim, ckpt.value_dim, m.num_skills);
        let f = m.b_summary.len();
        let shapes_ok = (m.key_memory.rows, m.key_memory.cols) == (n, dk)
            && (m.value_init.rows, m.value_init.cols) == (n, dv)
            && (m.query_embed.rows, m.query_embed.cols) == (s, dk)
            && (m.answer_embed.rows, m.answer_embed.cols) == (2 * s, dv)
            && (m.w_summary.rows, m.w_summary.cols) == (f, dv + dk)
            && m.w_pred.len() == f
            && m.b_pred.len() == 1
            && (m.w_erase.rows, m.w_erase.cols) == (dv, dv)
            && (m.w_add.rows, m.w_add.cols) == (dv, dv)
            && m.b_erase.len() == dv
            && m.b_add.len() == dv
            && m.groups().iter().all(|(_, g)| !g.is_empty());
        if !shapes_ok {
            return Err(DkvmnError::Checkpoint("matrix shapes do not match dimensions".into()));
        }
        Ok((ckpt.model, ckpt.config))
    }
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    memory_slots: usize,
    key_dim: usize,
    value_dim: usize,
    config: DkvmnConfig,
    model: DkvmnModel,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub epoch_losses: Vec<f64>,
}

/// Per-sequence Adam updates, one shuffled order drawn from the seed,
/// gradients clipped to `max_grad_norm`.
pub fn train(
    sequences: &[StudentSequence],
    num_skills: usize,
    cfg: &DkvmnConfig,
) -> Result<(DkvmnModel, TrainingReport), DkvmnError> {
    cfg.validate()?;
    let seqs: Vec<Vec<(usize, bool)>> = sequences.iter().filter(|s| !s.is_empty()).map(steps_of).collect();
    if seqs.is_empty() {
        return Err(DkvmnError::EmptyCorpus);
    }
    if let Some(&(index, _)) = seqs.iter().flatten().find(|(k, _)| *k >= num_skills) {
        return Err(DkvmnError::IndexOutOfRange { index, num_skills });
    }

    let mut rng = seeded_rng(cfg.seed);
    let mut model = DkvmnModel::new(num_skills, cfg, &mut rng);
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    order.shuffle(&mut rng);

    let total_attempts = seqs.iter().map(Vec::len).sum::<usize>() as f64;
    let corpus_loss =
        |m: &DkvmnModel| seqs.iter().map(|s| DkvmnModel::sequence_loss(&m.run(s))).sum::<f64>() / total_attempts;
    let initial_loss = corpus_loss(&model);
    let mut adam = Adam::new(&model, cfg.learning_rate);
    let mut grads = model.zeros_like();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut sum = 0.0;
        for &i in &order {
            let steps = &seqs[i];
            for (_, g) in grads.groups_mut() {
                g.fill(0.0);
            }
            let loss = model.backward(steps, steps.len() as f64, &mut grads) / steps.len() as f64;
            if !loss.is_finite() || !grads.is_finite() {
                return Err(DkvmnError::NonFiniteLoss { epoch });
            }
            sum += loss;
            grads.clip_global_norm(cfg.max_grad_norm);
            adam.step(&mut model, &grads);
        }
        epoch_losses.push(sum / seqs.len() as f64);
    }
    let final_loss = corpus_loss(&model);
    if !final_loss.is_finite() {
        return Err(DkvmnError::NonFiniteLoss { epoch: cfg.epochs });
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
