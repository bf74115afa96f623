//! The end-to-end protocol: load first attempts, fit every model needed by
//! the selected estimators on all of the data, score that same data, and
//! evaluate the estimates against the posttest.

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bkt::{self, BktBounds, BktModel};
use crate::dataset::{self, PosttestScores, SkillCatalog, StudentSequence};
use crate::dkt::{self, DktConfig, DktModel};
use crate::dkvmn::{self, DkvmnConfig, DkvmnModel};
use crate::estimator::{self, count_invalid, EstimatorKind, KnowledgeTable};
use crate::pfa::{self, PfaOptions, PfaParams};
use crate::report::{RunMetadata, RunReport, TrainingSummary};
use crate::stats::{self, CompareOptions, FdrFamily, FdrProcedure};

pub const CORRELATIONS_FILE: &str = "correlations.csv";
pub const COMPARISONS_FILE: &str = "comparisons.csv";
pub const REPORT_FILE: &str = "report.json";
pub const ESTIMATES_FILE: &str = "knowledge_estimates.csv";
pub const BKT_PARAMS_FILE: &str = "bkt_params.csv";
pub const PFA_PARAMS_FILE: &str = "pfa_params.csv";
pub const DKT_CHECKPOINT_FILE: &str = "dkt_checkpoint.json";
pub const DKVMN_CHECKPOINT_FILE: &str = "dkvmn_checkpoint.json";

/// A failure in one stage of the pipeline.
#[derive(Debug, Error)]
#[error("{module}: {stage}: {message}")]
pub struct PipelineError {
    pub module: &'static str,
    pub stage: String,
    pub message: String,
}

impl PipelineError {
    fn new(module: &'static str, stage: impl Into<String>, message: impl ToString) -> Self {
        PipelineError {
            module,
            stage: stage.into(),
            message: message.to_string(),
        }
    }
}

fn at<E: ToString>(module: &'static str, stage: impl Into<String>) -> impl FnOnce(E) -> PipelineError {
    let stage = stage.into();
    move |e| PipelineError::new(module, stage, e)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StatsConfig {
    pub q: f64,
    pub procedure: FdrProcedure,
    pub family: FdrFamily,
    /// Display t with the opposite orientation (b stronger is positive).
    pub table2_signs: bool,
}

impl Default for StatsConfig {
    fn default() -> Self {
        let d = CompareOptions::default();
        StatsConfig {
            q: d.q,
            procedure: d.procedure,
            family: d.family,
            table2_signs: false,
        }
    }
}

impl StatsConfig {
    pub fn compare_options(&self) -> CompareOptions {
        CompareOptions {
            q: self.q,
            procedure: self.procedure,
            family: self.family,
        }
    }
}

/// Hyperparameters of every model.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModelConfig {
    pub bkt: BktBounds,
    pub pfa: PfaOptions,
    pub dkt: DktConfig,
    pub dkvmn: DkvmnConfig,
}

/// Everything `run` needs. Relative paths in a config file are resolved
/// against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub interactions: PathBuf,
    pub posttest: PathBuf,
    pub output: PathBuf,
    /// When set, replaces the seeds of the DKT and DKVMN blocks.
    pub seed: Option<u64>,
    pub estimators: Vec<EstimatorKind>,
    pub bkt: BktBounds,
    pub pfa: PfaOptions,
    pub dkt: DktConfig,
    pub dkvmn: DkvmnConfig,
    pub stats: StatsConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            interactions: PathBuf::from("interactions.csv"),
            posttest: PathBuf::from("posttest.csv"),
            output: PathBuf::from("results"),
            seed: None,
            estimators: EstimatorKind::ALL.to_vec(),
            bkt: BktBounds::default(),
            pfa: PfaOptions::default(),
            dkt: DktConfig::default(),
            dkvmn: DkvmnConfig::default(),
            stats: StatsConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self, PipelineError> {
        serde_json::from_str(text).map_err(at("config", "parse"))
    }

    /// Read a config file and resolve its relative paths.
    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = fs::read_to_string(path).map_err(at("config", format!("read {}", path.display())))?;
        let mut cfg = Self::from_json(&text).map_err(|e| PipelineError {
            stage: format!("parse {}", path.display()),
            ..e
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.interactions, &mut cfg.posttest, &mut cfg.output] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Model hyperparameters with the global seed applied.
    pub fn effective_models(&self) -> ModelConfig {
        let mut m = ModelConfig {
            bkt: self.bkt,
            pfa: self.pfa.clone(),
            dkt: self.dkt.clone(),
            dkvmn: self.dkvmn.clone(),
        };
        if let Some(seed) = self.seed {
            m.dkt.seed = seed;
            m.dkvmn.seed = seed;
        }
        m
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        let fail = |m: String| Err(PipelineError::new("config", "validate", m));
        if self.estimators.is_empty() {
            return fail("no estimators selected".into());
        }
        for (i, e) in self.estimators.iter().enumerate() {
            if self.estimators[..i].contains(e) {
                return fail(format!("estimator {e} selected twice"));
            }
        }
        if self.interactions == self.posttest {
            return fail(format!(
                "interactions and posttest are both {}",
                self.interactions.display()
            ));
        }
        for input in [&self.interactions, &self.posttest] {
            if *input == self.output {
                return fail(format!("output directory {} is also an input", input.display()));
            }
            for name in output_files() {
                if *input == self.output.join(name) {
                    return fail(format!("input {} would be overwritten by the outputs", input.display()));
                }
            }
        }
        let m = self.effective_models();
        m.bkt.validate().map_err(at("config", "validate bkt"))?;
        m.pfa.validate().map_err(at("config", "validate pfa"))?;
        m.dkt.validate().map_err(at("config", "validate dkt"))?;
        m.dkvmn.validate().map_err(at("config", "validate dkvmn"))?;
        let q = self.stats.q;
        if !(q > 0.0 && q < 1.0) {
            return fail(format!("stats.q = {q} is not in (0, 1)"));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON of this config.
    pub fn sha256(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

fn output_files() -> [&'static str; 8] {
    [
        CORRELATIONS_FILE,
        COMPARISONS_FILE,
        REPORT_FILE,
        ESTIMATES_FILE,
        BKT_PARAMS_FILE,
        PFA_PARAMS_FILE,
        DKT_CHECKPOINT_FILE,
        DKVMN_CHECKPOINT_FILE,
    ]
}

/// Fitted models, present only when a selected estimator needs them.
#[derive(Debug, Clone, Default)]
pub struct FittedModels {
    pub bkt: Option<BktModel>,
    pub pfa: Option<PfaParams>,
    pub dkt: Option<(DktModel, dkt::TrainingReport)>,
    pub dkvmn: Option<(DkvmnModel, dkvmn::TrainingReport)>,
}

#[derive(Debug, Clone)]
pub struct Estimates {
    /// One table per selected estimator, in selection order.
    pub tables: Vec<KnowledgeTable>,
    /// Invalid per-attempt predictions per model.
    pub invalid_predictions: BTreeMap<String, usize>,
    pub models: FittedModels,
}

/// Fit the models the selection needs and build its knowledge tables,
/// scoring the same sequences the models were fit on.
pub fn estimate(
    sequences: &[StudentSequence],
    catalog: &SkillCatalog,
    models: &ModelConfig,
    selection: &[EstimatorKind],
) -> Result<Estimates, PipelineError> {
    use EstimatorKind::*;
    let wants = |kinds: &[EstimatorKind]| kinds.iter().any(|k| selection.contains(k));
    let num_skills = catalog.len();

    let (bkt_fit, pfa_fit, dkt_fit, dkvmn_fit) = std::thread::scope(|scope| {
        let bkt = wants(&[Bkt, MeanBkt]).then(|| scope.spawn(|| bkt::fit_all(sequences, catalog, &models.bkt)));
        let pfa = wants(&[Pfa, MeanPfa]).then(|| scope.spawn(|| pfa::fit(sequences, catalog, &models.pfa)));
        let dkt = wants(&[MeanDkt]).then(|| scope.spawn(|| dkt::train(sequences, num_skills, &models.dkt)));
        let dkvmn = wants(&[MeanDkvmn]).then(|| scope.spawn(|| dkvmn::train(sequences, num_skills, &models.dkvmn)));
        (
            bkt.map(|h| h.join().expect("bkt fit panicked")),
            pfa.map(|h| h.join().expect("pfa fit panicked")),
            dkt.map(|h| h.join().expect("dkt training panicked")),
            dkvmn.map(|h| h.join().expect("dkvmn training panicked")),
        )
    });
    let fitted = FittedModels {
        bkt: bkt_fit.transpose().map_err(at("bkt", "fit"))?,
        pfa: pfa_fit.transpose().map_err(at("pfa", "fit"))?,
        dkt: dkt_fit.transpose().map_err(at("dkt", "train"))?,
        dkvmn: dkvmn_fit.transpose().map_err(at("dkvmn", "train"))?,
    };

    let mut invalid = BTreeMap::new();
    let mut built: BTreeMap<EstimatorKind, KnowledgeTable> = BTreeMap::new();
    if let Some(model) = &fitted.bkt {
        let traces = estimator::bkt_traces(sequences, model).map_err(at("bkt", "trace"))?;
        invalid.insert("BKT".to_string(), 0);
        built.insert(Bkt, estimator::final_estimate_bkt(&traces));
        built.insert(MeanBkt, estimator::mean_estimate_bkt(&traces));
    }
    if let Some(params) = &fitted.pfa {
        invalid.insert("PFA".to_string(), 0);
        built.insert(Pfa, estimator::final_estimate_pfa(sequences, params));
        built.insert(MeanPfa, estimator::mean_estimate_pfa(sequences, params));
    }
    if let Some((model, _)) = &fitted.dkt {
        let preds: Vec<_> = sequences.iter().flat_map(|s| model.predict_attempts(s)).collect();
        invalid.insert("DKT".to_string(), count_invalid(&preds));
        built.insert(MeanDkt, estimator::mean_aggregate(MeanDkt, &preds));
    }
    if let Some((model, _)) = &fitted.dkvmn {
        let preds: Vec<_> = sequences.iter().flat_map(|s| model.predict_attempts(s)).collect();
        invalid.insert("DKVMN".to_string(), count_invalid(&preds));
        built.insert(MeanDkvmn, estimator::mean_aggregate(MeanDkvmn, &preds));
    }
    Ok(Estimates {
        tables: selection
            .iter()
            .map(|k| built.remove(k).expect("every selected table is built"))
            .collect(),
        invalid_predictions: invalid,
        models: fitted,
    })
}

/// Files written so far; removed again unless the run commits.
struct OutputGuard {
    dir: PathBuf,
    created_dir: bool,
    files: Vec<PathBuf>,
    committed: bool,
}

impl OutputGuard {
    fn open(dir: &Path) -> Result<Self, PipelineError> {
        let created_dir = !dir.exists();
        fs::create_dir_all(dir).map_err(at("output", format!("create {}", dir.display())))?;
        Ok(OutputGuard {
            dir: dir.to_path_buf(),
            created_dir,
            files: Vec::new(),
            committed: false,
        })
    }

    fn write<E, F>(&mut self, module: &'static str, name: &str, body: F) -> Result<(), PipelineError>
    where
        E: ToString,
        F: FnOnce(&mut BufWriter<File>) -> Result<(), E>,
    {
        let path = self.dir.join(name);
        let stage = format!("write {}", path.display());
        let file = File::create(&path).map_err(at(module, stage.clone()))?;
        self.files.push(path);
        let mut w = BufWriter::new(file);
        body(&mut w).map_err(at(module, stage.clone()))?;
        w.flush().map_err(at(module, stage))?;
        Ok(())
    }
}

impl Drop for OutputGuard {
    fn drop(&mut self) {
        if self.committed {
            return;
        }
        for f in &self.files {
            let _ = fs::remove_file(f);
        }
        if self.created_dir {
            let _ = fs::remove_dir(&self.dir);
        }
    }
}

pub fn load_inputs(cfg: &RunConfig) -> Result<(usize, Vec<dataset::InteractionRecord>, PosttestScores), PipelineError> {
    let stage = format!("read {}", cfg.interactions.display());
    let file = File::open(&cfg.interactions).map_err(at("dataset", stage.clone()))?;
    let records = dataset::parse_interactions(std::io::BufReader::new(file)).map_err(at("dataset", stage))?;
    let total = records.len();
    let firsts = dataset::first_attempts(&records);

    let stage = format!("read {}", cfg.posttest.display());
    let file = File::open(&cfg.posttest).map_err(at("dataset", stage.clone()))?;
    let posttest = dataset::parse_posttest(std::io::BufReader::new(file)).map_err(at("dataset", stage))?;
    Ok((total, firsts, posttest))
}

fn timestamp() -> String {
    humantime::format_rfc3339_seconds(SystemTime::now()).to_string()
}

/// Run the whole protocol and write every output under `cfg.output`.
pub fn run(cfg: &RunConfig) -> Result<RunReport, PipelineError> {
    cfg.validate()?;
    let (total, firsts, posttest) = load_inputs(cfg)?;
    if firsts.is_empty() {
        return Err(PipelineError::new(
            "dataset",
            format!("read {}", cfg.interactions.display()),
            "no first-attempt interactions",
        ));
    }
    let catalog = SkillCatalog::from_records(&firsts);
    let sequences = dataset::build_sequences(&firsts, &catalog).map_err(at("dataset", "build sequences"))?;

    let models = cfg.effective_models();
    let est = estimate(&sequences, &catalog, &models, &cfg.estimators)?;
    let results =
        stats::compare_all(&est.tables, &posttest, &cfg.stats.compare_options()).map_err(at("stats", "compare"))?;

    let mut training = BTreeMap::new();
    if let Some((_, r)) = &est.models.dkt {
        training.insert("DKT".to_string(), TrainingSummary::new(r.initial_loss, r.final_loss));
    }
    if let Some((_, r)) = &est.models.dkvmn {
        training.insert("DKVMN".to_string(), TrainingSummary::new(r.initial_loss, r.final_loss));
    }
    let report = RunReport {
        metadata: RunMetadata {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            seed: cfg.seed,
            config_sha256: cfg.sha256(),
            timestamp: timestamp(),
            interactions: total,
            first_attempts: firsts.len(),
            students: sequences.len(),
            skills: catalog.skills().to_vec(),
            invalid_predictions: est.invalid_predictions.clone(),
            training,
            table2_signs: cfg.stats.table2_signs,
        },
        results,
    };

    let mut out = OutputGuard::open(&cfg.output)?;
    if let Some(m) = &est.models.bkt {
        out.write("bkt", BKT_PARAMS_FILE, |w| m.write_csv(w))?;
    }
    if let Some(p) = &est.models.pfa {
        out.write("pfa", PFA_PARAMS_FILE, |w| p.write_csv(w))?;
    }
    if let Some((m, _)) = &est.models.dkt {
        out.write("dkt", DKT_CHECKPOINT_FILE, |w| m.save(&models.dkt, w))?;
    }
    if let Some((m, _)) = &est.models.dkvmn {
        out.write("dkvmn", DKVMN_CHECKPOINT_FILE, |w| m.save(&models.dkvmn, w))?;
    }
    out.write("estimator", ESTIMATES_FILE, |w| {
        estimator::write_tables_csv(w, &est.tables)
    })?;
    out.write("stats", CORRELATIONS_FILE, |w| report.results.write_correlations_csv(w))?;
    out.write("stats", COMPARISONS_FILE, |w| report.results.write_comparisons_csv(w))?;
    out.write("report", REPORT_FILE, |w| report.write_json(w))?;
    out.committed = true;
    Ok(report)
}
