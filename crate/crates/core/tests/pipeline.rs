use std::fs::{self, File};
use std::path::Path;

use ktrace::bkt::BktParams;
use ktrace::dataset::{self, SkillCatalog};
use ktrace::dkt::DktModel;
use ktrace::dkvmn::DkvmnModel;
use ktrace::estimator::{self, EstimatorKind};
use ktrace::pipeline::{self, RunConfig};
use ktrace::report::RunReport;
use ktrace::simulator::{self, CohortSpec, SkillSpec};

fn small_cohort(dir: &Path) {
    let skill = |name: &str, init| SkillSpec {
        skill_id: name.into(),
        opportunities: 6,
        params: BktParams::new(init, 0.2, 0.2, 0.1),
    };
    let spec = CohortSpec {
        num_students: 40,
        skills: vec![skill("frac", 0.3), skill("dec", 0.5)],
        ability_sd: 0.8,
        posttest_items_per_skill: 8,
        posttest_guess: 0.2,
        posttest_slip: 0.1,
        seed: 11,
    };
    let cohort = simulator::generate_cohort(&spec).unwrap();
    dataset::write_interactions(
        File::create(dir.join("interactions.csv")).unwrap(),
        &cohort.interactions,
    )
    .unwrap();
    dataset::write_posttest(File::create(dir.join("posttest.csv")).unwrap(), &cohort.posttest).unwrap();
}

fn fast_config(dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_json(
        r#"{"seed": 3, "dkt": {"hidden_size": 6, "epochs": 3}, "dkvmn": {"memory_slots": 3, "key_dim": 4, "value_dim": 4, "summary_dim": 4, "epochs": 3}}"#,
    )
    .unwrap();
    cfg.interactions = dir.join("interactions.csv");
    cfg.posttest = dir.join("posttest.csv");
    cfg.output = dir.join("out");
    cfg
}

#[test]
fn run_writes_every_output_and_checkpoints_reproduce_estimates() {
    let dir = tempfile::tempdir().unwrap();
    small_cohort(dir.path());
    let cfg = fast_config(dir.path());
    let report = pipeline::run(&cfg).unwrap();

    let mut names: Vec<String> = fs::read_dir(&cfg.output)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    assert_eq!(
        names,
        [
            "bkt_params.csv",
            "comparisons.csv",
            "correlations.csv",
            "dkt_checkpoint.json",
            "dkvmn_checkpoint.json",
            "knowledge_estimates.csv",
            "pfa_params.csv",
            "report.json"
        ]
    );
    assert_eq!(report.results.correlations.len(), 12);
    assert_eq!(report.results.comparisons.len(), 30);
    assert_eq!(report.metadata.students, 40);
    assert_eq!(report.metadata.seed, Some(3));

    let on_disk = RunReport::from_json(&fs::read_to_string(cfg.output.join(pipeline::REPORT_FILE)).unwrap()).unwrap();
    assert_eq!(on_disk, report);

    // Reloaded checkpoints give back the mean estimates that were written.
    let firsts = dataset::first_attempts(&dataset::parse_interactions(File::open(&cfg.interactions).unwrap()).unwrap());
    let catalog = SkillCatalog::from_records(&firsts);
    let seqs = dataset::build_sequences(&firsts, &catalog).unwrap();
    let (dkt, dkt_cfg) = DktModel::load(File::open(cfg.output.join(pipeline::DKT_CHECKPOINT_FILE)).unwrap()).unwrap();
    assert_eq!(dkt_cfg.seed, 3);
    let (dkvmn, _) = DkvmnModel::load(File::open(cfg.output.join(pipeline::DKVMN_CHECKPOINT_FILE)).unwrap()).unwrap();
    let dkt_table = estimator::mean_aggregate(
        EstimatorKind::MeanDkt,
        &seqs.iter().flat_map(|s| dkt.predict_attempts(s)).collect::<Vec<_>>(),
    );
    let dkvmn_table = estimator::mean_aggregate(
        EstimatorKind::MeanDkvmn,
        &seqs.iter().flat_map(|s| dkvmn.predict_attempts(s)).collect::<Vec<_>>(),
    );
    let mut written = csv::Reader::from_path(cfg.output.join(pipeline::ESTIMATES_FILE)).unwrap();
    let mut checked = 0;
    for row in written.records() {
        let row = row.unwrap();
        let table = match &row[0] {
            "mean-DKT" => &dkt_table,
            "mean-DKVMN" => &dkvmn_table,
            _ => continue,
        };
        let value: f64 = row[3].parse().unwrap();
        assert_eq!(table.get(&row[1], &row[2]), Some(value));
        checked += 1;
    }
    assert_eq!(checked, 2 * 40 * 2);
}

#[test]
fn reruns_are_identical_apart_from_the_timestamp() {
    let dir = tempfile::tempdir().unwrap();
    small_cohort(dir.path());
    let mut cfg = fast_config(dir.path());
    cfg.estimators = vec![EstimatorKind::Bkt, EstimatorKind::MeanDkt, EstimatorKind::Pfa];
    let a = pipeline::run(&cfg).unwrap();
    let first = fs::read(cfg.output.join(pipeline::ESTIMATES_FILE)).unwrap();
    let b = pipeline::run(&cfg).unwrap();
    assert_eq!(first, fs::read(cfg.output.join(pipeline::ESTIMATES_FILE)).unwrap());
    let mut b_meta = b.metadata.clone();
    b_meta.timestamp = a.metadata.timestamp.clone();
    assert_eq!(a.metadata, b_meta);
    assert_eq!(a.results, b.results);
}

#[test]
fn failed_write_removes_partial_outputs() {
    let dir = tempfile::tempdir().unwrap();
    small_cohort(dir.path());
    let mut cfg = fast_config(dir.path());
    cfg.estimators = vec![EstimatorKind::Bkt, EstimatorKind::MeanBkt];
    // the report is written last; a directory in its place makes that fail
    fs::create_dir_all(cfg.output.join(pipeline::REPORT_FILE)).unwrap();
    let err = pipeline::run(&cfg).unwrap_err();
    assert_eq!(err.module, "report");
    let left: Vec<_> = fs::read_dir(&cfg.output)
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    assert_eq!(left, [pipeline::REPORT_FILE]);
}

#[test]
fn missing_input_names_the_module_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fast_config(dir.path());
    let err = pipeline::run(&cfg).unwrap_err();
    assert_eq!(err.module, "dataset");
    assert!(err.to_string().starts_with("dataset: read "), "{err}");
    assert!(!cfg.output.exists());
}
