use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use ktrace::dataset::{write_interactions, write_posttest};
use ktrace::pipeline::{self, RunConfig};
use ktrace::report::RunReport;
use ktrace::simulator::{self, CohortSpec};

/// Knowledge-tracing workbench: simulate cohorts, fit BKT, PFA, DKT and
/// DKVMN, and evaluate per-skill knowledge estimates against a posttest.
#[derive(Parser, Debug)]
#[command(name = "ktrace", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate interactions.csv, posttest.csv and ground_truth.csv.
    Simulate {
        /// Built-in cohort: default or mastery-saturation.
        #[arg(long, default_value = "default", conflicts_with = "config")]
        scenario: String,
        /// JSON cohort spec to use instead of a built-in scenario.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit every selected model, build knowledge estimates and compare them.
    Run {
        /// JSON run config; every field is optional.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides the config's global seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Render the tables of a report.json (or a run output directory).
    Report {
        report: PathBuf,
        /// Show t with the orientation of the published comparison table.
        #[arg(long)]
        table2_signs: bool,
    },
}

fn simulate(scenario: &str, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut spec: CohortSpec = match config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("simulator: read {}", path.display()))?;
            serde_json::from_str(&text).with_context(|| format!("simulator: parse {}", path.display()))?
        }
        None => match simulator::scenario(scenario, seed.unwrap_or(0)) {
            Some(spec) => spec,
            None => bail!(
                "simulator: unknown scenario `{scenario}` (expected one of {})",
                simulator::SCENARIOS.join(", ")
            ),
        },
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let cohort = simulator::generate_cohort(&spec).context("simulator: generate")?;

    fs::create_dir_all(out).with_context(|| format!("simulator: create {}", out.display()))?;
    let create = |name: &str| -> Result<BufWriter<File>> {
        let path = out.join(name);
        let file = File::create(&path).with_context(|| format!("simulator: write {}", path.display()))?;
        Ok(BufWriter::new(file))
    };
    write_interactions(create("interactions.csv")?, &cohort.interactions)
        .with_context(|| format!("simulator: write {}", out.join("interactions.csv").display()))?;
    write_posttest(create("posttest.csv")?, &cohort.posttest)
        .with_context(|| format!("simulator: write {}", out.join("posttest.csv").display()))?;
    cohort
        .truth
        .write_csv(create("ground_truth.csv")?)
        .with_context(|| format!("simulator: write {}", out.join("ground_truth.csv").display()))?;
    println!(
        "simulated {} students, {} interactions, {} skills -> {}",
        spec.num_students,
        cohort.interactions.len(),
        spec.skills.len(),
        out.display()
    );
    Ok(())
}

fn run(config: Option<&Path>, seed: Option<u64>, out: Option<PathBuf>) -> Result<()> {
    let mut cfg = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if seed.is_some() {
        cfg.seed = seed;
    }
    if let Some(out) = out {
        cfg.output = out;
    }
    let report = pipeline::run(&cfg)?;
    let m = &report.metadata;
    println!(
        "{} students, {} first attempts, {} skills; {} correlations, {} comparisons -> {}",
        m.students,
        m.first_attempts,
        m.skills.len(),
        report.results.correlations.len(),
        report.results.comparisons.len(),
        cfg.output.display()
    );
    for (model, n) in &m.invalid_predictions {
        if *n > 0 {
            println!("{model}: {n} invalid predictions omitted");
        }
    }
    Ok(())
}

fn report(path: &Path, table2_signs: bool) -> Result<()> {
    let file = if path.is_dir() {
        path.join(pipeline::REPORT_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read_to_string(&file).with_context(|| format!("report: read {}", file.display()))?;
    let report = RunReport::from_json(&text).with_context(|| format!("report: {}", file.display()))?;
    print!("{}", report.render(table2_signs || report.metadata.table2_signs));
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Simulate {
            scenario,
            config,
            seed,
            out,
        } => simulate(&scenario, config.as_deref(), seed, &out),
        Command::Run { config, seed, out } => run(config.as_deref(), seed, out),
        Command::Report {
            report: path,
            table2_signs,
        } => report(&path, table2_signs),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
