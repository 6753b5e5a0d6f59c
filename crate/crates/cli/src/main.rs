use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use ascend_core::config::{template_document, ConfigError, ExperimentConfig};
use ascend_core::persistence::{read_log, replay, Durability, FileLog};
use ascend_core::report::{daily_csv, generations_csv, Report, DEFAULT_TOP};
use ascend_core::simulator::{
    brute_force_optimum, case_study_config, GroundTruthModel, Simulation, SimulationScenario,
};
use ascend_core::space::DEFAULT_ENUMERATION_CAP;
use ascend_service::{ServiceConfig, DEFAULT_DATA_DIR, DEFAULT_PORT};

const DEFAULT_SEED: u64 = 42;

#[derive(Parser)]
#[command(
    name = "ascend",
    version,
    about = "Evolutionary conversion-rate optimisation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a commented template config.
    Init {
        #[arg(default_value = "ascend.json")]
        path: PathBuf,
    },
    /// Run a scenario against its planted model and write the artifacts.
    Simulate {
        #[command(flatten)]
        source: ConfigSource,
        /// Seeds evolution, routing and simulated users.
        #[arg(long, default_value_t = DEFAULT_SEED)]
        seed: u64,
        #[arg(long, default_value = "sim-out")]
        out: PathBuf,
        /// Replace artifacts already in the output directory.
        #[arg(long)]
        force: bool,
    },
    /// Print the best design of the scenario's model by exhaustive search.
    Oracle {
        #[command(flatten)]
        source: ConfigSource,
        /// Refuse spaces with more designs than this.
        #[arg(long, default_value_t = DEFAULT_ENUMERATION_CAP)]
        cap: u128,
    },
    /// Run the HTTP service. Flags override ASCEND_PORT / ASCEND_DATA_DIR.
    Serve {
        #[arg(long, env = "ASCEND_PORT", default_value_t = DEFAULT_PORT)]
        port: u16,
        #[arg(long, env = "ASCEND_DATA_DIR", default_value = DEFAULT_DATA_DIR)]
        data_dir: PathBuf,
    },
    /// Rebuild an experiment's report from its event log.
    Report {
        experiment_id: String,
        #[arg(long, env = "ASCEND_DATA_DIR", default_value = DEFAULT_DATA_DIR)]
        data_dir: PathBuf,
        #[arg(long, default_value_t = DEFAULT_TOP)]
        top: usize,
        /// Print the ranked table as CSV instead of JSON.
        #[arg(long)]
        csv: bool,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct ConfigSource {
    /// Config file (see `ascend init`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in fixture instead of a file.
    #[arg(long, value_parser = ["case_study"])]
    preset: Option<String>,
}

impl ConfigSource {
    fn load(&self) -> Result<ExperimentConfig, CliError> {
        match (&self.config, &self.preset) {
            (Some(path), _) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))?;
                ExperimentConfig::from_json(&text).map_err(|e| match e {
                    ConfigError::Parse(e) => {
                        CliError::Validation(format!("{}: {e}", path.display()))
                    }
                    ConfigError::Invalid(fields) => CliError::Validation(
                        fields
                            .iter()
                            .map(|f| format!("{}: {f}", path.display()))
                            .collect::<Vec<_>>()
                            .join("\n"),
                    ),
                })
            }
            _ => Ok(case_study_config()),
        }
    }
}

enum CliError {
    Validation(String),
    Runtime(String),
}

impl CliError {
    fn runtime(e: impl std::fmt::Display) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Init { path } => init(&path),
        Command::Simulate {
            source,
            seed,
            out,
            force,
        } => simulate(&source, seed, &out, force),
        Command::Oracle { source, cap } => oracle(&source, cap),
        Command::Serve { port, data_dir } => serve(ServiceConfig { port, data_dir }),
        Command::Report {
            experiment_id,
            data_dir,
            top,
            csv,
        } => report(&data_dir, &experiment_id, top, csv),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Validation(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn init(path: &Path) -> Result<(), CliError> {
    if path.exists() {
        return Err(CliError::Validation(format!(
            "{} already exists; refusing to overwrite",
            path.display()
        )));
    }
    fs::write(path, template_document()).map_err(CliError::runtime)?;
    println!("wrote {}", path.display());
    Ok(())
}

const ARTIFACTS: [&str; 4] = [
    "events.jsonl",
    "generations.csv",
    "daily.csv",
    "report.json",
];

fn simulate(source: &ConfigSource, seed: u64, out: &Path, force: bool) -> Result<(), CliError> {
    let config = source.load()?;
    let scenario = SimulationScenario::from_config(&config)
        .map_err(|e| CliError::Validation(e.to_string()))?
        .with_seed(seed);
    fs::create_dir_all(out).map_err(CliError::runtime)?;
    for name in ARTIFACTS {
        let path = out.join(name);
        if path.exists() {
            if !force {
                return Err(CliError::Validation(format!(
                    "{} exists; pass --force to replace it",
                    path.display()
                )));
            }
            fs::remove_file(&path).map_err(CliError::runtime)?;
        }
    }
    let log = FileLog::create(&out.join("events.jsonl"), Durability::Buffered)
        .map_err(CliError::runtime)?;
    let mut sim = Simulation::start(&scenario, log).map_err(CliError::runtime)?;
    sim.run().map_err(CliError::runtime)?;
    let (trace, log) = sim.finish();
    log.finish().map_err(CliError::runtime)?;

    let report = Report::build(&trace.state, DEFAULT_TOP);
    fs::write(out.join("report.json"), report.to_json_pretty()).map_err(CliError::runtime)?;
    fs::write(out.join("generations.csv"), generations_csv(&trace.reports))
        .map_err(CliError::runtime)?;
    fs::write(out.join("daily.csv"), daily_csv(&trace.daily)).map_err(CliError::runtime)?;

    let stop = trace.state.stop_reason.map_or("none", |r| r.as_str());
    println!(
        "{} users, {} candidates, {} generations, stopped: {stop}{}",
        trace.interactions,
        trace.state.candidates.len() - 1,
        trace.reports.len(),
        if trace.truncated {
            " (budget ran out mid-generation)"
        } else {
            ""
        }
    );
    if let Some(best) = report.top.first() {
        let lift = best
            .improvement_pct
            .map_or(String::from("n/a"), |x| format!("{x:+.1}%"));
        let truth = scenario
            .model
            .true_rate(&trace.state.candidates[best.candidate_id as usize].genome);
        println!(
            "best: #{} {} rate {:.4} [{:.4}, {:.4}] vs control {lift} (true rate {truth:.4})",
            best.candidate_id, best.genome, best.rate, best.ci_low, best.ci_high
        );
    }
    println!("artifacts in {}", out.display());
    Ok(())
}

fn oracle(source: &ConfigSource, cap: u128) -> Result<(), CliError> {
    let config = source.load()?;
    let space = config
        .space()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let model_config = config
        .scenario
        .as_ref()
        .ok_or_else(|| CliError::Validation("config has no scenario.model to search".into()))?;
    let model = GroundTruthModel::from_config(&space, &model_config.model)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let (genome, rate) = brute_force_optimum(&model, &space, cap)
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let control = model.true_rate(&space.control());
    println!("designs searched: {}", space.size());
    println!("optimum: {genome} {}", space.genome_label(&genome));
    for (element, value) in space.describe(&genome) {
        println!("  {element} = {value}");
    }
    println!(
        "true rate: {rate:.6} (control {control:.6}, {:+.2}%)",
        (rate / control - 1.0) * 100.0
    );
    Ok(())
}

fn serve(config: ServiceConfig) -> Result<(), CliError> {
    let runtime = tokio::runtime::Runtime::new().map_err(CliError::runtime)?;
    runtime
        .block_on(ascend_service::serve(config))
        .map_err(CliError::runtime)
}

fn report(data_dir: &Path, id: &str, top: usize, csv: bool) -> Result<(), CliError> {
    let path = data_dir.join(id).join("events.jsonl");
    if !path.exists() {
        return Err(CliError::Runtime(format!(
            "no event log at {}; check --data-dir and the experiment id",
            path.display()
        )));
    }
    let contents = read_log(&path).map_err(CliError::runtime)?;
    if contents.records.is_empty() {
        return Err(CliError::Runtime(format!(
            "{} holds no records; the experiment was never created",
            path.display()
        )));
    }
    if let Some((line, reason)) = &contents.corrupt_at {
        eprintln!(
            "warning: ignoring {} from line {line}: {reason}",
            path.display()
        );
    }
    let state = replay(&contents.records, None).map_err(CliError::runtime)?;
    let report = Report::build(&state, top);
    if csv {
        print!("{}", report.to_csv());
    } else {
        print!("{}", report.to_json_pretty());
    }
    Ok(())
}
