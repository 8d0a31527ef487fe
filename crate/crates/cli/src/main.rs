//! `smpc run` simulates the shipped or a custom scenario and writes traces,
//! the tightening schedule and a metrics document; `smpc validate` checks a
//! scenario without simulating.
//!
//! Exit codes: 0 success, 1 runtime failure (including failed validation),
//! 2 configuration error. Errors are printed to stderr as one JSON object.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;
use smpc::gaussians::LevelRule;
use smpc::simulate::{run_scenario, validate, write_outputs, Scenario, ScenarioConfig};
use smpc::smpc::Variant;
use smpc::Error;

#[derive(Parser)]
#[command(
    name = "smpc",
    version,
    about = "Stochastic MPC with reachable-set constraint tightening"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run closed-loop Monte Carlo trials and write the results.
    Run(RunArgs),
    /// Check stability, terminal ingredients and tightening without simulating.
    Validate(ScenarioArgs),
}

#[derive(Args)]
struct ScenarioArgs {
    /// double_integrator | double_integrator_mismatch | building | custom
    #[arg(long, default_value = "double_integrator")]
    scenario: String,
    /// Custom scenario JSON (implies `--scenario custom`).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the probability-level rule: gaussian | chebyshev.
    #[arg(long = "level-rule")]
    level_rule: Option<String>,
    /// Override the prediction horizon N.
    #[arg(long)]
    horizon: Option<usize>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Comma-separated subset of nom, rec, df, recsc (default: the scenario's).
    #[arg(long)]
    variants: Option<String>,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long, default_value = "results")]
    out: PathBuf,
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.into(),
        message: message.into(),
    }
}

fn load_scenario(args: &ScenarioArgs) -> Result<Scenario, Error> {
    let mut scenario = match (&args.config, args.scenario.as_str()) {
        (Some(path), "custom" | "double_integrator") => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| config_err("config", format!("{}: {e}", path.display())))?;
            ScenarioConfig::from_json(&text)?.into_scenario()?
        }
        (Some(_), other) => {
            return Err(config_err(
                "scenario",
                format!("`{other}` cannot be combined with --config"),
            ));
        }
        (None, "custom") => {
            return Err(config_err(
                "config",
                "scenario `custom` needs --config <file>",
            ))
        }
        (None, name) => Scenario::by_name(name)?,
    };
    if let Some(rule) = &args.level_rule {
        scenario.levels.rule = rule.parse::<LevelRule>()?;
    }
    if let Some(n) = args.horizon {
        scenario.horizon = n;
    }
    scenario.validate_fields()?;
    Ok(scenario)
}

fn parse_variants(list: &str) -> Result<Vec<Variant>, Error> {
    let mut out = Vec::new();
    for item in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let v = item.parse::<Variant>()?;
        if !out.contains(&v) {
            out.push(v);
        }
    }
    if out.is_empty() {
        return Err(config_err("variants", "no variant given"));
    }
    Ok(out)
}

fn run(args: &RunArgs) -> Result<ExitCode, Error> {
    let mut scenario = load_scenario(&args.scenario)?;
    if let Some(list) = &args.variants {
        scenario.variants = parse_variants(list)?;
    }
    if args.trials == 0 {
        return Err(config_err("trials", "need at least one trial"));
    }
    let results = run_scenario(&scenario, args.trials, args.seed)?;
    let doc = write_outputs(&args.out, &scenario, args.seed, args.trials, &results)?;
    println!(
        "{}: {} trials, seed {}, output in {}",
        doc.scenario,
        doc.trials,
        doc.seed,
        args.out.display()
    );
    for m in &doc.variants {
        println!(
            "{:>6}  J(x0) {:>9.4}  J(x20) {:>9.4}  max violation {:>6.2}%  infeasible steps {}",
            m.variant.to_string(),
            m.j_cl_x0,
            m.j_cl_x20,
            100.0 * m.max_violation_rate,
            m.infeasible_steps
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn validate_cmd(args: &ScenarioArgs) -> Result<ExitCode, Error> {
    let scenario = load_scenario(args)?;
    let report = validate(&scenario);
    print!("{}", report.table());
    Ok(if report.passed() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

fn error_json(e: &Error) -> serde_json::Value {
    match e {
        Error::Config { field, message } => {
            json!({"error": {"kind": "config", "field": field, "message": message}})
        }
        Error::InvalidProbability(_) | Error::InvalidArgument(_) => {
            json!({"error": {"kind": "config", "message": e.to_string()}})
        }
        Error::Io(msg) => json!({"error": {"kind": "io", "message": msg}}),
        other => json!({"error": {"kind": "runtime", "message": other.to_string()}}),
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config { .. } | Error::InvalidProbability(_) | Error::InvalidArgument(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("")
                .trim_start_matches("error: ");
            eprintln!("{}", json!({"error": {"kind": "usage", "message": first}}));
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::Run(args) => run(args),
        Command::Validate(args) => validate_cmd(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("{}", error_json(&e));
            ExitCode::from(exit_code(&e))
        }
    }
}
