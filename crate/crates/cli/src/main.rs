use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use pacter_core::adversary::{self, ScenarioFile};
use pacter_core::analysis;
use pacter_core::harness::{self, Report};
use pacter_core::instrument::{self, coverage_scan, BuildOptions, MachineProgram};
use pacter_core::ir::parse_module;
use pacter_core::machine::{self, MachineConfig, MachineError, DEFAULT_FUEL};
use serde_json::json;

#[derive(Parser)]
#[command(name = "pacter", version, about = "Function pointer and return address signing on a PA machine model")]
struct Cli {
    /// Emit JSON instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Key seed.
    #[arg(long, global = true, env = "PACTER_SEED", default_value_t = harness::DEFAULT_SEED)]
    seed: u64,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Analyze, instrument and lower an IR module to an object file.
    Build {
        input: PathBuf,
        #[arg(short, long)]
        output: PathBuf,
        #[arg(long)]
        legacy_ret: bool,
        #[arg(long)]
        no_pa: bool,
    },
    /// Boot and run an object file.
    Run {
        obj: PathBuf,
        #[arg(long, default_value_t = DEFAULT_FUEL)]
        fuel: u64,
        #[arg(long)]
        pa_off: bool,
        /// Write line-delimited JSON trace events here.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Run an attack scenario file and print the verdict.
    Attack { scenario: PathBuf },
    /// Identify function pointers in an IR module.
    Analyze {
        input: PathBuf,
        #[arg(long)]
        dump_fpset: bool,
    },
    /// Run the corpus and the attack catalog.
    Suite {
        corpus: PathBuf,
        /// Save the JSON report here.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Render a saved suite report.
    Report { report: PathBuf },
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

fn print_json(v: &impl serde::Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn build(cli: &Cli, input: &Path, output: &Path, legacy_ret: bool, no_pa: bool) -> Result<ExitCode> {
    let m = parse_module(&read(input)?)?;
    let opts = BuildOptions { pa: !no_pa, legacy_ret, ..BuildOptions::default() };
    let p = instrument::build(&m, opts)?;
    fs::write(output, p.to_text()).with_context(|| format!("writing {}", output.display()))?;
    let cov = coverage_scan(&p);
    if cli.json {
        print_json(&json!({ "output": output, "instructions": p.text.len(), "coverage": cov }))?;
    } else {
        println!(
            "{}: {} instructions, blr {} blraa {} ret {} retaa {}",
            output.display(),
            p.text.len(),
            cov.blr,
            cov.blraa,
            cov.ret,
            cov.retaa
        );
    }
    Ok(ExitCode::SUCCESS)
}

fn run(cli: &Cli, obj: &Path, fuel: u64, pa_off: bool, trace: Option<&Path>) -> Result<ExitCode> {
    let p = MachineProgram::parse(&read(obj)?)?;
    let config = MachineConfig { pa_off, trace: trace.is_some(), ..MachineConfig::default() };
    let mut s = machine::boot_with(&p, cli.seed, config)?;
    let start = s.retired;
    let exhausted = match s.run(fuel) {
        Ok(()) => false,
        Err(MachineError::FuelExhausted { .. }) => true,
        Err(e) => return Err(e.into()),
    };
    if let Some(path) = trace {
        fs::write(path, s.trace_jsonl()).with_context(|| format!("writing {}", path.display()))?;
    }
    let retired = s.retired - start;
    let outputs = s.output_cells();
    if cli.json {
        print_json(&json!({
            "seed": cli.seed,
            "trap": s.trap,
            "fuel_exhausted": exhausted,
            "retired": retired,
            "outputs": outputs,
        }))?;
    } else {
        let end = match s.trap {
            _ if exhausted => "fuel exhausted".to_string(),
            Some(t) => format!("{t:?}"),
            None => "running".to_string(),
        };
        println!("{end} after {retired} instructions");
        for (k, v) in &outputs {
            println!("{k} = {v}");
        }
    }
    Ok(if s.halted() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn analyze(cli: &Cli, input: &Path, dump: bool) -> Result<ExitCode> {
    let m = parse_module(&read(input)?)?;
    let facts = analysis::analyze_module(&m)?;
    let text = facts.dump();
    if cli.json {
        print_json(&json!({
            "members": text.lines().collect::<Vec<_>>(),
            "diagnostics": facts.diagnostics,
            "iterations": facts.iterations,
        }))?;
    } else if dump {
        print!("{text}");
    } else {
        println!(
            "{} fp values, {} fp fields, {} passes",
            facts.set.iter().count(),
            facts.dag.fp_paths.len(),
            facts.iterations
        );
        for d in &facts.diagnostics {
            println!("warning: {d}");
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn suite(cli: &Cli, corpus: &Path, output: Option<&Path>) -> Result<ExitCode> {
    let report = harness::run_suite(corpus, cli.seed)?;
    if let Some(path) = output {
        fs::write(path, serde_json::to_string_pretty(&report)?)
            .with_context(|| format!("writing {}", path.display()))?;
    }
    if cli.json {
        print_json(&report)?;
    } else {
        print!("{}", report.render());
    }
    Ok(if report.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Build { input, output, legacy_ret, no_pa } => build(&cli, input, output, *legacy_ret, *no_pa),
        Cmd::Run { obj, fuel, pa_off, trace } => run(&cli, obj, *fuel, *pa_off, trace.as_deref()),
        Cmd::Attack { scenario } => ScenarioFile::load(scenario)
            .and_then(|sc| adversary::run_scenario(&sc, cli.seed))
            .map_err(anyhow::Error::from)
            .and_then(|v| {
                if cli.json {
                    print_json(&v)?;
                } else {
                    println!("{} seed {}: {} after {} instructions", v.scenario, v.seed, v.outcome.label(), v.retired);
                }
                Ok(ExitCode::SUCCESS)
            }),
        Cmd::Analyze { input, dump_fpset } => analyze(&cli, input, *dump_fpset),
        Cmd::Suite { corpus, output } => suite(&cli, corpus, output.as_deref()),
        Cmd::Report { report } => read(report).and_then(|s| {
            let r: Report = serde_json::from_str(&s)?;
            if cli.json {
                print_json(&r)?;
            } else {
                print!("{}", r.render());
            }
            Ok(if r.failures.is_empty() { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }),
    };
    result.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::from(2)
    })
}
