use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use shuttle_core::gaussian::state_trajectory_csv;
use shuttle_core::invariant::{protocol_from_csv, protocol_to_csv};
use shuttle_core::optimize::trace_csv;
use shuttle_core::scenario::{
    load_config, parse_range, run_synth, run_verify, sweep, sweep_csv, RunStatus, ScenarioConfig, PRESETS,
};
use shuttle_core::Error;

const EXIT_INFEASIBLE: u8 = 2;
const EXIT_INVALID: u8 = 3;
const EXIT_NUMERICAL: u8 = 4;

#[derive(Parser)]
#[command(name = "shuttle", version, about = "Synthesize and verify invariant-based trap protocols")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build, optionally optimize, and verify the protocol of a scenario.
    Synth {
        /// Scenario file, or the name of a built-in preset.
        config: String,
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        output: OutputFlags,
    },
    /// Re-simulate an exported protocol against a scenario's boundary data.
    Verify {
        protocol: PathBuf,
        /// Scenario file (or preset name) supplying the boundary traps and mass.
        #[arg(long)]
        boundary: String,
        #[command(flatten)]
        output: OutputFlags,
    },
    /// Run one synthesis per value of a configuration parameter.
    Sweep {
        config: String,
        /// `path=range`, e.g. `basis.functions=3:25:2` or `optimizer.seed=0,1,2`.
        #[arg(long)]
        param: String,
        #[command(flatten)]
        run: RunFlags,
        #[command(flatten)]
        output: OutputFlags,
    },
    /// Built-in scenario presets.
    Presets {
        #[command(subcommand)]
        action: PresetAction,
    },
}

#[derive(Subcommand)]
enum PresetAction {
    List,
    /// Print a preset as a scenario file.
    Show { name: String },
}

#[derive(Args)]
struct RunFlags {
    /// Optimizer seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Intervals of the exported protocol grid.
    #[arg(long)]
    grid: Option<usize>,
}

#[derive(Args)]
struct OutputFlags {
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// RK4 steps of the verification pass.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    quiet: bool,
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = if e.is_numerical() { EXIT_NUMERICAL } else { EXIT_INVALID };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

type Outcome = std::result::Result<u8, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INVALID } else { 0 });
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Outcome {
    match cli.command {
        Command::Synth { config, run, output } => synth(&config, &run, &output),
        Command::Verify {
            protocol,
            boundary,
            output,
        } => verify(&protocol, &boundary, &output),
        Command::Sweep {
            config,
            param,
            run,
            output,
        } => sweep_cmd(&config, &param, &run, &output),
        Command::Presets { action } => {
            match action {
                PresetAction::List => {
                    for (name, _) in PRESETS {
                        println!("{name}");
                    }
                }
                PresetAction::Show { name } => match PRESETS.iter().find(|(n, _)| *n == name) {
                    Some((_, text)) => print!("{text}"),
                    None => {
                        return Err(Failure {
                            code: EXIT_INVALID,
                            message: format!("unknown preset `{name}`"),
                        })
                    }
                },
            }
            Ok(0)
        }
    }
}

/// A path that exists is read as a file; otherwise a preset name is accepted.
fn read_config(arg: &str) -> Result<ScenarioConfig, Failure> {
    if !Path::new(arg).exists() && PRESETS.iter().any(|(n, _)| *n == arg) {
        return Ok(ScenarioConfig::preset(arg)?);
    }
    Ok(load_config(arg)?)
}

fn apply_flags(cfg: &mut ScenarioConfig, run: &RunFlags, output: &OutputFlags) -> Result<(), Failure> {
    if let Some(seed) = run.seed {
        cfg.optimizer.seed = seed;
    }
    if let Some(grid) = run.grid {
        cfg.verify.grid = grid;
    }
    if let Some(steps) = output.steps {
        cfg.verify.steps = Some(steps);
    }
    cfg.validate()?;
    Ok(())
}

fn write(dir: &Path, name: &str, text: &str) -> Result<String, Failure> {
    fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
    let path = dir.join(name);
    fs::write(&path, text).map_err(|e| io_failure(&path, e))?;
    Ok(name.to_string())
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure {
        code: EXIT_INVALID,
        message: format!("{}: {e}", path.display()),
    }
}

fn synth(config: &str, run: &RunFlags, output: &OutputFlags) -> Outcome {
    let mut cfg = read_config(config)?;
    apply_flags(&mut cfg, run, output)?;
    let mut outcome = run_synth(&cfg)?;
    let dir = output.out.clone().unwrap_or_else(|| PathBuf::from("shuttle_out"));
    let v = &outcome.verification;
    let files = [
        ("protocol", write(&dir, "protocol.csv", &protocol_to_csv(&outcome.protocol))?),
        (
            "state_trajectory",
            write(&dir, "state_trajectory.csv", &state_trajectory_csv(&v.states, &v.target)?)?,
        ),
        (
            "trace",
            write(
                &dir,
                "trace.csv",
                &trace_csv(outcome.optimization.as_ref().map_or(&[][..], |o| &o.trace[..])),
            )?,
        ),
    ];
    for (k, name) in files {
        outcome.manifest.outputs.insert(k.into(), name);
    }
    outcome.manifest.outputs.insert("manifest".into(), "manifest.toml".into());
    write(&dir, "manifest.toml", &outcome.manifest.to_toml())?;
    if !output.quiet {
        let h = &outcome.manifest.headline;
        println!("kind        {}", outcome.manifest.kind);
        println!("status      {}", outcome.manifest.status);
        println!("evaluations {}", outcome.manifest.evaluations);
        println!("baseline    {:.6e}", h["baseline_objective"]);
        println!("objective   {:.6e}", h["objective"]);
        println!("penalty     {:.6e}", h["penalty"]);
        println!("fidelity    {:.12}", h["fidelity"]);
        println!("nbar        {:.6e}", h["nbar"]);
        println!("outputs     {}", dir.display());
    }
    Ok(match outcome.status {
        RunStatus::Success => 0,
        RunStatus::Infeasible => EXIT_INFEASIBLE,
    })
}

fn verify(protocol: &Path, boundary: &str, output: &OutputFlags) -> Outcome {
    let cfg = read_config(boundary)?;
    let text = fs::read_to_string(protocol).map_err(|e| Failure {
        code: EXIT_INVALID,
        message: format!("{}: {e}", protocol.display()),
    })?;
    let p = protocol_from_csv(&text, cfg.mass)?;
    let spec = cfg.boundary_spec()?;
    let steps = output.steps.unwrap_or_else(|| cfg.verify.steps().max(p.len() - 1));
    let v = run_verify(&p, &spec, steps, cfg.verify.min_fidelity)?;
    let r = &v.report;
    if let Some(dir) = &output.out {
        write(dir, "state_trajectory.csv", &state_trajectory_csv(&v.states, &v.target)?)?;
        write(dir, "verify.toml", &r.to_toml())?;
    }
    if !output.quiet {
        println!("fidelity           {:.12}", r.fidelity);
        println!("nbar               {:.6e}", r.nbar);
        println!("purity_drift       {:.3e}", r.purity_drift);
        println!("uncertainty_margin {:.3e}", r.uncertainty_margin);
        println!("steps              {}", r.steps);
        println!("passed             {}", r.passed);
    }
    Ok(if r.passed { 0 } else { EXIT_INFEASIBLE })
}

fn sweep_cmd(config: &str, param: &str, run: &RunFlags, output: &OutputFlags) -> Outcome {
    let mut cfg = read_config(config)?;
    apply_flags(&mut cfg, run, output)?;
    let (path, range) = param.split_once('=').ok_or_else(|| Failure {
        code: EXIT_INVALID,
        message: format!("--param expects `path=range`, got `{param}`"),
    })?;
    let values = parse_range(range)?;
    let rows = sweep(&cfg, path.trim(), &values)?;
    let csv = sweep_csv(path.trim(), &rows);
    if let Some(dir) = &output.out {
        write(dir, "sweep.csv", &csv)?;
    }
    if !output.quiet {
        print!("{csv}");
    }
    let all_ok = rows.iter().all(|r| r.outcome.status == RunStatus::Success);
    Ok(if all_ok { 0 } else { EXIT_INFEASIBLE })
}
