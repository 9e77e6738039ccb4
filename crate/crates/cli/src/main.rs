//! Command-line front end: closed-loop runs, single plans, offline
//! filtering, the operator service and log replay.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use graspflow::config::Config;
use graspflow::filter::filter_table;
use graspflow::runtime::service::{ServeOptions, Server};
use graspflow::runtime::telemetry::PlanOutcome;
use graspflow::runtime::{run_closed_loop, ClockMode, Record, RunLog, RuntimeError};
use graspflow::trajopt::{solve, PlanProblem, SolveOptions, Trajectory};

#[derive(Parser)]
#[command(name = "graspflow", version, about = "Closed-loop pick-and-place simulation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pick-and-place task and write its telemetry log.
    Run {
        /// TOML file layered over the bundled defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 7)]
        seed: u64,
        /// Simulated seconds before the run is cut off.
        #[arg(long)]
        duration: Option<f64>,
        /// static, linear, sinusoid or jitter; applies to every object.
        #[arg(long)]
        object_motion: Option<String>,
        /// JSON-lines log; omitted means no log file.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Pace against the wall clock with the planner on a worker thread.
        #[arg(long)]
        realtime: bool,
    },
    /// Solve one planning problem (TOML or JSON) and print the trajectory as CSV.
    Plan {
        problem: PathBuf,
        /// Robot model for problems with obstacles.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Apply the realtime budget instead of solving to convergence.
        #[arg(long)]
        budget: Option<f64>,
    },
    /// Filter a pose measurement CSV (t,px,py,pz,roll,pitch,yaw).
    Filter {
        input: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Serve the operator protocol (line-delimited JSON or WebSocket).
    Serve {
        #[arg(long, default_value_t = 8765)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Simulated seconds per wall-clock second.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        #[arg(long)]
        object_motion: Option<String>,
    },
    /// Summarize a telemetry log.
    Replay {
        #[arg(long)]
        log: PathBuf,
        /// Also print sensor and planner records.
        #[arg(long)]
        verbose: bool,
    },
}

type Result<T> = std::result::Result<T, String>;

fn load_config(path: Option<&Path>) -> Result<Config> {
    match path {
        Some(p) => Config::load(p).map_err(|e| format!("{}: {e}", p.display())),
        None => Ok(Config::bundled()),
    }
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p).map_err(|e| format!("{}: {e}", p.display()))?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, seed, duration, object_motion, out, realtime } => {
            cmd_run(config.as_deref(), seed, duration, object_motion.as_deref(), out.as_deref(), realtime)
        }
        Command::Plan { problem, config, out, budget } => cmd_plan(&problem, config.as_deref(), out.as_deref(), budget),
        Command::Filter { input, out, config } => cmd_filter(&input, out.as_deref(), config.as_deref()),
        Command::Serve { port, host, config, seed, speed, object_motion } => {
            cmd_serve(&host, port, config.as_deref(), seed, speed, object_motion.as_deref())
        }
        Command::Replay { log, verbose } => cmd_replay(&log, verbose),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn cmd_run(
    config: Option<&Path>,
    seed: u64,
    duration: Option<f64>,
    motion: Option<&str>,
    out: Option<&Path>,
    realtime: bool,
) -> Result<ExitCode> {
    let mut cfg = load_config(config)?;
    if let Some(m) = motion {
        cfg = cfg.with_object_motion(m).map_err(|e| e.to_string())?;
    }
    if let Some(d) = duration {
        cfg.task.duration = d;
    }
    let clock = if realtime { ClockMode::Realtime } else { ClockMode::Virtual };
    let (log, failure) = match run_closed_loop(cfg, clock, seed) {
        Ok(log) => (log, None),
        Err(RuntimeError::RunFailed { reason, log }) => (*log, Some(reason)),
        Err(e) => return Err(e.to_string()),
    };
    if let Some(p) = out {
        let f = File::create(p).map_err(|e| format!("{}: {e}", p.display()))?;
        log.write_jsonl(BufWriter::new(f)).map_err(|e| e.to_string())?;
    }
    print_summary(&log, false);
    if let Some(reason) = failure {
        eprintln!("run failed: {reason}");
    }
    Ok(if log.succeeded() { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

fn read_problem(path: &Path) -> Result<PlanProblem> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let parsed = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| format!("{}: {e}", path.display()))
}

/// Columns `k, t, q…, qd…, qdd…, u…`, then the solve statistics as a
/// `# stats` comment line.
fn write_table(traj: &Trajectory, w: &mut dyn Write) -> Result<()> {
    let dof = traj.dof();
    let mut csv = csv::Writer::from_writer(&mut *w);
    let mut header = vec!["k".to_string(), "t".to_string()];
    for prefix in ["q", "qd", "qdd", "u"] {
        header.extend((0..dof).map(|j| format!("{prefix}{j}")));
    }
    csv.write_record(&header).map_err(|e| e.to_string())?;
    for (k, knot) in traj.knots.iter().enumerate() {
        let mut row = vec![k.to_string(), format!("{}", traj.t0 + k as f64 * traj.h)];
        for v in [&knot.x.q, &knot.x.qd, &knot.x.qdd, &knot.u] {
            row.extend(v.iter().map(|x| format!("{x}")));
        }
        csv.write_record(&row).map_err(|e| e.to_string())?;
    }
    csv.flush().map_err(|e| e.to_string())?;
    drop(csv);
    let stats = serde_json::to_string(&traj.stats).map_err(|e| e.to_string())?;
    writeln!(w, "# stats {stats}").map_err(|e| e.to_string())?;
    w.flush().map_err(|e| e.to_string())
}

fn cmd_plan(path: &Path, config: Option<&Path>, out: Option<&Path>, budget: Option<f64>) -> Result<ExitCode> {
    let problem = read_problem(path)?;
    let cfg = load_config(config)?;
    let opts = SolveOptions { time_budget: budget, ..cfg.planner.solve_options(true) };
    let robot = (!problem.obstacles.is_empty()).then_some(&cfg.robot);
    let traj = solve(&problem, None, robot, &opts).map_err(|e| e.to_string())?;
    write_table(&traj, &mut *output(out)?)?;
    Ok(ExitCode::SUCCESS)
}

fn cmd_filter(input: &Path, out: Option<&Path>, config: Option<&Path>) -> Result<ExitCode> {
    let cfg = load_config(config)?;
    let f = File::open(input).map_err(|e| format!("{}: {e}", input.display()))?;
    let rows = filter_table(BufReader::new(f), output(out)?, &cfg.filter).map_err(|e| e.to_string())?;
    eprintln!("{rows} estimates written");
    Ok(ExitCode::SUCCESS)
}

fn cmd_serve(
    host: &str,
    port: u16,
    config: Option<&Path>,
    seed: u64,
    speed: f64,
    motion: Option<&str>,
) -> Result<ExitCode> {
    let mut cfg = load_config(config)?;
    if let Some(m) = motion {
        cfg = cfg.with_object_motion(m).map_err(|e| e.to_string())?;
    }
    let opts = ServeOptions { addr: format!("{host}:{port}"), seed, clock: ClockMode::Realtime, speed };
    let server = Server::start(cfg, opts).map_err(|e| e.to_string())?;
    eprintln!("listening on {} (TCP lines or WebSocket)", server.local_addr());
    server.wait();
    Ok(ExitCode::SUCCESS)
}

fn cmd_replay(path: &Path, verbose: bool) -> Result<ExitCode> {
    let f = File::open(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let log = RunLog::read_jsonl(BufReader::new(f)).map_err(|e| e.to_string())?;
    print_summary(&log, verbose);
    Ok(ExitCode::SUCCESS)
}

fn print_summary(log: &RunLog, verbose: bool) {
    if let Some(Record::Header { seed, clock, dof, controller_dt, planner_period, sensor_rate, .. }) = log.records.first() {
        println!(
            "seed {seed}, {clock:?} clock, {dof} joints, controller {:.0} Hz, planner {:.0} Hz, sensor {sensor_rate:.0} Hz",
            1.0 / controller_dt,
            1.0 / planner_period
        );
    }
    let mut plans = 0;
    let mut failed = 0;
    let mut relaxed = 0;
    let mut max_jump = 0.0_f64;
    let mut walls = Vec::new();
    for r in &log.records {
        match r {
            Record::Event { t, event } => println!("{t:8.3}  {:<18} {}", event.name(), event_detail(event)),
            Record::Planner { outcome, handover_jump, wall_time, t, n, iterations, .. } => {
                match outcome {
                    PlanOutcome::Planned => plans += 1,
                    PlanOutcome::Relaxed => {
                        plans += 1;
                        relaxed += 1
                    }
                    PlanOutcome::Failed => failed += 1,
                    _ => {}
                }
                if let Some(j) = handover_jump {
                    max_jump = j.iter().fold(max_jump, |a, b| a.max(*b));
                }
                walls.extend(*wall_time);
                if verbose {
                    println!("{t:8.3}  plan {outcome:?} n={n} iterations={iterations}");
                }
            }
            Record::Sensor { t, status, estimate: Some(e), .. } if verbose => {
                println!("{t:8.3}  sensor {status:?} p=({:.3}, {:.3}, {:.3})", e[0], e[1], e[2]);
            }
            _ => {}
        }
    }
    println!("plans {plans} (relaxed {relaxed}, failed {failed}), max handover jump {max_jump:.2e}");
    if !walls.is_empty() {
        walls.sort_by(f64::total_cmp);
        println!("planner wall time median {:.1} ms, max {:.1} ms", 1e3 * walls[walls.len() / 2], 1e3 * walls[walls.len() - 1]);
    }
    if let Some(Record::Summary { t, outcome, phase, sensor_ticks, planner_ticks, controller_ticks }) = log.records.last() {
        println!("ticks: sensor {sensor_ticks}, planner {planner_ticks}, controller {controller_ticks}");
        println!("outcome at t={t:.3}: {outcome:?} (phase {phase:?})");
    }
}

fn event_detail(e: &graspflow::runtime::Event) -> String {
    let mut v = serde_json::to_value(e).unwrap_or_default();
    if let Some(m) = v.as_object_mut() {
        m.remove("type");
    }
    match v.as_object() {
        Some(m) if m.is_empty() => String::new(),
        _ => v.to_string(),
    }
}
