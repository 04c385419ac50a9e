use std::fs::File;
use std::io::BufReader;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};
use serde_json::json;

use uavloc::config::{parse_run_config, PlanMode, RunConfig};
use uavloc::error::{Error, Result};
use uavloc::export::export_results;
use uavloc::fim::{accumulate, crb_trace, InfoState, StepContribution};
use uavloc::measlog::read_measurements;
use uavloc::mission::{monte_carlo, run_mission, solve_samples, ToaPath};
use uavloc::model::{validate_scenario, ValidatedScenario, Vec2, Vec3};
use uavloc::planner::{next_waypoint, PlannerState};

#[derive(Parser)]
#[command(name = "uavloc", version, about = "UAV-aided ground-user localization from ToA and GPS")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML)
    #[arg(long)]
    scenario: PathBuf,
    /// Override the scenario seed
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, value_enum)]
    toa: Option<ToaArg>,
    /// Machine-readable summary on stdout
    #[arg(long)]
    json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Greedy,
    Fixed,
}

#[derive(Clone, Copy, ValueEnum)]
enum ToaArg {
    Ideal,
    Nr,
}

#[derive(Subcommand)]
enum Command {
    /// Run one mission and export its results
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Estimate users and trajectory from a measurement log
    Solve {
        #[command(flatten)]
        common: Common,
        /// CSV log with header step,user_id,gps_x,gps_y,gps_z,toa_s
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Next waypoint from a planner state (JSON)
    Plan {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        state: PathBuf,
    },
    /// CRB trace history along a trajectory
    Crb {
        #[command(flatten)]
        common: Common,
        /// CSV with header x,y,z, one row per retained measurement position
        #[arg(long)]
        trajectory: PathBuf,
        /// CSV with header x,y; defaults to the scenario users
        #[arg(long)]
        users: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Monte Carlo batch
    Mc {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 100)]
        runs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Input of `plan`.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PlanInput {
    /// 1-based step the UAV is currently at.
    step: usize,
    position: Vec3,
    user_estimates: Vec<Vec2>,
    /// Positions of the measurements collected so far.
    #[serde(default)]
    visited: Vec<Vec3>,
}

#[derive(Serialize)]
struct CrbRow {
    step: usize,
    crb_trace: f64,
}

fn load(common: &Common) -> Result<(RunConfig, ValidatedScenario)> {
    let text = std::fs::read_to_string(&common.scenario)?;
    let mut cfg = parse_run_config(&text)?;
    if let Some(seed) = common.seed {
        cfg.scenario.seed = seed;
    }
    if let Some(m) = common.mode {
        cfg.mission.mode = match m {
            ModeArg::Greedy => PlanMode::Greedy,
            ModeArg::Fixed => PlanMode::Fixed,
        };
    }
    if let Some(t) = common.toa {
        cfg.mission.toa = match t {
            ToaArg::Ideal => ToaPath::Ideal,
            ToaArg::Nr => ToaPath::Nr,
        };
    }
    let s = validate_scenario(cfg.scenario.clone())?;
    Ok((cfg, s))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.into()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

fn print_json(value: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(value).expect("json values always serialize"));
}

fn read_points<const N: usize>(path: &Path, header: [&str; N]) -> Result<Vec<[f64; N]>> {
    let mut rdr = csv::Reader::from_reader(BufReader::new(File::open(path)?));
    let got: Vec<String> = rdr
        .headers()
        .map_err(|e| Error::Schema(e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    if got != header {
        return Err(Error::Schema(format!("{}: expected header `{}`", path.display(), header.join(","))));
    }
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let row = i + 1;
        let rec = rec.map_err(|e| Error::Row { row, message: e.to_string() })?;
        let mut p = [0.0; N];
        for (j, v) in p.iter_mut().enumerate() {
            *v = rec
                .get(j)
                .unwrap_or("")
                .trim()
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::Row { row, message: format!("bad value in column {}", header[j]) })?;
        }
        out.push(p);
    }
    Ok(out)
}

fn simulate(common: &Common, out: Option<&Path>) -> Result<()> {
    let (cfg, s) = load(common)?;
    let r = run_mission(&s, &cfg.mission_config())?;
    if let Some(dir) = out {
        export_results(&r, dir)?;
    }
    let final_crb = r.crb_history.last().copied();
    if common.json {
        print_json(&json!({ "converged": r.converged, "final_crb": final_crb, "metrics": r.metrics }));
    } else {
        println!("steps {}  retained {}", r.true_trajectory.len(), r.retained.iter().filter(|&&k| k).count());
        for (k, e) in r.metrics.user_errors.iter().enumerate() {
            println!("user {}: error {e:.3} m", k + 1);
        }
        println!("user rmse {:.3} m  uav rmse {:.3} m  gps rmse {:.3} m", r.metrics.user_rmse, r.metrics.uav_rmse, r.metrics.gps_rmse);
        if let Some(c) = final_crb {
            println!("final crb trace {c:.4} m^2");
        }
        if !r.converged {
            println!("warning: at least one solve did not converge");
        }
    }
    Ok(())
}

fn solve(common: &Common, log: &Path, out: Option<&Path>) -> Result<()> {
    let (cfg, s) = load(common)?;
    let samples = read_measurements(BufReader::new(File::open(log)?))?;
    let (state, report) = solve_samples(&s, &samples, &cfg.mission_config())?;
    let value = json!({
        "users": state.users,
        "uav": state.uav,
        "iterations": report.iterations,
        "objective": report.objective_trace.last(),
        "converged": report.converged,
    });
    if let Some(path) = out {
        write_json(path, &value)?;
    }
    if common.json {
        print_json(&value);
    } else {
        for (k, u) in state.users.iter().enumerate() {
            println!("user {}: ({:.3}, {:.3})", k + 1, u.x, u.y);
        }
        println!("{} iterations", report.iterations);
    }
    Ok(())
}

fn plan(common: &Common, state: &Path) -> Result<()> {
    let (cfg, s) = load(common)?;
    let input: PlanInput = serde_json::from_reader(BufReader::new(File::open(state)?)).map_err(|e| Error::Parse {
        line: e.line(),
        message: e.to_string(),
    })?;
    if input.step == 0 || input.step > s.mission_steps {
        return Err(Error::Parse { line: 0, message: format!("step must lie in 1..={}", s.mission_steps) });
    }
    let mut info = InfoState::new(input.user_estimates.len(), cfg.mission.eps_prior);
    for &x in &input.visited {
        info = accumulate(&info, &StepContribution::at(x, &input.user_estimates, &s.toa_noise)?)?;
    }
    let st = PlannerState {
        step: input.step,
        position: input.position,
        terminal: s.uav_terminal,
        mission_steps: s.mission_steps,
        d_max: s.d_max,
        headings: cfg.mission.headings,
        info,
        user_estimates: input.user_estimates,
        noise: s.toa_noise,
    };
    let next = next_waypoint(&st);
    if common.json {
        print_json(&json!({ "next": next }));
    } else {
        println!("{} {} {}", next.x, next.y, next.z);
    }
    Ok(())
}

fn crb(common: &Common, trajectory: &Path, users: Option<&Path>, out: Option<&Path>) -> Result<()> {
    let (cfg, s) = load(common)?;
    let users: Vec<Vec2> = match users {
        Some(p) => read_points(p, ["x", "y"])?.into_iter().map(|[x, y]| Vec2::new(x, y)).collect(),
        None => s.users.clone(),
    };
    let traj = read_points(trajectory, ["x", "y", "z"])?;
    let mut info = InfoState::new(users.len(), cfg.mission.eps_prior);
    let mut rows = Vec::with_capacity(traj.len());
    for (i, [x, y, z]) in traj.into_iter().enumerate() {
        info = accumulate(&info, &StepContribution::at(Vec3::new(x, y, z), &users, &s.toa_noise)?)?;
        rows.push(CrbRow { step: i + 1, crb_trace: crb_trace(&info)? });
    }
    if let Some(path) = out {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        w.write_record(["step", "crb_trace"]).map_err(|e| Error::Io(std::io::Error::other(e)))?;
        for r in &rows {
            w.write_record([r.step.to_string(), format!("{:?}", r.crb_trace)])
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
        }
        w.flush()?;
    }
    if common.json {
        print_json(&serde_json::to_value(&rows).map_err(|e| Error::Io(e.into()))?);
    } else {
        for r in &rows {
            println!("{} {:.6e}", r.step, r.crb_trace);
        }
    }
    Ok(())
}

fn mc(common: &Common, runs: usize, out: Option<&Path>) -> Result<()> {
    let (cfg, s) = load(common)?;
    let summary = monte_carlo(&s, &cfg.mission_config(), runs)?;
    let value = serde_json::to_value(&summary).map_err(|e| Error::Io(e.into()))?;
    if let Some(path) = out {
        write_json(&path.join("mc_summary.json"), &value)?;
    }
    if common.json {
        print_json(&value);
    } else {
        println!("{} runs, {} not converged", summary.runs.len(), summary.not_converged);
        let show = |name: &str, st: &uavloc::mission::Stats| {
            println!("{name:<18} mean {:.4}  median {:.4}  std {:.4}", st.mean, st.median, st.std);
        };
        show("user rmse [m]", &summary.user_rmse);
        show("uav rmse [m]", &summary.uav_rmse);
        show("gps rmse [m]", &summary.gps_rmse);
        show("final crb [m^2]", &summary.final_crb);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Command::Simulate { common, out } => simulate(common, out.as_deref()),
        Command::Solve { common, log, out } => solve(common, log, out.as_deref()),
        Command::Plan { common, state } => plan(common, state),
        Command::Crb { common, trajectory, users, out } => crb(common, trajectory, users.as_deref(), out.as_deref()),
        Command::Mc { common, runs, out } => mc(common, *runs, out.as_deref()),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_numeric() {
                ExitCode::from(3)
            } else {
                ExitCode::from(2)
            }
        }
    }
}
