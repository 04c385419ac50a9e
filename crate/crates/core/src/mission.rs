//! Closed-loop mission: move, measure, sparsify, estimate, plan.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{is_blocked, sample_gps, sample_toa, RngStream, Sparsifier};
use crate::error::{Error, Result};
use crate::fim::{accumulate, crb_trace, InfoState, StepContribution, DEFAULT_EPS_PRIOR};
use crate::model::{MeasurementSample, ValidatedScenario, Vec2, Vec3};
use crate::nr::{drift_offset, estimate_toa_nr, NrConfig, SawtoothDrift};
use crate::planner::{next_waypoint, PlannerState, DEFAULT_HEADINGS};
use crate::slam::{solve_slam, SlamProblem, SolveReport, SolverConfig, StateVector};

/// Salt separating the user-initialization stream from the measurement one.
const INIT_STREAM_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Debug, Clone, PartialEq)]
pub enum MissionMode {
    GreedyPlan,
    /// One waypoint per step; the first must be the start position.
    FixedPath(Vec<Vec3>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ToaPath {
    /// Gaussian delay errors straight from the channel model.
    #[default]
    Ideal,
    /// Channel delay passed through TA + SRS quantization.
    Nr,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MissionConfig {
    pub mode: MissionMode,
    pub toa: ToaPath,
    /// Re-solve SLAM every this many steps (and always at the last step).
    pub resolve_every: usize,
    pub solver: SolverConfig,
    pub headings: usize,
    pub eps_prior: f64,
    /// CIR length for the NR path; derived from the TA step when `None`.
    pub cir_len: Option<usize>,
    /// Margin (m) added around the UAV endpoints and users for user init.
    pub init_margin: f64,
}

impl MissionConfig {
    pub fn new(mode: MissionMode) -> Self {
        Self {
            mode,
            toa: ToaPath::Ideal,
            resolve_every: 1,
            solver: SolverConfig::default(),
            headings: DEFAULT_HEADINGS,
            eps_prior: DEFAULT_EPS_PRIOR,
            cir_len: None,
            init_margin: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub user_errors: Vec<f64>,
    pub user_rmse: f64,
    /// Summed squared user error, comparable with the CRB trace.
    pub user_sq_error_sum: f64,
    pub uav_rmse: f64,
    pub gps_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionResult {
    pub planned: Vec<Vec3>,
    pub true_trajectory: Vec<Vec3>,
    pub gps: Vec<Vec3>,
    pub retained: Vec<bool>,
    pub measurements: Vec<MeasurementSample>,
    /// Estimated UAV position per step; steps without a retained measurement
    /// are decoupled from the users, so their estimate is the GPS fix.
    pub estimated_trajectory: Vec<Vec3>,
    pub true_users: Vec<Vec2>,
    pub estimated_users: Vec<Vec2>,
    /// CRB trace at the true geometry after each step.
    pub crb_history: Vec<f64>,
    pub eps_prior: f64,
    /// Final objective of every SLAM solve.
    pub objective_trace: Vec<f64>,
    /// Whether the final solve, the one behind the reported estimate,
    /// converged.
    pub converged: bool,
    /// Intermediate solves that hit the iteration limit; common while only a
    /// handful of measurements are available.
    pub unconverged_solves: usize,
    pub metrics: Metrics,
}

/// Per-run seed: run 0 uses the scenario seed itself.
pub fn run_seed(base: u64, run: usize) -> u64 {
    if run == 0 {
        return base;
    }
    // splitmix64 finalizer
    let mut z = base.wrapping_add((run as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

pub fn straight_line_path(start: Vec3, terminal: Vec3, steps: usize) -> Vec<Vec3> {
    let a = start.to_na();
    let b = terminal.to_na();
    (0..steps)
        .map(|i| {
            if i + 1 == steps {
                return terminal;
            }
            let t = i as f64 / (steps - 1) as f64;
            Vec3::from_na(&(a + (b - a) * t))
        })
        .collect()
}

fn check_fixed_path(s: &ValidatedScenario, path: &[Vec3]) -> Result<()> {
    if path.len() != s.mission_steps {
        return Err(Error::invalid("path", format!("expected {} waypoints, got {}", s.mission_steps, path.len())));
    }
    if path.iter().any(|p| !p.is_finite()) {
        return Err(Error::invalid("path", "non-finite waypoint"));
    }
    for w in path.windows(2) {
        if w[0].distance(w[1]) > s.d_max * (1.0 + 1e-12) {
            return Err(Error::invalid("path", "step longer than d_max"));
        }
    }
    Ok(())
}

fn init_area(s: &ValidatedScenario, margin: f64) -> (Vec2, Vec2) {
    let pts = s
        .users
        .iter()
        .copied()
        .chain([s.uav_start.horizontal(), s.uav_terminal.horizontal()]);
    let (mut lo, mut hi) = (
        Vec2::new(f64::INFINITY, f64::INFINITY),
        Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
    );
    for p in pts {
        lo = Vec2::new(lo.x.min(p.x), lo.y.min(p.y));
        hi = Vec2::new(hi.x.max(p.x), hi.y.max(p.y));
    }
    (
        Vec2::new(lo.x - margin, lo.y - margin),
        Vec2::new(hi.x + margin, hi.y + margin),
    )
}

/// Solves a recorded measurement set the way a mission would at its last
/// step: UAV poses start at the GPS fixes, users at seeded random points of
/// the scenario area.
pub fn solve_samples(
    s: &ValidatedScenario,
    samples: &[MeasurementSample],
    cfg: &MissionConfig,
) -> Result<(StateVector, SolveReport)> {
    let k = s.num_users();
    if let Some(bad) = samples.iter().find(|m| m.user_id > k) {
        return Err(Error::invalid("user_id", format!("{} exceeds the {k} scenario users", bad.user_id)));
    }
    let problem = SlamProblem::from_samples(samples, k, s.sigma_gps, s.toa_noise)?;
    let mut init_rng = RngStream::new(s.seed ^ INIT_STREAM_SALT);
    let (lo, hi) = init_area(s, cfg.init_margin);
    let users = (0..k)
        .map(|_| Vec2::new(init_rng.uniform(lo.x, hi.x), init_rng.uniform(lo.y, hi.y)))
        .collect();
    let uav = problem.gps.iter().map(|g| g.pos).collect();
    solve_slam(StateVector::new(uav, users), &problem, &cfg.solver)
}

/// Runs one mission. Deterministic given the scenario seed.
pub fn run_mission(s: &ValidatedScenario, cfg: &MissionConfig) -> Result<MissionResult> {
    if let MissionMode::FixedPath(path) = &cfg.mode {
        check_fixed_path(s, path)?;
    }
    let n_steps = s.mission_steps;
    let k = s.num_users();
    let mut rng = RngStream::new(s.seed);
    let mut init_rng = RngStream::new(s.seed ^ INIT_STREAM_SALT);
    let nr = match cfg.toa {
        ToaPath::Nr => Some(match cfg.cir_len {
            Some(len) => NrConfig::new(s.numerology, s.sample_rate, len)?,
            None => NrConfig::with_default_window(s.numerology, s.sample_rate)?,
        }),
        ToaPath::Ideal => None,
    };
    let drift = SawtoothDrift {
        rate: s.toa_noise.drift_rate,
        reset_period: s.toa_noise.drift_reset_period,
    };

    let (lo, hi) = init_area(s, cfg.init_margin);
    let mut user_guess: Vec<Vec2> = (0..k)
        .map(|_| Vec2::new(init_rng.uniform(lo.x, hi.x), init_rng.uniform(lo.y, hi.y)))
        .collect();

    let mut sparsifier = Sparsifier::new(s.delta_keep);
    let mut truth_info = InfoState::new(k, cfg.eps_prior);
    let mut true_traj = Vec::with_capacity(n_steps);
    let mut gps_trace = Vec::with_capacity(n_steps);
    let mut retained = Vec::with_capacity(n_steps);
    let mut samples: Vec<MeasurementSample> = Vec::new();
    let mut crb_history = Vec::with_capacity(n_steps);
    let mut objective_trace = Vec::new();
    let mut converged = true;
    let mut unconverged_solves = 0usize;
    let mut estimate: Option<StateVector> = None;
    let mut pose_steps: Vec<usize> = Vec::new();
    let mut unsolved = false;

    let mut pos = s.uav_start;
    for n in 1..=n_steps {
        true_traj.push(pos);
        let gps = sample_gps(pos, s.sigma_gps, &mut rng);
        let offset = drift_offset(n, &drift);
        let mut toas = Vec::with_capacity(k);
        for &u in &s.users {
            let blocked = is_blocked(pos, u, &s.buildings);
            let channel = sample_toa(pos, u, &s.toa_noise, blocked, &mut rng)?;
            let toa = match &nr {
                Some(nr) => estimate_toa_nr(channel, nr, offset, &mut rng)?,
                None => (channel + offset / 2.0).max(0.0),
            };
            toas.push(toa);
        }
        gps_trace.push(gps);

        let keep = sparsifier.offer(gps);
        retained.push(keep);
        if keep {
            for (i, &toa) in toas.iter().enumerate() {
                samples.push(MeasurementSample {
                    step: n,
                    user_id: i + 1,
                    gps_pos: gps,
                    toa,
                });
            }
            let contrib = StepContribution::at(pos, &s.users, &s.toa_noise)?;
            truth_info = accumulate(&truth_info, &contrib)?;
            pose_steps.push(n);
            unsolved = true;
        }
        crb_history.push(crb_trace(&truth_info).unwrap_or(f64::INFINITY));

        if unsolved && (n % cfg.resolve_every.max(1) == 0 || n == n_steps) {
            let problem = SlamProblem::from_samples(&samples, k, s.sigma_gps, s.toa_noise)?;
            let mut uav: Vec<Vec3> = problem.gps.iter().map(|g| g.pos).collect();
            if let Some(prev) = &estimate {
                uav[..prev.uav.len()].copy_from_slice(&prev.uav);
            }
            let init = StateVector::new(uav, user_guess.clone());
            let (state, report) = match solve_slam(init, &problem, &cfg.solver) {
                Ok(r) => r,
                Err(Error::NotConverged { state, report }) => {
                    log::debug!("step {n}: solve stopped after {} iterations", report.iterations);
                    unconverged_solves += 1;
                    (*state, report)
                }
                Err(e) => return Err(e),
            };
            converged = report.converged;
            objective_trace.push(*report.objective_trace.last().unwrap_or(&f64::NAN));
            user_guess = state.users.clone();
            estimate = Some(state);
            unsolved = false;
        }

        if n == n_steps {
            break;
        }
        pos = match &cfg.mode {
            MissionMode::FixedPath(path) => path[n],
            MissionMode::GreedyPlan => {
                let info = planner_info(s, cfg, &samples, estimate.as_ref(), &user_guess)?;
                let st = PlannerState {
                    step: n,
                    position: pos,
                    terminal: s.uav_terminal,
                    mission_steps: n_steps,
                    d_max: s.d_max,
                    headings: cfg.headings,
                    info,
                    user_estimates: user_guess.clone(),
                    noise: s.toa_noise,
                };
                next_waypoint(&st)
            }
        };
    }

    let mut estimated_trajectory = gps_trace.clone();
    if let Some(est) = &estimate {
        for (i, &step) in pose_steps.iter().enumerate() {
            estimated_trajectory[step - 1] = est.uav[i];
        }
    }
    let mut result = MissionResult {
        planned: true_traj.clone(),
        true_trajectory: true_traj,
        gps: gps_trace,
        retained,
        measurements: samples,
        estimated_trajectory,
        true_users: s.users.clone(),
        estimated_users: user_guess,
        crb_history,
        eps_prior: cfg.eps_prior,
        objective_trace,
        converged,
        unconverged_solves,
        metrics: Metrics {
            user_errors: Vec::new(),
            user_rmse: 0.0,
            user_sq_error_sum: 0.0,
            uav_rmse: 0.0,
            gps_rmse: 0.0,
        },
    };
    result.metrics = compute_metrics(&result);
    Ok(result)
}

/// FIM of the retained measurements evaluated at the current estimates,
/// as the planner sees it.
fn planner_info(
    s: &ValidatedScenario,
    cfg: &MissionConfig,
    samples: &[MeasurementSample],
    estimate: Option<&StateVector>,
    users: &[Vec2],
) -> Result<InfoState> {
    let eps = if cfg.eps_prior > 0.0 { cfg.eps_prior } else { DEFAULT_EPS_PRIOR };
    let mut info = InfoState::new(users.len(), eps);
    let mut pose = 0usize;
    let mut last_step = None;
    for smp in samples {
        if last_step == Some(smp.step) {
            continue;
        }
        last_step = Some(smp.step);
        let x = estimate
            .and_then(|e| e.uav.get(pose).copied())
            .unwrap_or(smp.gps_pos);
        pose += 1;
        let blocks = users
            .iter()
            .map(|&u| {
                let d = x.distance(u.lift());
                if d == 0.0 {
                    return Ok(nalgebra::Matrix2::zeros());
                }
                let sigma = crate::channel::sigma_tau_of_distance(d, &s.toa_noise);
                crate::fim::toa_info_contribution(x, u, sigma)
            })
            .collect::<Result<Vec<_>>>()?;
        info = accumulate(&info, &StepContribution { blocks })?;
    }
    Ok(info)
}

pub fn compute_metrics(r: &MissionResult) -> Metrics {
    let user_errors: Vec<f64> = r
        .estimated_users
        .iter()
        .zip(&r.true_users)
        .map(|(e, t)| e.distance(*t))
        .collect();
    let user_sq_error_sum: f64 = user_errors.iter().map(|e| e * e).sum();
    let user_rmse = rms(&user_errors);
    let uav_err: Vec<f64> = r
        .estimated_trajectory
        .iter()
        .zip(&r.true_trajectory)
        .map(|(e, t)| e.distance(*t))
        .collect();
    let gps_err: Vec<f64> = r
        .gps
        .iter()
        .zip(&r.true_trajectory)
        .map(|(e, t)| e.distance(*t))
        .collect();
    Metrics {
        user_errors,
        user_rmse,
        user_sq_error_sum,
        uav_rmse: rms(&uav_err),
        gps_rmse: rms(&gps_err),
    }
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|e| e * e).sum::<f64>() / v.len() as f64).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Stats {
    pub mean: f64,
    pub median: f64,
    pub std: f64,
}

impl Stats {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, median: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let var = if n > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64
        } else {
            0.0
        };
        Self { mean, median: median(values), std: var.sqrt() }
    }
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub seed: u64,
    pub metrics: Metrics,
    pub final_crb: f64,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McSummary {
    pub runs: Vec<RunRecord>,
    pub user_rmse: Stats,
    pub user_sq_error_sum: Stats,
    pub uav_rmse: Stats,
    pub gps_rmse: Stats,
    pub final_crb: Stats,
    /// Per-user absolute error statistics.
    pub user_errors: Vec<Stats>,
    pub not_converged: usize,
}

/// Runs `runs` missions with seeds derived from the scenario seed, in
/// parallel; results are aggregated in run order.
pub fn monte_carlo(s: &ValidatedScenario, cfg: &MissionConfig, runs: usize) -> Result<McSummary> {
    if runs == 0 {
        return Err(Error::invalid("runs", "must be >= 1"));
    }
    let records = (0..runs)
        .into_par_iter()
        .map(|i| {
            let mut sc = (**s).clone();
            sc.seed = run_seed(s.seed, i);
            let sc = crate::model::validate_scenario(sc)?;
            let r = run_mission(&sc, cfg)?;
            Ok(RunRecord {
                seed: sc.seed,
                final_crb: *r.crb_history.last().unwrap_or(&f64::INFINITY),
                converged: r.converged,
                metrics: r.metrics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let col = |f: &dyn Fn(&RunRecord) -> f64| records.iter().map(f).collect::<Vec<_>>();
    let k = s.num_users();
    Ok(McSummary {
        user_rmse: Stats::of(&col(&|r| r.metrics.user_rmse)),
        user_sq_error_sum: Stats::of(&col(&|r| r.metrics.user_sq_error_sum)),
        uav_rmse: Stats::of(&col(&|r| r.metrics.uav_rmse)),
        gps_rmse: Stats::of(&col(&|r| r.metrics.gps_rmse)),
        final_crb: Stats::of(&col(&|r| r.final_crb)),
        user_errors: (0..k).map(|u| Stats::of(&col(&|r| r.metrics.user_errors[u]))).collect(),
        not_converged: records.iter().filter(|r| !r.converged).count(),
        runs: records,
    })
}
