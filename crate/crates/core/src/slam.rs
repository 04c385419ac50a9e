//! Joint UAV tracking and user localization by damped Gauss-Newton.
//!
//! Unknowns are the UAV poses that carry measurements followed by the user
//! positions, `[x_1 .. x_P, u_1 .. u_K]`, flattened to `3P + 2K` reals. Every
//! pose has one GPS factor; every ToA sample couples one pose with one user.
//! Each factor contributes `J^T W J` and `J^T W e` at its own indices of the
//! global system, so pose and user blocks stay coupled.
//!
//! The default linear solver eliminates the 3x3 pose blocks first and factors
//! the `2K x 2K` Schur complement; a dense Cholesky of the full system is
//! available for small problems and for cross-checking.

use std::collections::BTreeMap;

use log::warn;
use nalgebra::{Cholesky, DMatrix, DVector, Matrix2, Matrix3, Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::channel::{sigma_tau_of_distance, RngStream};
use crate::error::{Error, Result};
use crate::model::{MeasurementSample, ToaNoiseModel, Vec2, Vec3, SPEED_OF_LIGHT};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateVector {
    pub uav: Vec<Vec3>,
    pub users: Vec<Vec2>,
}

impl StateVector {
    pub fn new(uav: Vec<Vec3>, users: Vec<Vec2>) -> Self {
        Self { uav, users }
    }

    pub fn dim(&self) -> usize {
        3 * self.uav.len() + 2 * self.users.len()
    }

    pub fn user_offset(&self) -> usize {
        3 * self.uav.len()
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        for (p, x) in self.uav.iter().enumerate() {
            v[3 * p] = x.x;
            v[3 * p + 1] = x.y;
            v[3 * p + 2] = x.z;
        }
        let off = self.user_offset();
        for (k, u) in self.users.iter().enumerate() {
            v[off + 2 * k] = u.x;
            v[off + 2 * k + 1] = u.y;
        }
        v
    }

    pub fn from_vector(v: &DVector<f64>, num_poses: usize, num_users: usize) -> Self {
        assert_eq!(v.len(), 3 * num_poses + 2 * num_users);
        let uav = (0..num_poses)
            .map(|p| Vec3::new(v[3 * p], v[3 * p + 1], v[3 * p + 2]))
            .collect();
        let off = 3 * num_poses;
        let users = (0..num_users)
            .map(|k| Vec2::new(v[off + 2 * k], v[off + 2 * k + 1]))
            .collect();
        Self { uav, users }
    }

    pub fn plus(&self, delta: &DVector<f64>) -> Self {
        Self::from_vector(&(self.to_vector() + delta), self.uav.len(), self.users.len())
    }

    pub fn is_finite(&self) -> bool {
        self.uav.iter().all(Vec3::is_finite) && self.users.iter().all(Vec2::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GpsObs {
    pub pose: usize,
    pub pos: Vec3,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToaObs {
    pub pose: usize,
    pub user: usize,
    pub toa: f64,
}

/// Measurements indexed by pose and user, plus the noise description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlamProblem {
    pub num_poses: usize,
    pub num_users: usize,
    /// 1-based mission step of each pose.
    pub pose_steps: Vec<usize>,
    pub gps: Vec<GpsObs>,
    pub toa: Vec<ToaObs>,
    pub sigma_gps: f64,
    pub noise: ToaNoiseModel,
}

impl SlamProblem {
    /// Groups samples by step: one pose (and one GPS factor) per distinct
    /// step, one ToA factor per sample. `num_users` must cover every user id.
    pub fn from_samples(
        samples: &[MeasurementSample],
        num_users: usize,
        sigma_gps: f64,
        noise: ToaNoiseModel,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::invalid("measurements", "empty measurement set"));
        }
        let mut by_step: BTreeMap<usize, Vec3> = BTreeMap::new();
        for s in samples {
            if s.user_id == 0 || s.user_id > num_users {
                return Err(Error::invalid("user_id", format!("{} out of 1..={num_users}", s.user_id)));
            }
            if s.step == 0 {
                return Err(Error::invalid("step", "steps are 1-based"));
            }
            if !(s.toa >= 0.0 && s.toa.is_finite()) || !s.gps_pos.is_finite() {
                return Err(Error::invalid("measurements", "non-finite or negative value"));
            }
            by_step.entry(s.step).or_insert(s.gps_pos);
        }
        let pose_steps: Vec<usize> = by_step.keys().copied().collect();
        let index: BTreeMap<usize, usize> = pose_steps.iter().enumerate().map(|(i, &s)| (s, i)).collect();
        let gps = by_step
            .values()
            .enumerate()
            .map(|(pose, &pos)| GpsObs { pose, pos })
            .collect();
        let toa = samples
            .iter()
            .map(|s| ToaObs {
                pose: index[&s.step],
                user: s.user_id - 1,
                toa: s.toa,
            })
            .collect();
        Ok(Self {
            num_poses: pose_steps.len(),
            num_users,
            pose_steps,
            gps,
            toa,
            sigma_gps,
            noise,
        })
    }

    pub fn dim(&self) -> usize {
        3 * self.num_poses + 2 * self.num_users
    }

    /// UAV poses at their GPS fixes, users uniform over `[lo, hi]`.
    pub fn initial_state(&self, lo: Vec2, hi: Vec2, rng: &mut RngStream) -> StateVector {
        let mut uav = vec![Vec3::default(); self.num_poses];
        for g in &self.gps {
            uav[g.pose] = g.pos;
        }
        let users = (0..self.num_users)
            .map(|_| Vec2::new(rng.uniform(lo.x, hi.x), rng.uniform(lo.y, hi.y)))
            .collect();
        StateVector { uav, users }
    }

    /// Horizontal bounding box of the GPS track.
    pub fn gps_bounds(&self) -> (Vec2, Vec2) {
        let mut lo = Vec2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Vec2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for g in &self.gps {
            lo = Vec2::new(lo.x.min(g.pos.x), lo.y.min(g.pos.y));
            hi = Vec2::new(hi.x.max(g.pos.x), hi.y.max(g.pos.y));
        }
        (lo, hi)
    }

    /// Fixed ToA weights: the noise model evaluated at the measured range.
    fn fixed_toa_sigma(&self, obs: &ToaObs) -> f64 {
        sigma_tau_of_distance(obs.toa * SPEED_OF_LIGHT, &self.noise)
    }

    /// Error terms for the current state under the solver's weighting mode.
    pub fn error_terms(&self, state: &StateVector, cfg: &SolverConfig) -> Vec<ErrorTerm> {
        let w_gps = 1.0 / (self.sigma_gps * self.sigma_gps);
        let mut terms: Vec<ErrorTerm> = self
            .gps
            .iter()
            .map(|g| ErrorTerm::Gps {
                pose: g.pose,
                measured: g.pos,
                weight: w_gps,
            })
            .collect();
        for obs in &self.toa {
            let sigma = if cfg.heteroscedastic {
                let d = state.uav[obs.pose].distance(state.users[obs.user].lift());
                sigma_tau_of_distance(d, &self.noise)
            } else {
                self.fixed_toa_sigma(obs)
            };
            let mut weight = 1.0 / (sigma * sigma);
            if let Some(k) = cfg.huber {
                let r = toa_residual(state, obs).abs() / sigma;
                if r > k {
                    weight *= k / r;
                }
            }
            terms.push(ErrorTerm::Toa {
                pose: obs.pose,
                user: obs.user,
                toa: obs.toa,
                weight,
            });
        }
        terms
    }

    /// Warns about users that cannot be localized from the data.
    pub fn check_identifiability(&self) {
        for k in 0..self.num_users {
            let pts: Vec<Vec2> = self
                .toa
                .iter()
                .filter(|o| o.user == k)
                .map(|o| self.gps[o.pose].pos.horizontal())
                .collect();
            if pts.len() < 3 {
                warn!("user {} has only {} ToA measurements", k + 1, pts.len());
            } else if horizontally_collinear(&pts) {
                warn!("user {} is observed from collinear UAV positions only", k + 1);
            }
        }
    }
}

fn horizontally_collinear(pts: &[Vec2]) -> bool {
    let a = pts[0];
    let Some(b) = pts.iter().copied().max_by(|p, q| {
        p.distance(a).partial_cmp(&q.distance(a)).unwrap_or(std::cmp::Ordering::Equal)
    }) else {
        return true;
    };
    let span = b.distance(a);
    if span == 0.0 {
        return true;
    }
    pts.iter().all(|p| {
        let cross = (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x);
        (cross / span).abs() < 1e-6
    })
}

fn toa_residual(state: &StateVector, obs: &ToaObs) -> f64 {
    let d = state.uav[obs.pose].distance(state.users[obs.user].lift());
    obs.toa - d / SPEED_OF_LIGHT
}

/// One factor of the least-squares objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ErrorTerm {
    /// `e = measured - x[pose]`, 3 residuals.
    Gps { pose: usize, measured: Vec3, weight: f64 },
    /// `e = toa - |x[pose] - u[user]| / C`, 1 residual.
    Toa { pose: usize, user: usize, toa: f64, weight: f64 },
}

impl ErrorTerm {
    pub fn weight(&self) -> f64 {
        match *self {
            ErrorTerm::Gps { weight, .. } | ErrorTerm::Toa { weight, .. } => weight,
        }
    }

    pub fn residual_dim(&self) -> usize {
        match self {
            ErrorTerm::Gps { .. } => 3,
            ErrorTerm::Toa { .. } => 1,
        }
    }

    /// Global state indices touched by this term, in Jacobian column order.
    pub fn indices(&self, num_poses: usize) -> Vec<usize> {
        match *self {
            ErrorTerm::Gps { pose, .. } => vec![3 * pose, 3 * pose + 1, 3 * pose + 2],
            ErrorTerm::Toa { pose, user, .. } => {
                let u = 3 * num_poses + 2 * user;
                vec![3 * pose, 3 * pose + 1, 3 * pose + 2, u, u + 1]
            }
        }
    }

    pub fn residual(&self, state: &StateVector) -> DVector<f64> {
        match *self {
            ErrorTerm::Gps { pose, measured, .. } => {
                DVector::from_column_slice(&[
                    measured.x - state.uav[pose].x,
                    measured.y - state.uav[pose].y,
                    measured.z - state.uav[pose].z,
                ])
            }
            ErrorTerm::Toa { pose, user, toa, .. } => {
                let d = state.uav[pose].distance(state.users[user].lift());
                DVector::from_element(1, toa - d / SPEED_OF_LIGHT)
            }
        }
    }

    /// Jacobian of the residual w.r.t. the touched indices.
    pub fn jacobian(&self, state: &StateVector) -> Result<DMatrix<f64>> {
        match *self {
            ErrorTerm::Gps { .. } => Ok(-DMatrix::identity(3, 3)),
            ErrorTerm::Toa { pose, user, .. } => {
                let row = toa_jacobian_row(state.uav[pose], state.users[user])?;
                Ok(DMatrix::from_row_slice(1, 5, &row))
            }
        }
    }
}

/// Partials of `r = toa - |x - u| / C` w.r.t. `(x, y, z, u_x, u_y)`.
pub fn toa_jacobian_row(uav: Vec3, user: Vec2) -> Result<[f64; 5]> {
    let dx = uav.x - user.x;
    let dy = uav.y - user.y;
    let dz = uav.z;
    let d = (dx * dx + dy * dy + dz * dz).sqrt();
    if d == 0.0 {
        return Err(Error::DegenerateGeometry);
    }
    let s = 1.0 / (SPEED_OF_LIGHT * d);
    Ok([-dx * s, -dy * s, -dz * s, dx * s, dy * s])
}

/// Weighted sum of squared residuals.
pub fn objective(state: &StateVector, problem: &SlamProblem) -> f64 {
    let cfg = SolverConfig::default();
    weighted_objective(state, &problem.error_terms(state, &cfg))
}

/// Objective with the weights frozen in `terms`.
pub fn weighted_objective(state: &StateVector, terms: &[ErrorTerm]) -> f64 {
    terms
        .iter()
        .map(|t| t.weight() * t.residual(state).norm_squared())
        .sum()
}

/// Dense normal equations `(H + lambda I) dx = -b`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalEquations {
    pub h: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lambda: f64,
}

pub fn assemble_normal_equations(state: &StateVector, terms: &[ErrorTerm]) -> Result<NormalEquations> {
    let n = state.dim();
    let p = state.uav.len();
    let mut h = DMatrix::zeros(n, n);
    let mut b = DVector::zeros(n);
    for t in terms {
        let idx = t.indices(p);
        let j = t.jacobian(state)?;
        let e = t.residual(state);
        let w = t.weight();
        let jtj = j.transpose() * &j * w;
        let jte = j.transpose() * e * w;
        for (a, &ia) in idx.iter().enumerate() {
            b[ia] += jte[a];
            for (c, &ic) in idx.iter().enumerate() {
                h[(ia, ic)] += jtj[(a, c)];
            }
        }
    }
    Ok(NormalEquations { h, b, lambda: 0.0 })
}

/// Solves `(H + lambda I) dx = -b` by Cholesky.
pub fn gauss_newton_step(ne: &NormalEquations) -> Result<DVector<f64>> {
    let n = ne.h.nrows();
    let damped = &ne.h + DMatrix::identity(n, n) * ne.lambda;
    let chol = Cholesky::new(damped).ok_or(Error::SingularSystem)?;
    Ok(chol.solve(&(-&ne.b)))
}

/// Normal equations kept in pose/user block form.
#[derive(Debug, Clone)]
struct BlockSystem {
    pose_h: Vec<Matrix3<f64>>,
    pose_b: Vec<Vector3<f64>>,
    /// Per pose: (user, coupling block H[pose, user]), users ascending.
    coupling: Vec<Vec<(usize, Matrix3x2<f64>)>>,
    user_h: Vec<Matrix2<f64>>,
    user_b: Vec<Vector2<f64>>,
}

impl BlockSystem {
    fn assemble(state: &StateVector, terms: &[ErrorTerm]) -> Result<Self> {
        let p = state.uav.len();
        let k = state.users.len();
        let mut sys = BlockSystem {
            pose_h: vec![Matrix3::zeros(); p],
            pose_b: vec![Vector3::zeros(); p],
            coupling: vec![Vec::new(); p],
            user_h: vec![Matrix2::zeros(); k],
            user_b: vec![Vector2::zeros(); k],
        };
        for t in terms {
            match *t {
                ErrorTerm::Gps { pose, measured, weight } => {
                    // J = -I
                    let x = state.uav[pose];
                    sys.pose_h[pose] += Matrix3::identity() * weight;
                    sys.pose_b[pose] -= Vector3::new(measured.x - x.x, measured.y - x.y, measured.z - x.z) * weight;
                }
                ErrorTerm::Toa { pose, user, toa, weight } => {
                    let j = toa_jacobian_row(state.uav[pose], state.users[user])?;
                    let jx = Vector3::new(j[0], j[1], j[2]);
                    let ju = Vector2::new(j[3], j[4]);
                    let d = state.uav[pose].distance(state.users[user].lift());
                    let e = toa - d / SPEED_OF_LIGHT;
                    sys.pose_h[pose] += jx * jx.transpose() * weight;
                    sys.pose_b[pose] += jx * (e * weight);
                    sys.user_h[user] += ju * ju.transpose() * weight;
                    sys.user_b[user] += ju * (e * weight);
                    let c = jx * ju.transpose() * weight;
                    let row = &mut sys.coupling[pose];
                    match row.binary_search_by_key(&user, |(u, _)| *u) {
                        Ok(i) => row[i].1 += c,
                        Err(i) => row.insert(i, (user, c)),
                    }
                }
            }
        }
        Ok(sys)
    }

    /// Damped solve via the user-block Schur complement.
    fn solve(&self, lambda: f64, num_users: usize) -> Option<DVector<f64>> {
        let p = self.pose_h.len();
        let k = num_users;
        let mut s = DMatrix::zeros(2 * k, 2 * k);
        let mut rhs = DVector::zeros(2 * k);
        for (u, (hu, bu)) in self.user_h.iter().zip(&self.user_b).enumerate() {
            let damped = hu + Matrix2::identity() * lambda;
            s.fixed_view_mut::<2, 2>(2 * u, 2 * u).copy_from(&damped);
            rhs.fixed_rows_mut::<2>(2 * u).copy_from(&(-bu));
        }
        let mut pose_inv = Vec::with_capacity(p);
        for i in 0..p {
            let a = self.pose_h[i] + Matrix3::identity() * lambda;
            let inv = a.cholesky()?.inverse();
            let row = &self.coupling[i];
            for &(ua, ca) in row {
                let cta = ca.transpose() * inv;
                let upd = cta * self.pose_b[i];
                let mut r = rhs.fixed_rows_mut::<2>(2 * ua);
                r += upd;
                for &(ub, cb) in row {
                    let blk = cta * cb;
                    let mut v = s.fixed_view_mut::<2, 2>(2 * ua, 2 * ub);
                    v -= blk;
                }
            }
            pose_inv.push(inv);
        }
        let du = if k > 0 {
            Cholesky::new(s)?.solve(&rhs)
        } else {
            DVector::zeros(0)
        };
        let mut dx = DVector::zeros(3 * p + 2 * k);
        for i in 0..p {
            let mut r = -self.pose_b[i];
            for &(u, c) in &self.coupling[i] {
                r -= c * Vector2::new(du[2 * u], du[2 * u + 1]);
            }
            dx.fixed_rows_mut::<3>(3 * i).copy_from(&(pose_inv[i] * r));
        }
        dx.rows_mut(3 * p, 2 * k).copy_from(&du);
        Some(dx)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LinearSolver {
    /// Eliminate pose blocks, factor the user Schur complement.
    #[default]
    Schur,
    /// Cholesky of the full `(3P + 2K)^2` system.
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub max_iter: usize,
    pub tol_step: f64,
    pub lambda_init: f64,
    pub lambda_max: f64,
    /// Re-evaluate ToA sigmas at the current estimated distances.
    pub heteroscedastic: bool,
    /// Huber threshold in units of sigma for ToA residuals.
    pub huber: Option<f64>,
    pub linear: LinearSolver,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            max_iter: 100,
            tol_step: 1e-6,
            lambda_init: 1e-4,
            lambda_max: 1e8,
            heteroscedastic: false,
            huber: None,
            linear: LinearSolver::Schur,
        }
    }
}

impl SolverConfig {
    fn reweights(&self) -> bool {
        self.heteroscedastic || self.huber.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    /// Number of linearizations (accepted and rejected steps).
    pub iterations: usize,
    /// Objective after every accepted step, starting with the initial value.
    pub objective_trace: Vec<f64>,
    pub converged: bool,
    pub final_step_norm: f64,
}

/// Minimizes the objective from `init`.
///
/// Levenberg-Marquardt: lambda is divided by 10 after an accepted step and
/// multiplied by 10 after a rejected one. Stops once a step shorter than
/// `tol_step` is produced. With reweighting enabled the weights are refreshed
/// after each accepted step, so the trace is only monotone between refreshes.
pub fn solve_slam(
    init: StateVector,
    problem: &SlamProblem,
    cfg: &SolverConfig,
) -> Result<(StateVector, SolveReport)> {
    if problem.gps.is_empty() && problem.toa.is_empty() {
        return Err(Error::invalid("measurements", "empty measurement set"));
    }
    if init.uav.len() != problem.num_poses || init.users.len() != problem.num_users {
        return Err(Error::invalid("init", "state dimension does not match the problem"));
    }
    problem.check_identifiability();

    let mut state = init;
    let mut lambda = cfg.lambda_init;
    let mut terms = problem.error_terms(&state, cfg);
    let mut obj = weighted_objective(&state, &terms);
    let mut report = SolveReport {
        iterations: 0,
        objective_trace: vec![obj],
        converged: false,
        final_step_norm: f64::INFINITY,
    };

    while report.iterations < cfg.max_iter {
        report.iterations += 1;
        let step = damped_step(&state, &terms, &mut lambda, cfg)?;
        let norm = step.norm();
        report.final_step_norm = norm;
        let candidate = state.plus(&step);
        let cand_obj = if candidate.is_finite() {
            weighted_objective(&candidate, &terms)
        } else {
            f64::INFINITY
        };
        if cand_obj <= obj {
            state = candidate;
            lambda = (lambda / 10.0).max(1e-15);
            if cfg.reweights() {
                terms = problem.error_terms(&state, cfg);
                obj = weighted_objective(&state, &terms);
            } else {
                obj = cand_obj;
            }
            report.objective_trace.push(obj);
            if norm < cfg.tol_step {
                report.converged = true;
                break;
            }
        } else {
            if norm < cfg.tol_step {
                // cannot improve any further at this resolution
                report.converged = true;
                break;
            }
            lambda *= 10.0;
            if lambda > cfg.lambda_max {
                break;
            }
        }
    }

    if report.converged {
        Ok((state, report))
    } else {
        Err(Error::NotConverged {
            state: Box::new(state),
            report,
        })
    }
}

/// Linear solve at the current damping, raising lambda until the damped
/// system factors.
fn damped_step(
    state: &StateVector,
    terms: &[ErrorTerm],
    lambda: &mut f64,
    cfg: &SolverConfig,
) -> Result<DVector<f64>> {
    match cfg.linear {
        LinearSolver::Schur => {
            let sys = BlockSystem::assemble(state, terms)?;
            loop {
                if let Some(dx) = sys.solve(*lambda, state.users.len()) {
                    return Ok(dx);
                }
                *lambda *= 10.0;
                if *lambda > cfg.lambda_max {
                    return Err(Error::SingularSystem);
                }
            }
        }
        LinearSolver::Dense => {
            let mut ne = assemble_normal_equations(state, terms)?;
            loop {
                ne.lambda = *lambda;
                match gauss_newton_step(&ne) {
                    Ok(dx) => return Ok(dx),
                    Err(_) => {
                        *lambda *= 10.0;
                        if *lambda > cfg.lambda_max {
                            return Err(Error::SingularSystem);
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const C: f64 = SPEED_OF_LIGHT;

    fn sample(step: usize, user_id: usize, gps: Vec3, toa: f64) -> MeasurementSample {
        MeasurementSample {
            step,
            user_id,
            gps_pos: gps,
            toa,
        }
    }

    fn circle_problem(n: usize, users: &[Vec2], sigma_tau: f64) -> (SlamProblem, StateVector) {
        let uav: Vec<Vec3> = (0..n)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / n as f64;
                Vec3::new(50.0 * a.cos(), 50.0 * a.sin(), 30.0)
            })
            .collect();
        let mut samples = Vec::new();
        for (i, &x) in uav.iter().enumerate() {
            for (k, &u) in users.iter().enumerate() {
                samples.push(sample(i + 1, k + 1, x, x.distance(u.lift()) / C));
            }
        }
        let problem =
            SlamProblem::from_samples(&samples, users.len(), 1.0, ToaNoiseModel::constant(sigma_tau)).unwrap();
        (problem, StateVector::new(uav, users.to_vec()))
    }

    #[test]
    fn objective_zero_at_truth() {
        let (problem, truth) = circle_problem(12, &[Vec2::new(3.0, -4.0)], 1e-9);
        assert_eq!(objective(&truth, &problem), 0.0);
    }

    #[test]
    fn objective_single_gps_unit() {
        let gps = Vec3::new(1.0, 0.0, 0.0);
        let problem = SlamProblem {
            num_poses: 1,
            num_users: 0,
            pose_steps: vec![1],
            gps: vec![GpsObs { pose: 0, pos: gps }],
            toa: vec![],
            sigma_gps: 1.0,
            noise: ToaNoiseModel::constant(1e-9),
        };
        let state = StateVector::new(vec![Vec3::default()], vec![]);
        assert_eq!(objective(&state, &problem), 1.0);
    }

    #[test]
    fn objective_single_toa() {
        let uav = Vec3::new(0.0, 0.0, 30.0);
        let sigma = 1e-8;
        let terms = [ErrorTerm::Toa {
            pose: 0,
            user: 0,
            toa: 50.0 / C,
            weight: 1.0 / (sigma * sigma),
        }];
        let state = StateVector::new(vec![uav], vec![Vec2::new(0.0, 43.0)]);
        let d = 2749.0_f64.sqrt();
        assert!((d - 52.4309).abs() < 1e-4);
        let r = (50.0 - d) / C;
        let expected = r * r / (sigma * sigma);
        let got = weighted_objective(&state, &terms);
        assert!((got - expected).abs() <= 1e-12 * expected);
    }

    /// Central differences of the scalar residual, h = 1e-4 m.
    fn fd_row(uav: Vec3, user: Vec2) -> [f64; 5] {
        let h = 1e-4;
        let r = |x: Vec3, u: Vec2| -x.distance(u.lift()) / C;
        let mut out = [0.0; 5];
        for i in 0..5 {
            let (mut xp, mut xm, mut up, mut um) = (uav, uav, user, user);
            match i {
                0 => { xp.x += h; xm.x -= h; }
                1 => { xp.y += h; xm.y -= h; }
                2 => { xp.z += h; xm.z -= h; }
                3 => { up.x += h; um.x -= h; }
                _ => { up.y += h; um.y -= h; }
            }
            out[i] = (r(xp, up) - r(xm, um)) / (2.0 * h);
        }
        out
    }

    #[test]
    fn jacobian_examples() {
        let j = toa_jacobian_row(Vec3::new(50.0, 0.0, 0.0), Vec2::new(0.0, 0.0)).unwrap();
        assert!((j[3] - 1.0 / C).abs() < 1e-22);
        assert!((j[3] - 3.3356e-9).abs() < 1e-13);
        assert_eq!(j[4], 0.0);
        let fd = fd_row(Vec3::new(50.0, 0.0, 0.0), Vec2::new(0.0, 0.0));
        assert!((fd[3] - j[3]).abs() < 1e-6 * j[3].abs());

        let j = toa_jacobian_row(Vec3::new(0.0, 0.0, 30.0), Vec2::new(0.0, 40.0)).unwrap();
        let expected = (0.0 - 40.0) / (C * 50.0);
        assert!((j[4] - expected).abs() < 1e-22);
        assert!((j[4] - -2.668e-9).abs() < 1e-12);
        let fd = fd_row(Vec3::new(0.0, 0.0, 30.0), Vec2::new(0.0, 40.0));
        assert!((fd[4] - j[4]).abs() < 1e-6 * j[4].abs());

        // swapping x and y swaps the partials
        let a = toa_jacobian_row(Vec3::new(7.0, -3.0, 20.0), Vec2::new(1.0, 2.0)).unwrap();
        let b = toa_jacobian_row(Vec3::new(-3.0, 7.0, 20.0), Vec2::new(2.0, 1.0)).unwrap();
        assert_eq!([a[0], a[1], a[2], a[3], a[4]], [b[1], b[0], b[2], b[4], b[3]]);

        assert!(toa_jacobian_row(Vec3::new(1.0, 1.0, 0.0), Vec2::new(1.0, 1.0)).is_err());
    }

    #[test]
    fn gps_only_normal_equations_block_diagonal() {
        let state = StateVector::new(vec![Vec3::default(); 3], vec![Vec2::default()]);
        let sigma = 2.0;
        let terms: Vec<ErrorTerm> = (0..3)
            .map(|p| ErrorTerm::Gps {
                pose: p,
                measured: Vec3::new(p as f64, 1.0, -1.0),
                weight: 1.0 / (sigma * sigma),
            })
            .collect();
        let ne = assemble_normal_equations(&state, &terms).unwrap();
        let mut expected = DMatrix::zeros(11, 11);
        for i in 0..9 {
            expected[(i, i)] = 0.25;
        }
        assert_eq!(ne.h, expected);
        // exact Newton: each pose jumps onto its fix
        let mut damped = ne.clone();
        damped.h[(9, 9)] = 1.0;
        damped.h[(10, 10)] = 1.0;
        let dx = gauss_newton_step(&damped).unwrap();
        let next = state.plus(&dx);
        for p in 0..3 {
            assert!(next.uav[p].distance(Vec3::new(p as f64, 1.0, -1.0)) < 1e-14);
        }
    }

    #[test]
    fn single_toa_term_is_rank_one_outer_product() {
        let state = StateVector::new(vec![Vec3::new(10.0, 5.0, 30.0)], vec![Vec2::new(-3.0, 8.0)]);
        let sigma = 3e-9;
        let terms = [ErrorTerm::Toa { pose: 0, user: 0, toa: 1e-7, weight: 1.0 / (sigma * sigma) }];
        let ne = assemble_normal_equations(&state, &terms).unwrap();
        let j = toa_jacobian_row(state.uav[0], state.users[0]).unwrap();
        let jv = DVector::from_column_slice(&j);
        let outer = &jv * jv.transpose() / (sigma * sigma);
        assert!((&ne.h - &outer).norm() <= 1e-12 * outer.norm());
        let sv = ne.h.clone().svd(false, false).singular_values;
        let nonzero = sv.iter().filter(|&&s| s > 1e-10 * sv.max()).count();
        assert_eq!(nonzero, 1);
    }

    #[test]
    fn step_zero_gradient() {
        let ne = NormalEquations {
            h: DMatrix::identity(4, 4) * 3.0,
            b: DVector::zeros(4),
            lambda: 0.0,
        };
        assert_eq!(gauss_newton_step(&ne).unwrap(), DVector::zeros(4));
    }

    #[test]
    fn step_random_spd_residual() {
        let mut rng = RngStream::new(4);
        for trial in 0..20 {
            let n = 5 + trial;
            let a = DMatrix::from_fn(n, n, |_, _| rng.standard_normal());
            let h = &a * a.transpose();
            let b = DVector::from_fn(n, |_, _| rng.standard_normal());
            let ne = NormalEquations { h: h.clone(), b: b.clone(), lambda: 1e-3 };
            let dx = gauss_newton_step(&ne).unwrap();
            let res = (&h + DMatrix::identity(n, n) * 1e-3) * &dx + &b;
            assert!(res.norm() / b.norm() <= 1e-10, "trial {trial}: {}", res.norm() / b.norm());
        }
    }

    #[test]
    fn singular_dense_system_reported() {
        let ne = NormalEquations { h: DMatrix::zeros(2, 2), b: DVector::zeros(2), lambda: 0.0 };
        assert!(matches!(gauss_newton_step(&ne), Err(Error::SingularSystem)));
    }

    #[test]
    fn schur_matches_dense() {
        let users = [Vec2::new(3.0, -4.0), Vec2::new(-20.0, 10.0)];
        let (problem, truth) = circle_problem(9, &users, 5e-9);
        let mut rng = RngStream::new(8);
        let mut state = truth.clone();
        for x in &mut state.uav {
            x.x += rng.uniform(-1.0, 1.0);
            x.z += rng.uniform(-1.0, 1.0);
        }
        state.users[0].x += 4.0;
        state.users[1].y -= 3.0;
        let cfg = SolverConfig::default();
        let terms = problem.error_terms(&state, &cfg);
        let sys = BlockSystem::assemble(&state, &terms).unwrap();
        let mut ne = assemble_normal_equations(&state, &terms).unwrap();
        for lambda in [0.0, 1e-4, 1.0] {
            ne.lambda = lambda;
            let dense = gauss_newton_step(&ne).unwrap();
            let schur = sys.solve(lambda, 2).unwrap();
            assert!((&dense - &schur).norm() <= 1e-9 * dense.norm(), "lambda {lambda}");
        }
    }

    #[test]
    fn noiseless_recovery_from_perturbed_init() {
        let users = [Vec2::new(3.0, -4.0), Vec2::new(-20.0, 10.0)];
        let (problem, truth) = circle_problem(20, &users, 5e-9);
        let mut rng = RngStream::new(21);
        let mut init = truth.clone();
        for x in &mut init.uav {
            *x = Vec3::new(x.x + rng.uniform(-1.0, 1.0), x.y + rng.uniform(-1.0, 1.0), x.z + rng.uniform(-1.0, 1.0));
        }
        for u in &mut init.users {
            *u = Vec2::new(u.x + rng.uniform(-1.0, 1.0), u.y + rng.uniform(-1.0, 1.0));
        }
        for linear in [LinearSolver::Schur, LinearSolver::Dense] {
            let cfg = SolverConfig { linear, ..Default::default() };
            let (est, report) = solve_slam(init.clone(), &problem, &cfg).unwrap();
            assert!(report.converged);
            for (a, b) in est.uav.iter().zip(&truth.uav) {
                assert!(a.distance(*b) < 1e-6);
            }
            for (a, b) in est.users.iter().zip(&truth.users) {
                assert!(a.distance(*b) < 1e-6);
            }
            for w in report.objective_trace.windows(2) {
                assert!(w[1] <= w[0]);
            }
        }
    }

    #[test]
    fn mismatched_init_rejected() {
        let (problem, truth) = circle_problem(5, &[Vec2::new(0.0, 1.0)], 1e-9);
        let mut bad = truth;
        bad.users.push(Vec2::default());
        assert!(matches!(
            solve_slam(bad, &problem, &SolverConfig::default()),
            Err(Error::InvalidParam { .. })
        ));
    }

    #[test]
    fn reweighting_modes_still_recover_noiseless_truth() {
        let users = [Vec2::new(5.0, 5.0)];
        let (mut problem, truth) = circle_problem(16, &users, 5e-9);
        problem.noise = ToaNoiseModel::exponential(3e-9, 1e-9, 80.0);
        let mut init = truth.clone();
        init.users[0] = Vec2::new(0.0, 0.0);
        let cfg = SolverConfig { heteroscedastic: true, huber: Some(2.0), ..Default::default() };
        let (est, _) = solve_slam(init, &problem, &cfg).unwrap();
        assert!(est.users[0].distance(users[0]) < 1e-6);
    }

    #[test]
    fn from_samples_groups_by_step() {
        let g1 = Vec3::new(0.0, 0.0, 30.0);
        let g2 = Vec3::new(2.0, 0.0, 30.0);
        let samples = [sample(3, 1, g1, 1e-7), sample(3, 2, g1, 2e-7), sample(7, 1, g2, 1.5e-7)];
        let p = SlamProblem::from_samples(&samples, 2, 1.0, ToaNoiseModel::default()).unwrap();
        assert_eq!(p.num_poses, 2);
        assert_eq!(p.pose_steps, vec![3, 7]);
        assert_eq!(p.gps.len(), 2);
        assert_eq!(p.toa[2], ToaObs { pose: 1, user: 0, toa: 1.5e-7 });
        assert!(SlamProblem::from_samples(&samples, 1, 1.0, ToaNoiseModel::default()).is_err());
        assert!(SlamProblem::from_samples(&[], 1, 1.0, ToaNoiseModel::default()).is_err());
    }

    proptest! {
        #[test]
        fn analytic_jacobian_matches_fd(
            ax in -100.0..100.0f64, ay in -100.0..100.0f64, az in 5.0..100.0f64,
            ux in -100.0..100.0f64, uy in -100.0..100.0f64,
        ) {
            let uav = Vec3::new(ax, ay, az);
            let user = Vec2::new(ux, uy);
            let j = toa_jacobian_row(uav, user).unwrap();
            let fd = fd_row(uav, user);
            let norm = j.iter().map(|v| v * v).sum::<f64>().sqrt();
            for i in 0..5 {
                prop_assert!((j[i] - fd[i]).abs() <= 1e-6 * norm);
            }
        }

        #[test]
        fn hessian_is_psd(seed in any::<u64>()) {
            let mut rng = RngStream::new(seed);
            let users: Vec<Vec2> = (0..2).map(|_| Vec2::new(rng.uniform(-50.0, 50.0), rng.uniform(-50.0, 50.0))).collect();
            let (problem, mut state) = circle_problem(6, &users, 1e-8);
            for u in &mut state.users { u.x += rng.uniform(-5.0, 5.0); }
            let terms = problem.error_terms(&state, &SolverConfig::default());
            let ne = assemble_normal_equations(&state, &terms).unwrap();
            prop_assert!((&ne.h - ne.h.transpose()).norm() <= 1e-12 * ne.h.norm());
            for _ in 0..100 {
                let x = DVector::from_fn(ne.h.nrows(), |_, _| rng.standard_normal());
                prop_assert!((x.transpose() * &ne.h * &x)[0] >= -1e-12 * ne.h.norm() * x.norm_squared());
            }
        }
    }
}
