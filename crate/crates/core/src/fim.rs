//! Fisher information over user positions and the resulting CRB.
//!
//! Each ToA sample of user `k` adds the rank-one block
//! `g g^T / sigma^2`, `g = (x_xy - u_k) / (C d)`, to the `2x2` diagonal block
//! of user `k`. The information accumulates over the mission; the inverse is
//! tracked with the matrix inversion lemma so each step costs `O(K^2)` per
//! user instead of a full re-inversion.

use nalgebra::{DMatrix, Matrix2, SymmetricEigen};

use crate::channel::sigma_tau_of_distance;
use crate::error::{Error, Result};
use crate::model::{ToaNoiseModel, Vec2, Vec3, SPEED_OF_LIGHT};

/// Default diagonal prior (m^-2) that keeps early-mission FIMs invertible.
pub const DEFAULT_EPS_PRIOR: f64 = 1e-6;

/// Information contributed by a single ToA sample about one user.
pub fn toa_info_contribution(uav: Vec3, user_est: Vec2, sigma_tau: f64) -> Result<Matrix2<f64>> {
    let dx = uav.x - user_est.x;
    let dy = uav.y - user_est.y;
    let d = (dx * dx + dy * dy + uav.z * uav.z).sqrt();
    if d == 0.0 {
        return Err(Error::DegenerateGeometry);
    }
    let s = 1.0 / (SPEED_OF_LIGHT * d);
    let g = nalgebra::Vector2::new(dx * s, dy * s);
    Ok(g * g.transpose() / (sigma_tau * sigma_tau))
}

/// Per-user information blocks gathered at one mission step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepContribution {
    pub blocks: Vec<Matrix2<f64>>,
}

impl StepContribution {
    pub fn zeros(num_users: usize) -> Self {
        Self {
            blocks: vec![Matrix2::zeros(); num_users],
        }
    }

    /// Contributions of one UAV position towards every user estimate, with
    /// the noise model evaluated at each link distance.
    pub fn at(uav: Vec3, users: &[Vec2], noise: &ToaNoiseModel) -> Result<Self> {
        let blocks = users
            .iter()
            .map(|&u| {
                let d = uav.distance(u.lift());
                toa_info_contribution(uav, u, sigma_tau_of_distance(d, noise))
            })
            .collect::<Result<_>>()?;
        Ok(Self { blocks })
    }

    pub fn num_users(&self) -> usize {
        self.blocks.len()
    }
}

/// Cumulative FIM over the `2K` user coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct InfoState {
    pub step: usize,
    fim: DMatrix<f64>,
    /// `(F + eps I)^-1`, present whenever that matrix is invertible.
    inv: Option<DMatrix<f64>>,
    pub eps_prior: f64,
}

impl InfoState {
    pub fn new(num_users: usize, eps_prior: f64) -> Self {
        let n = 2 * num_users;
        let inv = (eps_prior > 0.0).then(|| DMatrix::identity(n, n) / eps_prior);
        Self {
            step: 0,
            fim: DMatrix::zeros(n, n),
            inv,
            eps_prior,
        }
    }

    pub fn num_users(&self) -> usize {
        self.fim.nrows() / 2
    }

    /// The accumulated FIM without the prior.
    pub fn fim(&self) -> &DMatrix<f64> {
        &self.fim
    }

    /// `(F + eps I)^-1`, or `SingularFim`.
    pub fn inverse(&self) -> Result<&DMatrix<f64>> {
        self.inv.as_ref().ok_or(Error::SingularFim)
    }

    fn regularized(&self) -> DMatrix<f64> {
        let n = self.fim.nrows();
        &self.fim + DMatrix::identity(n, n) * self.eps_prior
    }
}

/// Inverts a symmetric matrix, refusing numerically rank-deficient input.
pub fn checked_spd_inverse(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if m.nrows() == 0 {
        return Ok(m.clone());
    }
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0_f64, |a, &v| a.max(v.abs()));
    let min = eig.eigenvalues.min();
    if !(max > 0.0) || min <= 1e-12 * max {
        return Err(Error::SingularFim);
    }
    let inv_diag = eig.eigenvalues.map(|v| 1.0 / v);
    let q = &eig.eigenvectors;
    let inv = q * DMatrix::from_diagonal(&inv_diag) * q.transpose();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// Adds one step of contributions.
pub fn accumulate(info: &InfoState, contribs: &StepContribution) -> Result<InfoState> {
    if contribs.num_users() != info.num_users() {
        return Err(Error::invalid("contribs", "user count does not match the FIM"));
    }
    let mut next = info.clone();
    for (k, blk) in contribs.blocks.iter().enumerate() {
        let mut v = next.fim.fixed_view_mut::<2, 2>(2 * k, 2 * k);
        v += blk;
    }
    next.step += 1;
    next.inv = match &info.inv {
        Some(p) => Some(direct_if_accurate(&next).unwrap_or_else(|| downdate_inverse(p, contribs).0)),
        None => checked_spd_inverse(&next.regularized()).ok(),
    };
    Ok(next)
}

/// Direct inverse of `F + eps I`, taken only when its rounding error
/// (`~ u lmax / lmin^2`) beats that of the recursion, which is bounded by the
/// prior scale (`~ u / eps`). Early on the prior dominates and the recursion
/// wins; once every direction is well observed the direct inverse resolves
/// CRBs far below anything the prior-scaled recursion can represent.
fn direct_if_accurate(info: &InfoState) -> Option<DMatrix<f64>> {
    let m = info.regularized();
    let eig = SymmetricEigen::new(m);
    let min = eig.eigenvalues.min();
    let max = eig.eigenvalues.max();
    if !(min > 0.0) || max * info.eps_prior > min * min {
        return None;
    }
    let inv_diag = eig.eigenvalues.map(|v| 1.0 / v);
    let q = &eig.eigenvectors;
    let inv = q * DMatrix::from_diagonal(&inv_diag) * q.transpose();
    Some((&inv + inv.transpose()) * 0.5)
}

/// `(P^-1 + sum_k E_k H_k E_k^T)^-1` by one inversion-lemma step per user:
/// `P' = P - P E (I + H S)^-1 H E^T P`, `S = E^T P E`. Never inverts `H`.
///
/// Returns the new inverse and the summed downdates `P - P'`. The downdate is
/// formed as `W W^T`, so it stays PSD; the new inverse is propagated with
/// rank-one updates in Joseph form, which keeps it PSD even when the
/// information dwarfs the prior and plain subtraction would cancel.
fn downdate_inverse(p: &DMatrix<f64>, contribs: &StepContribution) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = p.nrows();
    let mut p = p.clone();
    let mut total = DMatrix::zeros(n, n);
    for (k, h) in contribs.blocks.iter().enumerate() {
        if h.iter().all(|&v| v == 0.0) {
            continue;
        }
        let cols = p.columns(2 * k, 2).into_owned(); // P E, n x 2
        let s: Matrix2<f64> = p.fixed_view::<2, 2>(2 * k, 2 * k).into_owned();
        // (I + H S)^-1 H = B (I + B S B)^-1 B with B = H^(1/2); the right-hand
        // side is PSD by construction even when I + H S is ill-conditioned
        let b = psd_sqrt(h);
        let m = Matrix2::identity() + b * s * b;
        let Some(chol) = m.cholesky() else {
            continue;
        };
        // W = P E B R^-T with M = R R^T, so the downdate is W W^T
        let Some(r_inv) = chol.l().try_inverse() else {
            continue;
        };
        let f = b * r_inv.transpose();
        let f = DMatrix::from_iterator(2, 2, f.iter().copied());
        let w = &cols * f;
        total += &w * w.transpose();
        let e = h.symmetric_eigen();
        for i in 0..2 {
            let lam = e.eigenvalues[i];
            if lam > 0.0 {
                let a = e.eigenvectors.column(i) * lam.sqrt();
                joseph_update(&mut p, 2 * k, &a);
            }
        }
    }
    (p, total)
}

/// `P <- (P^-1 + e a a^T e^T)^-1` for `a` living in coordinates
/// `offset..offset + 2`, as `(I - K a^T) P (I - K a^T)^T + K K^T`.
fn joseph_update(p: &mut DMatrix<f64>, offset: usize, a: &nalgebra::Vector2<f64>) {
    let n = p.nrows();
    let pa = p.columns(offset, 2) * a;
    let s = 1.0 + a.dot(&pa.rows(offset, 2));
    let gain = pa / s;
    let mut m = DMatrix::identity(n, n);
    for r in 0..n {
        m[(r, offset)] -= gain[r] * a[0];
        m[(r, offset + 1)] -= gain[r] * a[1];
    }
    let mut next = &m * &*p * m.transpose() + &gain * gain.transpose();
    for i in 0..n {
        for j in 0..i {
            let v = 0.5 * (next[(i, j)] + next[(j, i)]);
            next[(i, j)] = v;
            next[(j, i)] = v;
        }
    }
    *p = next;
}

/// Symmetric square root of a PSD 2x2 matrix; negative rounding noise in the
/// eigenvalues is clamped to zero.
fn psd_sqrt(h: &Matrix2<f64>) -> Matrix2<f64> {
    let e = h.symmetric_eigen();
    let d = Matrix2::from_diagonal(&e.eigenvalues.map(|v| v.max(0.0).sqrt()));
    e.eigenvectors * d * e.eigenvectors.transpose()
}

/// Trace of `(F + eps I)^-1`, a lower bound on the summed squared position
/// error of any unbiased estimator.
pub fn crb_trace(info: &InfoState) -> Result<f64> {
    Ok(info.inverse()?.trace())
}

/// Information gain of one step: `R = F_prev^-1 - (F_prev + sum H)^-1`.
pub fn improvement_matrix(info: &InfoState, contribs: &StepContribution) -> Result<DMatrix<f64>> {
    let before = info.inverse()?;
    if contribs.num_users() != info.num_users() {
        return Err(Error::invalid("contribs", "user count does not match the FIM"));
    }
    Ok(downdate_inverse(before, contribs).1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::RngStream;

    const C: f64 = SPEED_OF_LIGHT;

    #[test]
    fn contribution_examples() {
        let h = toa_info_contribution(Vec3::new(50.0, 0.0, 0.0), Vec2::new(0.0, 0.0), 1e-9).unwrap();
        let expected = 1.0 / (1e-18 * C * C);
        assert!((h[(0, 0)] - expected).abs() <= 1e-12 * expected);
        assert!((h[(0, 0)] - 11.127).abs() < 1e-3);
        assert_eq!(h[(1, 1)], 0.0);
        assert_eq!(h[(0, 1)], 0.0);

        let overhead = toa_info_contribution(Vec3::new(4.0, 4.0, 30.0), Vec2::new(4.0, 4.0), 1e-9).unwrap();
        assert_eq!(overhead, Matrix2::zeros());
        assert!(toa_info_contribution(Vec3::new(1.0, 1.0, 0.0), Vec2::new(1.0, 1.0), 1e-9).is_err());
    }

    #[test]
    fn contribution_is_rank_one_psd() {
        let mut rng = RngStream::new(2);
        for _ in 0..100 {
            let uav = Vec3::new(rng.uniform(-100.0, 100.0), rng.uniform(-100.0, 100.0), rng.uniform(1.0, 80.0));
            let u = Vec2::new(rng.uniform(-100.0, 100.0), rng.uniform(-100.0, 100.0));
            let h = toa_info_contribution(uav, u, 1e-8).unwrap();
            assert_eq!(h[(0, 1)], h[(1, 0)]);
            assert!(h.determinant().abs() <= 1e-12 * h.norm_squared());
            assert!(h.trace() >= 0.0);
        }
    }

    #[test]
    fn accumulate_linearity_and_zero() {
        let info = InfoState::new(1, 1e-6);
        let zero = StepContribution::zeros(1);
        assert_eq!(accumulate(&info, &zero).unwrap().fim(), info.fim());
        let c = StepContribution::at(Vec3::new(30.0, 10.0, 20.0), &[Vec2::new(0.0, 0.0)], &ToaNoiseModel::constant(1e-9)).unwrap();
        let once = accumulate(&info, &c).unwrap();
        let twice = accumulate(&once, &c).unwrap();
        assert!((twice.fim() - once.fim() * 2.0).norm() <= 1e-15 * twice.fim().norm());
        assert!(accumulate(&info, &StepContribution::zeros(2)).is_err());
    }

    #[test]
    fn orthogonal_crb() {
        let sigma = 1e-9;
        let mut info = InfoState::new(1, 0.0);
        for uav in [Vec3::new(50.0, 0.0, 0.0), Vec3::new(0.0, 50.0, 0.0)] {
            let c = StepContribution {
                blocks: vec![toa_info_contribution(uav, Vec2::new(0.0, 0.0), sigma).unwrap()],
            };
            info = accumulate(&info, &c).unwrap();
        }
        let expected = 2.0 * sigma * sigma * C * C;
        assert!((crb_trace(&info).unwrap() - expected).abs() <= 1e-9 * expected);
        assert!((expected - 0.17975).abs() < 1e-5);
    }

    #[test]
    fn strong_information_against_weak_prior() {
        // information ~1e13 per m^2 against a 1e-6 prior
        let sigma = 1e-15;
        let mut info = InfoState::new(1, 1e-6);
        for uav in [Vec3::new(50.0, 0.0, 0.0), Vec3::new(0.0, 50.0, 0.0)] {
            let c = StepContribution {
                blocks: vec![toa_info_contribution(uav, Vec2::new(0.0, 0.0), sigma).unwrap()],
            };
            info = accumulate(&info, &c).unwrap();
        }
        let expected = 2.0 * sigma * sigma * C * C;
        let crb = crb_trace(&info).unwrap();
        assert!((crb - expected).abs() <= 1e-6 * expected, "{crb:e} vs {expected:e}");
    }

    #[test]
    fn single_measurement_without_prior_is_singular() {
        let c = StepContribution {
            blocks: vec![toa_info_contribution(Vec3::new(50.0, 0.0, 0.0), Vec2::new(0.0, 0.0), 1e-9).unwrap()],
        };
        let info = accumulate(&InfoState::new(1, 0.0), &c).unwrap();
        assert!(matches!(crb_trace(&info), Err(Error::SingularFim)));
        assert!(matches!(improvement_matrix(&info, &c), Err(Error::SingularFim)));
    }

    #[test]
    fn improvement_of_nothing_is_zero() {
        let info = InfoState::new(2, 1e-3);
        let r = improvement_matrix(&info, &StepContribution::zeros(2)).unwrap();
        assert_eq!(r, DMatrix::zeros(4, 4));
    }

    #[test]
    fn improvement_trace_equals_crb_decrease() {
        let mut rng = RngStream::new(13);
        let users = [Vec2::new(0.0, 0.0), Vec2::new(30.0, -10.0)];
        let noise = ToaNoiseModel::constant(5e-9);
        let mut info = InfoState::new(2, 1e-6);
        for _ in 0..20 {
            let uav = Vec3::new(rng.uniform(-60.0, 60.0), rng.uniform(-60.0, 60.0), 30.0);
            let c = StepContribution::at(uav, &users, &noise).unwrap();
            let r = improvement_matrix(&info, &c).unwrap();
            let before = crb_trace(&info).unwrap();
            info = accumulate(&info, &c).unwrap();
            let after = crb_trace(&info).unwrap();
            assert!((r.trace() - (before - after)).abs() <= 1e-10 * before.max(1.0));
            let min_eig = SymmetricEigen::new(r.clone()).eigenvalues.min();
            assert!(min_eig >= -1e-12 * r.norm().max(1.0));
        }
    }
}
