//! Synthetic GPS and ToA measurements from ground truth.
//!
//! Gaussian draws use `rand_distr::StandardNormal` (ziggurat) on top of a
//! ChaCha8 stream, so a given seed reproduces the same measurements on every
//! platform.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::model::{AxisBox, ToaNoiseKind, ToaNoiseModel, Vec2, Vec3, SPEED_OF_LIGHT};

/// Deterministic pseudo-random source owned by a single simulation.
#[derive(Debug, Clone)]
pub struct RngStream {
    rng: ChaCha8Rng,
}

impl RngStream {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    pub fn normal(&mut self, mean: f64, std: f64) -> f64 {
        mean + std * self.standard_normal()
    }

    /// Uniform draw in `[lo, hi)`.
    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.rng.random::<f64>()
    }
}

/// Line-of-sight propagation delay between the UAV and a ground user.
pub fn los_delay(uav: Vec3, user: Vec2) -> Result<f64> {
    let d = uav.distance(user.lift());
    if d == 0.0 {
        return Err(Error::DegenerateGeometry);
    }
    Ok(d / SPEED_OF_LIGHT)
}

/// GPS fix: truth plus isotropic Gaussian noise.
pub fn sample_gps(true_pos: Vec3, sigma_gps: f64, rng: &mut RngStream) -> Vec3 {
    let nx = rng.standard_normal();
    let ny = rng.standard_normal();
    let nz = rng.standard_normal();
    Vec3::new(
        true_pos.x + sigma_gps * nx,
        true_pos.y + sigma_gps * ny,
        true_pos.z + sigma_gps * nz,
    )
}

/// Standard deviation of the delay estimate at link distance `d`.
pub fn sigma_tau_of_distance(d: f64, m: &ToaNoiseModel) -> f64 {
    match m.kind {
        ToaNoiseKind::Constant => m.sigma0,
        ToaNoiseKind::ExponentialOfDistance => m.sigma0 + m.amp * (d / m.scale).exp(),
    }
}

/// Whether the open segment from the UAV down to the user crosses the
/// interior of any box (slab test).
pub fn is_blocked(uav: Vec3, user: Vec2, boxes: &[AxisBox]) -> bool {
    let a = uav;
    let b = user.lift();
    boxes.iter().any(|bx| segment_hits_box(a, b, bx))
}

fn segment_hits_box(a: Vec3, b: Vec3, bx: &AxisBox) -> bool {
    let p = [a.x, a.y, a.z];
    let d = [b.x - a.x, b.y - a.y, b.z - a.z];
    let lo = [bx.min.x, bx.min.y, bx.min.z];
    let hi = [bx.max.x, bx.max.y, bx.max.z];
    let mut t_enter = 0.0_f64;
    let mut t_exit = 1.0_f64;
    for i in 0..3 {
        if d[i] == 0.0 {
            // parallel to this slab: must lie strictly inside it
            if !(p[i] > lo[i] && p[i] < hi[i]) {
                return false;
            }
        } else {
            let t0 = (lo[i] - p[i]) / d[i];
            let t1 = (hi[i] - p[i]) / d[i];
            let (t0, t1) = if t0 < t1 { (t0, t1) } else { (t1, t0) };
            t_enter = t_enter.max(t0);
            t_exit = t_exit.min(t1);
        }
    }
    t_enter < t_exit
}

/// Noisy one-way delay estimate. Blocked links receive a half-normal excess
/// delay whose mean is `m.nlos_bias_mean`. Never negative.
pub fn sample_toa(
    uav: Vec3,
    user: Vec2,
    m: &ToaNoiseModel,
    blocked: bool,
    rng: &mut RngStream,
) -> Result<f64> {
    let tau = los_delay(uav, user)?;
    let sigma = sigma_tau_of_distance(tau * SPEED_OF_LIGHT, m);
    let mut toa = tau + sigma * rng.standard_normal();
    if blocked {
        toa += nlos_excess(m.nlos_bias_mean, rng);
    }
    Ok(toa.max(0.0))
}

/// Half-normal draw with the given mean (scale = mean * sqrt(pi/2)).
fn nlos_excess(mean: f64, rng: &mut RngStream) -> f64 {
    let scale = mean * (std::f64::consts::PI / 2.0).sqrt();
    scale * rng.standard_normal().abs()
}

/// Indices (0-based) kept by the greedy distance filter: the first sample is
/// always kept, later ones only once they are at least `delta` away from the
/// last kept sample.
pub fn sparsify(positions: &[Vec3], delta: f64) -> Vec<usize> {
    let mut kept = Vec::new();
    let mut last: Option<Vec3> = None;
    for (i, &p) in positions.iter().enumerate() {
        match last {
            Some(l) if p.distance(l) < delta => {}
            _ => {
                kept.push(i);
                last = Some(p);
            }
        }
    }
    kept
}

/// Online form of [`sparsify`], fed one position at a time.
#[derive(Debug, Clone, Default)]
pub struct Sparsifier {
    delta: f64,
    last: Option<Vec3>,
}

impl Sparsifier {
    pub fn new(delta: f64) -> Self {
        Self { delta, last: None }
    }

    /// Returns whether `pos` should be retained, updating the anchor if so.
    pub fn offer(&mut self, pos: Vec3) -> bool {
        match self.last {
            Some(l) if pos.distance(l) < self.delta => false,
            _ => {
                self.last = Some(pos);
                true
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const C: f64 = SPEED_OF_LIGHT;

    #[test]
    fn los_delay_examples() {
        let d = los_delay(Vec3::new(0.0, 0.0, 30.0), Vec2::new(0.0, 40.0)).unwrap();
        assert_eq!(d, 50.0 / C);
        assert!((d - 1.66782e-7).abs() < 1e-12);
        let d = los_delay(Vec3::new(0.0, 0.0, 100.0), Vec2::new(0.0, 0.0)).unwrap();
        assert!((d - 3.33564e-7).abs() < 1e-12);
        let d = los_delay(Vec3::new(3.0, 4.0, 12.0), Vec2::new(0.0, 0.0)).unwrap();
        assert_eq!(d, 13.0 / C);
        assert!((d - 4.33634e-8).abs() < 1e-13);
    }

    #[test]
    fn los_delay_degenerate() {
        assert!(matches!(
            los_delay(Vec3::new(1.0, 2.0, 0.0), Vec2::new(1.0, 2.0)),
            Err(Error::DegenerateGeometry)
        ));
    }

    #[test]
    fn gps_zero_noise_and_determinism() {
        let p = Vec3::new(1.0, -2.0, 30.0);
        let mut rng = RngStream::new(42);
        assert_eq!(sample_gps(p, 0.0, &mut rng), p);
        let a = sample_gps(p, 1.0, &mut RngStream::new(42));
        let b = sample_gps(p, 1.0, &mut RngStream::new(42));
        assert_eq!(a, b);
    }

    #[test]
    fn gps_variance_monte_carlo() {
        let mut rng = RngStream::new(7);
        let n = 100_000;
        let mut sums = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let g = sample_gps(Vec3::default(), 1.0, &mut rng);
            for (i, v) in [g.x, g.y, g.z].into_iter().enumerate() {
                sums[i] += v;
                sq[i] += v * v;
            }
        }
        for i in 0..3 {
            let mean = sums[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            assert!((var - 1.0).abs() < 0.02, "axis {i}: var {var}");
        }
    }

    #[test]
    fn sigma_tau_models() {
        let c = ToaNoiseModel::constant(1e-8);
        assert_eq!(sigma_tau_of_distance(500.0, &c), 1e-8);
        let e = ToaNoiseModel::exponential(5e-9, 1e-9, 100.0);
        assert!((sigma_tau_of_distance(0.0, &e) - 6e-9).abs() < 1e-24);
        let expected = 5e-9 + 1e-9 * std::f64::consts::E;
        assert!((sigma_tau_of_distance(100.0, &e) - expected).abs() < 1e-22);
        assert!((expected - 7.71828e-9).abs() < 1e-14);
    }

    /// Dense sampling of the open segment against the box interior.
    fn blocked_by_sampling(uav: Vec3, user: Vec2, bx: &AxisBox) -> bool {
        let b = user.lift();
        let n = 200_000;
        (1..n).any(|i| {
            let t = i as f64 / n as f64;
            let x = uav.x + t * (b.x - uav.x);
            let y = uav.y + t * (b.y - uav.y);
            let z = uav.z + t * (b.z - uav.z);
            x > bx.min.x && x < bx.max.x && y > bx.min.y && y < bx.max.y && z > bx.min.z && z < bx.max.z
        })
    }

    #[test]
    fn blockage_examples() {
        let user = Vec2::new(20.0, 0.0);
        assert!(!is_blocked(Vec3::new(0.0, 0.0, 30.0), user, &[]));
        let bx = AxisBox::new(Vec3::new(5.0, -5.0, 0.0), Vec3::new(15.0, 5.0, 50.0));
        for uav in [Vec3::new(0.0, 0.0, 30.0), Vec3::new(0.0, 0.0, 100.0)] {
            assert_eq!(is_blocked(uav, user, &[bx]), blocked_by_sampling(uav, user, &bx));
        }
        assert!(is_blocked(Vec3::new(0.0, 0.0, 30.0), user, &[bx]));
        // passes above the box
        let uav = Vec3::new(0.0, 0.0, 1000.0);
        let tall_user = Vec2::new(20.0, 0.0);
        let low = AxisBox::new(Vec3::new(5.0, -5.0, 0.0), Vec3::new(15.0, 5.0, 10.0));
        assert_eq!(is_blocked(uav, tall_user, &[low]), blocked_by_sampling(uav, tall_user, &low));
        // beside the box
        let side = AxisBox::new(Vec3::new(5.0, 10.0, 0.0), Vec3::new(15.0, 20.0, 50.0));
        assert!(!is_blocked(Vec3::new(0.0, 0.0, 30.0), user, &[side]));
    }

    proptest! {
        #[test]
        fn blockage_matches_sampling(
            ux in -50.0..50.0f64, uy in -50.0..50.0f64,
            ax in -50.0..50.0f64, ay in -50.0..50.0f64, az in 1.0..80.0f64,
            bx0 in -30.0..30.0f64, by0 in -30.0..30.0f64,
            w in 1.0..20.0f64, h in 1.0..20.0f64, top in 1.0..60.0f64,
        ) {
            let bx = AxisBox::new(Vec3::new(bx0, by0, 0.0), Vec3::new(bx0 + w, by0 + h, top));
            let uav = Vec3::new(ax, ay, az);
            let user = Vec2::new(ux, uy);
            let fast = is_blocked(uav, user, &[bx]);
            let slow = blocked_by_sampling(uav, user, &bx);
            // sampling can miss grazing intersections shorter than one sample
            if slow { prop_assert!(fast); }
        }

        #[test]
        fn los_delay_translation_and_scaling(
            ux in -100.0..100.0f64, uy in -100.0..100.0f64,
            ax in -100.0..100.0f64, ay in -100.0..100.0f64, az in 1.0..100.0f64,
            tx in -100.0..100.0f64, ty in -100.0..100.0f64, s in 0.1..10.0f64,
        ) {
            let d = los_delay(Vec3::new(ax, ay, az), Vec2::new(ux, uy)).unwrap();
            let dt = los_delay(Vec3::new(ax + tx, ay + ty, az), Vec2::new(ux + tx, uy + ty)).unwrap();
            prop_assert!((d - dt).abs() <= 1e-12 * d);
            let ds = los_delay(Vec3::new(s * ax, s * ay, s * az), Vec2::new(s * ux, s * uy)).unwrap();
            prop_assert!((ds - s * d).abs() <= 1e-12 * ds);
        }

        #[test]
        fn sparsify_spacing(steps in proptest::collection::vec((-3.0..3.0f64, -3.0..3.0f64, -1.0..1.0f64), 1..200), delta in 0.0..5.0f64) {
            let mut p = Vec3::new(0.0, 0.0, 30.0);
            let mut positions = Vec::new();
            for (dx, dy, dz) in steps {
                p = Vec3::new(p.x + dx, p.y + dy, p.z + dz);
                positions.push(p);
            }
            let kept = sparsify(&positions, delta);
            prop_assert_eq!(kept[0], 0);
            for w in kept.windows(2) {
                prop_assert!(w[0] < w[1]);
                prop_assert!(positions[w[1]].distance(positions[w[0]]) >= delta);
            }
            // online form agrees
            let mut online = Sparsifier::new(delta);
            let online_kept: Vec<usize> = (0..positions.len()).filter(|&i| online.offer(positions[i])).collect();
            prop_assert_eq!(kept, online_kept);
        }

        #[test]
        fn toa_never_negative(sigma in 1e-9..1e-3f64, seed in any::<u64>()) {
            let mut rng = RngStream::new(seed);
            let m = ToaNoiseModel::constant(sigma);
            let t = sample_toa(Vec3::new(0.0, 0.0, 1.0), Vec2::new(0.0, 0.0), &m, false, &mut rng).unwrap();
            prop_assert!(t >= 0.0);
        }
    }

    #[test]
    fn sparsify_examples() {
        let line: Vec<Vec3> = (0..10).map(|i| Vec3::new(i as f64, 0.0, 30.0)).collect();
        assert_eq!(sparsify(&line, 0.0), (0..10).collect::<Vec<_>>());
        assert_eq!(sparsify(&line, 2.0), vec![0, 2, 4, 6, 8]);
    }

    #[test]
    fn toa_noiseless_limit() {
        let uav = Vec3::new(0.0, 0.0, 30.0);
        let user = Vec2::new(0.0, 40.0);
        let m = ToaNoiseModel::constant(1e-300);
        let t = sample_toa(uav, user, &m, false, &mut RngStream::new(1)).unwrap();
        assert_eq!(t, los_delay(uav, user).unwrap());
    }

    #[test]
    fn toa_std_monte_carlo() {
        let uav = Vec3::new(0.0, 0.0, 30.0);
        let user = Vec2::new(0.0, 40.0);
        let m = ToaNoiseModel::constant(1e-8);
        let mut rng = RngStream::new(3);
        let n = 100_000;
        let tau = los_delay(uav, user).unwrap();
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_toa(uav, user, &m, false, &mut rng).unwrap() - tau)
            .collect();
        let mean = draws.iter().sum::<f64>() / n as f64;
        let var = draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let std = var.sqrt();
        assert!((std / 1e-8 - 1.0).abs() < 0.02, "std {std}");
    }

    #[test]
    fn nlos_bias_monte_carlo() {
        let uav = Vec3::new(0.0, 0.0, 30.0);
        let user = Vec2::new(0.0, 40.0);
        let mut m = ToaNoiseModel::constant(1e-9);
        m.nlos_bias_mean = 5e-8;
        let mut rng = RngStream::new(11);
        let n = 100_000;
        let tau = los_delay(uav, user).unwrap();
        let mean = (0..n)
            .map(|_| sample_toa(uav, user, &m, true, &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        let excess = mean - tau;
        assert!((excess / 5e-8 - 1.0).abs() < 0.02, "excess {excess}");
    }
}
