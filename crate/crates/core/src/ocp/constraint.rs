//! Inequality constraints of the maneuver-planning OCP. Every residual is
//! written in "feasible when >= 0" form; gradient functions are analytic in
//! the augmented state (with the collision geometry margins treated as
//! parameters, which is how the SQP consumes them).

use crate::ego::{EgoParams, IX_A, IX_PSI, IX_PSI_D, IX_S, IX_V, IX_Y, IX_ZETA};
use crate::real::{fl, Real};
use nalgebra::DVector;

/// Friction-ellipse residual `mu*g - (a_n/eta)^2 - a_t^2` with
/// `a_n = v_t^2 kappa + psi_dot v_t` and the yaw rate evaluated from the
/// model, `psi_dot = tau_psi (psi_d - psi)`.
pub fn friction_residual<T: Real>(x: &[T], kappa: T, mu: T, eta: T, g: T, p: &EgoParams<T>) -> T {
    let psi_dot = p.tau_psi * (x[IX_PSI_D] - x[IX_PSI]);
    let a_n = x[IX_V] * x[IX_V] * kappa + psi_dot * x[IX_V];
    let scaled = a_n / eta;
    mu * g - scaled * scaled - x[IX_A] * x[IX_A]
}

pub fn friction_gradient<T: Real>(
    x: &[T],
    kappa: T,
    kappa_ds: T,
    eta: T,
    p: &EgoParams<T>,
    grad: &mut DVector<T>,
) {
    grad.fill(T::zero());
    let two = fl::<T>(2.0);
    let psi_dot = p.tau_psi * (x[IX_PSI_D] - x[IX_PSI]);
    let v = x[IX_V];
    let a_n = v * v * kappa + psi_dot * v;
    let w = two * a_n / (eta * eta);
    grad[IX_S] = -w * v * v * kappa_ds;
    grad[IX_V] = -w * (two * v * kappa + psi_dot);
    grad[IX_PSI] = w * p.tau_psi * v;
    grad[IX_PSI_D] = -w * p.tau_psi * v;
    grad[IX_A] = -two * x[IX_A];
}

/// Minimum-turning-radius residual `v_t kappa_max - v_t kappa - psi_dot`.
pub fn turning_residual<T: Real>(x: &[T], kappa: T, kappa_max: T, p: &EgoParams<T>) -> T {
    let psi_dot = p.tau_psi * (x[IX_PSI_D] - x[IX_PSI]);
    x[IX_V] * (kappa_max - kappa) - psi_dot
}

pub fn turning_gradient<T: Real>(
    x: &[T],
    kappa: T,
    kappa_ds: T,
    kappa_max: T,
    p: &EgoParams<T>,
    grad: &mut DVector<T>,
) {
    grad.fill(T::zero());
    grad[IX_S] = -x[IX_V] * kappa_ds;
    grad[IX_V] = kappa_max - kappa;
    grad[IX_PSI] = p.tau_psi;
    grad[IX_PSI_D] = -p.tau_psi;
}

/// Lateral margin `r(1 - |cos psi|)` with `r = v_t^2 / a_n_max`, shrinking
/// the road bounds at the terminal stage so the vehicle can stay on the road
/// beyond the horizon.
pub fn terminal_margin<T: Real>(x: &[T], a_n_max: T) -> T {
    let r = x[IX_V] * x[IX_V] / a_n_max;
    r * (T::one() - x[IX_PSI].cos().abs())
}

pub fn terminal_margin_gradient<T: Real>(x: &[T], a_n_max: T, grad: &mut DVector<T>) {
    grad.fill(T::zero());
    let two = fl::<T>(2.0);
    let v = x[IX_V];
    let r = v * v / a_n_max;
    let c = x[IX_PSI].cos();
    grad[IX_V] = two * v * (T::one() - c.abs()) / a_n_max;
    grad[IX_PSI] = r * c.signum() * x[IX_PSI].sin();
}

/// Terminal lateral bounds `(lower, upper)` on `y_e` at the last stage.
pub fn terminal_lateral_bounds<T: Real>(x: &[T], a_n_max: T, y_lo: T, y_hi: T) -> (T, T) {
    let m = terminal_margin(x, a_n_max);
    (y_lo + m, y_hi - m)
}

/// Minimum gap so that both vehicles can brake to a stop without collision,
/// active only when the trailing vehicle is the faster one.
pub fn brake_safety_margin<T: Real>(s_i: T, v_s_i: T, decel_i: T, s_j: T, v_s_j: T, decel_j: T) -> T {
    if (s_i - s_j) * (v_s_i - v_s_j) < T::zero() {
        let half = fl::<T>(0.5);
        (half * (v_s_i * v_s_i / decel_i - v_s_j * v_s_j / decel_j)).max(T::zero())
    } else {
        T::zero()
    }
}

/// Half minor (lateral) and half major (longitudinal) axes of the
/// keep-out hyperellipse around a neighbor, from the two touch-point
/// construction (minimum lateral clearance and corner-to-corner clearance).
pub fn hyperellipse_axes<T: Real>(
    psi_i: T,
    dims_i: (T, T),
    dims_j: (T, T),
    dy_min: T,
    ds_min: T,
) -> (T, T) {
    let half = fl::<T>(0.5);
    let quarter = fl::<T>(0.25);
    let (l_i, b_i) = dims_i;
    let (l_j, b_j) = dims_j;
    let sin_a = psi_i.sin().abs();
    let cos_a = psi_i.cos().abs();
    let gamma = half * l_i * sin_a + half * b_i * cos_a + half * b_j + dy_min;
    let num = half * l_i * cos_a + half * b_i * sin_a + half * l_j + ds_min;
    let ratio = (gamma - dy_min) / gamma;
    let lambda = num / (T::one() - ratio.powi(4)).powf(quarter);
    (gamma, lambda)
}

/// Extra lateral margin at the terminal stage ensuring the ego can reach
/// zero relative lateral velocity before contact; applied only when the
/// neighbor is laterally closing on the ego.
pub fn lateral_terminal_addend<T: Real>(
    v_y_i: T,
    v_y_j: T,
    a_y_j: T,
    a_y_max_i: T,
    y_e_i: T,
    y_e_j: T,
    big_m: T,
) -> T {
    // sign(v_y_j) must match sign(y_e_i - y_e_j): the neighbor drifts toward
    // the ego's side of the road.
    if v_y_j * (y_e_i - y_e_j) <= T::zero() || v_y_j == T::zero() {
        return T::zero();
    }
    let denom = a_y_max_i - a_y_j;
    if denom <= T::zero() {
        // No closing authority; treat as the non-negative time branch.
        return big_m;
    }
    let dv = v_y_i - v_y_j;
    let t_c = dv / denom;
    if t_c < T::zero() {
        dv * dv / (fl::<T>(2.0) * denom)
    } else {
        big_m
    }
}

/// Hyperellipse collision residual at one stage:
/// `((y_i - y_j)/gamma)^4 + ((s_i - s_j)/(lambda + lambda_b + beta*zeta))^4 - 1`.
///
/// `lambda_total` carries `lambda + lambda_b`; the slack-state headway
/// `beta*zeta` is added here so its gradient is part of the residual.
pub fn collision_residual<T: Real>(x: &[T], obs: (T, T), gamma: T, lambda_total: T, beta: T) -> T {
    let d = lambda_total + beta * x[IX_ZETA];
    let ry = (x[IX_Y] - obs.1) / gamma;
    let rs = (x[IX_S] - obs.0) / d;
    ry.powi(4) + rs.powi(4) - T::one()
}

pub fn collision_gradient<T: Real>(
    x: &[T],
    obs: (T, T),
    gamma: T,
    lambda_total: T,
    beta: T,
    grad: &mut DVector<T>,
) {
    grad.fill(T::zero());
    let four = fl::<T>(4.0);
    let d = lambda_total + beta * x[IX_ZETA];
    let dy = x[IX_Y] - obs.1;
    let ds = x[IX_S] - obs.0;
    grad[IX_Y] = four * dy.powi(3) / gamma.powi(4);
    grad[IX_S] = four * ds.powi(3) / d.powi(4);
    grad[IX_ZETA] = -four * ds.powi(4) / d.powi(5) * beta;
}

/// Geometry parameters of one ego/neighbor pair for the state-dependent
/// collision residual.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairGeometry<T: Real> {
    /// Ego (length, width).
    pub dims_i: (T, T),
    /// Neighbor (length, width).
    pub dims_j: (T, T),
    pub dy_min: T,
    pub ds_min: T,
    pub decel_i: T,
    pub decel_j: T,
    pub beta: T,
    /// Smoothing width (m) for the braking margin's activation. The exact
    /// margin is a ReLU of the relative stopping distance; following
    /// equilibria sit exactly on its kink, so the planner uses the smooth
    /// over-approximation `(raw + sqrt(raw^2 + eps^2))/2 >= max(raw, 0)`,
    /// applied when the ego is the trailing vehicle.
    pub brake_eps: T,
    /// Terminal lateral addend, frozen per solve (its defining conditional
    /// jumps between branches, so it is not differentiated through).
    pub gamma_extra: T,
}

/// Collision residual with the hyperellipse axes and braking margin
/// evaluated from the ego state, plus its analytic gradient. Both are
/// continuous in the state; the gradient is piecewise (kinks at the braking
/// margin's activation boundary and at `psi = 0`).
pub fn collision_state_residual<T: Real>(
    x: &[T],
    obs: (T, T, T), // (s_j, y_e_j, v_s_j)
    geom: &PairGeometry<T>,
    grad: Option<&mut DVector<T>>,
) -> T {
    let four = fl::<T>(4.0);
    let half = fl::<T>(0.5);
    let (l_i, b_i) = geom.dims_i;
    let (l_j, b_j) = geom.dims_j;
    let psi = x[IX_PSI];
    let (sin_p, cos_p) = psi.sin_cos();
    let sa = sin_p.abs();
    let ca = cos_p.abs();
    let sa_d = sin_p.signum() * cos_p;
    let ca_d = -cos_p.signum() * sin_p;

    let gamma_raw = half * l_i * sa + half * b_i * ca + half * b_j + geom.dy_min;
    let gamma_raw_d = half * l_i * sa_d + half * b_i * ca_d;
    let gamma_eff = gamma_raw + geom.gamma_extra;

    let num = half * l_i * ca + half * b_i * sa + half * l_j + geom.ds_min;
    let num_d = half * l_i * ca_d + half * b_i * sa_d;
    let ratio = (gamma_raw - geom.dy_min) / gamma_raw;
    let den = (T::one() - ratio.powi(4)).powf(fl(0.25));
    let lambda = num / den;
    // d(den)/d(gamma_raw), then chained with d(gamma_raw)/d(psi).
    let dden_dgamma = -ratio.powi(3) * geom.dy_min / (gamma_raw * gamma_raw)
        / (T::one() - ratio.powi(4)).powf(fl(0.75));
    let dlambda_dpsi = num_d / den - num * dden_dgamma * gamma_raw_d / (den * den);

    let v_s_i = x[IX_V] * cos_p;
    let ds = x[IX_S] - obs.0;
    let raw = half * (v_s_i * v_s_i / geom.decel_i - obs.2 * obs.2 / geom.decel_j);
    // With equal deceleration limits, `raw > 0` exactly when the trailing
    // ego closes on the neighbor, so gating on the side alone reproduces the
    // conditional; the smooth max keeps the margin differentiable through
    // the following equilibrium.
    let behind = ds < T::zero();
    let (lambda_b, dlb_draw) = if behind {
        let root = (raw * raw + geom.brake_eps * geom.brake_eps).sqrt();
        (half * (raw + root), half * (T::one() + raw / root))
    } else {
        (T::zero(), T::zero())
    };

    let d_total = lambda + lambda_b + geom.beta * x[IX_ZETA];
    let dy = x[IX_Y] - obs.1;
    let ry = dy / gamma_eff;
    let rs = ds / d_total;
    let c = ry.powi(4) + rs.powi(4) - T::one();

    if let Some(grad) = grad {
        grad.fill(T::zero());
        let dc_dd = -four * ds.powi(4) / d_total.powi(5);
        grad[IX_Y] = four * dy.powi(3) / gamma_eff.powi(4);
        grad[IX_S] = four * ds.powi(3) / d_total.powi(4);
        grad[IX_ZETA] = dc_dd * geom.beta;
        let mut dd_dpsi = dlambda_dpsi;
        if behind {
            let dlb_dvsi = dlb_draw * v_s_i / geom.decel_i;
            grad[IX_V] = dc_dd * dlb_dvsi * cos_p;
            dd_dpsi += dlb_dvsi * (-x[IX_V] * sin_p);
        }
        grad[IX_PSI] =
            -four * dy.powi(4) / gamma_eff.powi(5) * gamma_raw_d + dc_dd * dd_dpsi;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ego::{state_dim, EgoState};
    use approx::assert_relative_eq;

    fn params() -> EgoParams<f64> {
        EgoParams { tau_a: 2.0, tau_psi: 2.0 }
    }

    fn state() -> Vec<f64> {
        let mut x = EgoState::in_lane(2, 3, 3.1, 120.0, 21.0);
        x.psi = 0.04;
        x.psi_d = 0.065;
        x.a_t = 0.8;
        x.zeta = 14.0;
        x.d = vec![0.2, 0.7];
        x.to_vector().as_slice().to_vec()
    }

    #[test]
    fn friction_slack_on_straight_road() {
        let mut x = EgoState::in_lane(1, 3, 0.0, 0.0, 20.0);
        x.psi = 0.02;
        x.psi_d = 0.02;
        let xv = x.to_vector();
        let c = friction_residual(xv.as_slice(), 0.0, 0.9, 2.0, 9.81, &params());
        assert_relative_eq!(c, 0.9 * 9.81);
    }

    #[test]
    fn friction_boundary_active() {
        let mut x = EgoState::in_lane(1, 3, 0.0, 0.0, 20.0);
        x.a_t = (0.9f64 * 9.81).sqrt();
        let xv = x.to_vector();
        let c = friction_residual(xv.as_slice(), 0.0, 0.9, 2.0, 9.81, &params());
        assert!(c.abs() < 1e-12);
    }

    #[test]
    fn friction_with_yaw_rate() {
        // psi_dot = 0.05 at v = 20 gives a_n = 1.0; eta = 2 puts 0.25 on the
        // left-hand side, so feasibility needs a_t^2 <= mu g - 0.25.
        let mut x = EgoState::in_lane(1, 3, 0.0, 0.0, 20.0);
        x.psi_d = 0.025; // tau_psi = 2 -> psi_dot = 0.05
        let lim: f64 = 0.9 * 9.81 - 0.25;
        x.a_t = lim.sqrt() - 1e-9;
        let xv = x.to_vector();
        let c = friction_residual(xv.as_slice(), 0.0, 0.9, 2.0, 9.81, &params());
        assert!(c > 0.0 && c < 1e-7);
        x.a_t = lim.sqrt() + 1e-6;
        let xv = x.to_vector();
        assert!(friction_residual(xv.as_slice(), 0.0, 0.9, 2.0, 9.81, &params()) < 0.0);
    }

    #[test]
    fn terminal_bounds_examples() {
        let y_lo = -1.75;
        let y_hi = 8.75;
        let mut x = EgoState::in_lane(1, 3, 0.0, 0.0, 20.0);
        let xv = x.to_vector();
        let (lo, hi) = terminal_lateral_bounds(xv.as_slice(), 4.0, y_lo, y_hi);
        assert_relative_eq!(lo, y_lo);
        assert_relative_eq!(hi, y_hi);

        x.v_t = 0.0;
        x.psi = 0.5;
        let xv = x.to_vector();
        let (lo, hi) = terminal_lateral_bounds(xv.as_slice(), 4.0, y_lo, y_hi);
        assert_relative_eq!(lo, y_lo);
        assert_relative_eq!(hi, y_hi);

        x.v_t = 20.0;
        x.psi = 0.1;
        let xv = x.to_vector();
        let m = terminal_margin(xv.as_slice(), 4.0);
        assert_relative_eq!(m, 100.0 * (1.0 - 0.1f64.cos()), epsilon = 1e-12);
        assert!((m - 0.4996).abs() < 1e-3);
    }

    #[test]
    fn brake_margin_cases() {
        // Leading and faster: conditional inactive.
        assert_eq!(brake_safety_margin(50.0, 30.0, 6.0, 0.0, 20.0, 6.0), 0.0);
        // Equal speeds: product is zero.
        assert_eq!(brake_safety_margin(-50.0, 20.0, 6.0, 0.0, 20.0, 6.0), 0.0);
        // Behind and faster.
        let lb: f64 = brake_safety_margin(-50.0, 30.0, 6.0, 0.0, 20.0, 6.0);
        assert_relative_eq!(lb, 0.5 * (900.0 / 6.0 - 400.0 / 6.0), epsilon = 1e-12);
        assert!((lb - 41.67).abs() < 0.01);
    }

    #[test]
    fn brake_margin_matches_stopping_simulation() {
        // Oracle: both vehicles brake at their maximum deceleration from the
        // initial condition; search the minimum initial gap with no overlap.
        let (v_i, v_j, a) = (30.0f64, 20.0f64, 6.0f64);
        let dt = 1e-4;
        let sim_min_gap = |gap0: f64| -> f64 {
            let (mut si, mut vi) = (-gap0, v_i);
            let (mut sj, mut vj) = (0.0, v_j);
            let mut min_gap = sj - si;
            while vi > 0.0 || vj > 0.0 {
                vi = (vi - a * dt).max(0.0);
                vj = (vj - a * dt).max(0.0);
                si += vi * dt;
                sj += vj * dt;
                min_gap = min_gap.min(sj - si);
            }
            min_gap
        };
        // Bisect for the critical gap where the vehicles just touch.
        let (mut lo, mut hi) = (0.0, 120.0);
        for _ in 0..40 {
            let mid = 0.5 * (lo + hi);
            if sim_min_gap(mid) > 0.0 {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        let critical = 0.5 * (lo + hi);
        let lb = brake_safety_margin(-50.0, v_i, a, 0.0, v_j, a);
        assert!((critical - lb).abs() < 1e-2, "critical {critical} vs lambda_b {lb}");
    }

    #[test]
    fn hyperellipse_axes_examples() {
        let (g, l): (f64, f64) = hyperellipse_axes(0.0, (5.0, 2.0), (5.0, 2.0), 0.25, 1.0);
        assert_relative_eq!(g, 2.25);
        let expect = 6.0 / (1.0 - (2.0f64 / 2.25).powi(4)).powf(0.25);
        assert_relative_eq!(l, expect, epsilon = 1e-12);
        assert!((l - 7.66).abs() < 0.01);

        let (g, _): (f64, f64) =
            hyperellipse_axes(std::f64::consts::FRAC_PI_2, (5.0, 2.0), (5.0, 2.0), 0.25, 1.0);
        assert_relative_eq!(g, 3.75, epsilon = 1e-12);
    }

    #[test]
    fn corner_touch_point_on_level_set() {
        // The corner-to-corner construction point must lie on the residual's
        // zero level set by construction of the major axis.
        let (g, l): (f64, f64) = hyperellipse_axes(0.0, (5.0, 2.0), (5.0, 2.0), 0.25, 1.0);
        let dy = g - 0.25; // b_i/2 + b_j/2
        let ds = 2.5 + 2.5 + 1.0; // L_i/2 + L_j/2 + ds_min
        let r = (dy / g).powi(4) + (ds / l).powi(4) - 1.0;
        assert!(r.abs() < 1e-12, "residual {r}");
    }

    #[test]
    fn lateral_addend_cases() {
        // Neighbor moving laterally away from the ego: no addend.
        assert_eq!(lateral_terminal_addend(0.0, -0.5, 0.0, 2.0, 1.0, 0.0, 100.0), 0.0);
        // Equal lateral speeds while closing: t_c = 0 falls in the M branch.
        assert_eq!(lateral_terminal_addend(0.5, 0.5, 0.0, 2.0, 1.0, 0.0, 100.0), 100.0);
        // Constant-acceleration closure.
        let add = lateral_terminal_addend(0.0, 0.5, 0.0, 2.0, 1.0, 0.0, 100.0);
        assert_relative_eq!(add, 0.0625);
    }

    #[test]
    fn collision_residual_level_set() {
        let (g, l): (f64, f64) = hyperellipse_axes(0.0, (5.0, 2.0), (5.0, 2.0), 0.25, 1.0);
        let mut x = EgoState::in_lane(1, 3, 0.0, 100.0, 20.0);
        x.zeta = 0.0;
        // Lateral separation exactly gamma at the same s.
        x.y_e = 3.0 + g;
        let xv = x.to_vector();
        let r: f64 = collision_residual(xv.as_slice(), (100.0, 3.0), g, l, 1.0);
        assert!(r.abs() < 1e-12);
        // Twice the lateral axis.
        x.y_e = 3.0 + 2.0 * g;
        let xv = x.to_vector();
        let r = collision_residual(xv.as_slice(), (100.0, 3.0), g, l, 1.0);
        assert_relative_eq!(r, 15.0, epsilon = 1e-9);
        // Longitudinal gap equal to the effective axis.
        x.y_e = 3.0;
        x.zeta = 10.0;
        let beta = 1.0;
        let xv = x.to_vector();
        let r: f64 = collision_residual(
            xv.as_slice(),
            (100.0 - (l + 5.0 + beta * 10.0), 3.0),
            g,
            l + 5.0,
            beta,
        );
        assert!(r.abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        let p = params();
        let x0 = state();
        let n = state_dim(3);
        let h = 1e-6;
        let kappa = 1.5e-3;
        let kappa_ds = 2e-5;
        // kappa varies with s in the finite differences too.
        let kappa_at = |s: f64| kappa + (s - x0[IX_S]) * kappa_ds;

        let mut grad = DVector::zeros(n);
        friction_gradient(&x0, kappa, kappa_ds, 2.0, &p, &mut grad);
        for j in 0..n {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[j] += h;
            xm[j] -= h;
            let fp = friction_residual(&xp, kappa_at(xp[IX_S]), 0.9, 2.0, 9.81, &p);
            let fm = friction_residual(&xm, kappa_at(xm[IX_S]), 0.9, 2.0, 9.81, &p);
            let fd = (fp - fm) / (2.0 * h);
            assert!((grad[j] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "friction d{j}");
        }

        turning_gradient(&x0, kappa, kappa_ds, 0.15, &p, &mut grad);
        for j in 0..n {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[j] += h;
            xm[j] -= h;
            let fp = turning_residual(&xp, kappa_at(xp[IX_S]), 0.15, &p);
            let fm = turning_residual(&xm, kappa_at(xm[IX_S]), 0.15, &p);
            let fd = (fp - fm) / (2.0 * h);
            assert!((grad[j] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "turning d{j}");
        }

        terminal_margin_gradient(&x0, 4.0, &mut grad);
        for j in 0..n {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[j] += h;
            xm[j] -= h;
            let fd = (terminal_margin(&xp, 4.0) - terminal_margin(&xm, 4.0)) / (2.0 * h);
            assert!((grad[j] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "terminal d{j}");
        }

        let obs = (110.0, 0.4);
        collision_gradient(&x0, obs, 2.3, 9.5, 1.0, &mut grad);
        for j in 0..n {
            let mut xp = x0.clone();
            let mut xm = x0.clone();
            xp[j] += h;
            xm[j] -= h;
            let fp = collision_residual(&xp, obs, 2.3, 9.5, 1.0);
            let fm = collision_residual(&xm, obs, 2.3, 9.5, 1.0);
            let fd = (fp - fm) / (2.0 * h);
            assert!((grad[j] - fd).abs() < 1e-6 * (1.0 + fd.abs()), "collision d{j}");
        }
    }

    #[test]
    fn state_dependent_collision_gradient_matches_fd() {
        let geom = PairGeometry {
            dims_i: (5.0, 2.0),
            dims_j: (4.6, 1.9),
            dy_min: 0.25,
            ds_min: 1.0,
            decel_i: 6.0,
            decel_j: 5.0,
            beta: 1.0,
            gamma_extra: 0.1,
        };
        let n = state_dim(3);
        let h = 1e-6;
        // Sample both the brake-active (behind and faster) and inactive
        // geometries, away from the branch kinks.
        for (obs, base) in [
            ((150.0, 0.4, 16.0), state()),  // ego behind, faster: active
            ((100.0, -0.4, 25.0), state()), // ego ahead of slower? inactive
        ] {
            let mut grad = DVector::zeros(n);
            let c = collision_state_residual(&base, obs, &geom, Some(&mut grad));
            assert!(c.is_finite());
            for j in 0..n {
                let mut xp = base.clone();
                let mut xm = base.clone();
                xp[j] += h;
                xm[j] -= h;
                let fp = collision_state_residual(&xp, obs, &geom, None);
                let fm = collision_state_residual(&xm, obs, &geom, None);
                let fd = (fp - fm) / (2.0 * h);
                assert!(
                    (grad[j] - fd).abs() < 1e-5 * (1.0 + fd.abs()),
                    "full collision d{j}: {} vs {}",
                    grad[j],
                    fd
                );
            }
        }
    }

    #[test]
    fn state_dependent_collision_continuous_at_brake_activation() {
        let geom = PairGeometry {
            dims_i: (5.0, 2.0),
            dims_j: (5.0, 2.0),
            dy_min: 0.25,
            ds_min: 1.0,
            decel_i: 6.0,
            decel_j: 6.0,
            beta: 1.0,
            gamma_extra: 0.0,
        };
        // Sweep ego speed through the neighbor speed: lambda_b activates at
        // equal speeds; the residual must stay continuous.
        let mut prev: Option<f64> = None;
        for i in 0..200 {
            let v = 19.9 + 0.001 * i as f64;
            let mut x = EgoState::in_lane(1, 3, 0.0, 100.0, v);
            x.zeta = 10.0;
            let xv = x.to_vector();
            let c = collision_state_residual(xv.as_slice(), (160.0, 0.0, 20.0), &geom, None);
            if let Some(p) = prev {
                // Steep (the quartic amplifies the margin slope) but must
                // stay Lipschitz through the activation point.
                assert!((c - p).abs() < 0.5, "jump at v={v}: {p} -> {c}");
            }
            prev = Some(c);
        }
    }
}
