//! Stage cost output vectors of the maneuver-planning OCP and their
//! analytic Jacobians with respect to the augmented state.
//!
//! The last lane decision is eliminated (`d_last = 1 - sum(d_l)`), so each
//! output's Jacobian carries the elimination's chain rule in the `d` block.

use crate::ego::{IX_D0, IX_S, IX_V, IX_Y, IX_ZETA};
use crate::real::Real;
use nalgebra::DMatrix;

pub fn d_last<T: Real>(x: &[T]) -> T {
    T::one() - x[IX_D0..].iter().copied().sum::<T>()
}

/// Lane-dependent output `F`: per-lane centerline and reference-speed
/// tracking errors gated by the lane decision variables.
///
/// Layout: `[d_1 (y_e - y_1), .., d_nl (y_e - y_nl), d_1 (v_t - v_1), ..,
/// d_nl (v_t - v_nl)]`.
pub fn lane_dependent_output<T: Real>(
    x: &[T],
    lane_centers: &[T],
    lane_speeds: &[T],
    out: &mut [T],
) {
    let n_l = lane_centers.len();
    debug_assert_eq!(lane_speeds.len(), n_l);
    debug_assert_eq!(out.len(), 2 * n_l);
    let dl = d_last(x);
    for l in 0..n_l {
        let d = if l + 1 < n_l { x[IX_D0 + l] } else { dl };
        out[l] = d * (x[IX_Y] - lane_centers[l]);
        out[n_l + l] = d * (x[IX_V] - lane_speeds[l]);
    }
}

pub fn lane_dependent_jacobian<T: Real>(
    x: &[T],
    lane_centers: &[T],
    lane_speeds: &[T],
    jac: &mut DMatrix<T>,
) {
    let n_l = lane_centers.len();
    let n_d = n_l - 1;
    jac.fill(T::zero());
    let dl = d_last(x);
    for l in 0..n_l {
        let d = if l + 1 < n_l { x[IX_D0 + l] } else { dl };
        jac[(l, IX_Y)] = d;
        jac[(n_l + l, IX_V)] = d;
        if l + 1 < n_l {
            jac[(l, IX_D0 + l)] = x[IX_Y] - lane_centers[l];
            jac[(n_l + l, IX_D0 + l)] = x[IX_V] - lane_speeds[l];
        } else {
            for m in 0..n_d {
                jac[(l, IX_D0 + m)] = -(x[IX_Y] - lane_centers[l]);
                jac[(n_l + l, IX_D0 + m)] = -(x[IX_V] - lane_speeds[l]);
            }
        }
    }
}

/// Lane-independent output `G`: desired-speed tracking, slack-state
/// tracking, and the lane-ambiguity term `1 - sum(d_l^2)`.
pub fn lane_independent_output<T: Real>(x: &[T], v_d: T, out: &mut [T]) {
    debug_assert_eq!(out.len(), 3);
    let dl = d_last(x);
    let mut sq = dl * dl;
    for &d in &x[IX_D0..] {
        sq += d * d;
    }
    out[0] = x[IX_V] - v_d;
    out[1] = x[IX_ZETA] - v_d;
    out[2] = T::one() - sq;
}

pub fn lane_independent_jacobian<T: Real>(x: &[T], jac: &mut DMatrix<T>) {
    jac.fill(T::zero());
    jac[(0, IX_V)] = T::one();
    jac[(1, IX_ZETA)] = T::one();
    let dl = d_last(x);
    let two = T::one() + T::one();
    for (m, &d) in x[IX_D0..].iter().enumerate() {
        jac[(2, IX_D0 + m)] = two * (dl - d);
    }
}

/// Predictability output `H`: deviation from the synchronized prior plan.
pub fn predictability_output<T: Real>(x: &[T], prior: (T, T), out: &mut [T]) {
    debug_assert_eq!(out.len(), 2);
    out[0] = x[IX_S] - prior.0;
    out[1] = x[IX_Y] - prior.1;
}

pub fn predictability_jacobian<T: Real>(jac: &mut DMatrix<T>) {
    jac.fill(T::zero());
    jac[(0, IX_S)] = T::one();
    jac[(1, IX_Y)] = T::one();
}
