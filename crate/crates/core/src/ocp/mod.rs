//! Per-CAV optimal control problem: coupled lane + speed maneuver planning
//! over a finite horizon, assembled from stage cost outputs ([`cost`]),
//! vehicle/road/collision constraints ([`constraint`]) and solved by an SQP
//! over a direct multiple-shooting transcription ([`solver`]) with a dense
//! ADMM QP ([`qp`]) underneath.

pub mod constraint;
pub mod cost;
pub mod qp;
pub mod solver;

use crate::ego::{EgoInput, EgoParams, EgoState};
use crate::real::{fl, Real};

/// Closed interval used for hard box bounds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bounds<T: Real> {
    pub lo: T,
    pub hi: T,
}

impl<T: Real> Bounds<T> {
    pub fn new(lo: T, hi: T) -> Self {
        Self { lo, hi }
    }

    pub fn clamp(&self, x: T) -> T {
        x.clamp(self.lo, self.hi)
    }
}

/// All weights, limits and solver knobs of the maneuver-planning OCP.
///
/// Defaults are desk-scale values recorded in the scenario configuration for
/// reproducibility; every field can be overridden from there.
#[derive(Debug, Clone, PartialEq)]
pub struct OcpConfig<T: Real> {
    /// Steps in the prediction horizon.
    pub n_h: usize,
    /// Horizon step (s).
    pub dt_h: T,

    // Stage weights: lane-dependent output (per-lane position and speed
    // tracking), lane-independent output, prior-plan predictability, inputs.
    pub w_lane_track: T,
    pub w_speed_track: T,
    pub w_vd: T,
    pub w_zeta: T,
    pub w_lane_choice: T,
    pub w_plan_s: T,
    pub w_plan_y: T,
    pub r_a_d: T,
    pub r_dpsi: T,
    pub r_u_zeta: T,
    pub r_u_d: T,

    // Vehicle and road limits.
    pub mu: T,
    pub eta: T,
    pub gravity: T,
    pub kappa_max: T,
    pub a_n_max: T,
    pub a_y_max: T,
    /// Maximum deceleration magnitude of the ego class (m/s^2, positive).
    pub decel_max: T,
    /// Comfort time headway multiplying the slack state (s).
    pub beta: T,
    /// Minimum lateral safety margin (m).
    pub dy_min: T,
    /// Minimum longitudinal safety margin (m).
    pub ds_min: T,
    /// Large lateral margin applied when no finite closing margin exists (m).
    pub big_m: T,
    /// Optional upper bound on path progress (traffic-signal hook).
    pub s_max: Option<T>,

    // Hard boxes on inputs and the exactly-integrated states.
    pub a_d_box: Bounds<T>,
    pub dpsi_box: Bounds<T>,
    pub u_zeta_box: Bounds<T>,
    pub u_d_box: Bounds<T>,
    pub psi_d_box: Bounds<T>,
    pub a_t_box: Bounds<T>,

    // SQP settings.
    pub tol_viol: T,
    pub max_iters: usize,
    /// L1 exact-penalty slope on soft-constraint violations.
    pub penalty: T,
    /// Quadratic penalty curvature added on top of the L1 slope (keeps the
    /// QP subproblems strongly convex in the violation slacks).
    pub penalty_quad: T,
    pub penalty_escalation: T,
    pub max_escalations: usize,
    /// Restricts each call to a single SQP iteration (real-time iteration
    /// mode). Off by default: desk scale favors full convergence per step.
    pub single_iteration: bool,

    pub ego: EgoParams<T>,
}

impl<T: Real> Default for OcpConfig<T> {
    fn default() -> Self {
        Self {
            n_h: 12,
            dt_h: fl(0.5),
            w_lane_track: fl(1.0),
            w_speed_track: fl(0.5),
            w_vd: fl(0.5),
            w_zeta: fl(0.1),
            w_lane_choice: fl(2.0),
            w_plan_s: fl(0.05),
            w_plan_y: fl(0.5),
            r_a_d: fl(0.5),
            r_dpsi: fl(50.0),
            r_u_zeta: fl(0.1),
            r_u_d: fl(2.0),
            mu: fl(0.9),
            eta: fl(2.0),
            gravity: fl(9.81),
            kappa_max: fl(0.15),
            a_n_max: fl(4.0),
            a_y_max: fl(2.0),
            decel_max: fl(6.0),
            beta: fl(1.0),
            dy_min: fl(0.25),
            ds_min: fl(1.0),
            big_m: fl(100.0),
            s_max: None,
            a_d_box: Bounds::new(fl(-6.0), fl(3.0)),
            dpsi_box: Bounds::new(fl(-0.25), fl(0.25)),
            u_zeta_box: Bounds::new(fl(-5.0), fl(5.0)),
            u_d_box: Bounds::new(fl(-1.0), fl(1.0)),
            psi_d_box: Bounds::new(fl(-0.3), fl(0.3)),
            a_t_box: Bounds::new(fl(-6.0), fl(3.0)),
            tol_viol: fl(1e-3),
            max_iters: 30,
            penalty: fl(400.0),
            penalty_quad: fl(50.0),
            penalty_escalation: fl(10.0),
            max_escalations: 2,
            single_iteration: false,
            ego: EgoParams::default(),
        }
    }
}

/// The maneuver plan a CAV commits to and shares with its peers.
#[derive(Debug, Clone, PartialEq)]
pub struct ManeuverPlan<T: Real> {
    /// Discrete planning timestamp (s).
    pub t_p: T,
    /// Predicted `(s, y_e)` per stage, length `n_h + 1`.
    pub trajectory: Vec<(T, T)>,
    /// Full predicted state sequence (for metrics and warm starts).
    pub states: Vec<EgoState<T>>,
    /// Input sequence over the horizon (warm-start source), length `n_h`.
    pub inputs: Vec<EgoInput<T>>,
    /// First-step actuation: desired acceleration and commanded heading.
    pub first_inputs: (T, T),
    /// 1-based lane with the largest decision variable at stage 1.
    pub committed_lane: usize,
    /// Least-squares cost of the plan.
    pub cost: T,
}

impl<T: Real> ManeuverPlan<T> {
    /// 1-based lane committed at stage `k`, clamping past the horizon end.
    pub fn lane_at_stage(&self, k: usize) -> usize {
        let k = k.min(self.states.len() - 1);
        self.states[k].committed_lane()
    }
}

/// One neighbor's predicted trajectory over the ego horizon, plus the
/// geometry needed by the collision constraints.
#[derive(Debug, Clone, PartialEq)]
pub struct ObstacleTrajectory<T: Real> {
    pub stages: Vec<ObstacleStage<T>>,
    pub length: T,
    pub width: T,
    /// Maximum deceleration magnitude of the neighbor class (m/s^2).
    pub decel_max: T,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObstacleStage<T: Real> {
    pub s: T,
    pub y_e: T,
    pub v_s: T,
    pub v_y: T,
    pub a_y: T,
}

/// Solver diagnostics, also emitted to the optional trace log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveDiag<T: Real> {
    pub iterations: usize,
    pub qp_iterations: usize,
    pub escalations: usize,
    pub max_violation: T,
    pub cost: T,
    pub step_norm: T,
}

#[derive(Debug, Clone)]
pub enum SolveOutcome<T: Real> {
    Feasible {
        plan: ManeuverPlan<T>,
        diag: SolveDiag<T>,
    },
    /// Constraint violation stayed above tolerance; the caller must engage
    /// the fallback routine for this control step.
    Infeasible { diag: SolveDiag<T> },
}

impl<T: Real> SolveOutcome<T> {
    pub fn diag(&self) -> &SolveDiag<T> {
        match self {
            SolveOutcome::Feasible { diag, .. } => diag,
            SolveOutcome::Infeasible { diag } => diag,
        }
    }

    pub fn plan(&self) -> Option<&ManeuverPlan<T>> {
        match self {
            SolveOutcome::Feasible { plan, .. } => Some(plan),
            SolveOutcome::Infeasible { .. } => None,
        }
    }
}
