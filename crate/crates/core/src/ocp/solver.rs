//! SQP solution of the maneuver-planning OCP.
//!
//! Transcription: direct multiple shooting over `n_h` stages with RK4 and
//! zero-order-hold inputs. Because every iterate is re-rolled out from the
//! measured initial state, shooting defects are identically zero and the
//! state deviations condense exactly onto the input moves through the RK4
//! sensitivities; the linear subsystem (everything except `s`, `y_e`) makes
//! the hard bounds on the integrator states exact in the condensed space.
//!
//! Constraint handling: input boxes, the lane-decision normalization, and
//! the boxes on the exactly-integrated states are hard rows of the QP.
//! Road, friction, turning, terminal, and collision constraints enter as L1
//! exact penalties with a fixed weight and escalation, so the QP subproblem
//! is always feasible and infeasibility becomes a measured violation.
//!
//! The collision-geometry margins (hyperellipse axes, braking margin, and
//! the terminal lateral addend) are frozen from a reference rollout at the
//! start of the solve and refreshed at convergence, so the merit function is
//! a fixed function of the inputs within each inner descent loop.

use super::constraint::{
    collision_state_residual, friction_gradient, friction_residual, lateral_terminal_addend,
    terminal_margin, terminal_margin_gradient, turning_gradient, turning_residual, PairGeometry,
};
use super::cost::{
    lane_dependent_jacobian, lane_dependent_output, lane_independent_jacobian,
    lane_independent_output, predictability_jacobian, predictability_output,
};
use super::qp::{self, QpSettings, QpWarmStart};
use super::{ManeuverPlan, ObstacleTrajectory, OcpConfig, SolveDiag, SolveOutcome};
use crate::ego::{
    input_dim, rk4_vec, rk4_vec_sens, state_dim, EgoInput, EgoState, IU_AD, IU_D0, IU_DPSI,
    IU_ZETA, IX_A, IX_D0, IX_PSI_D, IX_S, IX_V, IX_Y, IX_ZETA,
};
use crate::real::{fl, inf, Real};
use crate::road::RoadLink;
use nalgebra::{DMatrix, DVector};

/// Desired speed and per-stage lane reference speeds feeding the cost.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeedRefs<T: Real> {
    pub v_d: T,
    /// `lane_speeds[k][l]`: reference speed of lane `l+1` at stage `k`.
    pub lane_speeds: Vec<Vec<T>>,
}

impl<T: Real> SpeedRefs<T> {
    /// Stage-constant references (the 2D planner path).
    pub fn constant(v_d: T, per_lane: &[T], n_h: usize) -> Self {
        Self {
            v_d,
            lane_speeds: vec![per_lane.to_vec(); n_h + 1],
        }
    }
}

/// One assembled planning problem, borrowing the immutable snapshot data.
pub struct OcpProblem<'a, T: Real> {
    pub cfg: &'a OcpConfig<T>,
    pub road: &'a RoadLink<T>,
    pub x0: &'a EgoState<T>,
    pub refs: &'a SpeedRefs<T>,
    /// Prior plan synchronized to the current clock; `None` on the first
    /// planning cycle (the predictability weights are then zero).
    pub prior_plan: Option<&'a [(T, T)]>,
    pub obstacles: &'a [ObstacleTrajectory<T>],
    /// Ego (length, width) in meters.
    pub ego_dims: (T, T),
}

/// Per-obstacle collision geometry; only the terminal lateral addend is
/// frozen (from the reference rollout), everything else is state-dependent.
struct ObstacleGeometry<T: Real> {
    base: PairGeometry<T>,
    terminal: PairGeometry<T>,
}

struct Evaluation<T: Real> {
    states: Vec<DVector<T>>,
    cost: T,
    viol_sum: T,
    viol_sq: T,
    max_viol: T,
}

impl<T: Real> Evaluation<T> {
    fn merit(&self, nu_pen: T, nu_quad: T) -> T {
        self.cost + nu_pen * self.viol_sum + nu_quad * self.viol_sq
    }
}

/// A soft constraint row prepared for the QP: nonlinear value, gradient row
/// in state space, and the stage it belongs to.
struct SoftRow<T: Real> {
    stage: usize,
    value: T,
    grad: DVector<T>,
}

pub fn solve<T: Real>(
    problem: &OcpProblem<'_, T>,
    warm: Option<&ManeuverPlan<T>>,
    t_p: T,
) -> SolveOutcome<T> {
    Workspace::new(problem).run(warm, t_p)
}

struct Workspace<'a, T: Real> {
    p: &'a OcpProblem<'a, T>,
    n_l: usize,
    nx: usize,
    nu: usize,
    n: usize,  // horizon steps
    nv: usize, // n * nu
    x0: DVector<T>,
    use_prior: bool,
    geoms: Vec<ObstacleGeometry<T>>,
}

impl<'a, T: Real> Workspace<'a, T> {
    fn new(p: &'a OcpProblem<'a, T>) -> Self {
        let n_l = p.road.lane_count();
        let cfg = p.cfg;
        assert!(cfg.n_h >= 2, "horizon must have at least two steps");
        for ob in p.obstacles {
            assert_eq!(ob.stages.len(), cfg.n_h + 1, "obstacle stage count");
        }
        if let Some(prior) = p.prior_plan {
            assert_eq!(prior.len(), cfg.n_h + 1, "prior plan stage count");
        }

        // Clamp the integrator states of the initial condition into their
        // hard boxes so the QP bound rows are consistent.
        let mut x0s = p.x0.clone();
        x0s.psi_d = cfg.psi_d_box.clamp(x0s.psi_d);
        x0s.a_t = cfg.a_t_box.clamp(x0s.a_t);
        x0s.zeta = x0s.zeta.clamp(T::zero(), p.road.speed_limit());
        for d in &mut x0s.d {
            *d = d.clamp(T::zero(), T::one());
        }
        let sum: T = x0s.d.iter().copied().sum();
        if sum > T::one() {
            for d in &mut x0s.d {
                *d /= sum;
            }
        }

        Self {
            p,
            n_l,
            nx: state_dim(n_l),
            nu: input_dim(n_l),
            n: cfg.n_h,
            nv: cfg.n_h * input_dim(n_l),
            x0: x0s.to_vector(),
            use_prior: p.prior_plan.is_some(),
            geoms: Vec::new(),
        }
    }

    fn rollout(&self, u: &DVector<T>) -> Vec<DVector<T>> {
        let cfg = self.p.cfg;
        let table = self.curvature();
        let mut states = Vec::with_capacity(self.n + 1);
        states.push(self.x0.clone());
        for k in 0..self.n {
            let uk = u.rows(k * self.nu, self.nu).into_owned();
            let next = rk4_vec(&states[k], &uk, cfg.dt_h, table, &cfg.ego)
                .unwrap_or_else(|_| states[k].clone());
            states.push(next);
        }
        states
    }

    fn curvature(&self) -> &crate::road::CurvatureTable<T> {
        self.p.road.curvature_table()
    }

    /// Builds the per-obstacle geometry, freezing only the terminal lateral
    /// addend from the reference trajectory (its defining conditional is
    /// discontinuous, so differentiating through it is not meaningful).
    fn freeze_geometry(&mut self, reference: &[DVector<T>]) {
        let cfg = self.p.cfg;
        self.geoms = self
            .p
            .obstacles
            .iter()
            .map(|ob| {
                let base = PairGeometry {
                    dims_i: self.p.ego_dims,
                    dims_j: (ob.length, ob.width),
                    dy_min: cfg.dy_min,
                    ds_min: cfg.ds_min,
                    decel_i: cfg.decel_max,
                    decel_j: ob.decel_max,
                    beta: cfg.beta,
                    gamma_extra: T::zero(),
                };
                let xr = &reference[self.n];
                let st = &ob.stages[self.n];
                let (sin_psi, _) = xr[crate::ego::IX_PSI].sin_cos();
                let v_y_i = xr[IX_V] * sin_psi;
                let gamma_extra = lateral_terminal_addend(
                    v_y_i,
                    st.v_y,
                    st.a_y,
                    cfg.a_y_max,
                    xr[IX_Y],
                    st.y_e,
                    cfg.big_m,
                );
                let terminal = PairGeometry { gamma_extra, ..base };
                ObstacleGeometry { base, terminal }
            })
            .collect();
    }

    fn geometry_at(&self, ob_idx: usize, k: usize) -> &PairGeometry<T> {
        if k == self.n {
            &self.geoms[ob_idx].terminal
        } else {
            &self.geoms[ob_idx].base
        }
    }

    /// Cost, L1 violation and worst violation of a rollout.
    fn evaluate(&self, states: Vec<DVector<T>>, u: &DVector<T>) -> Evaluation<T> {
        let cfg = self.p.cfg;
        let road = self.p.road;
        let n_l = self.n_l;
        let mut cost = T::zero();
        let mut f_buf = vec![T::zero(); 2 * n_l];
        let mut g_buf = [T::zero(); 3];
        let mut h_buf = [T::zero(); 2];
        for k in 1..=self.n {
            let x = states[k].as_slice();
            lane_dependent_output(x, road.lane_centers(), &self.p.refs.lane_speeds[k], &mut f_buf);
            for l in 0..n_l {
                cost += cfg.w_lane_track * f_buf[l] * f_buf[l];
                cost += cfg.w_speed_track * f_buf[n_l + l] * f_buf[n_l + l];
            }
            lane_independent_output(x, self.p.refs.v_d, &mut g_buf);
            cost += cfg.w_vd * g_buf[0] * g_buf[0];
            cost += cfg.w_zeta * g_buf[1] * g_buf[1];
            cost += cfg.w_lane_choice * g_buf[2] * g_buf[2];
            if let Some(prior) = self.p.prior_plan {
                predictability_output(x, prior[k], &mut h_buf);
                cost += cfg.w_plan_s * h_buf[0] * h_buf[0];
                cost += cfg.w_plan_y * h_buf[1] * h_buf[1];
            }
        }
        for k in 0..self.n {
            let uk = u.rows(k * self.nu, self.nu);
            cost += cfg.r_a_d * uk[IU_AD] * uk[IU_AD];
            cost += cfg.r_dpsi * uk[IU_DPSI] * uk[IU_DPSI];
            cost += cfg.r_u_zeta * uk[IU_ZETA] * uk[IU_ZETA];
            for j in IU_D0..self.nu {
                cost += cfg.r_u_d * uk[j] * uk[j];
            }
        }

        let mut viol_sum = T::zero();
        let mut viol_sq = T::zero();
        let mut max_viol = T::zero();
        let mut add = |c: T| {
            let v = (-c).max(T::zero());
            viol_sum += v;
            viol_sq += v * v;
            max_viol = max_viol.max(v);
        };
        for k in 1..=self.n {
            let x = states[k].as_slice();
            let kap = road.kappa(x[IX_S]);
            add(x[IX_V]);
            add(road.speed_limit() - x[IX_V]);
            add(x[IX_Y] - road.y_min());
            add(road.y_max() - x[IX_Y]);
            if let Some(s_max) = cfg.s_max {
                add(s_max - x[IX_S]);
            }
            add(friction_residual(x, kap, cfg.mu, cfg.eta, cfg.gravity, &cfg.ego));
            add(turning_residual(x, kap, cfg.kappa_max, &cfg.ego));
            if k == self.n {
                let m = terminal_margin(x, cfg.a_n_max);
                add(x[IX_Y] - road.y_min() - m);
                add(road.y_max() - m - x[IX_Y]);
            }
            for (i, ob) in self.p.obstacles.iter().enumerate() {
                let st = &ob.stages[k];
                add(collision_state_residual(
                    x,
                    (st.s, st.y_e, st.v_s),
                    self.geometry_at(i, k),
                    None,
                ));
            }
        }
        Evaluation { states, cost, viol_sum, viol_sq, max_viol }
    }

    /// Gathers screened soft-constraint rows at the current iterate.
    fn soft_rows(&self, states: &[DVector<T>]) -> Vec<SoftRow<T>> {
        let cfg = self.p.cfg;
        let road = self.p.road;
        let mut rows = Vec::new();
        let mut grad = DVector::zeros(self.nx);
        let screen_v = fl::<T>(5.0);
        let screen_y = fl::<T>(3.0);
        let screen_fric = fl::<T>(0.5) * cfg.mu * cfg.gravity;
        let screen_turn = T::one();
        let screen_coll = fl::<T>(8.0);
        for k in 1..=self.n {
            let x = states[k].as_slice();
            let kap = road.kappa(x[IX_S]);
            let kap_ds = road.kappa_ds(x[IX_S]);

            let c = x[IX_V];
            if c < screen_v {
                grad.fill(T::zero());
                grad[IX_V] = T::one();
                rows.push(SoftRow { stage: k, value: c, grad: grad.clone() });
            }
            let c = road.speed_limit() - x[IX_V];
            if c < screen_v {
                grad.fill(T::zero());
                grad[IX_V] = -T::one();
                rows.push(SoftRow { stage: k, value: c, grad: grad.clone() });
            }
            let c = x[IX_Y] - road.y_min();
            if c < screen_y {
                grad.fill(T::zero());
                grad[IX_Y] = T::one();
                rows.push(SoftRow { stage: k, value: c, grad: grad.clone() });
            }
            let c = road.y_max() - x[IX_Y];
            if c < screen_y {
                grad.fill(T::zero());
                grad[IX_Y] = -T::one();
                rows.push(SoftRow { stage: k, value: c, grad: grad.clone() });
            }
            if let Some(s_max) = cfg.s_max {
                let c = s_max - x[IX_S];
                if c < fl(100.0) {
                    grad.fill(T::zero());
                    grad[IX_S] = -T::one();
                    rows.push(SoftRow { stage: k, value: c, grad: grad.clone() });
                }
            }
            let c = friction_residual(x, kap, cfg.mu, cfg.eta, cfg.gravity, &cfg.ego);
            if c < screen_fric {
                friction_gradient(x, kap, kap_ds, cfg.eta, &cfg.ego, &mut grad);
                rows.push(SoftRow { stage: k, value: c, grad: grad.clone() });
            }
            let c = turning_residual(x, kap, cfg.kappa_max, &cfg.ego);
            if c < screen_turn {
                turning_gradient(x, kap, kap_ds, cfg.kappa_max, &cfg.ego, &mut grad);
                rows.push(SoftRow { stage: k, value: c, grad: grad.clone() });
            }
            if k == self.n {
                let m = terminal_margin(x, cfg.a_n_max);
                let mut mg = DVector::zeros(self.nx);
                terminal_margin_gradient(x, cfg.a_n_max, &mut mg);
                // y - y_lo - m >= 0
                grad.fill(T::zero());
                grad[IX_Y] = T::one();
                let row = &grad - &mg;
                rows.push(SoftRow {
                    stage: k,
                    value: x[IX_Y] - road.y_min() - m,
                    grad: row,
                });
                // y_hi - m - y >= 0
                grad.fill(T::zero());
                grad[IX_Y] = -T::one();
                let row = &grad - &mg;
                rows.push(SoftRow {
                    stage: k,
                    value: road.y_max() - m - x[IX_Y],
                    grad: row,
                });
            }
            for (i, ob) in self.p.obstacles.iter().enumerate() {
                let st = &ob.stages[k];
                let geom = self.geometry_at(i, k);
                let c = collision_state_residual(x, (st.s, st.y_e, st.v_s), geom, None);
                if c < screen_coll {
                    collision_state_residual(x, (st.s, st.y_e, st.v_s), geom, Some(&mut grad));
                    rows.push(SoftRow { stage: k, value: c, grad: grad.clone() });
                }
            }
        }
        rows
    }

    fn run(&mut self, warm: Option<&ManeuverPlan<T>>, t_p: T) -> SolveOutcome<T> {
        let cfg = self.p.cfg;
        let mut u = DVector::zeros(self.nv);
        if let Some(plan) = warm {
            if plan.inputs.len() == self.n && plan.inputs[0].u_d.len() == self.n_l - 1 {
                for (k, inp) in plan.inputs.iter().enumerate() {
                    let vec = inp.to_vector();
                    for j in 0..self.nu {
                        u[k * self.nu + j] = vec[j];
                    }
                }
            }
        }
        // Clamp warm-start inputs into their boxes.
        self.clamp_inputs(&mut u);

        let states = self.rollout(&u);
        self.freeze_geometry(&states);
        let mut cur = self.evaluate(states, &u);
        let mut nu_pen = cfg.penalty;
        let mut escalations = 0usize;

        let mut best_u = u.clone();
        let mut best = self.evaluate(self.rollout(&u), &u);

        let mut qp_iters = 0usize;
        let mut step_norm = T::zero();
        let mut iters_used = 0usize;
        let budget = if cfg.single_iteration { 1 } else { cfg.max_iters };

        let qp_settings = QpSettings::default();
        let mut qp_warm: Option<(DVector<T>, DVector<T>, T)> = None;
        while iters_used < budget {
            iters_used += 1;
            let (delta, qp_it) = self.qp_step(&cur, &u, nu_pen, &qp_settings, &mut qp_warm);
            qp_iters += qp_it;
            step_norm = delta.amax();

            let converged_step = step_norm <= fl::<T>(1e-7) * (T::one() + u.amax());
            let mut moved = false;
            if !converged_step {
                let merit_cur = cur.merit(nu_pen, cfg.penalty_quad);
                let mut alpha = T::one();
                for _ in 0..8 {
                    let u_try = self.clamped(&u + &delta * alpha);
                    let ev = self.evaluate(self.rollout(&u_try), &u_try);
                    let merit = ev.merit(nu_pen, cfg.penalty_quad);
                    if merit < merit_cur - fl::<T>(1e-12) * (T::one() + merit_cur.abs()) {
                        u = u_try;
                        cur = ev;
                        moved = true;
                        break;
                    }
                    alpha *= fl(0.5);
                }
            }
            if std::env::var_os("SQP_DEBUG").is_some() {
                eprintln!(
                    "sqp it {:2}: step {:9.2e} qp_it {:4} moved {:5} cost {:10.4} viol {:9.2e} (sum {:9.2e}) pen {:8.1e}",
                    iters_used,
                    step_norm.to_f64().unwrap_or(f64::NAN),
                    qp_it,
                    moved,
                    cur.cost.to_f64().unwrap_or(f64::NAN),
                    cur.max_viol.to_f64().unwrap_or(f64::NAN),
                    cur.viol_sum.to_f64().unwrap_or(f64::NAN),
                    nu_pen.to_f64().unwrap_or(f64::NAN)
                );
            }
            if self.better(&cur, &best) {
                best_u = u.clone();
                best = self.evaluate(self.rollout(&u), &u);
            }
            if moved {
                continue;
            }
            // Converged or stalled at the current penalty weight.
            if cur.max_viol > cfg.tol_viol && escalations < cfg.max_escalations {
                escalations += 1;
                nu_pen *= cfg.penalty_escalation;
                continue;
            }
            break;
        }

        let best_states = self.rollout(&best_u);
        let best = self.evaluate(best_states, &best_u);

        let diag = SolveDiag {
            iterations: iters_used,
            qp_iterations: qp_iters,
            escalations,
            max_violation: best.max_viol,
            cost: best.cost,
            step_norm,
        };
        if best.max_viol > cfg.tol_viol {
            return SolveOutcome::Infeasible { diag };
        }

        let states: Vec<EgoState<T>> =
            best.states.iter().map(|x| EgoState::from_slice(x.as_slice())).collect();
        let inputs: Vec<EgoInput<T>> = (0..self.n)
            .map(|k| EgoInput::from_slice(best_u.rows(k * self.nu, self.nu).as_slice()))
            .collect();
        let trajectory: Vec<(T, T)> = states.iter().map(|x| (x.s, x.y_e)).collect();
        let committed_lane = states[1].committed_lane();
        let first_inputs = (inputs[0].a_d, states[1].psi_d);
        let plan = ManeuverPlan {
            t_p,
            trajectory,
            states,
            inputs,
            first_inputs,
            committed_lane,
            cost: best.cost,
        };
        SolveOutcome::Feasible { plan, diag }
    }

    /// Lexicographic incumbent ordering: feasibility class first, then cost
    /// among feasible iterates or violation among infeasible ones.
    fn better(&self, cand: &Evaluation<T>, best: &Evaluation<T>) -> bool {
        let tol = self.p.cfg.tol_viol;
        let margin = fl::<T>(1e-12);
        match (cand.max_viol <= tol, best.max_viol <= tol) {
            (true, true) => cand.cost < best.cost - margin,
            (true, false) => true,
            (false, true) => false,
            (false, false) => cand.viol_sum < best.viol_sum - margin,
        }
    }

    fn clamp_inputs(&self, u: &mut DVector<T>) {
        let cfg = self.p.cfg;
        for k in 0..self.n {
            let base = k * self.nu;
            u[base + IU_AD] = cfg.a_d_box.clamp(u[base + IU_AD]);
            u[base + IU_DPSI] = cfg.dpsi_box.clamp(u[base + IU_DPSI]);
            u[base + IU_ZETA] = cfg.u_zeta_box.clamp(u[base + IU_ZETA]);
            for j in IU_D0..self.nu {
                u[base + j] = cfg.u_d_box.clamp(u[base + j]);
            }
        }
    }

    fn clamped(&self, mut u: DVector<T>) -> DVector<T> {
        self.clamp_inputs(&mut u);
        u
    }

    /// Builds and solves the condensed QP at the current iterate; returns
    /// the input move and QP iterations.
    fn qp_step(
        &self,
        cur: &Evaluation<T>,
        u: &DVector<T>,
        nu_pen: T,
        settings: &QpSettings<T>,
        warm: &mut Option<(DVector<T>, DVector<T>, T)>,
    ) -> (DVector<T>, usize) {
        let cfg = self.p.cfg;
        let road = self.p.road;
        let n_l = self.n_l;
        let table = self.curvature();

        // Condensing maps: e[k] is d x_k / d u_flat.
        let mut e: Vec<DMatrix<T>> = Vec::with_capacity(self.n + 1);
        e.push(DMatrix::zeros(self.nx, self.nv));
        for k in 0..self.n {
            let uk = u.rows(k * self.nu, self.nu).into_owned();
            let (_, phi_x, phi_u) =
                rk4_vec_sens(&cur.states[k], &uk, cfg.dt_h, table, &cfg.ego)
                    .expect("rollout already validated the trajectory");
            let mut ek1 = &phi_x * &e[k];
            ek1.view_mut((0, k * self.nu), (self.nx, self.nu)).copy_from(&phi_u);
            e.push(ek1);
        }

        // Least-squares rows of the Gauss-Newton model.
        let rows_per_stage = 2 * n_l + 3 + if self.use_prior { 2 } else { 0 };
        let n_rows = self.n * rows_per_stage + self.nv;
        let mut jac = DMatrix::zeros(n_rows, self.nv);
        let mut res = DVector::zeros(n_rows);
        let mut row = 0usize;
        let mut f_buf = vec![T::zero(); 2 * n_l];
        let mut g_buf = [T::zero(); 3];
        let mut h_buf = [T::zero(); 2];
        let mut jf = DMatrix::zeros(2 * n_l, self.nx);
        let mut jg = DMatrix::zeros(3, self.nx);
        let mut jh = DMatrix::zeros(2, self.nx);
        for k in 1..=self.n {
            let x = cur.states[k].as_slice();
            let speeds = &self.p.refs.lane_speeds[k];
            lane_dependent_output(x, road.lane_centers(), speeds, &mut f_buf);
            lane_dependent_jacobian(x, road.lane_centers(), speeds, &mut jf);
            for l in 0..2 * n_l {
                let w = if l < n_l { cfg.w_lane_track } else { cfg.w_speed_track };
                let sw = w.sqrt();
                res[row] = sw * f_buf[l];
                let jrow = jf.row(l) * &e[k];
                for c in 0..self.nv {
                    jac[(row, c)] = sw * jrow[c];
                }
                row += 1;
            }
            lane_independent_output(x, self.p.refs.v_d, &mut g_buf);
            lane_independent_jacobian(x, &mut jg);
            for (i, w) in [cfg.w_vd, cfg.w_zeta, cfg.w_lane_choice].into_iter().enumerate() {
                let sw = w.sqrt();
                res[row] = sw * g_buf[i];
                let jrow = jg.row(i) * &e[k];
                for c in 0..self.nv {
                    jac[(row, c)] = sw * jrow[c];
                }
                row += 1;
            }
            if let Some(prior) = self.p.prior_plan {
                predictability_output(x, prior[k], &mut h_buf);
                predictability_jacobian(&mut jh);
                for (i, w) in [cfg.w_plan_s, cfg.w_plan_y].into_iter().enumerate() {
                    let sw = w.sqrt();
                    res[row] = sw * h_buf[i];
                    let jrow = jh.row(i) * &e[k];
                    for c in 0..self.nv {
                        jac[(row, c)] = sw * jrow[c];
                    }
                    row += 1;
                }
            }
        }
        for k in 0..self.n {
            let base = k * self.nu;
            for j in 0..self.nu {
                let w = match j {
                    IU_AD => cfg.r_a_d,
                    IU_DPSI => cfg.r_dpsi,
                    IU_ZETA => cfg.r_u_zeta,
                    _ => cfg.r_u_d,
                };
                let sw = w.sqrt();
                res[row] = sw * u[base + j];
                jac[(row, base + j)] = sw;
                row += 1;
            }
        }
        debug_assert_eq!(row, n_rows);

        let soft = self.soft_rows(&cur.states);
        let n_soft = soft.len();
        let nvar = self.nv + n_soft;

        let jtj = jac.transpose() * &jac;
        let jtr = jac.transpose() * &res;
        let mut p_mat = DMatrix::zeros(nvar, nvar);
        let two = fl::<T>(2.0);
        for i in 0..self.nv {
            for j in 0..self.nv {
                p_mat[(i, j)] = two * jtj[(i, j)];
            }
            p_mat[(i, i)] += fl(1e-8);
        }
        let mut q_vec = DVector::zeros(nvar);
        for i in 0..self.nv {
            q_vec[i] = two * jtr[i];
        }
        for t in 0..n_soft {
            p_mat[(self.nv + t, self.nv + t)] = two * cfg.penalty_quad + fl(1e-8);
            q_vec[self.nv + t] = nu_pen;
        }

        // Constraint rows: input boxes, hard state rows, soft rows, slacks.
        let hard_per_stage = 4 + (n_l - 1); // psi_d, a_t, zeta, d_sum, d_l
        let m_rows = self.nv + self.n * hard_per_stage + 2 * n_soft;
        let mut a_mat = DMatrix::zeros(m_rows, nvar);
        let mut lo = DVector::zeros(m_rows);
        let mut hi = DVector::zeros(m_rows);
        let mut r = 0usize;
        for k in 0..self.n {
            let base = k * self.nu;
            for j in 0..self.nu {
                let b = match j {
                    IU_AD => cfg.a_d_box,
                    IU_DPSI => cfg.dpsi_box,
                    IU_ZETA => cfg.u_zeta_box,
                    _ => cfg.u_d_box,
                };
                a_mat[(r, base + j)] = T::one();
                lo[r] = b.lo - u[base + j];
                hi[r] = (b.hi - u[base + j]).max(lo[r]);
                r += 1;
            }
        }
        let state_row = |r: &mut usize,
                             a_mat: &mut DMatrix<T>,
                             lo: &mut DVector<T>,
                             hi: &mut DVector<T>,
                             k: usize,
                             grad: &DVector<T>,
                             val: T,
                             b_lo: T,
                             b_hi: T| {
            let jrow = grad.transpose() * &e[k];
            for c in 0..self.nv {
                a_mat[(*r, c)] = jrow[(0, c)];
            }
            lo[*r] = b_lo - val;
            hi[*r] = (b_hi - val).max(lo[*r]);
            *r += 1;
        };
        let mut grad = DVector::zeros(self.nx);
        for k in 1..=self.n {
            let x = cur.states[k].as_slice();
            grad.fill(T::zero());
            grad[IX_PSI_D] = T::one();
            state_row(&mut r, &mut a_mat, &mut lo, &mut hi, k, &grad, x[IX_PSI_D],
                cfg.psi_d_box.lo, cfg.psi_d_box.hi);
            grad.fill(T::zero());
            grad[IX_A] = T::one();
            state_row(&mut r, &mut a_mat, &mut lo, &mut hi, k, &grad, x[IX_A],
                cfg.a_t_box.lo, cfg.a_t_box.hi);
            grad.fill(T::zero());
            grad[IX_ZETA] = T::one();
            state_row(&mut r, &mut a_mat, &mut lo, &mut hi, k, &grad, x[IX_ZETA],
                T::zero(), road.speed_limit());
            // 0 <= sum(d_l) <= 1 keeps the eliminated lane decision in range.
            grad.fill(T::zero());
            let mut sum_d = T::zero();
            for j in IX_D0..self.nx {
                grad[j] = T::one();
                sum_d += x[j];
            }
            state_row(&mut r, &mut a_mat, &mut lo, &mut hi, k, &grad, sum_d, T::zero(), T::one());
            for j in IX_D0..self.nx {
                grad.fill(T::zero());
                grad[j] = T::one();
                state_row(&mut r, &mut a_mat, &mut lo, &mut hi, k, &grad, x[j],
                    T::zero(), T::one());
            }
        }
        for (t, srow) in soft.iter().enumerate() {
            let jrow = srow.grad.transpose() * &e[srow.stage];
            for c in 0..self.nv {
                a_mat[(r, c)] = jrow[(0, c)];
            }
            a_mat[(r, self.nv + t)] = T::one();
            lo[r] = -srow.value;
            hi[r] = inf();
            r += 1;
            a_mat[(r, self.nv + t)] = T::one();
            lo[r] = T::zero();
            hi[r] = inf();
            r += 1;
        }
        debug_assert_eq!(r, m_rows);

        // Warm-start from the previous SQP iteration's QP when the active
        // screening set (and hence the dimensions) did not change.
        let warm_ref = warm
            .as_ref()
            .filter(|(x, y, _)| x.len() == nvar && y.len() == m_rows)
            .map(|(x, y, rho)| QpWarmStart { x, y, rho: Some(*rho) });
        let sol = qp::solve(&p_mat, &q_vec, &a_mat, &lo, &hi, settings, warm_ref);
        let delta = DVector::from_fn(self.nv, |i, _| sol.x[i]);
        // The primal move is consumed immediately; future iterations start
        // from a zero move with the accumulated duals.
        let mut x_next = DVector::zeros(nvar);
        for t in 0..n_soft {
            x_next[self.nv + t] = sol.x[self.nv + t];
        }
        *warm = Some((x_next, sol.y.clone(), sol.rho_final));
        (delta, sol.iterations)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ocp::ObstacleStage;
    use crate::road::CurvatureTable;

    fn road() -> RoadLink<f64> {
        RoadLink::new(5000.0, 3, 3.5, 33.3, CurvatureTable::straight(), 30.0).unwrap()
    }

    fn cruising_refs(v: f64, n_h: usize) -> SpeedRefs<f64> {
        SpeedRefs::constant(v, &[v, v, v], n_h)
    }

    #[test]
    fn stationary_point_on_empty_road() {
        let cfg = OcpConfig::<f64>::default();
        let road = road();
        let mut x0 = EgoState::in_lane(1, 3, 0.0, 100.0, 24.0);
        x0.zeta = 24.0; // slack state tracks v_d; start it at its target
        let refs = cruising_refs(24.0, cfg.n_h);
        let problem = OcpProblem {
            cfg: &cfg,
            road: &road,
            x0: &x0,
            refs: &refs,
            prior_plan: None,
            obstacles: &[],
            ego_dims: (5.0, 2.0),
        };
        let outcome = solve(&problem, None, 0.0);
        let plan = outcome.plan().expect("feasible");
        assert_eq!(plan.committed_lane, 1);
        assert!(plan.cost < 1e-4, "cost {}", plan.cost);
        assert!(plan.inputs[0].a_d.abs() < 1e-3);
        assert!(plan.inputs[0].dpsi_d.abs() < 1e-4);
        for (k, st) in plan.states.iter().enumerate() {
            assert!((st.v_t - 24.0).abs() < 1e-2, "stage {k}: v {}", st.v_t);
            assert!(st.y_e.abs() < 1e-3);
        }
    }

    #[test]
    fn accelerates_toward_desired_speed() {
        let cfg = OcpConfig::<f64>::default();
        let road = road();
        let x0 = EgoState::in_lane(2, 3, 3.5, 100.0, 19.0);
        let refs = cruising_refs(24.0, cfg.n_h);
        let problem = OcpProblem {
            cfg: &cfg,
            road: &road,
            x0: &x0,
            refs: &refs,
            prior_plan: None,
            obstacles: &[],
            ego_dims: (5.0, 2.0),
        };
        let outcome = solve(&problem, None, 0.0);
        let plan = outcome.plan().expect("feasible");
        assert_eq!(plan.committed_lane, 2);
        for w in plan.states.windows(2) {
            // tiny terminal overshoot ripple is fine
            assert!(w[1].v_t >= w[0].v_t - 5e-3, "speed not monotone");
        }
        assert!(plan.states.last().unwrap().v_t > 22.0);
        // no lane change
        for st in &plan.states {
            assert!((st.y_e - 3.5).abs() < 0.05);
        }
    }

    #[test]
    fn plans_satisfy_lane_normalization() {
        let cfg = OcpConfig::<f64>::default();
        let road = road();
        let mut x0 = EgoState::in_lane(1, 3, 0.2, 50.0, 21.0);
        x0.d = vec![0.8, 0.15];
        let refs = SpeedRefs::constant(24.0, &[21.0, 24.0, 22.0], cfg.n_h);
        let problem = OcpProblem {
            cfg: &cfg,
            road: &road,
            x0: &x0,
            refs: &refs,
            prior_plan: None,
            obstacles: &[],
            ego_dims: (5.0, 2.0),
        };
        let outcome = solve(&problem, None, 0.0);
        let plan = outcome.plan().expect("feasible");
        for st in &plan.states {
            let full = st.d_full();
            let sum: f64 = full.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "sum d = {sum}");
            for d in full {
                assert!((-1e-6..=1.0 + 1e-6).contains(&d), "d = {d}");
            }
        }
    }

    #[test]
    fn resolve_from_own_solution_does_not_increase_cost() {
        let cfg = OcpConfig::<f64>::default();
        let road = road();
        let x0 = EgoState::in_lane(1, 3, 0.3, 60.0, 20.0);
        let refs = SpeedRefs::constant(23.0, &[22.0, 23.0, 24.0], cfg.n_h);
        // A leader 45 m ahead makes the problem non-trivial.
        let stages: Vec<ObstacleStage<f64>> = (0..=cfg.n_h)
            .map(|k| ObstacleStage {
                s: 105.0 + 19.0 * cfg.dt_h * k as f64,
                y_e: 0.0,
                v_s: 19.0,
                v_y: 0.0,
                a_y: 0.0,
            })
            .collect();
        let obstacles = vec![ObstacleTrajectory {
            stages,
            length: 5.0,
            width: 2.0,
            decel_max: 6.0,
        }];
        let problem = OcpProblem {
            cfg: &cfg,
            road: &road,
            x0: &x0,
            refs: &refs,
            prior_plan: None,
            obstacles: &obstacles,
            ego_dims: (5.0, 2.0),
        };
        let first = solve(&problem, None, 0.0);
        let plan1 = first.plan().expect("feasible").clone();
        let second = solve(&problem, Some(&plan1), 0.0);
        let plan2 = second.plan().expect("feasible");
        assert!(
            plan2.cost <= plan1.cost + 1e-8,
            "cost increased: {} -> {}",
            plan1.cost,
            plan2.cost
        );
    }
}
