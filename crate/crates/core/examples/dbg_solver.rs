use lanesim_core::ego::EgoState;
use lanesim_core::ocp::solver::{solve, OcpProblem, SpeedRefs};
use lanesim_core::ocp::{ObstacleStage, ObstacleTrajectory, OcpConfig};
use lanesim_core::road::{CurvatureTable, RoadLink};
use std::time::Instant;

fn main() {
    let cfg = OcpConfig::<f64>::default();
    let road = RoadLink::new(5000.0, 3, 3.5, 33.3, CurvatureTable::straight(), 30.0).unwrap();
    let refs = SpeedRefs::constant(24.0, &[24.0, 24.0, 24.0], cfg.n_h);

    // Scenario: following a slower leader with a neighbor alongside.
    let mk_obs = |s0: f64, y: f64, v: f64| -> ObstacleTrajectory<f64> {
        let stages = (0..=cfg.n_h)
            .map(|k| ObstacleStage { s: s0 + v * cfg.dt_h * k as f64, y_e: y, v_s: v, v_y: 0.0, a_y: 0.0 })
            .collect();
        ObstacleTrajectory { stages, length: 5.0, width: 2.0, decel_max: 6.0 }
    };
    let obstacles = vec![mk_obs(135.0, 0.0, 20.0), mk_obs(95.0, 3.5, 21.0)];
    let mut x0 = EgoState::in_lane(1, 3, 0.0, 100.0, 22.0);
    x0.zeta = 10.0;

    let problem = OcpProblem {
        cfg: &cfg, road: &road, x0: &x0, refs: &refs,
        prior_plan: None, obstacles: &obstacles, ego_dims: (5.0, 2.0),
    };
    let t0 = Instant::now();
    let outcome = solve(&problem, None, 0.0);
    let cold_ms = t0.elapsed().as_secs_f64() * 1e3;
    let d = outcome.diag();
    println!("cold: {cold_ms:.1} ms, iters {} qp {} viol {:.2e} cost {:.3}", d.iterations, d.qp_iterations, d.max_violation, d.cost);

    let mut plan = outcome.plan().unwrap().clone();
    let t0 = Instant::now();
    let reps = 50;
    let mut qp_total = 0usize;
    let mut sqp_total = 0usize;
    for _ in 0..reps {
        let out = solve(&problem, Some(&plan), 0.0);
        qp_total += out.diag().qp_iterations;
        sqp_total += out.diag().iterations;
        plan = out.plan().unwrap().clone();
    }
    let warm_ms = t0.elapsed().as_secs_f64() * 1e3 / reps as f64;
    println!("warm: {warm_ms:.2} ms/solve, sqp {:.1}, qp {:.0} per solve", sqp_total as f64 / reps as f64, qp_total as f64 / reps as f64);
}
