//! Dense convex QP solver for the SQP subproblems:
//!
//! ```text
//!     minimize    0.5 x' P x + q' x
//!     subject to  l <= A x <= u
//! ```
//!
//! Operator-splitting (ADMM) method in the style of OSQP: Ruiz
//! equilibration, a cached Cholesky factorization of `P + sigma I + A' R A`,
//! over-relaxed iterations, adaptive penalty, and an optional active-set
//! polish solve. Problems here are small (a few hundred variables) so all
//! linear algebra is dense.

use crate::real::{fl, Real};
use nalgebra::{Cholesky, DMatrix, DVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Solved,
    MaxIterations,
}

#[derive(Debug, Clone)]
pub struct QpSolution<T: Real> {
    pub x: DVector<T>,
    pub y: DVector<T>,
    pub status: QpStatus,
    pub iterations: usize,
    pub prim_res: T,
    pub dual_res: T,
    /// Adapted penalty parameter, reusable as `rho` in a warm start.
    pub rho_final: T,
}

/// Warm-start data from a related problem of identical dimensions.
#[derive(Debug, Clone, Copy)]
pub struct QpWarmStart<'a, T: Real> {
    pub x: &'a DVector<T>,
    pub y: &'a DVector<T>,
    pub rho: Option<T>,
}

#[derive(Debug, Clone)]
pub struct QpSettings<T: Real> {
    pub eps_abs: T,
    pub eps_rel: T,
    pub max_iter: usize,
    pub check_every: usize,
    pub sigma: T,
    pub alpha: T,
    pub rho0: T,
    pub scaling_rounds: usize,
    pub polish: bool,
}

impl<T: Real> Default for QpSettings<T> {
    fn default() -> Self {
        Self {
            eps_abs: fl(1e-6),
            eps_rel: fl(1e-6),
            max_iter: 500,
            check_every: 25,
            sigma: fl(1e-6),
            alpha: fl(1.6),
            rho0: fl(1.0),
            scaling_rounds: 10,
            polish: true,
        }
    }
}

struct Scaling<T: Real> {
    d: DVector<T>, // variable scaling
    e: DVector<T>, // constraint scaling
    c: T,          // cost scaling
}

fn col_inf_norm<T: Real>(m: &DMatrix<T>, j: usize) -> T {
    let mut v = T::zero();
    for i in 0..m.nrows() {
        v = v.max(m[(i, j)].abs());
    }
    v
}

fn row_inf_norm<T: Real>(m: &DMatrix<T>, i: usize) -> T {
    let mut v = T::zero();
    for j in 0..m.ncols() {
        v = v.max(m[(i, j)].abs());
    }
    v
}

fn limit<T: Real>(x: T) -> T {
    // Guard equilibration factors against zero rows/columns.
    if x < fl(1e-8) {
        T::one()
    } else {
        x
    }
}

/// Ruiz equilibration of the stacked problem data, in place.
fn equilibrate<T: Real>(
    p: &mut DMatrix<T>,
    q: &mut DVector<T>,
    a: &mut DMatrix<T>,
    l: &mut DVector<T>,
    u: &mut DVector<T>,
    rounds: usize,
) -> Scaling<T> {
    let n = p.nrows();
    let m = a.nrows();
    let mut d = DVector::from_element(n, T::one());
    let mut e = DVector::from_element(m, T::one());
    let mut c = T::one();
    for _ in 0..rounds {
        for j in 0..n {
            let norm = limit(col_inf_norm(p, j).max(col_inf_norm(a, j)));
            let delta = T::one() / norm.sqrt();
            for i in 0..n {
                p[(i, j)] *= delta;
                p[(j, i)] *= delta;
            }
            for i in 0..m {
                a[(i, j)] *= delta;
            }
            q[j] *= delta;
            d[j] *= delta;
        }
        for i in 0..m {
            let norm = limit(row_inf_norm(a, i));
            let eps = T::one() / norm.sqrt();
            for j in 0..n {
                a[(i, j)] *= eps;
            }
            l[i] *= eps;
            u[i] *= eps;
            e[i] *= eps;
        }
        // Cost scaling keeps the objective magnitude near unity.
        let mut mean_col = T::zero();
        for j in 0..n {
            mean_col += col_inf_norm(p, j);
        }
        mean_col /= fl(n.max(1) as f64);
        let qn = q.amax();
        let gamma = T::one() / limit(mean_col.max(qn));
        if gamma < T::one() {
            *p *= gamma;
            *q *= gamma;
            c *= gamma;
        }
    }
    Scaling { d, e, c }
}

fn factorize<T: Real>(
    p: &DMatrix<T>,
    a: &DMatrix<T>,
    rho: &DVector<T>,
    sigma: T,
) -> Cholesky<T, nalgebra::Dyn> {
    let n = p.nrows();
    let mut m = p.clone();
    for i in 0..n {
        m[(i, i)] += sigma;
    }
    // m += A' R A
    for r in 0..a.nrows() {
        let w = rho[r];
        for i in 0..n {
            let ai = a[(r, i)];
            if ai == T::zero() {
                continue;
            }
            let wai = w * ai;
            for j in 0..n {
                m[(i, j)] += wai * a[(r, j)];
            }
        }
    }
    let mut bump = sigma;
    loop {
        match Cholesky::new(m.clone()) {
            Some(ch) => return ch,
            None => {
                bump *= fl(100.0);
                for i in 0..n {
                    m[(i, i)] += bump;
                }
            }
        }
    }
}

/// Solves the QP, optionally warm-started.
pub fn solve<T: Real>(
    p_in: &DMatrix<T>,
    q_in: &DVector<T>,
    a_in: &DMatrix<T>,
    l_in: &DVector<T>,
    u_in: &DVector<T>,
    settings: &QpSettings<T>,
    warm: Option<QpWarmStart<'_, T>>,
) -> QpSolution<T> {
    let n = p_in.nrows();
    let m = a_in.nrows();
    assert_eq!(q_in.len(), n);
    assert_eq!(a_in.ncols(), n);
    assert_eq!(l_in.len(), m);
    assert_eq!(u_in.len(), m);

    let mut p = p_in.clone();
    let mut q = q_in.clone();
    let mut a = a_in.clone();
    let mut l = l_in.clone();
    let mut u = u_in.clone();
    let scal = equilibrate(&mut p, &mut q, &mut a, &mut l, &mut u, settings.scaling_rounds);

    let mut rho_base = warm.and_then(|w| w.rho).unwrap_or(settings.rho0);
    let rho_vec = |base: T, l: &DVector<T>, u: &DVector<T>| -> DVector<T> {
        DVector::from_fn(m, |i, _| {
            if u[i] - l[i] < fl(1e-12) {
                base * fl(1e3) // equality rows
            } else {
                base
            }
        })
    };
    let mut rho = rho_vec(rho_base, &l, &u);
    let mut chol = factorize(&p, &a, &rho, settings.sigma);

    // Scaled-space iterates.
    let mut x = match warm {
        Some(w) => DVector::from_fn(n, |i, _| w.x[i] / scal.d[i]),
        None => DVector::zeros(n),
    };
    let mut y = match warm {
        Some(w) => DVector::from_fn(m, |i, _| w.y[i] * scal.c / scal.e[i]),
        None => DVector::zeros(m),
    };
    let mut z = {
        let az = &a * &x;
        DVector::from_fn(m, |i, _| az[i].clamp(l[i], u[i]))
    };

    let mut status = QpStatus::MaxIterations;
    let mut iterations = settings.max_iter;
    let mut prim_res = T::zero();
    let mut dual_res = T::zero();
    let mut refactor_budget = 12usize;

    for it in 0..settings.max_iter {
        // x-update
        let mut rhs = &x * settings.sigma - &q;
        for r in 0..m {
            let w = rho[r] * z[r] - y[r];
            if w != T::zero() {
                for j in 0..n {
                    rhs[j] += a[(r, j)] * w;
                }
            }
        }
        let x_tilde = chol.solve(&rhs);
        let az_tilde = &a * &x_tilde;
        // over-relaxation
        let one_m_alpha = T::one() - settings.alpha;
        let x_next = &x_tilde * settings.alpha + &x * one_m_alpha;
        let mut z_next = DVector::zeros(m);
        let mut y_next = DVector::zeros(m);
        for i in 0..m {
            let mixed = settings.alpha * az_tilde[i] + one_m_alpha * z[i];
            let cand = mixed + y[i] / rho[i];
            let zc = cand.clamp(l[i], u[i]);
            y_next[i] = y[i] + rho[i] * (mixed - zc);
            z_next[i] = zc;
        }
        x = x_next;
        z = z_next;
        y = y_next;

        if (it + 1) % settings.check_every == 0 || it + 1 == settings.max_iter {
            // Residuals in unscaled units.
            let ax = &a * &x;
            let mut rp = T::zero();
            let mut ax_n = T::zero();
            let mut z_n = T::zero();
            for i in 0..m {
                let si = T::one() / scal.e[i];
                rp = rp.max(((ax[i] - z[i]) * si).abs());
                ax_n = ax_n.max((ax[i] * si).abs());
                z_n = z_n.max((z[i] * si).abs());
            }
            let px = &p * &x;
            let aty = a.transpose() * &y;
            let mut rd = T::zero();
            let mut px_n = T::zero();
            let mut q_n = T::zero();
            let mut aty_n = T::zero();
            let cinv = T::one() / scal.c;
            for j in 0..n {
                let sj = cinv / scal.d[j];
                rd = rd.max(((px[j] + q[j] + aty[j]) * sj).abs());
                px_n = px_n.max((px[j] * sj).abs());
                q_n = q_n.max((q[j] * sj).abs());
                aty_n = aty_n.max((aty[j] * sj).abs());
            }
            prim_res = rp;
            dual_res = rd;
            let eps_p = settings.eps_abs + settings.eps_rel * ax_n.max(z_n);
            let eps_d = settings.eps_abs + settings.eps_rel * px_n.max(q_n).max(aty_n);
            if std::env::var_os("QP_DEBUG").is_some() {
                eprintln!(
                    "qp it {:4}: rp {:9.2e} (eps {:8.2e}) rd {:9.2e} (eps {:8.2e}) rho {:8.2e}",
                    it + 1,
                    rp.to_f64().unwrap_or(f64::NAN),
                    eps_p.to_f64().unwrap_or(f64::NAN),
                    rd.to_f64().unwrap_or(f64::NAN),
                    eps_d.to_f64().unwrap_or(f64::NAN),
                    rho_base.to_f64().unwrap_or(f64::NAN)
                );
            }
            if rp <= eps_p && rd <= eps_d {
                status = QpStatus::Solved;
                iterations = it + 1;
                break;
            }
            // Adaptive penalty.
            let num = rp / limit(ax_n.max(z_n));
            let den = rd / limit(px_n.max(q_n).max(aty_n));
            let ratio = (num / limit(den)).sqrt().clamp(fl(1e-4), fl(1e4));
            if (ratio > fl(5.0) || ratio < fl(0.2)) && refactor_budget > 0 {
                rho_base = (rho_base * ratio).clamp(fl(1e-5), fl(1e5));
                rho = rho_vec(rho_base, &l, &u);
                chol = factorize(&p, &a, &rho, settings.sigma);
                refactor_budget -= 1;
            }
        }
    }

    // Unscale.
    let mut x_out = DVector::zeros(n);
    for j in 0..n {
        x_out[j] = x[j] * scal.d[j];
    }
    let mut y_out = DVector::zeros(m);
    for i in 0..m {
        y_out[i] = y[i] * scal.e[i] / scal.c;
    }

    if settings.polish {
        if let Some((xp, yp)) = polish(p_in, q_in, a_in, l_in, u_in, &x_out, &y_out) {
            let (rp_old, rd_old) = kkt_residuals(p_in, q_in, a_in, l_in, u_in, &x_out, &y_out);
            let (rp_new, rd_new) = kkt_residuals(p_in, q_in, a_in, l_in, u_in, &xp, &yp);
            if rp_new.max(rd_new) < rp_old.max(rd_old) {
                x_out = xp;
                y_out = yp;
                prim_res = rp_new;
                dual_res = rd_new;
                status = QpStatus::Solved;
            }
        }
    }

    QpSolution {
        x: x_out,
        y: y_out,
        status,
        iterations,
        prim_res,
        dual_res,
        rho_final: rho_base,
    }
}

/// Unscaled KKT residuals (primal, dual) of a candidate solution.
pub fn kkt_residuals<T: Real>(
    p: &DMatrix<T>,
    q: &DVector<T>,
    a: &DMatrix<T>,
    l: &DVector<T>,
    u: &DVector<T>,
    x: &DVector<T>,
    y: &DVector<T>,
) -> (T, T) {
    let ax = a * x;
    let mut rp = T::zero();
    for i in 0..a.nrows() {
        let viol = (l[i] - ax[i]).max(ax[i] - u[i]).max(T::zero());
        rp = rp.max(viol);
    }
    let grad = p * x + q + a.transpose() * y;
    (rp, grad.amax())
}

/// Active-set polish: re-solves the equality-constrained problem on the
/// detected active set for a high-accuracy solution.
fn polish<T: Real>(
    p: &DMatrix<T>,
    q: &DVector<T>,
    a: &DMatrix<T>,
    l: &DVector<T>,
    u: &DVector<T>,
    x: &DVector<T>,
    y: &DVector<T>,
) -> Option<(DVector<T>, DVector<T>)> {
    let n = p.nrows();
    let m = a.nrows();
    let ax = a * x;
    let mut active: Vec<(usize, T)> = Vec::new();
    let tol = fl::<T>(1e-5);
    for i in 0..m {
        let span = T::one().max(l[i].abs().min(u[i].abs()));
        if y[i] < -tol || (ax[i] - l[i]).abs() <= tol * span {
            if l[i] > fl(-1e30) {
                active.push((i, l[i]));
                continue;
            }
        }
        if y[i] > tol || (u[i] - ax[i]).abs() <= tol * span {
            if u[i] < fl(1e30) {
                active.push((i, u[i]));
            }
        }
    }
    let k = active.len();
    let dim = n + k;
    let delta = fl::<T>(1e-9);
    let mut kkt = DMatrix::zeros(dim, dim);
    let mut rhs = DVector::zeros(dim);
    for i in 0..n {
        for j in 0..n {
            kkt[(i, j)] = p[(i, j)];
        }
        kkt[(i, i)] += delta;
        rhs[i] = -q[i];
    }
    for (r, &(row, b)) in active.iter().enumerate() {
        for j in 0..n {
            kkt[(n + r, j)] = a[(row, j)];
            kkt[(j, n + r)] = a[(row, j)];
        }
        kkt[(n + r, n + r)] = -delta;
        rhs[n + r] = b;
    }
    let lu = kkt.lu();
    let sol = lu.solve(&rhs)?;
    let xp = DVector::from_fn(n, |i, _| sol[i]);
    let mut yp = DVector::zeros(m);
    for (r, &(row, _)) in active.iter().enumerate() {
        yp[row] = sol[n + r];
    }
    // Reject a polish that leaves the feasible set.
    let axp = a * &xp;
    for i in 0..m {
        let span = T::one().max(l[i].abs().min(u[i].abs()));
        if axp[i] < l[i] - fl::<T>(1e-6) * span || axp[i] > u[i] + fl::<T>(1e-6) * span {
            return None;
        }
    }
    Some((xp, yp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::real::inf;

    fn settings() -> QpSettings<f64> {
        QpSettings::default()
    }

    #[test]
    fn box_qp_hits_bounds() {
        // min 0.5 (x1^2 + x2^2) - x1 - x2, 0 <= x1 <= 0.5, 0 <= x2 <= 2
        let p = DMatrix::identity(2, 2);
        let q = DVector::from_vec(vec![-1.0, -1.0]);
        let a = DMatrix::identity(2, 2);
        let l = DVector::from_vec(vec![0.0, 0.0]);
        let u = DVector::from_vec(vec![0.5, 2.0]);
        let sol = solve(&p, &q, &a, &l, &u, &settings(), None);
        assert_eq!(sol.status, QpStatus::Solved);
        assert!((sol.x[0] - 0.5).abs() < 1e-6, "{}", sol.x[0]);
        assert!((sol.x[1] - 1.0).abs() < 1e-6, "{}", sol.x[1]);
    }

    #[test]
    fn equality_row_enforced() {
        // min 0.5 ||x||^2 s.t. x1 + x2 = 1 -> x = (0.5, 0.5)
        let p = DMatrix::identity(2, 2);
        let q = DVector::zeros(2);
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        let l = DVector::from_vec(vec![1.0]);
        let u = DVector::from_vec(vec![1.0]);
        let sol = solve(&p, &q, &a, &l, &u, &settings(), None);
        assert!((sol.x[0] - 0.5).abs() < 1e-6);
        assert!((sol.x[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn one_sided_l1_slack_matches_analytic() {
        // min 0.5 (d)^2 + nu*t  s.t. t >= c - d, t >= 0  (elastic constraint
        // d >= c). For nu > c the constraint is enforced exactly: d = c, t = 0.
        let c = 2.0;
        let nu = 10.0;
        let mut p = DMatrix::zeros(2, 2);
        p[(0, 0)] = 1.0;
        p[(1, 1)] = 1e-8;
        let q = DVector::from_vec(vec![0.0, nu]);
        // rows: d + t >= c ; t >= 0
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 0.0, 1.0]);
        let l = DVector::from_vec(vec![c, 0.0]);
        let u = DVector::from_vec(vec![inf(), inf()]);
        let sol = solve(&p, &q, &a, &l, &u, &settings(), None);
        assert!((sol.x[0] - c).abs() < 1e-5, "{}", sol.x[0]);
        assert!(sol.x[1].abs() < 1e-5, "{}", sol.x[1]);
    }

    #[test]
    fn random_qps_satisfy_kkt() {
        // Deterministic pseudo-random problems; verify KKT conditions.
        let mut state = 0x9e3779b97f4a7c15u64;
        let mut next = move || {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
        };
        for case in 0..25 {
            let n = 4 + case % 5;
            let m = 3 + case % 7;
            let b = DMatrix::from_fn(n, n, |_, _| next());
            let p = &b * b.transpose() + DMatrix::identity(n, n) * 0.1;
            let q = DVector::from_fn(n, |_, _| next() * 2.0);
            let a = DMatrix::from_fn(m, n, |_, _| next());
            let mut l = DVector::from_fn(m, |_, _| next() - 1.0);
            let mut u = DVector::from_fn(m, |_, _| next() + 1.0);
            for i in 0..m {
                if l[i] > u[i] {
                    std::mem::swap(&mut l[i], &mut u[i]);
                }
            }
            let sol = solve(&p, &q, &a, &l, &u, &settings(), None);
            let (rp, rd) = kkt_residuals(&p, &q, &a, &l, &u, &sol.x, &sol.y);
            assert!(rp < 1e-5, "case {case}: primal residual {rp}");
            assert!(rd < 1e-4, "case {case}: dual residual {rd}");
            // Dual signs: y_i <= 0 only at lower bound, >= 0 only at upper.
            let ax = &a * &sol.x;
            for i in 0..m {
                if sol.y[i] > 1e-6 {
                    assert!((ax[i] - u[i]).abs() < 1e-4, "case {case} row {i}");
                }
                if sol.y[i] < -1e-6 {
                    assert!((ax[i] - l[i]).abs() < 1e-4, "case {case} row {i}");
                }
            }
        }
    }

    #[test]
    fn warm_start_shortens_iterations() {
        let p = DMatrix::identity(3, 3) * 2.0;
        let q = DVector::from_vec(vec![-1.0, -2.0, 3.0]);
        let a = DMatrix::identity(3, 3);
        let l = DVector::from_element(3, -1.0);
        let u = DVector::from_element(3, 1.0);
        let cold = solve(&p, &q, &a, &l, &u, &settings(), None);
        let ws = QpWarmStart { x: &cold.x, y: &cold.y, rho: Some(cold.rho_final) };
        let warm = solve(&p, &q, &a, &l, &u, &settings(), Some(ws));
        assert!(warm.iterations <= cold.iterations);
        assert!((warm.x - &cold.x).amax() < 1e-6);
    }

    #[test]
    fn solves_in_f32() {
        let p = DMatrix::<f32>::identity(2, 2);
        let q = DVector::from_vec(vec![-1.0f32, 0.5]);
        let a = DMatrix::identity(2, 2);
        let l = DVector::from_element(2, -10.0f32);
        let u = DVector::from_element(2, 10.0f32);
        let mut st = QpSettings::<f32>::default();
        st.eps_abs = 1e-4;
        st.eps_rel = 1e-4;
        let sol = solve(&p, &q, &a, &l, &u, &st, None);
        assert!((sol.x[0] - 1.0).abs() < 1e-3);
        assert!((sol.x[1] + 0.5).abs() < 1e-3);
    }
}
