//! Augmented ego-vehicle dynamics in the path-intrinsic Frenet frame and
//! their fixed-step RK4 integration. The same model is used inside the OCP
//! transcription and as the plant for CAVs, so model and plant coincide.
//!
//! State layout (with `n_l` lanes): `[s, y_e, v_t, psi, a_t, psi_d, zeta,
//! d_1 .. d_{n_l-1}]`. The last lane decision is eliminated through the
//! normalization `d_{n_l} = 1 - sum(d_l)`.
//! Input layout: `[a_d, dpsi_d, u_zeta, u_d1 .. u_d{n_l-1}]`.

use crate::real::{fl, Real};
use crate::road::CurvatureTable;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Offsets of the named states within the augmented state vector.
pub const IX_S: usize = 0;
pub const IX_Y: usize = 1;
pub const IX_V: usize = 2;
pub const IX_PSI: usize = 3;
pub const IX_A: usize = 4;
pub const IX_PSI_D: usize = 5;
pub const IX_ZETA: usize = 6;
pub const IX_D0: usize = 7;

/// Offsets of the named inputs within the input vector.
pub const IU_AD: usize = 0;
pub const IU_DPSI: usize = 1;
pub const IU_ZETA: usize = 2;
pub const IU_D0: usize = 3;

pub fn state_dim(lane_count: usize) -> usize {
    IX_D0 + lane_count - 1
}

pub fn input_dim(lane_count: usize) -> usize {
    IU_D0 + lane_count - 1
}

#[derive(Debug, Error, PartialEq)]
pub enum EgoError {
    #[error("curvature singularity: |1 - y_e*kappa| = {denom} below threshold")]
    Singularity { denom: f64 },
}

/// First-order actuator lag rates for acceleration and heading tracking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EgoParams<T: Real> {
    pub tau_a: T,
    pub tau_psi: T,
}

impl<T: Real> Default for EgoParams<T> {
    fn default() -> Self {
        Self {
            tau_a: fl(2.0),
            tau_psi: fl(2.0),
        }
    }
}

/// Augmented state of one CAV.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoState<T: Real> {
    pub s: T,
    pub y_e: T,
    pub v_t: T,
    pub psi: T,
    pub a_t: T,
    pub psi_d: T,
    pub zeta: T,
    /// Lane decision variables `d_1 .. d_{n_l-1}` (the last one is implied).
    pub d: Vec<T>,
}

impl<T: Real> EgoState<T> {
    /// State fully committed to 1-based `lane`, at speed `v_t`, centered.
    pub fn in_lane(lane: usize, lane_count: usize, y_e: T, s: T, v_t: T) -> Self {
        let mut d = vec![T::zero(); lane_count - 1];
        if lane < lane_count {
            d[lane - 1] = T::one();
        }
        Self {
            s,
            y_e,
            v_t,
            psi: T::zero(),
            a_t: T::zero(),
            psi_d: T::zero(),
            zeta: T::zero(),
            d,
        }
    }

    pub fn lane_count(&self) -> usize {
        self.d.len() + 1
    }

    /// The eliminated lane decision `d_{n_l} = 1 - sum(d_l)`.
    pub fn d_last(&self) -> T {
        T::one() - self.d.iter().copied().sum::<T>()
    }

    /// All lane decisions including the implied last one.
    pub fn d_full(&self) -> Vec<T> {
        let mut out = self.d.clone();
        out.push(self.d_last());
        out
    }

    /// 1-based index of the largest lane decision variable.
    pub fn committed_lane(&self) -> usize {
        let full = self.d_full();
        let mut best = 0;
        for (i, &v) in full.iter().enumerate() {
            if v > full[best] {
                best = i;
            }
        }
        best + 1
    }

    pub fn to_vector(&self) -> DVector<T> {
        let mut v = DVector::zeros(state_dim(self.lane_count()));
        v[IX_S] = self.s;
        v[IX_Y] = self.y_e;
        v[IX_V] = self.v_t;
        v[IX_PSI] = self.psi;
        v[IX_A] = self.a_t;
        v[IX_PSI_D] = self.psi_d;
        v[IX_ZETA] = self.zeta;
        for (i, &d) in self.d.iter().enumerate() {
            v[IX_D0 + i] = d;
        }
        v
    }

    pub fn from_slice(x: &[T]) -> Self {
        Self {
            s: x[IX_S],
            y_e: x[IX_Y],
            v_t: x[IX_V],
            psi: x[IX_PSI],
            a_t: x[IX_A],
            psi_d: x[IX_PSI_D],
            zeta: x[IX_ZETA],
            d: x[IX_D0..].to_vec(),
        }
    }
}

/// Control inputs of one CAV.
#[derive(Debug, Clone, PartialEq)]
pub struct EgoInput<T: Real> {
    pub a_d: T,
    pub dpsi_d: T,
    pub u_zeta: T,
    pub u_d: Vec<T>,
}

impl<T: Real> EgoInput<T> {
    pub fn coast(lane_count: usize) -> Self {
        Self {
            a_d: T::zero(),
            dpsi_d: T::zero(),
            u_zeta: T::zero(),
            u_d: vec![T::zero(); lane_count - 1],
        }
    }

    pub fn to_vector(&self) -> DVector<T> {
        let mut v = DVector::zeros(input_dim(self.u_d.len() + 1));
        v[IU_AD] = self.a_d;
        v[IU_DPSI] = self.dpsi_d;
        v[IU_ZETA] = self.u_zeta;
        for (i, &u) in self.u_d.iter().enumerate() {
            v[IU_D0 + i] = u;
        }
        v
    }

    pub fn from_slice(u: &[T]) -> Self {
        Self {
            a_d: u[IU_AD],
            dpsi_d: u[IU_DPSI],
            u_zeta: u[IU_ZETA],
            u_d: u[IU_D0..].to_vec(),
        }
    }
}

const SINGULARITY_TOL: f64 = 1e-9;

/// Right-hand side of the augmented ODE, written into `out`.
pub fn rhs<T: Real>(
    x: &[T],
    u: &[T],
    kappa: T,
    p: &EgoParams<T>,
    out: &mut [T],
) -> Result<(), EgoError> {
    let denom = T::one() - x[IX_Y] * kappa;
    if denom.abs() < fl(SINGULARITY_TOL) {
        return Err(EgoError::Singularity {
            denom: denom.to_f64().unwrap_or(0.0),
        });
    }
    let (sin_psi, cos_psi) = x[IX_PSI].sin_cos();
    out[IX_S] = x[IX_V] * cos_psi / denom;
    out[IX_Y] = x[IX_V] * sin_psi;
    out[IX_V] = x[IX_A];
    out[IX_PSI] = p.tau_psi * (x[IX_PSI_D] - x[IX_PSI]);
    out[IX_A] = p.tau_a * (u[IU_AD] - x[IX_A]);
    out[IX_PSI_D] = u[IU_DPSI];
    out[IX_ZETA] = u[IU_ZETA];
    for i in 0..(x.len() - IX_D0) {
        out[IX_D0 + i] = u[IU_D0 + i];
    }
    Ok(())
}

/// Jacobians of [`rhs`] with respect to state and input, written into `a`
/// and `b` (which must be zeroed to the right dimensions by the caller).
///
/// `kappa_ds` carries the curvature slope so the `s`-dependence of
/// `kappa(s)` is differentiated through.
pub fn rhs_jacobians<T: Real>(
    x: &[T],
    kappa: T,
    kappa_ds: T,
    p: &EgoParams<T>,
    a: &mut DMatrix<T>,
    b: &mut DMatrix<T>,
) {
    a.fill(T::zero());
    b.fill(T::zero());
    let denom = T::one() - x[IX_Y] * kappa;
    let (sin_psi, cos_psi) = x[IX_PSI].sin_cos();
    let inv = T::one() / denom;
    let inv2 = inv * inv;
    a[(IX_S, IX_S)] = x[IX_V] * cos_psi * x[IX_Y] * kappa_ds * inv2;
    a[(IX_S, IX_Y)] = x[IX_V] * cos_psi * kappa * inv2;
    a[(IX_S, IX_V)] = cos_psi * inv;
    a[(IX_S, IX_PSI)] = -x[IX_V] * sin_psi * inv;
    a[(IX_Y, IX_V)] = sin_psi;
    a[(IX_Y, IX_PSI)] = x[IX_V] * cos_psi;
    a[(IX_V, IX_A)] = T::one();
    a[(IX_PSI, IX_PSI)] = -p.tau_psi;
    a[(IX_PSI, IX_PSI_D)] = p.tau_psi;
    a[(IX_A, IX_A)] = -p.tau_a;
    b[(IX_A, IU_AD)] = p.tau_a;
    b[(IX_PSI_D, IU_DPSI)] = T::one();
    b[(IX_ZETA, IU_ZETA)] = T::one();
    for i in 0..(x.len() - IX_D0) {
        b[(IX_D0 + i, IU_D0 + i)] = T::one();
    }
}

/// Classical RK4 update over one step of `dt` with zero-order-hold inputs.
/// Curvature is re-evaluated at the path position of each internal stage.
pub fn rk4_vec<T: Real>(
    x: &DVector<T>,
    u: &DVector<T>,
    dt: T,
    curvature: &CurvatureTable<T>,
    p: &EgoParams<T>,
) -> Result<DVector<T>, EgoError> {
    let n = x.len();
    let mut k1 = DVector::zeros(n);
    let mut k2 = DVector::zeros(n);
    let mut k3 = DVector::zeros(n);
    let mut k4 = DVector::zeros(n);
    let half = dt / fl(2.0);
    rhs(x.as_slice(), u.as_slice(), curvature.kappa(x[IX_S]), p, k1.as_mut_slice())?;
    let x2 = x + &k1 * half;
    rhs(x2.as_slice(), u.as_slice(), curvature.kappa(x2[IX_S]), p, k2.as_mut_slice())?;
    let x3 = x + &k2 * half;
    rhs(x3.as_slice(), u.as_slice(), curvature.kappa(x3[IX_S]), p, k3.as_mut_slice())?;
    let x4 = x + &k3 * dt;
    rhs(x4.as_slice(), u.as_slice(), curvature.kappa(x4[IX_S]), p, k4.as_mut_slice())?;
    let sixth = dt / fl(6.0);
    Ok(x + (k1 + k2 * fl::<T>(2.0) + k3 * fl::<T>(2.0) + k4) * sixth)
}

/// RK4 update plus the discrete sensitivities `d x_next / d x` and
/// `d x_next / d u`, propagated through the four internal stages.
pub fn rk4_vec_sens<T: Real>(
    x: &DVector<T>,
    u: &DVector<T>,
    dt: T,
    curvature: &CurvatureTable<T>,
    p: &EgoParams<T>,
) -> Result<(DVector<T>, DMatrix<T>, DMatrix<T>), EgoError> {
    let n = x.len();
    let m = u.len();
    let half = dt / fl(2.0);
    let two = fl::<T>(2.0);

    let mut a = DMatrix::zeros(n, n);
    let mut b = DMatrix::zeros(n, m);
    let eval = |xs: &DVector<T>,
                k: &mut DVector<T>,
                a: &mut DMatrix<T>,
                b: &mut DMatrix<T>|
     -> Result<(), EgoError> {
        let kap = curvature.kappa(xs[IX_S]);
        rhs(xs.as_slice(), u.as_slice(), kap, p, k.as_mut_slice())?;
        rhs_jacobians(xs.as_slice(), kap, curvature.kappa_ds(xs[IX_S]), p, a, b);
        Ok(())
    };

    let mut k1 = DVector::zeros(n);
    eval(x, &mut k1, &mut a, &mut b)?;
    let dk1x = a.clone();
    let dk1u = b.clone();

    let x2 = x + &k1 * half;
    let mut k2 = DVector::zeros(n);
    eval(&x2, &mut k2, &mut a, &mut b)?;
    let dk2x = &a * (DMatrix::identity(n, n) + &dk1x * half);
    let dk2u = &a * (&dk1u * half) + &b;

    let x3 = x + &k2 * half;
    let mut k3 = DVector::zeros(n);
    eval(&x3, &mut k3, &mut a, &mut b)?;
    let dk3x = &a * (DMatrix::identity(n, n) + &dk2x * half);
    let dk3u = &a * (&dk2u * half) + &b;

    let x4 = x + &k3 * dt;
    let mut k4 = DVector::zeros(n);
    eval(&x4, &mut k4, &mut a, &mut b)?;
    let dk4x = &a * (DMatrix::identity(n, n) + &dk3x * dt);
    let dk4u = &a * (&dk3u * dt) + &b;

    let sixth = dt / fl(6.0);
    let x_next = x + (&k1 + &k2 * two + &k3 * two + &k4) * sixth;
    let phi_x = DMatrix::identity(n, n) + (dk1x + dk2x * two + dk3x * two + dk4x) * sixth;
    let phi_u = (dk1u + dk2u * two + dk3u * two + dk4u) * sixth;
    Ok((x_next, phi_x, phi_u))
}

/// Right-hand side of the augmented ODE at a point curvature value.
pub fn derivative<T: Real>(
    x: &EgoState<T>,
    u: &EgoInput<T>,
    kappa: T,
    p: &EgoParams<T>,
) -> Result<EgoState<T>, EgoError> {
    let xv = x.to_vector();
    let uv = u.to_vector();
    let mut out = vec![T::zero(); xv.len()];
    rhs(xv.as_slice(), uv.as_slice(), kappa, p, &mut out)?;
    Ok(EgoState::from_slice(&out))
}

/// One RK4 plant step with zero-order-hold inputs. No clamping is applied
/// here; invariant boxes are enforced by the plant, never the transcription.
pub fn rk4_step<T: Real>(
    x: &EgoState<T>,
    u: &EgoInput<T>,
    dt: T,
    curvature: &CurvatureTable<T>,
    p: &EgoParams<T>,
) -> Result<EgoState<T>, EgoError> {
    let next = rk4_vec(&x.to_vector(), &u.to_vector(), dt, curvature, p)?;
    Ok(EgoState::from_slice(next.as_slice()))
}
