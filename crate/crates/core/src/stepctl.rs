//! Stride-to-stride error dynamics and discrete LQR design.

use nalgebra::{DMatrix, SMatrix, Vector2, Vector6};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gait::{Mat6, Mat6x23, PeriodicGait, TransformConstants};
use crate::linmodel::{layout, Mat23, SelectionSet, Vec23};

pub type ErrorVector = Vector6<f64>;
pub type Mat6x2 = SMatrix<f64, 6, 2>;
pub type Mat6x4 = SMatrix<f64, 6, 4>;
pub type Mat2x6 = SMatrix<f64, 2, 6>;

/// e = M S_XP (β − x).
pub fn error_vector(beta: &Vec23, x: &Vec23, consts: &TransformConstants, sel: &SelectionSet) -> ErrorVector {
    consts.m_sxp(sel) * (beta - x)
}

/// e⁺ = A_e e⁻ + B_u U′ + B_w W.
#[derive(Clone, Debug)]
pub struct ErrorSystem {
    pub a_e: Mat6,
    pub b_u: Mat6x2,
    pub b_w: Mat6x4,
    /// O M T S_XP H′.
    pub a: Mat6x23,
    /// M S_XP restricted to the six state columns.
    pub m1: Mat6,
    /// M S_XP restricted to the stance-foot columns.
    pub m2: Mat6x2,
    pub m1_inv: Mat6,
}

pub fn build_error_system(h_con: &Mat23, consts: &TransformConstants, sel: &SelectionSet) -> Result<ErrorSystem> {
    let ms = consts.m_sxp(sel);
    let m1 = Mat6::from_fn(|i, j| ms[(i, sel.x[j])]);
    let m2 = Mat6x2::from_fn(|i, j| ms[(i, sel.p[j])]);
    let cond = {
        let sv = m1.singular_values();
        sv.max() / sv.min()
    };
    let m1_inv = match m1.try_inverse() {
        Some(inv) if cond < 1e10 => inv,
        _ => return Err(Error::SingularTransform { cond }),
    };
    let a = consts.omt_sxp(sel) * h_con;
    // A·B with B = S_Xᵀ M₁⁻¹
    let a_x = Mat6::from_fn(|i, j| a[(i, sel.x[j])]);
    let a_e = a_x * m1_inv;
    let b_u = -Mat6x2::from_fn(|i, j| a[(i, layout::HIP_RAMP[j])]);
    let b_w = -Mat6x4::from_fn(|i, j| a[(i, sel.w[j])]);
    Ok(ErrorSystem { a_e, b_u, b_w, a, m1, m2, m1_inv })
}

impl ErrorSystem {
    pub fn predict(&self, e: &ErrorVector, u: &Vector2<f64>, w: &nalgebra::Vector4<f64>) -> ErrorVector {
        self.a_e * e + self.b_u * u + self.b_w * w
    }

    /// X⁻ = M₁⁻¹ (M S_XP β − e − M₂ P).
    pub fn reconstruct_state(&self, e: &ErrorVector, beta: &Vec23, p: &Vector2<f64>, consts: &TransformConstants, sel: &SelectionSet) -> Vector6<f64> {
        self.m1_inv * (consts.m_sxp(sel) * beta - e - self.m2 * p)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Aggressive,
    Normal,
    Light,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Aggressive, Variant::Normal, Variant::Light];

    /// Input cost on the diagonal.
    pub fn weight(self) -> f64 {
        match self {
            Variant::Aggressive => 0.01,
            Variant::Normal => 1.0,
            Variant::Light => 100.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Aggressive => "aggressive",
            Variant::Normal => "normal",
            Variant::Light => "light",
        }
    }
}

/// Solution of the discrete algebraic Riccati equation.
#[derive(Clone, Debug)]
pub struct DareSolution {
    pub p: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub residual: f64,
    pub iterations: usize,
}

pub const DARE_MAX_ITER: usize = 10_000;

fn dare_residual(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>, p: &DMatrix<f64>) -> Option<f64> {
    let bt_p = b.transpose() * p;
    let s = r + &bt_p * b;
    let x = s.lu().solve(&(&bt_p * a))?;
    let rhs = a.transpose() * p * a - a.transpose() * p * b * x + q;
    Some((rhs - p).norm())
}

/// Structure-preserving doubling for P = AᵀPA − AᵀPB(R+BᵀPB)⁻¹BᵀPA + Q,
/// followed by a few Newton-free fixed-point polishing sweeps.
pub fn solve_dare(a: &DMatrix<f64>, b: &DMatrix<f64>, q: &DMatrix<f64>, r: &DMatrix<f64>) -> Result<DareSolution> {
    let n = a.nrows();
    let r_inv = r.clone().try_inverse().ok_or(Error::Unstabilizable { iterations: 0 })?;
    let mut ak = a.clone();
    let mut gk = b * r_inv * b.transpose();
    let mut hk = q.clone();
    let eye = DMatrix::<f64>::identity(n, n);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < DARE_MAX_ITER {
        iterations += 1;
        let w = &eye + &gk * &hk;
        let lu = w.lu();
        let w_inv_a = lu.solve(&ak).ok_or(Error::Unstabilizable { iterations })?;
        let w_inv_g = lu.solve(&gk).ok_or(Error::Unstabilizable { iterations })?;
        let h_next = &hk + ak.transpose() * &hk * &w_inv_a;
        let g_next = &gk + &ak * &w_inv_g * ak.transpose();
        let a_next = &ak * &w_inv_a;
        let delta = (&h_next - &hk).norm() / (1.0 + h_next.norm());
        hk = h_next;
        gk = g_next;
        ak = a_next;
        if !hk.iter().all(|v| v.is_finite()) {
            return Err(Error::Unstabilizable { iterations });
        }
        if delta < 1e-15 || ak.norm() < 1e-300 {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::Unstabilizable { iterations });
    }
    let mut p = (&hk + hk.transpose()) * 0.5;
    // polish with plain Riccati sweeps; each is a contraction near the fixed point
    for _ in 0..50 {
        let bt_p = b.transpose() * &p;
        let s = r + &bt_p * b;
        let x = s.lu().solve(&(&bt_p * a)).ok_or(Error::Unstabilizable { iterations })?;
        let next = a.transpose() * &p * a - a.transpose() * &p * b * x + q;
        let next = (&next + next.transpose()) * 0.5;
        let change = (&next - &p).norm();
        p = next;
        if change < 1e-14 * (1.0 + p.norm()) {
            break;
        }
    }
    let bt_p = b.transpose() * &p;
    let s = r + &bt_p * b;
    let k = s.lu().solve(&(&bt_p * a)).ok_or(Error::Unstabilizable { iterations })?;
    let residual = dare_residual(a, b, q, r, &p).ok_or(Error::Unstabilizable { iterations })?;
    Ok(DareSolution { p, k, residual, iterations })
}

pub fn spectral_radius(m: &DMatrix<f64>) -> f64 {
    m.complex_eigenvalues().iter().map(|z| z.norm()).fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FeedbackGain {
    #[serde(serialize_with = "ser_k", deserialize_with = "de_k")]
    pub k: Mat2x6,
    pub variant: Variant,
    pub input_weight: f64,
    pub state_weight: f64,
    pub spectral_radius: f64,
    /// Closed-loop eigenvalues as (re, im).
    pub eigenvalues: Vec<(f64, f64)>,
}

fn ser_k<S: serde::Serializer>(k: &Mat2x6, s: S) -> std::result::Result<S::Ok, S::Error> {
    use serde::Serialize;
    crate::serde_util::rows(k).serialize(s)
}

fn de_k<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Mat2x6, D::Error> {
    let rows = Vec::<Vec<f64>>::deserialize(d)?;
    if rows.len() != 2 || rows.iter().any(|r| r.len() != 6) {
        return Err(serde::de::Error::custom("gain must be 2x6"));
    }
    Ok(Mat2x6::from_fn(|i, j| rows[i][j]))
}

/// DLQR gain for the error system with Q = I and R = weight·I.
pub fn design_gain(sys: &ErrorSystem, variant: Variant) -> Result<FeedbackGain> {
    let a = DMatrix::from_iterator(6, 6, sys.a_e.iter().copied());
    let b = DMatrix::from_iterator(6, 2, sys.b_u.iter().copied());
    let q = DMatrix::identity(6, 6);
    let r = DMatrix::identity(2, 2) * variant.weight();
    let sol = solve_dare(&a, &b, &q, &r)?;
    let k = Mat2x6::from_fn(|i, j| sol.k[(i, j)]);
    let cl = DMatrix::from_iterator(6, 6, (sys.a_e - sys.b_u * k).iter().copied());
    let eig = cl.complex_eigenvalues();
    let rho = eig.iter().map(|z| z.norm()).fold(0.0, f64::max);
    if !(rho < 1.0) {
        return Err(Error::Unstabilizable { iterations: sol.iterations });
    }
    Ok(FeedbackGain {
        k,
        variant,
        input_weight: variant.weight(),
        state_weight: 1.0,
        spectral_radius: rho,
        eigenvalues: eig.iter().map(|z| (z.re, z.im)).collect(),
    })
}

impl FeedbackGain {
    pub fn zero() -> Self {
        FeedbackGain {
            k: Mat2x6::zeros(),
            variant: Variant::Normal,
            input_weight: 1.0,
            state_weight: 1.0,
            spectral_radius: f64::NAN,
            eigenvalues: Vec::new(),
        }
    }

    /// U′ = −K e.
    pub fn correction(&self, e: &ErrorVector) -> Vector2<f64> {
        -(self.k * e)
    }
}

/// Inputs for the stride following a touch-down: nominal actuation with the
/// ramp hip entries shifted by −K e. Constant hip entries are left to the
/// foot-velocity constraint.
pub fn dlqr_step(gain: &FeedbackGain, gait: &PeriodicGait, x_event: &Vec23, consts: &TransformConstants, sel: &SelectionSet) -> (Vec23, Vector2<f64>) {
    let e = error_vector(&gait.beta, x_event, consts, sel);
    let du = gain.correction(&e);
    let mut q = *x_event;
    for i in 0..8 {
        q[sel.u[i]] = gait.beta[sel.u[i]];
    }
    for j in 0..2 {
        q[layout::HIP_RAMP[j]] += du[j];
    }
    (q, du)
}
