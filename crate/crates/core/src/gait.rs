//! Symmetry operator, periodic gaits and their speed scaling.

use nalgebra::{DMatrix, DVector, Matrix3, SMatrix, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linmodel::{
    constrain_foot_velocity, layout, stride_transfer, GaitTiming, Mat23, ModelParams, SelectionSet, TransferMatrix,
    Vec23, DIM,
};

pub type Mat6x8 = SMatrix<f64, 6, 8>;
pub type Mat8 = SMatrix<f64, 8, 8>;
pub type Mat6 = SMatrix<f64, 6, 6>;
pub type Mat6x23 = SMatrix<f64, 6, DIM>;

/// Local transform M, foot exchange T and lateral mirror O.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformConstants {
    pub m: Mat6x8,
    pub t: Mat8,
    pub o: Mat6,
}

impl Default for TransformConstants {
    fn default() -> Self {
        let mut m = Mat6x8::zeros();
        m[(0, 0)] = -1.0;
        m[(0, 2)] = 1.0;
        m[(1, 1)] = -1.0;
        m[(1, 3)] = 1.0;
        m[(2, 2)] = 1.0;
        m[(2, 6)] = -1.0;
        m[(3, 3)] = 1.0;
        m[(3, 7)] = -1.0;
        m[(4, 4)] = 1.0;
        m[(5, 5)] = 1.0;
        let mut t = Mat8::zeros();
        for (r, c) in [(0, 6), (1, 7), (2, 2), (3, 3), (4, 4), (5, 5), (6, 0), (7, 1)] {
            t[(r, c)] = 1.0;
        }
        let o = Mat6::from_diagonal(&nalgebra::Vector6::new(1.0, -1.0, 1.0, -1.0, 1.0, -1.0));
        TransformConstants { m, t, o }
    }
}

impl TransformConstants {
    /// M·S_XP as a 6×23 matrix.
    pub fn m_sxp(&self, sel: &SelectionSet) -> Mat6x23 {
        let mut out = Mat6x23::zeros();
        for (c, &col) in sel.xp.iter().enumerate() {
            out.set_column(col, &self.m.column(c));
        }
        out
    }

    /// O·M·T·S_XP as a 6×23 matrix.
    pub fn omt_sxp(&self, sel: &SelectionSet) -> Mat6x23 {
        let omt = self.o * self.m * self.t;
        let mut out = Mat6x23::zeros();
        for (c, &col) in sel.xp.iter().enumerate() {
            out.set_column(col, &omt.column(c));
        }
        out
    }
}

/// R = −M S_XP + O M T S_XP H′.
pub fn symmetry_operator(h_con: &Mat23, consts: &TransformConstants, sel: &SelectionSet) -> Mat6x23 {
    consts.omt_sxp(sel) * h_con - consts.m_sxp(sel)
}

/// Columns a periodic gait may use: states (no foot velocity), ankle torques,
/// ramp torques and the side flag. Constant hip torques are reserved for the
/// foot-velocity constraint; W and P stay zero.
pub const ADMISSIBLE: [usize; 13] = [0, 1, 2, 3, 4, 5, 12, 13, 14, 15, 16, 17, 22];

#[derive(Clone, Debug)]
pub struct NullSpace {
    pub basis: Vec<Vec23>,
    pub singular_values: Vec<f64>,
}

impl NullSpace {
    pub fn dim(&self) -> usize {
        self.basis.len()
    }
}

/// Orthonormal basis of {v : R v = 0} restricted to [`ADMISSIBLE`] entries.
pub fn periodic_gaits(r: &Mat6x23) -> Result<NullSpace> {
    let n = ADMISSIBLE.len();
    // pad to square so the SVD returns a full right basis
    let mut a = DMatrix::zeros(n, n);
    for (j, &c) in ADMISSIBLE.iter().enumerate() {
        for i in 0..6 {
            a[(i, j)] = r[(i, c)];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::NoPeriodicGait)?;
    let smax = svd.singular_values.max();
    let cutoff = 1e-9 * smax.max(f64::MIN_POSITIVE);
    let mut basis = Vec::new();
    for (k, &s) in svd.singular_values.iter().enumerate() {
        if s <= cutoff {
            let mut v = Vec23::zeros();
            for (j, &c) in ADMISSIBLE.iter().enumerate() {
                v[c] = v_t[(k, j)];
            }
            basis.push(v);
        }
    }
    if basis.is_empty() {
        return Err(Error::NoPeriodicGait);
    }
    Ok(NullSpace { basis, singular_values: svd.singular_values.iter().copied().collect() })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GaitClass {
    PseudoPassive,
    Actuated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodicGait {
    #[serde(with = "crate::serde_util::vec23")]
    pub beta: Vec23,
    pub timing: GaitTiming,
    pub speed: f64,
    pub class: GaitClass,
}

/// Sagittal distance between the feet over the stride time, for a stride-start
/// state (the trailing foot is the swing foot, the leading foot is stance).
pub fn stride_speed(q_event: &Vec23, timing: &GaitTiming) -> f64 {
    (q_event[layout::STANCE[0]] - q_event[layout::SWING_POS[0]]) / timing.stride()
}

/// β′ = (target / speed)·β, every entry including the side flag.
pub fn scale_gait(gait: &PeriodicGait, target_speed: f64) -> Result<PeriodicGait> {
    if gait.speed == 0.0 {
        return Err(Error::Domain("cannot scale a gait with zero speed".into()));
    }
    let ratio = target_speed / gait.speed;
    Ok(PeriodicGait { beta: gait.beta * ratio, timing: gait.timing, speed: target_speed, class: gait.class })
}

/// Speed change that keeps the lateral motion and side flag: only sagittal
/// entries are scaled. Sagittal and lateral blocks are decoupled, so the result
/// stays periodic.
pub fn retarget_speed(gait: &PeriodicGait, target_speed: f64) -> Result<PeriodicGait> {
    if gait.speed == 0.0 {
        return Err(Error::Domain("cannot scale a gait with zero speed".into()));
    }
    let ratio = target_speed / gait.speed;
    let mut beta = gait.beta;
    for i in (0..layout::SIDE).step_by(2) {
        beta[i] *= ratio;
    }
    Ok(PeriodicGait { beta, timing: gait.timing, speed: target_speed, class: gait.class })
}

const SAG: [usize; 3] = [0, 2, 4];
const LAT: [usize; 3] = [1, 3, 5];

fn sub3(r: &Mat6x23, rows: [usize; 3], cols: [usize; 3]) -> Matrix3<f64> {
    Matrix3::from_fn(|i, j| r[(rows[i], cols[j])])
}

fn adjugate(a: &Matrix3<f64>) -> Matrix3<f64> {
    let c = |r0: usize, r1: usize, c0: usize, c1: usize| a[(r0, c0)] * a[(r1, c1)] - a[(r0, c1)] * a[(r1, c0)];
    // cofactor transpose
    Matrix3::new(
        c(1, 2, 1, 2),
        -c(0, 2, 1, 2),
        c(0, 1, 1, 2),
        -c(1, 2, 0, 2),
        c(0, 2, 0, 2),
        -c(0, 1, 0, 2),
        c(1, 2, 0, 1),
        -c(0, 2, 0, 1),
        c(0, 1, 0, 1),
    )
}

/// Pole-free residual whose zeros are the timings admitting an unactuated
/// sagittal periodic motion: s·det(R_sag) with s the sagittal constraint gain.
pub fn passive_residual(params: &ModelParams, t_ds: f64, t_ss: f64) -> Result<f64> {
    let timing = GaitTiming { t_ds, t_ss, n_ds: 1, n_ss: usize::from(t_ss > 0.0) };
    let h = stride_transfer(params, &timing)?.m;
    let consts = TransformConstants::default();
    let sel = SelectionSet::default();
    let r0 = symmetry_operator(&h, &consts, &sel);
    let omt = consts.omt_sxp(&sel);
    let (fv, hc) = (layout::SWING_VEL[0], layout::HIP_CONST[0]);
    let s = h[(fv, hc)];
    let hcol = h.column(hc).into_owned();
    let a_full = omt * hcol;
    let a = Vector3::new(a_full[SAG[0]], a_full[SAG[1]], a_full[SAG[2]]);
    let b = Vector3::new(h[(fv, SAG[0])], h[(fv, SAG[1])], h[(fv, SAG[2])]);
    let r0s = sub3(&r0, SAG, SAG);
    // det(R0 − a bᵀ/s)·s = s det R0 − bᵀ adj(R0) a
    Ok(s * r0s.determinant() - b.dot(&(adjugate(&r0s) * a)))
}

/// Unactuated periodic gait at a timing where the passive residual vanishes,
/// normalized to 1 m/s. Fails when the sagittal null vector has no stride length.
pub fn passive_gait_at(params: &ModelParams, timing: &GaitTiming) -> Result<PeriodicGait> {
    let sel = SelectionSet::default();
    let h = stride_transfer(params, timing)?;
    let (h_con, _) = constrain_foot_velocity(&h, &sel)?;
    let r = symmetry_operator(&h_con.m, &TransformConstants::default(), &sel);
    let rs = sub3(&r, SAG, SAG);
    let svd = rs.svd(false, true);
    let v_t = svd.v_t.ok_or(Error::NoPeriodicGait)?;
    let k = svd.singular_values.imin();
    let v = v_t.row(k).transpose();
    // v = (pelvis, swing, velocity); stride length is −swing since P = 0
    if v[1].abs() < 1e-6 * v.norm() {
        return Err(Error::NoPeriodicGait);
    }
    let scale = -timing.stride() / v[1];
    let mut beta = Vec23::zeros();
    for (i, &c) in SAG.iter().enumerate() {
        beta[c] = v[i] * scale;
    }
    let rl = sub3(&r, LAT, LAT);
    let rhs = -Vector3::new(r[(1, layout::SIDE)], r[(3, layout::SIDE)], r[(5, layout::SIDE)]);
    let xl = rl.lu().solve(&rhs).ok_or(Error::NoPeriodicGait)?;
    for (i, &c) in LAT.iter().enumerate() {
        beta[c] = xl[i];
    }
    beta[layout::SIDE] = 1.0;
    Ok(PeriodicGait { beta, timing: *timing, speed: 1.0, class: GaitClass::PseudoPassive })
}

pub const PASSIVE_BRACKET: (f64, f64) = (0.05, 2.0);

/// Sign changes of the passive residual over a uniform sweep, refined by
/// bisection (finer than 1e−10 s). `timing_of` maps the swept single support duration
/// to a timing.
fn passive_roots<F>(params: &ModelParams, timing_of: F, samples: usize) -> Result<Vec<(f64, Option<PeriodicGait>)>>
where
    F: Fn(f64) -> Result<GaitTiming>,
{
    let (lo, hi) = PASSIVE_BRACKET;
    let res = |t_ss: f64| -> Result<f64> {
        let tm = timing_of(t_ss)?;
        passive_residual(params, tm.t_ds, tm.t_ss)
    };
    let mut roots = Vec::new();
    let mut x0 = lo;
    let mut f0 = res(x0)?;
    for i in 1..=samples {
        let x1 = lo + (hi - lo) * i as f64 / samples as f64;
        let f1 = res(x1)?;
        if f0 == 0.0 || f0.signum() != f1.signum() {
            let (mut a, mut b, mut fa) = (x0, x1, f0);
            // run to machine resolution; the 1e−10 s tolerance is met long before
            loop {
                let m = 0.5 * (a + b);
                if m <= a || m >= b {
                    break;
                }
                let fm = res(m)?;
                if fm == 0.0 {
                    a = m;
                    b = m;
                    break;
                }
                if fm.signum() == fa.signum() {
                    a = m;
                    fa = fm;
                } else {
                    b = m;
                }
            }
            let root = 0.5 * (a + b);
            let gait = timing_of(root).and_then(|tm| passive_gait_at(params, &tm)).ok();
            roots.push((root, gait));
        }
        x0 = x1;
        f0 = f1;
    }
    Ok(roots)
}

/// All roots of the passive residual in the bracket for a fixed double support,
/// with the gait when the root carries a non-degenerate stride.
pub fn pseudo_passive_candidates(params: &ModelParams, t_ds: f64, samples: usize) -> Result<Vec<(f64, Option<PeriodicGait>)>> {
    if !(t_ds > 0.0) {
        return Err(Error::Domain(format!("T_ds must be positive, got {t_ds}")));
    }
    passive_roots(params, |t_ss| GaitTiming::from_steps(t_ds, t_ss, 1, 1), samples)
}

/// Single support duration admitting a pseudo-passive gait for a fixed double
/// support. The gait timing uses one step per phase; callers needing a
/// simulation grid rebuild the timing with [`GaitTiming::from_steps`].
pub fn pseudo_passive_timing(params: &ModelParams, t_ds: f64) -> Result<(f64, PeriodicGait)> {
    pseudo_passive_candidates(params, t_ds, 200)?
        .into_iter()
        .find_map(|(t, g)| g.map(|g| (t, g)))
        .ok_or(Error::NoPseudoPassive { lo: PASSIVE_BRACKET.0, hi: PASSIVE_BRACKET.1 })
}

/// Pseudo-passive gait with the double support fixed at `ds_fraction` of the
/// stride, tiled in `n_steps` uniform steps.
pub fn pseudo_passive_fraction(params: &ModelParams, ds_fraction: f64, n_steps: usize) -> Result<PeriodicGait> {
    let to_timing = |t_ss: f64| {
        let stride = t_ss / (1.0 - ds_fraction);
        GaitTiming::from_fraction(stride, ds_fraction, n_steps)
    };
    to_timing(1.0)?;
    passive_roots(params, to_timing, 200)?
        .into_iter()
        .find_map(|(_, g)| g)
        .ok_or(Error::NoPseudoPassive { lo: PASSIVE_BRACKET.0, hi: PASSIVE_BRACKET.1 })
}

/// Periodic gait at an arbitrary timing and speed with the smallest actuation
/// norm (ankle constant and both ramp torques per axis), side flag +1.
pub fn actuated_gait(params: &ModelParams, timing: &GaitTiming, speed: f64) -> Result<PeriodicGait> {
    let sel = SelectionSet::default();
    let h = stride_transfer(params, timing)?;
    let (h_con, _) = constrain_foot_velocity(&h, &sel)?;
    let r = symmetry_operator(&h_con.m, &TransformConstants::default(), &sel);
    let mut beta = Vec23::zeros();
    beta[layout::SIDE] = 1.0;
    for axis in 0..2 {
        let cols = [axis, 2 + axis, 4 + axis, 12 + axis, 14 + axis, 16 + axis];
        let rows = [axis, 2 + axis, 4 + axis];
        let n_con = if axis == 0 { 4 } else { 3 };
        let n = 6 + n_con;
        let mut kkt = DMatrix::zeros(n, n);
        let mut rhs = DVector::zeros(n);
        for j in 3..6 {
            kkt[(j, j)] = 1.0;
        }
        for (i, &row) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                kkt[(6 + i, j)] = r[(row, c)];
                kkt[(j, 6 + i)] = r[(row, c)];
            }
            rhs[6 + i] = if axis == 1 { -r[(row, layout::SIDE)] } else { 0.0 };
        }
        if axis == 0 {
            // stride length fixes the swing-foot position
            kkt[(9, 1)] = 1.0;
            kkt[(1, 9)] = 1.0;
            rhs[9] = -speed * timing.stride();
        }
        let z = kkt.lu().solve(&rhs).ok_or(Error::NoPeriodicGait)?;
        for (j, &c) in cols.iter().enumerate() {
            beta[c] = z[j];
        }
    }
    let resid = (r * beta).norm();
    if !(resid < 1e-8 * (1.0 + beta.norm())) {
        return Err(Error::NoPeriodicGait);
    }
    Ok(PeriodicGait { beta, timing: *timing, speed, class: GaitClass::Actuated })
}

/// Symmetry residual R·β for a gait.
pub fn gait_residual(params: &ModelParams, gait: &PeriodicGait) -> Result<f64> {
    let sel = SelectionSet::default();
    let h = stride_transfer(params, &gait.timing)?;
    let (h_con, _) = constrain_foot_velocity(&h, &sel)?;
    Ok((symmetry_operator(&h_con.m, &TransformConstants::default(), &sel) * gait.beta).norm())
}

/// Convenience: constrained stride map for a timing.
pub fn constrained_stride(params: &ModelParams, timing: &GaitTiming) -> Result<TransferMatrix> {
    let h = stride_transfer(params, timing)?;
    Ok(constrain_foot_velocity(&h, &SelectionSet::default())?.0)
}
