//! State layout, per-phase closed-form transfer matrices and the
//! foot-velocity constrained stride map.

use nalgebra::{DMatrix, Matrix2, SMatrix, SVector, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DIM: usize = 23;
/// Augmented generator size: 23 canonical entries plus one integrator per ramp channel.
pub const AUG: usize = 27;

pub type Vec23 = SVector<f64, DIM>;
pub type Mat23 = SMatrix<f64, DIM, DIM>;
pub type Mat27 = SMatrix<f64, AUG, AUG>;

/// Index layout of the state/input vector. Every pair is (sagittal, lateral).
pub mod layout {
    pub const PELVIS_POS: [usize; 2] = [0, 1];
    pub const SWING_POS: [usize; 2] = [2, 3];
    pub const PELVIS_VEL: [usize; 2] = [4, 5];
    pub const SWING_VEL: [usize; 2] = [6, 7];
    pub const STANCE: [usize; 2] = [8, 9];
    pub const HIP_CONST: [usize; 2] = [10, 11];
    pub const ANKLE_CONST: [usize; 2] = [12, 13];
    pub const HIP_RAMP: [usize; 2] = [14, 15];
    pub const ANKLE_RAMP: [usize; 2] = [16, 17];
    pub const W_FORCE: [usize; 2] = [18, 19];
    pub const W_TORQUE: [usize; 2] = [20, 21];
    pub const SIDE: usize = 22;

    /// Disturbance entries in order force (sag, lat), torque (sag, lat).
    pub const W: [usize; 4] = [18, 19, 20, 21];
    /// Integrator rows of the augmented generator: hip sag, hip lat, ankle sag, ankle lat.
    pub const RHO: [usize; 4] = [23, 24, 25, 26];
    /// Ramp columns feeding the integrators, same order as [`RHO`].
    pub const RAMP: [usize; 4] = [14, 15, 16, 17];

    /// Lateral entries flip sign when the support side is mirrored.
    pub fn is_lateral(i: usize) -> bool {
        i < 22 && i % 2 == 1
    }
}

/// Validates the state-vector invariants: finite entries and side flag of unit magnitude.
pub fn validate_state(q: &Vec23) -> Result<()> {
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain("state vector has non-finite entries".into()));
    }
    let d = q[layout::SIDE];
    if (d.abs() - 1.0).abs() > 1e-12 {
        return Err(Error::Domain(format!("side flag must be +1 or -1, got {d}")));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Adult,
    Kid,
    Custom,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub pelvis_mass: f64,
    pub leg_mass: f64,
    /// Pelvis height h1.
    pub pelvis_height: f64,
    /// Leg center-of-mass height h2.
    pub leg_com_height: f64,
    pub pelvis_half_width: f64,
    pub leg_length: f64,
    pub gravity: f64,
    pub preset: Preset,
}

impl ModelParams {
    pub fn adult() -> Self {
        ModelParams {
            pelvis_mass: 50.0,
            leg_mass: 10.0,
            pelvis_height: 0.9,
            leg_com_height: 0.5,
            pelvis_half_width: 0.1,
            leg_length: 0.9,
            gravity: 9.81,
            preset: Preset::Adult,
        }
    }

    /// Adult with lengths scaled by 0.55 and masses by 0.25.
    pub fn kid() -> Self {
        let a = Self::adult();
        ModelParams {
            pelvis_mass: a.pelvis_mass * 0.25,
            leg_mass: a.leg_mass * 0.25,
            pelvis_height: a.pelvis_height * 0.55,
            leg_com_height: a.leg_com_height * 0.55,
            pelvis_half_width: a.pelvis_half_width * 0.55,
            leg_length: a.leg_length * 0.55,
            gravity: a.gravity,
            preset: Preset::Kid,
        }
    }

    pub fn from_preset(p: Preset) -> Self {
        match p {
            Preset::Kid => Self::kid(),
            _ => Self::adult(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("pelvis_mass", self.pelvis_mass),
            ("leg_mass", self.leg_mass),
            ("pelvis_height", self.pelvis_height),
            ("leg_com_height", self.leg_com_height),
            ("pelvis_half_width", self.pelvis_half_width),
            ("leg_length", self.leg_length),
            ("gravity", self.gravity),
        ];
        for (name, v) in named {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Parameter(format!("{name} must be positive, got {v}")));
            }
        }
        if self.preset == Preset::Adult && (self.leg_length - 0.9).abs() > 1e-12 {
            return Err(Error::Parameter("adult preset requires leg_length = 0.9 m".into()));
        }
        Ok(())
    }
}

/// Stride timing. A stride is a double support followed by a single support,
/// each tiled by an integer number of simulation steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaitTiming {
    pub t_ds: f64,
    pub t_ss: f64,
    pub n_ds: usize,
    pub n_ss: usize,
}

impl GaitTiming {
    /// Uniform step `dt` that must divide both phase durations.
    pub fn new(t_ds: f64, t_ss: f64, dt: f64) -> Result<Self> {
        if !(t_ds > 0.0 && t_ds.is_finite()) {
            return Err(Error::Domain(format!("T_ds must be positive, got {t_ds}")));
        }
        if !(t_ss >= 0.0 && t_ss.is_finite()) {
            return Err(Error::Domain(format!("T_ss must be non-negative, got {t_ss}")));
        }
        if !(dt > 0.0 && dt <= t_ds + 1e-12) {
            return Err(Error::Domain(format!("dt must lie in (0, T_ds], got {dt}")));
        }
        let tiles = |t: f64| -> Result<usize> {
            let n = (t / dt).round();
            if (n * dt - t).abs() > 1e-12 {
                return Err(Error::Domain(format!("dt = {dt} does not divide {t}")));
            }
            Ok(n as usize)
        };
        Ok(GaitTiming { t_ds, t_ss, n_ds: tiles(t_ds)?, n_ss: tiles(t_ss)? })
    }

    /// Explicit step counts per phase; the two phases may use different step sizes.
    pub fn from_steps(t_ds: f64, t_ss: f64, n_ds: usize, n_ss: usize) -> Result<Self> {
        if !(t_ds > 0.0 && t_ds.is_finite()) || n_ds == 0 {
            return Err(Error::Domain("double support needs positive duration and steps".into()));
        }
        if !(t_ss >= 0.0 && t_ss.is_finite()) || (t_ss > 0.0) != (n_ss > 0) {
            return Err(Error::Domain("single support steps must match its duration".into()));
        }
        Ok(GaitTiming { t_ds, t_ss, n_ds, n_ss })
    }

    /// Stride of `t_stride` seconds with a double support share `ds_fraction`, tiled in `n` steps.
    pub fn from_fraction(t_stride: f64, ds_fraction: f64, n: usize) -> Result<Self> {
        if !(0.0 < ds_fraction && ds_fraction < 1.0) {
            return Err(Error::Domain(format!("ds fraction must be in (0,1), got {ds_fraction}")));
        }
        let n_ds = (ds_fraction * n as f64).round() as usize;
        if ((n_ds as f64) - ds_fraction * n as f64).abs() > 1e-9 || n_ds == 0 || n_ds >= n {
            return Err(Error::Domain(format!("{n} steps cannot tile ds fraction {ds_fraction}")));
        }
        let dt = t_stride / n as f64;
        Self::from_steps(dt * n_ds as f64, dt * (n - n_ds) as f64, n_ds, n - n_ds)
    }

    /// Walking frequency in steps per second with the double support fixed at 20 %.
    pub fn from_frequency(freq: f64, n: usize) -> Result<Self> {
        if !(freq > 0.0 && freq.is_finite()) {
            return Err(Error::Domain(format!("frequency must be positive, got {freq}")));
        }
        Self::from_fraction(1.0 / freq, 0.2, n)
    }

    pub fn stride(&self) -> f64 {
        self.t_ds + self.t_ss
    }

    pub fn n_steps(&self) -> usize {
        self.n_ds + self.n_ss
    }

    pub fn dt_ds(&self) -> f64 {
        self.t_ds / self.n_ds as f64
    }

    pub fn dt_ss(&self) -> f64 {
        if self.n_ss == 0 {
            0.0
        } else {
            self.t_ss / self.n_ss as f64
        }
    }

    /// Absolute time of grid point `k` (0..=n_steps).
    pub fn grid_time(&self, k: usize) -> f64 {
        if k <= self.n_ds {
            k as f64 * self.dt_ds()
        } else {
            self.t_ds + (k - self.n_ds) as f64 * self.dt_ss()
        }
    }

    /// Phase and local interval of step `k`, i.e. the move from grid point k to k+1.
    pub fn step_span(&self, k: usize) -> (Phase, f64, f64) {
        if k < self.n_ds {
            let dt = self.dt_ds();
            (Phase::Ds, k as f64 * dt, (k + 1) as f64 * dt)
        } else {
            let dt = self.dt_ss();
            let j = k - self.n_ds;
            (Phase::Ss, j as f64 * dt, (j + 1) as f64 * dt)
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Ds,
    Ss,
    Composed,
}

/// Row-selection operators over the 23-vector.
#[derive(Clone, Debug)]
pub struct SelectionSet {
    /// Swing foot, pelvis position, pelvis velocity, stance foot.
    pub xp: [usize; 8],
    pub foot_vel: [usize; 2],
    pub hip_const: [usize; 2],
    /// Pelvis position, swing foot position, pelvis velocity.
    pub x: [usize; 6],
    pub p: [usize; 2],
    /// All actuation entries: constant hip, constant ankle, ramp hip, ramp ankle.
    pub u: [usize; 8],
    pub w: [usize; 4],
    pub d: [usize; 1],
}

impl Default for SelectionSet {
    fn default() -> Self {
        use layout::*;
        SelectionSet {
            xp: [SWING_POS[0], SWING_POS[1], PELVIS_POS[0], PELVIS_POS[1], PELVIS_VEL[0], PELVIS_VEL[1], STANCE[0], STANCE[1]],
            foot_vel: SWING_VEL,
            hip_const: HIP_CONST,
            x: [0, 1, 2, 3, 4, 5],
            p: STANCE,
            u: [10, 11, 12, 13, 14, 15, 16, 17],
            w: W,
            d: [SIDE],
        }
    }
}

/// k×23 selection matrix picking `rows`.
pub fn selector(rows: &[usize]) -> DMatrix<f64> {
    let mut s = DMatrix::zeros(rows.len(), DIM);
    for (i, &r) in rows.iter().enumerate() {
        s[(i, r)] = 1.0;
    }
    s
}

/// Constant-coefficient generator over the augmented 27-vector.
#[derive(Clone, Debug)]
pub struct PhaseDynamics {
    pub generator: Mat27,
    pub phase: Phase,
}

/// Builds the default linear model for one phase. Support side is carried by
/// the state entry `d`, so the generator itself does not depend on it.
pub fn build_phase_dynamics(params: &ModelParams, phase: Phase) -> Result<PhaseDynamics> {
    use layout::*;
    params.validate()?;
    if phase == Phase::Composed {
        return Err(Error::Domain("phase dynamics exist only for ds or ss".into()));
    }
    let mut a = Mat27::zeros();
    let w1 = params.gravity / params.pelvis_height;
    let w2 = params.gravity / params.leg_com_height;
    let kp = 1.0 / (params.pelvis_mass * params.pelvis_height);
    let kl = 1.0 / (params.leg_mass * params.leg_com_height);
    for j in 0..2 {
        let (x1, x2, v1, v2, p) = (PELVIS_POS[j], SWING_POS[j], PELVIS_VEL[j], SWING_VEL[j], STANCE[j]);
        let (rho_hip, rho_ankle) = (RHO[j], RHO[2 + j]);
        a[(x1, v1)] = 1.0;
        a[(v1, x1)] = w1;
        match phase {
            Phase::Ss => a[(v1, p)] = -w1,
            _ => {
                a[(v1, p)] = -0.5 * w1;
                a[(v1, x2)] = -0.5 * w1;
            }
        }
        a[(v1, ANKLE_CONST[j])] = kp;
        a[(v1, rho_ankle)] = kp;
        // hip torque reaction on the pelvis
        a[(v1, HIP_CONST[j])] = -kp;
        a[(v1, rho_hip)] = -kp;
        a[(v1, W_FORCE[j])] = 1.0 / params.pelvis_mass;
        a[(v1, W_TORQUE[j])] = kp;
        if phase == Phase::Ss {
            a[(x2, v2)] = 1.0;
            a[(v2, x2)] = -w2;
            a[(v2, x1)] = w2;
            if j == 1 {
                a[(v2, SIDE)] = w2 * params.pelvis_half_width;
            }
            a[(v2, HIP_CONST[j])] = kl;
            a[(v2, rho_hip)] = kl;
        }
        a[(rho_hip, HIP_RAMP[j])] = 1.0;
        a[(rho_ankle, ANKLE_RAMP[j])] = 1.0;
    }
    Ok(PhaseDynamics { generator: a, phase })
}

#[derive(Clone, Debug)]
pub struct TransferMatrix {
    pub m: Mat23,
    pub span: (f64, f64),
    pub phase: Phase,
    pub constrained: bool,
}

impl TransferMatrix {
    pub fn identity(phase: Phase, t: f64) -> Self {
        TransferMatrix { m: Mat23::identity(), span: (t, t), phase, constrained: false }
    }

    /// Composition `self ∘ first` (apply `first`, then `self`).
    pub fn after(&self, first: &TransferMatrix) -> TransferMatrix {
        TransferMatrix {
            m: self.m * first.m,
            span: (first.span.0, self.span.1),
            phase: if self.phase == first.phase { self.phase } else { Phase::Composed },
            constrained: false,
        }
    }

    pub fn apply(&self, q: &Vec23) -> Vec23 {
        self.m * q
    }
}

/// Map over the local phase interval [t0, t1]. Ramp torques restart at the
/// phase start, so the integrators hold `t0 * rU` when the interval opens.
pub fn phase_transfer(dyn_: &PhaseDynamics, t0: f64, t1: f64) -> Result<TransferMatrix> {
    if !(t0 >= 0.0 && t1 >= t0) {
        return Err(Error::Domain(format!("invalid phase interval [{t0}, {t1}]")));
    }
    let e = (dyn_.generator * (t1 - t0)).exp();
    let mut m: Mat23 = e.fixed_view::<DIM, DIM>(0, 0).into_owned();
    if t0 > 0.0 {
        for (k, &col) in layout::RAMP.iter().enumerate() {
            for r in 0..DIM {
                m[(r, col)] += e[(r, layout::RHO[k])] * t0;
            }
        }
    }
    Ok(TransferMatrix { m, span: (t0, t1), phase: dyn_.phase, constrained: false })
}

/// Q(t) = H(t) Q(0) within one phase.
pub fn transfer_matrix(dyn_: &PhaseDynamics, t: f64) -> Result<TransferMatrix> {
    if t < 0.0 || !t.is_finite() {
        return Err(Error::Domain(format!("duration must be non-negative, got {t}")));
    }
    phase_transfer(dyn_, 0.0, t)
}

/// H(T_stride) = H^ss(T_ss) H^ds(T_ds).
pub fn stride_transfer(params: &ModelParams, timing: &GaitTiming) -> Result<TransferMatrix> {
    let ds = build_phase_dynamics(params, Phase::Ds)?;
    let hds = transfer_matrix(&ds, timing.t_ds)?;
    let mut h = if timing.t_ss > 0.0 {
        let ss = build_phase_dynamics(params, Phase::Ss)?;
        let hss = transfer_matrix(&ss, timing.t_ss)?;
        TransferMatrix { m: hss.m * hds.m, span: (0.0, 0.0), phase: Phase::Composed, constrained: false }
    } else {
        hds
    };
    h.span = (0.0, timing.stride());
    Ok(h)
}

/// Foot-velocity block S_Ẋ₂ H S_Mhᵀ, its inverse and a relative condition
/// estimate ‖S_Ẋ₂ H‖·‖block⁻¹‖.
fn constraint_block(h: &Mat23, sel: &SelectionSet) -> (Matrix2<f64>, Option<Matrix2<f64>>, f64) {
    let mut blk = Matrix2::zeros();
    for i in 0..2 {
        for j in 0..2 {
            blk[(i, j)] = h[(sel.foot_vel[i], sel.hip_const[j])];
        }
    }
    let mut row_norm = 0.0f64;
    for i in 0..2 {
        row_norm += h.row(sel.foot_vel[i]).norm_squared();
    }
    let row_norm = row_norm.sqrt();
    match blk.try_inverse() {
        Some(inv) => {
            let cond = row_norm * inv.norm();
            (blk, Some(inv), cond)
        }
        None => (blk, None, f64::INFINITY),
    }
}

pub const CONSTRAINT_COND_LIMIT: f64 = 1e12;
/// Relative condition above which the online controllers stop re-solving the
/// foot-velocity constraint and hold their last inputs. A constant hip torque
/// held for about half a swing period has no net effect on the final foot
/// velocity, so the block crosses singularity mid-stride; the baseline of the
/// presets is 1e2 to 1e3.
pub const CONSTRAINT_HOLD_COND: f64 = 1e4;

/// H′ = H − H S_Mhᵀ (S_Ẋ₂ H S_Mhᵀ)⁻¹ S_Ẋ₂ H. Returns the matrix and the condition estimate.
pub fn constrain_foot_velocity(h: &TransferMatrix, sel: &SelectionSet) -> Result<(TransferMatrix, f64)> {
    let (_, inv, cond) = constraint_block(&h.m, sel);
    let inv = match inv {
        Some(inv) if cond <= CONSTRAINT_COND_LIMIT && cond.is_finite() => inv,
        _ => return Err(Error::ConstraintSingular { cond }),
    };
    let mut hs = SMatrix::<f64, DIM, 2>::zeros();
    let mut sh = SMatrix::<f64, 2, DIM>::zeros();
    for j in 0..2 {
        hs.set_column(j, &h.m.column(sel.hip_const[j]));
        sh.set_row(j, &h.m.row(sel.foot_vel[j]));
    }
    let m = h.m - hs * inv * sh;
    Ok((TransferMatrix { m, span: h.span, phase: h.phase, constrained: true }, cond))
}

/// Constant hip torques that cancel the swing-foot velocity produced by `h` acting on `q`
/// (with the current constant hip torques of `q` ignored).
pub fn hip_torques_for_zero_velocity(h: &Mat23, q: &Vec23, sel: &SelectionSet) -> Result<(Vector2<f64>, f64)> {
    let (_, inv, cond) = constraint_block(h, sel);
    let inv = match inv {
        Some(inv) if cond <= CONSTRAINT_COND_LIMIT && cond.is_finite() => inv,
        _ => return Err(Error::ConstraintSingular { cond }),
    };
    let mut q0 = *q;
    q0[sel.hip_const[0]] = 0.0;
    q0[sel.hip_const[1]] = 0.0;
    let v = Vector2::new(h.row(sel.foot_vel[0]).dot(&q0.transpose()), h.row(sel.foot_vel[1]).dot(&q0.transpose()));
    Ok((-(inv * v), cond))
}

/// One transfer matrix per simulation step over the stride, each tagged with its phase.
pub fn step_matrices(params: &ModelParams, timing: &GaitTiming) -> Result<Vec<TransferMatrix>> {
    let ds = build_phase_dynamics(params, Phase::Ds)?;
    let ss = build_phase_dynamics(params, Phase::Ss)?;
    let mut out = Vec::with_capacity(timing.n_steps());
    for k in 0..timing.n_steps() {
        let (phase, t0, t1) = timing.step_span(k);
        let dyn_ = if phase == Phase::Ds { &ds } else { &ss };
        let mut g = phase_transfer(dyn_, t0, t1)?;
        g.span = (timing.grid_time(k), timing.grid_time(k + 1));
        out.push(g);
    }
    Ok(out)
}

/// Piecewise stride map H(t) from the stride start to absolute time t.
pub fn partial_transfer(params: &ModelParams, timing: &GaitTiming, t: f64) -> Result<TransferMatrix> {
    if !(0.0..=timing.stride() + 1e-12).contains(&t) {
        return Err(Error::Domain(format!("t = {t} outside [0, T_stride]")));
    }
    let ds = build_phase_dynamics(params, Phase::Ds)?;
    let mut h = if t <= timing.t_ds {
        transfer_matrix(&ds, t)?
    } else {
        let ss = build_phase_dynamics(params, Phase::Ss)?;
        let hss = transfer_matrix(&ss, t - timing.t_ds)?;
        let hds = transfer_matrix(&ds, timing.t_ds)?;
        TransferMatrix { m: hss.m * hds.m, span: (0.0, t), phase: Phase::Composed, constrained: false }
    };
    h.span = (0.0, t);
    Ok(h)
}

/// Map from the state at absolute time t to the state at T_stride (unconstrained).
pub fn remaining_transfer(params: &ModelParams, timing: &GaitTiming, t: f64) -> Result<TransferMatrix> {
    if !(t >= 0.0 && t < timing.stride()) {
        return Err(Error::Domain(format!("t = {t} outside [0, T_stride)")));
    }
    let ds = build_phase_dynamics(params, Phase::Ds)?;
    let mut g = if t < timing.t_ds {
        let hds = phase_transfer(&ds, t, timing.t_ds)?;
        if timing.t_ss > 0.0 {
            let ss = build_phase_dynamics(params, Phase::Ss)?;
            let hss = transfer_matrix(&ss, timing.t_ss)?;
            TransferMatrix { m: hss.m * hds.m, span: (0.0, 0.0), phase: Phase::Composed, constrained: false }
        } else {
            hds
        }
    } else {
        let ss = build_phase_dynamics(params, Phase::Ss)?;
        phase_transfer(&ss, t - timing.t_ds, timing.t_ss)?
    };
    g.span = (t, timing.stride());
    Ok(g)
}

/// Everything the controllers need for one (model, timing) pair, computed once.
#[derive(Clone, Debug)]
pub struct StrideModel {
    pub params: ModelParams,
    pub timing: GaitTiming,
    pub sel: SelectionSet,
    pub h: TransferMatrix,
    pub h_con: TransferMatrix,
    pub h_con_cond: f64,
    /// Per-step maps G_k, k = 0..n_steps.
    pub steps: Vec<TransferMatrix>,
    /// Remaining map from grid point k to the stride end, unconstrained.
    pub remaining: Vec<Mat23>,
    /// Constrained remaining map G′ from grid point k; `None` where the constraint is singular.
    pub remaining_con: Vec<Option<Mat23>>,
    /// Relative condition of the foot-velocity block of each remaining map.
    pub remaining_cond: Vec<f64>,
}

impl StrideModel {
    pub fn new(params: &ModelParams, timing: &GaitTiming) -> Result<Self> {
        let sel = SelectionSet::default();
        let h = stride_transfer(params, timing)?;
        let (h_con, h_con_cond) = constrain_foot_velocity(&h, &sel)?;
        let steps = step_matrices(params, timing)?;
        let n = steps.len();
        let mut remaining = vec![Mat23::identity(); n + 1];
        for k in (0..n).rev() {
            remaining[k] = remaining[k + 1] * steps[k].m;
        }
        let remaining_cond = remaining.iter().map(|g| constraint_block(g, &sel).2).collect();
        let remaining_con = remaining
            .iter()
            .map(|g| {
                let tm = TransferMatrix { m: *g, span: (0.0, 0.0), phase: Phase::Composed, constrained: false };
                constrain_foot_velocity(&tm, &sel).ok().map(|(c, _)| c.m)
            })
            .collect();
        Ok(StrideModel {
            params: params.clone(),
            timing: *timing,
            sel,
            h,
            h_con,
            h_con_cond,
            steps,
            remaining,
            remaining_con,
            remaining_cond,
        })
    }

    pub fn n_steps(&self) -> usize {
        self.steps.len()
    }

    /// G′ at grid point k if its constraint block is within `limit`.
    pub fn remaining_con_within(&self, k: usize, limit: f64) -> Option<&Mat23> {
        self.remaining_con[k].as_ref().filter(|_| self.remaining_cond[k] <= limit)
    }
}
