//! Disturbance observer, constraint hip torques and the time-projecting controller.

use std::fmt;
use std::str::FromStr;

use nalgebra::{SMatrix, SVector, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gait::{Mat6, PeriodicGait, TransformConstants};
use crate::linmodel::{hip_torques_for_zero_velocity, layout, CONSTRAINT_HOLD_COND, Mat23, SelectionSet, StrideModel, Vec23};
use crate::stepctl::{ErrorSystem, FeedbackGain, Mat2x6, Mat6x2, Mat6x4};

pub type Mat16 = SMatrix<f64, 16, 16>;
pub type Vec16 = SVector<f64, 16>;
pub type Mat6x8 = SMatrix<f64, 6, 8>;
pub type Mat6x11 = SMatrix<f64, 6, 11>;
pub type Mat2 = SMatrix<f64, 2, 2>;

/// Columns of the constant vector Z: stance foot, nominal constant torques,
/// nominal ramp torques, side flag.
pub const Z_COLS: [usize; 11] = [8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 22];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Category {
    C1,
    C2,
    C3,
    C4,
}

impl Category {
    pub const ALL: [Category; 4] = [Category::C1, Category::C2, Category::C3, Category::C4];

    pub fn from_features(alternatives: usize, constant_input: bool) -> Self {
        match (alternatives, constant_input) {
            (2, false) => Category::C1,
            (2, true) => Category::C2,
            (_, false) => Category::C3,
            (_, true) => Category::C4,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self)
    }
}

/// Twelve interconnection flags d₁…d₁₂ (index 0 is d₁).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProjectionConfig {
    pub flags: [bool; 12],
}

impl ProjectionConfig {
    pub const C1: &'static str = "1110 0110 1001";
    pub const C2: &'static str = "1110 0110 1101";
    pub const C3: &'static str = "1100 1010 1001";
    pub const C4: &'static str = "1100 1011 1101";

    pub fn preset(c: Category) -> Self {
        let s = match c {
            Category::C1 => Self::C1,
            Category::C2 => Self::C2,
            Category::C3 => Self::C3,
            Category::C4 => Self::C4,
        };
        s.parse().expect("preset flags are well formed")
    }

    /// Configuration number in 0..4096 with d₁ as the most significant bit,
    /// so numeric order equals lexicographic flag order.
    pub fn from_index(idx: u16) -> Self {
        let mut flags = [false; 12];
        for (i, f) in flags.iter_mut().enumerate() {
            *f = (idx >> (11 - i)) & 1 == 1;
        }
        ProjectionConfig { flags }
    }

    pub fn index(&self) -> u16 {
        self.flags.iter().fold(0u16, |acc, &f| (acc << 1) | u16::from(f))
    }

    /// d_i for 1 ≤ i ≤ 12, as 0.0 or 1.0.
    pub fn d(&self, i: usize) -> f64 {
        if self.flags[i - 1] {
            1.0
        } else {
            0.0
        }
    }

    pub fn alternative_count(&self) -> usize {
        if self.flags[2] || self.flags[3] {
            2
        } else {
            1
        }
    }

    /// Table preset this flag pattern matches, if any.
    pub fn preset_name(&self) -> Option<Category> {
        Category::ALL.into_iter().find(|&c| Self::preset(c) == *self)
    }
}

impl FromStr for ProjectionConfig {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bits: Vec<char> = s.chars().filter(|c| !c.is_whitespace() && *c != '_').collect();
        if bits.len() != 12 {
            return Err(Error::Config(format!("expected 12 flags, got '{s}'")));
        }
        let mut flags = [false; 12];
        for (f, c) in flags.iter_mut().zip(bits) {
            *f = match c {
                '0' => false,
                '1' => true,
                _ => return Err(Error::Config(format!("flag '{c}' is not binary"))),
            };
        }
        Ok(ProjectionConfig { flags })
    }
}

impl fmt::Display for ProjectionConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, &b) in self.flags.iter().enumerate() {
            if i > 0 && i % 4 == 0 {
                write!(f, " ")?;
            }
            write!(f, "{}", u8::from(b))?;
        }
        Ok(())
    }
}

/// Block decomposition of H′ (constant) and of G′ at one grid time, plus the
/// rearranged DLQR law U_i + D₁X_i = D₂ + D₃P.
#[derive(Clone, Debug)]
pub struct ProjectionBlocks {
    pub h1: Mat6,
    pub h2: Mat6x2,
    pub h3: Mat6x4,
    pub h4: Mat6x11,
    pub g1: Mat6x8,
    pub g2: Mat6x2,
    pub g3: Mat6x4,
    pub g4: Mat6x11,
    pub d1: Mat2x6,
    pub d2: Vector2<f64>,
    pub d3: Mat2,
    /// Stride-start X and P of the gait; reference point of the shifted solve.
    pub x_ref: SVector<f64, 6>,
    pub p_ref: Vector2<f64>,
}

fn take<const R: usize, const C: usize>(m: &Mat23, rows: [usize; R], cols: &[usize]) -> SMatrix<f64, R, C> {
    SMatrix::<f64, R, C>::from_fn(|i, j| m[(rows[i], cols[j])])
}

const X6: [usize; 6] = [0, 1, 2, 3, 4, 5];

impl ProjectionBlocks {
    pub fn new(h_con: &Mat23, g_con: &Mat23, gain: &FeedbackGain, sys: &ErrorSystem, beta: &Vec23, consts: &TransformConstants, sel: &SelectionSet) -> Self {
        let ramp = layout::HIP_RAMP;
        let ms_beta = consts.m_sxp(sel) * beta;
        ProjectionBlocks {
            h1: take::<6, 6>(h_con, X6, &X6),
            h2: take::<6, 2>(h_con, X6, &ramp),
            h3: take::<6, 4>(h_con, X6, &layout::W),
            h4: take::<6, 11>(h_con, X6, &Z_COLS),
            g1: take::<6, 8>(g_con, X6, &[0, 1, 2, 3, 4, 5, 6, 7]),
            g2: take::<6, 2>(g_con, X6, &ramp),
            g3: take::<6, 4>(g_con, X6, &layout::W),
            g4: take::<6, 11>(g_con, X6, &Z_COLS),
            d1: -(gain.k * sys.m1),
            d2: -(gain.k * ms_beta),
            d3: gain.k * sys.m2,
            x_ref: SVector::<f64, 6>::from_fn(|i, _| beta[sel.x[i]]),
            p_ref: Vector2::new(beta[sel.p[0]], beta[sel.p[1]]),
        }
    }
}

/// Left-hand side of the 16×16 projection system.
pub fn assemble_matrix(cfg: &ProjectionConfig, b: &ProjectionBlocks) -> Mat16 {
    let d = |i| cfg.d(i);
    let mut a = Mat16::zeros();
    a.fixed_view_mut::<6, 6>(0, 0).copy_from(&b.h1);
    a.fixed_view_mut::<6, 2>(0, 6).copy_from(&(b.h2 * d(1) - b.g2 * d(2)));
    a.fixed_view_mut::<6, 2>(0, 14).copy_from(&(b.h2 * d(3) - b.g2 * d(4)));
    a.fixed_view_mut::<2, 6>(6, 0).copy_from(&b.d1);
    a.fixed_view_mut::<2, 2>(6, 6).copy_from(&Mat2::identity());
    a.fixed_view_mut::<6, 2>(8, 6).copy_from(&(b.h2 * d(5) - b.g2 * d(6)));
    a.fixed_view_mut::<6, 6>(8, 8).copy_from(&b.h1);
    a.fixed_view_mut::<6, 2>(8, 14).copy_from(&(b.h2 * d(7) - b.g2 * d(8)));
    a.fixed_view_mut::<2, 6>(14, 8).copy_from(&b.d1);
    a.fixed_view_mut::<2, 2>(14, 14).copy_from(&Mat2::identity());
    a
}

/// Right-hand side of the projection system.
pub fn assemble_rhs(cfg: &ProjectionConfig, b: &ProjectionBlocks, x_t: &SVector<f64, 8>, w: &Vector4<f64>, z: &SVector<f64, 11>, p: &Vector2<f64>) -> Vec16 {
    let d = |i| cfg.d(i);
    let base = b.g1 * x_t + (b.g4 - b.h4) * z;
    let law = b.d2 + b.d3 * p;
    let mut r = Vec16::zeros();
    r.fixed_rows_mut::<6>(0).copy_from(&(base + (b.g3 * d(10) - b.h3 * d(9)) * w));
    r.fixed_rows_mut::<2>(6).copy_from(&law);
    r.fixed_rows_mut::<6>(8).copy_from(&(base + (b.g3 * d(12) - b.h3 * d(11)) * w));
    r.fixed_rows_mut::<2>(14).copy_from(&law);
    r
}

/// Right-hand side for the unknowns shifted by the gait's stride-start X.
/// Since M S_XP β = M₁X_β + M₂P_β, the law rows reduce to K M₂ (P − P_β)
/// and the large cancelling terms of D₂ never get formed.
pub fn assemble_rhs_shifted(cfg: &ProjectionConfig, b: &ProjectionBlocks, x_t: &SVector<f64, 8>, w: &Vector4<f64>, z: &SVector<f64, 11>, p: &Vector2<f64>) -> Vec16 {
    let d = |i| cfg.d(i);
    let base = b.g1 * x_t - b.h1 * b.x_ref + (b.g4 - b.h4) * z;
    let law = b.d3 * (p - b.p_ref);
    let mut r = Vec16::zeros();
    r.fixed_rows_mut::<6>(0).copy_from(&(base + (b.g3 * d(10) - b.h3 * d(9)) * w));
    r.fixed_rows_mut::<2>(6).copy_from(&law);
    r.fixed_rows_mut::<6>(8).copy_from(&(base + (b.g3 * d(12) - b.h3 * d(11)) * w));
    r.fixed_rows_mut::<2>(14).copy_from(&law);
    r
}

/// Full assembly: returns (A, b).
pub fn assemble_projection(cfg: &ProjectionConfig, blocks: &ProjectionBlocks, x_t: &SVector<f64, 8>, w: &Vector4<f64>, z: &SVector<f64, 11>, p: &Vector2<f64>) -> (Mat16, Vec16) {
    (assemble_matrix(cfg, blocks), assemble_rhs(cfg, blocks, x_t, w, z, p))
}

pub const PROJECTION_COND_LIMIT: f64 = 1e12;

pub fn condition_number16(a: &Mat16) -> f64 {
    let sv = a.singular_values();
    let smin = sv.min();
    if smin <= 0.0 {
        f64::INFINITY
    } else {
        sv.max() / smin
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionSolution {
    pub x1: SVector<f64, 6>,
    pub u1: Vector2<f64>,
    pub x2: SVector<f64, 6>,
    pub u2: Vector2<f64>,
}

impl ProjectionSolution {
    fn from_shifted(v: &Vec16, x_ref: &SVector<f64, 6>) -> Self {
        let mut s = Self::from_vec(v);
        s.x1 += x_ref;
        s.x2 += x_ref;
        s
    }

    fn from_vec(v: &Vec16) -> Self {
        ProjectionSolution {
            x1: v.fixed_rows::<6>(0).into_owned(),
            u1: v.fixed_rows::<2>(6).into_owned(),
            x2: v.fixed_rows::<6>(8).into_owned(),
            u2: v.fixed_rows::<2>(14).into_owned(),
        }
    }
}

/// Dense solve of an assembled system with a conditioning check.
pub fn solve_projection(a: &Mat16, b: &Vec16) -> Result<ProjectionSolution> {
    let cond = condition_number16(a);
    if !(cond <= PROJECTION_COND_LIMIT) {
        return Err(Error::ProjectionSingular { cond });
    }
    let x = a.lu().solve(b).ok_or(Error::ProjectionSingular { cond })?;
    Ok(ProjectionSolution::from_vec(&x))
}

/// Current-system inputs of the projection: X_t, Z and P from a state vector.
pub fn projection_inputs(q: &Vec23, beta: &Vec23) -> (SVector<f64, 8>, SVector<f64, 11>, Vector2<f64>) {
    let x_t = SVector::<f64, 8>::from_fn(|i, _| q[i]);
    let mut z = SVector::<f64, 11>::zeros();
    for (i, &c) in Z_COLS.iter().enumerate() {
        z[i] = match c {
            8 | 9 | 22 => q[c],
            _ => beta[c],
        };
    }
    let p = Vector2::new(q[layout::STANCE[0]], q[layout::STANCE[1]]);
    (x_t, z, p)
}

/// Projection machinery for one (model, gain, gait, config): blocks and
/// factorized systems for every grid time of the stride.
#[derive(Clone, Debug)]
pub struct Projector {
    pub cfg: ProjectionConfig,
    pub blocks: Vec<Option<ProjectionBlocks>>,
    pub lu: Vec<Option<nalgebra::linalg::LU<f64, nalgebra::U16, nalgebra::U16>>>,
    pub cond: Vec<f64>,
    pub beta: Vec23,
}

impl Projector {
    pub fn new(model: &StrideModel, sys: &ErrorSystem, gain: &FeedbackGain, gait: &PeriodicGait, cfg: ProjectionConfig) -> Self {
        let consts = TransformConstants::default();
        let blocks: Vec<Option<ProjectionBlocks>> = (0..model.n_steps())
            .map(|k| {
                model
                    .remaining_con_within(k, CONSTRAINT_HOLD_COND)
                    .map(|g| ProjectionBlocks::new(&model.h_con.m, g, gain, sys, &gait.beta, &consts, &model.sel))
            })
            .collect();
        Self::from_blocks(cfg, blocks, gait.beta)
    }

    /// Reuses blocks across configurations (only the flags change).
    pub fn from_blocks(cfg: ProjectionConfig, blocks: Vec<Option<ProjectionBlocks>>, beta: Vec23) -> Self {
        let mut lu = Vec::with_capacity(blocks.len());
        let mut cond = Vec::with_capacity(blocks.len());
        for b in &blocks {
            match b {
                Some(b) => {
                    let a = assemble_matrix(&cfg, b);
                    let c = condition_number16(&a);
                    cond.push(c);
                    lu.push(if c <= PROJECTION_COND_LIMIT { Some(a.lu()) } else { None });
                }
                None => {
                    cond.push(f64::INFINITY);
                    lu.push(None);
                }
            }
        }
        Projector { cfg, blocks, lu, cond, beta }
    }

    /// Solves the projection at grid index k for state q and disturbance estimate w.
    pub fn solve(&self, k: usize, q: &Vec23, w: &Vector4<f64>) -> Result<ProjectionSolution> {
        let (Some(b), Some(lu)) = (&self.blocks[k], &self.lu[k]) else {
            return Err(Error::ProjectionSingular { cond: self.cond[k] });
        };
        let (x_t, z, p) = projection_inputs(q, &self.beta);
        let rhs = assemble_rhs_shifted(&self.cfg, b, &x_t, w, &z, &p);
        let x = lu.solve(&rhs).ok_or(Error::ProjectionSingular { cond: self.cond[k] })?;
        Ok(ProjectionSolution::from_shifted(&x, &b.x_ref))
    }
}

/// Disturbance estimate from one step of mismatch.
#[derive(Clone, Debug, PartialEq)]
pub struct ObserverState {
    pub w_est: Vector4<f64>,
    pub residual: Vec23,
    /// Ratio of largest to smallest retained singular value of the W columns.
    pub condition: f64,
    pub rank: usize,
}

pub const OBSERVER_CUTOFF: f64 = 1e-10;

/// Truncated pseudo-inverse of the W columns of one step map.
#[derive(Clone, Debug)]
pub struct ObserverMatrix {
    pub pinv: SMatrix<f64, 4, 23>,
    pub gw: SMatrix<f64, 23, 4>,
    pub condition: f64,
    pub rank: usize,
}

impl ObserverMatrix {
    pub fn new(g: &Mat23) -> Result<Self> {
        let gw = SMatrix::<f64, 23, 4>::from_fn(|i, j| g[(i, layout::W[j])]);
        let svd = gw.svd(true, true);
        let smax = svd.singular_values.max();
        if !(smax > 0.0) {
            return Err(Error::ObserverDegenerate);
        }
        let cut = OBSERVER_CUTOFF * smax;
        let (u, v_t) = (svd.u.ok_or(Error::ObserverDegenerate)?, svd.v_t.ok_or(Error::ObserverDegenerate)?);
        let mut pinv = SMatrix::<f64, 4, 23>::zeros();
        let mut rank = 0;
        let mut smin = smax;
        for k in 0..4 {
            let s = svd.singular_values[k];
            if s > cut {
                rank += 1;
                smin = smin.min(s);
                pinv += v_t.row(k).transpose() * u.column(k).transpose() / s;
            }
        }
        if rank == 0 {
            return Err(Error::ObserverDegenerate);
        }
        Ok(ObserverMatrix { pinv, gw, condition: smax / smin, rank })
    }

    pub fn estimate(&self, q_prev: &Vec23, q_now: &Vec23, g: &Mat23) -> ObserverState {
        let mut q0 = *q_prev;
        for &i in &layout::W {
            q0[i] = 0.0;
        }
        let mismatch = q_now - g * q0;
        let w_est = self.pinv * mismatch;
        let residual = mismatch - self.gw * w_est;
        ObserverState { w_est, residual, condition: self.condition, rank: self.rank }
    }
}

/// W_est = pinv(G_W)·(q_now − G q_prev|W=0) with a truncated pseudo-inverse.
/// Force and torque columns may be collinear; the minimum-norm split is returned.
pub fn observe_disturbance(q_prev: &Vec23, q_now: &Vec23, g: &Mat23) -> Result<ObserverState> {
    Ok(ObserverMatrix::new(g)?.estimate(q_prev, q_now, g))
}

/// Constant swing-hip torques giving zero swing-foot velocity at the stride
/// end, with the disturbance estimate held until then.
pub fn constraint_hip_torque(q_now: &Vec23, w_est: &Vector4<f64>, g_remaining: &Mat23, sel: &SelectionSet) -> Result<Vector2<f64>> {
    let mut q = *q_now;
    for (j, &i) in layout::W.iter().enumerate() {
        q[i] = w_est[j];
    }
    hip_torques_for_zero_velocity(g_remaining, &q, sel).map(|(c, _)| c)
}

/// As `constraint_hip_torque`, but refuses blocks whose relative condition
/// exceeds `limit`.
pub fn constraint_hip_torque_within(q_now: &Vec23, w_est: &Vector4<f64>, g_remaining: &Mat23, sel: &SelectionSet, limit: f64) -> Result<Vector2<f64>> {
    let mut q = *q_now;
    for (j, &i) in layout::W.iter().enumerate() {
        q[i] = w_est[j];
    }
    let (c, cond) = hip_torques_for_zero_velocity(g_remaining, &q, sel)?;
    if cond > limit {
        return Err(Error::ConstraintSingular { cond });
    }
    Ok(c)
}

/// One-shot policy evaluation: builds the blocks at time index k and solves.
pub fn ctpc_policy(cfg: &ProjectionConfig, model: &StrideModel, sys: &ErrorSystem, gain: &FeedbackGain, gait: &PeriodicGait, q: &Vec23, k: usize, w_est: &Vector4<f64>) -> Result<ProjectionSolution> {
    if k >= model.n_steps() {
        return Err(Error::Domain(format!("grid index {k} outside the stride")));
    }
    let g = model.remaining_con[k].as_ref().ok_or(Error::ConstraintSingular { cond: f64::INFINITY })?;
    let blocks = ProjectionBlocks::new(&model.h_con.m, g, gain, sys, &gait.beta, &TransformConstants::default(), &model.sel);
    let (x_t, z, p) = projection_inputs(q, &gait.beta);
    let (a, b) = assemble_projection(cfg, &blocks, &x_t, w_est, &z, &p);
    solve_projection(&a, &b)
}

pub const CONSTANT_INPUT_TOL: f64 = 1e-6;

/// Largest spread of the applied policy over one stride, for (a) a perturbed
/// initial state without disturbance and (b) the nominal start with a constant
/// push from mid-stride on. In case (b) only steps after the push onset count.
pub fn input_variation(ctx: &crate::harness::SimContext, gain: &FeedbackGain, cfg: ProjectionConfig) -> Result<f64> {
    use crate::harness::{simulate, Ctpc, ObserverMode, PushEvent, RunOptions, Telemetry};
    let n = ctx.n_steps();
    let opts = RunOptions { n_strides: 1, observer: ObserverMode::Oracle, telemetry: Telemetry::Full, ..Default::default() };
    let spread = |u: &[[f64; 2]]| -> f64 {
        let mut s: f64 = 0.0;
        for j in 0..2 {
            let (lo, hi) = u.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v[j]), b.max(v[j])));
            s = s.max(hi - lo);
        }
        s
    };
    let projector = std::sync::Arc::new(Projector::new(&ctx.model, &ctx.sys, gain, &ctx.gait, cfg));

    let e0 = nalgebra::Vector6::new(0.02, -0.01, 0.03, 0.01, -0.05, 0.02);
    let q0 = ctx.state_from_error(&e0);
    let run = simulate(ctx, &mut Ctpc::from_projector(projector.clone(), gain.clone()), &q0, &[], &opts)?;
    let ua: Vec<[f64; 2]> = run.steps.iter().map(|s| s.u_add).collect();

    let onset = n / 2;
    let t_on = ctx.model.timing.grid_time(onset);
    let push = PushEvent::new([10.0, 5.0, 0.0, 0.0], t_on, ctx.model.timing.stride() + 1.0)?;
    let run = simulate(ctx, &mut Ctpc::from_projector(projector, gain.clone()), &ctx.gait.beta, &[push], &opts)?;
    let ub: Vec<[f64; 2]> = run.steps.iter().filter(|s| s.k >= onset).map(|s| s.u_add).collect();
    Ok(spread(&ua).max(spread(&ub)))
}

/// Whether the policy stays constant over a stride (Table-I "constant inputs").
pub fn is_constant_input(ctx: &crate::harness::SimContext, gain: &FeedbackGain, cfg: ProjectionConfig) -> Result<bool> {
    Ok(input_variation(ctx, gain, cfg)? < CONSTANT_INPUT_TOL)
}
