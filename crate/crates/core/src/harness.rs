//! Stride-by-stride simulation with pluggable controllers, and the walking
//! scenarios built on it.

use std::sync::Arc;

use nalgebra::{Vector2, Vector4, Vector6};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ctpc::{constraint_hip_torque, constraint_hip_torque_within, ObserverMatrix, ProjectionConfig, Projector};
use crate::error::{Error, Result};
use crate::gait::{retarget_speed, stride_speed, PeriodicGait, TransformConstants};
use crate::linmodel::{layout, partial_transfer, CONSTRAINT_HOLD_COND, ModelParams, StrideModel, Vec23};
use crate::stepctl::{build_error_system, design_gain, error_vector, ErrorSystem, ErrorVector, FeedbackGain, Variant};

pub const DIVERGENCE_LIMIT: f64 = 1e6;

/// Everything shared by controllers and the simulator for one model and gait.
#[derive(Clone, Debug)]
pub struct SimContext {
    pub model: StrideModel,
    pub sys: ErrorSystem,
    pub gait: PeriodicGait,
    pub consts: TransformConstants,
    /// Nominal state at every grid point of a stride, with its constraint torque applied.
    pub nominal: Vec<Vec23>,
    /// Observer pseudo-inverse per step; `None` where the W block is degenerate.
    pub observers: Vec<Option<ObserverMatrix>>,
}

impl SimContext {
    pub fn new(params: &ModelParams, gait: &PeriodicGait) -> Result<Self> {
        let model = StrideModel::new(params, &gait.timing)?;
        let consts = TransformConstants::default();
        let sys = build_error_system(&model.h_con.m, &consts, &model.sel)?;
        let observers = model.steps.iter().map(|g| ObserverMatrix::new(&g.m).ok()).collect();
        let mut ctx = SimContext { model, sys, gait: gait.clone(), consts, nominal: Vec::new(), observers };
        ctx.nominal = ctx.nominal_trajectory()?;
        Ok(ctx)
    }

    /// Swaps in a gait with the same timing.
    pub fn with_gait(&self, gait: &PeriodicGait) -> Result<Self> {
        if gait.timing != self.gait.timing {
            return Err(Error::Domain("gait timing differs from the model timing".into()));
        }
        let mut ctx = self.clone();
        ctx.gait = gait.clone();
        ctx.nominal = ctx.nominal_trajectory()?;
        Ok(ctx)
    }

    fn nominal_trajectory(&self) -> Result<Vec<Vec23>> {
        let mut q = self.gait.beta;
        let c = constraint_hip_torque(&q, &Vector4::zeros(), &self.model.remaining[0], &self.model.sel)?;
        q[layout::HIP_CONST[0]] = c[0];
        q[layout::HIP_CONST[1]] = c[1];
        // closed-form map per grid time; chaining the step matrices drifts by
        // ~1e-14, which the near-singular projections amplify past 1e-9
        let (params, timing) = (&self.model.params, &self.model.timing);
        (0..=self.model.n_steps())
            .map(|k| Ok(partial_transfer(params, timing, timing.grid_time(k).min(timing.stride()))?.m * q))
            .collect()
    }

    pub fn error(&self, q: &Vec23) -> ErrorVector {
        error_vector(&self.gait.beta, q, &self.consts, &self.model.sel)
    }

    /// Stride-start state (stance foot at the origin, feet at rest) with error e.
    pub fn state_from_error(&self, e: &ErrorVector) -> Vec23 {
        let p = Vector2::zeros();
        let x = self.sys.reconstruct_state(e, &self.gait.beta, &p, &self.consts, &self.model.sel);
        let mut q = self.gait.beta;
        for i in 0..6 {
            q[i] = x[i];
        }
        q[layout::SWING_VEL[0]] = 0.0;
        q[layout::SWING_VEL[1]] = 0.0;
        q[layout::STANCE[0]] = 0.0;
        q[layout::STANCE[1]] = 0.0;
        q
    }

    pub fn n_steps(&self) -> usize {
        self.model.n_steps()
    }
}

/// Exchange feet at touch-down, re-center on the new stance foot and mirror
/// the lateral axis so the next stride is again described with d = +1.
pub fn touchdown(q: &Vec23) -> Vec23 {
    use layout::*;
    let mut n = *q;
    for j in 0..2 {
        let new_stance = q[SWING_POS[j]];
        n[STANCE[j]] = 0.0;
        n[SWING_POS[j]] = q[STANCE[j]] - new_stance;
        n[PELVIS_POS[j]] = q[PELVIS_POS[j]] - new_stance;
        n[SWING_VEL[j]] = 0.0;
    }
    for i in 0..SIDE {
        if is_lateral(i) {
            n[i] = -n[i];
        }
    }
    n
}

fn mirror4(w: &Vector4<f64>) -> Vector4<f64> {
    Vector4::new(w[0], -w[1], w[2], -w[3])
}

fn mirror2(u: &Vector2<f64>) -> Vector2<f64> {
    Vector2::new(u[0], -u[1])
}

/// Feedback law producing the additional ramp hip torques U′.
pub trait Controller {
    fn name(&self) -> String;
    /// Called at every touch-down with the stride-start state.
    fn begin_stride(&mut self, ctx: &SimContext, q: &Vec23);
    /// Additional ramp hip torques for step k given state and disturbance estimate.
    fn step(&mut self, ctx: &SimContext, k: usize, q: &Vec23, w_est: &Vector4<f64>) -> Vector2<f64>;
    /// Called when the nominal gait changes (speed modulation).
    fn gait_changed(&mut self, _ctx: &SimContext) {}
    /// Number of steps where the controller fell back to held inputs.
    fn fallbacks(&self) -> usize {
        0
    }
}

#[derive(Clone, Debug, Default)]
pub struct OpenLoop;

impl Controller for OpenLoop {
    fn name(&self) -> String {
        "open-loop".into()
    }
    fn begin_stride(&mut self, _: &SimContext, _: &Vec23) {}
    fn step(&mut self, _: &SimContext, _: usize, _: &Vec23, _: &Vector4<f64>) -> Vector2<f64> {
        Vector2::zeros()
    }
}

/// Touch-down feedback held over the stride.
#[derive(Clone, Debug)]
pub struct Dlqr {
    pub gain: FeedbackGain,
    held: Vector2<f64>,
}

impl Dlqr {
    pub fn new(gain: FeedbackGain) -> Self {
        Dlqr { gain, held: Vector2::zeros() }
    }
}

impl Controller for Dlqr {
    fn name(&self) -> String {
        format!("dlqr-{}", self.gain.variant.name())
    }
    fn begin_stride(&mut self, ctx: &SimContext, q: &Vec23) {
        self.held = self.gain.correction(&ctx.error(q));
    }
    fn step(&mut self, _: &SimContext, _: usize, _: &Vec23, _: &Vector4<f64>) -> Vector2<f64> {
        self.held
    }
}

/// Time-projecting controller. With `update_at` set, the projection is solved
/// only at those grid indices and held in between.
#[derive(Clone, Debug)]
pub struct Ctpc {
    pub projector: Arc<Projector>,
    pub gain: FeedbackGain,
    pub update_at: Option<Vec<usize>>,
    last: Vector2<f64>,
    fallbacks: usize,
}

impl Ctpc {
    pub fn new(ctx: &SimContext, gain: FeedbackGain, cfg: ProjectionConfig) -> Self {
        let projector = Arc::new(Projector::new(&ctx.model, &ctx.sys, &gain, &ctx.gait, cfg));
        Ctpc { projector, gain, update_at: None, last: Vector2::zeros(), fallbacks: 0 }
    }

    pub fn from_projector(projector: Arc<Projector>, gain: FeedbackGain) -> Self {
        Ctpc { projector, gain, update_at: None, last: Vector2::zeros(), fallbacks: 0 }
    }
}

impl Controller for Ctpc {
    fn name(&self) -> String {
        let tag = self.projector.cfg.preset_name().map(|c| c.to_string()).unwrap_or_else(|| self.projector.cfg.to_string());
        format!("ctpc-{}-{}", tag, self.gain.variant.name())
    }
    fn begin_stride(&mut self, _: &SimContext, _: &Vec23) {
        // previous stride's input expressed in the mirrored frame
        self.last = mirror2(&self.last);
    }
    fn step(&mut self, _: &SimContext, k: usize, q: &Vec23, w_est: &Vector4<f64>) -> Vector2<f64> {
        if let Some(at) = &self.update_at {
            if !at.contains(&k) {
                return self.last;
            }
        }
        match self.projector.solve(k, q, w_est) {
            Ok(sol) => self.last = sol.u1,
            Err(_) => self.fallbacks += 1,
        }
        self.last
    }
    fn gait_changed(&mut self, ctx: &SimContext) {
        self.projector = Arc::new(Projector::new(&ctx.model, &ctx.sys, &self.gain, &ctx.gait, self.projector.cfg));
    }
    fn fallbacks(&self) -> usize {
        self.fallbacks
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ObserverMode {
    /// Estimate from the previous step's mismatch (one-step delay).
    #[default]
    Estimated,
    /// The true current disturbance.
    Oracle,
}

/// External force/torque on the torso in the world frame over [t_start, t_end).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PushEvent {
    pub w: [f64; 4],
    pub t_start: f64,
    pub t_end: f64,
}

impl PushEvent {
    pub fn new(w: [f64; 4], t_start: f64, t_end: f64) -> Result<Self> {
        if !(t_start < t_end) || w.iter().any(|v| !v.is_finite()) {
            return Err(Error::Domain(format!("invalid push [{t_start}, {t_end})")));
        }
        Ok(PushEvent { w, t_start, t_end })
    }

    pub fn force(fx: f64, fy: f64, t_start: f64, t_end: f64) -> Result<Self> {
        Self::new([fx, fy, 0.0, 0.0], t_start, t_end)
    }

    fn active(&self, t: f64) -> bool {
        t >= self.t_start - 1e-9 && t < self.t_end - 1e-9
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Telemetry {
    None,
    Strides,
    Full,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StepRecord {
    pub time: f64,
    pub stride: usize,
    pub k: usize,
    pub q: Vec<f64>,
    /// Deviation from the nominal trajectory at the same grid time, in error coordinates.
    pub e: [f64; 6],
    pub u_add: [f64; 2],
    pub w_true: [f64; 4],
    pub w_est: [f64; 4],
    pub hip_torque: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StrideRecord {
    pub stride: usize,
    /// Error at the touch-down ending this stride.
    pub e: [f64; 6],
    pub e_norm: f64,
    pub speed: f64,
    pub target_speed: f64,
    /// Time average of ‖U′‖ over the stride.
    pub u_norm: f64,
    /// Time average of U′ᵀU′ over the stride.
    pub u_sq: f64,
    /// World-frame position of the foot placed at this touch-down.
    pub footstep: [f64; 2],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub controller: String,
    pub steps: Vec<StepRecord>,
    pub strides: Vec<StrideRecord>,
    pub mean_e: f64,
    pub mean_u: f64,
    pub diverged: bool,
    pub divergences: usize,
    pub fallbacks: usize,
}

impl RunRecord {
    /// Aggregates recomputed from the stride summaries.
    pub fn recompute(strides: &[StrideRecord]) -> (f64, f64) {
        if strides.is_empty() {
            return (0.0, 0.0);
        }
        let n = strides.len() as f64;
        (strides.iter().map(|s| s.e_norm).sum::<f64>() / n, strides.iter().map(|s| s.u_norm).sum::<f64>() / n)
    }

    pub fn e_norms(&self) -> Vec<f64> {
        self.strides.iter().map(|s| s.e_norm).collect()
    }
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub n_strides: usize,
    pub observer: ObserverMode,
    pub telemetry: Telemetry,
    /// Restart from the nominal state after a divergence instead of aborting.
    pub reset_on_divergence: bool,
    /// Speed changes as (time, speed), applied at the first touch-down at or after the time.
    pub speed_profile: Vec<(f64, f64)>,
    /// Relative condition of the foot-velocity block above which the constant
    /// hip torque is held instead of re-solved.
    pub constraint_hold_cond: f64,
}


impl Default for RunOptions {
    fn default() -> Self {
        RunOptions { n_strides: 10, observer: ObserverMode::Estimated, telemetry: Telemetry::Strides, reset_on_divergence: false, speed_profile: Vec::new(), constraint_hold_cond: CONSTRAINT_HOLD_COND }
    }
}

fn arr<const N: usize>(v: impl Iterator<Item = f64>) -> [f64; N] {
    let mut a = [0.0; N];
    for (x, y) in a.iter_mut().zip(v) {
        *x = y;
    }
    a
}

/// Simulates `opts.n_strides` strides from stride-start state `q0` in the local frame.
pub fn simulate(ctx: &SimContext, controller: &mut dyn Controller, q0: &Vec23, pushes: &[PushEvent], opts: &RunOptions) -> Result<RunRecord> {
    let mut ctx = std::borrow::Cow::Borrowed(ctx);
    let n = ctx.n_steps();
    let t_stride = ctx.model.timing.stride();
    let sel = ctx.model.sel.clone();
    let mut q = *q0;
    let mut w_est = Vector4::zeros();
    let mut parity = 1.0;
    let mut origin = Vector2::zeros();
    let mut steps = Vec::new();
    let mut strides = Vec::with_capacity(opts.n_strides);
    let mut diverged = false;
    let mut divergences = 0;
    let mut last_hip = Vector2::zeros();
    let base_gait = ctx.gait.clone();
    let mut profile = opts.speed_profile.clone();
    profile.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut next_change = 0;

    for s in 0..opts.n_strides {
        let t0 = s as f64 * t_stride;
        while next_change < profile.len() && profile[next_change].0 <= t0 + 1e-9 {
            let g = retarget_speed(&base_gait, profile[next_change].1)?;
            ctx = std::borrow::Cow::Owned(ctx.with_gait(&g)?);
            controller.gait_changed(&ctx);
            next_change += 1;
        }
        controller.begin_stride(&ctx, &q);
        let mut u_norm = 0.0;
        let mut u_sq = 0.0;
        for k in 0..n {
            let t = t0 + ctx.model.timing.grid_time(k);
            let mut w_true = Vector4::zeros();
            for p in pushes.iter().filter(|p| p.active(t)) {
                w_true += Vector4::from_column_slice(&p.w);
            }
            let w_true = Vector4::new(w_true[0], parity * w_true[1], w_true[2], parity * w_true[3]);
            if opts.observer == ObserverMode::Oracle {
                w_est = w_true;
            }
            let du = controller.step(&ctx, k, &q, &w_est);
            for j in 0..2 {
                q[layout::HIP_RAMP[j]] = ctx.gait.beta[layout::HIP_RAMP[j]] + du[j];
            }
            let hip = constraint_hip_torque_within(&q, &w_est, &ctx.model.remaining[k], &sel, opts.constraint_hold_cond).unwrap_or(last_hip);
            last_hip = hip;
            for j in 0..2 {
                q[layout::HIP_CONST[j]] = hip[j];
            }
            for (j, &i) in layout::W.iter().enumerate() {
                q[i] = w_true[j];
            }
            let dt = ctx.model.timing.grid_time(k + 1) - ctx.model.timing.grid_time(k);
            u_norm += du.norm() * dt;
            u_sq += du.norm_squared() * dt;
            if opts.telemetry == Telemetry::Full {
                let (_, t_loc0, _) = ctx.model.timing.step_span(k);
                let e_inst = ctx.consts.m_sxp(&sel) * (ctx.nominal[k] - q);
                steps.push(StepRecord {
                    time: t,
                    stride: s,
                    k,
                    q: q.iter().copied().collect(),
                    e: arr(e_inst.iter().copied()),
                    u_add: [du[0], du[1]],
                    w_true: arr(w_true.iter().copied()),
                    w_est: arr(w_est.iter().copied()),
                    hip_torque: [hip[0] + q[layout::HIP_RAMP[0]] * t_loc0, hip[1] + q[layout::HIP_RAMP[1]] * t_loc0],
                });
            }
            let q_prev = q;
            q = ctx.model.steps[k].m * q;
            if opts.observer == ObserverMode::Estimated {
                if let Some(obs) = &ctx.observers[k] {
                    w_est = obs.estimate(&q_prev, &q, &ctx.model.steps[k].m).w_est;
                }
            }
        }
        // touch-down: world position of the landing foot
        let landing = Vector2::new(q[layout::SWING_POS[0]], q[layout::SWING_POS[1]]);
        let footstep = origin + Vector2::new(landing[0], parity * landing[1]);
        origin = footstep;
        parity = -parity;
        q = touchdown(&q);
        w_est = mirror4(&w_est);
        let e = ctx.error(&q);
        let e_norm = e.norm();
        strides.push(StrideRecord {
            stride: s,
            e: arr(e.iter().copied()),
            e_norm,
            speed: stride_speed(&q, &ctx.model.timing),
            target_speed: ctx.gait.speed,
            u_norm: u_norm / t_stride,
            u_sq: u_sq / t_stride,
            footstep: [footstep[0], footstep[1]],
        });
        if !(e_norm <= DIVERGENCE_LIMIT) {
            divergences += 1;
            if opts.reset_on_divergence {
                q = ctx.gait.beta;
                w_est = Vector4::zeros();
            } else {
                diverged = true;
                break;
            }
        }
    }
    let (mean_e, mean_u) = RunRecord::recompute(&strides);
    Ok(RunRecord { controller: controller.name(), steps, strides, mean_e, mean_u, diverged, divergences, fallbacks: controller.fallbacks() })
}

/// Controller selection used by the scenario runners and the CLI.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ControllerSpec {
    OpenLoop,
    Dlqr { variant: Variant },
    Ctpc { variant: Variant, config: String },
}

impl ControllerSpec {
    pub fn build(&self, ctx: &SimContext) -> Result<Box<dyn Controller>> {
        Ok(match self {
            ControllerSpec::OpenLoop => Box::new(OpenLoop),
            ControllerSpec::Dlqr { variant } => Box::new(Dlqr::new(design_gain(&ctx.sys, *variant)?)),
            ControllerSpec::Ctpc { variant, config } => {
                let cfg: ProjectionConfig = config.parse()?;
                Box::new(Ctpc::new(ctx, design_gain(&ctx.sys, *variant)?, cfg))
            }
        })
    }
}

/// Strides from `from` until the first stride whose speed is within `tol` (relative) of the target.
pub fn strides_to_converge(run: &RunRecord, from: usize, tol: f64) -> Option<usize> {
    run.strides[from..].iter().position(|s| (s.speed - s.target_speed).abs() <= tol * s.target_speed.abs().max(1e-12))
}

/// Speed tracking: speed changes at stride boundaries, starting on the nominal
/// gait at the first profile speed.
pub fn run_speed_tracking(ctx: &SimContext, controller: &mut dyn Controller, profile: &[(f64, f64)], n_strides: usize) -> Result<RunRecord> {
    let first = profile.first().map(|p| p.1).unwrap_or(ctx.gait.speed);
    let start = retarget_speed(&ctx.gait, first)?;
    let ctx0 = ctx.with_gait(&start)?;
    controller.gait_changed(&ctx0);
    let opts = RunOptions { n_strides, speed_profile: profile.to_vec(), ..Default::default() };
    simulate(&ctx0, controller, &start.beta, &[], &opts)
}

/// Index (counted from `from`) of the first touch-down with ‖e‖ below `frac` of the peak after `from`.
pub fn recovery_strides(run: &RunRecord, from: usize, frac: f64) -> Option<usize> {
    let tail = &run.strides[from.min(run.strides.len())..];
    let peak = tail.iter().map(|s| s.e_norm).fold(0.0, f64::max);
    tail.iter().position(|s| s.e_norm < frac * peak)
}

/// Stride push: constant push over exactly one stride (the second), gait at its nominal speed.
pub fn run_stride_push(ctx: &SimContext, controller: &mut dyn Controller, w: [f64; 4], n_strides: usize, observer: ObserverMode) -> Result<RunRecord> {
    let t = ctx.model.timing.stride();
    let push = PushEvent::new(w, t, 2.0 * t)?;
    let opts = RunOptions { n_strides, observer, ..Default::default() };
    simulate(ctx, controller, &ctx.gait.beta, &[push], &opts)
}

/// Intermittent pushes: pushes at arbitrary (grid-aligned) times.
pub fn run_intermittent(ctx: &SimContext, controller: &mut dyn Controller, pushes: &[PushEvent], n_strides: usize) -> Result<RunRecord> {
    let opts = RunOptions { n_strides, telemetry: Telemetry::Strides, ..Default::default() };
    simulate(ctx, controller, &ctx.gait.beta, pushes, &opts)
}

/// Peak touch-down error over strides at and after the push start.
pub fn peak_error(run: &RunRecord, from_stride: usize) -> f64 {
    run.strides[from_stride.min(run.strides.len())..].iter().map(|s| s.e_norm).fold(0.0, f64::max)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchmarkOptions {
    pub n_strides: usize,
    pub n_pushes: usize,
    pub max_force: f64,
    pub reset_on_divergence: bool,
}

impl Default for BenchmarkOptions {
    fn default() -> Self {
        BenchmarkOptions { n_strides: 1000, n_pushes: 100, max_force: 20.0, reset_on_divergence: false }
    }
}

/// Random pushes: force uniform in ±max per axis, grid-aligned start uniform
/// over the run, duration uniform in 1..=one stride of steps.
pub fn random_pushes(seed: u64, timing: &crate::linmodel::GaitTiming, opts: &BenchmarkOptions) -> Vec<PushEvent> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = timing.n_steps();
    let total = n * opts.n_strides;
    let t_stride = timing.stride();
    let abs_time = |g: usize| (g / n) as f64 * t_stride + timing.grid_time(g % n);
    (0..opts.n_pushes)
        .map(|_| {
            let fx = rng.gen_range(-opts.max_force..=opts.max_force);
            let fy = rng.gen_range(-opts.max_force..=opts.max_force);
            let start = rng.gen_range(0..total);
            let dur = rng.gen_range(1..=n);
            PushEvent { w: [fx, fy, 0.0, 0.0], t_start: abs_time(start), t_end: abs_time(start + dur) }
        })
        .collect()
}

/// Seeded random-push benchmark.
pub fn run_benchmark(ctx: &SimContext, controller: &mut dyn Controller, seed: u64, opts: &BenchmarkOptions) -> Result<RunRecord> {
    let pushes = random_pushes(seed, &ctx.model.timing, opts);
    let run_opts = RunOptions { n_strides: opts.n_strides, telemetry: Telemetry::Strides, reset_on_divergence: opts.reset_on_divergence, ..Default::default() };
    simulate(ctx, controller, &ctx.gait.beta, &pushes, &run_opts)
}

/// Error after each stride from the 6 unit initial errors, as columns of a 6×6 map.
pub fn probe_stride_map(ctx: &SimContext, make: &mut dyn FnMut() -> Box<dyn Controller>, n_strides: usize) -> Result<nalgebra::Matrix6<f64>> {
    let mut m = nalgebra::Matrix6::zeros();
    for i in 0..6 {
        let e0 = Vector6::from_fn(|r, _| if r == i { 1.0 } else { 0.0 });
        let q0 = ctx.state_from_error(&e0);
        let mut c = make();
        let run = simulate(ctx, c.as_mut(), &q0, &[], &RunOptions { n_strides, telemetry: Telemetry::Strides, ..Default::default() })?;
        let last = run.strides.last().ok_or(Error::Domain("no strides simulated".into()))?;
        if run.diverged {
            return Err(Error::Divergence { stride: last.stride });
        }
        m.set_column(i, &Vector6::from_column_slice(&last.e));
    }
    Ok(m)
}
