//! Closed-loop eigenvalues, intermittent-push response surfaces and
//! controllable regions.

use std::sync::Arc;

use nalgebra::{Complex, DMatrix, DVector, Matrix3, Matrix6, Vector2, Vector4, Vector6};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ctpc::{ProjectionConfig, Projector};
use crate::error::{Error, Result};
use crate::gait::{actuated_gait, PeriodicGait};
use crate::harness::{simulate, Controller, Ctpc, Dlqr, OpenLoop, PushEvent, RunOptions, RunRecord, SimContext, Telemetry, DIVERGENCE_LIMIT};
use crate::linmodel::{layout, GaitTiming, ModelParams, Vec23};
use crate::search::sub_period_start;
use crate::stepctl::{design_gain, FeedbackGain, Variant};

/// Superposition residual above which a probed map is rejected.
pub const LINEARITY_TOL: f64 = 1e-8;
/// Initial-error scale used when probing closed-loop maps.
const PROBE: f64 = 1e-2;

/// Builds fresh controllers of one kind, sharing the expensive projector.
#[derive(Clone, Debug)]
pub enum ControllerFactory {
    OpenLoop,
    Dlqr(FeedbackGain),
    Ctpc { projector: Arc<Projector>, gain: FeedbackGain, update_at: Option<Vec<usize>> },
}

impl ControllerFactory {
    pub fn open_loop() -> Self {
        ControllerFactory::OpenLoop
    }

    pub fn dlqr(ctx: &SimContext, variant: Variant) -> Result<Self> {
        Ok(ControllerFactory::Dlqr(design_gain(&ctx.sys, variant)?))
    }

    pub fn ctpc(ctx: &SimContext, variant: Variant, cfg: ProjectionConfig) -> Result<Self> {
        let gain = design_gain(&ctx.sys, variant)?;
        let projector = Arc::new(Projector::new(&ctx.model, &ctx.sys, &gain, &ctx.gait, cfg));
        Ok(ControllerFactory::Ctpc { projector, gain, update_at: None })
    }

    pub fn from_spec(ctx: &SimContext, spec: &crate::harness::ControllerSpec) -> Result<Self> {
        use crate::harness::ControllerSpec as S;
        match spec {
            S::OpenLoop => Ok(Self::open_loop()),
            S::Dlqr { variant } => Self::dlqr(ctx, *variant),
            S::Ctpc { variant, config } => Self::ctpc(ctx, *variant, config.parse()?),
        }
    }

    pub fn with_update_at(mut self, at: Vec<usize>) -> Self {
        if let ControllerFactory::Ctpc { update_at, .. } = &mut self {
            *update_at = Some(at);
        }
        self
    }

    pub fn make(&self) -> Box<dyn Controller> {
        match self {
            ControllerFactory::OpenLoop => Box::new(OpenLoop),
            ControllerFactory::Dlqr(g) => Box::new(Dlqr::new(g.clone())),
            ControllerFactory::Ctpc { projector, gain, update_at } => {
                let mut c = Ctpc::from_projector(projector.clone(), gain.clone());
                c.update_at = update_at.clone();
                Box::new(c)
            }
        }
    }

    pub fn name(&self) -> String {
        self.make().name()
    }
}

/// Gait at `freq` steps per second and `speed` m/s with 20 % double support.
pub fn frequency_gait(params: &ModelParams, freq: f64, speed: f64, n: usize) -> Result<PeriodicGait> {
    actuated_gait(params, &GaitTiming::from_frequency(freq, n)?, speed)
}

fn unit6(i: usize) -> Vector6<f64> {
    Vector6::from_fn(|r, _| if r == i { 1.0 } else { 0.0 })
}

fn final_error(ctx: &SimContext, factory: &ControllerFactory, e0: &Vector6<f64>, n_strides: usize) -> Result<Vector6<f64>> {
    let q0 = ctx.state_from_error(e0);
    let mut c = factory.make();
    let run = simulate(ctx, c.as_mut(), &q0, &[], &RunOptions { n_strides, telemetry: Telemetry::Strides, ..Default::default() })?;
    let last = run.strides.last().ok_or(Error::Domain("no strides simulated".into()))?;
    if run.diverged {
        return Err(Error::Divergence { stride: last.stride });
    }
    Ok(Vector6::from_column_slice(&last.e))
}

#[derive(Clone, Debug)]
pub struct ClosedLoopMap {
    pub map: Matrix6<f64>,
    /// Sorted by increasing magnitude.
    pub eigenvalues: Vec<Complex<f64>>,
    pub superposition_residual: f64,
}

/// Probes e ↦ e after `n_strides` touch-downs with the 6 unit errors, then
/// checks superposition on a mixed error.
pub fn closed_loop_map(ctx: &SimContext, factory: &ControllerFactory, n_strides: usize) -> Result<ClosedLoopMap> {
    let base = final_error(ctx, factory, &Vector6::zeros(), n_strides)?;
    let mut map = Matrix6::zeros();
    for i in 0..6 {
        let col = (final_error(ctx, factory, &(unit6(i) * PROBE), n_strides)? - base) / PROBE;
        map.set_column(i, &col);
    }
    let mix = Vector6::new(0.7, -0.4, 0.25, 0.9, -0.6, 0.3);
    let direct = (final_error(ctx, factory, &(mix * PROBE), n_strides)? - base) / PROBE;
    let predicted = map * mix;
    let residual = (direct - predicted).norm() / predicted.norm().max(1.0);
    if !(residual <= LINEARITY_TOL) {
        return Err(Error::Nonlinear { residual });
    }
    Ok(ClosedLoopMap { map, eigenvalues: sorted_eigenvalues(&map), superposition_residual: residual })
}

pub fn sorted_eigenvalues(m: &Matrix6<f64>) -> Vec<Complex<f64>> {
    let mut ev: Vec<_> = m.complex_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.norm().total_cmp(&b.norm()).then(a.im.total_cmp(&b.im)));
    ev
}

/// Trace, sum of principal 2×2 minors and determinant of one axis block.
fn axis_charpoly(m: &Matrix6<f64>, off: usize) -> [f64; 3] {
    let b = Matrix3::from_fn(|r, c| m[(2 * r + off, 2 * c + off)]);
    let minors = (0..3).map(|i| {
        let (j, k) = ((i + 1) % 3, (i + 2) % 3);
        b[(j, j)] * b[(k, k)] - b[(j, k)] * b[(k, j)]
    });
    [b.trace(), minors.sum(), b.determinant()]
}

/// Mismatch between the characteristic polynomials of the sagittal and
/// lateral blocks (relative per coefficient), together with the largest
/// cross-axis entry of the map. Comparing eigenvalues directly breaks down on
/// the open-loop map, whose eigenvalue 1 is defective and splits by √ε.
pub fn duplication_residual(m: &Matrix6<f64>) -> f64 {
    let cross = (0..6).flat_map(|r| (0..6).map(move |c| (r, c))).filter(|(r, c)| r % 2 != c % 2).map(|rc| m[rc].abs()).fold(0.0, f64::max);
    let (s, l) = (axis_charpoly(m, 0), axis_charpoly(m, 1));
    let worst = (0..3).map(|i| (s[i] - l[i]).abs() / s[i].abs().max(1.0)).fold(0.0, f64::max);
    worst.max(cross / m.amax().max(1.0))
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EigenReport {
    pub frequency: f64,
    pub controller: String,
    /// (re, im) sorted by magnitude.
    pub eigenvalues: Vec<(f64, f64)>,
    pub spectral_radius: f64,
    pub duplication_residual: f64,
    pub all_real: bool,
}

impl EigenReport {
    fn from_map(frequency: f64, controller: String, m: &ClosedLoopMap) -> Self {
        let spectral_radius = m.eigenvalues.iter().map(|l| l.norm()).fold(0.0, f64::max);
        let scale = spectral_radius.max(1.0);
        EigenReport {
            frequency,
            controller,
            eigenvalues: m.eigenvalues.iter().map(|l| (l.re, l.im)).collect(),
            spectral_radius,
            duplication_residual: duplication_residual(&m.map),
            all_real: m.eigenvalues.iter().all(|l| l.im.abs() <= 1e-9 * scale),
        }
    }
}

/// Two-stride closed-loop eigenvalues per frequency and controller, with the
/// double support fixed at 20 % of the stride.
pub fn eigen_sweep(params: &ModelParams, frequencies: &[f64], controllers: &[crate::harness::ControllerSpec], speed: f64, n: usize) -> Result<Vec<EigenReport>> {
    let per_freq: Vec<Result<Vec<EigenReport>>> = frequencies
        .par_iter()
        .map(|&f| {
            let ctx = SimContext::new(params, &frequency_gait(params, f, speed, n)?)?;
            controllers
                .iter()
                .map(|spec| {
                    let factory = ControllerFactory::from_spec(&ctx, spec)?;
                    let m = closed_loop_map(&ctx, &factory, 2)?;
                    Ok(EigenReport::from_map(f, factory.name(), &m))
                })
                .collect()
        })
        .collect();
    let mut out = Vec::new();
    for r in per_freq {
        out.extend(r?);
    }
    Ok(out)
}

/// Evenly spaced frequencies over [lo, hi].
pub fn frequency_grid(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count < 2 {
        return vec![lo];
    }
    (0..count).map(|i| lo + (hi - lo) * i as f64 / (count - 1) as f64).collect()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SurfaceCell {
    /// Push window as fractions of the stride.
    pub start: f64,
    pub end: f64,
    /// ‖e‖ at the three touch-downs following the push stride's start.
    pub errors: [f64; 3],
    pub diverged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ResponseSurface {
    pub controller: String,
    pub w: [f64; 4],
    pub cells: Vec<SurfaceCell>,
}

impl ResponseSurface {
    pub fn cell(&self, start: f64, end: f64) -> Option<&SurfaceCell> {
        self.cells.iter().find(|c| (c.start - start).abs() < 1e-12 && (c.end - end).abs() < 1e-12)
    }
}

/// Push `w` over [start, end)·T_stride of the first stride from the nominal
/// gait, for every start/end pair. Diverged strides saturate at the divergence limit.
pub fn push_response_surface(ctx: &SimContext, factory: &ControllerFactory, starts: &[f64], ends: &[f64], w: [f64; 4]) -> Result<ResponseSurface> {
    let t = ctx.model.timing.stride();
    let pairs: Vec<(f64, f64)> = starts.iter().flat_map(|&s| ends.iter().map(move |&e| (s, e))).collect();
    let cells: Vec<Result<SurfaceCell>> = pairs
        .par_iter()
        .map(|&(s, e)| {
            if !(0.0..=1.0).contains(&s) || !(0.0..=1.0).contains(&e) {
                return Err(Error::Domain(format!("push window [{s}, {e}] outside the stride")));
            }
            if s >= e {
                return Ok(SurfaceCell { start: s, end: e, errors: [0.0; 3], diverged: false });
            }
            let push = PushEvent::new(w, s * t, e * t)?;
            let mut c = factory.make();
            let run = simulate(ctx, c.as_mut(), &ctx.gait.beta, &[push], &RunOptions { n_strides: 3, telemetry: Telemetry::Strides, ..Default::default() })?;
            let mut errors = [DIVERGENCE_LIMIT; 3];
            for (x, st) in errors.iter_mut().zip(&run.strides) {
                *x = st.e_norm.min(DIVERGENCE_LIMIT);
            }
            Ok(SurfaceCell { start: s, end: e, errors, diverged: run.diverged })
        })
        .collect();
    Ok(ResponseSurface { controller: factory.name(), w, cells: cells.into_iter().collect::<Result<_>>()? })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegionController {
    Dlqr,
    Ctpc,
    Maximal,
}

/// What the torque bound applies to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum TorqueMode {
    /// Hip torque minus the nominal gait's torque at the same instant.
    #[default]
    Feedback,
    /// Total hip torque.
    Absolute,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct RegionOptions {
    pub horizon: usize,
    pub rays: usize,
    pub torque_limit: f64,
    /// Half-diameter of the footstep diamond.
    pub diamond: f64,
    pub torque_mode: TorqueMode,
    /// Inter-phase samples (and input pieces) per stride for CTPC and the maximal region.
    pub samples: usize,
    /// Ray length cap.
    pub r_max: f64,
}

impl Default for RegionOptions {
    fn default() -> Self {
        RegionOptions { horizon: 10, rays: 64, torque_limit: 80.0, diamond: 0.85, torque_mode: TorqueMode::Feedback, samples: 3, r_max: 10.0 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RegionSlice {
    pub subspace: (usize, usize),
    pub controller: RegionController,
    pub tag: String,
    /// Counter-clockwise polygon.
    pub vertices: Vec<[f64; 2]>,
    /// Ray length per direction, same order as the vertices.
    pub radii: Vec<f64>,
    pub horizon: usize,
    pub inter_phase_samples: usize,
    pub area: f64,
}

impl RegionSlice {
    pub fn contains(&self, p: [f64; 2], slack: f64) -> bool {
        polygon_contains(&self.vertices, p, slack)
    }

    /// Every vertex of `other` lies in this slice.
    pub fn contains_slice(&self, other: &RegionSlice, slack: f64) -> bool {
        other.vertices.iter().all(|&v| self.contains(v, slack))
    }

    pub fn centroid(&self) -> [f64; 2] {
        polygon_centroid(&self.vertices)
    }

    pub fn is_convex(&self, tol: f64) -> bool {
        polygon_is_convex(&self.vertices, tol)
    }
}

pub fn polygon_area(v: &[[f64; 2]]) -> f64 {
    let n = v.len();
    0.5 * (0..n).map(|i| v[i][0] * v[(i + 1) % n][1] - v[(i + 1) % n][0] * v[i][1]).sum::<f64>()
}

pub fn polygon_centroid(v: &[[f64; 2]]) -> [f64; 2] {
    let a = polygon_area(v);
    if a.abs() < 1e-300 {
        return [0.0, 0.0];
    }
    let n = v.len();
    let (mut cx, mut cy) = (0.0, 0.0);
    for i in 0..n {
        let (p, q) = (v[i], v[(i + 1) % n]);
        let c = p[0] * q[1] - q[0] * p[1];
        cx += (p[0] + q[0]) * c;
        cy += (p[1] + q[1]) * c;
    }
    [cx / (6.0 * a), cy / (6.0 * a)]
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Point in a counter-clockwise convex polygon; edges are pushed outward by `slack`.
pub fn polygon_contains(v: &[[f64; 2]], p: [f64; 2], slack: f64) -> bool {
    let n = v.len();
    (0..n).all(|i| {
        let (a, b) = (v[i], v[(i + 1) % n]);
        let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        len == 0.0 || cross(a, b, p) >= -slack * len
    })
}

/// No clockwise turn beyond `tol` (scaled by edge lengths).
pub fn polygon_is_convex(v: &[[f64; 2]], tol: f64) -> bool {
    let n = v.len();
    (0..n).all(|i| {
        let (a, b, c) = (v[i], v[(i + 1) % n], v[(i + 2) % n]);
        let l1 = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
        let l2 = ((c[0] - b[0]).powi(2) + (c[1] - b[1]).powi(2)).sqrt();
        cross(a, b, c) >= -tol * (l1 * l2).max(tol)
    })
}

/// Piecewise-constant U′ on fixed sub-intervals of each stride, on top of a
/// touch-down feedback that only serves as a change of input variables.
struct Scripted {
    starts: Vec<usize>,
    pieces: Vec<Vector2<f64>>,
    stride: usize,
    base: FeedbackGain,
    held: Vector2<f64>,
}

impl Controller for Scripted {
    fn name(&self) -> String {
        "scripted".into()
    }
    fn begin_stride(&mut self, ctx: &SimContext, q: &Vec23) {
        self.stride = self.stride.wrapping_add(1);
        self.held = self.base.correction(&ctx.error(q));
    }
    fn step(&mut self, _: &SimContext, k: usize, _: &Vec23, _: &Vector4<f64>) -> Vector2<f64> {
        let j = self.starts.iter().rposition(|&s| s <= k).unwrap_or(0);
        self.held + self.pieces.get(self.stride * self.starts.len() + j).copied().unwrap_or_else(Vector2::zeros)
    }
}

/// Instant at which the hip torque is bounded: the start or the end of step `k`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TorqueSample {
    pub k: usize,
    pub at_end: bool,
}

/// Torque samples (both hip channels) and footstep displacements of one run,
/// stacked stride by stride.
fn region_outputs(ctx: &SimContext, run: &RunRecord, samples: &[TorqueSample], horizon: usize) -> Result<DVector<f64>> {
    let n = ctx.n_steps();
    if run.diverged || run.strides.len() < horizon {
        return Err(Error::Divergence { stride: run.strides.len() });
    }
    let per = 2 * samples.len() + 2;
    let mut y = DVector::zeros(per * horizon);
    let mut prev = [0.0, 0.0];
    for s in 0..horizon {
        let mut r = s * per;
        for smp in samples {
            let q = &run.steps[s * n + smp.k].q;
            let (_, t0, t1) = ctx.model.timing.step_span(smp.k);
            let t = if smp.at_end { t1 } else { t0 };
            for j in 0..2 {
                y[r + j] = q[layout::HIP_CONST[j]] + q[layout::HIP_RAMP[j]] * t;
            }
            r += 2;
        }
        let f = run.strides[s].footstep;
        y[r] = f[0] - prev[0];
        y[r + 1] = f[1] - prev[1];
        prev = f;
    }
    Ok(y)
}

/// Linear inequalities G·e + H·u ≤ h over initial error e and free inputs u.
#[derive(Clone, Debug)]
pub struct RegionConstraints {
    pub g: DMatrix<f64>,
    pub h: DMatrix<f64>,
    pub rhs: DVector<f64>,
}

impl RegionConstraints {
    fn from_affine(y0: &DVector<f64>, a: &DMatrix<f64>, b: &DMatrix<f64>, n_torque: usize, horizon: usize, opts: &RegionOptions) -> Result<Self> {
        let per = y0.len() / horizon;
        let rows = horizon * (2 * n_torque + 4);
        let (nu, ne) = (b.ncols(), a.ncols());
        let mut g = DMatrix::zeros(rows, ne);
        let mut h = DMatrix::zeros(rows, nu);
        let mut rhs = DVector::zeros(rows);
        let mut r = 0;
        for s in 0..horizon {
            let base = s * per;
            for i in base..base + n_torque {
                let shift = if opts.torque_mode == TorqueMode::Absolute { y0[i] } else { 0.0 };
                for sign in [1.0, -1.0] {
                    g.set_row(r, &(a.row(i) * sign));
                    h.set_row(r, &(b.row(i) * sign));
                    rhs[r] = opts.torque_limit - sign * shift;
                    r += 1;
                }
            }
            let (ix, iy) = (base + n_torque, base + n_torque + 1);
            for (sx, sy) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)] {
                g.set_row(r, &(a.row(ix) * sx + a.row(iy) * sy));
                h.set_row(r, &(b.row(ix) * sx + b.row(iy) * sy));
                rhs[r] = opts.diamond - sx * y0[ix] - sy * y0[iy];
                r += 1;
            }
        }
        let worst = rhs.min();
        if worst < -1e-9 {
            return Err(Error::Config(format!("nominal gait violates the region constraints (margin {worst:.3e})")));
        }
        Ok(RegionConstraints { g, h, rhs: rhs.map(|v| v.max(0.0)) })
    }
}

fn piece_starts(n: usize, pieces: usize) -> Vec<usize> {
    (0..pieces).map(|j| sub_period_start(n, pieces, j)).collect()
}

/// Torque samples per stride: both stride boundaries for touch-down feedback;
/// both ends of every input piece for CTPC and the maximal region. A single
/// sample per piece is not enough, since the re-solved constant hip torque can
/// cancel the ramp at that instant and leave the piece unbounded.
pub fn torque_samples(controller: RegionController, n: usize, pieces: usize) -> Vec<TorqueSample> {
    match controller {
        RegionController::Dlqr => vec![TorqueSample { k: 0, at_end: false }, TorqueSample { k: n - 1, at_end: true }],
        _ => (0..pieces)
            .flat_map(|j| {
                let (a, b) = (sub_period_start(n, pieces, j), sub_period_start(n, pieces, j + 1));
                [TorqueSample { k: a, at_end: false }, TorqueSample { k: b - 1, at_end: true }]
            })
            .collect(),
    }
}

/// Stacked constraints for a feedback controller, linear in the initial error.
pub fn feedback_constraints(ctx: &SimContext, controller: RegionController, variant: Variant, cfg: ProjectionConfig, opts: &RegionOptions) -> Result<RegionConstraints> {
    let n = ctx.n_steps();
    let factory = match controller {
        RegionController::Dlqr => ControllerFactory::dlqr(ctx, variant)?,
        RegionController::Ctpc => ControllerFactory::ctpc(ctx, variant, cfg)?.with_update_at(piece_starts(n, opts.samples)),
        RegionController::Maximal => return Err(Error::Domain("maximal region has no feedback law".into())),
    };
    let samples = torque_samples(controller, n, opts.samples);
    let run_opts = RunOptions { n_strides: opts.horizon, telemetry: Telemetry::Full, ..Default::default() };
    let run_from = |e: &Vector6<f64>| -> Result<DVector<f64>> {
        let mut c = factory.make();
        let run = simulate(ctx, c.as_mut(), &ctx.state_from_error(e), &[], &run_opts)?;
        region_outputs(ctx, &run, &samples, opts.horizon)
    };
    let y0 = run_from(&Vector6::zeros())?;
    let mut a = DMatrix::zeros(y0.len(), 6);
    for i in 0..6 {
        a.set_column(i, &((run_from(&(unit6(i) * PROBE))? - &y0) / PROBE));
    }
    RegionConstraints::from_affine(&y0, &a, &DMatrix::zeros(y0.len(), 0), 2 * samples.len(), opts.horizon, opts)
}

/// Stacked constraints with free piecewise-constant inputs on the inter-phase
/// sub-intervals.
///
/// The free inputs are offsets from aggressive touch-down feedback. Any input
/// sequence is still reachable, but the open-loop growth over the horizon no
/// longer ends up in the constraint matrix, which the solver needs.
pub fn maximal_constraints(ctx: &SimContext, opts: &RegionOptions) -> Result<RegionConstraints> {
    let n = ctx.n_steps();
    let base = design_gain(&ctx.sys, Variant::Aggressive)?;
    let starts = piece_starts(n, opts.samples);
    let samples = torque_samples(RegionController::Maximal, n, opts.samples);
    let nu = 2 * opts.samples * opts.horizon;
    let run_opts = RunOptions { n_strides: opts.horizon, telemetry: Telemetry::Full, ..Default::default() };
    let run_from = |e: &Vector6<f64>, u: &[Vector2<f64>]| -> Result<DVector<f64>> {
        let mut c = Scripted { starts: starts.clone(), pieces: u.to_vec(), stride: usize::MAX, base: base.clone(), held: Vector2::zeros() };
        let run = simulate(ctx, &mut c, &ctx.state_from_error(e), &[], &run_opts)?;
        region_outputs(ctx, &run, &samples, opts.horizon)
    };
    let zero_u = vec![Vector2::zeros(); nu / 2];
    let y0 = run_from(&Vector6::zeros(), &zero_u)?;
    let mut a = DMatrix::zeros(y0.len(), 6);
    for i in 0..6 {
        a.set_column(i, &((run_from(&(unit6(i) * PROBE), &zero_u)? - &y0) / PROBE));
    }
    let cols: Vec<Result<DVector<f64>>> = (0..nu)
        .into_par_iter()
        .map(|j| {
            let mut u = zero_u.clone();
            u[j / 2][j % 2] = PROBE;
            Ok((run_from(&Vector6::zeros(), &u)? - &y0) / PROBE)
        })
        .collect();
    let mut b = DMatrix::zeros(y0.len(), nu);
    for (j, c) in cols.into_iter().enumerate() {
        b.set_column(j, &c?);
    }
    RegionConstraints::from_affine(&y0, &a, &b, 2 * samples.len(), opts.horizon, opts)
}

pub fn direction(subspace: (usize, usize), theta: f64) -> Vector6<f64> {
    let mut d = Vector6::zeros();
    d[subspace.0] = theta.cos();
    d[subspace.1] = theta.sin();
    d
}

/// Farthest r ≤ r_max along d with G·(r d) ≤ h.
pub fn ray_closed_form(c: &RegionConstraints, d: &Vector6<f64>, r_max: f64) -> f64 {
    let gd = &c.g * d;
    gd.iter().zip(c.rhs.iter()).filter(|(a, _)| **a > 0.0).map(|(a, b)| b / a).fold(r_max, f64::min).max(0.0)
}

/// Farthest r ≤ r_max along d for which some input sequence satisfies G·(r d) + H·u ≤ h.
pub fn ray_lp(c: &RegionConstraints, d: &Vector6<f64>, r_max: f64) -> Result<f64> {
    use clarabel::algebra::CscMatrix;
    use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, SolverStatus, SupportedConeT::NonnegativeConeT};

    let gd = &c.g * d;
    let (m, nu) = c.h.shape();
    let n = nu + 1;
    // inputs are solved in units of their largest effect, rows are scaled to unit max
    let col: Vec<f64> = (0..nu).map(|j| c.h.column(j).amax().max(1e-12)).collect();
    let rows = m + 2;
    let mut a = vec![vec![0.0; n]; rows];
    let mut b = vec![0.0; rows];
    for i in 0..m {
        let scale = (0..nu).map(|j| (c.h[(i, j)] / col[j]).abs()).fold(gd[i].abs(), f64::max).max(1e-12);
        a[i][0] = gd[i] / scale;
        for j in 0..nu {
            a[i][j + 1] = c.h[(i, j)] / col[j] / scale;
        }
        b[i] = c.rhs[i] / scale;
    }
    a[m][0] = 1.0;
    b[m] = r_max;
    a[m + 1][0] = -1.0;
    let dense = DMatrix::from_fn(rows, n, |i, j| a[i][j]);
    let b_vec = DVector::from_column_slice(&b);
    let a = CscMatrix::from(&a);
    let p = CscMatrix::zeros((n, n));
    let mut q = vec![0.0; n];
    q[0] = -1.0;
    let settings = DefaultSettingsBuilder::default()
        .verbose(false)
        .tol_gap_abs(1e-10)
        .tol_gap_rel(1e-10)
        .tol_feas(1e-10)
        .build()
        .map_err(|e| Error::Lp(e.to_string()))?;
    let mut solver = DefaultSolver::new(&p, &q, &a, &b, &[NonnegativeConeT(rows)], settings).map_err(|e| Error::Lp(format!("{e:?}")))?;
    solver.solve();
    let sol = &solver.solution;
    // the interior point stops short on degenerate rays, a simplex vertex does
    // not; either answer is a lower bound once checked, so keep the larger
    let mut best = None::<f64>;
    if matches!(sol.status, SolverStatus::Solved | SolverStatus::AlmostSolved) {
        let x = DVector::from_column_slice(&sol.x);
        let polished = polish_vertex(&dense, &b_vec, &x, &sol.z, &sol.s);
        let plain = ((&dense * &x - &b_vec).max() <= FEAS_TOL).then_some(x[0]);
        best = polished.into_iter().chain(plain).reduce(f64::max);
    }
    if let Some(r) = simplex_ray(&dense, &b_vec) {
        best = Some(best.map_or(r, |b| b.max(r)));
    }
    best.map(|r| r.clamp(0.0, r_max)).ok_or_else(|| Error::Lp(format!("ray program failed (interior point: {:?})", sol.status)))
}

const FEAS_TOL: f64 = 1e-9;

fn simplex_ray(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<f64> {
    use microlp::{ComparisonOp, LinearExpr, OptimizationDirection, Problem};
    let mut lp = Problem::new(OptimizationDirection::Maximize);
    let vars: Vec<_> = (0..a.ncols()).map(|j| lp.add_var(if j == 0 { 1.0 } else { 0.0 }, (f64::NEG_INFINITY, f64::INFINITY))).collect();
    for i in 0..a.nrows() {
        let mut e = LinearExpr::empty();
        for (j, v) in vars.iter().enumerate() {
            if a[(i, j)] != 0.0 {
                e.add(*v, a[(i, j)]);
            }
        }
        lp.add_constraint(e, ComparisonOp::Le, b[i]);
    }
    let sol = lp.solve().ok()?.into_solution().ok()?;
    let x = DVector::from_iterator(vars.len(), vars.iter().map(|v| sol.var_value(*v)));
    ((a * &x - b).max() <= FEAS_TOL).then_some(x[0])
}

/// Crossover from an interior-point solution: picks independent active rows
/// in order of dual weight, solves for the vertex they define and returns its
/// ray length if every constraint still holds there.
fn polish_vertex(a: &DMatrix<f64>, b: &DVector<f64>, x: &DVector<f64>, z: &[f64], s: &[f64]) -> Option<f64> {
    let n = a.ncols();
    let mut order: Vec<usize> = (0..a.nrows()).filter(|&i| z[i] > s[i]).collect();
    order.sort_by(|&i, &j| z[j].total_cmp(&z[i]));
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n);
    for &i in &order {
        let mut v = a.row(i).transpose();
        let norm = v.norm();
        for q in &basis {
            v -= q * q.dot(&v);
        }
        if v.norm() > 1e-8 * norm {
            basis.push(v.normalize());
            rows.push(i);
            if rows.len() == n {
                break;
            }
        }
    }
    if rows.is_empty() {
        return None;
    }
    let a_act = DMatrix::from_fn(rows.len(), n, |i, j| a[(rows[i], j)]);
    let resid = DVector::from_fn(rows.len(), |i, _| b[rows[i]]) - &a_act * x;
    let delta = if rows.len() == n { a_act.lu().solve(&resid)? } else { a_act.svd(true, true).solve(&resid, 1e-12).ok()? };
    let y = x + delta;
    let worst = (a * &y - b).max();
    (worst <= FEAS_TOL).then_some(y[0])
}

fn ray_slice(c: &RegionConstraints, subspace: (usize, usize), controller: RegionController, tag: String, opts: &RegionOptions) -> Result<RegionSlice> {
    if subspace.0 >= 6 || subspace.1 >= 6 || subspace.0 == subspace.1 {
        return Err(Error::Domain(format!("invalid error subspace {subspace:?}")));
    }
    if opts.rays < 3 {
        return Err(Error::Domain("at least 3 rays are needed".into()));
    }
    let radii: Vec<Result<f64>> = (0..opts.rays)
        .into_par_iter()
        .map(|i| {
            let d = direction(subspace, 2.0 * std::f64::consts::PI * i as f64 / opts.rays as f64);
            if c.h.ncols() == 0 {
                Ok(ray_closed_form(c, &d, opts.r_max))
            } else {
                ray_lp(c, &d, opts.r_max)
            }
        })
        .collect();
    let radii: Vec<f64> = radii.into_iter().collect::<Result<_>>()?;
    let vertices: Vec<[f64; 2]> = radii
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let th = 2.0 * std::f64::consts::PI * i as f64 / opts.rays as f64;
            [r * th.cos(), r * th.sin()]
        })
        .collect();
    let area = polygon_area(&vertices);
    let inter_phase_samples = if controller == RegionController::Dlqr { 0 } else { opts.samples };
    Ok(RegionSlice { subspace, controller, tag, vertices, radii, horizon: opts.horizon, inter_phase_samples, area })
}

/// Region of initial errors (in the `subspace` plane) that a feedback
/// controller recovers without violating torque or footstep bounds.
pub fn controllable_region(ctx: &SimContext, controller: RegionController, variant: Variant, cfg: ProjectionConfig, subspace: (usize, usize), opts: &RegionOptions) -> Result<RegionSlice> {
    if controller == RegionController::Maximal {
        return maximal_region(ctx, subspace, opts);
    }
    let c = feedback_constraints(ctx, controller, variant, cfg, opts)?;
    let tag = match controller {
        RegionController::Dlqr => format!("dlqr-{}", variant.name()),
        _ => format!("ctpc-{}-{}", cfg.preset_name().map(|c| c.to_string()).unwrap_or_else(|| cfg.to_string()), variant.name()),
    };
    ray_slice(&c, subspace, controller, tag, opts)
}

/// Region reachable by any input sequence with the same sampling.
pub fn maximal_region(ctx: &SimContext, subspace: (usize, usize), opts: &RegionOptions) -> Result<RegionSlice> {
    let c = maximal_constraints(ctx, opts)?;
    ray_slice(&c, subspace, RegionController::Maximal, "maximal".into(), opts)
}
