//! Systematic search over the 4096 projection configurations.
//!
//! Costs come from a closed-loop stride map and per-step input gains probed
//! with six unit errors, plus seven basis pushes (one per sub-period) whose
//! responses are superposed for every push interval. The direct simulations
//! `self_stability_cost` and `push_cost` compute the same numbers and back the
//! superposition in the tests.

use std::sync::Arc;

use nalgebra::{Matrix6, SMatrix, Vector2, Vector6};
use serde::{Deserialize, Serialize};

use crate::ctpc::{input_variation, Category, ProjectionBlocks, ProjectionConfig, Projector, CONSTANT_INPUT_TOL};
use crate::error::{Error, Result};
use crate::gait::{pseudo_passive_fraction, retarget_speed, TransformConstants};
use crate::harness::{simulate, Ctpc, PushEvent, RunOptions, RunRecord, SimContext, Telemetry, DIVERGENCE_LIMIT};
use crate::linmodel::{ModelParams, Preset, CONSTRAINT_HOLD_COND};
use crate::stepctl::{design_gain, FeedbackGain, Variant};

pub const CONFIG_COUNT: u16 = 4096;
/// Floor used in place of a zero per-dimension minimum.
pub const COST_FLOOR: f64 = 1e-12;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchOptions {
    pub models: Vec<Preset>,
    pub variants: Vec<Variant>,
    /// Touch-downs accumulated per cost entry.
    pub n_strides: usize,
    pub sub_periods: usize,
    /// Push applied over sub-period intervals (force x, y, torque x, y).
    pub push: [f64; 4],
    /// Duration weight μ on the input cost of push entries.
    pub mu: f64,
    pub speed: f64,
    pub ds_fraction: f64,
    pub grid: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            models: vec![Preset::Adult, Preset::Kid],
            variants: Variant::ALL.to_vec(),
            n_strides: 10,
            sub_periods: 7,
            push: [20.0, 0.0, 0.0, 0.0],
            mu: 1e-2,
            speed: 0.5,
            ds_fraction: 0.2,
            grid: 100,
        }
    }
}

impl SearchOptions {
    /// Pushes over two distinct sub-periods a < b, from the start of a to the
    /// end of b, as boundary indices (j₁, j₂) = (a, b + 1): C(n, 2) pairs in
    /// lexicographic order.
    pub fn push_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.sub_periods;
        (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b + 1))).collect()
    }

    /// Entries per (model, variant) cost vector: 6 self-stability and C(n,2) push pairs, two values each.
    pub fn vector_len(&self) -> usize {
        2 * (6 + self.push_pairs().len())
    }
}

/// One (model, variant) pair with everything independent of the flags.
#[derive(Clone, Debug)]
pub struct SearchCase {
    pub preset: Preset,
    pub ctx: SimContext,
    pub gain: FeedbackGain,
    pub blocks: Vec<Option<ProjectionBlocks>>,
}

impl SearchCase {
    pub fn new(preset: Preset, variant: Variant, opts: &SearchOptions) -> Result<Self> {
        let params = ModelParams::from_preset(preset);
        let gait = pseudo_passive_fraction(&params, opts.ds_fraction, opts.grid)?;
        let gait = retarget_speed(&gait, opts.speed)?;
        let ctx = SimContext::new(&params, &gait)?;
        let gain = design_gain(&ctx.sys, variant)?;
        let consts = TransformConstants::default();
        let blocks = (0..ctx.n_steps())
            .map(|k| ctx.model.remaining_con_within(k, CONSTRAINT_HOLD_COND).map(|g| ProjectionBlocks::new(&ctx.model.h_con.m, g, &gain, &ctx.sys, &gait.beta, &consts, &ctx.model.sel)))
            .collect();
        Ok(SearchCase { preset, ctx, gain, blocks })
    }

    pub fn projector(&self, cfg: ProjectionConfig) -> Arc<Projector> {
        Arc::new(Projector::from_blocks(cfg, self.blocks.clone(), self.ctx.gait.beta))
    }
}

/// Grid index where sub-period j starts (j = n gives the stride end).
pub fn sub_period_start(grid: usize, sub_periods: usize, j: usize) -> usize {
    ((j * grid) as f64 / sub_periods as f64).round() as usize
}

fn sub_period_push(ctx: &SimContext, w: [f64; 4], j1: usize, j2: usize, sub_periods: usize) -> Result<PushEvent> {
    let timing = &ctx.model.timing;
    let n = ctx.n_steps();
    PushEvent::new(w, timing.grid_time(sub_period_start(n, sub_periods, j1)), timing.grid_time(sub_period_start(n, sub_periods, j2)))
}

/// [Σ eᵀe, Σ U′ᵀRU′] over the touch-downs and strides of a run; +∞ on divergence.
pub fn run_cost(run: &RunRecord, weight: f64) -> [f64; 2] {
    if run.diverged || run.strides.iter().any(|s| !(s.e_norm <= DIVERGENCE_LIMIT)) {
        return [f64::INFINITY; 2];
    }
    let state = run.strides.iter().map(|s| s.e_norm * s.e_norm).sum();
    let input = run.strides.iter().map(|s| s.u_sq * weight).sum();
    [state, input]
}

fn ctpc_run(case: &SearchCase, projector: &Arc<Projector>, q0: &nalgebra::SVector<f64, 23>, pushes: &[PushEvent], n_strides: usize, telemetry: Telemetry) -> Result<RunRecord> {
    let mut c = Ctpc::from_projector(projector.clone(), case.gain.clone());
    let opts = RunOptions { n_strides, telemetry, ..Default::default() };
    simulate(&case.ctx, &mut c, q0, pushes, &opts)
}

/// Cost of a unit initial error along coordinate i, by direct simulation.
pub fn self_stability_cost(case: &SearchCase, cfg: ProjectionConfig, i: usize, n_strides: usize) -> Result<[f64; 2]> {
    let e0 = Vector6::from_fn(|r, _| if r == i { 1.0 } else { 0.0 });
    let q0 = case.ctx.state_from_error(&e0);
    let run = ctpc_run(case, &case.projector(cfg), &q0, &[], n_strides, Telemetry::Strides)?;
    Ok(run_cost(&run, case.gain.input_weight))
}

/// Cost of a push over sub-periods j₁..j₂ of the first stride, by direct simulation.
pub fn push_cost(case: &SearchCase, cfg: ProjectionConfig, j1: usize, j2: usize, opts: &SearchOptions) -> Result<[f64; 2]> {
    let push = sub_period_push(&case.ctx, opts.push, j1, j2, opts.sub_periods)?;
    let run = ctpc_run(case, &case.projector(cfg), &case.ctx.gait.beta, &[push], opts.n_strides, Telemetry::Strides)?;
    let [s, u] = run_cost(&run, case.gain.input_weight);
    let d = (j2 - j1) as f64;
    Ok([s, opts.mu * d * d * u])
}

type Gains = Vec<SMatrix<f64, 2, 6>>;

/// Stride map Φ, per-step input gains L_k (U′_k = L_k e) and the stride input form Ψ.
struct Probe {
    phi: Matrix6<f64>,
    psi: Matrix6<f64>,
}

fn step_weights(ctx: &SimContext, weight: f64) -> Vec<f64> {
    let t = &ctx.model.timing;
    (0..ctx.n_steps()).map(|k| (t.grid_time(k + 1) - t.grid_time(k)) / t.stride() * weight).collect()
}

fn probe(case: &SearchCase, projector: &Arc<Projector>) -> Result<Option<Probe>> {
    let n = case.ctx.n_steps();
    let mut phi = Matrix6::zeros();
    let mut gains: Gains = vec![SMatrix::zeros(); n];
    for i in 0..6 {
        let e0 = Vector6::from_fn(|r, _| if r == i { 1.0 } else { 0.0 });
        let q0 = case.ctx.state_from_error(&e0);
        let run = ctpc_run(case, projector, &q0, &[], 1, Telemetry::Full)?;
        let Some(last) = run.strides.last() else { return Ok(None) };
        if run.diverged {
            return Ok(None);
        }
        phi.set_column(i, &Vector6::from_column_slice(&last.e));
        for s in &run.steps {
            gains[s.k].set_column(i, &Vector2::new(s.u_add[0], s.u_add[1]));
        }
    }
    let w = step_weights(&case.ctx, case.gain.input_weight);
    let psi = gains.iter().zip(&w).fold(Matrix6::zeros(), |acc, (l, &wk)| acc + l.transpose() * l * wk);
    Ok(Some(Probe { phi, psi }))
}

/// Response to one basis push: inputs over the first two strides and the
/// touch-down errors ending them. By the end of the second stride the observer
/// holds no trace of the push, so the stride map takes over from there.
struct Basis {
    u: Vec<Vector2<f64>>,
    e: [Vector6<f64>; 2],
}

fn basis_responses(case: &SearchCase, projector: &Arc<Projector>, opts: &SearchOptions) -> Result<Option<Vec<Basis>>> {
    let mut out = Vec::with_capacity(opts.sub_periods);
    for j in 0..opts.sub_periods {
        let push = sub_period_push(&case.ctx, opts.push, j, j + 1, opts.sub_periods)?;
        let run = ctpc_run(case, projector, &case.ctx.gait.beta, &[push], 2, Telemetry::Full)?;
        if run.diverged || run.strides.len() < 2 {
            return Ok(None);
        }
        let u = run.steps.iter().map(|s| Vector2::new(s.u_add[0], s.u_add[1])).collect();
        out.push(Basis { u, e: [Vector6::from_column_slice(&run.strides[0].e), Vector6::from_column_slice(&run.strides[1].e)] });
    }
    Ok(Some(out))
}

/// Costs of a stride-start error propagated with Φ over `strides` strides.
fn tail_cost(p: &Probe, mut e: Vector6<f64>, strides: usize) -> [f64; 2] {
    let mut c = [0.0, 0.0];
    for _ in 0..strides {
        c[1] += (e.transpose() * p.psi * e)[0];
        e = p.phi * e;
        let n2 = e.norm_squared();
        if !(n2.sqrt() <= DIVERGENCE_LIMIT) {
            return [f64::INFINITY; 2];
        }
        c[0] += n2;
    }
    c
}

/// Cost vector of one configuration for one (model, variant) case, laid out as
/// 6 self-stability pairs followed by the push pairs, [state, input] each.
pub fn case_costs(case: &SearchCase, cfg: ProjectionConfig, opts: &SearchOptions) -> Result<Vec<f64>> {
    let len = opts.vector_len();
    let projector = case.projector(cfg);
    let Some(p) = probe(case, &projector)? else { return Ok(vec![f64::INFINITY; len]) };
    let mut out = Vec::with_capacity(len);
    for i in 0..6 {
        let e0 = Vector6::from_fn(|r, _| if r == i { 1.0 } else { 0.0 });
        out.extend(tail_cost(&p, e0, opts.n_strides));
    }
    let Some(basis) = basis_responses(case, &projector, opts)? else {
        out.resize(len, f64::INFINITY);
        return Ok(out);
    };
    let n = case.ctx.n_steps();
    let w = step_weights(&case.ctx, case.gain.input_weight);
    for (j1, j2) in opts.push_pairs() {
        let mut u = vec![Vector2::zeros(); 2 * n];
        let mut e = [Vector6::zeros(); 2];
        for b in &basis[j1..j2] {
            for (acc, v) in u.iter_mut().zip(&b.u) {
                *acc += v;
            }
            e[0] += b.e[0];
            e[1] += b.e[1];
        }
        let mut input: f64 = u.iter().enumerate().map(|(i, v)| v.norm_squared() * w[i % n]).sum();
        let mut state = e[0].norm_squared() + e[1].norm_squared();
        let [s, ui] = tail_cost(&p, e[1], opts.n_strides - 2);
        state += s;
        input += ui;
        let d = (j2 - j1) as f64;
        if state.is_finite() && e.iter().all(|v| v.norm() <= DIVERGENCE_LIMIT) {
            out.extend([state, opts.mu * d * d * input]);
        } else {
            out.extend([f64::INFINITY; 2]);
        }
    }
    Ok(out)
}

/// Flags, classification and cost of one configuration.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CostRow {
    pub index: u16,
    pub flags: String,
    pub alternatives: usize,
    pub constant_input: bool,
    pub category: Category,
    /// Raw cost vector per variant, models concatenated.
    #[serde(skip)]
    pub raw: Vec<Vec<f64>>,
    pub cost: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SearchResult {
    /// Sorted by cost, ties by flag order.
    pub table: Vec<CostRow>,
    pub best: Vec<CostRow>,
}

impl SearchResult {
    pub fn best_of(&self, c: Category) -> Option<&CostRow> {
        self.best.iter().find(|r| r.category == c)
    }
}

/// V_c = Σ_k ‖log₁₀(V_c,k / U_k)‖₁ with U_k the per-dimension minimum over all
/// rows. Rows with an infinite entry get an infinite cost.
pub fn normalize(raw: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let Some(first) = raw.first() else { return Vec::new() };
    let mins: Vec<Vec<f64>> = (0..first.len())
        .map(|k| (0..first[k].len()).map(|d| raw.iter().map(|r| r[k][d]).fold(f64::INFINITY, f64::min).max(COST_FLOOR)).collect())
        .collect();
    raw.iter()
        .map(|r| r.iter().zip(&mins).map(|(v, m)| v.iter().zip(m).map(|(x, u)| (x.max(COST_FLOOR) / u).log10()).sum::<f64>()).sum())
        .collect()
}

/// Lowest-cost configuration per category.
pub fn select_best(table: &[CostRow]) -> Vec<CostRow> {
    Category::ALL
        .iter()
        .filter_map(|&c| table.iter().filter(|r| r.category == c).min_by(|a, b| a.cost.total_cmp(&b.cost).then(a.index.cmp(&b.index))).cloned())
        .collect()
}

/// Prepared cases, one per (variant, model), grouped by variant.
pub fn prepare_cases(opts: &SearchOptions) -> Result<Vec<Vec<SearchCase>>> {
    if opts.n_strides < 2 || opts.sub_periods == 0 || opts.models.is_empty() || opts.variants.is_empty() {
        return Err(Error::Config("search needs ≥ 2 strides, ≥ 1 sub-period, a model and a variant".into()));
    }
    opts.variants.iter().map(|&v| opts.models.iter().map(|&m| SearchCase::new(m, v, opts)).collect()).collect()
}

/// Cost vectors of `cfg` for every variant, models concatenated.
pub fn config_costs(cases: &[Vec<SearchCase>], cfg: ProjectionConfig, opts: &SearchOptions) -> Result<Vec<Vec<f64>>> {
    cases
        .iter()
        .map(|per_model| {
            let mut v = Vec::with_capacity(per_model.len() * opts.vector_len());
            for case in per_model {
                v.extend(case_costs(case, cfg, opts)?);
            }
            Ok(v)
        })
        .collect()
}

/// Full search over `configs` (all 4096 when `None`). The classification uses
/// the first model with the first variant.
pub fn search(opts: &SearchOptions, configs: Option<&[ProjectionConfig]>) -> Result<SearchResult> {
    use rayon::prelude::*;
    let cases = prepare_cases(opts)?;
    let all: Vec<ProjectionConfig>;
    let configs = match configs {
        Some(c) => c,
        None => {
            all = (0..CONFIG_COUNT).map(ProjectionConfig::from_index).collect();
            &all
        }
    };
    let classify = &cases[0][0];
    let rows: Vec<CostRow> = configs
        .par_iter()
        .map(|&cfg| {
            let raw = config_costs(&cases, cfg, opts)?;
            let constant_input = input_variation(&classify.ctx, &classify.gain, cfg).map(|v| v < CONSTANT_INPUT_TOL).unwrap_or(false);
            let alternatives = cfg.alternative_count();
            Ok(CostRow {
                index: cfg.index(),
                flags: cfg.to_string(),
                alternatives,
                constant_input,
                category: Category::from_features(alternatives, constant_input),
                raw,
                cost: 0.0,
            })
        })
        .collect::<Result<_>>()?;
    let raw: Vec<Vec<Vec<f64>>> = rows.iter().map(|r| r.raw.clone()).collect();
    let mut table: Vec<CostRow> = rows.into_iter().zip(normalize(&raw)).map(|(r, c)| CostRow { cost: c, ..r }).collect();
    table.sort_by(|a, b| a.cost.total_cmp(&b.cost).then(a.index.cmp(&b.index)));
    let best = select_best(&table);
    Ok(SearchResult { table, best })
}
