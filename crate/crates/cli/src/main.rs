use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::Value;

use gaitproj::analysis::{controllable_region, eigen_sweep, push_response_surface, ControllerFactory};
use gaitproj::config::Config;
use gaitproj::ctpc::ProjectionConfig;
use gaitproj::export::{self, Format, Table};
use gaitproj::gait::{pseudo_passive_fraction, scale_gait};
use gaitproj::harness::{run_benchmark, run_intermittent, run_speed_tracking, run_stride_push, simulate, RunOptions, Telemetry};
use gaitproj::search::search;
use gaitproj::stepctl::{design_gain, Variant};
use gaitproj::{Error, Result};

#[derive(Parser)]
#[command(name = "gaitproj", version, about = "Walking-controller experiments on a linear three-mass model")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// TOML configuration; defaults apply to anything missing.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the benchmark seeds with a single seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Tables go to stdout when absent.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, default_value = "csv")]
    format: Format,
}

#[derive(Subcommand)]
enum Cmd {
    #[command(subcommand)]
    Gait(GaitCmd),
    #[command(subcommand)]
    Dlqr(DlqrCmd),
    #[command(subcommand)]
    Ctpc(RunCmd),
    #[command(subcommand)]
    Search(RunCmd),
    #[command(subcommand)]
    Analyze(AnalyzeCmd),
    #[command(subcommand)]
    Bench(RunCmd),
}

#[derive(Subcommand)]
enum GaitCmd {
    /// Pseudo-passive gait for the configured model and double-support share.
    Find,
    /// Pseudo-passive gait scaled to a new speed.
    Scale {
        #[arg(long)]
        speed: f64,
    },
}

#[derive(Subcommand)]
enum DlqrCmd {
    /// Gains of the three variants on the configured gait.
    Design,
}

#[derive(Subcommand)]
enum RunCmd {
    Run {
        /// Also write per-time-step telemetry (ctpc run only).
        #[arg(long)]
        steps: bool,
    },
}

#[derive(Subcommand)]
enum AnalyzeCmd {
    Eigen,
    Surface,
    Region,
}

struct Sink {
    out: Option<PathBuf>,
    format: Format,
}

impl Sink {
    fn emit(&self, name: &str, table: &Table) -> Result<()> {
        match &self.out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                let path = dir.join(format!("{name}.{}", self.format.extension()));
                table.write(std::fs::File::create(path)?, self.format)
            }
            None => table.write(std::io::stdout().lock(), self.format),
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.common.config {
        Some(p) => Config::load(p)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.bench.seeds = vec![seed];
    }
    let sink = Sink { out: cli.common.out.clone(), format: cli.common.format };
    match cli.cmd {
        Cmd::Gait(GaitCmd::Find) => {
            let g = pseudo_passive_fraction(&cfg.params(), cfg.ds_fraction, cfg.grid)?;
            sink.emit("gait", &export::gait_table(&g))
        }
        Cmd::Gait(GaitCmd::Scale { speed }) => {
            let g = pseudo_passive_fraction(&cfg.params(), cfg.ds_fraction, cfg.grid)?;
            sink.emit("gait", &export::gait_table(&scale_gait(&g, speed)?))
        }
        Cmd::Dlqr(DlqrCmd::Design) => {
            let ctx = cfg.context()?;
            let mut cols = vec!["variant".to_string(), "input_weight".into(), "spectral_radius".into()];
            cols.extend((0..2).flat_map(|i| (0..6).map(move |j| format!("k{i}{j}"))));
            let mut t = Table { columns: cols, rows: Vec::new() };
            for v in Variant::ALL {
                let g = design_gain(&ctx.sys, v)?;
                let mut row = vec![Value::String(v.name().into()), g.input_weight.into(), g.spectral_radius.into()];
                row.extend((0..2).flat_map(|i| (0..6).map(move |j| (i, j))).map(|(i, j)| Value::from(g.k[(i, j)])));
                t.push(row);
            }
            sink.emit("dlqr", &t)
        }
        Cmd::Ctpc(RunCmd::Run { steps }) => {
            let ctx = cfg.context()?;
            let mut c = cfg.controller.build(&ctx)?;
            let rec = if let Some(w) = cfg.stride_push {
                run_stride_push(&ctx, c.as_mut(), w, cfg.strides, cfg.observer)?
            } else if !cfg.speed_profile.is_empty() {
                run_speed_tracking(&ctx, c.as_mut(), &cfg.speed_profile, cfg.strides)?
            } else if steps {
                let opts = RunOptions { n_strides: cfg.strides, observer: cfg.observer, telemetry: Telemetry::Full, ..Default::default() };
                simulate(&ctx, c.as_mut(), &ctx.gait.beta, &cfg.pushes, &opts)?
            } else {
                run_intermittent(&ctx, c.as_mut(), &cfg.pushes, cfg.strides)?
            };
            sink.emit("strides", &export::strides_table(&rec))?;
            if steps {
                sink.emit("steps", &export::steps_table(&rec))?;
            }
            if rec.diverged {
                return Err(Error::Divergence { stride: rec.strides.len() });
            }
            Ok(())
        }
        Cmd::Search(RunCmd::Run { .. }) => sink.emit("search", &export::search_table(&search(&cfg.search, None)?)),
        Cmd::Analyze(AnalyzeCmd::Eigen) => {
            let reports = eigen_sweep(&cfg.params(), &cfg.eigen.frequencies(), &cfg.eigen.controllers, cfg.speed, cfg.grid)?;
            sink.emit("eigen", &export::eigen_table(&reports))
        }
        Cmd::Analyze(AnalyzeCmd::Surface) => {
            let ctx = cfg.context()?;
            let mut all = Table::default();
            for spec in &cfg.surface.controllers {
                let f = ControllerFactory::from_spec(&ctx, spec)?;
                let t = export::surface_table(&push_response_surface(&ctx, &f, &cfg.surface.starts, &cfg.surface.ends, cfg.surface.w)?);
                all.columns = t.columns;
                all.rows.extend(t.rows);
            }
            sink.emit("surface", &all)
        }
        Cmd::Analyze(AnalyzeCmd::Region) => {
            let ctx = cfg.context()?;
            let proj: ProjectionConfig = cfg.region.projection.parse()?;
            let mut all = Table::default();
            for &sub in &cfg.region.subspaces {
                for &rc in &cfg.region.controllers {
                    let slice = controllable_region(&ctx, rc, cfg.region.variant, proj, sub, &cfg.region.options)?;
                    let t = export::region_table(&slice);
                    all.columns = t.columns;
                    all.rows.extend(t.rows);
                }
            }
            sink.emit("region", &all)
        }
        Cmd::Bench(RunCmd::Run { .. }) => {
            let ctx = cfg.context()?;
            let jobs: Vec<_> = cfg.bench.controllers.iter().flat_map(|c| cfg.bench.seeds.iter().map(move |&s| (c, s))).collect();
            let rows: Vec<Result<Vec<Value>>> = jobs
                .par_iter()
                .map(|&(spec, seed)| {
                    let mut c = spec.build(&ctx)?;
                    let r = run_benchmark(&ctx, c.as_mut(), seed, &cfg.bench.options)?;
                    Ok(vec![Value::String(r.controller.clone()), seed.into(), r.mean_e.into(), r.mean_u.into(), r.divergences.into(), r.diverged.into()])
                })
                .collect();
            let mut t = Table::new(&["controller", "seed", "mean_e", "mean_u_Nm", "divergences", "diverged"]);
            for r in rows {
                t.push(r?);
            }
            sink.emit("bench", &t)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Io(msg)) if msg.contains("Broken pipe") => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("gaitproj: {e}");
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}
