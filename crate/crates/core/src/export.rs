//! Column tables written as CSV or JSON lines. Column names carry units.

use std::io::Write;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::analysis::{EigenReport, RegionSlice, ResponseSurface};
use crate::error::{Error, Result};
use crate::gait::PeriodicGait;
use crate::harness::RunRecord;
use crate::linmodel::DIM;
use crate::search::SearchResult;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for Format {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Format::Csv),
            "json" => Ok(Format::Json),
            _ => Err(Error::Config(format!("unknown format {s:?} (csv or json)"))),
        }
    }
}

impl Format {
    pub fn extension(self) -> &'static str {
        match self {
            Format::Csv => "csv",
            Format::Json => "jsonl",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<Value>>,
}

fn num(x: f64) -> Value {
    serde_json::Number::from_f64(x).map(Value::Number).unwrap_or_else(|| Value::String(x.to_string()))
}

fn csv_cell(v: &Value) -> String {
    match v {
        Value::String(s) => s.clone(),
        Value::Null => String::new(),
        other => other.to_string(),
    }
}

impl Table {
    pub fn new(columns: &[&str]) -> Self {
        Table { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Value>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn write<W: Write>(&self, out: W, format: Format) -> Result<()> {
        match format {
            Format::Csv => {
                let mut w = csv::Writer::from_writer(out);
                let io = |e: csv::Error| Error::Io(e.to_string());
                w.write_record(&self.columns).map_err(io)?;
                for r in &self.rows {
                    w.write_record(r.iter().map(csv_cell)).map_err(io)?;
                }
                w.flush()?;
            }
            Format::Json => {
                let mut out = out;
                for r in &self.rows {
                    let obj: Map<String, Value> = self.columns.iter().cloned().zip(r.iter().cloned()).collect();
                    serde_json::to_writer(&mut out, &obj).map_err(|e| Error::Io(e.to_string()))?;
                    out.write_all(b"\n")?;
                }
            }
        }
        Ok(())
    }

    pub fn to_string(&self, format: Format) -> Result<String> {
        let mut buf = Vec::new();
        self.write(&mut buf, format)?;
        String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))
    }

    /// Reads back a CSV written by `write`; numeric cells become numbers.
    pub fn from_csv(text: &str) -> Result<Self> {
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let io = |e: csv::Error| Error::Io(e.to_string());
        let columns = r.headers().map_err(io)?.iter().map(String::from).collect();
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(io)?;
            rows.push(rec.iter().map(|c| c.parse::<f64>().map(num).unwrap_or_else(|_| Value::String(c.into()))).collect());
        }
        Ok(Table { columns, rows })
    }
}

/// Error entries: pelvis minus swing foot, pelvis minus stance foot, pelvis velocity.
const ERR_COLS: [&str; 6] = ["e_swing_sag_m", "e_swing_lat_m", "e_stance_sag_m", "e_stance_lat_m", "e_vel_sag_mps", "e_vel_lat_mps"];

pub fn strides_table(run: &RunRecord) -> Table {
    let mut cols = vec!["controller", "stride", "e_norm", "speed_mps", "target_speed_mps", "u_norm_Nm", "u_sq_Nm2", "foot_x_m", "foot_y_m"];
    cols.extend(ERR_COLS);
    let mut t = Table::new(&cols);
    for s in &run.strides {
        let mut row = vec![Value::String(run.controller.clone()), s.stride.into(), num(s.e_norm), num(s.speed), num(s.target_speed), num(s.u_norm), num(s.u_sq), num(s.footstep[0]), num(s.footstep[1])];
        row.extend(s.e.iter().map(|&x| num(x)));
        t.push(row);
    }
    t
}

pub fn steps_table(run: &RunRecord) -> Table {
    let mut cols = vec!["time_s", "stride", "k", "u_add_x_Nm", "u_add_y_Nm", "hip_x_Nm", "hip_y_Nm", "w_est_fx_N", "w_est_fy_N", "w_est_tx_Nm", "w_est_ty_Nm"];
    cols.extend(ERR_COLS);
    let q_cols: Vec<String> = (0..DIM).map(|i| format!("q{i}")).collect();
    let mut t = Table::new(&cols);
    t.columns.extend(q_cols);
    for s in &run.steps {
        let mut row = vec![num(s.time), s.stride.into(), s.k.into()];
        row.extend(s.u_add.iter().chain(&s.hip_torque).chain(&s.w_est).chain(&s.e).chain(&s.q).map(|&x| num(x)));
        t.push(row);
    }
    t
}

pub fn eigen_table(reports: &[EigenReport]) -> Table {
    let mut t = Table::new(&["frequency_hz", "controller", "index", "re", "im", "abs", "spectral_radius", "duplication_residual"]);
    for r in reports {
        for (i, &(re, im)) in r.eigenvalues.iter().enumerate() {
            t.push(vec![num(r.frequency), Value::String(r.controller.clone()), i.into(), num(re), num(im), num(re.hypot(im)), num(r.spectral_radius), num(r.duplication_residual)]);
        }
    }
    t
}

pub fn surface_table(s: &ResponseSurface) -> Table {
    let mut t = Table::new(&["controller", "start_frac", "end_frac", "e1", "e2", "e3", "diverged"]);
    for c in &s.cells {
        t.push(vec![Value::String(s.controller.clone()), num(c.start), num(c.end), num(c.errors[0]), num(c.errors[1]), num(c.errors[2]), c.diverged.into()]);
    }
    t
}

pub fn region_table(r: &RegionSlice) -> Table {
    let mut t = Table::new(&["tag", "axis_a", "axis_b", "ray", "radius", "a", "b", "area"]);
    for (i, (v, rad)) in r.vertices.iter().zip(&r.radii).enumerate() {
        t.push(vec![Value::String(r.tag.clone()), r.subspace.0.into(), r.subspace.1.into(), i.into(), num(*rad), num(v[0]), num(v[1]), num(r.area)]);
    }
    t
}

pub fn search_table(s: &SearchResult) -> Table {
    let mut t = Table::new(&["rank", "index", "flags", "alternatives", "constant_input", "category", "cost"]);
    for (i, r) in s.table.iter().enumerate() {
        t.push(vec![i.into(), r.index.into(), Value::String(r.flags.clone()), r.alternatives.into(), r.constant_input.into(), Value::String(r.category.to_string()), num(r.cost)]);
    }
    t
}

pub fn gait_table(g: &PeriodicGait) -> Table {
    let mut t = Table::new(&["entry", "value", "t_ds_s", "t_ss_s", "speed_mps"]);
    for (i, &x) in g.beta.iter().enumerate() {
        t.push(vec![i.into(), num(x), num(g.timing.t_ds), num(g.timing.t_ss), num(g.speed)]);
    }
    t
}
