//! Result tables with a fixed column schema per experiment.

use std::io::Write;

use super::config::Experiment;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum Cell {
    Int(u64),
    Float(f64),
    Text(String),
}

impl Cell {
    /// CSV text. Floats use the shortest round-trip representation, with
    /// `inf`, `-inf` and `nan` for non-finite values.
    pub fn render(&self) -> String {
        match self {
            Cell::Int(i) => i.to_string(),
            Cell::Float(x) if x.is_nan() => "nan".to_string(),
            Cell::Float(x) if x.is_infinite() => if *x > 0.0 { "inf" } else { "-inf" }.to_string(),
            Cell::Float(x) => format!("{x:?}"),
            Cell::Text(s) => s.clone(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Cell::Int(i) => Some(*i as f64),
            Cell::Float(x) => Some(*x),
            Cell::Text(_) => None,
        }
    }
}

impl From<usize> for Cell {
    fn from(v: usize) -> Self {
        Cell::Int(v as u64)
    }
}

impl From<u64> for Cell {
    fn from(v: u64) -> Self {
        Cell::Int(v)
    }
}

impl From<f64> for Cell {
    fn from(v: f64) -> Self {
        Cell::Float(v)
    }
}

impl From<&str> for Cell {
    fn from(v: &str) -> Self {
        Cell::Text(v.to_string())
    }
}

impl From<String> for Cell {
    fn from(v: String) -> Self {
        Cell::Text(v)
    }
}

const SFT_SWEEP: &[&str] = &[
    "experiment", "swept", "d", "m", "n", "B", "k", "rho", "r", "eta", "trials", "seed", "solver", "test_k",
    "sim_error_mean", "sim_error_stderr", "divergence_count",
];
const OS_SWEEP: &[&str] = &[
    "experiment", "swept", "d", "m", "n", "B", "k", "rho", "r", "eta", "trials", "seed", "step_rule", "os_steps",
    "train_cov", "test_k", "sim_error_mean", "sim_error_stderr", "divergence_count", "init_radius_mean",
    "init_hessian_bound",
];
const THEORY_CURVE: &[&str] = &[
    "experiment", "d", "m", "n", "rho", "r", "eta", "gamma", "mu1", "beta", "q", "w1", "w2", "v1", "v2", "T12",
    "Bias", "T_inv", "T_inv_Sigma", "T_var", "T_var_Sigma", "F",
];
const COMPARE: &[&str] = &[
    "experiment", "d", "m", "n", "B", "beta", "rho", "r", "eta", "gamma", "mu1", "trials", "seed", "sim_exact_mean",
    "sim_exact_stderr", "sim_first_order_mean", "sim_first_order_stderr", "theory_F", "rel_gap_exact",
    "rel_gap_first_order", "divergence_count",
];
const GD_RATE: &[&str] = &[
    "experiment", "d", "m", "n", "B", "k", "rho", "r", "eta", "seed", "trial", "step", "gamma", "loss", "distance",
    "predicted_log_rate",
];

/// Column names of an experiment's CSV, in order. With `timing`, a trailing
/// `wall_time` column (seconds) is added.
pub fn schema(experiment: Experiment, timing: bool) -> Vec<&'static str> {
    let base = match experiment {
        e if e.is_sft_sweep() => SFT_SWEEP,
        e if e.is_os_sweep() => OS_SWEEP,
        Experiment::TheoryCurve => THEORY_CURVE,
        Experiment::CompareTheorySim => COMPARE,
        _ => GD_RATE,
    };
    let mut cols = base.to_vec();
    if timing {
        cols.push("wall_time");
    }
    cols
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub columns: Vec<&'static str>,
    pub rows: Vec<Vec<Cell>>,
}

impl Table {
    pub fn new(columns: Vec<&'static str>) -> Self {
        Self { columns, rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<Cell>) {
        assert_eq!(row.len(), self.columns.len(), "row width does not match the schema");
        self.rows.push(row);
    }

    pub fn column_index(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| *c == name)
    }

    /// Numeric values of one column (`None` if absent or textual).
    pub fn numeric_column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.column_index(name)?;
        self.rows.iter().map(|r| r[idx].as_f64()).collect()
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut writer = csv::Writer::from_writer(out);
        let io = |e: csv::Error| Error::Io(e.into());
        writer.write_record(&self.columns).map_err(io)?;
        for row in &self.rows {
            writer.write_record(row.iter().map(Cell::render)).map_err(io)?;
        }
        writer.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory cannot fail");
        String::from_utf8(buf).expect("cells are UTF-8")
    }
}
