//! CSV trajectories and run summaries.

use std::fmt::{self, Write as _};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Duration;

use sdre_eso::sdc::SystemDims;
use sdre_eso::sim::TrajectoryLog;

use crate::runner::CliError;
use crate::scenario::ModeName;

/// `t,x_1..,xhat_1..,xhat_ext_1..,u_1..,mode,J`
pub fn csv_header(dims: SystemDims) -> String {
    let (total, n) = (dims.state_dim(), dims.n());
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=total).map(|i| format!("x_{i}")));
    cols.extend((1..=total).map(|i| format!("xhat_{i}")));
    cols.extend((1..=n).map(|i| format!("xhat_ext_{i}")));
    cols.extend((1..=n).map(|i| format!("u_{i}")));
    cols.push("mode".into());
    cols.push("J".into());
    cols.join(",")
}

fn num(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("writing to a String");
}

pub fn csv_string(log: &TrajectoryLog, dims: SystemDims) -> String {
    let mut out = csv_header(dims);
    out.push('\n');
    for row in &log.rows {
        num(&mut out, row.t);
        for v in row.x.iter().chain(&row.xhat).chain(&row.xhat_ext).chain(&row.u) {
            out.push(',');
            num(&mut out, *v);
        }
        write!(out, ",{},", row.mode.code()).expect("writing to a String");
        num(&mut out, row.j);
        out.push('\n');
    }
    out
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn write_csv(log: &TrajectoryLog, dims: SystemDims, path: &Path) -> Result<(), CliError> {
    let mut w = BufWriter::new(File::create(path).map_err(io_err(path))?);
    w.write_all(csv_string(log, dims).as_bytes()).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

/// Pointwise min/max of `J(t)` over the ADRC family.
pub fn write_envelope(logs: &[TrajectoryLog], path: &Path) -> Result<(), CliError> {
    let mut out = String::from("t,J_min,J_max\n");
    let len = logs.iter().map(|l| l.rows.len()).min().unwrap_or(0);
    for i in 0..len {
        let (lo, hi) = logs
            .iter()
            .map(|l| l.rows[i].j)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), j| (lo.min(j), hi.max(j)));
        num(&mut out, logs[0].rows[i].t);
        out.push(',');
        num(&mut out, lo);
        out.push(',');
        num(&mut out, hi);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(io_err(path))
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub label: String,
    pub mode: ModeName,
    pub final_norm: f64,
    pub final_cost: f64,
    pub switch_count: usize,
    pub tie_count: usize,
    pub max_u: f64,
    /// Largest `‖x‖ + ‖u‖` along the run.
    pub gamma: f64,
    pub wall_time: Duration,
    pub chattering: bool,
}

impl RunSummary {
    pub fn from_log(label: &str, mode: ModeName, log: &TrajectoryLog, max_switches: usize, wall_time: Duration) -> Self {
        let final_norm = log
            .last()
            .map_or(0.0, |r| r.x.iter().map(|v| v * v).sum::<f64>().sqrt());
        Self {
            label: label.to_string(),
            mode,
            final_norm,
            final_cost: log.final_cost(),
            switch_count: log.switch_count(),
            tie_count: log.tie_events,
            max_u: log.max_u(),
            gamma: log.gamma(),
            wall_time,
            chattering: log.switch_count() > max_switches,
        }
    }

    fn key_values(&self, out: &mut String) {
        let p = &self.label;
        let _ = writeln!(out, "{p}.mode={}", self.mode);
        let _ = writeln!(out, "{p}.final_norm={:e}", self.final_norm);
        let _ = writeln!(out, "{p}.final_cost={}", self.final_cost);
        let _ = writeln!(out, "{p}.switches={}", self.switch_count);
        let _ = writeln!(out, "{p}.ties={}", self.tie_count);
        let _ = writeln!(out, "{p}.max_u={}", self.max_u);
        let _ = writeln!(out, "{p}.gamma={}", self.gamma);
        let _ = writeln!(out, "{p}.wall_time_s={:.3}", self.wall_time.as_secs_f64());
        let _ = writeln!(out, "{p}.chattering={}", self.chattering);
    }
}

fn table(runs: &[RunSummary]) -> String {
    let mut out = format!(
        "{:<12} {:<9} {:>12} {:>14} {:>8} {:>6} {:>10} {:>10} {:>8}\n",
        "run", "mode", "final |x|", "final J", "switches", "ties", "max |u|", "gamma", "wall s"
    );
    for r in runs {
        let _ = writeln!(
            out,
            "{:<12} {:<9} {:>12.3e} {:>14.6} {:>8} {:>6} {:>10.4} {:>10.4} {:>8.3}",
            r.label,
            r.mode.as_str(),
            r.final_norm,
            r.final_cost,
            r.switch_count,
            r.tie_count,
            r.max_u,
            r.gamma,
            r.wall_time.as_secs_f64()
        );
    }
    out
}

impl fmt::Display for RunSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut kv = String::new();
        self.key_values(&mut kv);
        write!(f, "{}\n{kv}", table(std::slice::from_ref(self)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareReport {
    pub runs: Vec<RunSummary>,
    pub adrc_min: f64,
    pub adrc_max: f64,
}

impl CompareReport {
    pub fn new(runs: Vec<RunSummary>) -> Self {
        let (adrc_min, adrc_max) = runs
            .iter()
            .filter(|r| r.mode == ModeName::Adrc)
            .map(|r| r.final_cost)
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), j| (lo.min(j), hi.max(j)));
        Self {
            runs,
            adrc_min,
            adrc_max,
        }
    }

    pub fn cost_of(&self, mode: ModeName) -> Option<f64> {
        self.runs.iter().find(|r| r.mode == mode).map(|r| r.final_cost)
    }

    /// `J(sdre) ≤ J(switching) ≤ max J(adrc)`.
    pub fn ordering_holds(&self) -> bool {
        match (self.cost_of(ModeName::Sdre), self.cost_of(ModeName::Switching)) {
            (Some(sdre), Some(sw)) => sdre <= sw && sw <= self.adrc_max,
            _ => false,
        }
    }

    /// `J(sdre)` at least 1% below the cheapest ADRC run.
    pub fn sdre_margin_holds(&self) -> bool {
        self.cost_of(ModeName::Sdre)
            .is_some_and(|sdre| sdre <= 0.99 * self.adrc_min)
    }
}

impl fmt::Display for CompareReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut kv = String::new();
        for r in &self.runs {
            r.key_values(&mut kv);
        }
        let _ = writeln!(kv, "adrc.j_min={}", self.adrc_min);
        let _ = writeln!(kv, "adrc.j_max={}", self.adrc_max);
        let _ = writeln!(kv, "ordering.sdre_le_switching_le_adrc_max={}", self.ordering_holds());
        let _ = writeln!(kv, "ordering.sdre_below_adrc_min_by_1pct={}", self.sdre_margin_holds());
        write!(
            f,
            "{}\nADRC envelope of final J: [{:.6}, {:.6}]\n\n{kv}",
            table(&self.runs),
            self.adrc_min,
            self.adrc_max
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepReport {
    pub runs: Vec<RunSummary>,
}

impl fmt::Display for SweepReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut kv = String::new();
        for r in &self.runs {
            r.key_values(&mut kv);
        }
        let worst_gamma = self.runs.iter().map(|r| r.gamma).fold(0.0, f64::max);
        let max_switches = self.runs.iter().map(|r| r.switch_count).max().unwrap_or(0);
        let _ = writeln!(kv, "sweep.runs={}", self.runs.len());
        let _ = writeln!(kv, "sweep.gamma={worst_gamma}");
        let _ = writeln!(kv, "sweep.max_switches={max_switches}");
        write!(f, "{}\n{kv}", table(&self.runs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let dims = SystemDims::new(2, 1).unwrap();
        assert_eq!(csv_header(dims), "t,x_1,x_2,xhat_1,xhat_2,xhat_ext_1,u_1,mode,J");
        let dims = SystemDims::new(2, 2).unwrap();
        assert_eq!(
            csv_header(dims),
            "t,x_1,x_2,x_3,x_4,xhat_1,xhat_2,xhat_3,xhat_4,xhat_ext_1,xhat_ext_2,u_1,u_2,mode,J"
        );
    }

    #[test]
    fn numbers_keep_seventeen_digits() {
        let mut s = String::new();
        num(&mut s, 0.1);
        assert_eq!(s, "1.0000000000000001e-1");
        assert_eq!(s.parse::<f64>().unwrap(), 0.1);
    }
}
