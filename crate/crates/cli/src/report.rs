use std::fmt::Write as _;
use std::path::PathBuf;

use serde::Serialize;

use qsched_core::scheduler::CoreReport;
use qsched_core::sim::{Metrics, TraceSummary};

/// Outcome of one command, rendered as text or JSON.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunReport {
    pub command: String,
    pub controllers: Vec<ControllerSummary>,
    /// Per-core training results (`train`).
    pub cores: Vec<CoreReport>,
    /// Riccati diagnostics (`oracle`).
    pub oracle: Vec<OracleNode>,
    /// Files written by the command, in the order they were written.
    pub artifacts: Vec<PathBuf>,
    pub notes: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ControllerSummary {
    pub controller: String,
    pub rmse_a: Option<f64>,
    pub rmse_rel: Option<f64>,
    pub ripple_a: Option<f64>,
    pub max_settling_steps: Option<u64>,
    pub final_mean_dk: Option<f64>,
    pub trace: TraceSummary,
}

impl ControllerSummary {
    pub fn new(controller: &str, metrics: Option<&Metrics>, trace: &TraceSummary) -> Self {
        Self {
            controller: controller.to_string(),
            rmse_a: metrics.map(|m| m.rmse_a),
            rmse_rel: metrics.map(|m| m.rmse_rel),
            ripple_a: metrics.map(|m| m.ripple_a),
            max_settling_steps: metrics.and_then(|m| m.max_settling_steps),
            final_mean_dk: metrics.and_then(|m| m.final_mean_dk()),
            trace: trace.clone(),
        }
    }
}

/// Frozen-plant Riccati solution at one inductance.
#[derive(Debug, Clone, Serialize)]
pub struct OracleNode {
    pub label: String,
    pub theta_deg: Option<f64>,
    pub current_a: Option<f64>,
    pub inductance_h: f64,
    pub a: f64,
    pub b: f64,
    /// `[P11, P12, P22]` of the discounted Riccati fixed point.
    pub p: [f64; 3],
    pub gain: [f64; 2],
    pub pi_iterations: usize,
    /// `‖K_PI − K_ARE‖`.
    pub pi_gap: f64,
}

fn opt(v: Option<f64>, scale: f64, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{:.*}", prec, x * scale))
}

impl RunReport {
    pub fn new(command: &str) -> Self {
        Self {
            command: command.to_string(),
            ..Self::default()
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report is always serializable")
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "qsched {}", self.command);
        if !self.cores.is_empty() {
            let worst = self.cores.iter().map(|c| c.oracle_gap).fold(0.0, f64::max);
            let max_it = self.cores.iter().map(|c| c.iterations).max().unwrap_or(0);
            let _ = writeln!(
                out,
                "{} cores trained, at most {max_it} iterations, worst oracle gap {:.3e}",
                self.cores.len(),
                worst
            );
            let _ = writeln!(
                out,
                "{:>4} {:>4} {:>9} {:>7} {:>9} {:>4} {:>22} {:>22} {:>9}",
                "row", "col", "theta", "i(A)", "L(mH)", "it", "K", "K oracle", "gap"
            );
            for c in &self.cores {
                let _ = writeln!(
                    out,
                    "{:>4} {:>4} {:>9.4} {:>7.3} {:>9.4} {:>4} {:>10.4},{:>11.4} {:>10.4},{:>11.4} {:>9.2e}",
                    c.row,
                    c.col,
                    c.theta_deg,
                    c.current_a,
                    c.inductance_h * 1e3,
                    c.iterations,
                    c.gain[0],
                    c.gain[1],
                    c.oracle_gain[0],
                    c.oracle_gain[1],
                    c.oracle_gap
                );
            }
        }
        if !self.oracle.is_empty() {
            let _ = writeln!(
                out,
                "{:<12} {:>9} {:>7} {:>9} {:>9} {:>9} {:>33} {:>22} {:>3} {:>9}",
                "node", "theta", "i(A)", "L(mH)", "A", "B", "P = [P11 P12 P22]", "K", "PI", "PI gap"
            );
            for n in &self.oracle {
                let _ = writeln!(
                    out,
                    "{:<12} {:>9} {:>7} {:>9.4} {:>9.6} {:>9.6} {:>10.4} {:>10.4} {:>11.4} {:>10.4},{:>11.4} {:>3} {:>9.2e}",
                    n.label,
                    opt(n.theta_deg, 1.0, 4),
                    opt(n.current_a, 1.0, 3),
                    n.inductance_h * 1e3,
                    n.a,
                    n.b,
                    n.p[0],
                    n.p[1],
                    n.p[2],
                    n.gain[0],
                    n.gain[1],
                    n.pi_iterations,
                    n.pi_gap
                );
            }
        }
        if !self.controllers.is_empty() {
            let _ = writeln!(
                out,
                "{:<18} {:>10} {:>9} {:>10} {:>7} {:>11} {:>8} {:>8}",
                "controller", "RMSE(A)", "RMSE(%)", "ripple(A)", "settle", "mean|dK|", "updates", "aborted"
            );
            for c in &self.controllers {
                let _ = writeln!(
                    out,
                    "{:<18} {:>10} {:>9} {:>10} {:>7} {:>11} {:>8} {:>8}",
                    c.controller,
                    opt(c.rmse_a, 1.0, 5),
                    opt(c.rmse_rel, 100.0, 3),
                    opt(c.ripple_a, 1.0, 5),
                    c.max_settling_steps.map_or_else(|| "-".into(), |s| s.to_string()),
                    c.final_mean_dk.map_or_else(|| "-".into(), |d| format!("{d:.3e}")),
                    c.trace.online_updates,
                    if c.trace.aborted.is_some() { "yes" } else { "no" }
                );
            }
        }
        for note in &self.notes {
            let _ = writeln!(out, "note: {note}");
        }
        for a in &self.artifacts {
            let _ = writeln!(out, "wrote {}", a.display());
        }
        out
    }
}
